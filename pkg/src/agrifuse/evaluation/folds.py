"""Field-grouped, farm-stratified K-fold assignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np
from sklearn.model_selection import BaseCrossValidator

from ..grid import FieldDescriptor


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of: Dict[str, int]
    seed: int = 0

    def fields_in(self, fold: int) -> List[str]:
        return sorted(f for f, i in self.fold_of.items() if i == fold)

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "fold_of": dict(sorted(self.fold_of.items()))}


def assign_folds(pairs: Sequence[Tuple[str, str]], k: int = 10, seed: int = 0) -> FoldAssignment:
    """Greedy assignment of ``(field_id, farm_id)`` pairs to ``k`` folds.

    Farms are taken largest first (ties by farm id). Inside a farm the fields
    are visited in a seeded shuffle of their sorted ids, and each goes to the
    fold with the fewest fields of that farm, then the fewest fields overall,
    then the lowest index.
    """
    field_ids = [f for f, _ in pairs]
    if len(set(field_ids)) != len(field_ids):
        raise ValueError("field ids must be unique")
    if len(pairs) < k:
        raise ValueError(f"need at least k={k} fields, got {len(pairs)}")
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    farms: Dict[str, List[str]] = {}
    for f, farm in pairs:
        farms.setdefault(farm, []).append(f)
    rng = np.random.default_rng(seed)
    sizes = np.zeros(k, dtype=np.int64)
    fold_of: Dict[str, int] = {}
    for farm in sorted(farms, key=lambda name: (-len(farms[name]), name)):
        members = sorted(farms[farm])
        members = [members[i] for i in rng.permutation(len(members))]
        in_fold = np.zeros(k, dtype=np.int64)
        for f in members:
            best = min(range(k), key=lambda i: (in_fold[i], sizes[i], i))
            fold_of[f] = best
            in_fold[best] += 1
            sizes[best] += 1
    return FoldAssignment(k, fold_of, seed)


def make_folds(fields: Sequence[FieldDescriptor], k: int = 10, seed: int = 0) -> FoldAssignment:
    return assign_folds([(f.field_id, f.farm_id) for f in fields], k, seed)


class FarmStratifiedGroupKFold(BaseCrossValidator):
    """Splitter over pixel rows: ``groups`` are field ids, ``strata`` farm ids.

    ``split(X, y, groups, strata=...)`` yields ``(train_idx, test_idx)``;
    without ``strata`` every field is its own farm.
    """

    def __init__(self, n_splits: int = 10, seed: int = 0):
        self.n_splits = n_splits
        self.seed = seed

    def get_n_splits(self, X=None, y=None, groups=None):
        return self.n_splits

    def split(self, X, y=None, groups=None, strata=None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        if groups is None:
            raise ValueError("groups (field ids) are required")
        groups = np.asarray(groups)
        strata = groups if strata is None else np.asarray(strata)
        pairs: Dict[str, str] = {}
        for g, s in zip(groups.tolist(), strata.tolist()):
            if pairs.setdefault(str(g), str(s)) != str(s):
                raise ValueError(f"field {g} belongs to more than one farm")
        folds = assign_folds(sorted(pairs.items()), self.n_splits, self.seed)
        fold = np.array([folds.fold_of[str(g)] for g in groups.tolist()])
        for i in range(self.n_splits):
            yield np.nonzero(fold != i)[0], np.nonzero(fold == i)[0]
