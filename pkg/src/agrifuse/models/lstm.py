"""Stacked LSTM regressor with a batch-normalised fully connected head.

Everything is plain numpy in float64: forward pass, backpropagation through
time and the ADAM update.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ..fusion import sequences_for_rnn
from ..io import FormatError, PathLike, _read_framed, _write_framed

log = logging.getLogger(__name__)

LSM_MAGIC = b"LSM1"
BN_EPS = 1e-5


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class LstmParams:
    hidden: int = 128
    layers: int = 2
    fc: Tuple[int, ...] = (128, 1)
    learning_rate: float = 0.001
    batch_size: int = 1024
    epochs: int = 50
    patience: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bn_momentum: float = 0.1
    bn_before_relu: bool = True
    clip_norm: Optional[float] = None

    def __post_init__(self):
        for name in ("hidden", "layers", "batch_size", "epochs", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if len(self.fc) != 2 or self.fc[1] != 1 or self.fc[0] < 1:
            raise ValueError(f"fc must be (width, 1), got {self.fc}")
        if self.patience >= self.epochs:
            raise ValueError(f"patience ({self.patience}) must be below epochs ({self.epochs})")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def last_unmasked(mask: np.ndarray) -> np.ndarray:
    """Index of the last usable timestep per sequence."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        bad = int(np.argmin(mask.any(axis=1)))
        raise ValueError(f"sequence {bad} has every timestep masked")
    return mask.shape[1] - 1 - np.argmax(mask[:, ::-1], axis=1)


@dataclass
class LstmModel:
    """Weights, batch-norm buffers and the input/target scaling of a fitted net."""

    params: LstmParams
    n_features: int
    weights: Dict[str, np.ndarray]
    running_mean: np.ndarray
    running_var: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: float = 0.0
    target_std: float = 1.0

    @classmethod
    def init(cls, n_features: int, params: LstmParams, seed: int) -> "LstmModel":
        rng = np.random.default_rng(seed)
        H, D = params.hidden, params.fc[0]
        w: Dict[str, np.ndarray] = {}
        k = 1.0 / np.sqrt(H)
        for layer in range(params.layers):
            n_in = n_features if layer == 0 else H
            w[f"W{layer}"] = rng.uniform(-k, k, (4 * H, n_in))
            w[f"U{layer}"] = rng.uniform(-k, k, (4 * H, H))
            w[f"b{layer}"] = rng.uniform(-k, k, 4 * H)
        w["fc1_w"] = rng.uniform(-k, k, (D, H))
        w["fc1_b"] = rng.uniform(-k, k, D)
        w["bn_gamma"] = np.ones(D)
        w["bn_beta"] = np.zeros(D)
        k2 = 1.0 / np.sqrt(D)
        w["fc2_w"] = rng.uniform(-k2, k2, (1, D))
        w["fc2_b"] = rng.uniform(-k2, k2, 1)
        return cls(params, n_features, w, np.zeros(D), np.ones(D), np.zeros(n_features), np.ones(n_features))

    def copy(self) -> "LstmModel":
        return LstmModel(
            self.params,
            self.n_features,
            {k: v.copy() for k, v in self.weights.items()},
            self.running_mean.copy(),
            self.running_var.copy(),
            self.feature_mean.copy(),
            self.feature_std.copy(),
            self.target_mean,
            self.target_std,
        )

    # -- scaling -------------------------------------------------------------

    def standardize(self, values: np.ndarray, mask: np.ndarray) -> np.ndarray:
        x = (np.asarray(values, dtype=np.float64) - self.feature_mean) / self.feature_std
        return np.where(np.asarray(mask, dtype=bool)[:, :, None], x, 0.0)

    # -- forward / backward --------------------------------------------------

    def forward(self, x: np.ndarray, mask: np.ndarray, train: bool, update_stats: bool = False):
        """Network output in standardised target units plus a backward cache.

        ``x`` must already be standardised and zero at masked timesteps.
        """
        p = self.params
        w = self.weights
        H = p.hidden
        B, T, _ = x.shape
        last = last_unmasked(mask)
        cache: dict = {"x": x, "last": last, "layers": [], "train": train}
        # eval uses einsum: unlike BLAS gemm, its per-row reduction order does not
        # depend on how many rows share the call, so predictions are batch independent
        mm = (lambda a, m: a @ m.T) if train else (lambda a, m: np.einsum("...i,oi->...o", a, m))
        inp = x
        for layer in range(p.layers):
            W, U, b = w[f"W{layer}"], w[f"U{layer}"], w[f"b{layer}"]
            xw = mm(inp, W) + b
            hs = np.zeros((B, T + 1, H))
            cs = np.zeros((B, T + 1, H))
            gates = np.empty((B, T, 4 * H))
            for t in range(T):
                z = xw[:, t] + mm(hs[:, t], U)
                gi = _sigmoid(z[:, :H])
                gf = _sigmoid(z[:, H : 2 * H])
                gg = np.tanh(z[:, 2 * H : 3 * H])
                go = _sigmoid(z[:, 3 * H :])
                cs[:, t + 1] = gf * cs[:, t] + gi * gg
                hs[:, t + 1] = go * np.tanh(cs[:, t + 1])
                gates[:, t, :H] = gi
                gates[:, t, H : 2 * H] = gf
                gates[:, t, 2 * H : 3 * H] = gg
                gates[:, t, 3 * H :] = go
            cache["layers"].append((inp, hs, cs, gates))
            inp = hs[:, 1:]
        r = inp[np.arange(B), last]
        a1 = mm(r, w["fc1_w"]) + w["fc1_b"]
        cache["r"] = r

        def bn(a):
            if train:
                mu = a.mean(axis=0)
                var = a.var(axis=0)
                if update_stats:
                    m = p.bn_momentum
                    unbiased = var * B / (B - 1) if B > 1 else var
                    self.running_mean = (1 - m) * self.running_mean + m * mu
                    self.running_var = (1 - m) * self.running_var + m * unbiased
            else:
                mu, var = self.running_mean, self.running_var
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (a - mu) * inv
            return w["bn_gamma"] * xhat + w["bn_beta"], (xhat, inv)

        if p.bn_before_relu:
            n1, bn_cache = bn(a1)
            act = np.maximum(n1, 0.0)
            relu_in = n1
        else:
            relu_in = a1
            n1, bn_cache = bn(np.maximum(a1, 0.0))
            act = n1
        out = mm(act, w["fc2_w"]) + w["fc2_b"]
        cache.update(a1=a1, relu_in=relu_in, bn=bn_cache, act=act)
        return out[:, 0], cache

    def backward(self, cache: dict, dout: np.ndarray) -> Dict[str, np.ndarray]:
        """Gradients of a loss w.r.t. every weight given ``dloss/doutput``."""
        p = self.params
        w = self.weights
        H = p.hidden
        g: Dict[str, np.ndarray] = {}
        dout = dout[:, None]
        B = dout.shape[0]
        g["fc2_w"] = dout.T @ cache["act"]
        g["fc2_b"] = dout.sum(axis=0)
        dact = dout @ w["fc2_w"]
        xhat, inv = cache["bn"]

        def bn_back(dn):
            g["bn_gamma"] = (dn * xhat).sum(axis=0)
            g["bn_beta"] = dn.sum(axis=0)
            dxhat = dn * w["bn_gamma"]
            if not cache["train"]:
                return dxhat * inv
            return inv / B * (B * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))

        if p.bn_before_relu:
            dn1 = dact * (cache["relu_in"] > 0)
            da1 = bn_back(dn1)
        else:
            drelu = bn_back(dact)
            da1 = drelu * (cache["relu_in"] > 0)
        g["fc1_w"] = da1.T @ cache["r"]
        g["fc1_b"] = da1.sum(axis=0)
        dr = da1 @ w["fc1_w"]

        T = cache["x"].shape[1]
        dseq = np.zeros((B, T, H))
        dseq[np.arange(B), cache["last"]] = dr
        for layer in reversed(range(p.layers)):
            inp, hs, cs, gates = cache["layers"][layer]
            U = w[f"U{layer}"]
            dz_all = np.empty((B, T, 4 * H))
            dU = np.zeros_like(U)
            dh_next = np.zeros((B, H))
            dc_next = np.zeros((B, H))
            for t in reversed(range(T)):
                gi = gates[:, t, :H]
                gf = gates[:, t, H : 2 * H]
                gg = gates[:, t, 2 * H : 3 * H]
                go = gates[:, t, 3 * H :]
                tc = np.tanh(cs[:, t + 1])
                dh = dseq[:, t] + dh_next
                dc = dc_next + dh * go * (1.0 - tc * tc)
                dz = dz_all[:, t]
                dz[:, :H] = dc * gg * gi * (1.0 - gi)
                dz[:, H : 2 * H] = dc * cs[:, t] * gf * (1.0 - gf)
                dz[:, 2 * H : 3 * H] = dc * gi * (1.0 - gg * gg)
                dz[:, 3 * H :] = dh * tc * go * (1.0 - go)
                dU += dz.T @ hs[:, t]
                dh_next = dz @ U
                dc_next = dc * gf
            flat_dz = dz_all.reshape(B * T, 4 * H)
            g[f"W{layer}"] = flat_dz.T @ inp.reshape(B * T, -1)
            g[f"U{layer}"] = dU
            g[f"b{layer}"] = flat_dz.sum(axis=0)
            if layer > 0:
                dseq = (flat_dz @ w[f"W{layer}"]).reshape(B, T, H)
        return g

    def loss_and_grad(self, x: np.ndarray, mask: np.ndarray, y: np.ndarray, update_stats: bool = False):
        """Train-mode MSE on standardised inputs/targets and its gradient."""
        out, cache = self.forward(x, mask, train=True, update_stats=update_stats)
        diff = out - y
        loss = float(np.mean(diff * diff))
        grads = self.backward(cache, 2.0 * diff / len(y))
        return loss, grads

    def predict(self, values: np.ndarray, mask: np.ndarray, batch_size: int = 4096) -> np.ndarray:
        """Eval-mode predictions in t/ha; rows are independent of batch composition."""
        values = np.asarray(values)
        mask = np.asarray(mask, dtype=bool)
        out = np.empty(len(values))
        for s in range(0, len(values), batch_size):
            x = self.standardize(values[s : s + batch_size], mask[s : s + batch_size])
            o, _ = self.forward(x, mask[s : s + batch_size], train=False)
            out[s : s + batch_size] = o
        return out * self.target_std + self.target_mean

    # -- persistence ---------------------------------------------------------

    def save(self, path: PathLike) -> None:
        names = sorted(self.weights)
        arrays = [self.weights[n] for n in names] + [self.running_mean, self.running_var]
        header = {
            "kind": "lstm",
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.params).items()},
            "n_features": self.n_features,
            "arrays": [[n, list(self.weights[n].shape)] for n in names]
            + [["running_mean", list(self.running_mean.shape)], ["running_var", list(self.running_var.shape)]],
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
        }
        payload = b"".join(np.asarray(a, dtype="<f4").tobytes() for a in arrays)
        _write_framed(path, LSM_MAGIC, header, payload)

    @classmethod
    def load(cls, path: PathLike) -> "LstmModel":
        header, payload = _read_framed(path, LSM_MAGIC)
        pd = dict(header["params"])
        pd["fc"] = tuple(pd["fc"])
        params = LstmParams(**pd)
        arrays = {}
        offset = 0
        for name, shape in header["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(payload[offset : offset + 4 * n], dtype="<f4").astype(np.float64).reshape(shape)
            offset += 4 * n
        if offset != len(payload):
            raise FormatError(f"{path}: payload length mismatch")
        rm = arrays.pop("running_mean")
        rv = arrays.pop("running_var")
        return cls(
            params,
            int(header["n_features"]),
            arrays,
            rm,
            rv,
            np.asarray(header["feature_mean"]),
            np.asarray(header["feature_std"]),
            float(header["target_mean"]),
            float(header["target_std"]),
        )


def lstm_forward(model: LstmModel, sequence: np.ndarray, mask: np.ndarray, mode: str = "eval") -> float:
    """Predict one pixel's yield from its ``(timesteps, features)`` sequence."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    sequence = np.asarray(sequence, dtype=np.float64)[None]
    mask = np.asarray(mask, dtype=bool)[None]
    if sequence.shape[2] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {sequence.shape[2]}")
    out, _ = model.forward(model.standardize(sequence, mask), mask, train=(mode == "train"))
    return float(out[0] * model.target_std + model.target_mean)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, grad in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(grad)
                self.v[k] = np.zeros_like(grad)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def feature_stats(values: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-feature mean/std over unmasked timesteps of the training rows."""
    sel = np.asarray(values, dtype=np.float64)[np.asarray(mask, dtype=bool)]
    if sel.size == 0:
        raise ValueError("no unmasked timesteps to compute feature statistics from")
    mean = sel.mean(axis=0)
    std = sel.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def lstm_fit(
    train: Tuple[np.ndarray, np.ndarray, np.ndarray],
    valid: Tuple[np.ndarray, np.ndarray, np.ndarray],
    params: LstmParams = LstmParams(),
    seed: int = 0,
    history: Optional[List[dict]] = None,
) -> LstmModel:
    """Train with ADAM on shuffled mini-batches; keep the best-validation weights.

    ``train``/``valid`` are ``(values, mask, target)`` triples with values
    shaped ``(n, timesteps, features)``. Training stops once validation MSE
    has not improved for ``params.patience`` consecutive epochs.
    """
    values, mask, target = (np.asarray(a) for a in train)
    v_values, v_mask, v_target = (np.asarray(a) for a in valid)
    if len(target) == 0 or len(v_target) == 0:
        raise ValueError("training and validation streams must be non-empty")
    model = LstmModel.init(values.shape[2], params, seed)
    model.feature_mean, model.feature_std = feature_stats(values, mask)
    model.target_mean = float(np.mean(target, dtype=np.float64))
    sd = float(np.std(target, dtype=np.float64))
    model.target_std = sd if sd > 0 else 1.0
    x_all = model.standardize(values, mask)
    y_all = (np.asarray(target, dtype=np.float64) - model.target_mean) / model.target_std
    opt = Adam(params.learning_rate, params.beta1, params.beta2, params.eps)

    best = model.copy()
    best_mse = np.inf
    stale = 0
    for epoch in range(params.epochs):
        losses = []
        index = np.arange(len(y_all))
        for xb, mb, ib in sequences_for_rnn(x_all, mask, index, params.batch_size, seed, epoch):
            loss, grads = model.loss_and_grad(xb, mb, y_all[ib], update_stats=True)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite training loss in epoch {epoch}")
            if params.clip_norm is not None:
                norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if norm > params.clip_norm:
                    grads = {k: g * (params.clip_norm / norm) for k, g in grads.items()}
            opt.step(model.weights, grads)
            losses.append(loss * len(ib))
        pred = model.predict(v_values, v_mask)
        mse = float(np.mean((pred - v_target) ** 2))
        if not np.isfinite(mse):
            raise DivergenceError(f"non-finite validation loss in epoch {epoch}")
        if history is not None:
            history.append({"epoch": epoch, "train_mse": float(np.sum(losses) / len(y_all)), "valid_mse": mse})
        log.debug("lstm epoch %d valid mse %.5f", epoch, mse)
        if mse < best_mse:
            best_mse, best, stale = mse, model.copy(), 0
        else:
            stale += 1
            if stale >= params.patience:
                break
    return best


class LstmRegressor(RegressorMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`lstm_fit`.

    ``X`` is ``(n, timesteps, features)``; pass the timestep mask via
    ``fit(..., mask=...)`` / ``predict(..., mask=...)`` (all-true if omitted).
    """

    def __init__(
        self,
        hidden: int = 128,
        layers: int = 2,
        fc_width: int = 128,
        learning_rate: float = 0.001,
        batch_size: int = 1024,
        epochs: int = 50,
        patience: int = 8,
        bn_before_relu: bool = True,
        clip_norm: Optional[float] = None,
        random_state: int = 0,
    ):
        self.hidden = hidden
        self.layers = layers
        self.fc_width = fc_width
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.bn_before_relu = bn_before_relu
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _params(self) -> LstmParams:
        return LstmParams(
            hidden=self.hidden,
            layers=self.layers,
            fc=(self.fc_width, 1),
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            patience=self.patience,
            bn_before_relu=self.bn_before_relu,
            clip_norm=self.clip_norm,
        )

    @staticmethod
    def _check(X, mask):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError(f"X must be (n, timesteps, features), got shape {X.shape}")
        mask = np.ones(X.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if mask.shape != X.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} != {X.shape[:2]}")
        return X, mask

    def fit(self, X, y, mask=None, eval_set=None, eval_mask=None):
        X, mask = self._check(X, mask)
        y = np.asarray(y, dtype=np.float64)
        if eval_set is None:
            Xv, mv, yv = X, mask, y
        else:
            Xv, mv = self._check(eval_set[0], eval_mask)
            yv = np.asarray(eval_set[1], dtype=np.float64)
        self.history_: List[dict] = []
        self.model_ = lstm_fit((X, mask, y), (Xv, mv, yv), self._params(), self.random_state, self.history_)
        self.n_features_in_ = X.shape[2]
        return self

    def predict(self, X, mask=None):
        check_is_fitted(self, "model_")
        X, mask = self._check(X, mask)
        return self.model_.predict(X, mask)
