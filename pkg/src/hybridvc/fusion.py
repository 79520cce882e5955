"""Regularized two-stream feature fusion network.

Architecture (sigmoid everywhere)::

    h_s   = sigmoid(A_s x_s + b_s)          spatial abstraction
    h_m   = sigmoid(A_m x_m + b_m)          motion abstraction
    fused = sigmoid(W_E [h_s; h_m] + b_E)   fusion layer, W_E = [W_E_s, W_E_m]
    score = sigmoid(O fused + b_O)          one score per class

Training minimises

    L + lambda1 * sum ||W||_F^2 + lambda2/2 * ||W_E||_{2,1} + lambda3 * ||W_E||_{1,1}

by proximal gradient descent: every weight takes a gradient step on the smooth
part, then W_E is passed through the joint row-group / elementwise shrinkage
operator :func:`prox_l21_l11`.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import DataError, VideoSample, pooled_arrays
from .numcore import ShapeError, make_rng, sigmoid

log = logging.getLogger(__name__)

ARRAY_NAMES = ("A_s", "b_s", "A_m", "b_m", "W_E", "b_E", "O", "b_O")
WEIGHT_NAMES = ("A_s", "A_m", "W_E", "O")
CHECKPOINT_MAGIC = b"HSFN"
CHECKPOINT_VERSION = 1
LOSSES = ("squared", "logistic")


class TrainingError(RuntimeError):
    pass


@dataclass
class FusionNet:
    A_s: np.ndarray
    b_s: np.ndarray
    A_m: np.ndarray
    b_m: np.ndarray
    W_E: np.ndarray
    b_E: np.ndarray
    O: np.ndarray
    b_O: np.ndarray

    def __post_init__(self):
        a_s, a_m = self.A_s.shape[0], self.A_m.shape[0]
        P, C = self.W_E.shape[0], self.O.shape[0]
        expect = {
            "b_s": (a_s,),
            "b_m": (a_m,),
            "W_E": (P, a_s + a_m),
            "b_E": (P,),
            "O": (C, P),
            "b_O": (C,),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.A_s.ndim != 2 or self.A_m.ndim != 2:
            raise ShapeError("abstraction weights must be matrices")

    @property
    def d_s(self) -> int:
        return self.A_s.shape[1]

    @property
    def d_m(self) -> int:
        return self.A_m.shape[1]

    @property
    def num_classes(self) -> int:
        return self.O.shape[0]

    @property
    def W_E_s(self) -> np.ndarray:
        return self.W_E[:, : self.A_s.shape[0]]

    @property
    def W_E_m(self) -> np.ndarray:
        return self.W_E[:, self.A_s.shape[0] :]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in ARRAY_NAMES]

    def copy(self) -> "FusionNet":
        return FusionNet(*(a.copy() for a in self.arrays()))

    @classmethod
    def zeros(cls, d_s: int, d_m: int, num_classes: int, abstract: int | tuple[int, int] = 200, fusion: int = 200) -> "FusionNet":
        a_s, a_m = (abstract, abstract) if np.ndim(abstract) == 0 else abstract
        return cls(
            np.zeros((a_s, d_s)), np.zeros(a_s),
            np.zeros((a_m, d_m)), np.zeros(a_m),
            np.zeros((fusion, a_s + a_m)), np.zeros(fusion),
            np.zeros((num_classes, fusion)), np.zeros(num_classes),
        )  # fmt: skip


def init_fusion(d_s, d_m, num_classes, rng: np.random.Generator, abstract=200, fusion=200) -> FusionNet:
    """Glorot-uniform weights, zero biases."""
    net = FusionNet.zeros(d_s, d_m, num_classes, abstract, fusion)
    for name in WEIGHT_NAMES:
        W = getattr(net, name)
        r = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
        W[...] = rng.uniform(-r, r, size=W.shape)
    return net


@dataclass
class FusionHyper:
    lambda1: float = 3e-5
    lambda2: float = 3e-5
    lambda3: float = 3e-5
    lr: float = 0.7
    momentum: float = 0.0
    epochs: int = 100
    batch_size: int = 10
    seed: int = 0
    abstract_width: int = 200
    fusion_width: int = 200
    loss: str = "squared"

    def validate(self) -> None:
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("regularization weights must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")
        if self.abstract_width < 1 or self.fusion_width < 1:
            raise ValueError("layer widths must be positive")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")


# -- norms and prox ----------------------------------------------------------


def norm_l21(W) -> float:
    """Sum of the Euclidean norms of the rows."""
    W = np.asarray(W, dtype=np.float64)
    return float(np.sqrt((W * W).sum(axis=1)).sum())


def norm_l11(W) -> float:
    return float(np.abs(np.asarray(W, dtype=np.float64)).sum())


def prox_l21_l11(V, tau2: float, tau3: float) -> np.ndarray:
    """Proximal map of ``tau2 * ||.||_{2,1} + tau3 * ||.||_{1,1}``.

    Each row is soft-thresholded elementwise by ``tau3`` and then shrunk as a
    group by ``max(0, 1 - tau2 / ||u||)``; rows whose thresholded norm is at
    most ``tau2`` come out exactly zero.
    """
    if tau2 < 0 or tau3 < 0:
        raise ValueError("thresholds must be non-negative")
    V = np.asarray(V, dtype=np.float64)
    U = np.abs(V) - tau3
    np.maximum(U, 0.0, out=U)
    U *= np.sign(V)
    norms = np.sqrt(np.einsum("ij,ij->i", U, U))
    scale = np.zeros_like(norms)
    keep = norms > tau2
    scale[keep] = 1.0 - tau2 / norms[keep]
    U *= scale[:, None]
    return U


def zero_rows(W) -> int:
    return int((~np.asarray(W).any(axis=1)).sum())


# -- forward / objective / gradients -----------------------------------------


def _batch(batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(batch, tuple):
        xs, xm, y = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in batch)
    else:
        xs, xm, y = pooled_arrays(list(batch))
    if xs.shape[0] == 0 or not xs.shape[0] == xm.shape[0] == y.shape[0]:
        raise ValueError("batch must be non-empty with matching sample counts")
    return xs, xm, y


def _forward(net: FusionNet, xs: np.ndarray, xm: np.ndarray):
    if xs.shape[1] != net.d_s or xm.shape[1] != net.d_m:
        raise ShapeError(f"inputs have dims ({xs.shape[1]}, {xm.shape[1]}), net expects ({net.d_s}, {net.d_m})")
    hs = sigmoid(xs @ net.A_s.T + net.b_s)
    hm = sigmoid(xm @ net.A_m.T + net.b_m)
    z = np.hstack([hs, hm])
    fused = sigmoid(z @ net.W_E.T + net.b_E)
    logits = fused @ net.O.T + net.b_O
    return hs, hm, z, fused, logits, sigmoid(logits)


def fusion_forward(net: FusionNet, x_s, x_m) -> np.ndarray:
    """Class scores in (0, 1) for one video's pooled spatial and motion features."""
    xs = np.asarray(x_s, dtype=np.float64)
    xm = np.asarray(x_m, dtype=np.float64)
    if xs.ndim != 1 or xm.ndim != 1:
        raise ShapeError("fusion_forward takes one pair of feature vectors; use fusion_predict for batches")
    return _forward(net, xs[None], xm[None])[-1][0]


def fusion_predict(net: FusionNet, xs, xm) -> np.ndarray:
    return _forward(net, np.atleast_2d(xs), np.atleast_2d(xm))[-1]


def _data_loss(logits, scores, y, loss: str) -> float:
    if loss == "squared":
        return float(((scores - y) ** 2).sum())
    # -[y log s + (1 - y) log(1 - s)] written on the logits
    return float((np.logaddexp(0.0, logits) - y * logits).sum())


def objective_terms(net: FusionNet, batch, hyper: FusionHyper) -> dict[str, float]:
    xs, xm, y = _batch(batch)
    *_, logits, scores = _forward(net, xs, xm)
    terms = {
        "loss": _data_loss(logits, scores, y, hyper.loss),
        "frobenius": hyper.lambda1 * sum(float((getattr(net, n) ** 2).sum()) for n in WEIGHT_NAMES),
        "l21": 0.5 * hyper.lambda2 * norm_l21(net.W_E),
        "l11": hyper.lambda3 * norm_l11(net.W_E),
    }
    terms["objective"] = terms["loss"] + terms["frobenius"] + terms["l21"] + terms["l11"]
    return terms


def fusion_objective(net: FusionNet, batch, hyper: FusionHyper) -> float:
    return objective_terms(net, batch, hyper)["objective"]


def smooth_part(net: FusionNet, batch, hyper: FusionHyper) -> float:
    t = objective_terms(net, batch, hyper)
    return t["loss"] + t["frobenius"]


def smooth_gradients(net: FusionNet, batch, hyper: FusionHyper) -> dict[str, np.ndarray]:
    """Gradient of ``loss + lambda1 * Phi`` with respect to every array of the net."""
    xs, xm, y = _batch(batch)
    hs, hm, z, fused, _, s = _forward(net, xs, xm)
    if hyper.loss == "squared":
        d_out = 2.0 * (s - y) * s * (1.0 - s)
    else:
        d_out = s - y
    g = {"O": d_out.T @ fused, "b_O": d_out.sum(axis=0)}
    d_fused = (d_out @ net.O) * fused * (1.0 - fused)
    g["W_E"] = d_fused.T @ z
    g["b_E"] = d_fused.sum(axis=0)
    dz = d_fused @ net.W_E
    a_s = hs.shape[1]
    d_hs = dz[:, :a_s] * hs * (1.0 - hs)
    d_hm = dz[:, a_s:] * hm * (1.0 - hm)
    g["A_s"], g["b_s"] = d_hs.T @ xs, d_hs.sum(axis=0)
    g["A_m"], g["b_m"] = d_hm.T @ xm, d_hm.sum(axis=0)
    for n in WEIGHT_NAMES:
        g[n] = g[n] + 2.0 * hyper.lambda1 * getattr(net, n)
    return g


def fusion_train_step(net: FusionNet, batch, hyper: FusionHyper, velocity: dict | None = None) -> FusionNet:
    """One proximal gradient step, in place; returns ``net``.

    All arrays move along the gradient of the smooth part (with momentum when
    ``velocity`` is given), then W_E is shrunk with thresholds ``lr * lambda2``
    and ``lr * lambda3``. Biases carry no structural penalty.
    """
    grads = smooth_gradients(net, batch, hyper)
    for name in reversed(ARRAY_NAMES):
        if not np.isfinite(grads[name]).all():
            raise TrainingError(f"non-finite gradient in layer {name}")
    for name in reversed(ARRAY_NAMES):
        W = getattr(net, name)
        if velocity is not None:
            v = velocity.setdefault(name, np.zeros_like(W))
            v *= hyper.momentum
            v -= hyper.lr * grads[name]
            W += v
        else:
            W -= hyper.lr * grads[name]
        if name == "W_E":
            W[...] = prox_l21_l11(W, hyper.lr * hyper.lambda2, hyper.lr * hyper.lambda3)
    return net


@dataclass
class FusionEpochStat:
    epoch: int
    objective: float
    loss: float
    frobenius: float
    l21: float
    l11: float
    zero_rows: int

    def line(self) -> str:
        return (
            f"epoch={self.epoch} objective={self.objective:.8g} loss={self.loss:.8g} "
            f"frobenius={self.frobenius:.8g} l21={self.l21:.8g} l11={self.l11:.8g} zero_rows={self.zero_rows}"
        )


def train_fusion(
    dataset,
    hyper: FusionHyper,
    num_classes: int | None = None,
    history: list | None = None,
) -> FusionNet:
    """Train for ``epochs`` passes of shuffled mini-batch proximal steps.

    ``dataset`` is a list of VideoSamples (pooled here) or an ``(xs, xm, y)``
    tuple of already pooled arrays.
    """
    hyper.validate()
    if isinstance(dataset, tuple):
        xs, xm, y = _batch(dataset)
    else:
        if not dataset:
            raise DataError("empty training set")
        try:
            xs, xm, y = pooled_arrays(list(dataset))
        except ValueError as exc:
            raise DataError(f"inconsistent training set: {exc}") from None
    if num_classes is not None and y.shape[1] != num_classes:
        raise DataError(f"labels have {y.shape[1]} classes, expected {num_classes}")
    rng = make_rng(hyper.seed)
    net = init_fusion(xs.shape[1], xm.shape[1], y.shape[1], rng, hyper.abstract_width, hyper.fusion_width)
    velocity = {} if hyper.momentum > 0 else None
    N = xs.shape[0]
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(N)
        for start in range(0, N, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            fusion_train_step(net, (xs[idx], xm[idx], y[idx]), hyper, velocity)
        if history is not None or log.isEnabledFor(logging.INFO):
            t = objective_terms(net, (xs, xm, y), hyper)
            stat = FusionEpochStat(epoch, t["objective"], t["loss"], t["frobenius"], t["l21"], t["l11"], zero_rows(net.W_E))
            log.info("fusion %s", stat.line())
            if history is not None:
                history.append(stat)
    return net


# -- checkpoints -------------------------------------------------------------


def save_fusion(path, net: FusionNet) -> None:
    """``HSFN`` u32 version u32 count, count x (u32 rows, u32 cols), then float64 arrays."""
    arrays = net.arrays()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(arrays)))
        for a in arrays:
            rows, cols = (a.shape[0], 1) if a.ndim == 1 else a.shape
            fh.write(struct.pack("<II", rows, cols))
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_fusion(path) -> FusionNet:
    raw = Path(path).read_bytes()
    head = struct.Struct("<4sII")
    if len(raw) < head.size:
        raise DataError(f"{path}: truncated checkpoint")
    magic, version, count = head.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION or count != len(ARRAY_NAMES):
        raise DataError(f"{path}: unsupported checkpoint (version {version}, {count} arrays)")
    off = head.size
    if len(raw) < off + 8 * count:
        raise DataError(f"{path}: truncated shape table")
    shapes = [struct.unpack_from("<II", raw, off + 8 * k) for k in range(count)]
    off += 8 * count
    need = off + 8 * sum(r * c for r, c in shapes)
    if len(raw) != need:
        raise DataError(f"{path}: expected {need} bytes, found {len(raw)}")
    arrays = []
    for name, (r, c) in zip(ARRAY_NAMES, shapes):
        a = np.frombuffer(raw, dtype="<f8", count=r * c, offset=off).copy()
        arrays.append(a if name.startswith("b_") else a.reshape(r, c))
        off += 8 * r * c
    try:
        return FusionNet(*arrays)
    except ShapeError as exc:
        raise DataError(f"{path}: {exc}") from None
