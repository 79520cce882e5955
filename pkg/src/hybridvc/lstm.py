"""Stacked peephole LSTM with a softmax head on the last time step.

Each layer follows the recurrences

    i_t = sigmoid(W_xi x_t + W_hi h_{t-1} + W_ci c_{t-1} + b_i)
    f_t = sigmoid(W_xf x_t + W_hf h_{t-1} + W_cf c_{t-1} + b_f)
    c_t = f_t * c_{t-1} + i_t * tanh(W_xc x_t + W_hc h_{t-1} + b_c)
    o_t = sigmoid(W_xo x_t + W_ho h_{t-1} + W_co c_t + b_o)
    h_t = o_t * tanh(c_t)

with full H x H peephole matrices. Layer l > 1 reads the hidden sequence of
layer l - 1. Class probabilities are ``softmax(W_out h_T + b_out)`` computed
from the top layer at the final step only; training minimises cross-entropy
of those probabilities with mini-batch SGD and momentum.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import DataError, FeatureSequence
from .numcore import ShapeError, make_rng, sigmoid

log = logging.getLogger(__name__)

PARAM_NAMES = (
    "W_xi", "W_hi", "W_ci",
    "W_xf", "W_hf", "W_cf",
    "W_xc", "W_hc",
    "W_xo", "W_ho", "W_co",
    "b_i", "b_f", "b_c", "b_o",
)  # fmt: skip

CHECKPOINT_MAGIC = b"HSLM"
CHECKPOINT_VERSION = 1


@dataclass
class LstmLayerParams:
    W_xi: np.ndarray
    W_hi: np.ndarray
    W_ci: np.ndarray
    W_xf: np.ndarray
    W_hf: np.ndarray
    W_cf: np.ndarray
    W_xc: np.ndarray
    W_hc: np.ndarray
    W_xo: np.ndarray
    W_ho: np.ndarray
    W_co: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.W_xi.shape[1]

    @property
    def hidden(self) -> int:
        return self.W_xi.shape[0]

    @classmethod
    def zeros(cls, input_dim: int, hidden: int) -> "LstmLayerParams":
        return cls(**{n: np.zeros(_param_shape(n, input_dim, hidden)) for n in PARAM_NAMES})

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def validate(self) -> None:
        D, H = self.input_dim, self.hidden
        for n in PARAM_NAMES:
            a = getattr(self, n)
            if a.shape != _param_shape(n, D, H):
                raise ShapeError(f"{n} has shape {a.shape}, expected {_param_shape(n, D, H)}")

    # stacked views used by the vectorised passes; gate order i, f, c, o
    def _wx(self) -> np.ndarray:
        return np.vstack([self.W_xi, self.W_xf, self.W_xc, self.W_xo])

    def _wh(self) -> np.ndarray:
        return np.vstack([self.W_hi, self.W_hf, self.W_hc, self.W_ho])

    def _b(self) -> np.ndarray:
        return np.concatenate([self.b_i, self.b_f, self.b_c, self.b_o])


def _param_shape(name: str, input_dim: int, hidden: int) -> tuple[int, ...]:
    if name.startswith("b_"):
        return (hidden,)
    return (hidden, input_dim) if name[2] == "x" else (hidden, hidden)


@dataclass
class LstmStack:
    layers: list[LstmLayerParams]
    W_out: np.ndarray
    b_out: np.ndarray

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("an LSTM stack needs at least one layer")
        for k, layer in enumerate(self.layers):
            layer.validate()
            if k and layer.input_dim != self.layers[k - 1].hidden:
                raise ShapeError(f"layer {k + 1} expects input width {layer.input_dim}, layer {k} emits {self.layers[k - 1].hidden}")
        C = self.W_out.shape[0]
        if C < 2 or self.W_out.shape != (C, self.layers[-1].hidden) or self.b_out.shape != (C,):
            raise ShapeError(f"head shapes {self.W_out.shape}, {self.b_out.shape} do not fit {self.layers[-1].hidden} hidden units")

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def num_classes(self) -> int:
        return self.W_out.shape[0]

    @property
    def hidden_sizes(self) -> list[int]:
        return [layer.hidden for layer in self.layers]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for k, layer in enumerate(self.layers, start=1):
            out.extend((f"layer{k}.{n}", getattr(layer, n)) for n in PARAM_NAMES)
        out.append(("W_out", self.W_out))
        out.append(("b_out", self.b_out))
        return out

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.named_arrays()]

    def copy(self) -> "LstmStack":
        layers = [LstmLayerParams(**{n: getattr(l, n).copy() for n in PARAM_NAMES}) for l in self.layers]
        return LstmStack(layers, self.W_out.copy(), self.b_out.copy())

    def zeros_like(self) -> "LstmStack":
        layers = [LstmLayerParams.zeros(l.input_dim, l.hidden) for l in self.layers]
        return LstmStack(layers, np.zeros_like(self.W_out), np.zeros_like(self.b_out))

    @classmethod
    def zeros(cls, input_dim: int, hidden_sizes: Sequence[int], num_classes: int) -> "LstmStack":
        widths = [input_dim, *hidden_sizes]
        layers = [LstmLayerParams.zeros(widths[k], widths[k + 1]) for k in range(len(hidden_sizes))]
        return cls(layers, np.zeros((num_classes, widths[-1])), np.zeros(num_classes))


def init_stack(
    input_dim: int,
    hidden_sizes: Sequence[int],
    num_classes: int,
    rng: np.random.Generator,
    scale: float = 0.08,
    forget_bias: float = 1.0,
) -> LstmStack:
    """Weights uniform in [-scale, scale], biases zero except the forget gate."""
    stack = LstmStack.zeros(input_dim, hidden_sizes, num_classes)
    for layer in stack.layers:
        for n in PARAM_NAMES:
            if n.startswith("W_"):
                a = getattr(layer, n)
                a[...] = rng.uniform(-scale, scale, size=a.shape)
        layer.b_f[...] = forget_bias
    stack.W_out[...] = rng.uniform(-scale, scale, size=stack.W_out.shape)
    return stack


# -- forward -----------------------------------------------------------------


@dataclass
class StepCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray  # cell candidate tanh(...)
    o: np.ndarray
    c: np.ndarray


def lstm_step(layer: LstmLayerParams, x_t, h_prev, c_prev):
    """One time step of one layer. Returns ``(h_t, c_t, cache)``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    H = layer.hidden
    if x_t.shape != (layer.input_dim,) or h_prev.shape != (H,) or c_prev.shape != (H,):
        raise ShapeError(
            f"lstm_step got x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape}; "
            f"layer expects x ({layer.input_dim},), h/c ({H},)"
        )
    i = sigmoid(layer.W_xi @ x_t + layer.W_hi @ h_prev + layer.W_ci @ c_prev + layer.b_i)
    f = sigmoid(layer.W_xf @ x_t + layer.W_hf @ h_prev + layer.W_cf @ c_prev + layer.b_f)
    g = np.tanh(layer.W_xc @ x_t + layer.W_hc @ h_prev + layer.b_c)
    c = f * c_prev + i * g
    o = sigmoid(layer.W_xo @ x_t + layer.W_ho @ h_prev + layer.W_co @ c + layer.b_o)
    h = o * np.tanh(c)
    return h, c, StepCache(x_t, h_prev, c_prev, i, f, g, o, c)


@dataclass
class LayerTrace:
    """Per-step history of one layer; every array has one row per time step."""

    x: np.ndarray
    h: np.ndarray
    c: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray


@dataclass
class LstmState:
    layers: list[LayerTrace] = field(default_factory=list)
    logits: np.ndarray | None = None


def _run_layer(layer: LstmLayerParams, X: np.ndarray) -> LayerTrace:
    T, H = X.shape[0], layer.hidden
    pre_x = X @ layer._wx().T + layer._b()  # input projections for all steps at once
    Wh = layer._wh()
    Wci, Wcf, Wco = layer.W_ci, layer.W_cf, layer.W_co
    hs, cs = np.zeros((T, H)), np.zeros((T, H))
    gi, gf, gg, go = (np.zeros((T, H)) for _ in range(4))
    h, c = np.zeros(H), np.zeros(H)
    for t in range(T):
        a = pre_x[t] + Wh @ h
        i = sigmoid(a[:H] + Wci @ c)
        f = sigmoid(a[H : 2 * H] + Wcf @ c)
        g = np.tanh(a[2 * H : 3 * H])
        c = f * c + i * g
        o = sigmoid(a[3 * H :] + Wco @ c)
        h = o * np.tanh(c)
        hs[t], cs[t], gi[t], gf[t], gg[t], go[t] = h, c, i, f, g, o
    return LayerTrace(X, hs, cs, gi, gf, gg, go)


def _frames(seq) -> np.ndarray:
    X = seq.frames if isinstance(seq, FeatureSequence) else np.asarray(seq, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("LSTM input must be a non-empty T x dim sequence")
    return X


def lstm_forward(stack: LstmStack, seq) -> tuple[LstmState, np.ndarray]:
    """Run the whole sequence through every layer; return states and class probabilities."""
    X = _frames(seq)
    if X.shape[1] != stack.input_dim:
        raise ShapeError(f"sequence has {X.shape[1]} features, stack expects {stack.input_dim}")
    state = LstmState()
    inp = X
    for layer in stack.layers:
        trace = _run_layer(layer, inp)
        state.layers.append(trace)
        inp = trace.h
    state.logits = stack.W_out @ inp[-1] + stack.b_out
    z = state.logits - state.logits.max()
    p = np.exp(z)
    return state, p / p.sum()


def lstm_predict(stack: LstmStack, seqs) -> np.ndarray:
    return np.stack([lstm_forward(stack, s)[1] for s in seqs])


# -- backward ----------------------------------------------------------------


def _target(label, C: int) -> np.ndarray:
    if np.ndim(label) == 0:
        k = int(label)
        if not 0 <= k < C:
            raise ValueError(f"label {k} out of range for {C} classes")
        y = np.zeros(C)
        y[k] = 1.0
        return y
    y = np.asarray(label, dtype=np.float64)
    if y.shape != (C,):
        raise ValueError(f"label vector has shape {y.shape}, expected ({C},)")
    return y


def _layer_backward(layer: LstmLayerParams, tr: LayerTrace, dH: np.ndarray, grad: LstmLayerParams) -> np.ndarray:
    T, H = tr.h.shape
    c_prev = np.vstack([np.zeros(H), tr.c[:-1]])
    h_prev = np.vstack([np.zeros(H), tr.h[:-1]])
    Wh = layer._wh()
    dA = np.zeros((T, 4 * H))
    dh_next, dc_next = np.zeros(H), np.zeros(H)
    for t in range(T - 1, -1, -1):
        i, f, g, o, c = tr.i[t], tr.f[t], tr.g[t], tr.o[t], tr.c[t]
        dh = dH[t] + dh_next
        tc = np.tanh(c)
        da_o = dh * tc * o * (1.0 - o)
        # c_t reaches the loss through h_t, through the o_t peephole and through step t+1
        dc = dc_next + dh * o * (1.0 - tc * tc) + layer.W_co.T @ da_o
        da_i = dc * g * i * (1.0 - i)
        da_f = dc * c_prev[t] * f * (1.0 - f)
        da_g = dc * i * (1.0 - g * g)
        dA[t, :H], dA[t, H : 2 * H], dA[t, 2 * H : 3 * H], dA[t, 3 * H :] = da_i, da_f, da_g, da_o
        dh_next = Wh.T @ dA[t]
        dc_next = dc * f + layer.W_ci.T @ da_i + layer.W_cf.T @ da_f
    dAi, dAf, dAg, dAo = dA[:, :H], dA[:, H : 2 * H], dA[:, 2 * H : 3 * H], dA[:, 3 * H :]
    for gate, d in (("i", dAi), ("f", dAf), ("c", dAg), ("o", dAo)):
        getattr(grad, f"W_x{gate}")[...] += d.T @ tr.x
        getattr(grad, f"W_h{gate}")[...] += d.T @ h_prev
        getattr(grad, f"b_{gate}")[...] += d.sum(axis=0)
    grad.W_ci[...] += dAi.T @ c_prev
    grad.W_cf[...] += dAf.T @ c_prev
    grad.W_co[...] += dAo.T @ tr.c
    return dA @ layer._wx()


def lstm_bptt(stack: LstmStack, seq, label, grad: LstmStack | None = None) -> tuple[LstmStack, float]:
    """Cross-entropy loss at the final step and its exact gradient.

    ``label`` is a class index or a target vector of length C. When ``grad``
    is given the gradient is accumulated into it instead of a fresh stack.
    """
    y = _target(label, stack.num_classes)
    state, _ = lstm_forward(stack, seq)
    z = state.logits - state.logits.max()
    logp = z - np.log(np.exp(z).sum())
    loss = float(-(y * logp).sum())
    dlogits = np.exp(logp) * y.sum() - y

    if grad is None:
        grad = stack.zeros_like()
    top = state.layers[-1]
    grad.W_out += np.outer(dlogits, top.h[-1])
    grad.b_out += dlogits
    dH = np.zeros_like(top.h)
    dH[-1] = stack.W_out.T @ dlogits
    for layer, tr, g in zip(reversed(stack.layers), reversed(state.layers), reversed(grad.layers)):
        dH = _layer_backward(layer, tr, dH, g)
    return grad, loss


# -- training ----------------------------------------------------------------


@dataclass
class LstmTrainConfig:
    hidden_sizes: tuple[int, ...] = (1024, 512)
    lr: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 10
    epochs: int = 10
    max_iters: int | None = None
    clip: float = 5.0
    seed: int = 0
    init_scale: float = 0.08
    forget_bias: float = 1.0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or (self.max_iters is not None and self.max_iters < 0):
            raise ValueError("batch_size >= 1, epochs >= 0 and max_iters >= 0 required")
        if self.clip <= 0:
            raise ValueError("clip threshold must be positive")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("need at least one layer of positive width")


@dataclass
class EpochStat:
    epoch: int
    iterations: int
    loss: float


def _check_dataset(dataset, C: int | None = None) -> tuple[int, int]:
    if not dataset:
        raise DataError("empty training set")
    dims = {_frames(seq).shape[1] for seq, _ in dataset}
    if len(dims) != 1:
        raise DataError(f"inconsistent feature dims in training set: {sorted(dims)}")
    if C is None:
        labels = [lab for _, lab in dataset]
        C = max(int(np.argmax(l)) if np.ndim(l) else int(l) for l in labels) + 1
        C = max(C, 2)
    for seq, lab in dataset:
        try:
            _target(lab, C)
        except ValueError as exc:
            raise DataError(str(exc)) from None
    return dims.pop(), C


def train_lstm(
    dataset,
    cfg: LstmTrainConfig,
    num_classes: int | None = None,
    history: list | None = None,
) -> LstmStack:
    """Mini-batch SGD with momentum and per-element gradient clipping.

    ``dataset`` is a list of ``(sequence, label)`` pairs. The batch gradient is
    the mean of per-sequence gradients, summed in batch order.
    """
    cfg.validate()
    D, C = _check_dataset(dataset, num_classes)
    rng = make_rng(cfg.seed)
    stack = init_stack(D, cfg.hidden_sizes, C, rng, cfg.init_scale, cfg.forget_bias)
    params = stack.arrays()
    velocity = [np.zeros_like(p) for p in params]
    budget = cfg.max_iters if cfg.max_iters is not None else cfg.epochs * -(-len(dataset) // cfg.batch_size)
    it = 0
    for epoch in range(1, cfg.epochs + 1):
        if it >= budget:
            break
        order = rng.permutation(len(dataset))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            if it >= budget:
                break
            batch = order[start : start + cfg.batch_size]
            grad = stack.zeros_like()
            for j in batch:
                seq, lab = dataset[j]
                _, loss = lstm_bptt(stack, seq, lab, grad)
                total += loss
            seen += len(batch)
            for p, v, g in zip(params, velocity, grad.arrays()):
                g = np.clip(g / len(batch), -cfg.clip, cfg.clip)
                v *= cfg.momentum
                v -= cfg.lr * g
                p += v
            it += 1
        stat = EpochStat(epoch, it, total / max(seen, 1))
        log.info("lstm epoch %d iters %d loss %.6f", stat.epoch, stat.iterations, stat.loss)
        if history is not None:
            history.append(stat)
    if not all(np.isfinite(p).all() for p in params):
        raise FloatingPointError("LSTM parameters became non-finite during training")
    return stack


# -- checkpoints -------------------------------------------------------------


def save_lstm(path, stack: LstmStack) -> None:
    """``HSLM`` u32 version u32 K u32 D_in u32 C, K x u32 widths, then float64 arrays in declared order."""
    K = len(stack.layers)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, K, stack.input_dim, stack.num_classes))
        fh.write(struct.pack(f"<{K}I", *stack.hidden_sizes))
        for a in stack.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_lstm(path) -> LstmStack:
    raw = Path(path).read_bytes()
    head = struct.Struct("<4sIIII")
    if len(raw) < head.size:
        raise DataError(f"{path}: truncated checkpoint")
    magic, version, K, D, C = head.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = head.size
    if K < 1 or len(raw) < off + 4 * K:
        raise DataError(f"{path}: bad layer table")
    widths = struct.unpack_from(f"<{K}I", raw, off)
    off += 4 * K
    stack = LstmStack.zeros(D, widths, C)
    arrays = stack.arrays()
    need = off + 8 * sum(a.size for a in arrays)
    if len(raw) != need:
        raise DataError(f"{path}: expected {need} bytes, found {len(raw)}")
    for a in arrays:
        a[...] = np.frombuffer(raw, dtype="<f8", count=a.size, offset=off).reshape(a.shape)
        off += 8 * a.size
    return stack
