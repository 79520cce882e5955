"""Self-checks against independent oracles.

* gradcheck: BPTT and fusion-network gradients against central differences
* prox: the closed-form shrinkage against exact coordinate descent on the
  per-row objective ``0.5 |x - v|^2 + tau2 |x|_2 + tau3 |x|_1``
* metrics: AP against a rank-counting definition, plus invariance of
  accuracy and AP under strictly increasing score maps
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import fusion as fz
from . import lstm as lm
from .ensemble import ScoreTable
from .metrics import accuracy, average_precision
from .numcore import make_rng

FD_STEP = 1e-5
GRAD_TOL = 1e-4
PROX_TOL = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


# -- gradients ---------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest entrywise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)).max())


def numeric_gradient(f: Callable[[], float], param: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` with respect to ``param``, perturbed in place."""
    g = np.zeros_like(param)
    for idx in np.ndindex(param.shape):
        orig = param[idx]
        param[idx] = orig + step
        up = f()
        param[idx] = orig - step
        down = f()
        param[idx] = orig
        g[idx] = (up - down) / (2 * step)
    return g


def random_lstm_instance(rng: np.random.Generator, max_hidden=6, layers=2, max_T=8, max_C=4, scale=0.5):
    D = int(rng.integers(2, 6))
    hidden = [int(rng.integers(2, max_hidden + 1)) for _ in range(layers)]
    C = int(rng.integers(2, max_C + 1))
    T = int(rng.integers(1, max_T + 1))
    stack = lm.LstmStack.zeros(D, hidden, C)
    for a in stack.arrays():
        a[...] = rng.uniform(-scale, scale, size=a.shape)
    seq = rng.normal(size=(T, D))
    label = int(rng.integers(C))
    return stack, seq, label


def lstm_gradcheck(rng: np.random.Generator, **sizes) -> dict[str, float]:
    stack, seq, label = random_lstm_instance(rng, **sizes)
    grad, _ = lm.lstm_bptt(stack, seq, label)
    loss = lambda: lm.lstm_bptt(stack, seq, label)[1]
    return {
        name: relative_error(g, numeric_gradient(loss, p))
        for (name, p), g in zip(stack.named_arrays(), grad.arrays())
    }


def random_fusion_instance(rng: np.random.Generator, max_dim=8, max_width=6, batch=4, loss="squared", scale=1.0):
    d_s, d_m = (int(rng.integers(2, max_dim + 1)) for _ in range(2))
    a_s, a_m, P = (int(rng.integers(2, max_width + 1)) for _ in range(3))
    C = int(rng.integers(2, 4))
    net = fz.FusionNet.zeros(d_s, d_m, C, (a_s, a_m), P)
    for a in net.arrays():
        a[...] = rng.uniform(-scale, scale, size=a.shape)
    xs, xm = rng.normal(size=(batch, d_s)), rng.normal(size=(batch, d_m))
    y = np.eye(C)[rng.integers(C, size=batch)]
    hyper = fz.FusionHyper(lambda1=float(rng.uniform(0.01, 0.1)), lambda2=0.1, lambda3=0.1, loss=loss)
    return net, (xs, xm, y), hyper


def fusion_gradcheck(rng: np.random.Generator, loss="squared", **sizes) -> dict[str, float]:
    net, batch, hyper = random_fusion_instance(rng, loss=loss, **sizes)
    grads = fz.smooth_gradients(net, batch, hyper)
    p = lambda: fz.smooth_part(net, batch, hyper)
    return {name: relative_error(grads[name], numeric_gradient(p, getattr(net, name))) for name in fz.ARRAY_NAMES}


def run_gradcheck(seed: int = 0, instances: int = 20) -> list[CheckResult]:
    rng = make_rng(seed)
    out = []
    worst = max(max(lstm_gradcheck(rng).values()) for _ in range(instances))
    out.append(CheckResult("lstm bptt vs finite differences", worst < GRAD_TOL, f"max rel err {worst:.3e} over {instances} instances"))
    worst = max(max(fusion_gradcheck(rng).values()) for _ in range(instances))
    out.append(CheckResult("fusion smooth part vs finite differences", worst < GRAD_TOL, f"max rel err {worst:.3e} over {instances} instances"))
    return out


# -- prox ---------------------------------------------------------------------


def row_objective(x, v, tau2, tau3) -> float:
    x, v = np.asarray(x, dtype=float), np.asarray(v, dtype=float)
    return 0.5 * float(((x - v) ** 2).sum()) + tau2 * float(np.sqrt((x * x).sum())) + tau3 * float(np.abs(x).sum())


def _coord_min(vi: float, rest_sq: float, tau2: float, tau3: float) -> float:
    # exact minimiser over t of 0.5 (t - vi)^2 + tau2 sqrt(t^2 + rest_sq) + tau3 |t|, by bisection on the
    # monotone (sub)derivative
    def slope(t: float, side: float) -> float:
        g = t - vi + tau3 * (math.copysign(1.0, t) if t else side)
        r = math.sqrt(t * t + rest_sq)
        return g + (tau2 * t / r if r > 0 else tau2 * side)

    if slope(0.0, 1.0) >= 0 and slope(0.0, -1.0) <= 0:
        return 0.0
    lo, hi = (0.0, abs(vi) + 1.0) if slope(0.0, 1.0) < 0 else (-abs(vi) - 1.0, 0.0)
    while True:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            return mid
        if slope(mid, 1.0) < 0:
            lo = mid
        else:
            hi = mid


def _coordinate_descent(v, tau2, tau3, x0, tol=1e-15, max_sweeps=100_000) -> list[float]:
    x = [float(a) for a in x0]
    for _ in range(max_sweeps):
        moved = 0.0
        for i in range(len(x)):
            rest = sum(x[j] * x[j] for j in range(len(x)) if j != i)
            new = _coord_min(float(v[i]), rest, tau2, tau3)
            moved = max(moved, abs(new - x[i]))
            x[i] = new
        if moved < tol:
            break
    return x


def prox_oracle(v, tau2: float, tau3: float) -> np.ndarray:
    """Minimise the per-row prox objective numerically, without the closed form.

    Coordinate descent can stall at the origin (the group norm is not
    differentiable there), so it is run from both ``v`` and ``0`` and the
    lower objective wins.
    """
    v = np.asarray(v, dtype=float)
    starts = (_coordinate_descent(v, tau2, tau3, v), _coordinate_descent(v, tau2, tau3, np.zeros_like(v)))
    return np.array(min(starts, key=lambda x: row_objective(x, v, tau2, tau3)))


def run_prox(seed: int = 0, rows: int = 1000) -> list[CheckResult]:
    rng = make_rng(seed)
    worst, law_ok, contract_ok = 0.0, True, True
    for _ in range(rows):
        n = int(rng.integers(1, 5))
        v = rng.normal(0.0, 1.5, size=n)
        tau2, tau3 = (float(t) for t in rng.uniform(0.0, 2.0, size=2))
        w = fz.prox_l21_l11(v[None, :], tau2, tau3)[0]
        worst = max(worst, float(np.abs(w - prox_oracle(v, tau2, tau3)).max()))
        u = np.sign(v) * np.maximum(np.abs(v) - tau3, 0.0)
        law_ok &= bool((not w.any()) == (np.linalg.norm(u) <= tau2))
        contract_ok &= bool(np.linalg.norm(w) <= np.linalg.norm(v))
    return [
        CheckResult("prox vs coordinate-descent minimiser", worst <= PROX_TOL, f"max abs err {worst:.3e} over {rows} rows"),
        CheckResult("prox zero-row law", law_ok, "rows zeroed iff thresholded norm <= tau2"),
        CheckResult("prox row-norm contraction", contract_ok, "||W_r|| <= ||V_r|| for every row"),
    ]


# -- metrics ------------------------------------------------------------------


def ap_oracle(scores, labels, ids=None) -> float | None:
    """AP from explicit rank counting with exact rational arithmetic."""
    n = len(scores)
    keys = list(ids) if ids is not None else list(range(n))

    def rank(i):
        return 1 + sum(1 for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and keys[j] < keys[i]))

    pos = [i for i in range(n) if labels[i]]
    if not pos:
        return None
    total = Fraction(0)
    for i in pos:
        r = rank(i)
        total += Fraction(sum(1 for j in pos if rank(j) <= r), r)
    return float(total / len(pos))


def random_monotone(rng: np.random.Generator) -> Callable[[np.ndarray], np.ndarray]:
    a, b, k = float(rng.uniform(0.1, 5)), float(rng.uniform(-3, 3)), int(rng.integers(0, 4))
    maps = [
        lambda s: a * s + b,
        lambda s: np.exp(a * s),
        lambda s: np.arctan(a * s) + b,
        lambda s: s**3 + a * s,
    ]
    return maps[k]


def run_metrics(seed: int = 0, instances: int = 50, transforms: int = 20) -> list[CheckResult]:
    rng = make_rng(seed)
    out = []
    ex = average_precision([0.9, 0.8, 0.7], [1, 0, 1])
    out.append(CheckResult("AP worked example", abs(ex - 5 / 6) <= 1e-9, f"AP={ex:.12f}, expected 0.833333333333"))

    mismatches = 0
    for _ in range(instances):
        n = int(rng.integers(2, 30))
        scores = np.round(rng.uniform(size=n), int(rng.integers(1, 3)))  # coarse rounding forces ties
        labels = rng.integers(0, 2, size=n)
        labels[int(rng.integers(n))] = 1
        ids = [f"v{int(i):03d}" for i in rng.permutation(n)]
        if average_precision(scores, labels, ids) != ap_oracle(list(scores), list(labels), ids):
            mismatches += 1
    out.append(CheckResult("AP vs rank-counting oracle", mismatches == 0, f"{instances - mismatches}/{instances} instances identical"))

    bad = 0
    for _ in range(transforms):
        n, C = int(rng.integers(5, 40)), int(rng.integers(2, 6))
        ids = tuple(f"v{i:03d}" for i in range(n))
        s = rng.normal(size=(n, C))
        y = rng.integers(0, C, size=n)
        labels = dict(zip(ids, y))
        f = random_monotone(rng)
        t1, t2 = ScoreTable(ids, s), ScoreTable(ids, f(s))
        same_acc = accuracy(t1, labels) == accuracy(t2, labels)
        same_ap = all(
            average_precision(s[:, c], y == c, ids) == average_precision(f(s)[:, c], y == c, ids)
            for c in range(C)
            if (y == c).any()
        )
        bad += not (same_acc and same_ap)
    out.append(CheckResult("accuracy/AP invariant under monotone maps", bad == 0, f"{transforms - bad}/{transforms} transforms"))
    return out


SUITES = {"gradcheck": run_gradcheck, "prox": run_prox, "metrics": run_metrics}


def run_suites(names, seed: int = 0) -> list[CheckResult]:
    results = []
    for name in names:
        results.extend(SUITES[name](seed=seed))
    return results
