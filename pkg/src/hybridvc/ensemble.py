"""Score tables and their late fusion.

Score file format (UTF-8 text, tab separated)::

    # hybridvc-scores v1
    # provenance: <model tag>
    id <TAB> <class name> <TAB> ...
    <video id> <TAB> <score> <TAB> ...

Scores are written with ``repr`` so a table survives a write/read cycle
bit-for-bit.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .features import DataError

SCORES_HEADER = "# hybridvc-scores v1"


class AlignmentError(DataError):
    pass


@dataclass(frozen=True, eq=False)
class ScoreTable:
    ids: tuple[str, ...]
    scores: np.ndarray
    provenance: str = ""
    class_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        scores = np.array(self.scores, dtype=np.float64, copy=True)
        if scores.ndim != 2 or scores.shape[0] != len(ids):
            raise ValueError(f"scores of shape {scores.shape} do not match {len(ids)} ids")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate video ids in score table")
        if not np.isfinite(scores).all():
            raise ValueError("score table contains non-finite values")
        names = tuple(self.class_names) or tuple(f"class{c}" for c in range(scores.shape[1]))
        if len(names) != scores.shape[1]:
            raise ValueError(f"{len(names)} class names for {scores.shape[1]} score columns")
        scores.flags.writeable = False
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "class_names", names)

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    def row(self, vid: str) -> np.ndarray:
        return self.scores[self.ids.index(vid)]

    def aligned_to(self, ids: Sequence[str]) -> np.ndarray:
        index = {v: r for r, v in enumerate(self.ids)}
        return self.scores[[index[v] for v in ids]]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class FusionWeights:
    values: tuple[float, ...]

    def __post_init__(self):
        v = tuple(float(x) for x in self.values)
        if not v or min(v) < 0 or abs(sum(v) - 1.0) > 1e-12:
            raise ValueError(f"fusion weights must be non-negative and sum to 1, got {v}")
        object.__setattr__(self, "values", v)

    @classmethod
    def normalized(cls, raw: Sequence[float]) -> "FusionWeights":
        raw = [float(x) for x in raw]
        total = sum(raw)
        if not raw or min(raw) < 0 or total <= 0:
            raise ValueError(f"cannot normalize weights {raw}")
        w = [x / total for x in raw]
        w[-1] = 1.0 - sum(w[:-1])
        return cls(tuple(w))

    @classmethod
    def uniform(cls, n: int) -> "FusionWeights":
        return cls.normalized([1.0] * n)


def _check_aligned(tables: Sequence[ScoreTable]) -> tuple[str, ...]:
    if not tables:
        raise ValueError("need at least one score table")
    ref = tables[0]
    for t in tables[1:]:
        diff = set(ref.ids) ^ set(t.ids)
        if diff:
            raise AlignmentError(
                f"tables {ref.provenance or '#0'} and {t.provenance or '?'} disagree on ids: {sorted(diff)}"
            )
        if t.num_classes != ref.num_classes:
            raise AlignmentError(f"class counts differ: {ref.num_classes} vs {t.num_classes}")
    return ref.ids


def weighted_fuse(tables: Sequence[ScoreTable], weights: FusionWeights | Sequence[float], provenance: str = "weighted") -> ScoreTable:
    """Convex combination of id-aligned score tables; rows follow the first table."""
    ids = _check_aligned(tables)
    if not isinstance(weights, FusionWeights):
        weights = FusionWeights(tuple(weights))
    if len(weights.values) != len(tables):
        raise ValueError(f"{len(weights.values)} weights for {len(tables)} tables")
    fused = np.zeros((len(ids), tables[0].num_classes))
    for w, t in zip(weights.values, tables):
        fused += w * t.aligned_to(ids)
    return ScoreTable(ids, fused, provenance, tables[0].class_names)


def average_fuse(tables: Sequence[ScoreTable], provenance: str = "average") -> ScoreTable:
    ids = _check_aligned(tables)
    fused = sum(t.aligned_to(ids) for t in tables) / len(tables)
    return ScoreTable(ids, fused, provenance, tables[0].class_names)


def minmax_scale(table: ScoreTable) -> ScoreTable:
    """Per-class min-max rescaling to [0, 1]; constant columns map to 0.5."""
    s = table.scores
    lo, hi = s.min(axis=0), s.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    out = np.where(hi > lo, (s - lo) / span, 0.5)
    return ScoreTable(table.ids, out, table.provenance, table.class_names)


def simplex_grid(n_models: int, step: float) -> list[tuple[float, ...]]:
    """All weight vectors with entries in multiples of ``step`` summing to 1."""
    if not 0 < step <= 1:
        raise ValueError("grid step must lie in (0, 1]")
    n = round(1.0 / step)
    if abs(n * step - 1.0) > 1e-9:
        raise ValueError(f"grid step {step} does not divide 1")
    out = []
    for combo in itertools.combinations(range(n + n_models - 1), n_models - 1):
        parts = np.diff([-1, *combo, n + n_models - 1]) - 1
        out.append(tuple(float(p) / n for p in parts))
    return out


def cross_validate_weights(
    tables: Sequence[ScoreTable],
    labels: Mapping,
    metric: str = "accuracy",
    step: float = 0.1,
) -> FusionWeights:
    """Exhaustive simplex-grid search for the fusion weights maximising ``metric``.

    The uniform vector is always a candidate. Ties go to the candidate nearest
    the uniform vector, then to the lexicographically smallest.
    """
    from . import metrics  # metrics imports this module

    _check_aligned(tables)
    if metric == "accuracy":
        classes = {int(np.argmax(labels[v])) if np.ndim(labels[v]) else int(labels[v]) for v in tables[0].ids}
        if len(classes) < 2:
            raise DataError("validation split contains a single class; accuracy cannot rank fusion weights")
        score_fn: Callable[[ScoreTable], float] = lambda t: metrics.accuracy(t, labels)
    elif metric in ("map", "mAP"):
        score_fn = lambda t: metrics.evaluate(t, labels).mean_ap
    else:
        raise ValueError(f"unknown metric {metric!r}")

    M = len(tables)
    uniform = FusionWeights.uniform(M).values
    candidates = simplex_grid(M, step)
    if not any(np.allclose(c, uniform, atol=1e-12) for c in candidates):
        candidates.append(uniform)
    best_key, best = None, None
    for w in candidates:
        value = score_fn(weighted_fuse(tables, FusionWeights.normalized(w)))
        dist = float(np.abs(np.subtract(w, uniform)).sum())
        key = (-value, round(dist, 12), w)
        if best_key is None or key < best_key:
            best_key, best = key, w
    return FusionWeights.normalized(best)


# -- score files -------------------------------------------------------------


def write_scores(path, table: ScoreTable) -> None:
    lines = [SCORES_HEADER, f"# provenance: {table.provenance}", "\t".join(["id", *table.class_names])]
    for vid, row in zip(table.ids, table.scores):
        lines.append("\t".join([vid, *(repr(float(x)) for x in row)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_scores(path) -> ScoreTable:
    path = Path(path)
    if not path.exists():
        raise DataError(f"score file not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != SCORES_HEADER:
        raise DataError(f"{path}: not a score file")
    provenance = ""
    body = []
    for line in lines[1:]:
        if line.startswith("# provenance:"):
            provenance = line.split(":", 1)[1].strip()
        elif line and not line.startswith("#"):
            body.append(line.split("\t"))
    if not body or body[0][0] != "id":
        raise DataError(f"{path}: missing column header")
    names = body[0][1:]
    ids, rows = [], []
    for rec in body[1:]:
        if len(rec) != len(names) + 1:
            raise DataError(f"{path}: record for {rec[0]} has {len(rec) - 1} scores, expected {len(names)}")
        ids.append(rec[0])
        try:
            rows.append([float(x) for x in rec[1:]])
        except ValueError:
            raise DataError(f"{path}: non-numeric score for {rec[0]}") from None
    try:
        return ScoreTable(tuple(ids), np.array(rows).reshape(len(ids), len(names)), provenance, tuple(names))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def labels_of(samples) -> dict[str, np.ndarray]:
    """Map video id to label vector for a list of VideoSamples."""
    return {s.id: s.label for s in samples}
