"""Classification accuracy and non-interpolated average precision.

Tie rules are fixed so results are reproducible: ``argmax`` picks the lowest
class index among equal scores, and rankings order equal scores by video id.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .ensemble import AlignmentError, ScoreTable


def _label_matrix(table: ScoreTable, labels: Mapping) -> np.ndarray:
    missing = set(table.ids) ^ set(labels)
    if missing:
        raise AlignmentError(f"score table and labels disagree on ids: {sorted(missing)[:10]}")
    C = table.num_classes
    Y = np.zeros((len(table.ids), C), dtype=np.int8)
    for r, vid in enumerate(table.ids):
        lab = labels[vid]
        if np.ndim(lab) == 0:
            Y[r, int(lab)] = 1
        else:
            lab = np.asarray(lab)
            if lab.shape != (C,):
                raise AlignmentError(f"video {vid}: label length {lab.shape} does not match {C} classes")
            Y[r] = lab
    return Y


def accuracy(table: ScoreTable, labels: Mapping) -> float:
    """Fraction of videos whose top-scoring class is the true class.

    ``labels`` maps video id to a class index or a one-hot vector.
    """
    Y = _label_matrix(table, labels)
    if (Y.sum(axis=1) != 1).any():
        raise ValueError("accuracy needs exactly one positive class per video")
    if len(table.ids) == 0:
        raise ValueError("accuracy of an empty table")
    return float((table.scores.argmax(axis=1) == Y.argmax(axis=1)).mean())


def average_precision(scores: Sequence[float], labels: Sequence[int], ids: Sequence[str] | None = None) -> float | None:
    """Mean over positives of precision at that positive's rank.

    Videos are ranked by descending score, ties broken by ascending id (by
    position when no ids are given). Returns ``None`` when there is no
    positive, since AP is undefined then.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d and of equal length")
    if not y.any():
        return None
    keys = list(ids) if ids is not None else list(range(len(s)))
    order = sorted(range(len(s)), key=lambda j: (-s[j], keys[j]))
    ranks = np.flatnonzero(y[order]) + 1
    # exact rational sum so the value does not depend on summation order
    total = sum(Fraction(k, int(r)) for k, r in enumerate(ranks, start=1))
    return float(total / len(ranks))


def mean_ap(aps: Sequence[float | None]) -> float:
    defined = [a for a in aps if a is not None]
    if len(defined) < len(aps):
        warnings.warn(f"{len(aps) - len(defined)} class(es) without positives excluded from mAP", stacklevel=2)
    if not defined:
        raise ValueError("no class has a defined AP")
    return float(sum(defined) / len(defined))


@dataclass
class EvalReport:
    num_videos: int
    accuracy: float | None
    per_class_ap: list[float | None]
    mean_ap: float | None
    class_names: list[str] = field(default_factory=list)
    confusion: list[list[int]] | None = None

    def to_text(self) -> str:
        lines = [f"videos: {self.num_videos}"]
        if self.accuracy is not None:
            lines.append(f"accuracy: {self.accuracy:.6f}")
        if self.mean_ap is not None:
            lines.append(f"mAP: {self.mean_ap:.6f}")
        for name, ap in zip(self.class_names, self.per_class_ap):
            lines.append(f"  AP[{name}]: {'n/a' if ap is None else f'{ap:.6f}'}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1) + "\n"


def evaluate(table: ScoreTable, labels: Mapping, class_names: Sequence[str] | None = None) -> EvalReport:
    """Accuracy (when every video has one label), per-class AP and mAP."""
    Y = _label_matrix(table, labels)
    C = table.num_classes
    names = list(class_names or table.class_names or [f"class{c}" for c in range(C)])
    aps = [average_precision(table.scores[:, c], Y[:, c], table.ids) for c in range(C)]
    acc = conf = None
    if len(Y) and (Y.sum(axis=1) == 1).all():
        pred, true = table.scores.argmax(axis=1), Y.argmax(axis=1)
        acc = float((pred == true).mean())
        cm = np.zeros((C, C), dtype=int)
        np.add.at(cm, (true, pred), 1)
        conf = cm.tolist()
    return EvalReport(
        num_videos=len(table.ids),
        accuracy=acc,
        per_class_ap=aps,
        mean_ap=mean_ap(aps) if any(a is not None for a in aps) else None,
        class_names=names,
        confusion=conf,
    )
