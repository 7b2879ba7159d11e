"""Tie-aware ROC-AUC and AUC-based backward/forward transfer."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata, spearmanr

from .errors import ConfigurationError, NumericError, ShapeError


def roc_auc(scores, labels) -> Optional[float]:
    """Mann-Whitney AUC with half credit for ties; ``None`` if a class is absent.

    Doubled midranks are integers, so the statistic is assembled in exact
    integer arithmetic and divided once.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.size != y.size or s.size < 1:
        raise ShapeError("scores and labels need equal non-zero length")
    if np.isnan(s).any():
        raise NumericError("NaN score")
    pos = y == 1
    if not np.all(pos | (y == 0)):
        raise ConfigurationError("labels must be binary")
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    doubled_ranks = np.rint(2.0 * rankdata(s, method="average")).astype(np.int64)
    two_u = int(doubled_ranks[pos].sum()) - n_pos * (n_pos + 1)
    return two_u / (2 * n_pos * n_neg)


def roc_auc_pairs(scores, labels) -> Optional[float]:
    """O(n^2) pair-counting reference for :func:`roc_auc`."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    ps, ns = s[y == 1], s[y == 0]
    if ps.size == 0 or ns.size == 0:
        return None
    diff = ps[:, None] - ns[None, :]
    concordant = int((diff > 0).sum())
    ties = int((diff == 0).sum())
    return (2 * concordant + ties) / (2 * ps.size * ns.size)


@dataclass(frozen=True)
class LabelTable:
    """One real value per label; undefined entries are NaN with ``defined`` False."""

    labels: tuple[str, ...]
    values: np.ndarray
    defined: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        values = np.asarray(self.values, dtype=np.float64)
        defined = np.asarray(self.defined, dtype=bool)
        if values.shape != (len(self.labels),) or defined.shape != values.shape:
            raise ShapeError("label table arrays must match the label list")
        object.__setattr__(self, "values", np.where(defined, values, np.nan))
        object.__setattr__(self, "defined", defined)

    @property
    def average(self) -> Optional[float]:
        if not self.defined.any():
            return None
        return float(self.values[self.defined].mean())

    def get(self, label: str) -> Optional[float]:
        k = self.labels.index(label)
        return float(self.values[k]) if self.defined[k] else None

    def as_dict(self) -> dict[str, Optional[float]]:
        return {name: self.get(name) for name in self.labels}

    @classmethod
    def from_dict(cls, d: dict[str, Optional[float]]) -> "LabelTable":
        names = tuple(d)
        defined = np.array([d[n] is not None for n in names], dtype=bool)
        values = np.array([np.nan if d[n] is None else d[n] for n in names], dtype=np.float64)
        return cls(names, values, defined)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "value", "defined"])
            for name, v, ok in zip(self.labels, self.values, self.defined):
                w.writerow([name, repr(float(v)) if ok else "", int(ok)])


AucTable = LabelTable


def auc_table(scores, labels, label_indices: Sequence[int], names: Sequence[str]) -> AucTable:
    """Per-label AUC for the columns ``label_indices`` of ``B x L`` score/label arrays."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    values, defined = [], []
    for k in label_indices:
        auc = roc_auc(scores[:, k], labels[:, k])
        values.append(np.nan if auc is None else auc)
        defined.append(auc is not None)
    return LabelTable(tuple(names[k] for k in label_indices), np.array(values), np.array(defined))


def backward_transfer(before: AucTable, after: AucTable) -> LabelTable:
    """Per-label ``after - before``; undefined if either side is."""
    if before.labels != after.labels:
        raise ConfigurationError("backward transfer needs tables over the same labels")
    defined = before.defined & after.defined
    return LabelTable(before.labels, after.values - before.values, defined)


def forward_transfer(unseen: AucTable) -> LabelTable:
    """Per-label AUC on a not-yet-seen domain minus the chance level 0.5."""
    return LabelTable(unseen.labels, unseen.values - 0.5, unseen.defined)


def aggregate(values) -> tuple[float, float, float]:
    """``(min, mean, max)`` over defined entries (NaN or ``None`` = undefined)."""
    if isinstance(values, LabelTable):
        v = values.values[values.defined]
    else:
        v = np.array([np.nan if x is None else x for x in values], dtype=np.float64)
        v = v[~np.isnan(v)]
    if v.size == 0:
        raise ConfigurationError("no defined values to aggregate")
    return float(v.min()), float(v.mean()), float(v.max())


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation (average ranks for ties); 0 when either input is constant."""
    if np.ptp(np.asarray(x, dtype=float)) == 0 or np.ptp(np.asarray(y, dtype=float)) == 0:
        return 0.0
    return float(spearmanr(x, y).statistic)
