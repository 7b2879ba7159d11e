"""Joint-training replay, binarized-Fisher EWC and partial-label LWF.

Each strategy reduces to data preparation plus a hook for
:func:`clshift.optim.train_loop`: JT changes the training set, EWC adds an
``extra_loss`` on the parameter vector, LWF swaps the batch objective.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .data import Dataset
from .errors import ConfigurationError, ShapeError
from .nn import (
    Layout,
    MlpModel,
    ParameterVector,
    cell_weights,
    forward,
    load_record,
    loss_and_gradient,
    per_sample_gradient_matrix,
    save_record,
    weighted_bce,
)


# -- EWC ----------------------------------------------------------------------

@dataclass(frozen=True)
class FisherDiagonal:
    values: np.ndarray
    n_samples: int
    layout: Layout

    def save(self, path) -> None:
        save_record(path, "fisher_diagonal", self.values, self.layout, n_samples=self.n_samples)

    @classmethod
    def load(cls, path) -> "FisherDiagonal":
        header, values, layout, _ = load_record(path, "fisher_diagonal")
        return cls(values, header["n_samples"], layout)


def fisher_diagonal(model: MlpModel, data: Dataset, mask=None, chunk: int = 256) -> FisherDiagonal:
    """Empirical Fisher diagonal at the model's current parameters.

    Mean over samples of the squared gradient of the per-sample
    log-likelihood (observed labels), each sample restricted to ``mask`` or
    to its own label mask.
    """
    n = len(data)
    if n == 0:
        raise ConfigurationError("Fisher estimate needs at least one sample")
    total = np.zeros(model.n_params)
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        m = data.masks[sl] if mask is None else mask
        # log-likelihood gradient is the negative loss gradient
        g = -per_sample_gradient_matrix(model, data.features[sl], data.labels[sl], m)
        total += (g * g).sum(axis=0)
    return FisherDiagonal(total / n, n, model.layout)


@dataclass(frozen=True)
class ThresholdRule:
    kind: Literal["absolute", "quantile"] = "absolute"
    value: float = 0.001

    def __post_init__(self):
        if self.kind == "quantile":
            if not 0.0 < self.value < 1.0:
                raise ConfigurationError("quantile must lie in (0, 1)")
        elif self.kind == "absolute":
            if self.value < 0:
                raise ConfigurationError("absolute threshold must be non-negative")
        else:
            raise ConfigurationError(f"unknown threshold rule {self.kind!r}")


def binarize_fisher(fisher: FisherDiagonal | np.ndarray, rule: ThresholdRule) -> tuple[np.ndarray, float]:
    """0/1 precision mask ``F > rho`` and the resolved ``rho``."""
    values = fisher.values if isinstance(fisher, FisherDiagonal) else np.asarray(fisher, dtype=np.float64)
    if rule.kind == "quantile":
        rho = float(np.quantile(values, rule.value))
    else:
        rho = float(rule.value)
    return (values > rho).astype(np.float64), rho


@dataclass(frozen=True)
class GaussianPrior:
    """Diagonal Gaussian prior ``lam * sum(precision * (theta - mean)**2)``.

    ``precision`` is the binarized Fisher mask, or the raw Fisher diagonal for
    the magnitude-weighted variant.
    """

    mean: np.ndarray
    precision: np.ndarray
    lam: float
    rho: float
    rule: ThresholdRule
    layout: Layout
    weighted: bool = False

    def __post_init__(self):
        if self.mean.shape != self.precision.shape:
            raise ShapeError("prior mean and precision differ in length")
        if self.lam < 0:
            raise ConfigurationError("lambda must be non-negative")

    @property
    def n_anchored(self) -> int:
        return int(np.count_nonzero(self.precision))

    def save(self, path) -> None:
        save_record(path, "gaussian_prior", self.mean, self.layout,
                    arrays={"precision": self.precision},
                    lam=self.lam, rho=self.rho, rule=[self.rule.kind, self.rule.value],
                    weighted=self.weighted)

    @classmethod
    def load(cls, path) -> "GaussianPrior":
        header, mean, layout, extra = load_record(path, "gaussian_prior")
        return cls(mean, extra["precision"], header["lam"], header["rho"],
                   ThresholdRule(*header["rule"]), layout, header["weighted"])


def make_prior(model: MlpModel, fisher: FisherDiagonal, rule: ThresholdRule, lam: float,
               weighted: bool = False) -> GaussianPrior:
    mask, rho = binarize_fisher(fisher, rule)
    precision = fisher.values * mask if weighted else mask
    return GaussianPrior(model.theta.copy(), precision, float(lam), rho, rule, model.layout, weighted)


def ewc_penalty(params, prior: GaussianPrior) -> tuple[float, np.ndarray]:
    theta = params.values if isinstance(params, ParameterVector) else np.asarray(params, dtype=np.float64)
    if theta.shape != prior.mean.shape:
        raise ShapeError(f"parameter length {theta.shape} != prior length {prior.mean.shape}")
    diff = theta - prior.mean
    weighted = prior.precision * diff
    return float(prior.lam * np.dot(weighted, diff)), 2.0 * prior.lam * weighted


def ewc_hook(prior: GaussianPrior):
    return lambda theta: ewc_penalty(theta, prior)


# -- LWF ----------------------------------------------------------------------

@dataclass(frozen=True)
class SoftTargets:
    """Frozen previous-model outputs on the new task's inputs.

    ``values[k, j]`` is the recorded probability for sample ``sample_ids[k]``
    and the ``j``-th regularized label.
    """

    sample_ids: np.ndarray
    values: np.ndarray
    regularized: np.ndarray

    @property
    def label_indices(self) -> np.ndarray:
        return np.flatnonzero(self.regularized)

    def full(self, rows) -> np.ndarray:
        """Soft targets spread over the union label space (zeros elsewhere)."""
        out = np.zeros((len(rows), self.regularized.size))
        out[:, self.label_indices] = self.values[rows]
        return out

    def write_csv(self, path, label_names=None) -> None:
        idx = self.label_indices
        names = [label_names[k] if label_names else f"y_{k}" for k in idx]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id"] + names)
            for sid, row in zip(self.sample_ids, self.values):
                w.writerow([int(sid)] + [repr(float(v)) for v in row])


def record_soft_targets(previous: MlpModel, data: Dataset, regularized) -> SoftTargets:
    regularized = np.asarray(regularized, dtype=bool)
    if regularized.shape != (previous.n_outputs,):
        raise ShapeError("regularized-label vector must cover every model output")
    if not regularized.any():
        raise ConfigurationError("LWF needs at least one regularized label")
    probs = forward(previous, data.features)
    values = probs[:, regularized].copy()
    values.setflags(write=False)
    return SoftTargets(data.sample_ids.copy(), values, regularized.copy())


def _lwf_weights(hard_mask, regularized, lam: float, shape):
    if not np.asarray(regularized, dtype=bool).any():
        raise ConfigurationError("LWF needs at least one regularized label")
    w_hard = cell_weights(hard_mask, shape)
    w_soft = lam * cell_weights(regularized, shape) if lam != 0 else np.zeros(shape)
    return w_hard, w_soft


def lwf_loss(probabilities, hard_targets, current_mask, soft_values, regularized, lam: float) -> float:
    """Masked BCE on the hard labels plus ``lam`` times mean BCE against soft targets.

    ``soft_values`` is ``B x k`` over the ``k`` regularized labels.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    regularized = np.asarray(regularized, dtype=bool)
    soft_values = np.asarray(soft_values, dtype=np.float64)
    if soft_values.shape != (p.shape[0], int(regularized.sum())):
        raise ShapeError(f"soft targets {soft_values.shape} do not align with batch {p.shape}")
    w_hard, w_soft = _lwf_weights(current_mask, regularized, lam, p.shape)
    hard = np.where(w_hard > 0, np.asarray(hard_targets, dtype=np.float64), 0.0)
    soft = np.zeros_like(p)
    soft[:, regularized] = soft_values
    return weighted_bce(p, hard, w_hard) + weighted_bce(p, soft, w_soft)


def lwf_loss_and_gradient(model: MlpModel, x, hard_targets, current_mask, soft_values,
                          regularized, lam: float) -> tuple[float, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    regularized = np.asarray(regularized, dtype=bool)
    shape = (x.shape[0], model.n_outputs)
    soft_values = np.asarray(soft_values, dtype=np.float64)
    if soft_values.shape != (shape[0], int(regularized.sum())):
        raise ShapeError(f"soft targets {soft_values.shape} do not align with batch {shape}")
    w_hard, w_soft = _lwf_weights(current_mask, regularized, lam, shape)
    hard = np.where(w_hard > 0, np.asarray(hard_targets, dtype=np.float64), 0.0)
    soft = np.zeros(shape)
    soft[:, regularized] = soft_values
    # BCE is affine in the target, so two weighted terms on one cell merge into
    # a single term with summed weight and weight-averaged target
    w = w_hard + w_soft
    t = np.divide(w_hard * hard + w_soft * soft, w, out=np.zeros(shape), where=w > 0)
    return loss_and_gradient(model, x, t, w)


def lwf_objective(soft: SoftTargets, lam: float):
    """Batch objective for ``train_loop``; ``soft`` must be aligned row-by-row with the training set."""

    def objective(model, data, idx):
        if not np.array_equal(soft.sample_ids[idx], data.sample_ids[idx]):
            raise ShapeError("soft targets are not aligned with the training samples")
        return lwf_loss_and_gradient(model, data.features[idx], data.labels[idx],
                                     data.masks[idx], soft.values[idx], soft.regularized, lam)

    return objective


# -- JT -----------------------------------------------------------------------

@dataclass(frozen=True)
class JtMixture:
    fraction: float
    selected_groups: np.ndarray
    data: Dataset


def jt_mix(source: Dataset, target: Dataset, fraction: float, seed: int) -> JtMixture:
    """Target data plus a seeded, group-wise ``fraction`` of the source data.

    Every sample keeps its own domain mask, so source samples never train
    target-only labels and vice versa.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigurationError(f"JT fraction {fraction} outside [0, 1]")
    groups = source.groups
    n_select = int(round(fraction * groups.size))
    selected = np.sort(np.random.default_rng(seed).choice(groups, size=n_select, replace=False))
    if n_select == 0:
        return JtMixture(fraction, selected, target)
    return JtMixture(fraction, selected, Dataset.concat([target, source.select_groups(selected)]))
