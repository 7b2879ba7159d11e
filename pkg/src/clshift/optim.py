"""SGD with momentum, plateau learning-rate decay, best-validation selection."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, NumericError, ShapeError
from .nn import MlpModel, ParameterVector, cell_weights, loss_and_gradient, save_record


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 16

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")


def _values(v) -> np.ndarray:
    return v.values if isinstance(v, ParameterVector) else np.asarray(v, dtype=np.float64)


def sgd_step(params, grad, velocity, cfg: SgdConfig):
    """One heavy-ball step with coupled L2 decay.

    ``g = grad + wd * params; v' = m * v + g; params' = params - lr * v'``.
    Returns ``(params', velocity')`` of the same kind as ``params``.
    """
    p, g, v = _values(params), _values(grad), _values(velocity)
    if not (p.shape == g.shape == v.shape):
        raise ShapeError(f"length mismatch: {p.shape}, {g.shape}, {v.shape}")
    g_eff = g + cfg.weight_decay * p
    v_new = cfg.momentum * v + g_eff
    p_new = p - cfg.learning_rate * v_new
    if isinstance(params, ParameterVector):
        return ParameterVector(p_new, params.layout), ParameterVector(v_new, params.layout)
    return p_new, v_new


@dataclass(frozen=True)
class PlateauSchedule:
    """Reduce-on-plateau state. "Improved" means strictly below the best so far."""

    lr: float = 0.01
    factor: float = 0.1
    best: float = math.inf
    patience: int = 1
    min_delta: float = 0.0
    bad_epochs: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ConfigurationError("factor must lie in (0, 1)")
        if self.lr < 0:
            raise ConfigurationError("lr must be non-negative")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")


def plateau_update(schedule: PlateauSchedule, val_loss: float) -> PlateauSchedule:
    if not math.isfinite(val_loss):
        raise NumericError(f"validation loss is {val_loss}")
    if val_loss < schedule.best - schedule.min_delta:
        return replace(schedule, best=val_loss, bad_epochs=0)
    bad = schedule.bad_epochs + 1
    if bad >= schedule.patience:
        return replace(schedule, lr=schedule.lr * schedule.factor, bad_epochs=0)
    return replace(schedule, bad_epochs=bad)


@dataclass
class TrainRecord:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_parameters: Optional[ParameterVector] = None

    @property
    def n_epochs(self) -> int:
        return len(self.val_loss)

    def rows(self):
        for k in range(self.n_epochs):
            yield k, self.train_loss[k], self.val_loss[k], self.lr[k]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for epoch, tl, vl, lr in self.rows():
                w.writerow([epoch, repr(tl), repr(vl), repr(lr)])

    def save(self, csv_path, checkpoint_path) -> None:
        self.write_csv(csv_path)
        save_record(checkpoint_path, "best_parameters", self.best_parameters.values,
                    self.best_parameters.layout, best_epoch=self.best_epoch)


# A batch objective maps (model, dataset, sample indices) to (loss, flat gradient).
BatchObjective = Callable[[MlpModel, object, np.ndarray], tuple[float, np.ndarray]]
# An extra loss maps the flat parameter vector to (value, flat gradient).
ExtraLoss = Callable[[np.ndarray], tuple[float, np.ndarray]]


def masked_objective(mask=None) -> BatchObjective:
    """Masked BCE using ``mask`` if given, otherwise each sample's own mask."""

    def objective(model, data, idx):
        m = data.masks[idx] if mask is None else mask
        w = cell_weights(m, (len(idx), model.n_outputs))
        return loss_and_gradient(model, data.features[idx], data.labels[idx], w)

    return objective


def evaluate_loss(model: MlpModel, data, objective: BatchObjective | None = None) -> float:
    objective = objective or masked_objective()
    loss, _ = objective(model, data, np.arange(len(data)))
    return float(loss)


def train_loop(
    model: MlpModel,
    train_set,
    val_set,
    cfg: SgdConfig,
    epochs: int = 30,
    schedule: PlateauSchedule | None = None,
    extra_loss: ExtraLoss | None = None,
    seed: int = 0,
    objective: BatchObjective | None = None,
    val_objective: BatchObjective | None = None,
    min_lr: float = 1e-6,
) -> TrainRecord:
    """Mini-batch training with best-validation checkpoint selection.

    Datasets need ``features``, ``labels``, ``masks`` and ``__len__``. Batches are
    reshuffled every epoch from ``(seed, epoch)``. Training stops early once the
    plateau schedule pushes the learning rate below ``min_lr``. On return the
    model holds the best-validation parameters.
    """
    if epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigurationError("empty train or validation split")
    objective = objective or masked_objective()
    val_objective = val_objective or masked_objective()
    schedule = schedule or PlateauSchedule(lr=cfg.learning_rate)
    record = TrainRecord()
    velocity = np.zeros(model.n_params)
    n = len(train_set)
    best = math.inf

    for epoch in range(epochs):
        step_cfg = replace(cfg, learning_rate=schedule.lr)
        order = np.random.default_rng([seed, epoch]).permutation(n)
        total = 0.0
        n_steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grad = objective(model, train_set, idx)
            if extra_loss is not None:
                extra_value, extra_grad = extra_loss(model.theta)
                loss += extra_value
                grad = grad + extra_grad
            theta, velocity = sgd_step(model.theta, grad, velocity, step_cfg)
            model.set_parameters(theta)
            total += loss
            n_steps += 1
        val = evaluate_loss(model, val_set, val_objective)
        record.train_loss.append(total / n_steps)
        record.val_loss.append(val)
        record.lr.append(schedule.lr)
        if val < best:
            best = val
            record.best_epoch = epoch
            record.best_parameters = model.get_parameters()
        schedule = plateau_update(schedule, val)
        if schedule.lr < min_lr:
            break

    model.set_parameters(record.best_parameters)
    return record
