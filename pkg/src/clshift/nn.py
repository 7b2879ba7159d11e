"""Dense multi-label network with exact reverse-mode gradients.

All parameters live in one flat float64 vector. Layer ``k`` contributes a
``(fan_in, fan_out)`` weight matrix (C order) followed by its bias, so the
flat vector is what the optimizer, the Fisher estimate and the EWC prior
all operate on.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, NumericError, ShapeError

if os.environ.get("CLSHIFT_PURE_PYTHON"):
    from . import _kernels_py as _kernels
else:
    try:
        from . import _kernels
    except ImportError:  # extension not built
        from . import _kernels_py as _kernels

BACKEND: str = _kernels.BACKEND
EPS = 1e-7
CHECKPOINT_VERSION = 1

Layout = tuple[tuple[str, tuple[int, ...]], ...]


def make_layout(sizes: Sequence[int]) -> Layout:
    entries = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        entries.append((f"layer{k}.weight", (int(fan_in), int(fan_out))))
        entries.append((f"layer{k}.bias", (int(fan_out),)))
    return tuple(entries)


def layout_size(layout: Layout) -> int:
    return int(sum(np.prod(shape, dtype=np.int64) for _, shape in layout))


@dataclass
class ParameterVector:
    """Flat parameter values plus the layout fixing their order."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != layout_size(self.layout):
            raise ShapeError(
                f"{self.values.size} values do not fit layout of size {layout_size(self.layout)}"
            )

    def __len__(self) -> int:
        return self.values.size

    def unflatten(self) -> dict[str, np.ndarray]:
        out = {}
        offset = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.values[offset:offset + n].reshape(shape)
            offset += n
        return out

    @classmethod
    def flatten(cls, arrays: dict[str, np.ndarray], layout: Layout) -> "ParameterVector":
        parts = []
        for name, shape in layout:
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {a.shape}")
            parts.append(a.ravel())
        return cls(np.concatenate(parts), layout)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)


def label_mask(active: Sequence[int], n_labels: int) -> np.ndarray:
    """Boolean mask of length ``n_labels`` with ``active`` indices set."""
    mask = np.zeros(n_labels, dtype=bool)
    mask[list(active)] = True
    return mask


def glorot_init(sizes: Sequence[int], seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    parts = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


class MlpModel:
    """``d -> h_1 -> ... -> L`` network, tanh hidden units, sigmoid outputs.

    Only :meth:`set_parameters` mutates a model; one instance must not be
    shared between threads that train it.
    """

    def __init__(self, sizes: Sequence[int], theta: np.ndarray | None = None,
                 seed: int = 0, eps: float = EPS):
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ConfigurationError(f"invalid layer sizes {list(sizes)}")
        self.sizes = np.asarray(sizes, dtype=np.int64)
        self.layout = make_layout(self.sizes)
        self.seed = int(seed)
        self.eps = float(eps)
        if theta is None:
            theta = glorot_init(self.sizes, self.seed)
        theta = np.array(theta, dtype=np.float64)
        if theta.shape != (layout_size(self.layout),):
            raise ShapeError(f"theta has shape {theta.shape}, layout needs {layout_size(self.layout)}")
        self.theta = theta

    @property
    def n_inputs(self) -> int:
        return int(self.sizes[0])

    @property
    def n_outputs(self) -> int:
        return int(self.sizes[-1])

    @property
    def n_params(self) -> int:
        return self.theta.size

    def get_parameters(self) -> ParameterVector:
        return ParameterVector(self.theta.copy(), self.layout)

    def set_parameters(self, params: ParameterVector | np.ndarray) -> None:
        values = params.values if isinstance(params, ParameterVector) else params
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.theta.shape:
            raise ShapeError(f"expected {self.theta.shape[0]} parameters, got {values.shape}")
        self.theta = values.copy()

    def copy(self) -> "MlpModel":
        return MlpModel(self.sizes, self.theta, seed=self.seed, eps=self.eps)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        arrays = ParameterVector(self.theta, self.layout).unflatten()
        n = len(self.sizes) - 1
        return [(arrays[f"layer{k}.weight"], arrays[f"layer{k}.bias"]) for k in range(n)]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)


def _as_batch(model: MlpModel, x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != model.n_inputs:
        raise ShapeError(f"expected inputs of shape (B>=1, {model.n_inputs}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input")
    return x


def forward(model: MlpModel, x) -> np.ndarray:
    """Clamped sigmoid outputs, shape ``B x L``, every entry in ``[eps, 1-eps]``."""
    x = _as_batch(model, x)
    return _kernels.forward(model.theta, model.sizes, x, model.eps)


def cell_weights(mask, shape: tuple[int, int]) -> np.ndarray:
    """Per-cell loss weights giving a mean over the active cells of ``mask``.

    ``mask`` is a length-L vector shared by the batch or a ``B x L`` matrix of
    per-sample masks.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), shape).astype(np.float64, order="C")
    n_active = m.sum()
    if n_active == 0:
        raise ConfigurationError("label mask has no active entries")
    return m / n_active


def _check_targets(targets, shape, active=None) -> np.ndarray:
    t = np.ascontiguousarray(targets, dtype=np.float64)
    if t.shape != shape:
        raise ShapeError(f"targets have shape {t.shape}, expected {shape}")
    if active is not None:
        # inactive cells are never read, even if they hold garbage
        t = np.where(active, t, 0.0)
    if np.isnan(t).any():
        raise NumericError("NaN in targets")
    if t.min() < 0.0 or t.max() > 1.0:
        raise ConfigurationError("targets must lie in [0, 1]")
    return t


def weighted_bce(probabilities, targets, weights, eps: float = EPS) -> float:
    p = np.asarray(probabilities, dtype=np.float64)
    if np.isnan(p).any():
        raise NumericError("NaN in probabilities")
    p = np.clip(p, eps, 1.0 - eps)
    t = np.asarray(targets, dtype=np.float64)
    return float(-(weights * (t * np.log(p) + (1.0 - t) * np.log1p(-p))).sum())


def masked_bce(probabilities, targets, mask, eps: float = EPS) -> float:
    """Mean binary cross-entropy over the cells whose label is active."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeError(f"probabilities must be B x L, got {p.shape}")
    m = np.broadcast_to(np.asarray(mask, dtype=bool), p.shape)
    t = _check_targets(targets, p.shape, m)
    return weighted_bce(p, t, cell_weights(mask, p.shape), eps)


def loss_and_gradient(model: MlpModel, x, targets, weights) -> tuple[float, np.ndarray]:
    """Value and flat gradient of ``sum(weights * bce(forward(x), targets))``."""
    x = _as_batch(model, x)
    shape = (x.shape[0], model.n_outputs)
    w = np.ascontiguousarray(weights, dtype=np.float64)
    if w.shape != shape:
        raise ShapeError(f"weights have shape {w.shape}, expected {shape}")
    t = _check_targets(targets, shape, w != 0.0)
    return _kernels.loss_grad(model.theta, model.sizes, x, t, w, model.eps)


def backward(model: MlpModel, x, targets, mask) -> ParameterVector:
    """Exact gradient of :func:`masked_bce` with respect to every parameter."""
    x = _as_batch(model, x)
    w = cell_weights(mask, (x.shape[0], model.n_outputs))
    _, grad = loss_and_gradient(model, x, targets, w)
    return ParameterVector(grad, model.layout)


def per_sample_gradient_matrix(model: MlpModel, x, targets, mask) -> np.ndarray:
    """``B x P`` matrix; row ``k`` is :func:`backward` on the singleton batch ``{k}``."""
    x = _as_batch(model, x)
    shape = (x.shape[0], model.n_outputs)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), shape).astype(np.float64, order="C")
    counts = m.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ConfigurationError("a sample has no active labels")
    w = np.ascontiguousarray(m / counts)
    t = _check_targets(targets, shape, w != 0.0)
    return _kernels.per_sample_grads(model.theta, model.sizes, x, t, w, model.eps)


def per_sample_gradients(model: MlpModel, x, targets, mask) -> list[ParameterVector]:
    g = per_sample_gradient_matrix(model, x, targets, mask)
    return [ParameterVector(row, model.layout) for row in g]


# -- checkpoint records -------------------------------------------------------

def save_record(path, kind: str, values: np.ndarray, layout: Layout,
                arrays: dict[str, np.ndarray] | None = None, **meta) -> None:
    """Write a flat vector aligned to ``layout`` plus JSON metadata as ``.npz``."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "layout": [[name, list(shape)] for name, shape in layout],
        **meta,
    }
    payload = {"values": np.asarray(values, dtype=np.float64),
               "header": np.array(json.dumps(header, sort_keys=True))}
    payload.update(arrays or {})
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_record(path, kind: str | None = None) -> tuple[dict, np.ndarray, Layout, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        values = data["values"].copy()
        extra = {k: data[k].copy() for k in data.files if k not in ("header", "values")}
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {header.get('format_version')}")
    if kind is not None and header.get("kind") != kind:
        raise ConfigurationError(f"expected a {kind!r} record, found {header.get('kind')!r}")
    layout = tuple((name, tuple(shape)) for name, shape in header["layout"])
    if values.size != layout_size(layout):
        raise ShapeError("record values do not match stored layout")
    return header, values, layout, extra


def save_model(model: MlpModel, path) -> None:
    save_record(path, "model", model.theta, model.layout,
                sizes=[int(s) for s in model.sizes], eps=model.eps, seed=model.seed)


def load_model(path) -> MlpModel:
    header, values, _, _ = load_record(path, "model")
    return MlpModel(header["sizes"], values, seed=header["seed"], eps=header["eps"])
