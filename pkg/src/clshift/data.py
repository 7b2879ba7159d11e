"""Two-domain, group-structured multi-label benchmark.

Union label space of 21 labels: indices 0-6 are annotated in both domains,
7-13 only in domain A, 14-20 only in domain B. Domain B features are an
affine image (partial rotation plus translation) of the same latent
distribution that domain A observes directly. Shared labels are generated
from the latent coordinates, so they mean the same thing in both domains;
domain-unique labels are generated from the observed features.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import ortho_group

from .errors import ConfigurationError, IntegrityError

N_SHARED = 7
N_UNIQUE = 7
N_LABELS = N_SHARED + 2 * N_UNIQUE
SHARED = tuple(range(0, N_SHARED))
A_ONLY = tuple(range(N_SHARED, N_SHARED + N_UNIQUE))
B_ONLY = tuple(range(N_SHARED + N_UNIQUE, N_LABELS))
DOMAIN_LABELS = {"A": SHARED + A_ONLY, "B": SHARED + B_ONLY}
LABEL_NAMES = tuple(
    [f"S{k + 1}" for k in range(N_SHARED)]
    + [f"A{k + 1}" for k in range(N_UNIQUE)]
    + [f"B{k + 1}" for k in range(N_UNIQUE)]
)
CSV_MAGIC = "clshift-dataset"
CSV_VERSION = 1


def domain_mask(domain: str) -> np.ndarray:
    if domain not in DOMAIN_LABELS:
        raise ConfigurationError(f"unknown domain {domain!r}")
    mask = np.zeros(N_LABELS, dtype=bool)
    mask[list(DOMAIN_LABELS[domain])] = True
    return mask


@dataclass(frozen=True)
class BenchmarkSpec:
    feature_dim: int = 32
    groups_per_domain: int = 600
    samples_per_group: tuple[int, int] = (1, 3)
    group_variance: float = 0.5
    weight_scale: float = 3.0
    concept_rank: int = 4
    bias_range: tuple[float, float] = (-2.0, 0.5)
    rotated_fraction: float = 0.5
    translation: float = 1.0
    identity_shift: bool = False
    # explicit shift overrides the seeded random one
    shift_matrix: Optional[tuple[tuple[float, ...], ...]] = None
    shift_vector: Optional[tuple[float, ...]] = None
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.samples_per_group
        if self.feature_dim < 1 or self.groups_per_domain < 1 or not 1 <= lo <= hi:
            raise ConfigurationError("invalid benchmark sizes")
        if not 0.0 <= self.group_variance < 1.0:
            raise ConfigurationError("group_variance must lie in [0, 1)")
        if not 1 <= self.concept_rank <= self.feature_dim:
            raise ConfigurationError("concept_rank must lie in [1, feature_dim]")
        if not 0.0 <= self.rotated_fraction <= 1.0:
            raise ConfigurationError("rotated_fraction must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkSpec":
        d = dict(d)
        for key in ("samples_per_group", "bias_range", "shift_vector"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if d.get("shift_matrix") is not None:
            d["shift_matrix"] = tuple(tuple(r) for r in d["shift_matrix"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown benchmark fields {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class GroundTruth:
    weights: np.ndarray      # N_LABELS x d
    biases: np.ndarray       # N_LABELS
    shift_matrix: np.ndarray
    shift_vector: np.ndarray

    def shift(self, z: np.ndarray) -> np.ndarray:
        return z @ self.shift_matrix.T + self.shift_vector


def ground_truth(spec: BenchmarkSpec) -> GroundTruth:
    d = spec.feature_dim
    rng = np.random.default_rng([spec.seed, 0])
    # all labels read a common low-dimensional concept subspace
    k = spec.concept_rank
    basis = ortho_group.rvs(d, random_state=rng)[:k] if d > 1 else np.ones((1, 1))
    coeff = rng.normal(0.0, spec.weight_scale / np.sqrt(k), size=(N_LABELS, k))
    weights = coeff @ basis
    biases = rng.uniform(*spec.bias_range, size=N_LABELS)

    if spec.shift_matrix is not None:
        R = np.asarray(spec.shift_matrix, dtype=np.float64)
        if R.shape != (d, d):
            raise ConfigurationError(f"shift_matrix must be {d} x {d}")
    elif spec.identity_shift:
        R = np.eye(d)
    else:
        R = np.eye(d)
        k = int(round(spec.rotated_fraction * d))
        if k >= 2:
            coords = np.sort(rng.choice(d, size=k, replace=False))
            R[np.ix_(coords, coords)] = ortho_group.rvs(k, random_state=rng)
    if np.linalg.matrix_rank(R) < d or np.linalg.cond(R) > 1e12:
        raise ConfigurationError("shift matrix is not invertible")

    if spec.shift_vector is not None:
        t = np.asarray(spec.shift_vector, dtype=np.float64)
        if t.shape != (d,):
            raise ConfigurationError(f"shift_vector must have length {d}")
    elif spec.identity_shift:
        t = np.zeros(d)
    else:
        # every coordinate moves by +-translation
        t = spec.translation * rng.choice([-1.0, 1.0], size=d)
    return GroundTruth(weights, biases, R, t)


@dataclass
class Dataset:
    """Multi-label samples over the union label space.

    ``labels`` outside ``masks`` are stored as 0 and never read.
    """

    sample_ids: np.ndarray
    group_ids: np.ndarray
    domains: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    spec_hash: str = ""
    seed: int = 0

    def __len__(self) -> int:
        return int(self.sample_ids.size)

    @property
    def groups(self) -> np.ndarray:
        return np.unique(self.group_ids)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.sample_ids[idx], self.group_ids[idx], self.domains[idx],
                       self.features[idx], self.labels[idx], self.masks[idx],
                       self.spec_hash, self.seed)

    def select_groups(self, groups) -> "Dataset":
        return self.subset(np.flatnonzero(np.isin(self.group_ids, list(groups))))

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        return Dataset(
            np.concatenate([p.sample_ids for p in parts]),
            np.concatenate([p.group_ids for p in parts]),
            np.concatenate([p.domains for p in parts]),
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.masks for p in parts]),
            parts[0].spec_hash, parts[0].seed,
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            self.spec_hash == other.spec_hash and self.seed == other.seed
            and all(np.array_equal(getattr(self, f), getattr(other, f))
                    for f in ("sample_ids", "group_ids", "domains", "features", "labels", "masks"))
        )


def _draw_domain(spec: BenchmarkSpec, truth: GroundTruth, domain: str, id_offset: int):
    index = 1 if domain == "A" else 2
    rng = np.random.default_rng([spec.seed, index])
    lo, hi = spec.samples_per_group
    sizes = rng.integers(lo, hi + 1, size=spec.groups_per_domain)
    n = int(sizes.sum())
    group_local = np.repeat(np.arange(spec.groups_per_domain), sizes)
    d = spec.feature_dim
    offsets = rng.normal(0.0, np.sqrt(spec.group_variance), size=(spec.groups_per_domain, d))
    z = offsets[group_local] + rng.normal(0.0, np.sqrt(1.0 - spec.group_variance), size=(n, d))
    x = z if domain == "A" else truth.shift(z)

    logits = np.empty((n, N_LABELS))
    shared = list(SHARED)
    own = list(A_ONLY if domain == "A" else B_ONLY)
    logits[:, shared] = z @ truth.weights[shared].T + truth.biases[shared]
    # domain-unique concepts are read relative to their own domain's mean
    centre = np.zeros(d) if domain == "A" else truth.shift_vector
    logits[:, own] = (x - centre) @ truth.weights[own].T + truth.biases[own]
    mask = np.broadcast_to(domain_mask(domain), (n, N_LABELS)).copy()
    draws = rng.random((n, N_LABELS))
    labels = np.where(mask, (draws < expit(np.where(mask, logits, 0.0))), False).astype(np.float64)

    return Dataset(
        sample_ids=id_offset + np.arange(n, dtype=np.int64),
        group_ids=index * 100000 + group_local.astype(np.int64),
        domains=np.full(n, domain),
        features=x,
        labels=labels,
        masks=mask,
        spec_hash=spec.hash(),
        seed=spec.seed,
    )


def generate(spec: BenchmarkSpec) -> tuple[Dataset, Dataset]:
    """Draw domain A and domain B datasets; fully determined by ``spec``."""
    truth = ground_truth(spec)
    a = _draw_domain(spec, truth, "A", 0)
    b = _draw_domain(spec, truth, "B", len(a))
    return a, b


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    val_fraction: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0 or not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError("split fractions must lie in (0, 1)")


def split(dataset: Dataset, spec: SplitSpec, repetition_seed: int, base_seed: int = 0):
    """Group-level ``(train, val, test)`` partition.

    The test groups depend on ``base_seed`` only; validation groups are drawn
    from the remaining pool with ``repetition_seed``.
    """
    groups = dataset.groups
    if groups.size < 10:
        raise ConfigurationError(f"need at least 10 groups, have {groups.size}")
    n_test = int(round(spec.test_fraction * groups.size))
    perm = np.random.default_rng(base_seed).permutation(groups)
    test_groups = np.sort(perm[:n_test])
    pool = np.sort(perm[n_test:])
    n_val = int(round(spec.val_fraction * pool.size))
    if n_test < 1 or n_val < 1 or n_val >= pool.size:
        raise ConfigurationError("split fractions leave an empty partition")
    val_groups = np.sort(np.random.default_rng(repetition_seed).choice(pool, size=n_val, replace=False))
    train_groups = np.setdiff1d(pool, val_groups)
    return (dataset.select_groups(train_groups),
            dataset.select_groups(val_groups),
            dataset.select_groups(test_groups))


# -- CSV persistence ----------------------------------------------------------

def _columns(d: int) -> list[str]:
    return (["sample_id", "group_id", "domain"]
            + [f"f_{k}" for k in range(d)]
            + [f"y_{k}" for k in range(N_LABELS)]
            + [f"m_{k}" for k in range(N_LABELS)])


def _payload(dataset: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_columns(dataset.features.shape[1]))
    for k in range(len(dataset)):
        w.writerow(
            [int(dataset.sample_ids[k]), int(dataset.group_ids[k]), str(dataset.domains[k])]
            + [repr(float(v)) for v in dataset.features[k]]
            + [int(v) for v in dataset.labels[k]]
            + [int(v) for v in dataset.masks[k]]
        )
    return buf.getvalue()


def save(dataset: Dataset, path) -> None:
    """Write CSV preceded by one ``#`` metadata line carrying hash, seed and checksum."""
    payload = _payload(dataset)
    meta = {
        "format": CSV_MAGIC,
        "version": CSV_VERSION,
        "spec_hash": dataset.spec_hash,
        "seed": dataset.seed,
        "rows": len(dataset),
        "sha256": hashlib.sha256(payload.encode()).hexdigest(),
    }
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        fh.write(payload)


def load(path, expected_spec_hash: str | None = None) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    first, _, payload = text.partition("\n")
    if not first.startswith("# "):
        raise IntegrityError(f"{path}: missing metadata line")
    try:
        meta = json.loads(first[2:])
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: unreadable metadata") from exc
    if meta.get("format") != CSV_MAGIC or meta.get("version") != CSV_VERSION:
        raise IntegrityError(f"{path}: not a version-{CSV_VERSION} dataset file")
    if hashlib.sha256(payload.encode()).hexdigest() != meta.get("sha256"):
        raise IntegrityError(f"{path}: checksum mismatch (truncated or edited)")
    if expected_spec_hash is not None and meta["spec_hash"] != expected_spec_hash:
        raise IntegrityError(f"{path}: spec hash {meta['spec_hash']} != {expected_spec_hash}")

    rows = list(csv.reader(io.StringIO(payload)))
    header, body = rows[0], rows[1:]
    if len(body) != meta["rows"]:
        raise IntegrityError(f"{path}: expected {meta['rows']} rows, found {len(body)}")
    d = sum(1 for c in header if c.startswith("f_"))
    if header != _columns(d):
        raise IntegrityError(f"{path}: unexpected columns")
    if not body:
        z = np.empty((0, N_LABELS))
        return Dataset(np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, "<U1"),
                       np.empty((0, d)), z, z.astype(bool), meta["spec_hash"], meta["seed"])
    arr = np.array(body, dtype=object)
    return Dataset(
        sample_ids=arr[:, 0].astype(np.int64),
        group_ids=arr[:, 1].astype(np.int64),
        domains=arr[:, 2].astype(str),
        features=arr[:, 3:3 + d].astype(np.float64),
        labels=arr[:, 3 + d:3 + d + N_LABELS].astype(np.float64),
        masks=arr[:, 3 + d + N_LABELS:].astype(np.int64).astype(bool),
        spec_hash=meta["spec_hash"],
        seed=meta["seed"],
    )
