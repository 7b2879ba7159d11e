"""Two-stage adapt-and-measure protocol.

Stage 1 trains a fresh network on domain A (A's labels only). Stage 2 adapts
that network to domain B with each configured strategy. Every model is scored
on both test splits; the scores are written to disk and all tables are
rebuilt from those files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import (
    A_ONLY,
    N_LABELS,
    BenchmarkSpec,
    Dataset,
    SplitSpec,
)
from .errors import ConfigurationError
from .nn import MlpModel, forward, save_model
from .optim import PlateauSchedule, SgdConfig, TrainRecord, train_loop
from .strategies import (
    ThresholdRule,
    ewc_hook,
    fisher_diagonal,
    jt_mix,
    lwf_objective,
    make_prior,
    record_soft_targets,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STRATEGY_KINDS = ("jt", "ewc", "lwf")


@dataclass(frozen=True)
class StrategyConfig:
    name: str
    kind: str
    fraction: float = 0.0            # jt
    lam: float = 0.0                 # ewc, lwf
    rule: str = "absolute"           # ewc: absolute | quantile
    threshold: float = 0.001         # ewc: rho, or q for the quantile rule
    weighted: bool = False           # ewc: magnitude-weighted precision

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigurationError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "jt" and not 0.0 <= self.fraction <= 1.0:
            raise ConfigurationError(f"{self.name}: fraction outside [0, 1]")
        if self.lam < 0:
            raise ConfigurationError(f"{self.name}: lambda must be non-negative")
        if self.kind == "ewc":
            ThresholdRule(self.rule, self.threshold)

    @property
    def slug(self) -> str:
        return re.sub(r"[^a-z0-9]+", "-", self.name.lower()).strip("-")


def default_strategies() -> list[StrategyConfig]:
    jt = [StrategyConfig(f"JT-{p}%", "jt", fraction=p / 100) for p in (0, 20, 40, 60, 80, 100)]
    return jt + [
        StrategyConfig("EWC", "ewc", lam=0.005, rule="absolute", threshold=1e-4),
        StrategyConfig("LWF", "lwf", lam=2.0),
    ]


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    hidden: tuple[int, ...] = (64, 32)
    stage1: SgdConfig = field(default_factory=lambda: SgdConfig(weight_decay=1e-4))
    stage2: SgdConfig = field(default_factory=lambda: SgdConfig(weight_decay=0.0))
    epochs: int = 30
    patience: int = 1
    lr_factor: float = 0.1
    min_lr: float = 1e-6
    strategies: tuple[StrategyConfig, ...] = field(default_factory=lambda: tuple(default_strategies()))
    repetitions: int = 5
    master_seed: int = 0
    jobs: int = 1
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigurationError("repetitions must be >= 1")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        names = [s.name for s in self.strategies]
        if len(set(names)) != len(names):
            raise ConfigurationError("strategy names must be unique")
        slugs = [s.slug for s in self.strategies]
        if len(set(slugs)) != len(slugs) or "initial" in slugs:
            raise ConfigurationError("strategy names must map to distinct file names")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {self.schema_version}")

    def repetition_seed(self, repetition: int) -> int:
        return self.master_seed + repetition

    def strategy(self, name: str) -> StrategyConfig:
        for s in self.strategies:
            if s.name == name or s.slug == name:
                return s
        raise ConfigurationError(f"no strategy named {name!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["benchmark"] = self.benchmark.to_dict()
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields {sorted(unknown)}")
        try:
            if "benchmark" in d:
                d["benchmark"] = BenchmarkSpec.from_dict(d["benchmark"])
            if "split" in d:
                d["split"] = SplitSpec(**d["split"])
            for key in ("stage1", "stage2"):
                if key in d:
                    d[key] = SgdConfig(**d[key])
            if "hidden" in d:
                d["hidden"] = tuple(int(h) for h in d["hidden"])
            if "strategies" in d:
                d["strategies"] = tuple(StrategyConfig(**s) for s in d["strategies"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("jobs")  # scheduling does not change results
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- protocol steps -----------------------------------------------------------

@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass
class Workspace:
    """Domain A/B splits for one repetition."""

    source: Splits
    target: Splits


def make_workspace(config: ExperimentConfig, repetition: int,
                   datasets: tuple[Dataset, Dataset] | None = None) -> Workspace:
    a, b = datasets if datasets is not None else data_mod.generate(config.benchmark)
    seed = config.repetition_seed(repetition)
    sa = data_mod.split(a, config.split, repetition_seed=seed, base_seed=config.master_seed)
    # offset keeps A and B split streams distinct
    sb = data_mod.split(b, config.split, repetition_seed=seed + 7919, base_seed=config.master_seed + 7919)
    return Workspace(Splits(*sa), Splits(*sb))


def _schedule(config: ExperimentConfig, cfg: SgdConfig) -> PlateauSchedule:
    return PlateauSchedule(lr=cfg.learning_rate, factor=config.lr_factor, patience=config.patience)


def run_stage1(config: ExperimentConfig, repetition: int, ws: Workspace) -> tuple[MlpModel, TrainRecord]:
    """Train a freshly initialised network on domain A."""
    seed = config.repetition_seed(repetition)
    sizes = [config.benchmark.feature_dim, *config.hidden, N_LABELS]
    model = MlpModel(sizes, seed=seed)
    record = train_loop(model, ws.source.train, ws.source.val, config.stage1,
                        epochs=config.epochs, schedule=_schedule(config, config.stage1),
                        seed=seed, min_lr=config.min_lr)
    return model, record


@dataclass
class AdaptationArtifacts:
    model: MlpModel
    record: TrainRecord
    extras: dict = field(default_factory=dict)


def run_adaptation(source_model: MlpModel, strategy: StrategyConfig, config: ExperimentConfig,
                   repetition: int, ws: Workspace) -> AdaptationArtifacts:
    seed = config.repetition_seed(repetition)
    model = source_model.copy()
    kwargs = dict(epochs=config.epochs, schedule=_schedule(config, config.stage2),
                  seed=seed, min_lr=config.min_lr)
    extras: dict = {}
    if strategy.kind == "jt":
        mix = jt_mix(ws.source.train, ws.target.train, strategy.fraction, seed)
        extras["selected_groups"] = mix.selected_groups
        record = train_loop(model, mix.data, ws.target.val, config.stage2, **kwargs)
    elif strategy.kind == "ewc":
        fisher = fisher_diagonal(source_model, ws.source.train)
        prior = make_prior(source_model, fisher,
                           ThresholdRule(strategy.rule, strategy.threshold),
                           strategy.lam, weighted=strategy.weighted)
        extras.update(fisher=fisher, prior=prior)
        hook = ewc_hook(prior) if strategy.lam > 0 else None
        record = train_loop(model, ws.target.train, ws.target.val, config.stage2,
                            extra_loss=hook, **kwargs)
    elif strategy.kind == "lwf":
        soft = record_soft_targets(source_model, ws.target.train,
                                   np.isin(np.arange(N_LABELS), A_ONLY))
        extras["soft_targets"] = soft
        record = train_loop(model, ws.target.train, ws.target.val, config.stage2,
                            objective=lwf_objective(soft, strategy.lam), **kwargs)
    else:  # guarded by StrategyConfig
        raise ConfigurationError(f"unknown strategy kind {strategy.kind!r}")
    return AdaptationArtifacts(model, record, extras)


# -- score files --------------------------------------------------------------

@dataclass
class ScoreSet:
    """Model outputs on one test split, with the labels and masks needed to score them."""

    sample_ids: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    scores: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id"] + [f"y_{k}" for k in range(N_LABELS)]
                       + [f"m_{k}" for k in range(N_LABELS)] + [f"p_{k}" for k in range(N_LABELS)])
            for k in range(self.sample_ids.size):
                w.writerow([int(self.sample_ids[k])]
                           + [int(v) for v in self.labels[k]]
                           + [int(v) for v in self.masks[k]]
                           + [repr(float(v)) for v in self.scores[k]])

    @classmethod
    def read_csv(cls, path) -> "ScoreSet":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))[1:]
        arr = np.array(rows, dtype=object).reshape(len(rows), 1 + 3 * N_LABELS)
        return cls(
            arr[:, 0].astype(np.int64),
            arr[:, 1:1 + N_LABELS].astype(np.float64),
            arr[:, 1 + N_LABELS:1 + 2 * N_LABELS].astype(np.int64).astype(bool),
            arr[:, 1 + 2 * N_LABELS:].astype(np.float64),
        )


def score(model: MlpModel, test: Dataset) -> ScoreSet:
    return ScoreSet(test.sample_ids.copy(), test.labels.copy(), test.masks.copy(),
                    forward(model, test.features))


# -- repetition driver --------------------------------------------------------

class OutputTree:
    def __init__(self, root):
        self.root = Path(root)

    def ensure(self) -> "OutputTree":
        for sub in ("data", "checkpoints", "records", "scores"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        return self

    def checkpoint(self, repetition: int, name: str) -> Path:
        return self.root / "checkpoints" / f"rep{repetition}_{name}.npz"

    def record(self, repetition: int, name: str) -> Path:
        return self.root / "records" / f"rep{repetition}_{name}.csv"

    def scores(self, repetition: int, name: str, domain: str) -> Path:
        return self.root / "scores" / f"rep{repetition}_{name}_{domain}.csv"


def load_datasets(config: ExperimentConfig, tree: OutputTree) -> tuple[Dataset, Dataset]:
    """Reuse ``data/*.csv`` when present and matching the config, else generate and save."""
    paths = tree.root / "data" / "A.csv", tree.root / "data" / "B.csv"
    spec_hash = config.benchmark.hash()
    if all(p.exists() for p in paths):
        return tuple(data_mod.load(p, expected_spec_hash=spec_hash) for p in paths)
    a, b = data_mod.generate(config.benchmark)
    data_mod.save(a, paths[0])
    data_mod.save(b, paths[1])
    return a, b


def train_source(config: ExperimentConfig, repetition: int, tree: OutputTree,
                 ws: Workspace) -> MlpModel:
    model, record = run_stage1(config, repetition, ws)
    save_model(model, tree.checkpoint(repetition, "initial"))
    record.write_csv(tree.record(repetition, "initial"))
    score(model, ws.source.test).write_csv(tree.scores(repetition, "initial", "A"))
    score(model, ws.target.test).write_csv(tree.scores(repetition, "initial", "B"))
    return model


def adapt_source(config: ExperimentConfig, strategy: StrategyConfig, repetition: int,
                 tree: OutputTree, ws: Workspace, source: MlpModel) -> MlpModel:
    art = run_adaptation(source, strategy, config, repetition, ws)
    save_model(art.model, tree.checkpoint(repetition, strategy.slug))
    art.record.write_csv(tree.record(repetition, strategy.slug))
    if "prior" in art.extras:
        art.extras["fisher"].save(tree.checkpoint(repetition, f"{strategy.slug}_fisher"))
        art.extras["prior"].save(tree.checkpoint(repetition, f"{strategy.slug}_prior"))
    if "soft_targets" in art.extras:
        art.extras["soft_targets"].write_csv(
            tree.root / "checkpoints" / f"rep{repetition}_{strategy.slug}_soft_targets.csv",
            data_mod.LABEL_NAMES)
    score(art.model, ws.source.test).write_csv(tree.scores(repetition, strategy.slug, "A"))
    score(art.model, ws.target.test).write_csv(tree.scores(repetition, strategy.slug, "B"))
    return art.model


def run_repetition(config: ExperimentConfig, repetition: int, out) -> int:
    tree = OutputTree(out)
    datasets = tuple(data_mod.load(tree.root / "data" / f"{d}.csv") for d in ("A", "B"))
    ws = make_workspace(config, repetition, datasets)
    log.info("repetition %d: stage 1", repetition)
    source = train_source(config, repetition, tree, ws)
    for strategy in config.strategies:
        log.info("repetition %d: adapting with %s", repetition, strategy.name)
        adapt_source(config, strategy, repetition, tree, ws, source)
    return repetition


def run_experiment(config: ExperimentConfig, out, jobs: int | None = None):
    """Full pipeline: data, every repetition, then the report rebuilt from score files."""
    from .report import evaluate_and_report, load_run_result

    tree = OutputTree(out).ensure()
    (tree.root / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    load_datasets(config, tree)
    reps = list(range(1, config.repetitions + 1))
    jobs = config.jobs if jobs is None else jobs
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(run_repetition, [config] * len(reps), reps, [out] * len(reps)))
    else:
        for r in reps:
            run_repetition(config, r, out)
    result = load_run_result(config, out)
    evaluate_and_report([result], out)
    return result
