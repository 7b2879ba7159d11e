"""AUC / transfer tables rebuilt from score files, rendered as Markdown, JSON and CSV."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import DOMAIN_LABELS, LABEL_NAMES, SHARED
from .errors import IntegrityError
from .metrics import (
    LabelTable,
    aggregate,
    auc_table,
    backward_transfer,
    forward_transfer,
    spearman,
)

REPORT_VERSION = 1
SOURCE_LABELS = list(DOMAIN_LABELS["A"])
TARGET_LABELS = list(DOMAIN_LABELS["B"])


@dataclass
class StrategyTables:
    source: LabelTable      # adapted model, domain-A test set, A labels
    target: LabelTable      # adapted model, domain-B test set, B labels
    bwt: LabelTable


@dataclass
class RepetitionResult:
    repetition: int
    initial_source: LabelTable     # source model on A
    initial_target: LabelTable     # source model on B, shared labels only
    strategies: dict[str, StrategyTables]
    seed: Optional[int] = None

    @property
    def fwt(self) -> LabelTable:
        return forward_transfer(self.initial_target)


@dataclass
class RunResult:
    repetitions: list[RepetitionResult]
    strategy_names: tuple[str, ...]
    jt_fractions: dict[str, float] = field(default_factory=dict)
    config_hash: str = ""


def repetition_from_scores(repetition: int, initial_a, initial_b, adapted: dict, seed=None) -> RepetitionResult:
    """Build all tables for one repetition from :class:`~clshift.runner.ScoreSet` objects."""
    init_src = auc_table(initial_a.scores, initial_a.labels, SOURCE_LABELS, LABEL_NAMES)
    init_tgt = auc_table(initial_b.scores, initial_b.labels, list(SHARED), LABEL_NAMES)
    strategies = {}
    for name, (sa, sb) in adapted.items():
        src = auc_table(sa.scores, sa.labels, SOURCE_LABELS, LABEL_NAMES)
        tgt = auc_table(sb.scores, sb.labels, TARGET_LABELS, LABEL_NAMES)
        strategies[name] = StrategyTables(src, tgt, backward_transfer(init_src, src))
    return RepetitionResult(repetition, init_src, init_tgt, strategies, seed)


def load_run_result(config, out) -> RunResult:
    from .runner import OutputTree, ScoreSet

    tree = OutputTree(out)
    reps = []
    for r in range(1, config.repetitions + 1):
        try:
            ia = ScoreSet.read_csv(tree.scores(r, "initial", "A"))
            ib = ScoreSet.read_csv(tree.scores(r, "initial", "B"))
            adapted = {}
            for s in config.strategies:
                adapted[s.name] = (ScoreSet.read_csv(tree.scores(r, s.slug, "A")),
                                   ScoreSet.read_csv(tree.scores(r, s.slug, "B")))
        except FileNotFoundError as exc:
            raise IntegrityError(f"missing score file: {exc.filename}") from exc
        reps.append(repetition_from_scores(r, ia, ib, adapted, seed=config.repetition_seed(r)))
    return RunResult(
        reps,
        tuple(s.name for s in config.strategies),
        {s.name: s.fraction for s in config.strategies if s.kind == "jt"},
        config.hash(),
    )


# -- aggregation --------------------------------------------------------------

def _label_stats(tables: Sequence[LabelTable]) -> tuple[tuple[str, ...], np.ndarray, np.ndarray, np.ndarray]:
    labels = tables[0].labels
    for t in tables[1:]:
        if t.labels != labels:
            raise IntegrityError("label sets differ across repetitions")
    values = np.array([t.values for t in tables])
    defined = np.array([t.defined for t in tables])
    n = defined.sum(axis=0)
    mean = np.full(len(labels), np.nan)
    std = np.full(len(labels), np.nan)
    for k in range(len(labels)):
        if n[k]:
            v = values[defined[:, k], k]
            mean[k] = v.mean()
            std[k] = v.std()
    return labels, mean, std, n


def _summary(tables: Sequence[LabelTable]) -> dict:
    labels, mean, std, n = _label_stats(tables)
    per_label = {
        name: ({"mean": float(mean[k]), "std": float(std[k]), "n": int(n[k])} if n[k] else None)
        for k, name in enumerate(labels)
    }
    defined = n > 0
    avg = float(mean[defined].mean()) if defined.any() else None
    return {"labels": per_label, "average": avg}


def _transfer_summary(tables: Sequence[LabelTable]) -> dict:
    labels, mean, _, n = _label_stats(tables)
    lo, mu, hi = aggregate([float(m) if c else None for m, c in zip(mean, n)])
    per_rep = [t.average for t in tables]
    per_rep_defined = [v for v in per_rep if v is not None]
    return {
        "min": lo, "mean": mu, "max": hi,
        "repetition_means": per_rep,
        "repetition_std": float(np.std(per_rep_defined)) if per_rep_defined else None,
        "labels": {name: (float(mean[k]) if n[k] else None) for k, name in enumerate(labels)},
    }


def summarize(run: RunResult) -> dict:
    reps = sorted(run.repetitions, key=lambda r: r.repetition)
    if not reps:
        raise IntegrityError("no completed repetitions")
    if len({r.repetition for r in reps}) != len(reps):
        raise IntegrityError("duplicate repetition index")
    names = list(run.strategy_names)
    for r in reps:
        if set(r.strategies) != set(names):
            raise IntegrityError(f"repetition {r.repetition} has strategies {sorted(r.strategies)}")

    auc = {
        "source": {"Initial": _summary([r.initial_source for r in reps])},
        "target": {"Initial": _summary([r.initial_target for r in reps])},
    }
    bwt = {}
    for name in names:
        auc["source"][name] = _summary([r.strategies[name].source for r in reps])
        auc["target"][name] = _summary([r.strategies[name].target for r in reps])
        bwt[name] = _transfer_summary([r.strategies[name].bwt for r in reps])
    fwt = _transfer_summary([r.fwt for r in reps])

    findings = {}
    if run.jt_fractions:
        jt = sorted(run.jt_fractions.items(), key=lambda kv: kv[1])
        fr = [f for _, f in jt]
        mb = [bwt[n]["mean"] for n, _ in jt]
        findings["jt_fractions"] = fr
        findings["jt_mean_bwt"] = mb
        findings["jt_spearman"] = spearman(fr, mb) if len(fr) > 1 else None
        findings["jt_min_adjacent_step"] = min(np.diff(mb)) if len(mb) > 1 else None
    return {
        "report_version": REPORT_VERSION,
        "config_hash": run.config_hash,
        "repetitions": [r.repetition for r in reps],
        "strategies": names,
        "auc": auc,
        "bwt": bwt,
        "fwt": fwt,
        "findings": findings,
    }


# -- rendering ----------------------------------------------------------------

def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.4f}"


def _fmt_cell(stats: Optional[dict]) -> str:
    if stats is None:
        return ""
    return f"{stats['mean']:.4f} ± {stats['std']:.4f}"


def render_markdown(summary: dict) -> str:
    cols = ["Initial"] + summary["strategies"]
    n_rep = len(summary["repetitions"])
    lines = [
        "# Continual-learning transfer report",
        "",
        f"Mean AUC ± standard deviation over {n_rep} repetition(s). Config hash `{summary['config_hash']}`.",
        "Domain A is the source domain, domain B the target domain. "
        "Initial = source model before adaptation.",
        "",
        "## AUC",
        "",
        "| Domain | Label | " + " | ".join(cols) + " |",
        "|---|---|" + "---|" * len(cols),
    ]
    for dom, key, label_idx in (("A", "source", SOURCE_LABELS), ("B", "target", TARGET_LABELS)):
        block = summary["auc"][key]
        for k in label_idx:
            name = LABEL_NAMES[k]
            cells = [_fmt_cell(block[c]["labels"].get(name)) for c in cols]
            lines.append(f"| {dom} | {name} | " + " | ".join(cells) + " |")
        avgs = [_fmt(block[c]["average"]) for c in cols]
        lines.append(f"| {dom} | Average | " + " | ".join(avgs) + " |")
    lines += [
        "",
        "## Backward transfer (domain A AUC after adaptation minus before)",
        "",
        "Per-label BWT averaged over repetitions; min / mean / max across labels; "
        "std of the per-repetition mean.",
        "",
        "| Strategy | min | mean | max | std (repetitions) |",
        "|---|---|---|---|---|",
    ]
    for name in summary["strategies"]:
        b = summary["bwt"][name]
        lines.append(f"| {name} | {_fmt(b['min'])} | {_fmt(b['mean'])} | {_fmt(b['max'])} | "
                     f"{_fmt(b['repetition_std'])} |")
    f = summary["fwt"]
    lines += [
        "",
        "## Forward transfer (source model on domain B, shared labels, AUC minus 0.5)",
        "",
        "| min | mean | max | std (repetitions) |",
        "|---|---|---|---|",
        f"| {_fmt(f['min'])} | {_fmt(f['mean'])} | {_fmt(f['max'])} | {_fmt(f['repetition_std'])} |",
    ]
    fd = summary["findings"]
    if fd:
        lines += ["", "## Findings", ""]
        pairs = ", ".join(f"{fr:g}: {_fmt(b)}" for fr, b in zip(fd["jt_fractions"], fd["jt_mean_bwt"]))
        lines.append(f"- Mean BWT by JT fraction: {pairs}")
        if fd["jt_spearman"] is not None:
            lines.append(f"- Spearman correlation of JT fraction and mean BWT: {fd['jt_spearman']:.4f}")
    return "\n".join(lines) + "\n"


def _json_default(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    raise TypeError(type(o))


def write_csvs(summary: dict, out: Path) -> None:
    with open(out / "auc.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "model", "label", "mean", "std", "n"])
        for key, dom in (("source", "A"), ("target", "B")):
            for model, block in summary["auc"][key].items():
                for label, st in block["labels"].items():
                    if st is not None:
                        w.writerow([dom, model, label, repr(st["mean"]), repr(st["std"]), st["n"]])
    with open(out / "transfer.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["measure", "model", "min", "mean", "max", "repetition_std"])
        for name in summary["strategies"]:
            b = summary["bwt"][name]
            w.writerow(["BWT", name, repr(b["min"]), repr(b["mean"]), repr(b["max"]), repr(b["repetition_std"])])
        f = summary["fwt"]
        w.writerow(["FWT", "Initial", repr(f["min"]), repr(f["mean"]), repr(f["max"]), repr(f["repetition_std"])])


def write_tables(run: RunResult, out: Path) -> None:
    """Per-repetition label tables as ``label,value,defined`` CSV."""
    d = out / "tables"
    d.mkdir(parents=True, exist_ok=True)
    for r in run.repetitions:
        r.initial_source.write_csv(d / f"rep{r.repetition}_initial_A_auc.csv")
        r.initial_target.write_csv(d / f"rep{r.repetition}_initial_B_auc.csv")
        r.fwt.write_csv(d / f"rep{r.repetition}_fwt.csv")
        for k, name in enumerate(run.strategy_names):
            st = r.strategies[name]
            st.source.write_csv(d / f"rep{r.repetition}_s{k}_A_auc.csv")
            st.target.write_csv(d / f"rep{r.repetition}_s{k}_B_auc.csv")
            st.bwt.write_csv(d / f"rep{r.repetition}_s{k}_bwt.csv")


def evaluate_and_report(results, out, write_label_tables: bool = True) -> dict:
    """Write ``report.md``, ``report.json``, ``auc.csv`` and ``transfer.csv`` into ``out``.

    ``results`` is a :class:`RunResult` or a sequence of them (merged by
    repetition index, so the order of completion is irrelevant).
    """
    if isinstance(results, RunResult):
        results = [results]
    if not results:
        raise IntegrityError("no results to report")
    first = results[0]
    for r in results[1:]:
        if r.strategy_names != first.strategy_names or r.config_hash != first.config_hash:
            raise IntegrityError("cannot merge results from different configurations")
    merged = RunResult([rep for r in results for rep in r.repetitions],
                       first.strategy_names, first.jt_fractions, first.config_hash)
    summary = summarize(merged)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(render_markdown(summary), encoding="utf-8")
    (out / "report.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    write_csvs(summary, out)
    if write_label_tables:
        merged.repetitions.sort(key=lambda r: r.repetition)
        write_tables(merged, out)
    return summary
