import json
import random
from pathlib import Path

import pytest

from clshift.errors import IntegrityError
from clshift.report import RunResult, evaluate_and_report, summarize

from .report_fixture import STRATEGIES, run_result

GOLDEN = Path(__file__).parent / "golden"
FILES = ("report.md", "report.json", "auc.csv", "transfer.csv")


@pytest.mark.parametrize("name", FILES)
def test_matches_golden(tmp_path, name):
    evaluate_and_report(run_result(), tmp_path, write_label_tables=False)
    assert (tmp_path / name).read_bytes() == (GOLDEN / name).read_bytes()


def test_repetition_order_is_irrelevant(tmp_path):
    run = run_result()
    random.Random(3).shuffle(run.repetitions)
    evaluate_and_report(run, tmp_path)
    for name in FILES:
        assert (tmp_path / name).read_bytes() == (GOLDEN / name).read_bytes()


def test_partial_results_merge(tmp_path):
    parts = [run_result((2,)), run_result((3, 1))]
    evaluate_and_report(parts, tmp_path, write_label_tables=False)
    assert (tmp_path / "report.md").read_bytes() == (GOLDEN / "report.md").read_bytes()


def test_single_repetition_has_zero_spread():
    summary = summarize(run_result((1,)))
    for block in summary["auc"].values():
        for column in block.values():
            assert all(s is None or s["std"] == 0.0 for s in column["labels"].values())
    assert all(summary["bwt"][s]["repetition_std"] == 0.0 for s in STRATEGIES)


def test_hand_checked_statistics():
    summary = summarize(run_result())
    # S1 initial on A: 0.76, 0.81, 0.86 over the three repetitions
    s1 = summary["auc"]["source"]["Initial"]["labels"]["S1"]
    assert s1["mean"] == pytest.approx(0.81, abs=1e-12)
    assert s1["std"] == pytest.approx((0.05 ** 2 * 2 / 3) ** 0.5, abs=1e-12)
    # B2 for EWC is undefined in repetition 2: 0.72 and 0.82 remain
    b2 = summary["auc"]["target"]["EWC"]["labels"]["B2"]
    assert (b2["n"], b2["mean"], b2["std"]) == (2, pytest.approx(0.77), pytest.approx(0.05))
    # shared-label means per repetition 0.74, 0.79, 0.7543 give FWT 0.2614
    assert summary["fwt"]["mean"] == pytest.approx((0.74 + 0.79 + 5.28 / 7) / 3 - 0.5, abs=1e-12)
    lo, mean, hi = (summary["bwt"]["EWC"][k] for k in ("min", "mean", "max"))
    assert lo <= mean <= hi


def test_json_is_canonical():
    text = (GOLDEN / "report.json").read_text()
    assert text == json.dumps(json.loads(text), indent=2, sort_keys=True) + "\n"


def test_mismatched_results_refuse_to_merge(tmp_path):
    a = run_result((1,))
    b = RunResult(run_result((2,)).repetitions, STRATEGIES, {}, "otherhash0000000")
    with pytest.raises(IntegrityError):
        evaluate_and_report([a, b], tmp_path)
    with pytest.raises(IntegrityError):
        evaluate_and_report([], tmp_path)


def test_label_tables_written(tmp_path):
    evaluate_and_report(run_result(), tmp_path)
    tables = sorted(p.name for p in (tmp_path / "tables").iterdir())
    assert "rep1_initial_A_auc.csv" in tables and "rep3_s2_bwt.csv" in tables
