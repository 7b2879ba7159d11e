from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import rankdata

from clshift.errors import ConfigurationError, NumericError
from clshift.metrics import (
    LabelTable,
    aggregate,
    auc_table,
    backward_transfer,
    forward_transfer,
    roc_auc,
    roc_auc_pairs,
    spearman,
)


def pair_count(scores, labels):
    """Independent pure-Python Mann-Whitney oracle in exact rationals."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        return None
    wins = Fraction(0)
    for p in pos:
        for n in neg:
            wins += 1 if p > n else Fraction(1, 2) if p == n else 0
    return float(wins / (len(pos) * len(neg)))


def table(values):
    return LabelTable.from_dict({f"l{k}": v for k, v in enumerate(values)})


def test_perfect_separation():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_all_tied_scores_give_half():
    assert roc_auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5


def test_worked_example():
    # 3 of 4 positive/negative pairs are ordered correctly
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert pair_count([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_undefined_without_both_classes():
    assert roc_auc([0.1, 0.2], [1, 1]) is None
    assert roc_auc([0.1, 0.2], [0, 0]) is None


def test_nan_score_raises():
    with pytest.raises(NumericError):
        roc_auc([0.1, np.nan], [0, 1])


def test_non_binary_labels_rejected():
    with pytest.raises(ConfigurationError):
        roc_auc([0.1, 0.2], [0, 2])


def test_matches_pair_counting_with_heavy_ties(rng):
    for _ in range(300):
        n = int(rng.integers(1, 120))
        scores = rng.integers(0, int(rng.integers(1, 6)), size=n) / 4.0
        labels = (rng.random(n) < rng.random()).astype(int)
        expected = pair_count(scores.tolist(), labels.tolist())
        assert roc_auc(scores, labels) == expected
        assert roc_auc_pairs(scores, labels) == expected


scores_and_labels = st.integers(2, 60).flatmap(lambda n: st.tuples(
    st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
)).filter(lambda t: 0 < sum(t[1]) < len(t[1]))


@settings(max_examples=200, deadline=None)
@given(scores_and_labels)
def test_auc_property_oracle(data):
    s, y = data
    assert roc_auc(s, y) == pair_count(s, y)


@settings(max_examples=200, deadline=None)
@given(scores_and_labels)
def test_auc_invariant_under_monotone_maps(data):
    s, y = data
    s = np.array(s)
    # scaling by a power of two and ranking are exact, strictly increasing maps
    assert roc_auc(8.0 * s, y) == roc_auc(s, y)
    assert roc_auc(rankdata(s, method="dense") ** 3, y) == roc_auc(s, y)


@settings(max_examples=200, deadline=None)
@given(scores_and_labels)
def test_auc_complement(data):
    s, y = data
    y = np.array(y)
    assert roc_auc(s, y) + roc_auc(s, 1 - y) == pytest.approx(1.0, abs=1e-12)
    assert 0.0 <= roc_auc(s, y) <= 1.0


def test_auc_table_per_label(rng):
    scores = rng.random((40, 4))
    labels = (rng.random((40, 4)) < 0.5).astype(int)
    labels[:, 2] = 1
    t = auc_table(scores, labels, [0, 2, 3], ["a", "b", "c", "d"])
    assert t.labels == ("a", "c", "d")
    assert t.get("c") is None
    assert t.get("a") == pair_count(scores[:, 0].tolist(), labels[:, 0].tolist())
    assert t.average == pytest.approx((t.get("a") + t.get("d")) / 2, abs=1e-15)


def test_bwt_table_average_arithmetic():
    # published averages: initial .8106, fine-tuned .7708, EWC .7936
    initial = LabelTable(("avg",), np.array([0.8106]), np.array([True]))
    naive = LabelTable(("avg",), np.array([0.7708]), np.array([True]))
    ewc = LabelTable(("avg",), np.array([0.7936]), np.array([True]))
    assert backward_transfer(initial, naive).get("avg") == pytest.approx(-0.0398, abs=1e-12)
    assert backward_transfer(initial, ewc).get("avg") == pytest.approx(-0.0170, abs=1e-12)


def test_fwt_table_average_arithmetic():
    unseen = LabelTable(("avg",), np.array([0.7833]), np.array([True]))
    assert forward_transfer(unseen).get("avg") == pytest.approx(0.2833, abs=1e-12)


def test_transfer_identities():
    t = table([0.7, None, 0.9])
    assert backward_transfer(t, t).as_dict() == {"l0": 0.0, "l1": None, "l2": 0.0}
    assert forward_transfer(table([0.5])).get("l0") == 0.0


def test_bwt_undefined_propagates():
    bwt = backward_transfer(table([0.7, 0.8]), table([None, 0.75]))
    assert bwt.get("l0") is None
    assert bwt.get("l1") == pytest.approx(-0.05, abs=1e-12)


def test_bwt_label_mismatch_rejected():
    with pytest.raises(ConfigurationError):
        backward_transfer(table([0.7]), LabelTable.from_dict({"other": 0.7}))


def test_aggregate():
    lo, mean, hi = aggregate([-0.02, None, 0.0, 0.04])
    assert (lo, hi) == (-0.02, 0.04)
    assert mean == pytest.approx(0.02 / 3, abs=1e-15)
    assert aggregate(table([0.1, None, 0.3])) == pytest.approx((0.1, 0.2, 0.3))
    with pytest.raises(ConfigurationError):
        aggregate([None, None])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.one_of(st.none(), st.floats(-1, 1)), min_size=1).filter(
    lambda v: any(x is not None for x in v)))
def test_aggregate_mean_within_range(values):
    lo, mean, hi = aggregate(values)
    assert lo <= mean + 1e-15 and mean <= hi + 1e-15


def test_table_csv(tmp_path):
    t = table([0.75, None])
    t.write_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text() == "label,value,defined\nl0,0.75,1\nl1,,0\n"


def test_spearman():
    assert spearman([0, 0.2, 0.4], [-0.1, -0.05, -0.01]) == pytest.approx(1.0)
    assert spearman([0, 0.2, 0.4], [3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([1, 2, 3], [5, 5, 5]) == 0.0
