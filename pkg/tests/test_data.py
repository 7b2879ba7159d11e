import numpy as np
import pytest

from clshift import data
from clshift.data import (
    A_ONLY,
    B_ONLY,
    LABEL_NAMES,
    N_LABELS,
    SHARED,
    BenchmarkSpec,
    SplitSpec,
    generate,
    ground_truth,
    split,
)
from clshift.errors import ConfigurationError, IntegrityError


@pytest.fixture(scope="module")
def default_domains():
    return generate(BenchmarkSpec())


@pytest.fixture(scope="module")
def small():
    return generate(BenchmarkSpec(groups_per_domain=40, feature_dim=6, seed=9))


def test_generation_is_deterministic():
    spec = BenchmarkSpec(groups_per_domain=50, seed=4)
    a1, b1 = generate(spec)
    a2, b2 = generate(spec)
    assert a1.equals(a2) and b1.equals(b2)
    a3, _ = generate(BenchmarkSpec(groups_per_domain=50, seed=5))
    assert not np.array_equal(a1.features, a3.features)


def test_label_topology():
    assert N_LABELS == 21
    assert (len(SHARED), len(A_ONLY), len(B_ONLY)) == (7, 7, 7)
    assert not set(SHARED) & set(A_ONLY) and not set(A_ONLY) & set(B_ONLY)
    assert len(set(LABEL_NAMES)) == 21
    ma, mb = data.domain_mask("A"), data.domain_mask("B")
    assert ma.sum() == mb.sum() == 14
    assert np.flatnonzero(ma & mb).tolist() == list(SHARED)


def test_every_sample_has_fourteen_labels_and_zero_outside(default_domains):
    for ds, dom in zip(default_domains, "AB"):
        assert np.all(ds.masks.sum(axis=1) == 14)
        assert np.all(ds.domains == dom)
        assert not ds.labels[~ds.masks].any()


def test_positive_rates_are_calibrated(default_domains):
    for ds in default_domains:
        rate = ds.labels.sum(axis=0)[ds.masks[0]] / len(ds)
        assert np.all((rate >= 0.05) & (rate <= 0.95)), rate


def test_domain_b_is_an_invertible_affine_image():
    spec = BenchmarkSpec(groups_per_domain=30)
    t = ground_truth(spec)
    a, b = generate(spec)
    z_b = np.linalg.solve(t.shift_matrix, (b.features - t.shift_vector).T).T
    # each B sample's latent point is recoverable, so shared labels can be read pre-shift
    assert np.allclose(t.shift(z_b), b.features)
    assert t.weights.shape == (N_LABELS, spec.feature_dim)


def test_identity_shift_matches_marginals():
    a, b = generate(BenchmarkSpec(identity_shift=True, seed=2))
    # two-sample z test on group means, which are independent draws
    def group_means(ds):
        return np.array([ds.features[ds.group_ids == g].mean(axis=0) for g in ds.groups])
    ga, gb = group_means(a), group_means(b)
    se = np.sqrt(ga.var(axis=0, ddof=1) / len(ga) + gb.var(axis=0, ddof=1) / len(gb))
    z = (ga.mean(axis=0) - gb.mean(axis=0)) / se
    assert np.all(np.abs(z) < 3.5), z


def test_default_shift_moves_features(default_domains):
    a, b = default_domains
    assert np.abs(a.features.mean(axis=0) - b.features.mean(axis=0)).max() > 0.5


def test_non_invertible_shift_rejected():
    d = 3
    singular = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (1.0, 1.0, 0.0))
    with pytest.raises(ConfigurationError):
        ground_truth(BenchmarkSpec(feature_dim=d, shift_matrix=singular))


def test_spec_dict_round_trip_and_hash():
    spec = BenchmarkSpec(feature_dim=8, samples_per_group=(2, 4), seed=3)
    back = BenchmarkSpec.from_dict(spec.to_dict())
    assert back == spec and back.hash() == spec.hash()
    assert BenchmarkSpec(seed=4).hash() != BenchmarkSpec(seed=3).hash()
    with pytest.raises(ConfigurationError):
        BenchmarkSpec.from_dict({"bogus": 1})


def test_split_sizes_on_hundred_groups():
    a, _ = generate(BenchmarkSpec(groups_per_domain=100, feature_dim=4))
    train, val, test = split(a, SplitSpec(), repetition_seed=1)
    assert test.groups.size == 20
    assert train.groups.size + val.groups.size == 80
    assert val.groups.size == 8


def test_split_is_a_group_partition(default_domains):
    for ds in default_domains:
        parts = split(ds, SplitSpec(), repetition_seed=3)
        sets = [set(p.groups.tolist()) for p in parts]
        assert not sets[0] & sets[1] and not sets[0] & sets[2] and not sets[1] & sets[2]
        assert set().union(*sets) == set(ds.groups.tolist())
        assert sum(len(p) for p in parts) == len(ds)


def test_test_split_fixed_across_repetitions(small):
    a, _ = small
    _, v1, t1 = split(a, SplitSpec(), repetition_seed=1, base_seed=0)
    _, v2, t2 = split(a, SplitSpec(), repetition_seed=2, base_seed=0)
    assert t1.equals(t2)
    assert not np.array_equal(v1.groups, v2.groups)


def test_split_needs_ten_groups():
    a, _ = generate(BenchmarkSpec(groups_per_domain=9, feature_dim=4))
    with pytest.raises(ConfigurationError):
        split(a, SplitSpec(), repetition_seed=0)


def test_save_load_round_trip(tmp_path, small):
    for ds in small:
        path = tmp_path / f"{ds.domains[0]}.csv"
        data.save(ds, path)
        assert data.load(path, expected_spec_hash=ds.spec_hash).equals(ds)


def test_truncated_file_rejected(tmp_path, small):
    path = tmp_path / "a.csv"
    data.save(small[0], path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(IntegrityError):
        data.load(path)


def test_edited_label_rejected(tmp_path, small):
    path = tmp_path / "a.csv"
    data.save(small[0], path)
    lines = path.read_text().splitlines(keepends=True)
    cells = lines[2].rstrip("\n").split(",")
    y0 = lines[1].split(",").index("y_0")
    cells[y0] = "1" if cells[y0] == "0" else "0"
    lines[2] = ",".join(cells) + "\n"
    path.write_text("".join(lines))
    with pytest.raises(IntegrityError):
        data.load(path)


def test_spec_hash_mismatch_rejected(tmp_path, small):
    path = tmp_path / "a.csv"
    data.save(small[0], path)
    with pytest.raises(IntegrityError):
        data.load(path, expected_spec_hash="0" * 16)


def test_header_records_hash_and_seed(tmp_path, small):
    path = tmp_path / "a.csv"
    data.save(small[0], path)
    first = path.read_text().splitlines()[0]
    assert first.startswith("# ") and small[0].spec_hash in first and '"seed": 9' in first
