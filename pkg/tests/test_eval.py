import csv
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specface.evaluation import (EvalReport, ScoreSet, best_f1, compute_eer, cosine, distance_distributions,
                                 distance_histograms, entropy_mi_report, f1_at, histogram_entropy, histogram_mi,
                                 key_correlation_matrix, match, pearson_rows, pr_curve, roc_curve, tradeoff_grid,
                                 tradeoff_model)


# -- matching ------------------------------------------------------------------

def test_match_examples():
    a = np.array([0.3, -0.2, 0.9])
    assert match(a, a, 0.99) == (True, pytest.approx(1.0))
    ok, s = match(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.0)
    assert not ok and s == 0.0
    b = np.array([0.95, np.sqrt(1 - 0.95 ** 2)])
    ok, s = match(np.array([1.0, 0.0]), b, 0.99)
    assert not ok and np.isclose(s, 0.95)


def test_match_errors():
    with pytest.raises(ValueError):
        match(np.zeros(3), np.ones(3), 0.5)
    with pytest.raises(ValueError):
        cosine(np.ones(3), np.ones(4))


# -- EER and F1 ---------------------------------------------------------------

def test_eer_examples():
    assert compute_eer(ScoreSet([0.9, 0.8], [0.1, 0.2]))[0] == 0.0
    assert np.isclose(compute_eer(ScoreSet([0.9, 0.8, 0.7, 0.3], [0.6, 0.2, 0.1, 0.05]))[0], 0.25)
    s = [0.1, 0.4, 0.5, 0.9]
    assert np.isclose(compute_eer(ScoreSet(s, s))[0], 0.5)


def test_scoreset_validation():
    with pytest.raises(ValueError):
        ScoreSet([], [0.1])
    with pytest.raises(ValueError):
        ScoreSet([1.5], [0.1])
    sc = ScoreSet.from_pairs([0.9, 0.1, 0.8], [1, 0, 1])
    assert list(sc.genuine) == [0.9, 0.8] and list(sc.impostor) == [0.1]


def _dense_oracle_eer(gen, imp, n=10_000):
    """EER by explicit counting on a dense grid (plus the scores themselves), interpolated at the sign change."""
    lo, hi = min(gen.min(), imp.min()) - 1.0, max(gen.max(), imp.max())
    grid = np.unique(np.concatenate([np.linspace(lo, hi, n), gen, imp]))
    far = np.array([(imp > t).mean() for t in grid])
    frr = np.array([(gen <= t).mean() for t in grid])
    diff = far - frr
    j = np.flatnonzero(diff <= 0)[0]
    if diff[j] == 0:
        return far[j]
    w = diff[j - 1] / (diff[j - 1] - diff[j])
    return far[j - 1] + w * (far[j] - far[j - 1])


@pytest.mark.parametrize("seed", range(10))
def test_eer_matches_dense_sweep(seed):
    rng = np.random.default_rng(seed)
    gen = np.clip(rng.normal(0.5, 0.25, rng.integers(5, 60)), -1, 1)
    imp = np.clip(rng.normal(0.1, 0.25, rng.integers(5, 60)), -1, 1)
    eer, _ = compute_eer(ScoreSet(gen, imp))
    assert abs(eer - _dense_oracle_eer(gen, imp)) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=30), st.lists(st.floats(-1, 1), min_size=1, max_size=30))
def test_eer_and_f1_ranges(gen, imp):
    sc = ScoreSet(gen, imp)
    eer, _ = compute_eer(sc)
    assert 0.0 <= eer <= 1.0
    theta, f1 = best_f1(sc)
    assert 0.0 <= f1 <= 1.0
    assert np.isclose(f1, f1_at(sc, theta))
    roc = roc_curve(sc)
    assert np.all(np.diff(roc["fpr"]) >= 0) and np.all(np.diff(roc["tpr"]) >= 0)


def test_eer_bounded_for_sane_scores():
    rng = np.random.default_rng(0)
    for _ in range(20):
        sc = ScoreSet(rng.uniform(0.0, 1.0, 30), rng.uniform(-1.0, 0.5, 30))
        assert 0.0 <= compute_eer(sc)[0] <= 0.5


def test_best_f1_examples():
    theta, f1 = best_f1(ScoreSet([0.9, 0.8], [0.1, 0.2]))
    assert f1 == 1.0 and 0.2 <= theta < 0.8
    theta, f1 = best_f1(ScoreSet([1.0], [0.0]))
    assert f1 == 1.0 and 0.0 <= theta < 1.0


def test_best_f1_tie_breaks_to_largest_threshold():
    sc = ScoreSet([0.9, 0.8], [0.1, 0.2])
    theta, _ = best_f1(sc)
    # every threshold in [0.2, 0.8) separates perfectly; the largest candidate in the union is 0.2
    assert theta == 0.2


def test_pr_curve_shapes():
    pr = pr_curve(ScoreSet([0.9, 0.7], [0.8, 0.1]))
    assert len(pr["threshold"]) == len(pr["recall"]) == len(pr["precision"])
    assert np.all((pr["precision"] >= 0) & (pr["precision"] <= 1))


# -- distributions and correlation -------------------------------------------

def test_duplicate_scans_intra_at_zero():
    v = np.tile(np.array([[0.2, 0.5, -0.1]]), (4, 1))
    h = distance_distributions(v, (np.array([0, 1, 2]), np.array([1, 2, 3]), np.array([1, 1, 0])))
    assert h["intra"][0] == 2 and h["intra"][1:].sum() == 0 and abs(h["intra_mean"]) < 1e-12
    assert len(h["edges"]) == 51 and h["edges"][-1] == 2.0


def test_distance_distributions_from_pairs():
    v = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    h = distance_distributions(v, (np.array([0, 0]), np.array([1, 2]), np.array([1, 0])))
    assert h["intra_mean"] == 0.0 and np.isclose(h["inter_mean"], 1.0) and np.isclose(h["gap"], 1.0)


def test_random_inter_mean():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((10_000, 64))
    b = rng.standard_normal((10_000, 64))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    h = distance_histograms(np.ones(1), np.einsum("ij,ij->i", a, b))
    assert abs(h["inter_mean"] - 1.0) < 0.05


def test_correlation_identity_and_negation():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 64))
    assert np.allclose(pearson_rows(x, x), 1.0)
    assert np.allclose(pearson_rows(x, -x), -1.0)


def test_key_correlation_conditions():
    rng = np.random.default_rng(2)
    base = rng.standard_normal(16)
    t = np.stack([base, base, -base, rng.standard_normal(16)])
    out = key_correlation_matrix(t, [0, 0, 1, 1], ["a", "a", "a", "b"])
    assert np.isclose(out["same_subject_same_key"]["mean"], 1.0)
    assert out["same_subject_same_key"]["pairs"] == 1
    assert out["same_subject_diff_key"]["pairs"] == 1
    assert np.isclose(out["diff_subject_same_key"]["mean"], -1.0)
    assert out["diff_subject_diff_key"]["pairs"] == 2
    excl = np.zeros((4, 4), dtype=bool)
    excl[0, 1] = True
    out = key_correlation_matrix(t, [0, 0, 1, 1], ["a", "a", "a", "b"], exclude=excl)
    assert out["same_subject_same_key"]["pairs"] == 0 and np.isnan(out["same_subject_same_key"]["mean"])


# -- entropy and MI ------------------------------------------------------------

def test_constant_entropy_zero():
    assert np.all(histogram_entropy(np.full((100, 5), 3.0)) == 0.0)


def test_uniform_entropy_max():
    x = np.repeat(np.arange(32.0), 10)[:, None]
    assert np.isclose(histogram_entropy(x)[0], 5.0)


def test_self_information():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2000, 8))
    assert np.allclose(histogram_mi(x, x), histogram_entropy(x), atol=1e-6)
    rep = entropy_mi_report(x, x)
    assert abs(rep["info_preservation"] - 1.0) < 1e-6 and abs(rep["info_loss"]) < 1e-6
    assert rep["units"] == "bits"


def test_independent_mi_near_zero():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((100_000, 4))
    y = rng.permutation(x)
    assert np.all(histogram_mi(x, y) < 0.02)


def test_mi_symmetry_and_bounds():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((500, 3))
    y = x + rng.standard_normal((500, 3))
    mi = histogram_mi(x, y)
    assert np.allclose(mi, histogram_mi(y, x))
    assert np.all(mi >= -1e-12) and np.all(mi <= np.minimum(histogram_entropy(x), histogram_entropy(y)) + 1e-9)


def test_small_sample_warning():
    with pytest.warns(RuntimeWarning, match="widening"):
        h = histogram_entropy(np.arange(10.0)[:, None])
    assert np.isclose(h[0], np.log2(10))


# -- trade-off -----------------------------------------------------------------

def test_tradeoff_t0():
    dh, deer = tradeoff_model(10, 0, big_c=1.3, n=642)
    assert dh == 1.3 * np.log(642 / 10)
    assert deer == 0.2 * np.exp(-0.1 * 10)


def test_tradeoff_monotonicity_grid():
    ks = np.array([10, 20, 25])
    ts = np.array([0, 25, 50, 75])
    dh, deer = tradeoff_model(ks[:, None], ts[None, :])
    assert np.all(np.diff(dh, axis=1) > 0)
    assert np.all(np.diff(deer, axis=0) < 0)
    assert np.all(np.diff(deer, axis=1) > 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(1, 100), st.floats(0, 200), st.floats(1e-3, 1), st.floats(1e-3, 1))
def test_tradeoff_partials_property(k, t, c, alpha):
    dh1, e1 = tradeoff_model(k, t, c=c, alpha=alpha)
    dh2, e2 = tradeoff_model(k, t + 1, c=c, alpha=alpha)
    _, e3 = tradeoff_model(k + 1, t, c=c, alpha=alpha)
    assert dh2 > dh1 and e2 > e1 and e3 < e1


def test_tradeoff_grid_layout():
    rows = tradeoff_grid()
    assert [(r["K"], r["T"]) for r in rows][:3] == [(10, 25), (10, 50), (10, 75)]
    assert len(rows) == 9


# -- report --------------------------------------------------------------------

def test_report_json_and_csv(tmp_path):
    rep = EvalReport.from_scores(ScoreSet([0.9, 0.7, 0.6], [0.65, 0.1]), meta={"K": 10})
    obj = json.loads(rep.dumps())
    assert 0 <= obj["eer"] <= 0.5 and 0 <= obj["f1"] <= 1 and obj["meta"]["K"] == 10
    paths = rep.export_csv(tmp_path)
    assert {p.name for p in paths} == {"roc.csv", "pr.csv", "distances.csv"}
    with (tmp_path / "roc.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["threshold", "fpr", "tpr"] and len(rows) == 1 + len(rep.roc["fpr"])
    with (tmp_path / "distances.csv").open() as fh:
        assert len(list(csv.reader(fh))) == 51
