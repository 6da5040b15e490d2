import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from mmsn.errors import MisalignedInputs, NoPositives, SingleClass, TooFewValidResamples
from mmsn.metrics import (
    MetricReport,
    auprc,
    auroc,
    bootstrap_ci,
    compare_reports,
    macro_auprc,
    macro_auroc,
    metric_report,
    permutation_null,
    significance_test,
)

from oracles import auprc_thresholds, auroc_pairs


def random_instance(rng):
    n = int(rng.integers(2, 51))
    # small integer scores force plenty of ties
    scores = rng.integers(0, rng.integers(2, 12), size=n).astype(float)
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 1, 0
    rng.shuffle(labels)
    return scores, labels


def test_auroc_matches_pair_oracle_exactly():
    rng = np.random.default_rng(0)
    for _ in range(200):
        s, y = random_instance(rng)
        assert auroc(s, y) == auroc_pairs(s.tolist(), y.tolist())


def test_auprc_matches_threshold_oracle_exactly():
    rng = np.random.default_rng(1)
    for _ in range(200):
        s, y = random_instance(rng)
        assert auprc(s, y) == auprc_thresholds(s.tolist(), y.tolist())


def test_continuous_scores_match_oracles():
    rng = np.random.default_rng(2)
    for _ in range(50):
        s, y = random_instance(rng)
        s = s + rng.normal(size=s.size)
        assert auroc(s, y) == auroc_pairs(s.tolist(), y.tolist())
        assert auprc(s, y) == auprc_thresholds(s.tolist(), y.tolist())


def test_closed_forms():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auroc([0.5] * 4, [0, 1, 0, 1]) == 0.5
    assert auprc([0.9, 0.8, 0.1, 0.0], [1, 1, 0, 0]) == 1.0
    for n in (2, 5, 17):
        s = np.arange(n, 0, -1.0)
        y = np.zeros(n, int)
        y[-1] = 1
        assert auprc(s, y) == pytest.approx(1.0 / n, abs=1e-15)


def test_chance_level_on_independent_labels():
    rng = np.random.default_rng(3)
    s = rng.normal(size=20000)
    y = rng.integers(0, 2, size=20000)
    assert abs(auroc(s, y) - 0.5) < 0.01


def test_metric_errors():
    with pytest.raises(SingleClass):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(NoPositives):
        auprc([0.1, 0.2], [0, 0])
    with pytest.raises(MisalignedInputs):
        auroc([0.1, 0.2, 0.3], [0, 1])
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [0, 2])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.integers(0, 1)), min_size=2, max_size=40))
def test_metrics_in_unit_interval(pairs):
    s = [p[0] for p in pairs]
    y = [p[1] for p in pairs]
    if 0 < sum(y) < len(y):
        assert 0.0 <= auroc(s, y) <= 1.0
    if sum(y) > 0:
        assert 0.0 < auprc(s, y) <= 1.0


def test_macro_skips_single_class_labels():
    rng = np.random.default_rng(4)
    S = rng.normal(size=(30, 3))
    Y = rng.integers(0, 2, size=(30, 3))
    Y[:, 1] = 0
    Y[0, 0], Y[1, 0], Y[0, 2], Y[1, 2] = 1, 0, 1, 0
    expected = np.mean([auroc(S[:, 0], Y[:, 0]), auroc(S[:, 2], Y[:, 2])])
    assert macro_auroc(S, Y) == pytest.approx(expected, abs=1e-15)
    assert macro_auprc(S, Y) == pytest.approx(np.mean([auprc(S[:, 0], Y[:, 0]), auprc(S[:, 2], Y[:, 2])]), abs=1e-15)
    assert macro_auroc(S, Y, exclude=(0,)) == auroc(S[:, 2], Y[:, 2])


# -- bootstrap -------------------------------------------------------------


def test_bootstrap_deterministic_and_contains_point():
    rng = np.random.default_rng(5)
    y = rng.integers(0, 2, 300)
    s = y + rng.normal(size=300)
    a = bootstrap_ci(s, y, seed=7)
    b = bootstrap_ci(s, y, seed=7)
    assert a == b
    assert a.lo <= auroc(s, y) <= a.hi
    assert a.n_valid + a.n_skipped == 1000


def test_bootstrap_zero_width_for_constant_metric():
    s = np.r_[np.zeros(20), np.ones(20)]
    y = s.astype(int)
    ci = bootstrap_ci(s, y, seed=0)
    assert ci.lo == ci.hi == 1.0


def test_bootstrap_skips_degenerate_resamples():
    # one positive among 5: P(resample without it) = (4/5)^5 = 0.33
    s = np.arange(5.0)
    y = np.array([0, 0, 0, 0, 1])
    ci = bootstrap_ci(s, y, seed=0)
    assert ci.n_skipped > 0
    assert abs(ci.n_skipped / 1000 - 0.8 ** 5) < 0.05


def test_bootstrap_too_few_valid():
    # a metric that needs two positive rows; with one positive in 40 rows a
    # resample repeats it with probability 1 - 0.975^40 - 40 * 0.025 * 0.975^39 = 0.26
    def needs_two(s, y):
        if y.sum() < 2:
            raise SingleClass("fewer than two positives")
        return auroc(s, y)

    s, y = np.arange(40.0), np.zeros(40, int)
    y[0] = 1
    with pytest.raises(TooFewValidResamples):
        bootstrap_ci(s, y, metric=needs_two, seed=0)


def test_bootstrap_rejects_small_n_boot():
    with pytest.raises(ValueError):
        bootstrap_ci([0.1, 0.9], [0, 1], n_boot=50)


def _gaussian_sample(rng, n, mu):
    y = np.r_[np.ones(n // 2, int), np.zeros(n - n // 2, int)]
    s = rng.normal(size=n) + mu * y
    return s, y


def test_bootstrap_narrows_with_n():
    widths = {}
    for n in (200, 2000):
        s, y = _gaussian_sample(np.random.default_rng(6), n, 1.0)
        ci = bootstrap_ci(s, y, seed=0)
        widths[n] = ci.hi - ci.lo
    assert widths[2000] < widths[200]


def bootstrap_coverage(trials=500, n=200, mu=1.0, seed=0):
    """Fraction of trials whose 95% interval covers the true AUROC Phi(mu / sqrt 2)."""
    truth = norm.cdf(mu / math.sqrt(2.0))
    rng = np.random.default_rng(seed)
    hits = 0
    for t in range(trials):
        s, y = _gaussian_sample(rng, n, mu)
        ci = bootstrap_ci(s, y, n_boot=1000, seed=t)
        hits += ci.lo <= truth <= ci.hi
    return hits / trials


@pytest.mark.slow
def test_bootstrap_coverage():
    assert abs(bootstrap_coverage() - 0.95) <= 0.03


def test_bootstrap_multilabel_callable():
    rng = np.random.default_rng(8)
    Y = rng.integers(0, 2, size=(60, 3))
    S = Y + rng.normal(size=(60, 3))
    ci = bootstrap_ci(S, Y, metric="auroc", n_boot=200, seed=1)
    assert ci.lo <= macro_auroc(S, Y) <= ci.hi


# -- significance ----------------------------------------------------------


def test_identical_models_give_p_one():
    rng = np.random.default_rng(9)
    y = rng.integers(0, 2, 100)
    s = rng.normal(size=100)
    assert significance_test(s, s, y, n_perm=500) == 1.0


def test_separating_model_is_significant():
    rng = np.random.default_rng(10)
    y = np.r_[np.ones(100, int), np.zeros(100, int)]
    a = y + 0.01 * rng.random(200)
    b = rng.normal(size=200)
    assert significance_test(a, b, y, n_perm=1000, seed=0) < 0.01


def test_significance_deterministic_and_symmetric():
    rng = np.random.default_rng(11)
    y = rng.integers(0, 2, 80)
    a = y + rng.normal(size=80)
    b = y + 2 * rng.normal(size=80)
    p1 = significance_test(a, b, y, seed=3)
    assert p1 == significance_test(a, b, y, seed=3)
    assert p1 == significance_test(b, a, y, seed=3)


def test_significance_misaligned():
    with pytest.raises(MisalignedInputs):
        significance_test([0.1, 0.2], [0.1], [0, 1])


def test_permutation_null_centered_at_half():
    rng = np.random.default_rng(12)
    y = rng.integers(0, 2, 200)
    m, sd = permutation_null(rng.normal(size=200), y)
    assert abs(m - 0.5) < 0.01
    # Mann-Whitney null sd: sqrt((n1 + n0 + 1) / (12 n1 n0))
    n1 = y.sum()
    n0 = 200 - n1
    assert sd == pytest.approx(math.sqrt((n1 + n0 + 1) / (12 * n1 * n0)), rel=0.1)


# -- reports ---------------------------------------------------------------


def _report(seed=0, n=60, noise=1.0):
    rng = np.random.default_rng(seed)
    Y = rng.integers(0, 2, size=(n, 14))
    Y[:, 5] = 0
    S = Y + noise * rng.normal(size=(n, 14))
    return metric_report(S, Y, n_boot=200, seed=0, sample_ids=[f"s{i}" for i in range(n)])


def test_report_schema_and_bounds():
    r = _report()
    assert len(r.per_label_auroc) == len(r.per_label_auprc) == 14
    assert r.per_label_auroc[5] is None and r.excluded_labels == [5]
    assert r.auroc_ci[0] <= r.auroc <= r.auroc_ci[1]
    assert r.auprc_ci[0] <= r.auprc <= r.auprc_ci[1]
    vals = [v for v in r.per_label_auroc + r.per_label_auprc if v is not None]
    assert all(0 <= v <= 1 for v in vals)
    assert r.auroc == pytest.approx(np.mean([v for v in r.per_label_auroc if v is not None]), abs=1e-15)


def test_report_json_round_trip(tmp_path):
    r = _report()
    r.to_json(tmp_path / "r.json")
    assert MetricReport.from_json(tmp_path / "r.json") == r


def test_compare_reports():
    a, b = _report(0, noise=0.2), _report(0, noise=3.0)
    assert compare_reports(a, b) < 0.01
    assert compare_reports(a, a) == 1.0
    c = _report(0)
    c.sample_ids = [f"x{i}" for i in range(60)]
    with pytest.raises(MisalignedInputs):
        compare_reports(a, c)
