import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hedgelab.env import EpisodeResult, RewardConfig, step_reward
from hedgelab.stats import (
    DegenerateVarianceError,
    InsufficientSampleError,
    PairingMismatchError,
    WindowGroups,
    compare_strategies,
    comparison_table,
    compute_metrics,
    cvar,
    downside_variance,
    log_ratio,
    stars,
    two_stage_bootstrap,
)


def make_results(pnl, windows=None, name="A", daily=None):
    out = []
    for i, p in enumerate(pnl):
        d = np.full(21, p / 21.0) if daily is None else daily[i]
        out.append(EpisodeResult(
            daily_pnl=d, daily_reward=step_reward(d / 100.0), terminal_pnl=float(np.sum(d)),
            deltas=np.zeros(21), bs_deltas=np.zeros(21),
            window_id=str(i if windows is None else windows[i]), contract=(100.0 + i, "2020-03-20", True),
            policy_name=name,
        ))
    return out


def brute_cvar(p, level=0.05):
    p = sorted(p)
    k = max(1, math.ceil(level * len(p)))
    return sum(p[:k]) / k


def test_cvar_example():
    assert cvar(np.arange(-2, 18)) == -2.0


def test_metric_trivial_cases():
    m = compute_metrics(pnl=np.full(10, 3.5))
    assert m.variance == 0.0 and m.mean_pnl == 3.5 and m.downside_variance == 0.0
    assert compute_metrics(pnl=np.abs(np.random.default_rng(1).normal(size=50))).downside_variance == 0.0


def test_downside_variance_definition():
    p = np.array([-1.0, 2.0, -3.0, 0.5])
    assert downside_variance(p) == pytest.approx((1 + 9) / 3, abs=1e-15)


def test_insufficient_sample():
    with pytest.raises(InsufficientSampleError):
        compute_metrics(pnl=[1.0])


@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=2, max_size=200))
def test_cvar_matches_brute_force(p):
    assert cvar(p) == pytest.approx(brute_cvar(p), rel=1e-12, abs=1e-12)
    m = compute_metrics(pnl=p)
    assert m.downside_variance >= 0 and m.variance >= 0
    assert m.cvar5 <= np.percentile(p, 5, method="lower") + 1e-12


@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=2, max_size=100), st.floats(0.1, 100))
def test_cvar_monotone_under_new_tail_episode(p, gap):
    new = np.percentile(p, 5) - gap
    assert cvar(p + [new]) <= cvar(p) + 1e-9


def test_log_ratio_examples():
    assert log_ratio(2.0, 2.0) == 0.0
    assert log_ratio(math.e * 3.0, 3.0) == pytest.approx(1.0, abs=1e-15)
    assert abs(log_ratio(0.083, 0.049) - 0.527) < 5e-3
    with pytest.raises(DegenerateVarianceError, match="degenerate benchmark variance"):
        log_ratio(0.1, 0.0)


def test_stars():
    assert [stars(p) for p in (0.005, 0.03, 0.07, 0.2, float("nan"))] == ["***", "**", "*", "", ""]


def test_single_window_single_episode_is_degenerate():
    ci = two_stage_bootstrap(["w"], lambda i: np.array([1.7])[i].mean(), B=200)
    assert ci.lower == ci.upper == ci.point == 1.7
    assert ci.degenerate


def test_bootstrap_deterministic():
    x = np.random.default_rng(0).normal(size=60)
    w = np.repeat(np.arange(12), 5).astype(str)
    a = two_stage_bootstrap(w, lambda i: x[i].mean(), B=300, seed=4)
    b = two_stage_bootstrap(w, lambda i: x[i].mean(), B=300, seed=4)
    assert (a.lower, a.upper, a.p_value) == (b.lower, b.upper, b.p_value)
    assert a.lower <= a.point <= a.upper


def test_two_stage_draw_structure():
    # window sizes 1 and 3: a draw must always contain whole-window multiplicities
    groups = WindowGroups(["a", "b", "b", "b"])
    rng = np.random.default_rng(0)
    for _ in range(50):
        idx = groups.draw(rng)
        n_a = np.sum(idx == 0)
        assert len(idx) == n_a + 3 * ((len(idx) - n_a) // 3)
        assert len(idx) in (2, 4, 6)


def test_bootstrap_width_matches_normal():
    # singleton windows reduce to the ordinary bootstrap of a mean
    x = np.random.default_rng(3).normal(size=3000)
    ci = two_stage_bootstrap(np.arange(3000).astype(str), lambda i: x[i].mean(), B=2000, seed=1)
    analytic = 2 * 1.959964 * x.std(ddof=1) / np.sqrt(len(x))
    assert abs((ci.upper - ci.lower) / analytic - 1) < 0.15


def test_self_comparison_zero():
    r = make_results(np.random.default_rng(0).normal(size=30), windows=np.repeat(np.arange(6), 5))
    comp = compare_strategies(r, r, B=200)
    for ci in comp.cis.values():
        assert ci.point == 0 and ci.lower == 0 and ci.upper == 0


def test_shifted_comparison():
    rng = np.random.default_rng(2)
    daily = [rng.normal(0, 0.3, 21) for _ in range(40)]
    c = 0.5
    a = make_results([d.sum() for d in daily], np.repeat(np.arange(8), 5), "A", daily)
    b = make_results([d.sum() + c for d in daily], np.repeat(np.arange(8), 5), "B",
                     [d + c / 21 for d in daily])
    comp = compare_strategies(a, b, B=200)
    assert comp.cis["mean_pnl"].point == pytest.approx(-c, abs=1e-12)
    ra = np.mean([step_reward(d / 100, RewardConfig()).sum() for d in daily])
    rb = np.mean([step_reward((d + c / 21) / 100, RewardConfig()).sum() for d in daily])
    assert comp.cis["reward"].point == pytest.approx(ra - rb, abs=1e-10)
    assert comp.cis["log_variance"].point == pytest.approx(0.0, abs=1e-10)


def test_pairing_mismatch():
    a = make_results([1.0, 2.0, 3.0])
    b = make_results([1.0, 2.0, 3.0], windows=["x", "y", "z"])
    with pytest.raises(PairingMismatchError):
        compare_strategies(a, b, B=10)


def test_pairing_is_order_free():
    rng = np.random.default_rng(5)
    pa, pb = rng.normal(size=20), rng.normal(size=20)
    w = np.repeat(np.arange(4), 5)
    a, b = make_results(pa, w, "A"), make_results(pb, w, "B")
    c1 = compare_strategies(a, b, B=100, seed=1)
    c2 = compare_strategies(a[::-1], b, B=100, seed=1)
    assert c1.cis["log_variance"].lower == c2.cis["log_variance"].lower


def test_comparison_table_footers():
    r = make_results(np.random.default_rng(0).normal(size=10))
    text = comparison_table([("2020", compare_strategies(r, r, B=50))], B=50, seed=0)
    assert "sum(min(P,0)^2)/(N-1)" in text and "B = 50" in text and "seed = 0" in text
    assert text.splitlines()[0].startswith("label\tleft\tright")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_percentile_interval_contains_point(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=30)
    w = np.repeat(np.arange(6), 5).astype(str)
    ci = two_stage_bootstrap(w, lambda i: x[i].mean(), B=300, seed=seed)
    assert ci.lower <= ci.point <= ci.upper
