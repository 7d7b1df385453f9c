import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hedgelab.diagnostics import (
    IntervalRecords,
    bs_variance_decomposition,
    cluster_variance_contribution,
    delta_gap_surface,
    loss_state_table,
    r_squared,
    revaluation_decomposition,
    run_diagnostics,
    spot_only_r2,
    variance_decomposition,
)
from hedgelab.env import EpisodeBatch, rollout
from hedgelab.policies import BSDelta, Haircut
from hedgelab.pricing import MarketInputs, bs_call_price
from helpers import market_episodes


def records(n, **cols):
    base = dict(
        window_id=np.array(["w"] * n), contract=np.array(["c"] * n),
        date=np.full(n, np.datetime64("2020-01-02")), year=np.full(n, 2020),
        dS=np.zeros(n), dC=np.zeros(n), dIV=np.zeros(n), delta_agent=np.full(n, 0.5), delta_bs=np.full(n, 0.5),
        pnl_agent=np.zeros(n), pnl_bs=np.zeros(n), reward_agent=np.zeros(n), reward_bs=np.zeros(n),
        spot=np.full(n, 100.0), spot_next=np.full(n, 100.0), iv=np.full(n, 0.2), iv_next=np.full(n, 0.2),
        tau=np.full(n, 0.1), rate=np.zeros(n), div_yield=np.zeros(n), strike=np.full(n, 100.0),
        fwd_moneyness=np.ones(n),
    )
    base.update({k: np.asarray(v) for k, v in cols.items()})
    return IntervalRecords(**base)


@pytest.fixture(scope="module")
def synthetic():
    eps = market_episodes(n_days=252, seed=4, iv_vol=0.3)
    batch = EpisodeBatch.from_episodes(eps)
    return batch, rollout(Haircut(0.9), batch), rollout(BSDelta(), batch)


# ---- delta gap surface


def test_surface_zero_when_agent_is_bs():
    rng = np.random.default_rng(0)
    r = records(200, fwd_moneyness=rng.uniform(0.8, 1.3, 200), iv=rng.uniform(0.1, 0.4, 200))
    s = delta_gap_surface(r)
    assert np.all(s.mean_gap[~s.excluded] == 0)


def test_surface_constant_shift():
    rng = np.random.default_rng(1)
    bs = rng.uniform(0.2, 0.8, 300)
    r = records(300, fwd_moneyness=rng.uniform(0.8, 1.3, 300), iv=rng.uniform(0.1, 0.4, 300),
                delta_bs=bs, delta_agent=bs - 0.03)
    s = delta_gap_surface(r)
    assert np.allclose(s.mean_gap[~s.excluded], -0.03, atol=1e-12)
    assert s.counts.sum() == 300


def test_surface_two_cell_fixture():
    # cell A (m in [0.95,1.00), iv in [0.16,0.20)): gaps -0.00, -0.02 -> -0.01
    # cell B (m in [1.03,1.07), iv in [0.24,0.28)): gaps -0.04, -0.06 -> -0.05; one lone point excluded
    r = records(5, fwd_moneyness=[0.97, 0.98, 1.05, 1.04, 1.2], iv=[0.17, 0.18, 0.25, 0.26, 0.6],
                delta_bs=[0.5] * 5, delta_agent=[0.5, 0.48, 0.46, 0.44, 0.1])
    s = delta_gap_surface(r, m_bins=[0.95, 1.0, 1.03, 1.07, 1.4], iv_bins=[0.16, 0.2, 0.24, 0.28, 0.85])
    assert s.mean_gap[0, 0] == pytest.approx(-0.01, abs=1e-15)
    assert s.mean_gap[2, 2] == pytest.approx(-0.05, abs=1e-15)
    assert s.excluded[3, 3] and s.counts[3, 3] == 1 and np.isnan(s.mean_gap[3, 3])
    assert np.isnan(s.mean_gap[1, 1]) and s.counts[1, 1] == 0
    assert "mean_gap\tcount" in s.to_grid_text()


def test_surface_rejects_bad_bins():
    with pytest.raises(ValueError):
        delta_gap_surface(records(3), m_bins=[1.0, 0.9, 1.2])


# ---- loss states


def test_loss_state_fixture():
    r = records(6, dS=[-1, -2, -1, 1, 1, 2], dC=[-1, -1, -1, 1, 1, 1], dIV=[-0.01, -0.02, -0.01, 0.01, -0.01, 0.0],
                pnl_agent=[-1, -1, -1, 1, -1, 2])
    t = loss_state_table(r, "agent")
    assert t.n_loss == 4
    sh = t.shares
    assert sh[("down", "down", "down")] == 0.75 and sh[("up", "up", "down")] == 0.25
    assert sum(sh.values()) == pytest.approx(1.0)


def test_loss_state_no_losses():
    t = loss_state_table(records(4, pnl_agent=[0.0, 1.0, 2.0, 0.5]))
    assert t.zero_denominator and t.shares == {}
    assert "zero denominator" in t.to_text()


def test_loss_state_zero_is_up():
    t = loss_state_table(records(1, pnl_agent=[-1.0]))
    assert t.counts[("up", "up", "up")] == 1 and t.n_zero_ties == 3


# ---- revaluation


def test_revaluation_components():
    rng = np.random.default_rng(2)
    n = 50
    r = records(n, spot=rng.uniform(90, 110, n), spot_next=rng.uniform(90, 110, n), iv=rng.uniform(0.1, 0.3, n),
                iv_next=rng.uniform(0.1, 0.3, n), dC=rng.normal(size=n))
    rv = revaluation_decomposition(r)
    assert np.allclose(rv.spot_component + rv.iv_component + rv.remainder, r.dC, rtol=0, atol=1e-12)
    same_iv = revaluation_decomposition(records(n, spot_next=r.spot_next, iv=r.iv, iv_next=r.iv))
    assert np.all(same_iv.iv_component == 0)
    same_s = revaluation_decomposition(records(n, iv=r.iv, iv_next=r.iv_next, dC=r.dC))
    assert np.all(same_s.spot_component == 0)
    assert np.allclose(same_s.iv_component, r.dC - same_s.remainder, rtol=0, atol=1e-12)


def test_revaluation_bs_consistent_remainder_is_cross_term_only():
    rng = np.random.default_rng(3)
    n = 100
    s0, s1 = np.full(n, 100.0), 100 * np.exp(rng.normal(0, 0.01, n))
    v0, v1 = np.full(n, 0.2), 0.2 + rng.normal(0, 0.01, n)

    def c(s, v):
        return bs_call_price(MarketInputs(s, 100.0, 0.1, 0.0, 0.0, v))

    # full repricing at unchanged maturity: spot-first split is exact, so the remainder vanishes
    r = records(n, spot=s0, spot_next=s1, iv=v0, iv_next=v1, dC=c(s1, v1) - c(s0, v0), tau=np.full(n, 0.1))
    rv = revaluation_decomposition(r)
    assert np.max(np.abs(rv.remainder)) < 1e-12
    # the two orderings differ only by the spot/IV cross term
    cross = c(s1, v1) - c(s1, v0) - c(s0, v1) + c(s0, v0)
    assert np.allclose(rv.iv_component - rv.iv_component_rev, cross, atol=1e-12)


def test_parachute_ratio_hand_example():
    r = records(3, spot=[100.0] * 3, spot_next=[99.0, 98.0, 101.0], iv=[0.2] * 3, iv_next=[0.21, 0.2, 0.19])
    rv = revaluation_decomposition(r)
    dS = r.spot_next - r.spot
    expected = max(rv.iv_component[0], 0) / (abs(rv.spot_component[0]) + abs(rv.spot_component[1]))
    assert rv.parachute_ratio(dS) == pytest.approx(expected, rel=1e-14)


# ---- variance decompositions


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=2, max_size=60))
def test_variance_identity(pairs):
    o, h = np.array(pairs).T
    v = variance_decomposition(o, h)
    scale = max(1.0, v.var_option + v.var_hedge)
    assert abs(v.total - v.var_sum) <= 1e-12 * scale


def test_perfect_hedge():
    o = np.random.default_rng(0).normal(size=40)
    v = variance_decomposition(o, -o)
    assert v.total == pytest.approx(0.0, abs=1e-14)
    assert v.two_cov == pytest.approx(-2 * v.var_option, rel=1e-14)


def test_independent_legs():
    rng = np.random.default_rng(9)
    v = variance_decomposition(rng.normal(size=20000), rng.normal(size=20000))
    assert abs(v.two_cov) < 4 * 2 / np.sqrt(20000)


def test_bs_decomposition_on_batch(synthetic):
    batch, _, bs = synthetic
    v = bs_variance_decomposition(batch)
    assert abs(v.total - v.var_sum) <= 1e-12 * (v.var_option + v.var_hedge)
    # BS results telescope to O + H
    pnl = np.array([r.terminal_pnl for r in bs])
    assert np.var(pnl, ddof=1) == pytest.approx(v.var_sum, rel=1e-9)


def test_spot_only_r2():
    rng = np.random.default_rng(4)
    n = 5000
    spot, dS = np.full(n, 100.0), rng.normal(0, 1, n)
    assert spot_only_r2(records(n, spot=spot, dS=dS, dC=3 * dS / 100 + 0.1))[2020] == pytest.approx(1.0)
    r2 = spot_only_r2(records(n, spot=spot, dS=dS, dC=rng.normal(size=n)))[2020]
    assert 0 <= r2 < 0.02
    with pytest.raises(Exception):
        spot_only_r2(records(5))


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=3, max_size=40))
def test_r2_bounds(pairs):
    x, y = np.array(pairs).T
    assert 0.0 <= r_squared(x, y) <= 1.0


# ---- cluster contributions


def test_cluster_self_zero():
    p = np.random.default_rng(0).normal(size=12)
    c = cluster_variance_contribution(p, p, np.repeat(["a", "b", "c"], 4))
    assert np.all(c.v == 0)


@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.integers(0, 3)), min_size=2, max_size=60))
def test_cluster_closure(rows):
    a, b, g = (np.array(x) for x in zip(*rows))
    c = cluster_variance_contribution(a, b, g)
    scale = max(1.0, np.var(a, ddof=1) + np.var(b, ddof=1))
    assert abs(sum(c.V.values()) - c.total_gap) <= 1e-12 * scale


def test_cluster_hand_example():
    a = np.array([1.0, -1.0, 3.0, -3.0])  # mean 0, squares 1,1,9,9
    b = np.array([0.0, 0.0, 1.0, -1.0])  # mean 0, squares 0,0,1,1
    c = cluster_variance_contribution(a, b, ["x", "x", "y", "y"])
    assert c.V["x"] == pytest.approx(2 / 3, abs=1e-12) and c.V["y"] == pytest.approx(16 / 3, abs=1e-12)
    assert c.shares["x"] == pytest.approx(2 / 18, abs=1e-12) and c.shares["y"] == pytest.approx(16 / 18, abs=1e-12)


# ---- joining results


def test_records_and_bundle(synthetic):
    batch, agent, bs = synthetic
    rec = IntervalRecords.build(batch, agent, bs)
    assert len(rec) == 21 * len(batch)
    assert np.allclose(rec.delta_agent, np.clip(0.9 * rec.delta_bs, 0, 1))
    bundle = run_diagnostics(batch, agent, bs)
    assert bundle.gap_rows[0].mean_gap < 0 and bundle.gap_rows[0].underhedged_share > 0.5
    assert bundle.clusters is not None
