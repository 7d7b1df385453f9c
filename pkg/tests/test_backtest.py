import json
import os

import numpy as np
import pytest

from hedgelab.backtest import (
    BacktestConfig,
    CheckpointMissingError,
    LeakageError,
    TestVault,
    WalkForwardPlan,
    config_hash,
    plan_episodes,
    run_long_horizon,
    run_walk_forward,
    write_bundle,
)
from hedgelab.env import RewardConfig
from hedgelab.marketdata import DataCoverageError, SyntheticMarketConfig, synthesize_market
from hedgelab.policies import BSDelta
from hedgelab.stats import compare_strategies
from hedgelab.env import rollout
from hedgelab.td3 import TD3Config

TINY = BacktestConfig(td3=TD3Config(episodes=40, hidden=8, batch=16, warmup=100, checkpoint_every=20),
                      bootstrap_reps=50)


@pytest.fixture(scope="module")
def quotes():
    return synthesize_market(SyntheticMarketConfig(n_days=252 * 3, seed=3, iv_vol=0.3))


@pytest.fixture(scope="module")
def report(quotes):
    plan = WalkForwardPlan.for_year(2017, 2015, policies=("Agent", "BS", "HW", "Haircut"))
    return run_walk_forward(plan, quotes, TINY)


def test_plan_for_year():
    p = WalkForwardPlan.for_year(2019, 2015)
    assert p.train_years == (2015, 2016, 2017) and p.validation_year == 2018


@pytest.mark.parametrize("kw", [
    dict(test_year=2017, train_years=(2016,), validation_year=2016),
    dict(test_year=2017, train_years=(), validation_year=2016),
    dict(test_year=2017, train_years=(2015,), validation_year=2016, policies=("Agent", "Oracle", "BS")),
    dict(test_year=2017, train_years=(2015,), validation_year=2016, policies=("Agent",)),
])
def test_plan_validation(kw):
    with pytest.raises(ValueError):
        WalkForwardPlan(**kw)


def test_vault_sealed_and_single_read(quotes):
    plan = WalkForwardPlan.for_year(2017, 2015, policies=("Agent", "BS"))
    _, _, test = plan_episodes(plan, quotes)
    v = TestVault(test)
    with pytest.raises(LeakageError):
        v.open("BS")
    v.unseal()
    v.open("BS")
    with pytest.raises(LeakageError):
        v.open("BS")
    assert v.count == 1


def test_plan_episodes_disjoint_years(quotes):
    plan = WalkForwardPlan.for_year(2017, 2015, policies=("Agent", "BS"))
    tr, va, te = plan_episodes(plan, quotes)
    assert {str(d)[:4] for e in tr for d in e.dates} == {"2015"}
    assert {str(d)[:4] for e in va for d in e.dates} == {"2016"}
    assert {str(d)[:4] for e in te for d in e.dates} == {"2017"}


def test_missing_year_is_coverage_error(quotes):
    with pytest.raises(DataCoverageError):
        plan_episodes(WalkForwardPlan.for_year(2019, 2015, policies=("Agent", "BS")), quotes)


def test_report_structure(report):
    assert report.vault_reads == 4
    assert set(report.comparisons) == {"Agent", "HW", "Haircut"}
    n = report.episode_counts["test"]
    assert all(len(r) == n for r in report.results.values())
    keys = [[(r.window_id, r.contract) for r in res] for res in report.results.values()]
    assert all(k == keys[0] for k in keys)


def test_identical_policy_comparison_is_zero(report):
    bs = report.results["BS"]
    comp = compare_strategies(bs, bs, 100)
    assert all(ci.point == 0 and ci.lower == 0 and ci.upper == 0 for ci in comp.cis.values())


def test_walk_forward_deterministic(quotes, report):
    again = run_walk_forward(report.plan, quotes, TINY)
    for name in report.results:
        assert all(np.array_equal(a.daily_pnl, b.daily_pnl)
                   for a, b in zip(report.results[name], again.results[name]))
    assert report.comparisons["Agent"].cis["reward"].lower == again.comparisons["Agent"].cis["reward"].lower


def test_bundle_files(tmp_path, report):
    d = write_bundle(report, str(tmp_path), TINY, {"x": 1})
    for f in ("comparison.tsv", "metrics.tsv", "delta_gap.tsv", "delta_gap_surface.tsv", "loss_states_agent.tsv",
              "loss_states_bs.tsv", "checkpoint.npz", "policies.jsonl", "manifest.json"):
        assert os.path.exists(os.path.join(d, f)), f
    man = json.load(open(os.path.join(d, "manifest.json")))
    assert man["test_year"] == 2017 and man["test_vault_reads"] == 4
    first = open(os.path.join(d, "comparison.tsv")).read()
    write_bundle(report, str(tmp_path), TINY, {"x": 1})
    assert open(os.path.join(d, "comparison.tsv")).read() == first


def test_config_hash_stable():
    assert config_hash(TINY) == config_hash(BacktestConfig(td3=TINY.td3, bootstrap_reps=50))
    assert config_hash(TINY) != config_hash(BacktestConfig(bootstrap_reps=51))


def test_long_horizon_same_year_equals_test_row(tmp_path, quotes, report):
    path = str(tmp_path / "ck.npz")
    report.checkpoint.save(path)
    rows = run_long_horizon(path, 2017, quotes, [2017], TINY)
    a, b = rows[0].comparison, report.comparisons["Agent"]
    for m in a.cis:
        assert a.cis[m].point == pytest.approx(b.cis[m].point, abs=1e-12)


def test_long_horizon_errors(tmp_path, quotes, report):
    with pytest.raises(CheckpointMissingError):
        run_long_horizon(str(tmp_path / "none.npz"), 2017, quotes, [2017], TINY)
    path = str(tmp_path / "ck.npz")
    report.checkpoint.save(path)
    with pytest.raises(ValueError):
        run_long_horizon(path, 2017, quotes, [2016], TINY)


def test_cost_lowers_bs_reward(report):
    # a proportional cost can only reduce accumulated reward
    from hedgelab.env import EpisodeBatch
    plan = report.plan
    batch = EpisodeBatch.from_episodes(plan_episodes(plan, synthesize_market(
        SyntheticMarketConfig(n_days=252 * 3, seed=3, iv_vol=0.3)))[2])
    free = rollout(BSDelta(), batch, RewardConfig(), 0.0)
    paid = rollout(BSDelta(), batch, RewardConfig(), 0.001)
    assert sum(r.daily_reward.sum() for r in paid) < sum(r.daily_reward.sum() for r in free)
