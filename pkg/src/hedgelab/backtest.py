"""Walk-forward orchestration, frozen-policy re-evaluation and seed replication."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import pandas as pd

from . import __version__
from .diagnostics import DiagnosticsBundle, gap_table, run_diagnostics
from .distill.gp import write_hof
from .distill.pipeline import DistillConfig, DistillResult, distill, fit_regime_switch
from .env import EpisodeBatch, EpisodeResult, RewardConfig, rollout, write_results
from .marketdata import DataCoverageError, Episode, build_year_episodes, chain_fingerprint, trading_calendar
from .policies import (
    REGIME_EDGES,
    BSDelta,
    HullWhite,
    NeuralActor,
    RegimeSwitch,
    SmoothedActor,
    Symbolic,
    fit_hull_white,
    select_haircut,
    write_policies,
)
from .stats import (
    COMPARISON_METRICS,
    DEFAULT_REPLICATIONS,
    Comparison,
    compare_strategies,
    comparison_table,
    compute_metrics,
    metrics_table,
)
from .td3 import ActorCheckpoint, TD3Config, train

log = logging.getLogger(__name__)

ALL_POLICIES = ("Agent", "BS", "HW", "Haircut", "Symbolic", "Smoothed", "RegimeSwitch2", "RegimeSwitch3")
DEFAULT_POLICIES = ("Agent", "BS", "HW", "Haircut", "Symbolic")
_DISTILL_POLICIES = {"Symbolic", "Smoothed"}
BENCHMARK = "BS"


class CheckpointMissingError(FileNotFoundError):
    pass


class LeakageError(AssertionError):
    pass


@dataclass(frozen=True)
class WalkForwardPlan:
    test_year: int
    train_years: tuple[int, ...]
    validation_year: int
    policies: tuple[str, ...] = DEFAULT_POLICIES
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if not self.train_years:
            raise ValueError("walk-forward plan needs at least one training year")
        if not (max(self.train_years) < self.validation_year < self.test_year):
            raise ValueError("plan must satisfy max(train) < validation < test")
        unknown = set(self.policies) - set(ALL_POLICIES)
        if unknown:
            raise ValueError(f"unknown policies {sorted(unknown)}; choose from {ALL_POLICIES}")
        if "Agent" not in self.policies or BENCHMARK not in self.policies:
            raise ValueError("plan must evaluate both Agent and BS")

    @classmethod
    def for_year(cls, test_year: int, first_year: int, policies=DEFAULT_POLICIES, seeds=(0,)) -> "WalkForwardPlan":
        """Train on first_year..Y-2, validate on Y-1, test on Y."""
        return cls(test_year, tuple(range(first_year, test_year - 1)), test_year - 1, tuple(policies), tuple(seeds))


@dataclass(frozen=True)
class BacktestConfig:
    td3: TD3Config = TD3Config()
    distill: DistillConfig = DistillConfig()
    reward: RewardConfig = RewardConfig()
    cost: float = 0.0
    bootstrap_reps: int = DEFAULT_REPLICATIONS
    bootstrap_seed: int = 0


class TestVault:
    """Holds test-year episodes and counts every read; each policy may read once."""

    __test__ = False  # not a pytest class

    def __init__(self, episodes: Sequence[Episode]):
        self._batch = EpisodeBatch.from_episodes(episodes)
        self.reads: list[str] = []
        self.sealed = True

    def unseal(self) -> None:
        self.sealed = False

    def open(self, policy_name: str) -> EpisodeBatch:
        if self.sealed:
            raise LeakageError("test episodes requested before fitting and selection finished")
        if policy_name in self.reads:
            raise LeakageError(f"test episodes read twice for policy {policy_name!r}")
        self.reads.append(policy_name)
        return self._batch

    @property
    def count(self) -> int:
        return len(self.reads)

    @property
    def keys(self) -> list[tuple]:
        return [(e.window_id, e.contract) for e in self._batch.episodes]


@dataclass
class YearReport:
    plan: WalkForwardPlan
    seed: int
    results: dict[str, list[EpisodeResult]]
    comparisons: dict[str, Comparison]
    diagnostics: DiagnosticsBundle
    checkpoint: ActorCheckpoint
    policies: dict = field(default_factory=dict)
    distill: DistillResult | None = None
    haircut_table: dict = field(default_factory=dict)
    episode_counts: dict = field(default_factory=dict)
    vault_reads: int = 0
    fingerprint: str = ""
    train_history: list = field(default_factory=list)


def _episodes(quotes, years, overlapping, calendar, label):
    eps, rep = build_year_episodes(quotes, years, overlapping=overlapping, calendar=calendar)
    if not eps:
        raise DataCoverageError(f"no {label} episodes for years {list(years)} ({rep.discarded} discarded)")
    return eps


def check_coverage(quotes: pd.DataFrame, years: Sequence[int]) -> None:
    have = set(pd.to_datetime(quotes["date"]).dt.year.unique().tolist())
    missing = sorted(set(years) - have)
    if missing:
        raise DataCoverageError(f"market data has no quotes for years {missing}")


def plan_episodes(plan: WalkForwardPlan, quotes: pd.DataFrame):
    """(training, validation, test) episodes; training uses every start, the others non-overlapping windows."""
    check_coverage(quotes, list(plan.train_years) + [plan.validation_year, plan.test_year])
    cal = trading_calendar(quotes)
    train_eps = _episodes(quotes, plan.train_years, True, cal, "training")
    val_eps = _episodes(quotes, [plan.validation_year], False, cal, "validation")
    test_eps = _episodes(quotes, [plan.test_year], False, cal, "test")
    if max(e.dates[-1] for e in train_eps) >= min(e.dates[0] for e in val_eps):
        raise LeakageError("training windows overlap the validation year")
    return train_eps, val_eps, test_eps


def run_walk_forward(plan: WalkForwardPlan, quotes: pd.DataFrame, cfg: BacktestConfig = BacktestConfig(),
                     seed: int | None = None, progress=None, checkpoint: ActorCheckpoint | None = None,
                     checkpoint_path: str = "checkpoint.npz") -> YearReport:
    """Train, fit and select on years before ``plan.test_year``, then evaluate every policy on it.

    A pre-trained ``checkpoint`` skips TD3 training.
    """
    seed = plan.seeds[0] if seed is None else seed
    train_eps, val_eps, test_eps = plan_episodes(plan, quotes)
    vault = TestVault(test_eps)

    if checkpoint is None:
        tr = train(train_eps, replace(cfg.td3, seed=seed), val_eps, cfg.reward, cfg.cost, progress)
        checkpoint, history = tr.checkpoint, tr.history
    else:
        history = []
    agent = NeuralActor(checkpoint, checkpoint_path)
    policies: dict = {"Agent": agent, "BS": BSDelta()}
    val_window = str(plan.validation_year)
    if "HW" in plan.policies:
        policies["HW"] = HullWhite(fit_hull_white(val_eps, val_window))
    haircut_table = {}
    if "Haircut" in plan.policies:
        policies["Haircut"], haircut_table = select_haircut(val_eps, reward_cfg=cfg.reward, cost=cfg.cost,
                                                            fit_window=val_window)
    dres = None
    dcfg = replace(cfg.distill, seed=cfg.distill.seed + seed, gp=replace(cfg.distill.gp, seed=cfg.distill.gp.seed + seed))
    if _DISTILL_POLICIES & set(plan.policies):
        dres = distill(agent, train_eps, val_eps, dcfg, plan.validation_year, cfg.reward)
        if "Symbolic" in plan.policies:
            policies["Symbolic"] = Symbolic(dres.selected.expression, provenance={
                "family": dres.selected.family, "validation_year": plan.validation_year,
                "val_mae": dres.selected.val_mae})
        if "Smoothed" in plan.policies:
            policies["Smoothed"] = SmoothedActor(agent, dres.smoothed)
    for k in (2, 3):
        name = f"RegimeSwitch{k}"
        if name in plan.policies:
            exprs, _ = fit_regime_switch(agent, train_eps, val_eps, REGIME_EDGES[k], dcfg, plan.validation_year)
            pol = RegimeSwitch(REGIME_EDGES[k], exprs, {"validation_year": plan.validation_year})
            pol.name = name
            policies[name] = pol

    # fitting and selection are finished; the test year is read once per policy
    vault.unseal()
    results = {}
    for name in plan.policies:
        results[name] = rollout(policies[name], vault.open(name), cfg.reward, cfg.cost)
    if vault.count != len(plan.policies):
        raise LeakageError(f"test vault read {vault.count} times for {len(plan.policies)} policies")

    comparisons = {}
    for name in plan.policies:
        if name != BENCHMARK:
            comparisons[name] = compare_strategies(results[name], results[BENCHMARK], cfg.bootstrap_reps,
                                                   cfg.bootstrap_seed)
    diag = run_diagnostics(vault._batch, results["Agent"], results[BENCHMARK], str(plan.test_year))
    return YearReport(
        plan=plan, seed=seed, results=results, comparisons=comparisons, diagnostics=diag, checkpoint=checkpoint,
        policies=policies, distill=dres, haircut_table=haircut_table,
        episode_counts={"train": len(train_eps), "validation": len(val_eps), "test": len(vault.keys)},
        vault_reads=vault.count, fingerprint=chain_fingerprint(quotes), train_history=history,
    )


# --------------------------------------------------------------------------
# report bundle


def config_hash(obj) -> str:
    blob = json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_bundle(report: YearReport, out_dir: str, cfg: BacktestConfig, run_config: dict | None = None) -> str:
    """Write tables, grids, checkpoint, policy specs and a manifest under ``out_dir/<year>``."""
    d = os.path.join(out_dir, str(report.plan.test_year))
    os.makedirs(os.path.join(d, "results"), exist_ok=True)
    year = str(report.plan.test_year)
    rows = [(f"{year} {name}-BS", report.comparisons[name]) for name in report.plan.policies if name != BENCHMARK]
    _write(d, "comparison.tsv", comparison_table(rows, cfg.bootstrap_reps, cfg.bootstrap_seed))
    _write(d, "metrics.tsv", metrics_table([(year, n, compute_metrics(r)) for n, r in report.results.items()
                                            if len(r) >= 2]))
    diag = report.diagnostics
    _write(d, "delta_gap.tsv", gap_table(diag.gap_rows))
    _write(d, "delta_gap_surface.tsv", diag.surface.to_grid_text())
    _write(d, "loss_states_agent.tsv", diag.loss_agent.to_text())
    _write(d, "loss_states_bs.tsv", diag.loss_bs.to_text())
    _write(d, "mechanisms.tsv", _mechanism_text(diag))
    if diag.clusters is not None:
        lines = ["cluster\tV_g\tshare_of_positive"]
        for g in diag.clusters.labels:
            share = diag.clusters.shares.get(g)
            lines.append(f"{g}\t{diag.clusters.V[g]:.8g}\t{'' if share is None else f'{share:.6f}'}")
        lines.append(f"# sum V_g = Var(P^Agent) - Var(P^BS) = {diag.clusters.total_gap:.8g}")
        _write(d, "cluster_contributions.tsv", "\n".join(lines) + "\n")
    if report.haircut_table:
        _write(d, "haircut_grid.tsv", "lambda\tmean_validation_reward\n" + "".join(
            f"{k:.2f}\t{v:.6f}\n" for k, v in sorted(report.haircut_table.items())))
    if report.distill is not None:
        write_hof(report.distill.entries, os.path.join(d, "hof.tsv"))
        _write(d, "distill_selected.txt", report.distill.selected.to_line() + "\n")
    report.checkpoint.save(os.path.join(d, "checkpoint.npz"))
    write_policies(report.policies.values(), os.path.join(d, "policies.jsonl"))
    for name, res in report.results.items():
        write_results(res, os.path.join(d, "results", f"{name}.jsonl"))
    manifest = {
        "tool": "hedgelab", "version": __version__, "test_year": report.plan.test_year,
        "train_years": list(report.plan.train_years), "validation_year": report.plan.validation_year,
        "policies": list(report.plan.policies), "seed": report.seed, "data_fingerprint": report.fingerprint,
        "config": _jsonable(cfg), "config_hash": config_hash(run_config if run_config is not None else cfg),
        "episode_counts": report.episode_counts, "test_vault_reads": report.vault_reads,
        "bootstrap_reps": cfg.bootstrap_reps, "bootstrap_seed": cfg.bootstrap_seed,
        "conventions": {
            "pnl_units": "percent of initial spot", "downside_variance": "sum(min(P,0)^2)/(N-1)",
            "cvar": "mean of worst ceil(0.05 N) terminal P&Ls", "differences": "policy minus BS",
        },
        "train_history": report.train_history,
    }
    _write(d, "manifest.json", json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    return d


def _mechanism_text(diag: DiagnosticsBundle) -> str:
    lines = ["quantity\tvalue"]
    lines.append(f"parachute_ratio_spot_first\t{diag.parachute[0]:.6f}")
    lines.append(f"parachute_ratio_iv_first\t{diag.parachute[1]:.6f}")
    if diag.variance is not None:
        v = diag.variance
        for k in ("var_option", "var_hedge", "two_cov", "total", "var_sum"):
            lines.append(f"bs_{k}\t{getattr(v, k):.8g}")
    for g, r2 in diag.r2.items():
        lines.append(f"spot_only_r2_{g}\t{r2:.6f}")
    lines.append("# BS variance decomposition: option leg C_T - C_0, hedge leg -sum Delta dS, percent of initial spot")
    return "\n".join(lines) + "\n"


def _write(d, name, text):
    with open(os.path.join(d, name), "w") as fh:
        fh.write(text)


# --------------------------------------------------------------------------
# frozen re-evaluation and seed replication


@dataclass
class LongHorizonRow:
    fit_year: int
    eval_year: int
    comparison: Comparison


def run_long_horizon(checkpoint_path: str, fit_year: int, quotes: pd.DataFrame, eval_years: Sequence[int],
                     cfg: BacktestConfig = BacktestConfig()) -> list[LongHorizonRow]:
    """Evaluate the frozen year-``fit_year`` actor against BS on each later year without refitting."""
    if not os.path.exists(checkpoint_path):
        raise CheckpointMissingError(f"checkpoint {checkpoint_path} not found; run train/backtest first")
    early = [y for y in eval_years if y < fit_year]
    if early:
        raise ValueError(f"a year-{fit_year} policy cannot be evaluated on earlier years {early}")
    agent = NeuralActor(ActorCheckpoint.load(checkpoint_path), checkpoint_path)
    cal = trading_calendar(quotes)
    rows = []
    for y in eval_years:
        batch = EpisodeBatch.from_episodes(_episodes(quotes, [y], False, cal, "test"))
        a = rollout(agent, batch, cfg.reward, cfg.cost)
        b = rollout(BSDelta(), batch, cfg.reward, cfg.cost)
        rows.append(LongHorizonRow(fit_year, y, compare_strategies(a, b, cfg.bootstrap_reps, cfg.bootstrap_seed)))
    return rows


def long_horizon_table(rows: Sequence[LongHorizonRow], cfg: BacktestConfig) -> str:
    return comparison_table([(f"fit {r.fit_year} eval {r.eval_year}", r.comparison) for r in rows],
                            cfg.bootstrap_reps, cfg.bootstrap_seed)


@dataclass
class SeedReplication:
    reports: list[YearReport]
    # metric -> (n seeds with point < 0, n seeds with point > 0)
    sign_counts: dict

    def summary_text(self) -> str:
        lines = ["metric\tpolicy\tn_seeds\tn_negative\tn_positive\tpoints"]
        for (policy, metric), (neg, pos) in self.sign_counts.items():
            pts = ",".join(f"{r.comparisons[policy].cis[metric].point:.4f}" for r in self.reports)
            lines.append(f"{metric}\t{policy}\t{len(self.reports)}\t{neg}\t{pos}\t{pts}")
        return "\n".join(lines) + "\n"


def run_seed_replication(plan: WalkForwardPlan, quotes: pd.DataFrame, cfg: BacktestConfig = BacktestConfig(),
                         seeds: Sequence[int] | None = None) -> SeedReplication:
    seeds = list(plan.seeds if seeds is None else seeds)
    if not seeds:
        raise ValueError("seed replication needs at least one seed")
    reports = [run_walk_forward(plan, quotes, cfg, seed=s) for s in seeds]
    counts = {}
    for policy in reports[0].comparisons:
        for m in COMPARISON_METRICS:
            pts = np.array([r.comparisons[policy].cis[m].point for r in reports])
            counts[(policy, m)] = (int(np.sum(pts < 0)), int(np.sum(pts > 0)))
    return SeedReplication(reports, counts)
