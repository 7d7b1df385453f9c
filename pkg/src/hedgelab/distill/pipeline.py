"""End-to-end distillation of a hedge policy into a symbolic residual formula."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..env import EpisodeBatch, RewardConfig, rollout
from ..marketdata import EPISODE_STEPS, Episode
from ..pricing import DAYS_PER_YEAR, MarketInputs, delta_from_moneyness
from .expr import Expression
from .gp import FAMILIES, GPConfig, HallOfFame, HOFEntry, fit_symbolic
from .sampling import DistillPool, DistillSample, sample_focus, sample_uniform
from .selection import select_parsimonious
from .smoothing import SmoothedResidual, default_bandwidth

log = logging.getLogger(__name__)

PROBE_M = (0.85, 1.20)
PROBE_SIGMA = (0.10, 0.50)
PROBE_T_DAYS = (7.0, 100.0)


@dataclass(frozen=True)
class DistillConfig:
    sample_size: int = 5000
    support_cap: int = 10_000
    probe_shape: tuple[int, int, int] = (15, 9, 10)  # lattice counts over (m, sigma, T)
    bandwidth_scale: float = 0.5
    families: tuple[str, ...] = FAMILIES
    policy_space_fitness: bool = True
    gp: GPConfig = GPConfig()
    seed: int = 0


def probe_lattice(shape=(15, 9, 10)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    m = np.linspace(*PROBE_M, shape[0])
    s = np.linspace(*PROBE_SIGMA, shape[1])
    t = np.linspace(*PROBE_T_DAYS, shape[2]) / DAYS_PER_YEAR
    mm, ss, tt = np.meshgrid(m, s, t, indexing="ij")
    return mm.ravel(), tt.ravel(), ss.ravel()


def market_from_moneyness(m, tau, sigma, rate=0.0, div_yield=0.0) -> MarketInputs:
    """Unit-strike market inputs reproducing forward moneyness ``m``."""
    spot = np.asarray(m, float) * np.exp(-(rate - div_yield) * np.asarray(tau, float))
    return MarketInputs(spot, 1.0, tau, rate, div_yield, sigma)


def support_states(policy, batch: EpisodeBatch, reward_cfg: RewardConfig = RewardConfig()):
    """States visited when ``policy`` trades ``batch``: (states (n*21, 4), bs_delta, years, action)."""
    res = rollout(policy, batch, reward_cfg)
    deltas = np.stack([r.deltas for r in res])
    inv = np.concatenate([np.zeros((len(batch), 1)), -deltas[:, :-1]], axis=1)
    t = slice(0, EPISODE_STEPS)
    states = np.stack([batch.fwd_moneyness[:, t], batch.tau[:, t], inv, batch.iv[:, t]], axis=2).reshape(-1, 4)
    years = np.repeat([e.year for e in batch.episodes], EPISODE_STEPS)
    return states, batch.bs_delta[:, t].ravel(), years, deltas.ravel()


def build_pool(policy, train: EpisodeBatch, cfg: DistillConfig, rng: np.random.Generator,
               reward_cfg: RewardConfig = RewardConfig()) -> DistillPool:
    """Training-support states (capped) plus the probe lattice, with raw residuals of ``policy``."""
    states, bs, years, actions = support_states(policy, train, reward_cfg)
    if len(states) > cfg.support_cap:
        keep = np.sort(rng.choice(len(states), cfg.support_cap, replace=False))
        states, bs, years, actions = states[keep], bs[keep], years[keep], actions[keep]
    q = float(np.median(train.div_yield))
    pm, pt, ps = probe_lattice(cfg.probe_shape)
    p_bs = np.asarray(delta_from_moneyness(pm, pt, ps, q))
    p_states = np.column_stack([pm, pt, -p_bs, ps])
    p_act = np.clip(np.asarray(policy.evaluate_batch(p_states, market_from_moneyness(pm, pt, ps, 0.0, q)), float), 0, 1)
    return DistillPool(
        m=np.r_[states[:, 0], pm], tau=np.r_[states[:, 1], pt], sigma=np.r_[states[:, 3], ps],
        bs_delta=np.r_[bs, p_bs], raw_residual=np.r_[actions - bs, p_act - p_bs],
        years=np.r_[years, np.full(len(pm), -1)],
    )


def smooth_pool(pool: DistillPool, scale: float = 0.5) -> SmoothedResidual:
    pts = np.column_stack([pool.m, pool.tau, pool.sigma])
    field_ = SmoothedResidual(pts, pool.raw_residual, default_bandwidth(pts, scale))
    pool.smooth_residual, n_fb = field_.evaluate(pts, fallback=pool.raw_residual)
    return field_


@dataclass
class ValidationTargets:
    """Validation-year states and the raw agent's traded actions there."""

    m: np.ndarray
    tau: np.ndarray
    sigma: np.ndarray
    bs_delta: np.ndarray
    action: np.ndarray

    @classmethod
    def from_rollout(cls, policy, batch: EpisodeBatch, reward_cfg: RewardConfig = RewardConfig()):
        states, bs, _, actions = support_states(policy, batch, reward_cfg)
        return cls(states[:, 0], states[:, 1], states[:, 3], bs, actions)

    def mae(self, expr: Expression) -> float:
        g = expr(self.m, self.tau, self.sigma)
        if not np.all(np.isfinite(g)):
            return float("inf")
        return float(np.mean(np.abs(np.clip(self.bs_delta + g, 0.0, 1.0) - self.action)))

    def subset(self, sel) -> "ValidationTargets":
        return ValidationTargets(self.m[sel], self.tau[sel], self.sigma[sel], self.bs_delta[sel], self.action[sel])


@dataclass
class DistillResult:
    selected: HOFEntry
    entries: list[HOFEntry]
    halls: dict[str, HallOfFame]
    smoothed: SmoothedResidual
    pool_size: int
    sample_info: dict = field(default_factory=dict)
    support_fallbacks: int = 0


def make_samples(pool: DistillPool, cfg: DistillConfig, rng: np.random.Generator) -> dict[str, DistillSample]:
    out = {}
    for fam in cfg.families:
        if fam == "RawUniform":
            out[fam] = sample_uniform(pool, cfg.sample_size, rng, fam, "raw")
        elif fam == "SmoothUniform":
            out[fam] = sample_uniform(pool, cfg.sample_size, rng, fam, "smooth")
        elif fam == "SmoothFocus":
            out[fam] = sample_focus(pool, cfg.sample_size, rng, fam)
        else:
            raise ValueError(f"unknown distillation family {fam!r}")
    return out


def distill(
    policy,
    train_episodes: Sequence[Episode] | EpisodeBatch,
    val_episodes: Sequence[Episode] | EpisodeBatch,
    cfg: DistillConfig = DistillConfig(),
    validation_year: int | None = None,
    reward_cfg: RewardConfig = RewardConfig(),
) -> DistillResult:
    """Fit the three residual families and pick one formula by the parsimonious rule."""
    train = train_episodes if isinstance(train_episodes, EpisodeBatch) else EpisodeBatch.from_episodes(train_episodes)
    val = val_episodes if isinstance(val_episodes, EpisodeBatch) else EpisodeBatch.from_episodes(val_episodes)
    if validation_year is None:
        validation_year = min(e.year for e in val.episodes)
    rng = np.random.default_rng(cfg.seed)
    pool = build_pool(policy, train, cfg, rng, reward_cfg)
    field_ = smooth_pool(pool, cfg.bandwidth_scale)
    samples = make_samples(pool, cfg, rng)
    targets = ValidationTargets.from_rollout(policy, val, reward_cfg)
    halls, entries = {}, []
    for k, (fam, sample) in enumerate(samples.items()):
        sample.assert_predates(validation_year)
        gp_cfg = replace(cfg.gp, seed=cfg.gp.seed + 1000 * k)
        hof = fit_symbolic(sample, gp_cfg, policy_space=cfg.policy_space_fitness)
        halls[fam] = hof
        for e in hof.frontier():
            entries.append(replace(e, family=fam, val_mae=targets.mae(e.expression)))
        log.info("distill %s frontier %d entries", fam, len(hof.frontier()))
    chosen = select_parsimonious(entries)
    g = chosen.expression(pool.m, pool.tau, pool.sigma)
    return DistillResult(
        selected=chosen, entries=entries, halls=halls, smoothed=field_, pool_size=len(pool),
        sample_info={f: s.info for f, s in samples.items()}, support_fallbacks=int(np.sum(~np.isfinite(g))),
    )


def fit_regime_switch(
    policy,
    train_episodes,
    val_episodes,
    edges: Sequence[float],
    cfg: DistillConfig = DistillConfig(),
    validation_year: int | None = None,
) -> tuple[list[Expression], list[HOFEntry]]:
    """One smoothed-uniform formula per forward-moneyness band, each chosen by the parsimonious rule."""
    train = train_episodes if isinstance(train_episodes, EpisodeBatch) else EpisodeBatch.from_episodes(train_episodes)
    val = val_episodes if isinstance(val_episodes, EpisodeBatch) else EpisodeBatch.from_episodes(val_episodes)
    if validation_year is None:
        validation_year = min(e.year for e in val.episodes)
    rng = np.random.default_rng(cfg.seed + 7)
    pool = build_pool(policy, train, cfg, rng)
    smooth_pool(pool, cfg.bandwidth_scale)
    targets = ValidationTargets.from_rollout(policy, val)
    bounds = np.r_[-np.inf, np.asarray(edges, float), np.inf]
    exprs, chosen = [], []
    for k in range(len(bounds) - 1):
        in_band = (pool.m >= bounds[k]) & (pool.m < bounds[k + 1])
        idx = np.flatnonzero(in_band)
        v_sel = (targets.m >= bounds[k]) & (targets.m < bounds[k + 1])
        if len(idx) == 0 or not np.any(v_sel):
            exprs.append(Expression((0.0,)))
            chosen.append(HOFEntry(Expression((0.0,)), float("nan"), "SmoothUniform"))
            continue
        take = idx if len(idx) <= cfg.sample_size else np.sort(rng.choice(idx, cfg.sample_size, replace=False))
        sample = pool.take(take, "SmoothUniform", "smooth", provenance=f"band{k}")
        sample.assert_predates(validation_year)
        hof = fit_symbolic(sample, replace(cfg.gp, seed=cfg.gp.seed + 50 + k), policy_space=cfg.policy_space_fitness)
        vt = targets.subset(v_sel)
        entries = [replace(e, family="SmoothUniform", val_mae=vt.mae(e.expression)) for e in hof.frontier()]
        best = select_parsimonious(entries)
        exprs.append(best.expression)
        chosen.append(best)
    return exprs, chosen
