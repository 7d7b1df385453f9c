"""Hedge policies sharing one interface, plus the benchmark fitting routines.

Every policy exposes ``name`` and ``evaluate_batch(states, market)`` where
``states`` is an ``(n, 4)`` array of (forward moneyness, tau, inventory, iv)
and ``market`` the matching :class:`MarketInputs`. Outputs lie in [0, 1].
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .distill.expr import Expression
from .distill.smoothing import SmoothedResidual
from .env import EpisodeBatch, RewardConfig, accumulated_rewards, rollout
from .marketdata import EPISODE_STEPS, Episode
from .pricing import MarketInputs, PricingDomainError, bs_call_delta, bs_call_vega
from .td3 import ActorCheckpoint

HAIRCUT_GRID = tuple(np.round(np.arange(0.70, 1.0501, 0.05), 2))
REGIME_EDGES = {2: (1.0,), 3: (0.97, 1.05)}
MIN_HW_INTERVALS = 100


def _clip(x):
    return np.clip(x, 0.0, 1.0)


def _smv(states):
    return states[:, 0], states[:, 1], states[:, 3]


class BSDelta:
    name = "BS"

    def evaluate_batch(self, states, market):
        return bs_call_delta(market)

    def to_record(self) -> dict:
        return {"policy": "BSDelta", "params": {}}


class NeuralActor:
    name = "Agent"

    def __init__(self, checkpoint: ActorCheckpoint, path: str | None = None):
        self.checkpoint, self.path = checkpoint, path

    def evaluate_batch(self, states, market):
        return self.checkpoint.hedge(states)

    def to_record(self) -> dict:
        return {"policy": "NeuralActor", "params": {"checkpoint": self.path}}


class SmoothedActor:
    """Kernel-smoothed residual of a base policy added back onto BS delta."""

    name = "Smoothed"

    def __init__(self, base, residual: SmoothedResidual):
        self.base, self.residual = base, residual
        self.fallbacks = 0

    def evaluate_batch(self, states, market):
        bs = bs_call_delta(market)
        m, tau, sig = _smv(states)
        raw = np.asarray(self.base.evaluate_batch(states, market), float) - bs
        s, n_fb = self.residual.evaluate(np.column_stack([m, tau, sig]), fallback=raw)
        self.fallbacks += n_fb
        return _clip(bs + s)

    def to_record(self) -> dict:
        return {"policy": "SmoothedActor", "params": {"base": self.base.to_record(), "field": self.residual.to_record()}}


class Symbolic:
    def __init__(self, expression: Expression, name: str = "Symbolic", provenance: dict | None = None):
        self.expression, self.name = expression, name
        self.provenance = provenance or {}
        self.fallbacks = 0

    def residual(self, m, tau, sigma):
        return self.expression(m, tau, sigma)

    def evaluate_batch(self, states, market):
        bs = bs_call_delta(market)
        g = self.residual(*_smv(states))
        bad = ~np.isfinite(g)
        self.fallbacks += int(bad.sum())
        return np.where(bad, bs, _clip(bs + np.where(bad, 0.0, g)))

    def to_record(self) -> dict:
        return {"policy": "Symbolic", "params": {"expression": self.expression.to_string()},
                "provenance": self.provenance}


@dataclass(frozen=True)
class HWCoefficients:
    a: float
    b: float
    c: float
    fit_window: str = ""
    stderr: tuple = (np.nan, np.nan, np.nan)
    n_obs: int = 0
    rank_deficient: bool = False


class HullWhite:
    name = "HW"

    def __init__(self, coef: HWCoefficients):
        self.coef = coef

    def evaluate_batch(self, states, market):
        bs = bs_call_delta(market)
        vega = bs_call_vega(market)
        spot, tau = np.asarray(market.spot, float), np.asarray(market.tau, float)
        c = self.coef
        return _clip(bs + vega / (spot * np.sqrt(tau)) * (c.a + c.b * bs + c.c * bs * bs))

    def to_record(self) -> dict:
        c = self.coef
        return {"policy": "HullWhite", "params": {"a": c.a, "b": c.b, "c": c.c, "stderr": list(c.stderr),
                                                  "n_obs": c.n_obs, "rank_deficient": c.rank_deficient},
                "provenance": {"fit_window": c.fit_window}}


class Haircut:
    name = "Haircut"

    def __init__(self, lam: float, fit_window: str = ""):
        self.lam, self.fit_window = float(lam), fit_window

    def evaluate_batch(self, states, market):
        return _clip(self.lam * bs_call_delta(market))

    def to_record(self) -> dict:
        return {"policy": "Haircut", "params": {"lambda": self.lam}, "provenance": {"fit_window": self.fit_window}}


class RegimeSwitch:
    """Per-band symbolic formulas selected by forward moneyness."""

    name = "RegimeSwitch"

    def __init__(self, edges: Sequence[float], expressions: Sequence[Expression], provenance: dict | None = None):
        if len(expressions) != len(edges) + 1:
            raise ValueError("need one expression per moneyness band")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("band edges must be strictly increasing")
        self.edges = tuple(float(e) for e in edges)
        self.bands = [Symbolic(e) for e in expressions]
        self.provenance = provenance or {}

    @property
    def fallbacks(self) -> int:
        return sum(b.fallbacks for b in self.bands)

    def band_of(self, m) -> np.ndarray:
        return np.searchsorted(np.asarray(self.edges), m, side="right")

    def evaluate_batch(self, states, market):
        band = self.band_of(states[:, 0])
        out = np.empty(len(states))
        for k, pol in enumerate(self.bands):
            sel = band == k
            if np.any(sel):
                out[sel] = pol.evaluate_batch(states[sel], _subset_market(market, sel))
        return out

    def to_record(self) -> dict:
        return {"policy": "RegimeSwitch",
                "params": {"edges": list(self.edges), "expressions": [b.expression.to_string() for b in self.bands]},
                "provenance": self.provenance}


def _subset_market(market: MarketInputs, sel) -> MarketInputs:
    def pick(v):
        v = np.asarray(v, float)
        return v[sel] if v.ndim else v

    return MarketInputs(pick(market.spot), pick(market.strike), pick(market.tau), pick(market.rate),
                        pick(market.div_yield), pick(market.sigma))


# --------------------------------------------------------------------------
# serialization


def policy_from_record(rec: dict, base_dir: str | None = None):
    kind, p = rec["policy"], rec.get("params", {})
    prov = rec.get("provenance", {})

    def checkpoint():
        path = p["checkpoint"]
        if path is None:
            raise ValueError("neural policy record has no checkpoint path")
        if base_dir and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        if not os.path.exists(path):
            raise FileNotFoundError(f"checkpoint {path} not found")
        return ActorCheckpoint.load(path)

    if kind == "BSDelta":
        return BSDelta()
    if kind == "NeuralActor":
        return NeuralActor(checkpoint(), p["checkpoint"])
    if kind == "SmoothedActor":
        return SmoothedActor(policy_from_record(p["base"], base_dir), SmoothedResidual.from_record(p["field"]))
    if kind == "Symbolic":
        return Symbolic(Expression.parse(p["expression"]), provenance=prov)
    if kind == "HullWhite":
        return HullWhite(HWCoefficients(p["a"], p["b"], p["c"], prov.get("fit_window", ""), tuple(p["stderr"]),
                                        p["n_obs"], p["rank_deficient"]))
    if kind == "Haircut":
        return Haircut(p["lambda"], prov.get("fit_window", ""))
    if kind == "RegimeSwitch":
        return RegimeSwitch(p["edges"], [Expression.parse(e) for e in p["expressions"]], prov)
    raise ValueError(f"unknown policy variant {kind!r}")


def write_policies(policies, path) -> None:
    with open(path, "w") as fh:
        for pol in policies:
            rec = {"name": pol.name, **pol.to_record()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_policies(path) -> list:
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                pol = policy_from_record(rec, base)
                pol.name = rec.get("name", pol.name)
                out.append(pol)
    return out


# --------------------------------------------------------------------------
# fitting


@dataclass
class IntervalData:
    """Daily hedge intervals pooled across episodes (flattened ``(n*21,)`` arrays)."""

    dC: np.ndarray
    dS: np.ndarray
    spot: np.ndarray
    tau: np.ndarray
    bs_delta: np.ndarray
    vega: np.ndarray
    log_ret: np.ndarray
    d_iv: np.ndarray

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode] | EpisodeBatch) -> "IntervalData":
        b = episodes if isinstance(episodes, EpisodeBatch) else EpisodeBatch.from_episodes(episodes)
        t = slice(0, EPISODE_STEPS)
        m = b.market(t)
        return cls(
            dC=np.diff(b.option, axis=1).ravel(), dS=np.diff(b.spot, axis=1).ravel(), spot=b.spot[:, t].ravel(),
            tau=b.tau[:, t].ravel(), bs_delta=b.bs_delta[:, t].ravel(), vega=np.asarray(bs_call_vega(m)).ravel(),
            log_ret=np.diff(np.log(b.spot), axis=1).ravel(), d_iv=np.diff(b.iv, axis=1).ravel(),
        )


def fit_hull_white(episodes, fit_window: str = "") -> HWCoefficients:
    """OLS of the BS hedge residual dC - Delta dS on (vega dS / (S sqrt(tau))) * (1, Delta, Delta^2)."""
    d = episodes if isinstance(episodes, IntervalData) else IntervalData.from_episodes(episodes)
    n = len(d.dC)
    if n < MIN_HW_INTERVALS:
        raise ValueError(f"Hull-White fit needs >= {MIN_HW_INTERVALS} intervals, got {n}")
    y = d.dC - d.bs_delta * d.dS
    base = d.vega * d.dS / (d.spot * np.sqrt(d.tau))
    X = np.column_stack([base, base * d.bs_delta, base * d.bs_delta**2])
    deficient = np.linalg.matrix_rank(X) < 3
    if deficient:
        X = X[:, :1]
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = max(n - X.shape[1], 1)
    s2 = resid @ resid / dof
    se = np.sqrt(np.diag(s2 * np.linalg.pinv(X.T @ X)))
    if deficient:
        coef = np.r_[coef, 0.0, 0.0]
        se = np.r_[se, np.nan, np.nan]
    return HWCoefficients(float(coef[0]), float(coef[1]), float(coef[2]), fit_window, tuple(float(s) for s in se),
                          n, bool(deficient))


def select_haircut(
    episodes,
    grid: Sequence[float] = HAIRCUT_GRID,
    reward_cfg: RewardConfig = RewardConfig(),
    cost: float = 0.0,
    fit_window: str = "",
) -> tuple[Haircut, dict[float, float]]:
    """Scalar haircut with the highest mean validation accumulated reward; ties go to the larger lambda."""
    if len(episodes) == 0:
        raise ValueError("haircut selection needs validation episodes")
    batch = episodes if isinstance(episodes, EpisodeBatch) else EpisodeBatch.from_episodes(episodes)
    table = {}
    for lam in grid:
        table[float(lam)] = float(np.mean(accumulated_rewards(rollout(Haircut(lam), batch, reward_cfg, cost))))
    best = max(table, key=lambda lam: (table[lam], lam))
    return Haircut(best, fit_window), table


def estimate_return_iv_moments(episodes) -> tuple[float, float]:
    """Sample Cov(daily IV change, daily log return) and Var(daily log return)."""
    d = episodes if isinstance(episodes, IntervalData) else IntervalData.from_episodes(episodes)
    cov = float(np.cov(d.d_iv, d.log_ret, ddof=1)[0, 1])
    return cov, float(np.var(d.log_ret, ddof=1))


def min_variance_delta(market: MarketInputs, cov_dsigma_ret: float, var_ret: float):
    """Delta plus the vega loading on the IV move implied by a spot return: Delta + (vega / S) * cov / var."""
    if not var_ret > 0:
        raise PricingDomainError("return variance must be positive")
    bs = bs_call_delta(market)
    vega = bs_call_vega(market)
    return _clip(bs + vega / np.asarray(market.spot, float) * cov_dsigma_ret / var_ret)


@dataclass
class FallbackAudit:
    counts: dict = field(default_factory=dict)

    def record(self, policies) -> None:
        for p in policies:
            if hasattr(p, "fallbacks"):
                self.counts[p.name] = int(p.fallbacks)
