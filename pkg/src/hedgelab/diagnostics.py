"""Mechanism diagnostics: delta gaps, loss states, revaluation splits and variance decompositions."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .distill.sampling import M_EDGES, SIGMA_EDGES
from .env import PNL_SCALE, EpisodeBatch, EpisodeResult
from .marketdata import EPISODE_STEPS
from .pricing import MarketInputs, bs_call_price
from .stats import InsufficientSampleError, pair_results

SIGN_LABELS = ("down", "up")
LOSS_STATES = tuple(itertools.product(SIGN_LABELS, repeat=3))  # (dS, dC, dIV)


@dataclass
class IntervalRecords:
    """One row per hedge interval per episode, stored column-wise.

    ``pnl_*`` are in percent of the episode's initial spot, like
    :class:`EpisodeResult`.
    """

    window_id: np.ndarray
    contract: np.ndarray
    date: np.ndarray
    year: np.ndarray
    dS: np.ndarray
    dC: np.ndarray
    dIV: np.ndarray
    delta_agent: np.ndarray
    delta_bs: np.ndarray
    pnl_agent: np.ndarray
    pnl_bs: np.ndarray
    reward_agent: np.ndarray
    reward_bs: np.ndarray
    spot: np.ndarray
    spot_next: np.ndarray
    iv: np.ndarray
    iv_next: np.ndarray
    tau: np.ndarray
    rate: np.ndarray
    div_yield: np.ndarray
    strike: np.ndarray
    fwd_moneyness: np.ndarray

    def __len__(self) -> int:
        return len(self.dS)

    @property
    def gap(self) -> np.ndarray:
        return self.delta_agent - self.delta_bs

    @classmethod
    def build(cls, batch: EpisodeBatch, agent: Sequence[EpisodeResult], bs: Sequence[EpisodeResult]) -> "IntervalRecords":
        """Join paired agent/BS results onto the batch's market paths."""
        agent, bs = pair_results(agent, bs)
        pos = {(e.window_id, tuple(e.contract)): i for i, e in enumerate(batch.episodes)}
        try:
            rows = np.array([pos[(r.window_id, tuple(r.contract))] for r in agent])
        except KeyError as exc:
            raise ValueError(f"result {exc} has no matching episode in the batch") from None
        t = slice(0, EPISODE_STEPS)
        n = len(rows)

        def cur(a):
            return a[rows][:, t].ravel()

        def nxt(a):
            return a[rows][:, 1:].ravel()

        def rep(vals):
            return np.repeat(np.asarray(vals), EPISODE_STEPS)

        eps = [batch.episodes[i] for i in rows]
        return cls(
            window_id=rep([e.window_id for e in eps]),
            contract=rep([f"{e.strike:g}|{e.expiry}" for e in eps]),
            date=np.concatenate([e.dates[t] for e in eps]) if n else np.array([], "datetime64[D]"),
            year=rep([e.year for e in eps]),
            dS=nxt(batch.spot) - cur(batch.spot),
            dC=nxt(batch.option) - cur(batch.option),
            dIV=nxt(batch.iv) - cur(batch.iv),
            delta_agent=np.concatenate([r.deltas for r in agent]),
            delta_bs=np.concatenate([r.deltas for r in bs]),
            pnl_agent=np.concatenate([r.daily_pnl for r in agent]),
            pnl_bs=np.concatenate([r.daily_pnl for r in bs]),
            reward_agent=np.concatenate([r.daily_reward for r in agent]),
            reward_bs=np.concatenate([r.daily_reward for r in bs]),
            spot=cur(batch.spot), spot_next=nxt(batch.spot), iv=cur(batch.iv), iv_next=nxt(batch.iv),
            tau=cur(batch.tau), rate=cur(batch.rate), div_yield=cur(batch.div_yield),
            strike=np.repeat(batch.strike[rows, 0], EPISODE_STEPS),
            fwd_moneyness=cur(batch.fwd_moneyness),
        )

    def subset(self, sel) -> "IntervalRecords":
        return IntervalRecords(**{k: v[sel] for k, v in self.__dict__.items()})


# --------------------------------------------------------------------------
# delta gaps


@dataclass
class GapSurface:
    m_edges: np.ndarray
    iv_edges: np.ndarray
    mean_gap: np.ndarray  # (n_m, n_iv), nan where excluded
    counts: np.ndarray
    excluded: np.ndarray  # cells with zero or one interval

    def to_grid_text(self) -> str:
        lines = ["# delta gap surface: mean(agent - BS) per (forward moneyness, IV) cell",
                 "# cells with <= 1 interval are excluded (mean written as nan)",
                 "m_lo\tm_hi\tiv_lo\tiv_hi\tmean_gap\tcount\texcluded"]
        for i, j in itertools.product(range(self.counts.shape[0]), range(self.counts.shape[1])):
            lines.append("\t".join([
                f"{self.m_edges[i]:g}", f"{self.m_edges[i + 1]:g}", f"{self.iv_edges[j]:g}", f"{self.iv_edges[j + 1]:g}",
                "nan" if np.isnan(self.mean_gap[i, j]) else f"{self.mean_gap[i, j]:.6f}",
                str(int(self.counts[i, j])), str(int(self.excluded[i, j])),
            ]))
        return "\n".join(lines) + "\n"


def _bin(x, edges):
    """Half-open bins with the last bin closed; -1 outside."""
    idx = np.searchsorted(edges, x, side="right") - 1
    idx = np.where(x == edges[-1], len(edges) - 2, idx)
    return np.where((x < edges[0]) | (x > edges[-1]), -1, idx)


def delta_gap_surface(records: IntervalRecords, m_bins=M_EDGES, iv_bins=SIGMA_EDGES) -> GapSurface:
    m_bins, iv_bins = np.asarray(m_bins, float), np.asarray(iv_bins, float)
    for e in (m_bins, iv_bins):
        if len(e) < 2 or np.any(np.diff(e) <= 0):
            raise ValueError("bin edges must be strictly increasing")
    im, iv = _bin(records.fwd_moneyness, m_bins), _bin(records.iv, iv_bins)
    ok = (im >= 0) & (iv >= 0)
    shape = (len(m_bins) - 1, len(iv_bins) - 1)
    flat = np.ravel_multi_index((im[ok], iv[ok]), shape)
    counts = np.bincount(flat, minlength=np.prod(shape)).reshape(shape)
    sums = np.bincount(flat, weights=records.gap[ok], minlength=np.prod(shape)).reshape(shape)
    excluded = counts <= 1
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(excluded, np.nan, sums / np.maximum(counts, 1))
    return GapSurface(m_bins, iv_bins, mean, counts, excluded)


@dataclass(frozen=True)
class GapSummary:
    label: str
    n: int
    mean_gap: float
    underhedged_share: float
    mean_delta_agent: float
    mean_delta_bs: float


def delta_gap_summary(records: IntervalRecords, label: str = "all") -> GapSummary:
    """Mean agent-minus-BS gap and share of intervals with the agent strictly below BS."""
    if len(records) == 0:
        raise InsufficientSampleError("no intervals")
    g = records.gap
    return GapSummary(label, len(g), float(np.mean(g)), float(np.mean(g < 0)), float(np.mean(records.delta_agent)),
                      float(np.mean(records.delta_bs)))


def gap_table(summaries: Sequence[GapSummary]) -> str:
    lines = ["label\tn_intervals\tmean_gap\tunderhedged_share\tmean_delta_agent\tmean_delta_bs"]
    for s in summaries:
        lines.append(f"{s.label}\t{s.n}\t{s.mean_gap:.5f}\t{s.underhedged_share:.4f}\t{s.mean_delta_agent:.5f}\t"
                     f"{s.mean_delta_bs:.5f}")
    lines.append("# gap = agent delta minus BS delta; underhedged = gap < 0")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# loss states


@dataclass
class LossStateTable:
    policy: str
    n_loss: int
    counts: dict[tuple[str, str, str], int]
    zero_denominator: bool
    n_zero_ties: int  # zero changes among loss intervals, assigned to "up"

    @property
    def shares(self) -> dict[tuple[str, str, str], float]:
        if self.zero_denominator:
            return {}
        return {k: v / self.n_loss for k, v in self.counts.items() if v > 0}

    def to_text(self) -> str:
        lines = [f"# negative daily P&L by sign of (dS, dC, dIV), policy {self.policy}",
                 "# zero changes are counted as up", "dS\tdC\tdIV\tcount\tshare"]
        for k in LOSS_STATES:
            share = self.counts[k] / self.n_loss if self.n_loss else float("nan")
            lines.append(f"{k[0]}\t{k[1]}\t{k[2]}\t{self.counts[k]}\t{share:.4f}")
        lines.append(f"# losses = {self.n_loss}; zero-change ties = {self.n_zero_ties}"
                     + ("; zero denominator (no losses)" if self.zero_denominator else ""))
        return "\n".join(lines) + "\n"


def _sign_label(x):
    return np.where(x < 0, "down", "up")


def loss_state_table(records: IntervalRecords, policy: str = "agent") -> LossStateTable:
    if len(records) == 0:
        raise InsufficientSampleError("loss-state table needs intervals")
    pnl = {"agent": records.pnl_agent, "bs": records.pnl_bs}[policy]
    loss = pnl < 0
    moves = [records.dS[loss], records.dC[loss], records.dIV[loss]]
    labels = [_sign_label(x) for x in moves]
    counts = {k: 0 for k in LOSS_STATES}
    for k in zip(*labels):
        counts[tuple(str(s) for s in k)] += 1
    ties = int(sum(np.sum(x == 0) for x in moves))
    n = int(loss.sum())
    return LossStateTable(policy, n, counts, n == 0, ties)


# --------------------------------------------------------------------------
# revaluation split


@dataclass
class Revaluation:
    spot_component: np.ndarray
    iv_component: np.ndarray
    remainder: np.ndarray
    # reverse ordering (IV first, then spot) as a sensitivity check
    spot_component_rev: np.ndarray
    iv_component_rev: np.ndarray

    def parachute_ratio(self, dS: np.ndarray, reverse: bool = False) -> float:
        """On index-down intervals: sum of positive IV revaluation over sum of spot-driven losses."""
        down = dS < 0
        spot = self.spot_component_rev if reverse else self.spot_component
        iv = self.iv_component_rev if reverse else self.iv_component
        denom = np.sum(np.abs(np.minimum(spot[down], 0.0)))
        return float(np.sum(np.maximum(iv[down], 0.0)) / denom) if denom > 0 else float("nan")


def revaluation_decomposition(records: IntervalRecords) -> Revaluation:
    """Split each dC into BS spot and IV revaluation plus a remainder.

    Maturity, rate and dividend yield are held at their start-of-interval
    values, so time decay and model error fall into the remainder.
    """
    def price(spot, sigma):
        return bs_call_price(MarketInputs(spot, records.strike, records.tau, records.rate, records.div_yield, sigma))

    c00 = price(records.spot, records.iv)
    c10 = price(records.spot_next, records.iv)
    c11 = price(records.spot_next, records.iv_next)
    c01 = price(records.spot, records.iv_next)
    spot_c, iv_c = c10 - c00, c11 - c10
    return Revaluation(spot_c, iv_c, records.dC - spot_c - iv_c, c11 - c01, c01 - c00)


# --------------------------------------------------------------------------
# variance decompositions


@dataclass(frozen=True)
class VarianceDecomposition:
    var_option: float
    var_hedge: float
    two_cov: float
    total: float
    var_sum: float  # Var(O + H), equal to ``total`` up to rounding


def bs_variance_decomposition(batch: EpisodeBatch) -> VarianceDecomposition:
    """Option leg O = C_T - C_0 and BS hedge leg H = -sum Delta_t dS_t, in percent of initial spot."""
    if len(batch) < 2:
        raise InsufficientSampleError("variance decomposition needs at least 2 episodes")
    scale = PNL_SCALE / batch.spot[:, :1]
    o = ((batch.option[:, -1:] - batch.option[:, :1]) * scale)[:, 0]
    h = -np.sum(batch.bs_delta[:, :EPISODE_STEPS] * np.diff(batch.spot, axis=1) * scale, axis=1)
    return variance_decomposition(o, h)


def variance_decomposition(o, h) -> VarianceDecomposition:
    o, h = np.asarray(o, float), np.asarray(h, float)
    n = len(o)
    if n < 2:
        raise InsufficientSampleError("variance decomposition needs at least 2 episodes")
    do, dh = o - o.mean(), h - h.mean()
    vo, vh, cov = do @ do / (n - 1), dh @ dh / (n - 1), do @ dh / (n - 1)
    tot = o + h
    dt = tot - tot.mean()
    return VarianceDecomposition(float(vo), float(vh), float(2 * cov), float(vo + vh + 2 * cov), float(dt @ dt / (n - 1)))


def spot_only_r2(records: IntervalRecords, by: str = "year", min_obs: int = 10) -> dict:
    """R^2 of OLS dC ~ 1 + dS/S, per group."""
    groups = getattr(records, by)
    out = {}
    for g in np.unique(groups):
        sel = groups == g
        if sel.sum() < min_obs:
            raise InsufficientSampleError(f"group {g!r} has {int(sel.sum())} intervals, need {min_obs}")
        out[g.item() if hasattr(g, "item") else g] = r_squared(records.dS[sel] / records.spot[sel], records.dC[sel])
    return out


def r_squared(x, y) -> float:
    X = np.column_stack([np.ones(len(x)), x])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    sst = np.sum((y - y.mean()) ** 2)
    if sst == 0:
        return 1.0
    return float(min(1.0, max(0.0, 1.0 - resid @ resid / sst)))


@dataclass
class ClusterContribution:
    v: np.ndarray
    labels: list
    V: dict
    shares: dict
    total_gap: float


def cluster_variance_contribution(pnl_a, pnl_b, clusters) -> ClusterContribution:
    """Per-episode and per-cluster contributions to Var(P^A) - Var(P^B)."""
    pa, pb = np.asarray(pnl_a, float), np.asarray(pnl_b, float)
    clusters = np.asarray(clusters)
    n = len(pa)
    if n != len(pb) or n != len(clusters):
        raise ValueError("pnl arrays and cluster labels must align")
    if n < 2:
        raise InsufficientSampleError("need at least 2 episodes")
    v = ((pa - pa.mean()) ** 2 - (pb - pb.mean()) ** 2) / (n - 1)
    labels = list(dict.fromkeys(clusters.tolist()))
    V = {g: float(np.sum(v[clusters == g])) for g in labels}
    pos = sum(x for x in V.values() if x > 0)
    shares = {g: V[g] / pos for g in labels if V[g] > 0} if pos > 0 else {}
    return ClusterContribution(v, labels, V, shares, float(np.var(pa, ddof=1) - np.var(pb, ddof=1)))


@dataclass
class DiagnosticsBundle:
    gap_rows: list = field(default_factory=list)
    surface: GapSurface | None = None
    loss_agent: LossStateTable | None = None
    loss_bs: LossStateTable | None = None
    parachute: tuple[float, float] = (float("nan"), float("nan"))
    variance: VarianceDecomposition | None = None
    r2: dict = field(default_factory=dict)
    clusters: ClusterContribution | None = None


def run_diagnostics(batch: EpisodeBatch, agent: Sequence[EpisodeResult], bs: Sequence[EpisodeResult],
                    label: str = "test") -> DiagnosticsBundle:
    rec = IntervalRecords.build(batch, agent, bs)
    out = DiagnosticsBundle()
    out.gap_rows.append(delta_gap_summary(rec, label))
    atm = (rec.fwd_moneyness >= 0.97) & (rec.fwd_moneyness < 1.03)
    if np.any(atm):
        out.gap_rows.append(delta_gap_summary(rec.subset(atm), f"{label} ATM 0.97-1.03"))
    out.surface = delta_gap_surface(rec)
    out.loss_agent = loss_state_table(rec, "agent")
    out.loss_bs = loss_state_table(rec, "bs")
    rv = revaluation_decomposition(rec)
    out.parachute = (rv.parachute_ratio(rec.dS), rv.parachute_ratio(rec.dS, reverse=True))
    if len(batch) >= 2:
        out.variance = bs_variance_decomposition(batch)
    try:
        out.r2 = spot_only_r2(rec)
    except InsufficientSampleError:
        out.r2 = {}
    a, b = pair_results(agent, bs)
    if len(a) >= 2:
        out.clusters = cluster_variance_contribution([r.terminal_pnl for r in a], [r.terminal_pnl for r in b],
                                                     [r.window_id for r in a])
    return out
