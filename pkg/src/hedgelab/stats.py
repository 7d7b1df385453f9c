"""Terminal-P&L metrics, log variance ratios and the two-stage window/episode bootstrap."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .env import EpisodeResult

DEFAULT_REPLICATIONS = 2000
CVAR_LEVEL = 0.05
COMPARISON_METRICS = ("reward", "cvar5", "mean_pnl", "log_downside_variance", "log_variance")
METRIC_LABELS = {
    "reward": "Reward",
    "cvar5": "CVaR 5%",
    "mean_pnl": "Mean P&L",
    "log_downside_variance": "Log DownVar",
    "log_variance": "Log Var",
}


class InsufficientSampleError(ValueError):
    pass


class DegenerateVarianceError(ValueError):
    pass


class PairingMismatchError(ValueError):
    pass


def cvar(pnl, level: float = CVAR_LEVEL) -> float:
    """Mean of the worst ceil(level * N) outcomes."""
    p = np.sort(np.asarray(pnl, float))
    if len(p) == 0:
        raise InsufficientSampleError("cvar of an empty sample")
    k = max(1, math.ceil(level * len(p) - 1e-12))
    return float(np.mean(p[:k]))


def downside_variance(pnl) -> float:
    """Lower partial moment about zero: sum(min(P, 0)^2) / (N - 1)."""
    p = np.asarray(pnl, float)
    if len(p) < 2:
        raise InsufficientSampleError("downside variance needs at least 2 episodes")
    return float(np.sum(np.minimum(p, 0.0) ** 2) / (len(p) - 1))


def variance(pnl) -> float:
    p = np.asarray(pnl, float)
    if len(p) < 2:
        raise InsufficientSampleError("variance needs at least 2 episodes")
    return float(np.var(p, ddof=1))


@dataclass(frozen=True)
class MetricSet:
    mean_pnl: float
    accumulated_reward: float
    cvar5: float
    downside_variance: float
    variance: float
    n: int


def compute_metrics(results: Sequence[EpisodeResult] | None = None, pnl=None, rewards=None) -> MetricSet:
    if results is not None:
        pnl = np.array([r.terminal_pnl for r in results])
        rewards = np.array([r.accumulated_reward for r in results])
    pnl = np.asarray(pnl, float)
    if len(pnl) < 2:
        raise InsufficientSampleError("metrics need at least 2 episodes")
    rewards = np.zeros_like(pnl) if rewards is None else np.asarray(rewards, float)
    return MetricSet(
        mean_pnl=float(np.mean(pnl)), accumulated_reward=float(np.mean(rewards)), cvar5=cvar(pnl),
        downside_variance=downside_variance(pnl), variance=variance(pnl), n=len(pnl),
    )


def log_ratio(a: float, b: float) -> float:
    if not (a > 0 and b > 0):
        raise DegenerateVarianceError(f"degenerate benchmark variance (log ratio of {a!r} to {b!r})")
    return float(np.log(a / b))


def stars(p: float) -> str:
    if not np.isfinite(p):
        return ""
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.10 else ""


@dataclass
class BootstrapCI:
    point: float
    lower: float
    upper: float
    p_value: float
    replications: int
    degenerate: bool = False
    n_invalid: int = 0

    @property
    def stars(self) -> str:
        return stars(self.p_value)

    def fmt(self, digits: int = 3) -> str:
        return f"{self.point:.{digits}f}{self.stars}"


class WindowGroups:
    """Episode indices grouped by calendar window, for two-stage resampling."""

    def __init__(self, window_ids: Sequence[str]):
        ids = np.asarray(window_ids)
        if len(ids) == 0:
            raise InsufficientSampleError("bootstrap needs at least one window")
        uniq, inverse = np.unique(ids, return_inverse=True)
        self.order = np.argsort(inverse, kind="stable")
        self.sizes = np.bincount(inverse)
        self.starts = np.r_[0, np.cumsum(self.sizes)[:-1]]
        self.n_windows = len(uniq)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        w = rng.integers(self.n_windows, size=self.n_windows)
        rep = np.repeat(w, self.sizes[w])
        local = np.floor(rng.random(len(rep)) * self.sizes[rep]).astype(int)
        return self.order[self.starts[rep] + local]


def _summarize(point: float, reps: np.ndarray) -> BootstrapCI:
    valid = reps[np.isfinite(reps)]
    n_bad = len(reps) - len(valid)
    if len(valid) == 0:
        return BootstrapCI(point, np.nan, np.nan, np.nan, len(reps), True, n_bad)
    lo, hi = np.percentile(valid, [2.5, 97.5])
    degenerate = bool(np.all(valid == valid[0]))
    if degenerate:
        return BootstrapCI(point, float(valid[0]), float(valid[0]), np.nan, len(reps), True, n_bad)
    p = min(1.0, 2.0 * min(np.mean(valid <= 0.0), np.mean(valid >= 0.0)))
    return BootstrapCI(point, float(lo), float(hi), float(p), len(reps), False, n_bad)


def two_stage_bootstrap(
    window_ids: Sequence[str],
    statistic: Callable[[np.ndarray], float],
    B: int = DEFAULT_REPLICATIONS,
    seed: int = 0,
) -> BootstrapCI:
    """Percentile CI for ``statistic(indices)``: resample windows, then episodes within each drawn window."""
    groups = WindowGroups(window_ids)
    n = int(groups.sizes.sum())
    point = statistic(np.arange(n))
    rng = np.random.default_rng(seed)
    reps = np.empty(B)
    for b in range(B):
        reps[b] = _safe(statistic, groups.draw(rng))
    return _summarize(point, reps)


def _safe(stat, idx) -> float:
    try:
        return float(stat(idx))
    except (DegenerateVarianceError, InsufficientSampleError):
        return np.nan


def pair_results(results_a: Sequence[EpisodeResult], results_b: Sequence[EpisodeResult]):
    """Align two result lists on (window_id, contract); raises when the episode sets differ."""
    def key(r):
        return (r.window_id, tuple(r.contract))

    ka = {key(r): r for r in results_a}
    kb = {key(r): r for r in results_b}
    if len(ka) != len(results_a) or len(kb) != len(results_b):
        raise PairingMismatchError("duplicate (window, contract) keys")
    if ka.keys() != kb.keys():
        raise PairingMismatchError(
            f"episode sets differ: {len(ka.keys() - kb.keys())} only in a, {len(kb.keys() - ka.keys())} only in b"
        )
    keys = sorted(ka)
    return [ka[k] for k in keys], [kb[k] for k in keys]


def _metric_fns(pa, pb, ra, rb) -> dict[str, Callable[[np.ndarray], float]]:
    return {
        "reward": lambda i: float(np.mean(ra[i]) - np.mean(rb[i])),
        "cvar5": lambda i: cvar(pa[i]) - cvar(pb[i]),
        "mean_pnl": lambda i: float(np.mean(pa[i]) - np.mean(pb[i])),
        "log_downside_variance": lambda i: log_ratio(downside_variance(pa[i]), downside_variance(pb[i])),
        "log_variance": lambda i: log_ratio(variance(pa[i]), variance(pb[i])),
    }


@dataclass
class Comparison:
    name_a: str
    name_b: str
    n_episodes: int
    n_windows: int
    cis: dict[str, BootstrapCI] = field(default_factory=dict)
    metrics_a: MetricSet | None = None
    metrics_b: MetricSet | None = None


def compare_strategies(
    results_a: Sequence[EpisodeResult],
    results_b: Sequence[EpisodeResult],
    B: int = DEFAULT_REPLICATIONS,
    seed: int = 0,
) -> Comparison:
    """Paired a-minus-b differences (reward, CVaR, mean) and log a/b variance ratios.

    Both strategies are recomputed on the same resampled indices in every replication.
    """
    a, b = pair_results(results_a, results_b)
    pa = np.array([r.terminal_pnl for r in a])
    pb = np.array([r.terminal_pnl for r in b])
    ra = np.array([r.accumulated_reward for r in a])
    rb = np.array([r.accumulated_reward for r in b])
    fns = _metric_fns(pa, pb, ra, rb)
    groups = WindowGroups([r.window_id for r in a])
    rng = np.random.default_rng(seed)
    reps = {k: np.empty(B) for k in fns}
    for rep in range(B):
        idx = groups.draw(rng)
        for k, f in fns.items():
            reps[k][rep] = _safe(f, idx)
    full = np.arange(len(a))
    cis = {k: _summarize(_safe(f, full), reps[k]) for k, f in fns.items()}
    name_a = a[0].policy_name if a else ""
    name_b = b[0].policy_name if b else ""
    out = Comparison(name_a, name_b, len(a), groups.n_windows, cis)
    if len(a) >= 2:
        out.metrics_a = compute_metrics(pnl=pa, rewards=ra)
        out.metrics_b = compute_metrics(pnl=pb, rewards=rb)
    return out


CONVENTION_FOOTERS = (
    "# P&L units: percent of the episode's initial spot",
    "# Reward, CVaR 5% and Mean P&L: left-minus-right differences (positive favorable)",
    "# CVaR 5%: mean of the worst ceil(0.05 N) terminal P&Ls (more negative is worse)",
    "# Log DownVar: ln ratio of downside variances, downside variance = sum(min(P,0)^2)/(N-1) about zero",
    "# Log Var: ln ratio of unbiased sample variances (negative favorable)",
    "# Stars: *, **, *** = two-sided two-stage bootstrap significance at 10%, 5%, 1%",
)


def comparison_table(rows: Sequence[tuple[str, Comparison]], B: int, seed: int, digits: int = 3) -> str:
    """Tab-delimited comparison layout: one row per label with point+stars and 95% CI columns."""
    head = ["label", "left", "right", "n_episodes", "n_windows"]
    for m in COMPARISON_METRICS:
        head += [METRIC_LABELS[m], f"{METRIC_LABELS[m]} lo", f"{METRIC_LABELS[m]} hi", f"{METRIC_LABELS[m]} p"]
    lines = ["\t".join(head)]
    for label, comp in rows:
        cells = [label, comp.name_a, comp.name_b, str(comp.n_episodes), str(comp.n_windows)]
        for m in COMPARISON_METRICS:
            ci = comp.cis[m]
            cells += [ci.fmt(digits), f"{ci.lower:.{digits}f}", f"{ci.upper:.{digits}f}",
                      "nan" if not np.isfinite(ci.p_value) else f"{ci.p_value:.4f}"]
        lines.append("\t".join(cells))
    footers = list(CONVENTION_FOOTERS) + [f"# Bootstrap replications B = {B}", f"# Bootstrap seed = {seed}"]
    return "\n".join(lines + footers) + "\n"


def metrics_table(rows: Sequence[tuple[str, str, MetricSet]], digits: int = 4) -> str:
    lines = ["\t".join(["label", "policy", "n", "mean_pnl", "accumulated_reward", "cvar5", "downside_variance",
                        "variance"])]
    for label, name, m in rows:
        lines.append("\t".join([label, name, str(m.n)] + [f"{v:.{digits}f}" for v in (
            m.mean_pnl, m.accumulated_reward, m.cvar5, m.downside_variance, m.variance)]))
    lines += [CONVENTION_FOOTERS[0], CONVENTION_FOOTERS[2], CONVENTION_FOOTERS[3].replace("ln ratio of downside variances, ", "")]
    return "\n".join(lines) + "\n"
