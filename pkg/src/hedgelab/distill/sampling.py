"""Distillation pools and the uniform / focus samplers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..pricing import DAYS_PER_YEAR

M_EDGES = np.array([0.70, 0.85, 0.95, 1.00, 1.03, 1.07, 1.12, 1.20, 1.40])
SIGMA_EDGES = np.array([0.00, 0.10, 0.12, 0.16, 0.20, 0.24, 0.28, 0.35, 0.50, 0.85])
T_EDGES = np.array([0, 14, 21, 35, 50, 65, 80, 100, 140], dtype=float)

FOCUS_BOX = {"m": (1.03, 1.15), "sigma": (0.20, 0.38), "T": (25.0, 90.0)}
GAMMA_DENOM_FLOOR = 1e-3
STRATIFIED_SHARE = 0.6


@dataclass
class DistillPool:
    """Candidate states for distillation with their BS deltas and actor residuals.

    ``years`` is the calendar year a support state came from; probe-lattice
    states carry -1.
    """

    m: np.ndarray
    tau: np.ndarray
    sigma: np.ndarray
    bs_delta: np.ndarray
    raw_residual: np.ndarray
    years: np.ndarray
    smooth_residual: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.m)

    @property
    def T_days(self) -> np.ndarray:
        return self.tau * DAYS_PER_YEAR

    def smoothed_gap(self) -> np.ndarray:
        if self.smooth_residual is None:
            raise ValueError("pool has no smoothed residual")
        return np.abs(np.clip(self.bs_delta + self.smooth_residual, 0.0, 1.0) - self.bs_delta)

    def take(self, idx, family: str, target: str, provenance: str) -> "DistillSample":
        res = self.raw_residual if target == "raw" else self.smooth_residual
        if res is None:
            raise ValueError(f"pool has no {target} residual")
        idx = np.asarray(idx, dtype=int)
        return DistillSample(
            m=self.m[idx], tau=self.tau[idx], sigma=self.sigma[idx], target=res[idx], bs_delta=self.bs_delta[idx],
            years=self.years[idx], family=family, provenance=provenance,
        )


@dataclass
class DistillSample:
    m: np.ndarray
    tau: np.ndarray
    sigma: np.ndarray
    target: np.ndarray
    bs_delta: np.ndarray
    years: np.ndarray
    family: str
    provenance: str = ""
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.m)

    def env(self) -> dict:
        return {"m": self.m, "tau": self.tau, "sigma": self.sigma}

    def assert_predates(self, year: int) -> None:
        bad = self.years >= year
        if np.any(bad):
            raise AssertionError(
                f"distillation sample {self.family} contains {int(bad.sum())} points from year >= {year}"
            )


def gamma_proxy(m, sigma, tau) -> np.ndarray:
    vol = np.maximum(np.asarray(sigma, float) * np.sqrt(np.asarray(tau, float)), GAMMA_DENOM_FLOOR)
    return np.exp(-0.5 * (np.log(m) / vol) ** 2) / vol


def normalize_p95(x) -> np.ndarray:
    x = np.asarray(x, float)
    p = np.percentile(x, 95) if len(x) else 0.0
    if p <= 0:
        return np.zeros_like(x)
    return np.clip(x / p, 0.0, 3.0)


def in_focus_box(m, sigma, T_days) -> np.ndarray:
    (m0, m1), (s0, s1), (t0, t1) = FOCUS_BOX["m"], FOCUS_BOX["sigma"], FOCUS_BOX["T"]
    return (m >= m0) & (m <= m1) & (sigma >= s0) & (sigma <= s1) & (T_days >= t0) & (T_days <= t1)


def focus_weight(g_norm, gamma_norm, in_box) -> np.ndarray:
    return 1.0 + 4.0 * np.asarray(g_norm, float) + 1.5 * np.asarray(gamma_norm, float) + 4.0 * np.asarray(in_box, float)


def pool_focus_weights(pool: DistillPool) -> np.ndarray:
    g = normalize_p95(pool.smoothed_gap())
    gam = normalize_p95(gamma_proxy(pool.m, pool.sigma, pool.tau))
    return focus_weight(g, gam, in_focus_box(pool.m, pool.sigma, pool.T_days))


def split_counts(n: int) -> tuple[int, int]:
    """Stratified and pool draw counts: 60% rounded half up, the rest from the pool."""
    n_strat = (6 * n + 5) // 10
    return n_strat, n - n_strat


def cell_index(m, sigma, T_days) -> np.ndarray:
    """Flat focus-grid cell id per point; -1 when outside the bin support."""
    im = np.searchsorted(M_EDGES, m, side="right") - 1
    isg = np.searchsorted(SIGMA_EDGES, sigma, side="right") - 1
    it = np.searchsorted(T_EDGES, T_days, side="right") - 1
    # the top edges are closed
    im = np.where(m == M_EDGES[-1], len(M_EDGES) - 2, im)
    isg = np.where(sigma == SIGMA_EDGES[-1], len(SIGMA_EDGES) - 2, isg)
    it = np.where(T_days == T_EDGES[-1], len(T_EDGES) - 2, it)
    ok = (im >= 0) & (im < len(M_EDGES) - 1) & (isg >= 0) & (isg < len(SIGMA_EDGES) - 1) & (it >= 0) & (
        it < len(T_EDGES) - 1
    )
    flat = (im * (len(SIGMA_EDGES) - 1) + isg) * (len(T_EDGES) - 1) + it
    return np.where(ok, flat, -1)


def _largest_remainder(n: int, mass: np.ndarray) -> np.ndarray:
    quota = n * mass / mass.sum()
    base = np.floor(quota).astype(int)
    short = n - base.sum()
    order = np.lexsort((np.arange(len(mass)), -(quota - base)))
    base[order[:short]] += 1
    return base


def stratified_draws(weights, cells, n: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Allocate ``n`` draws across cells by total weight, then draw weight-proportionally within each.

    Returns the drawn indices and the number of cells with no mass.
    """
    n_cells = (len(M_EDGES) - 1) * (len(SIGMA_EDGES) - 1) * (len(T_EDGES) - 1)
    valid = cells >= 0
    mass = np.bincount(cells[valid], weights=weights[valid], minlength=n_cells)
    empty = int(np.sum(mass <= 0))
    if n == 0 or mass.sum() <= 0:
        return np.zeros(0, dtype=int), empty
    live = np.flatnonzero(mass > 0)
    alloc = _largest_remainder(n, mass[live])
    out = []
    for c, k in zip(live, alloc):
        if k == 0:
            continue
        members = np.flatnonzero(cells == c)
        p = weights[members] / weights[members].sum()
        out.append(rng.choice(members, size=k, replace=True, p=p))
    return np.concatenate(out), empty


def sample_uniform(pool: DistillPool, n: int, rng: np.random.Generator, family: str, target: str) -> DistillSample:
    idx = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
    return pool.take(np.sort(idx), family, target, provenance="uniform")


def sample_focus(pool: DistillPool, n: int, rng: np.random.Generator, family: str = "SmoothFocus") -> DistillSample:
    w = pool_focus_weights(pool)
    n_strat, n_pool = split_counts(n)
    cells = cell_index(pool.m, pool.sigma, pool.T_days)
    strat, empty = stratified_draws(w, cells, n_strat, rng)
    rest = rng.choice(len(pool), size=n_pool, replace=True, p=w / w.sum()) if n_pool else np.zeros(0, dtype=int)
    sample = pool.take(np.concatenate([strat, rest]), family, "smooth", provenance="focus")
    sample.info = {"stratified": len(strat), "pool": len(rest), "empty_strata": empty}
    return sample
