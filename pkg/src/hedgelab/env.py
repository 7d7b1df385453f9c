"""Hedging MDP: state construction, daily P&L, the downside-shortfall reward
and batched episode rollout for any policy.

P&L is reported in percent of the initial spot of the episode; the reward
consumes the same quantity as a fraction (``pnl_pct / 100``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .marketdata import EPISODE_STEPS, Episode
from .pricing import MarketInputs, bs_call_delta, forward_moneyness

REWARD_SCALE = 10.0
REWARD_BONUS = 0.03
PNL_SCALE = 100.0

STATE_FIELDS = ("fwd_moneyness", "tau", "inventory", "iv")
PNL_BASIS = "percent of initial spot"


@dataclass(frozen=True)
class RewardConfig:
    kappa: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.kappa < 0 or self.alpha <= 0:
            raise ValueError("reward requires kappa >= 0 and alpha > 0")


@dataclass(frozen=True)
class HedgeState:
    fwd_moneyness: float
    tau: float
    inventory: float
    iv: float

    def __post_init__(self):
        if not (self.tau > 0 and self.fwd_moneyness > 0 and -1.0 <= self.inventory <= 0.0):
            raise ValueError(f"invalid hedge state {self}")

    def vector(self) -> np.ndarray:
        return np.array([self.fwd_moneyness, self.tau, self.inventory, self.iv])


class Policy(Protocol):
    name: str

    def evaluate_batch(self, states: np.ndarray, market: MarketInputs) -> np.ndarray:
        """Hedge ratios for an ``(n, 4)`` state array and matching market inputs."""


def step_pnl(c_now, c_next, s_now, s_next, delta, delta_prev, cost=0.0):
    return (c_next - c_now) - delta * (s_next - s_now) - cost * s_now * np.abs(delta - delta_prev)


def step_reward(pnl, cfg: RewardConfig = RewardConfig()):
    """Per-step reward for a P&L expressed as a fraction of initial spot."""
    x = PNL_SCALE * np.asarray(pnl, dtype=float)
    r = REWARD_SCALE * (REWARD_BONUS + x - cfg.kappa * np.abs(x) ** cfg.alpha)
    return float(r) if r.ndim == 0 else r


@dataclass
class EpisodeResult:
    daily_pnl: np.ndarray
    daily_reward: np.ndarray
    terminal_pnl: float
    deltas: np.ndarray
    bs_deltas: np.ndarray
    window_id: str
    contract: tuple
    policy_name: str
    n_clipped: int = 0

    @property
    def accumulated_reward(self) -> float:
        return float(np.sum(self.daily_reward))

    def to_record(self) -> dict:
        return {
            "window_id": self.window_id,
            "contract": list(self.contract),
            "policy_name": self.policy_name,
            "terminal_pnl": self.terminal_pnl,
            "daily_pnl": self.daily_pnl.tolist(),
            "daily_reward": self.daily_reward.tolist(),
            "deltas": self.deltas.tolist(),
            "bs_deltas": self.bs_deltas.tolist(),
            "n_clipped": self.n_clipped,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "EpisodeResult":
        return cls(
            daily_pnl=np.array(rec["daily_pnl"]), daily_reward=np.array(rec["daily_reward"]),
            terminal_pnl=rec["terminal_pnl"], deltas=np.array(rec["deltas"]),
            bs_deltas=np.array(rec["bs_deltas"]), window_id=rec["window_id"],
            contract=tuple(rec["contract"]), policy_name=rec["policy_name"], n_clipped=rec.get("n_clipped", 0),
        )


def write_results(results: Iterable[EpisodeResult], path) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_record(), separators=(",", ":")) + "\n")


def read_results(path) -> list[EpisodeResult]:
    with open(path) as fh:
        return [EpisodeResult.from_record(json.loads(line)) for line in fh if line.strip()]


@dataclass
class EpisodeBatch:
    """Episodes stacked into ``(n, 22)`` arrays with precomputed state inputs."""

    episodes: list[Episode]
    spot: np.ndarray
    option: np.ndarray
    tau: np.ndarray
    iv: np.ndarray
    rate: np.ndarray
    div_yield: np.ndarray
    strike: np.ndarray  # (n, 1)
    fwd_moneyness: np.ndarray = field(init=False)
    bs_delta: np.ndarray = field(init=False)

    def __post_init__(self):
        m = self.market(slice(None))
        self.fwd_moneyness = forward_moneyness(m)
        self.bs_delta = bs_call_delta(m)

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode]) -> "EpisodeBatch":
        episodes = list(episodes)
        if not episodes:
            raise ValueError("empty episode set")

        def stack(attr):
            return np.stack([getattr(e, attr) for e in episodes])

        return cls(
            episodes=episodes, spot=stack("underlying"), option=stack("option_mid"), tau=stack("tau"),
            iv=stack("iv"), rate=stack("rate"), div_yield=stack("div_yield"),
            strike=np.array([[e.strike] for e in episodes], dtype=float),
        )

    def __len__(self) -> int:
        return len(self.episodes)

    def market(self, t, rows=slice(None)) -> MarketInputs:
        strike = self.strike[rows]
        if isinstance(t, int):
            strike = strike[:, 0]
        return MarketInputs(
            spot=self.spot[rows, t], strike=strike, tau=self.tau[rows, t], rate=self.rate[rows, t],
            div_yield=self.div_yield[rows, t], sigma=self.iv[rows, t],
        )

    def states(self, t: int, delta_prev: np.ndarray, rows=slice(None)) -> np.ndarray:
        return np.column_stack(
            [self.fwd_moneyness[rows, t], self.tau[rows, t], -np.asarray(delta_prev, float), self.iv[rows, t]]
        )


def rollout(
    policy: Policy,
    batch: EpisodeBatch,
    cfg: RewardConfig = RewardConfig(),
    cost: float = 0.0,
) -> list[EpisodeResult]:
    """Roll every episode in ``batch`` under ``policy`` with shared accounting."""
    n = len(batch)
    deltas = np.zeros((n, EPISODE_STEPS))
    pnl_pct = np.zeros((n, EPISODE_STEPS))
    clipped = np.zeros(n, dtype=int)
    prev = np.zeros(n)
    s0 = batch.spot[:, 0]
    for t in range(EPISODE_STEPS):
        raw = np.asarray(policy.evaluate_batch(batch.states(t, prev), batch.market(t)), dtype=float).reshape(n)
        if not np.all(np.isfinite(raw)):
            raise ValueError(f"policy {policy.name!r} produced non-finite hedge ratios")
        out = (raw < 0.0) | (raw > 1.0)
        clipped += out
        delta = np.clip(raw, 0.0, 1.0)
        raw_pnl = step_pnl(
            batch.option[:, t], batch.option[:, t + 1], batch.spot[:, t], batch.spot[:, t + 1], delta, prev, cost
        )
        pnl_pct[:, t] = PNL_SCALE * raw_pnl / s0
        deltas[:, t] = delta
        prev = delta
    rewards = step_reward(pnl_pct / PNL_SCALE, cfg)
    results = []
    for i, ep in enumerate(batch.episodes):
        results.append(
            EpisodeResult(
                daily_pnl=pnl_pct[i], daily_reward=rewards[i], terminal_pnl=float(np.sum(pnl_pct[i])),
                deltas=deltas[i], bs_deltas=batch.bs_delta[i, :EPISODE_STEPS].copy(), window_id=ep.window_id,
                contract=ep.contract, policy_name=policy.name, n_clipped=int(clipped[i]),
            )
        )
    return results


def run_episodes(policy: Policy, episodes: Sequence[Episode], cfg: RewardConfig = RewardConfig(),
                 cost: float = 0.0) -> list[EpisodeResult]:
    return rollout(policy, EpisodeBatch.from_episodes(episodes), cfg, cost)


def run_episode(policy: Policy, episode: Episode, cfg: RewardConfig = RewardConfig(),
                cost: float = 0.0) -> EpisodeResult:
    return run_episodes(policy, [episode], cfg, cost)[0]


def terminal_pnls(results: Sequence[EpisodeResult]) -> np.ndarray:
    return np.array([r.terminal_pnl for r in results])


def accumulated_rewards(results: Sequence[EpisodeResult]) -> np.ndarray:
    return np.array([r.accumulated_reward for r in results])
