"""Twin Delayed DDPG in numpy with hand-written backpropagation.

The actor maps a standardized ``(m, tau, inventory, iv)`` state to a hedge
ratio in [0, 1] through a logistic head; the twin critics score
``(state, action)`` pairs. Everything runs in float64 on the CPU.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .env import EpisodeBatch, RewardConfig, rollout, step_pnl, step_reward, PNL_SCALE
from .marketdata import EPISODE_STEPS, Episode
from .pricing import MarketInputs

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
STATE_DIM = 4
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


def leaky_relu(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class MLP:
    """Fully connected net with leaky-ReLU hidden layers and a linear or logistic head."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str = "linear"

    @classmethod
    def init(cls, sizes: Sequence[int], head: str, rng: np.random.Generator) -> "MLP":
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            bs.append(rng.uniform(-bound, bound, fan_out))
        return cls(ws, bs, head)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.head)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def forward_cached(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.weights[0].shape[0]:
            raise ValueError(f"input width {x.shape[1]} does not match layer 0 ({self.weights[0].shape[0]})")
        acts, pre = [x], []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            if i < last:
                h = leaky_relu(z)
            else:
                h = sigmoid(z) if self.head == "sigmoid" else z
            acts.append(h)
        out = h[0] if single else h
        return out, (acts, pre)

    def backward(self, cache, dout: np.ndarray):
        """Gradients of ``sum(dout * output)`` w.r.t. weights, biases and input."""
        acts, pre = cache
        g = np.asarray(dout, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        last = len(self.weights) - 1
        gw = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        for i in range(last, -1, -1):
            if i == last:
                if self.head == "sigmoid":
                    y = acts[i + 1]
                    g = g * y * (1.0 - y)
            else:
                g = g * np.where(pre[i] > 0, 1.0, LEAKY_SLOPE)
            gw[i] = acts[i].T @ g
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return gw + gb, g

    def soft_update(self, source: "MLP", tau: float) -> None:
        for dst, src in zip(self.params(), source.params()):
            dst *= 1.0 - tau
            dst += tau * src

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class TD3Config:
    gamma: float = 0.99
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    batch: int = 256
    buffer_cap: int = 1_000_000
    explore_noise_sd: float = 0.1
    target_noise_sd: float = 0.2
    target_noise_clip: float = 0.5
    policy_delay: int = 2
    tau_polyak: float = 0.005
    warmup: int = 1000
    hidden: int = 256
    update_every: int = 1
    episodes: int = 20_000
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.policy_delay < 1 or self.target_noise_clip <= 0:
            raise ValueError("policy_delay >= 1 and target_noise_clip > 0 required")
        if not (0 < self.gamma <= 1) or self.batch < 1 or self.buffer_cap < 1 or self.update_every < 1:
            raise ValueError("invalid TD3 configuration")
        if not (0 < self.tau_polyak <= 1):
            raise ValueError("tau_polyak must lie in (0, 1]")


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return (np.asarray(states, float) - self.mean) / self.std

    @classmethod
    def identity(cls, dim: int = STATE_DIM) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def from_batch(cls, batch: EpisodeBatch) -> "Standardizer":
        """Moments of the training-window states, with inventory taken as the lagged BS hedge."""
        steps = slice(0, EPISODE_STEPS)
        inv = np.concatenate([np.zeros((len(batch), 1)), -batch.bs_delta[:, : EPISODE_STEPS - 1]], axis=1)
        cols = [batch.fwd_moneyness[:, steps], batch.tau[:, steps], inv, batch.iv[:, steps]]
        data = np.stack([c.ravel() for c in cols], axis=1)
        std = data.std(axis=0)
        return cls(data.mean(axis=0), np.where(std > 1e-8, std, 1.0))


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, capacity: int, state_dim: int = STATE_DIM):
        self.capacity = int(capacity)
        self.s = np.empty((self.capacity, state_dim))
        self.a = np.empty((self.capacity, 1))
        self.r = np.empty((self.capacity, 1))
        self.s2 = np.empty((self.capacity, state_dim))
        self.d = np.empty((self.capacity, 1))
        self.size = 0
        self.ptr = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s2, done) -> None:
        i = self.ptr
        self.s[i], self.a[i, 0], self.r[i, 0], self.s2[i], self.d[i, 0] = s, a, r, s2, float(done)
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, n)

    def sample(self, n: int, rng: np.random.Generator):
        idx = self.sample_indices(n, rng)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.d[idx]


def critic_input(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.concatenate([states, np.asarray(actions, float).reshape(-1, 1)], axis=1)


def critic_target(rewards, next_states, dones, actor_t: MLP, critic1_t: MLP, critic2_t: MLP, cfg: TD3Config,
                  rng: np.random.Generator) -> np.ndarray:
    """Clipped double-Q target with target-policy smoothing."""
    a2 = actor_t.forward(next_states)
    noise = np.clip(rng.normal(0.0, cfg.target_noise_sd, a2.shape), -cfg.target_noise_clip, cfg.target_noise_clip)
    a2 = np.clip(a2 + noise, 0.0, 1.0)
    x2 = critic_input(next_states, a2)
    q = np.minimum(critic1_t.forward(x2), critic2_t.forward(x2))
    return rewards + cfg.gamma * (1.0 - dones) * q


class TD3Agent:
    def __init__(self, cfg: TD3Config, standardizer: Standardizer | None = None, rng=None):
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        h = cfg.hidden
        self.actor = MLP.init([STATE_DIM, h, h, 1], "sigmoid", self.rng)
        self.critic1 = MLP.init([STATE_DIM + 1, h, h, 1], "linear", self.rng)
        self.critic2 = MLP.init([STATE_DIM + 1, h, h, 1], "linear", self.rng)
        self.actor_t, self.critic1_t, self.critic2_t = self.actor.copy(), self.critic1.copy(), self.critic2.copy()
        self.actor_opt = Adam(self.actor.params(), cfg.actor_lr)
        self.critic1_opt = Adam(self.critic1.params(), cfg.critic_lr)
        self.critic2_opt = Adam(self.critic2.params(), cfg.critic_lr)
        self.standardizer = standardizer or Standardizer.identity()
        self.updates = 0

    def act(self, std_states: np.ndarray) -> np.ndarray:
        return self.actor.forward(std_states)[..., 0]

    def update(self, batch) -> dict:
        """One critic step; every ``policy_delay`` steps an actor step and target mixing."""
        s, a, r, s2, d = batch
        cfg = self.cfg
        y = critic_target(r, s2, d, self.actor_t, self.critic1_t, self.critic2_t, cfg, self.rng)
        x = critic_input(s, a)
        n = len(s)
        diag = {}
        for k, (net, opt) in enumerate(((self.critic1, self.critic1_opt), (self.critic2, self.critic2_opt)), 1):
            q, cache = net.forward_cached(x)
            err = q - y
            grads, _ = net.backward(cache, 2.0 * err / n)
            _check_finite(grads, f"critic{k}")
            opt.step(grads)
            diag[f"critic{k}_loss"] = float(np.mean(err * err))
        self.updates += 1
        if self.updates % cfg.policy_delay == 0:
            act, a_cache = self.actor.forward_cached(s)
            q, q_cache = self.critic1.forward_cached(critic_input(s, act))
            _, dx = self.critic1.backward(q_cache, -np.ones_like(q) / n)
            grads, _ = self.actor.backward(a_cache, dx[:, -1:])
            _check_finite(grads, "actor")
            self.actor_opt.step(grads)
            for tgt, src in ((self.actor_t, self.actor), (self.critic1_t, self.critic1), (self.critic2_t, self.critic2)):
                tgt.soft_update(src, cfg.tau_polyak)
            diag["actor_objective"] = float(np.mean(q))
        return diag


def _check_finite(grads, label):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient in {label}")


@dataclass
class ActorCheckpoint:
    actor: MLP
    standardizer: Standardizer
    config: dict = field(default_factory=dict)
    episodes_trained: int = 0
    val_reward: float | None = None

    def hedge(self, states: np.ndarray) -> np.ndarray:
        return self.actor.forward(self.standardizer(states))[..., 0]

    def save(self, path) -> None:
        arrays = {f"w{i}": w for i, w in enumerate(self.actor.weights)}
        arrays.update({f"b{i}": b for i, b in enumerate(self.actor.biases)})
        meta = {
            "version": CHECKPOINT_VERSION, "sizes": self.actor.sizes, "head": self.actor.head,
            "config": self.config, "episodes_trained": self.episodes_trained, "val_reward": self.val_reward,
        }
        with open(path, "wb") as fh:
            np.savez(fh, mean=self.standardizer.mean, std=self.standardizer.std, meta=np.array(json.dumps(meta)),
                     **arrays)

    @classmethod
    def load(cls, path) -> "ActorCheckpoint":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta['version']}")
            n = len(meta["sizes"]) - 1
            actor = MLP([z[f"w{i}"] for i in range(n)], [z[f"b{i}"] for i in range(n)], meta["head"])
            std = Standardizer(z["mean"], z["std"])
        return cls(actor, std, meta["config"], meta["episodes_trained"], meta["val_reward"])


class _ActorPolicy:
    name = "actor"

    def __init__(self, actor: MLP, standardizer: Standardizer):
        self.actor, self.standardizer = actor, standardizer

    def evaluate_batch(self, states, market):
        return self.actor.forward(self.standardizer(states))[:, 0]


@dataclass
class TrainResult:
    checkpoint: ActorCheckpoint
    history: list[dict]
    total_steps: int


def train(
    train_episodes: Sequence[Episode],
    cfg: TD3Config,
    val_episodes: Sequence[Episode] | None = None,
    reward_cfg: RewardConfig = RewardConfig(),
    cost: float = 0.0,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train an actor on episodes sampled uniformly from the training window.

    When validation episodes are supplied the actor is scored every
    ``checkpoint_every`` episodes by mean accumulated validation reward and
    the best checkpoint is returned.
    """
    if not train_episodes:
        raise ValueError("training window is empty")
    batch = EpisodeBatch.from_episodes(train_episodes)
    standardizer = Standardizer.from_batch(batch)
    rng = np.random.default_rng(cfg.seed)
    agent = TD3Agent(cfg, standardizer, rng)
    buffer = ReplayBuffer(min(cfg.buffer_cap, max(cfg.episodes, 1) * EPISODE_STEPS))
    val_batch = EpisodeBatch.from_episodes(val_episodes) if val_episodes else None
    history: list[dict] = []
    meta = asdict(cfg)

    def snapshot(n_eps):
        val = None
        if val_batch is not None:
            res = rollout(_ActorPolicy(agent.actor, standardizer), val_batch, reward_cfg, cost)
            val = float(np.mean([r.accumulated_reward for r in res]))
        return ActorCheckpoint(agent.actor.copy(), copy.deepcopy(standardizer), meta, n_eps, val)

    best = snapshot(0) if cfg.episodes == 0 else None
    steps = 0
    s0 = batch.spot[:, 0]
    last_diag: dict = {}
    for ep_i in range(cfg.episodes):
        j = int(rng.integers(len(batch)))
        prev = 0.0
        state = standardizer(batch.states(0, np.array([prev]), rows=[j]))[0]
        for t in range(EPISODE_STEPS):
            if steps < cfg.warmup:
                action = float(rng.uniform())
            else:
                mu = float(agent.act(state))
                action = float(np.clip(mu + rng.normal(0.0, cfg.explore_noise_sd), 0.0, 1.0))
            pnl = step_pnl(batch.option[j, t], batch.option[j, t + 1], batch.spot[j, t], batch.spot[j, t + 1],
                           action, prev, cost)
            reward = step_reward(pnl / s0[j], reward_cfg)
            nxt = standardizer(batch.states(t + 1, np.array([action]), rows=[j]))[0]
            done = t == EPISODE_STEPS - 1
            buffer.add(state, action, reward, nxt, done)
            steps += 1
            if steps > cfg.warmup and len(buffer) >= cfg.batch and steps % cfg.update_every == 0:
                last_diag = agent.update(buffer.sample(cfg.batch, rng))
                if not np.isfinite(last_diag["critic1_loss"]):
                    raise TrainingDivergedError(f"non-finite critic loss at step {steps}: {last_diag}")
            state, prev = nxt, action
        if not agent.actor.all_finite():
            raise TrainingDivergedError(f"non-finite actor parameters after episode {ep_i + 1}")
        n_done = ep_i + 1
        if n_done % cfg.checkpoint_every == 0 or n_done == cfg.episodes:
            snap = snapshot(n_done)
            rec = {"episodes": n_done, "steps": steps, "val_reward": snap.val_reward, **last_diag}
            history.append(rec)
            if progress:
                progress(rec)
            log.info("td3 %s", rec)
            if best is None or (snap.val_reward is not None and snap.val_reward > best.val_reward):
                best = snap
            elif snap.val_reward is None:
                best = snap
    return TrainResult(best, history, steps)
