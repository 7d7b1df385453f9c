"""Genetic-programming symbolic regression with a per-complexity Hall of Fame."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np
from scipy.optimize import minimize

from .expr import ARITY, VARIABLES, Expression, is_const, subtree_end
from .sampling import DistillSample

log = logging.getLogger(__name__)

FAMILIES = ("RawUniform", "SmoothUniform", "SmoothFocus")
_FUNCTIONS = tuple(ARITY)


@dataclass(frozen=True)
class GPConfig:
    population: int = 2000
    generations: int = 200
    tournament: int = 5
    p_crossover: float = 0.7
    p_mutation: float = 0.25
    p_constant: float = 0.05
    init_depth: tuple[int, int] = (2, 5)
    max_size: int = 31
    const_range: tuple[float, float] = (-3.0, 3.0)
    p_const_terminal: float = 0.3
    parsimony: float = 1e-4
    refine_every: int = 10
    refine_top: int = 8
    refine_points: int = 1500
    refine_random: int = 20  # small individuals whose constants are re-fitted every generation
    refine_max_size: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.population < 2 or self.generations < 0 or self.tournament < 1:
            raise ValueError("invalid GP budget")
        if self.p_crossover + self.p_mutation + self.p_constant > 1.0 + 1e-12:
            raise ValueError("variation probabilities exceed one")


@dataclass
class HOFEntry:
    expression: Expression
    train_mae: float
    family: str = ""
    seed: int = 0
    val_mae: float = float("nan")

    @property
    def complexity(self) -> int:
        return self.expression.complexity

    def to_line(self) -> str:
        return "\t".join(
            [self.expression.to_string(), str(self.complexity), repr(self.train_mae), repr(self.val_mae),
             self.family, str(self.seed)]
        )

    @classmethod
    def from_line(cls, line: str) -> "HOFEntry":
        expr, _, train, val, family, seed = line.rstrip("\n").split("\t")
        return cls(Expression.parse(expr), float(train), family, int(seed), float(val))


@dataclass
class HallOfFame:
    """Best expression per complexity; :meth:`frontier` gives the Pareto subset."""

    best: dict[int, HOFEntry] = field(default_factory=dict)
    family: str = ""
    seed: int = 0

    def offer(self, expr: Expression, mae: float) -> None:
        if not np.isfinite(mae):
            return
        cur = self.best.get(expr.complexity)
        if cur is None or mae < cur.train_mae:
            self.best[expr.complexity] = HOFEntry(expr, float(mae), self.family, self.seed)

    def frontier(self) -> list[HOFEntry]:
        out, best = [], np.inf
        for c in sorted(self.best):
            e = self.best[c]
            if e.train_mae < best:
                out.append(e)
                best = e.train_mae
        return out


def write_hof(entries: Iterable[HOFEntry], path) -> None:
    with open(path, "w") as fh:
        fh.write("# expression\tcomplexity\ttrain_mae\tval_mae\tfamily\tseed\n")
        for e in entries:
            fh.write(e.to_line() + "\n")


def read_hof(path) -> list[HOFEntry]:
    with open(path) as fh:
        return [HOFEntry.from_line(line) for line in fh if line.strip() and not line.startswith("#")]


class Fitness:
    """Mean absolute error of a residual expression.

    With base deltas the error is measured in hedge-ratio space after
    clipping, i.e. ``|clip(base + g) - clip(base + target)|``.
    """

    def __init__(self, sample: DistillSample, policy_space: bool = True):
        self.env = sample.env()
        self.target = sample.target
        self.base = sample.bs_delta if policy_space else None
        self.goal = np.clip(self.base + self.target, 0.0, 1.0) if self.base is not None else self.target

    def subset(self, idx: np.ndarray) -> "Fitness":
        sub = object.__new__(Fitness)
        sub.env = {k: v[idx] for k, v in self.env.items()}
        sub.target = self.target[idx]
        sub.base = None if self.base is None else self.base[idx]
        sub.goal = self.goal[idx]
        return sub

    def predict(self, expr: Expression) -> np.ndarray:
        g = expr.evaluate(self.env)
        return np.clip(self.base + g, 0.0, 1.0) if self.base is not None else g

    def __call__(self, expr: Expression) -> float:
        pred = self.predict(expr)
        if not np.all(np.isfinite(pred)):
            return np.inf
        return float(np.mean(np.abs(pred - self.goal)))


class _Engine:
    def __init__(self, cfg: GPConfig, fitness: Fitness):
        self.cfg = cfg
        self.fit = fitness
        self.rng = np.random.default_rng(cfg.seed)
        self.cache: dict[tuple, float] = {}

    def score(self, tokens: tuple) -> float:
        val = self.cache.get(tokens)
        if val is None:
            val = self.fit(Expression(tokens))
            self.cache[tokens] = val
        return val

    def terminal(self):
        if self.rng.uniform() < self.cfg.p_const_terminal:
            lo, hi = self.cfg.const_range
            return float(np.round(self.rng.uniform(lo, hi), 3))
        return VARIABLES[int(self.rng.integers(len(VARIABLES)))]

    def random_tree(self, depth: int, full: bool) -> list:
        n_term = len(VARIABLES) + 1
        if depth == 0 or (not full and self.rng.uniform() < n_term / (n_term + len(_FUNCTIONS))):
            return [self.terminal()]
        op = _FUNCTIONS[int(self.rng.integers(len(_FUNCTIONS)))]
        out = [op]
        for _ in range(ARITY[op]):
            out += self.random_tree(depth - 1, full)
        return out

    def initial_population(self) -> list[tuple]:
        lo, hi = self.cfg.init_depth
        pop = [(0.0,), ("m",), ("tau",), ("sigma",)]
        while len(pop) < self.cfg.population:
            depth = int(self.rng.integers(lo, hi + 1))
            tree = tuple(self.random_tree(depth, full=bool(self.rng.integers(2))))
            if len(tree) <= self.cfg.max_size:
                pop.append(tree)
        return pop[: self.cfg.population]

    def pick_node(self, tokens) -> int:
        # bias toward function nodes as in Koza-style crossover
        funcs = [i for i, t in enumerate(tokens) if isinstance(t, str) and t in ARITY]
        if funcs and self.rng.uniform() < 0.9:
            return funcs[int(self.rng.integers(len(funcs)))]
        return int(self.rng.integers(len(tokens)))

    def crossover(self, parent: tuple, donor: tuple) -> tuple:
        i = self.pick_node(parent)
        j = self.pick_node(donor)
        child = parent[:i] + donor[j : subtree_end(donor, j)] + parent[subtree_end(parent, i) :]
        return child if len(child) <= self.cfg.max_size else parent

    def mutate(self, parent: tuple) -> tuple:
        """Subtree, point, hoist or unary-insertion mutation with equal odds."""
        kind = int(self.rng.integers(4))
        if kind == 0:
            donor = tuple(self.random_tree(int(self.rng.integers(1, 4)), full=False))
            return self.crossover(parent, donor)
        i = self.pick_node(parent)
        end = subtree_end(parent, i)
        tok = parent[i]
        if kind == 1:
            if isinstance(tok, str) and tok in ARITY:
                same = [f for f in _FUNCTIONS if ARITY[f] == ARITY[tok] and f != tok]
                new = same[int(self.rng.integers(len(same)))]
            else:
                new = self.terminal()
            return parent[:i] + (new,) + parent[i + 1 :]
        if kind == 2:
            inner = [j for j in range(i + 1, end)]
            if not inner:
                return parent
            j = inner[int(self.rng.integers(len(inner)))]
            return parent[:i] + parent[j : subtree_end(parent, j)] + parent[end:]
        unary = [f for f in _FUNCTIONS if ARITY[f] == 1]
        child = parent[:i] + (unary[int(self.rng.integers(len(unary)))],) + parent[i:]
        return child if len(child) <= self.cfg.max_size else parent

    def perturb_constants(self, parent: tuple) -> tuple:
        idx = [i for i, t in enumerate(parent) if is_const(t)]
        if not idx:
            return self.mutate(parent)
        toks = list(parent)
        for i in idx:
            toks[i] = float(toks[i] * (1.0 + 0.1 * self.rng.standard_normal()) + 0.01 * self.rng.standard_normal())
        return tuple(toks)

    def tournament(self, pop, penalized) -> tuple:
        idx = self.rng.integers(len(pop), size=self.cfg.tournament)
        return pop[int(idx[np.argmin(penalized[idx])])]

    def refine(self, tokens: tuple, sub: Fitness) -> tuple:
        expr = Expression(tokens)
        pos = expr.constants
        if not pos:
            return tokens
        x0 = np.array([tokens[i] for i in pos])

        def obj(c):
            try:
                return sub(expr.with_constants(c))
            except ValueError:
                return np.inf

        res = minimize(obj, x0, method="Nelder-Mead",
                       options={"maxiter": 150 * len(pos), "xatol": 1e-6, "fatol": 1e-9})
        if not np.all(np.isfinite(res.x)):
            return tokens
        cand = expr.with_constants(res.x).fold_constants().tokens
        return cand if self.score(cand) < self.score(tokens) else tokens


def fit_symbolic(sample: DistillSample, cfg: GPConfig = GPConfig(), policy_space: bool = True) -> HallOfFame:
    """Evolve residual expressions for ``sample`` and return the Hall of Fame."""
    if len(sample) == 0:
        raise ValueError("empty distillation sample")
    fitness = Fitness(sample, policy_space=policy_space)
    eng = _Engine(cfg, fitness)
    hof = HallOfFame(family=sample.family, seed=cfg.seed)
    n_sub = min(cfg.refine_points, len(sample))
    sub = fitness.subset(np.sort(eng.rng.choice(len(sample), n_sub, replace=False)))
    pop = eng.initial_population()

    def evaluate(population):
        scores = np.array([eng.score(t) for t in population])
        for t, s in zip(population, scores):
            hof.offer(Expression(t), s)
        return scores

    scores = evaluate(pop)
    for gen in range(cfg.generations):
        if cfg.refine_every and (gen + 1) % cfg.refine_every == 0:
            order = np.argsort(scores, kind="stable")
            seen = set()
            for k in order:
                if len(seen) >= cfg.refine_top:
                    break
                if pop[k] in seen:
                    continue
                seen.add(pop[k])
                pop[k] = eng.refine(pop[k], sub)
            scores = evaluate(pop)
        if cfg.refine_random:
            small = [i for i, t in enumerate(pop) if len(t) <= cfg.refine_max_size and any(is_const(x) for x in t)]
            if small:
                pick = eng.rng.choice(len(small), size=min(cfg.refine_random, len(small)), replace=False)
                for k in np.sort(pick):
                    i = small[int(k)]
                    pop[i] = eng.refine(pop[i], sub)
                    scores[i] = eng.score(pop[i])
                    hof.offer(Expression(pop[i]), scores[i])
        penalized = scores + cfg.parsimony * np.array([len(t) for t in pop])
        penalized = np.where(np.isfinite(penalized), penalized, np.inf)
        elite = pop[int(np.argmin(penalized))]
        nxt = [elite]
        while len(nxt) < cfg.population:
            parent = eng.tournament(pop, penalized)
            u = eng.rng.uniform()
            if u < cfg.p_crossover:
                child = eng.crossover(parent, eng.tournament(pop, penalized))
            elif u < cfg.p_crossover + cfg.p_mutation:
                child = eng.mutate(parent)
            elif u < cfg.p_crossover + cfg.p_mutation + cfg.p_constant:
                child = eng.perturb_constants(parent)
            else:
                child = parent
            nxt.append(Expression(child).fold_constants().tokens)
        pop = nxt
        scores = evaluate(pop)
        if log.isEnabledFor(logging.DEBUG):
            log.debug("gen %d best %.6f", gen, float(np.min(scores)))
    # final polish of the archive
    for c in sorted(hof.best):
        e = hof.best[c]
        refined = eng.refine(e.expression.tokens, sub)
        if refined != e.expression.tokens:
            hof.offer(Expression(refined), eng.score(refined))
    return hof


def relabel(entries: Iterable[HOFEntry], **kw) -> list[HOFEntry]:
    return [replace(e, **kw) for e in entries]
