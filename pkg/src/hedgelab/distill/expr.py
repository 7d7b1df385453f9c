"""Expression trees in prefix form over (m, tau, sigma).

A tree is a tuple of tokens in prefix order: operator names, variable
names, or float constants. Complexity is the node count. The canonical
text form is nested function-call notation, e.g. ``mul(sigma,sub(exp(m),2.949))``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

ARITY = {"add": 2, "sub": 2, "mul": 2, "div": 2, "exp": 1, "sqrt": 1, "square": 1}
VARIABLES = ("m", "tau", "sigma")
PROTECTED_DIV_EPS = 1e-9


def _div(a, b):
    small = np.abs(b) < PROTECTED_DIV_EPS
    return np.where(small, a, a / np.where(small, 1.0, b))


_FUNCS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": _div,
    "exp": np.exp,
    "sqrt": lambda a: np.sqrt(np.abs(a)),
    "square": np.square,
}


def is_const(tok) -> bool:
    return isinstance(tok, float)


def subtree_end(tokens: Sequence, start: int) -> int:
    """Index one past the subtree rooted at ``start``."""
    need = 1
    i = start
    while need:
        tok = tokens[i]
        need += ARITY.get(tok, 0) if isinstance(tok, str) else 0
        need -= 1
        i += 1
    return i


@dataclass(frozen=True)
class Expression:
    tokens: tuple

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("empty expression")
        try:
            complete = subtree_end(self.tokens, 0) == len(self.tokens)
        except IndexError:
            complete = False
        if not complete:
            raise ValueError("malformed prefix expression")
        for t in self.tokens:
            if is_const(t):
                if not np.isfinite(t):
                    raise ValueError("non-finite constant")
            elif t not in ARITY and t not in VARIABLES:
                raise ValueError(f"unknown token {t!r}")

    @property
    def complexity(self) -> int:
        return len(self.tokens)

    @property
    def constants(self) -> list[int]:
        return [i for i, t in enumerate(self.tokens) if is_const(t)]

    def with_constants(self, values) -> "Expression":
        toks = list(self.tokens)
        for i, v in zip(self.constants, values):
            toks[i] = float(v)
        return Expression(tuple(toks))

    def evaluate(self, env: Mapping[str, np.ndarray]) -> np.ndarray:
        """Vectorized evaluation; ``env`` maps variable names to equal-length arrays."""
        n = len(next(iter(env.values())))
        stack: list = []
        with np.errstate(all="ignore"):
            for tok in reversed(self.tokens):
                if is_const(tok):
                    stack.append(tok)
                elif tok in VARIABLES:
                    stack.append(env[tok])
                else:
                    args = [stack.pop() for _ in range(ARITY[tok])]
                    stack.append(_FUNCS[tok](*args))
        out = stack[0]
        return np.broadcast_to(np.asarray(out, dtype=float), (n,)).copy()

    def __call__(self, m, tau, sigma) -> np.ndarray:
        m = np.atleast_1d(np.asarray(m, float))
        return self.evaluate({"m": m, "tau": np.broadcast_to(tau, m.shape), "sigma": np.broadcast_to(sigma, m.shape)})

    def to_string(self) -> str:
        return _render(self.tokens, 0)[0]

    def __str__(self) -> str:
        return self.to_string()

    @classmethod
    def parse(cls, text: str) -> "Expression":
        tokens = _tokenize(text)
        out: list = []
        pos = _parse(tokens, 0, out)
        if pos != len(tokens):
            raise ValueError(f"trailing input in expression {text!r}")
        return cls(tuple(out))

    def fold_constants(self) -> "Expression":
        """Replace variable-free subtrees by their value."""
        return Expression(tuple(_fold(list(self.tokens))))


def _render(tokens, i):
    tok = tokens[i]
    if is_const(tok):
        return repr(tok), i + 1
    if tok in VARIABLES:
        return tok, i + 1
    parts = []
    j = i + 1
    for _ in range(ARITY[tok]):
        s, j = _render(tokens, j)
        parts.append(s)
    return f"{tok}({','.join(parts)})", j


_TOKEN_RE = re.compile(r"\s*(?:([A-Za-z_][A-Za-z_0-9]*)|([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)|([(),]))")


def _tokenize(text):
    out = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        mt = _TOKEN_RE.match(text, pos)
        if not mt or mt.end() == pos:
            raise ValueError(f"cannot parse expression at {text[pos:]!r}")
        name, num, punct = mt.groups()
        out.append(name if name else float(num) if num else punct)
        pos = mt.end()
    return out


def _parse(tokens, i, out):
    if i >= len(tokens):
        raise ValueError("unexpected end of expression")
    tok = tokens[i]
    if isinstance(tok, float) or tok in VARIABLES:
        out.append(tok)
        return i + 1
    if tok not in ARITY:
        raise ValueError(f"unknown token {tok!r}")
    out.append(tok)
    if tokens[i + 1] != "(":
        raise ValueError(f"expected '(' after {tok}")
    i += 2
    for k in range(ARITY[tok]):
        i = _parse(tokens, i, out)
        expected = "," if k < ARITY[tok] - 1 else ")"
        if i >= len(tokens) or tokens[i] != expected:
            raise ValueError(f"expected {expected!r} in {tok} arguments")
        i += 1
    return i


def _fold(tokens):
    def rec(i):
        tok = tokens[i]
        if not isinstance(tok, str) or tok in VARIABLES:
            return [tok], i + 1, is_const(tok)
        parts, j, all_const = [], i + 1, True
        for _ in range(ARITY[tok]):
            sub, j, c = rec(j)
            parts.append(sub)
            all_const &= c
        if all_const:
            with np.errstate(all="ignore"):
                val = float(_FUNCS[tok](*[np.float64(p[0]) for p in parts]))
            if np.isfinite(val):
                return [val], j, True
        return [tok] + [t for p in parts for t in p], j, False

    return rec(0)[0]


def make_env(m, tau, sigma) -> dict:
    return {"m": np.asarray(m, float), "tau": np.asarray(tau, float), "sigma": np.asarray(sigma, float)}
