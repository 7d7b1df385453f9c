"""Validation-based choice of one formula from pooled Halls of Fame."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .gp import FAMILIES, HOFEntry

PARSIMONY_BAND = 1.10
# absolute slack in hedge-ratio units so that a near-zero best MAE does not shrink the band to float noise
BAND_ATOL = 1e-6
METRICS = ("fit", "reward", "cvar5", "downside_variance")
_HIGHER_IS_BETTER = {"fit": False, "reward": True, "cvar5": True, "downside_variance": False}


def _family_rank(family: str) -> int:
    return FAMILIES.index(family) if family in FAMILIES else len(FAMILIES)


def select_parsimonious(entries: Sequence[HOFEntry], band: float = PARSIMONY_BAND, atol: float = BAND_ATOL) -> HOFEntry:
    """Lowest complexity among entries with validation MAE <= max(band x best, best + atol).

    Ties go to lower validation MAE, then to family order
    RawUniform < SmoothUniform < SmoothFocus.
    """
    finite = [e for e in entries if np.isfinite(e.val_mae)]
    if not finite:
        raise ValueError("no candidate formulas with a finite validation MAE")
    best = min(e.val_mae for e in finite)
    limit = max(band * best, best + atol)
    ok = [e for e in finite if e.val_mae <= limit]
    return min(ok, key=lambda e: (e.complexity, e.val_mae, _family_rank(e.family)))


def select_by_metric(
    entries: Sequence[HOFEntry],
    metric: str,
    score: Callable[[HOFEntry], float] | None = None,
) -> HOFEntry:
    """Best entry under ``metric``; ties go to lower complexity.

    ``fit`` uses the stored validation MAE. The trading metrics call
    ``score(entry)``, which should trade the formula on validation episodes.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    if not entries:
        raise ValueError("no candidate formulas")
    if metric == "fit":
        values = [e.val_mae for e in entries]
    else:
        if score is None:
            raise ValueError(f"metric {metric!r} needs a trading score function")
        values = [score(e) for e in entries]
    sign = -1.0 if _HIGHER_IS_BETTER[metric] else 1.0
    keyed = [
        (sign * v if np.isfinite(v) else np.inf, e.complexity, _family_rank(e.family), i)
        for i, (e, v) in enumerate(zip(entries, values))
    ]
    return entries[min(keyed)[3]]
