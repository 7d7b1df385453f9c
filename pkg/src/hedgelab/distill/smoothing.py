"""Nadaraya-Watson smoothing of the actor residual over standardized (m, tau, sigma)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BANDWIDTH_SCALE = 0.5
EMPTY_WEIGHT = 1e-12
_CHUNK = 2048


@dataclass
class SmoothedResidual:
    """Gaussian product-kernel regression of residuals at anchor points.

    ``bandwidth`` is per dimension in raw units.
    """

    points: np.ndarray  # (n, 3) raw (m, tau, sigma)
    residuals: np.ndarray
    bandwidth: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, float)
        self.residuals = np.asarray(self.residuals, float)
        self.bandwidth = np.broadcast_to(np.asarray(self.bandwidth, float), (3,)).copy()
        if len(self.points) == 0:
            raise ValueError("smoothing needs at least one anchor point")
        if np.any(self.bandwidth <= 0):
            raise ValueError("bandwidth must be positive in every dimension")
        self._z = self.points / self.bandwidth
        self._sq = np.sum(self._z**2, axis=1)

    def evaluate(self, query: np.ndarray, fallback: np.ndarray | None = None) -> tuple[np.ndarray, int]:
        """Smoothed residual at ``query`` rows; points with no kernel mass use ``fallback``.

        Returns the estimates and the number of fallbacks taken.
        """
        q = np.atleast_2d(np.asarray(query, float)) / self.bandwidth
        out = np.empty(len(q))
        empty = np.zeros(len(q), dtype=bool)
        for lo in range(0, len(q), _CHUNK):
            qc = q[lo : lo + _CHUNK]
            d2 = np.sum(qc**2, axis=1)[:, None] + self._sq[None, :] - 2.0 * qc @ self._z.T
            d2 = np.maximum(d2, 0.0)
            # shift by the nearest anchor for numerical stability
            dmin = d2.min(axis=1, keepdims=True)
            k = np.exp(-0.5 * (d2 - dmin))
            out[lo : lo + _CHUNK] = (k @ self.residuals) / k.sum(axis=1)
            empty[lo : lo + _CHUNK] = np.exp(-0.5 * dmin[:, 0]) < EMPTY_WEIGHT
        n_fb = int(empty.sum())
        if n_fb:
            if fallback is None:
                raise ValueError(f"{n_fb} query points have no kernel neighbours and no fallback was given")
            out[empty] = np.asarray(fallback, float)[empty]
        return out, n_fb

    def to_record(self) -> dict:
        return {"points": self.points.tolist(), "residuals": self.residuals.tolist(),
                "bandwidth": self.bandwidth.tolist()}

    @classmethod
    def from_record(cls, rec: dict) -> "SmoothedResidual":
        return cls(np.array(rec["points"]), np.array(rec["residuals"]), np.array(rec["bandwidth"]))


def default_bandwidth(points: np.ndarray, scale: float = DEFAULT_BANDWIDTH_SCALE) -> np.ndarray:
    sd = np.asarray(points, float).std(axis=0)
    return scale * np.where(sd > 0, sd, 1.0)


def smooth_residual(points, residuals, bandwidth=None) -> SmoothedResidual:
    points = np.asarray(points, float)
    if bandwidth is None:
        bandwidth = default_bandwidth(points)
    return SmoothedResidual(points, residuals, bandwidth)
