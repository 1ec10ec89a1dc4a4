"""Weighted particle samples."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FilterCollapse


@dataclass
class WeightedSample:
    """Particles (rows of ``particles``) with nonnegative importance weights.

    ``ancestor_indices`` records, for a propagated sample, which row of the
    previous sample each particle descends from.
    """

    particles: np.ndarray
    weights: np.ndarray
    ancestor_indices: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=float)
        if self.particles.ndim == 1:
            self.particles = self.particles[:, None]
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        n = self.particles.shape[0]
        if self.weights.shape[0] != n:
            raise ValueError(
                f"{n} particles but {self.weights.shape[0]} weights"
            )
        if self.ancestor_indices is not None:
            self.ancestor_indices = np.asarray(self.ancestor_indices, dtype=np.int64)
            if self.ancestor_indices.shape != (n,):
                raise ValueError("ancestor_indices must have one entry per particle")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("weights must be finite and nonnegative")
        if not np.any(self.weights > 0):
            raise FilterCollapse("sample has no positive weight")

    @classmethod
    def uniform(cls, particles: np.ndarray) -> "WeightedSample":
        particles = np.asarray(particles, dtype=float)
        return cls(particles, np.ones(particles.shape[0]))

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    def normalized_weights(self) -> np.ndarray:
        return self.weights / self.weights.sum()

    def mean(self) -> np.ndarray:
        return self.normalized_weights() @ self.particles

    def covariance(self) -> np.ndarray:
        w = self.normalized_weights()
        centred = self.particles - w @ self.particles
        return (centred * w[:, None]).T @ centred
