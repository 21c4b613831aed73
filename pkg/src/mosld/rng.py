"""Deterministic, splittable random streams.

Every stochastic choice in the package (init, shuffling, dropout masks,
sampling) draws from an Rng handed down from a single root seed. Streams
are identified by their path of split ids, so the same (seed, path) always
reproduces the same draws regardless of what other streams consumed.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, require


class Rng:
    """A random stream addressed by (seed, split path).

    Wraps numpy's PCG64 seeded through SeedSequence spawn keys. split()
    derives an independent child stream without consuming state from the
    parent, which is what makes draw order across subsystems irrelevant.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        require(seed >= 0, ConfigError, f"seed must be >= 0, got {seed}")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in _path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def split(self, child_id: int) -> "Rng":
        """Derive the child stream at child_id. Same id, same stream."""
        require(child_id >= 0, ConfigError,
                f"child_id must be >= 0, got {child_id}")
        return Rng(self.seed, self.path + (int(child_id),))

    def normal(self, shape: tuple[int, ...], sigma: float) -> np.ndarray:
        """Gaussian draws with mean 0 and standard deviation sigma."""
        require(sigma > 0, ConfigError, f"sigma must be > 0, got {sigma}")
        return self._gen.normal(0.0, sigma, size=shape).astype(np.float64)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in [low, high)."""
        require(high > low, ConfigError,
                f"empty integer range [{low}, {high})")
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli_mask(self, shape: tuple[int, ...], keep_prob: float) -> np.ndarray:
        """0/1 float mask; each entry is 1 with probability keep_prob."""
        require(0.0 < keep_prob <= 1.0, ConfigError,
                f"keep_prob must be in (0, 1], got {keep_prob}")
        return (self._gen.random(size=shape) < keep_prob).astype(np.float64)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


def gaussian_matrix(rows: int, cols: int, sigma: float, rng: Rng) -> np.ndarray:
    """Fresh (rows, cols) float64 matrix with i.i.d. N(0, sigma^2) entries."""
    require(rows > 0 and cols > 0, ConfigError,
            f"matrix dims must be positive, got ({rows}, {cols})")
    return rng.normal((rows, cols), sigma)
