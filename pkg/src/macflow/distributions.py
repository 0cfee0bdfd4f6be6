"""Identity-covariance Gaussian mixtures used as source and target laws."""

from dataclasses import dataclass

import numpy as np

from ._validation import check_batch

LOG_2PI = float(np.log(2.0 * np.pi))


def standard_normal(rng, shape):
    """Box-Muller normals built from ``rng.random`` so draws depend only on the uniform stream."""
    shape = tuple(np.atleast_1d(shape))
    size = int(np.prod(shape))
    half = (size + 1) // 2
    u1 = 1.0 - rng.random(half)  # (0, 1], keeps log finite
    u2 = rng.random(half)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.empty(2 * half)
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    return z[:size].reshape(shape)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Mixture ``sum_i w_i N(mu_i, I)``.

    Parameters
    ----------
    weights : array-like of shape (K,)
        Strictly positive component weights summing to one.
    means : array-like of shape (K, D)
    """

    weights: np.ndarray
    means: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64).ravel()
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        if weights.size == 0:
            raise ValueError("a mixture needs at least one component")
        if means.shape[0] != weights.size:
            raise ValueError(
                f"{weights.size} weights but {means.shape[0]} means"
            )
        if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
            raise ValueError("mixture weights must be finite and strictly positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {weights.sum()!r}, not 1")
        if not np.all(np.isfinite(means)):
            raise ValueError("mixture means must be finite")
        weights.setflags(write=False)
        means.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)

    @classmethod
    def equal_weights(cls, means):
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        k = means.shape[0]
        return cls(np.full(k, 1.0 / k), means)

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.weights.size

    def sample_with_labels(self, n, rng):
        if n < 1:
            raise ValueError(f"sample size must be >= 1, got {n}")
        cdf = np.cumsum(self.weights)
        cdf[-1] = 1.0
        labels = np.searchsorted(cdf, rng.random(n), side="right")
        x = self.means[labels] + standard_normal(rng, (n, self.dim))
        return x, labels

    def sample(self, n, rng):
        return self.sample_with_labels(n, rng)[0]

    def log_density(self, x):
        """Log-density at a single point (returns float) or at each row of a batch."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = check_batch(np.atleast_2d(x), dim=self.dim)
        sq = ((x[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=-1)
        logs = np.log(self.weights)[None, :] - 0.5 * sq - 0.5 * self.dim * LOG_2PI
        peak = logs.max(axis=1, keepdims=True)
        out = peak[:, 0] + np.log(np.exp(logs - peak).sum(axis=1))
        return float(out[0]) if single else out

    def to_dict(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist()}


class EmpiricalDistribution:
    """Uniform resampling (with replacement) of a fixed point cloud."""

    def __init__(self, points):
        self.points = check_batch(points, "points")

    @property
    def dim(self):
        return self.points.shape[1]

    def sample(self, n, rng):
        if n < 1:
            raise ValueError(f"sample size must be >= 1, got {n}")
        return self.points[rng.integers(0, self.points.shape[0], size=n)]


def standard_gaussian(dim=2):
    return GaussianMixture(np.ones(1), np.zeros((1, dim)))


def four_corner_source(scale=4.0):
    """Four equal-weight modes at (+-scale, +-scale)."""
    s = scale
    return GaussianMixture.equal_weights([[-s, -s], [-s, s], [s, -s], [s, s]])


def two_mode_target(scale=4.0):
    """Two equal-weight modes at (-scale, 0) and (scale, 0)."""
    return GaussianMixture.equal_weights([[-scale, 0.0], [scale, 0.0]])
