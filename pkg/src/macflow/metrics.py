"""Sample-quality and path diagnostics for low-dimensional point clouds."""

import numpy as np

from ._validation import check_batch
from .coupling import assignment_cost, hungarian_assign, squared_cost
from .distributions import standard_normal


def w2_exact(a, b, max_size=256):
    """Exact 2-Wasserstein distance between two equal-size empirical measures."""
    a = check_batch(a, "a")
    b = check_batch(b, "b", dim=a.shape[1])
    n = a.shape[0]
    if b.shape[0] != n:
        raise ValueError("w2_exact needs equally sized point sets")
    if n > max_size:
        raise ValueError(f"w2_exact is limited to {max_size} points; use w2_sliced")
    cost = squared_cost(a, b)
    total = assignment_cost(cost, hungarian_assign(cost))
    return float(np.sqrt(max(total, 0.0) / n))


def w2_sliced(a, b, n_projections=256, rng=None):
    """Sliced 2-Wasserstein distance, scaled by ``sqrt(D)``.

    The mean squared 1-D W2 over random unit directions is multiplied by ``D``
    so that, for a pure translation, the value matches the translation length
    in expectation over directions (the unscaled average only sees ``1/D`` of it).
    """
    a = check_batch(a, "a")
    b = check_batch(b, "b", dim=a.shape[1])
    if a.shape[0] != b.shape[0]:
        raise ValueError("w2_sliced needs equally sized point sets")
    rng = np.random.default_rng(0) if rng is None else rng
    dim = a.shape[1]
    dirs = standard_normal(rng, (n_projections, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    return float(np.sqrt(dim * np.mean((pa - pb) ** 2)))


def straightness(net, trajectory, params=None, velocities=None):
    """Mean of ``||v(x_k, t_k, 0) - (x_end - x_start)||^2`` over samples and Euler steps.

    ``velocities`` (shape ``(n_steps, n, D)``) skips re-evaluating the field when
    the caller already has ``v(x_k, t_k, 0)`` for every step.
    """
    trajectory = np.asarray(trajectory, dtype=np.float64)
    n_steps = trajectory.shape[0] - 1
    if n_steps < 2:
        raise ValueError("straightness needs a trajectory with at least 2 steps")
    chord = trajectory[-1] - trajectory[0]
    total = 0.0
    for k in range(n_steps):
        if velocities is None:
            v = net(trajectory[k], k / n_steps, 0.0, params=params)
        else:
            v = velocities[k]
        total += float(np.mean(np.sum((v - chord) ** 2, axis=1)))
    return total / n_steps


def coupling_cost_stats(coupling):
    """(mean, min, max) of the squared pair displacement ``||x1 - x0||^2``."""
    sq = np.sum((coupling.x1 - coupling.x0) ** 2, axis=1)
    return float(sq.mean()), float(sq.min()), float(sq.max())
