"""Fixed-step generation by integrating a learned field."""

import warnings

import numpy as np

from ._validation import check_batch
from .exceptions import NumericalAbort


class GridExtrapolationWarning(UserWarning):
    """A shortcut step size outside the trained d-grid was requested."""


def _integrate(field, x0, n_steps, d):
    if int(n_steps) != n_steps or n_steps < 1:
        raise ValueError(f"n_steps must be a positive integer, got {n_steps}")
    n_steps = int(n_steps)
    x = check_batch(x0, "x0").copy()
    h = 1.0 / n_steps
    traj = np.empty((n_steps + 1,) + x.shape)
    traj[0] = x
    for k in range(n_steps):
        x = x + h * field(x, k * h, d)
        if not np.all(np.isfinite(x)):
            raise NumericalAbort(f"non-finite state after step {k}", {"step": k, "state": x})
        traj[k + 1] = x
    return x, traj


def euler_sample(net, x0, n_steps, params=None):
    """Euler integration of ``v(x, t, d=0)`` from t=0 to 1.

    Returns the endpoint and the trajectory of shape ``(n_steps + 1, n, D)``.
    """
    return _integrate(lambda x, t, d: net(x, t, d, params=params), x0, n_steps, 0.0)


def shortcut_sample(net, x0, n_steps, d_grid=None, params=None):
    """``n_steps`` jumps ``x <- x + d s(x, t, d)`` with ``d = 1 / n_steps``."""
    d = 1.0 / n_steps
    if d_grid is not None and not np.any(np.isclose(d, np.asarray(d_grid), rtol=0, atol=1e-12)):
        warnings.warn(
            f"step size 1/{n_steps} is not in the trained d-grid; extrapolating",
            GridExtrapolationWarning,
            stacklevel=2,
        )
    return _integrate(lambda x, t, d_: net(x, t, d_, params=params), x0, n_steps, d)


def in_grid(n_steps, d_grid):
    return bool(np.any(np.isclose(1.0 / n_steps, np.asarray(d_grid), rtol=0, atol=1e-12)))


def generate(net, x0, n_steps, shortcut=False, d_grid=None, params=None):
    """Endpoint and trajectory for an ``n_steps`` budget.

    Shortcut models take ``d = 1/n_steps`` jumps when that step size was trained;
    otherwise (and for plain flow-matching models) the ``d=0`` field is Euler-integrated.
    """
    if shortcut and d_grid is not None and in_grid(n_steps, d_grid):
        return shortcut_sample(net, x0, n_steps, d_grid, params=params)
    return euler_sample(net, x0, n_steps, params=params)
