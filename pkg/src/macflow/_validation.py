"""Input validation shared by the public functions and the estimator."""

import numpy as np
from sklearn.utils.validation import check_array


def check_batch(x, name="x", dim=None):
    """Return ``x`` as a finite float64 (n, dim) array."""
    x = check_array(x, dtype=np.float64, ensure_all_finite=True, input_name=name)
    if dim is not None and x.shape[1] != dim:
        raise ValueError(f"{name} has {x.shape[1]} columns, expected {dim}")
    return x


def check_pair(x0, x1):
    x0 = check_batch(x0, "x0")
    x1 = check_batch(x1, "x1", dim=x0.shape[1])
    if x0.shape[0] != x1.shape[0]:
        raise ValueError(
            f"source and target batches differ in size: {x0.shape[0]} != {x1.shape[0]}"
        )
    return x0, x1


def check_times(t, n, name="t"):
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    if t.size and (not np.all(np.isfinite(t)) or t.min() < 0.0 or t.max() > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")
    return t


def check_fraction(value, name, allow_zero=False):
    value = float(value)
    lo_ok = value >= 0.0 if allow_zero else value > 0.0
    if not (lo_ok and value <= 1.0):
        interval = "[0, 1]" if allow_zero else "(0, 1]"
        raise ValueError(f"{name} must be in {interval}, got {value}")
    return value


def check_square_cost(cost):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if cost.shape[0] == 0:
        raise ValueError("cost matrix is empty")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    return cost
