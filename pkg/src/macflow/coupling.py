"""Source/target pairings: random, exact and entropic OT, and model-aligned couplings.

Every constructor returns a :class:`CouplingBatch`; row ``i`` of ``x0`` is paired
with row ``i`` of ``x1``. Model-aligned strategies score pairs with the EMA
parameters passed in explicitly, never with the live ones.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numba import njit

from ._validation import check_fraction, check_pair, check_square_cost

STRATEGIES = ("random", "batch_ot", "sinkhorn_ot", "mac_topk", "mac_full")
ERROR_MODES = ("endpoint", "d1")


@dataclass
class CouplingBatch:
    x0: np.ndarray
    x1: np.ndarray
    weight: np.ndarray
    selected: np.ndarray
    one_step_supervised: np.ndarray
    strategy: str = "random"
    target_index: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.x0.shape[0]
        if self.x1.shape != self.x0.shape:
            raise ValueError("x0 and x1 must have identical shapes")
        if self.target_index is None:
            self.target_index = np.arange(n)
        for name in ("weight", "selected", "one_step_supervised", "target_index"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have one entry per pair")
        if np.any(self.one_step_supervised & ~self.selected):
            raise ValueError("one-step supervised pairs must be a subset of the selected pairs")

    def __len__(self):
        return self.x0.shape[0]

    @property
    def selected_fraction(self):
        return float(self.selected.sum()) / len(self)


def _plain(x0, x1, strategy, target_index=None, meta=None):
    n = x0.shape[0]
    return CouplingBatch(
        x0, x1, np.ones(n), np.zeros(n, bool), np.zeros(n, bool),
        strategy=strategy, target_index=target_index, meta=meta or {},
    )


def random_coupling(x0, x1):
    """Pair row i with row i; independence comes from how the batches were drawn."""
    x0, x1 = check_pair(x0, x1)
    return _plain(x0, x1, "random")


def squared_cost(x0, x1):
    """``C[i, j] = ||x0_i - x1_j||^2``."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    if x0.shape[1] != x1.shape[1]:
        raise ValueError("point sets have different dimensions")
    diff = x0[:, None, :] - x1[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


# -- exact assignment ------------------------------------------------------------


@njit(cache=True)
def _shortest_augmenting_path(cost):
    """Hungarian method with potentials; returns (assignment, row duals, col duals)."""
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j] = row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    minv = np.empty(n + 1)
    used = np.empty(n + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv[:] = np.inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = owner[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[owner[j] - 1] = j - 1
    return perm, u[1:], v[1:]


def _lexicographic_refine(perm, tight):
    """Move to the lexicographically smallest perfect matching inside ``tight``.

    ``perm`` must be a perfect matching using only tight edges. Row ``i`` is
    greedily switched to its smallest tight column for which an alternating path
    among the not-yet-fixed rows frees up its current column.
    """
    n = perm.size
    perm = perm.copy()
    owner = np.empty(n, dtype=np.intp)
    owner[perm] = np.arange(n)
    fixed_col = np.zeros(n, dtype=bool)
    for i in range(n):
        for j in np.flatnonzero(tight[i, : perm[i]]):
            if fixed_col[j]:
                continue
            goal = perm[i]
            start = owner[j]
            # BFS from row `start` to column `goal` through unfixed rows, avoiding column j
            parent_col = {start: None}
            parent_row = {}
            queue = [start]
            found = False
            while queue and not found:
                nxt = []
                for row in queue:
                    for c in np.flatnonzero(tight[row]):
                        if fixed_col[c] or c == j or c in parent_row or c == perm[row]:
                            continue
                        parent_row[c] = row
                        if c == goal:
                            found = True
                            break
                        r2 = owner[c]
                        if r2 not in parent_col:
                            parent_col[r2] = c
                            nxt.append(r2)
                    if found:
                        break
                queue = nxt
            if not found:
                continue
            c = goal
            while c is not None:
                row = parent_row[c]
                prev = parent_col[row]
                perm[row] = c
                owner[c] = row
                c = prev
            perm[i] = j
            owner[j] = i
            break
        fixed_col[perm[i]] = True
    return perm


def hungarian_assign(cost):
    """Minimum-cost perfect matching of a square cost matrix.

    Returns ``perm`` with row ``i`` assigned to column ``perm[i]``. Among optimal
    matchings the lexicographically smallest ``perm`` is returned; costs within
    a relative 1e-10 of each other count as ties.
    """
    cost = check_square_cost(cost)
    perm, u, v = _shortest_augmenting_path(cost)
    n = cost.shape[0]
    reduced = cost - u[:, None] - v[None, :]
    tol = 1e-10 * n * (1.0 + np.abs(cost).max())
    tight = reduced <= tol
    tight[np.arange(n), perm] = True
    return _lexicographic_refine(perm, tight)


def assignment_cost(cost, perm):
    return float(np.asarray(cost)[np.arange(len(perm)), perm].sum())


def batch_ot_coupling(x0, x1):
    """Exact minibatch OT: targets re-ordered by the squared-distance assignment."""
    x0, x1 = check_pair(x0, x1)
    perm = hungarian_assign(squared_cost(x0, x1))
    return _plain(x0, x1[perm], "batch_ot", target_index=perm)


# -- entropic OT -----------------------------------------------------------------


class SinkhornResult(NamedTuple):
    plan: np.ndarray
    converged: bool
    n_iters: int
    marginal_error: float


def _row_lse(m):
    peak = m.max(axis=1)
    return peak + np.log(np.exp(m - peak[:, None]).sum(axis=1))


def sinkhorn(cost, reg=0.5, max_iters=1000, tol=1e-6, absorb_at=50.0):
    """Entropic OT plan between uniform marginals.

    Alternating row/column scalings ``u, v`` act on a kernel
    ``exp(f_i + g_j - C_ij / reg)``. When a scaling's log leaves
    ``[-absorb_at, absorb_at]`` it is folded into the log-potentials ``f, g``;
    when a kernel product underflows the iteration takes an exact log-sum-exp
    step instead. Stops once every row and column sum is within ``tol`` of
    ``1/n``; otherwise returns the last plan with ``converged=False``.
    """
    cost = check_square_cost(cost)
    if not reg > 0:
        raise ValueError(f"reg must be positive, got {reg}")
    n = cost.shape[0]
    a = 1.0 / n
    log_a = np.log(a)
    scaled = cost / reg
    # start with exact column sums; every later step keeps them exact, so the
    # convergence test only has to look at the rows
    f = -scaled.min(axis=1)
    g = log_a - _row_lse(f[None, :] - scaled.T)
    kernel = np.exp(f[:, None] + g[None, :] - scaled)
    u = np.ones(n)
    v = np.ones(n)
    err = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        kv = kernel @ v
        ktu = None
        if kv.min() > 1e-200:
            # columns are exact after each v-update, so only rows need checking
            err = float(np.abs(u * kv - a).max())
            if err < tol:
                break
            u = a / kv
            ktu = kernel.T @ u
        if ktu is not None and ktu.min() > 1e-200:
            v = a / ktu
            if max(np.abs(np.log(u)).max(), np.abs(np.log(v)).max()) <= absorb_at:
                continue
            f += np.log(u)
            g += np.log(v)
        else:
            f += np.log(u)
            g += np.log(v)
            f_new = log_a - _row_lse(g[None, :] - scaled)
            # row sums before this update are a * exp(f - f_new)
            err = a * float(np.abs(np.expm1(f - f_new)).max())
            if err >= tol:
                f = f_new
                g = log_a - _row_lse(f[None, :] - scaled.T)
        kernel = np.exp(f[:, None] + g[None, :] - scaled)
        u = np.ones(n)
        v = np.ones(n)
        if err < tol:
            break
    plan = u[:, None] * kernel * v[None, :]
    converged = bool(err < tol)
    err = max(
        float(np.abs(plan.sum(axis=1) - a).max()),
        float(np.abs(plan.sum(axis=0) - a).max()),
    )
    return SinkhornResult(plan, converged, it, err)


def sample_plan_rows(plan, rng):
    """One target index per source row, drawn from that row of ``plan``."""
    cdf = np.cumsum(plan, axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random(plan.shape[0])
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, plan.shape[1] - 1)


def _plan_coupling(x0, x1, cost, rng, reg, max_iters, tol, strategy):
    res = sinkhorn(cost, reg=reg, max_iters=max_iters, tol=tol)
    sampled = sample_plan_rows(res.plan, rng)  # always drawn, keeps the RNG stream aligned
    idx = sampled if res.converged else np.argmax(res.plan, axis=1)
    meta = {
        "sinkhorn_converged": bool(res.converged),
        "sinkhorn_iters": int(res.n_iters),
        "sinkhorn_fallback": not res.converged,
    }
    return _plain(x0, x1[idx], strategy, target_index=idx, meta=meta), res


def sinkhorn_coupling(x0, x1, rng, reg=0.5, max_iters=1000, tol=1e-6):
    """Entropic OT on squared distances, realised by per-row categorical sampling."""
    x0, x1 = check_pair(x0, x1)
    return _plan_coupling(x0, x1, squared_cost(x0, x1), rng, reg, max_iters, tol, "sinkhorn_ot")[0]


# -- model-aligned couplings -------------------------------------------------------


def _step_input(mode):
    if mode not in ERROR_MODES:
        raise ValueError(f"unknown error mode {mode!r}; expected one of {ERROR_MODES}")
    return 1.0 if mode == "d1" else 0.0


def endpoint_velocities(net, params, x0, x1, mode="endpoint"):
    d = _step_input(mode)
    return net(x0, 0.0, d, params=params), net(x1, 1.0, d, params=params)


def prediction_error_cost(net, params, x0, x1, mode="endpoint"):
    """Endpoint prediction error for all source/target pairs.

    ``C[i, j] = (||v(x0_i, 0) - D_ij||^2 + ||v(x1_j, 1) - D_ij||^2) / 2`` with
    ``D_ij = x1_j - x0_i``. Only 2n field evaluations are made. In ``"d1"`` mode
    the field is queried with step size 1.
    """
    x0, x1 = check_pair(x0, x1)
    v0, v1 = endpoint_velocities(net, params, x0, x1, mode)
    disp = x1[None, :, :] - x0[:, None, :]
    r0 = v0[:, None, :] - disp
    r1 = v1[None, :, :] - disp
    return 0.5 * (np.einsum("ijk,ijk->ij", r0, r0) + np.einsum("ijk,ijk->ij", r1, r1))


def pair_errors(net, params, x0, x1, mode="endpoint"):
    """Endpoint prediction error of the diagonal pairs (x0_i, x1_i)."""
    x0, x1 = check_pair(x0, x1)
    v0, v1 = endpoint_velocities(net, params, x0, x1, mode)
    disp = x1 - x0
    return 0.5 * (((v0 - disp) ** 2).sum(axis=1) + ((v1 - disp) ** 2).sum(axis=1))


def pair_errors_sampled_t(net, params, x0, x1, n_times, rng, d=0.0):
    """Diagnostic: mean of ``||v(x_t, t) - (x1 - x0)||^2`` over ``n_times`` uniform t."""
    x0, x1 = check_pair(x0, x1)
    disp = x1 - x0
    total = np.zeros(x0.shape[0])
    for t in rng.random(n_times):
        xt = (1.0 - t) * x0 + t * x1
        total += ((net(xt, t, d, params=params) - disp) ** 2).sum(axis=1)
    return total / n_times


def topk_count(k, n):
    """``floor(k * n)`` with a floor of one; a tiny epsilon absorbs products like 0.29 * 100."""
    k = check_fraction(k, "k")
    return max(1, min(n, math.floor(k * n + 1e-9)))


def select_topk(errors, k):
    """Mask of the ``floor(k n)`` smallest errors; ties go to the lowest index."""
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size == 0:
        raise ValueError("cannot select from an empty error list")
    order = np.argsort(errors, kind="stable")
    mask = np.zeros(errors.size, dtype=bool)
    mask[order[: topk_count(k, errors.size)]] = True
    return mask


def _weighted_selection(errors, k, lam, r):
    n = errors.size
    order = np.argsort(errors, kind="stable")
    n_sel = topk_count(k, n)
    selected = np.zeros(n, dtype=bool)
    selected[order[:n_sel]] = True
    one_step = np.zeros(n, dtype=bool)
    one_step[order[: math.floor(check_fraction(r, "r", allow_zero=True) * n_sel + 1e-9)]] = True
    weight = np.where(selected, 1.0 + lam, 1.0)
    return weight, selected, one_step


def mac_topk_coupling(net, params, x0, x1, k=0.3, lam=0.02, r=0.4, mode="endpoint"):
    """Keep the random diagonal pairing; up-weight its ``k`` fraction of easiest pairs.

    Selected pairs get weight ``1 + lam``; the ``floor(r * |selected|)`` lowest-error
    selected pairs are also flagged for one-step supervision.
    """
    if lam < 0:
        raise ValueError(f"lam must be non-negative, got {lam}")
    x0, x1 = check_pair(x0, x1)
    errors = pair_errors(net, params, x0, x1, mode)
    weight, selected, one_step = _weighted_selection(errors, k, lam, r)
    return CouplingBatch(
        x0, x1, weight, selected, one_step, strategy="mac_topk", meta={"pair_errors": errors}
    )


def mac_full_coupling(
    net, params, x0, x1, rng, reg=0.5, max_iters=1000, tol=1e-6, mode="endpoint",
    weighting=False, k=0.3, lam=0.02, r=0.4,
):
    """Re-pair the batch with an entropic plan over the prediction-error cost.

    Each source row draws its target from its plan row. If Sinkhorn does not
    converge the row-wise argmax is used and ``meta["sinkhorn_fallback"]`` is set.
    The realised pairs are ranked by their cost to pick the top-k set and its
    one-step subset, as in :func:`mac_topk_coupling`; the ``1 + lam`` weights
    are only applied with ``weighting``.
    """
    x0, x1 = check_pair(x0, x1)
    cost = prediction_error_cost(net, params, x0, x1, mode)
    coupling, _ = _plan_coupling(x0, x1, cost, rng, reg, max_iters, tol, "mac_full")
    errors = cost[np.arange(len(coupling)), coupling.target_index]
    weight, coupling.selected, coupling.one_step_supervised = _weighted_selection(errors, k, lam, r)
    if weighting:
        coupling.weight = weight
    coupling.meta["pair_errors"] = errors
    return coupling
