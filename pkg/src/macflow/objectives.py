"""Training losses: weighted flow matching and the shortcut (self-consistency) objective.

Each loss returns a :class:`LossBreakdown` and the gradient of ``total`` with
respect to the live network parameters. All terms are normalised by the batch
size ``B``, so per-pair weights act exactly like the soft weighting
``(1/B) sum_i w_i L_i``.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from ._validation import check_fraction, check_times


@dataclass
class LossBreakdown:
    total: float
    fm_term: float
    sc_term: float
    one_step_term: float
    selected_fraction: float

    def as_dict(self):
        return asdict(self)


def interpolate(x0, x1, t):
    """``(1 - t) x0 + t x1`` row-wise; ``t`` is a scalar or one value per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    t = check_times(t, x0.shape[0])[:, None]
    return (1.0 - t) * x0 + t * x1


@dataclass
class SelfConsistencyDraw:
    """Pairs that receive the bootstrap term.

    ``d`` is the teacher half-step (the student jumps ``2d``), ``t`` the start
    time with ``t + 2d <= 1``, and ``teacher_d`` the step-size input fed to the
    teacher: ``d`` itself, or 0 (the flow-matching field) when ``d`` is finer
    than the trained grid.
    """

    index: np.ndarray
    d: np.ndarray
    t: np.ndarray
    teacher_d: np.ndarray


def draw_self_consistency(rng, batch_size, m=0.125, d_grid=(0.125, 0.25, 0.5, 1.0)):
    """Pick ``floor(m B)`` random pairs, a student step ``2d`` from the grid each, and ``t``.

    ``t`` is uniform on ``[0, 1 - 2d]``.
    """
    m = check_fraction(m, "m", allow_zero=True)
    n_sc = math.floor(m * batch_size + 1e-9)
    grid = np.array(sorted(d_grid), dtype=np.float64)
    index = np.sort(rng.permutation(batch_size)[:n_sc])
    student = grid[rng.integers(0, grid.size, size=n_sc)]
    d = 0.5 * student
    t = rng.random(n_sc) * (1.0 - student)
    known = np.isclose(d[:, None], grid[None, :], rtol=0, atol=1e-12).any(axis=1)
    return SelfConsistencyDraw(index, d, t, np.where(known, d, 0.0))


def _squared_rows(r):
    return np.einsum("ij,ij->i", r, r)


def _finish(net, blocks, batch_size, selected_fraction):
    """Run one cached forward over stacked blocks, return breakdown and gradient.

    ``blocks`` maps term name to ``(x, t, d, target, weight)``.
    """
    names = [k for k, b in blocks.items() if b[0].shape[0]]
    x = np.concatenate([blocks[k][0] for k in names])
    t = np.concatenate([blocks[k][1] for k in names])
    d = np.concatenate([blocks[k][2] for k in names])
    target = np.concatenate([blocks[k][3] for k in names])
    weight = np.concatenate([blocks[k][4] for k in names])
    out = net.forward(x, t, d)
    resid = out - target
    per_row = weight * _squared_rows(resid) / batch_size
    terms = dict.fromkeys(blocks, 0.0)
    pos = 0
    for k in names:
        n = blocks[k][0].shape[0]
        terms[k] = float(per_row[pos:pos + n].sum())
        pos += n
    grads = net.backward((2.0 / batch_size) * weight[:, None] * resid)
    total = terms["fm"] + terms.get("sc", 0.0) + terms.get("one_step", 0.0)
    loss = LossBreakdown(
        total, terms["fm"], terms.get("sc", 0.0), terms.get("one_step", 0.0), selected_fraction
    )
    return loss, grads


def fm_loss(net, coupling, t):
    """Weighted linear-path flow matching, ``d`` input fixed to 0."""
    n = len(coupling)
    t = check_times(t, n)
    xt = interpolate(coupling.x0, coupling.x1, t)
    blocks = {"fm": (xt, t, np.zeros(n), coupling.x1 - coupling.x0, coupling.weight)}
    return _finish(net, blocks, n, coupling.selected_fraction)


def self_consistency_target(net, ema_params, xt, t, d, teacher_d=None):
    """Two EMA half-steps of size ``d``, averaged; carries no gradient.

    ``teacher_d`` is the step-size input of the teacher queries (defaults to ``d``).
    """
    teacher_d = d if teacher_d is None else teacher_d
    s1 = net(xt, t, teacher_d, params=ema_params)
    x_mid = xt + d[:, None] * s1
    s2 = net(x_mid, t + d, teacher_d, params=ema_params)
    return 0.5 * (s1 + s2)


def shortcut_loss(net, ema_params, coupling, t, sc_draw, one_step_t="sampled"):
    """Flow matching at ``d=0`` on every pair, self-consistency on ``sc_draw``,
    and a one-step (``d=1``) regression on ``coupling.one_step_supervised``.

    The flow-matching and self-consistency terms carry the coupling weights; the
    one-step term is unweighted. ``one_step_t="zero"`` evaluates it at ``t=0``
    instead of the pair's sampled time.
    """
    n = len(coupling)
    t = check_times(t, n)
    x0, x1 = coupling.x0, coupling.x1
    disp = x1 - x0
    blocks = {"fm": (interpolate(x0, x1, t), t, np.zeros(n), disp, coupling.weight)}

    idx = sc_draw.index
    xt_sc = interpolate(x0[idx], x1[idx], sc_draw.t)
    target_sc = self_consistency_target(
        net, ema_params, xt_sc, sc_draw.t, sc_draw.d, sc_draw.teacher_d
    )
    blocks["sc"] = (xt_sc, sc_draw.t, 2.0 * sc_draw.d, target_sc, coupling.weight[idx])

    one = np.flatnonzero(coupling.one_step_supervised)
    if one_step_t == "sampled":
        t_one = t[one]
    elif one_step_t == "zero":
        t_one = np.zeros(one.size)
    else:
        raise ValueError(f"one_step_t must be 'sampled' or 'zero', got {one_step_t!r}")
    blocks["one_step"] = (
        interpolate(x0[one], x1[one], t_one), t_one, np.ones(one.size), disp[one], np.ones(one.size)
    )
    return _finish(net, blocks, n, coupling.selected_fraction)
