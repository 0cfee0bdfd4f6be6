import warnings

import numpy as np
import pytest

from macflow.exceptions import NumericalAbort
from macflow.sampler import GridExtrapolationWarning, euler_sample, generate, shortcut_sample


class Field:
    """Callable with the network signature, backed by a plain function."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = []

    def __call__(self, x, t, d=0.0, params=None):
        self.calls.append((t, d))
        return self.fn(x, t, d)


def constant(c):
    return Field(lambda x, t, d: np.broadcast_to(np.asarray(c, float), x.shape).copy())


@pytest.mark.parametrize("n", [1, 2, 3, 7, 64, 128])
def test_constant_field_endpoint(rng, n):
    x0 = rng.normal(size=(5, 2))
    end, _ = euler_sample(constant([0.5, -2.0]), x0, n)
    assert np.max(np.abs(end - (x0 + [0.5, -2.0]))) < 1e-12


def test_powers_of_two_are_exact():
    x0 = np.array([[0.25, -1.5]])
    for n in (1, 2, 4, 8, 128):
        end, _ = euler_sample(constant([0.5, -2.0]), x0, n)
        assert end.tolist() == [[0.75, -3.5]]


def test_single_step(rng):
    field = Field(lambda x, t, d: np.sin(x) + t)
    x0 = rng.normal(size=(4, 2))
    end, traj = euler_sample(field, x0, 1)
    assert np.array_equal(end, x0 + np.sin(x0))
    assert traj.shape == (2, 4, 2)


def test_linear_decay_matches_exponential():
    x0 = np.array([[1.0, -2.0], [3.0, 0.5]])
    end, _ = euler_sample(Field(lambda x, t, d: -x), x0, 10_000)
    assert np.max(np.abs(end - x0 * np.exp(-1))) < 1e-3


def test_trajectory_bookkeeping(rng):
    x0 = rng.normal(size=(3, 2))
    field = Field(lambda x, t, d: np.cos(3 * x) * (1 + t))
    end, traj = euler_sample(field, x0, 16)
    assert traj.shape == (17, 3, 2)
    assert np.array_equal(traj[0], x0) and np.array_equal(traj[-1], end)
    assert np.max(np.abs(np.diff(traj, axis=0).sum(axis=0) - (end - x0))) < 1e-12
    assert [t for t, _ in field.calls] == [k / 16 for k in range(16)]
    assert all(d == 0.0 for _, d in field.calls)


def test_shortcut_one_step(rng):
    field = Field(lambda x, t, d: x * d + 1.0)
    x0 = rng.normal(size=(4, 2))
    end, _ = shortcut_sample(field, x0, 1, d_grid=(0.25, 0.5, 1.0))
    assert np.array_equal(end, x0 + (x0 * 1.0 + 1.0))
    assert field.calls == [(0.0, 1.0)]


@pytest.mark.parametrize("n", [1, 2, 4, 8])
def test_shortcut_constant_field(rng, n):
    x0 = rng.normal(size=(6, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        end, _ = shortcut_sample(constant([1.0, 3.0]), x0, n, d_grid=(0.125, 0.25, 0.5, 1.0))
    assert np.max(np.abs(end - (x0 + [1.0, 3.0]))) < 1e-12


def test_shortcut_off_grid_warns(rng):
    field = constant([0.0, 1.0])
    with pytest.warns(GridExtrapolationWarning):
        end, _ = shortcut_sample(field, np.zeros((1, 2)), 3, d_grid=(0.25, 0.5, 1.0))
    assert np.allclose(end, [[0.0, 1.0]])
    assert all(d == 1 / 3 for _, d in field.calls)


def test_generate_dispatch():
    grid = (0.125, 0.25, 0.5, 1.0)
    for n, shortcut, want in [(1, True, 1.0), (4, True, 0.25), (128, True, 0.0), (4, False, 0.0)]:
        field = constant([0.0, 0.0])
        generate(field, np.zeros((1, 2)), n, shortcut=shortcut, d_grid=grid)
        assert {d for _, d in field.calls} == {want}


def test_non_finite_state_aborts():
    field = Field(lambda x, t, d: np.where(t > 0.4, np.inf, 1.0) * np.ones_like(x))
    with pytest.raises(NumericalAbort) as info:
        euler_sample(field, np.zeros((2, 2)), 4)
    assert info.value.payload["step"] == 2


@pytest.mark.parametrize("n", [0, -1, 2.5])
def test_bad_step_count(n):
    with pytest.raises(ValueError):
        euler_sample(constant([0.0, 0.0]), np.zeros((1, 2)), n)
