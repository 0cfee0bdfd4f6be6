import math

import numpy as np
import pytest

from macflow.exceptions import NumericalAbort
from macflow.net import (
    AdamState, EmaParams, VectorFieldNet, adam_step, fourier_features, load_arrays, save_arrays,
)

from conftest import rel_err


def randomize_output(net, rng):
    W, b = net.layers()[-1]
    W[...] = rng.normal(scale=0.3, size=W.shape)
    b[...] = rng.normal(size=b.shape)


def test_zero_output_layer(rng):
    net = VectorFieldNet(rng=rng)
    x = rng.normal(size=(16, 2)) * 10
    assert np.all(net(x, rng.random(16), rng.random(16)) == 0.0)


def test_identical_rows(rng):
    net = VectorFieldNet(rng=rng)
    randomize_output(net, rng)
    out = net(np.tile([[0.3, -1.2]], (5, 1)), 0.4, 0.25)
    assert np.all(out == out[0])


def _slow_forward(net, x, t, d):
    """Row-by-row forward using math and python loops only."""
    out = []
    for row in range(x.shape[0]):
        h = list(x[row])
        for s in (t[row], d[row]):
            h += [math.sin(k * math.pi * s) for k in range(1, net.n_features + 1)]
            h += [math.cos(k * math.pi * s) for k in range(1, net.n_features + 1)]
        layers = net.layers()
        for li, (W, b) in enumerate(layers):
            z = [sum(h[i] * W[i, j] for i in range(len(h))) + b[j] for j in range(W.shape[1])]
            if li < len(layers) - 1:
                z = [v / (1.0 + math.exp(-v)) for v in z]
            h = z
        out.append(h)
    return np.array(out)


def test_forward_matches_slow_oracle(rng):
    net = VectorFieldNet(hidden_width=24, hidden_layers=2, n_features=3, rng=rng)
    randomize_output(net, rng)
    x, t, d = rng.normal(size=(4, 2)), rng.random(4), rng.random(4)
    assert np.max(np.abs(net(x, t, d) - _slow_forward(net, x, t, d))) < 1e-12


def test_forward_matches_call(rng):
    net = VectorFieldNet(rng=rng)
    randomize_output(net, rng)
    x, t = rng.normal(size=(8, 2)), rng.random(8)
    assert np.array_equal(net.forward(x, t, 0.5), net(x, t, 0.5))


def test_field_is_nonlinear(rng):
    net = VectorFieldNet(rng=rng)
    randomize_output(net, rng)
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    assert not np.allclose(net(a + b, 0.3), net(a, 0.3) + net(b, 0.3))


def test_fourier_features():
    f = fourier_features(np.array([0.0, 0.5]), 2)
    assert np.allclose(f, [[0, 0, 1, 1], [1, 0, 0, -1]], atol=1e-15)


def test_zero_loss_zero_gradient(rng):
    net = VectorFieldNet(rng=rng)
    randomize_output(net, rng)
    net.forward(rng.normal(size=(6, 2)), rng.random(6))
    assert np.all(net.backward(np.zeros((6, 2))) == 0.0)


def test_linear_layer_closed_form(rng):
    net = VectorFieldNet(hidden_layers=0, n_features=2, rng=rng)
    randomize_output(net, rng)
    B = 9
    x, t, y = rng.normal(size=(B, 2)), rng.random(B), rng.normal(size=(B, 2))
    X = net.embed(x, t, 0.0)
    W, b = net.layers()[-1]
    resid = X @ W + b - y
    out = net.forward(x, t, 0.0)
    grads = net.backward(2.0 / B * (out - y))
    gW, gb = net.layers(grads)[0]
    assert np.allclose(gW, X.T @ resid * 2.0 / B, rtol=0, atol=1e-13)
    assert np.allclose(gb, resid.sum(axis=0) * 2.0 / B, rtol=0, atol=1e-13)


def test_finite_differences_full_network(rng):
    net = VectorFieldNet(rng=rng)
    randomize_output(net, rng)
    x, t, d = rng.normal(size=(8, 2)) * 3, rng.random(8), rng.random(8)
    y = rng.normal(size=(8, 2))

    def loss(p):
        return float(((net(x, t, d, params=p) - y) ** 2).sum())

    out = net.forward(x, t, d)
    grads = net.backward(2.0 * (out - y))
    h = 1e-5
    for i in rng.choice(net.n_params, size=100, replace=False):
        p = net.params.copy()
        p[i] += h
        up = loss(p)
        p[i] -= 2 * h
        fd = (up - loss(p)) / (2 * h)
        assert rel_err(grads[i], fd) < 1e-4, i


def test_backward_needs_forward(rng):
    net = VectorFieldNet(rng=rng)
    with pytest.raises(RuntimeError):
        net.backward(np.zeros((1, 2)))
    net.forward(np.zeros((1, 2)), 0.0)
    net.backward(np.zeros((1, 2)))
    with pytest.raises(RuntimeError):
        net.backward(np.zeros((1, 2)))


def test_shape_mismatch(rng):
    net = VectorFieldNet(rng=rng)
    with pytest.raises(ValueError):
        net(np.zeros((3, 3)), 0.0)
    with pytest.raises(ValueError):
        net(np.zeros((3, 2)), 0.0, params=np.zeros(5))
    net.forward(np.zeros((3, 2)), 0.0)
    with pytest.raises(ValueError):
        net.backward(np.zeros((2, 2)))


def test_default_architecture():
    net = VectorFieldNet()
    assert [s[1] for s in net.shapes] == [128, 128, 128, 2]
    assert net.shapes[0][0] == 2 + 4 * 8


def test_adam_zero_gradient():
    p = np.array([1.0, -2.0])
    state = AdamState.zeros_like(p, lr=5e-4)
    adam_step(p, np.zeros(2), state)
    assert np.array_equal(p, [1.0, -2.0]) and state.step == 1


def test_adam_constant_gradient_sign():
    p = np.zeros(3)
    state = AdamState.zeros_like(p, lr=5e-4)
    g = np.array([3.0, -0.02, 40.0])
    for _ in range(2000):
        before = p.copy()
        adam_step(p, g, state)
    assert np.allclose(before - p, 5e-4 * np.sign(g), rtol=1e-5)


def test_adam_scalar_trace():
    lr, b1, b2, eps = 5e-4, 0.9, 0.999, 1e-8
    grads = [0.3, -1.1, 2.5, 0.0, 0.7, -0.2, 1e-3, 4.0, -3.0, 0.5]
    p = np.array([0.25])
    state = AdamState.zeros_like(p, lr=lr)
    theta, m, v = 0.25, 0.0, 0.0
    for step, g in enumerate(grads, 1):
        adam_step(p, np.array([g]), state)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** step)) / (math.sqrt(v / (1 - b2 ** step)) + eps)
        assert abs(p[0] - theta) < 1e-12
    assert state.step == 10


def test_adam_rejects_non_finite():
    p = np.ones(3)
    state = AdamState.zeros_like(p)
    with pytest.raises(NumericalAbort):
        adam_step(p, np.array([0.0, np.nan, 1.0]), state)
    assert np.array_equal(p, np.ones(3)) and state.step == 0


def test_ema_decay_zero_copies():
    ema = EmaParams.from_params(np.zeros(4), decay=0.0)
    live = np.arange(4.0)
    ema.update(live)
    assert np.array_equal(ema.shadow, live)


def test_ema_geometric_convergence():
    ema = EmaParams.from_params(np.zeros(1), decay=0.9)
    gaps = []
    for _ in range(20):
        ema.update(np.ones(1))
        gaps.append(1.0 - ema.shadow[0])
    assert np.allclose(np.array(gaps[1:]) / np.array(gaps[:-1]), 0.9, rtol=1e-10)


def test_ema_scalar_trace():
    ema = EmaParams.from_params(np.array([0.5]), decay=0.999)
    s = 0.5
    for live in (1.0, -2.0, 3.5, 0.0, 10.0):
        ema.update(np.array([live]))
        s = 0.999 * s + (1 - 0.999) * live
        assert abs(ema.shadow[0] - s) < 1e-15


def test_ema_is_a_copy():
    live = np.ones(3)
    ema = EmaParams.from_params(live)
    live += 1
    assert np.all(ema.shadow == 1)
    with pytest.raises(ValueError):
        ema.update(np.ones(2))


def test_checkpoint_arrays_roundtrip(tmp_path, rng):
    arrays = {"a": rng.normal(size=(3, 4)), "b": np.array([np.pi]), "c": rng.normal(size=7)}
    save_arrays(tmp_path / "x.ckpt", arrays, {"step": 5, "note": "hi"})
    back, meta = load_arrays(tmp_path / "x.ckpt")
    assert meta == {"step": 5, "note": "hi"}
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes() and back[k].shape == arrays[k].shape


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"nope\n")
    with pytest.raises(ValueError):
        load_arrays(tmp_path / "bad")
