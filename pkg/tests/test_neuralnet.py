import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from canfuse import neuralnet as nn
from canfuse.errors import EmptyInput, KernelLargerThanInput, ShapeMismatch


# ---------------------------------------------------------------------------
# loop-nest reference implementations
# ---------------------------------------------------------------------------

def dense_ref(x, W, b):
    out = np.zeros(W.shape[0])
    for j in range(W.shape[0]):
        acc = b[j]
        for i in range(W.shape[1]):
            acc += W[j, i] * x[i]
        out[j] = acc
    return out


def conv_ref(x, k, b, stride):
    h, w, _ = x.shape
    c_out, kh, kw, c_in = k.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((ho, wo, c_out))
    for oy in range(ho):
        for ox in range(wo):
            for o in range(c_out):
                acc = b[o]
                for i in range(kh):
                    for j in range(kw):
                        for c in range(c_in):
                            acc += k[o, i, j, c] * x[oy * stride + i, ox * stride + j, c]
                out[oy, ox, o] = acc
    return out


def test_dense_examples():
    x = np.array([1.0, 2.0])
    assert np.array_equal(nn.dense_forward(x, np.eye(2), np.zeros(2)), x)
    assert nn.dense_forward(x, np.array([[1.0, 1.0]]), np.array([0.5])).tolist() == [3.5]
    with pytest.raises(ShapeMismatch):
        nn.dense_forward(x, np.ones((3, 3)), np.zeros(3))


@pytest.mark.parametrize("seed", range(3))
def test_dense_matches_loops(seed):
    rng = np.random.default_rng(seed)
    x, W, b = rng.normal(size=3), rng.normal(size=(4, 3)), rng.normal(size=4)
    assert np.allclose(nn.dense_forward(x, W, b), dense_ref(x, W, b), rtol=1e-12, atol=1e-12)


def test_conv_examples():
    x = np.random.default_rng(0).random((5, 5, 1))
    assert np.allclose(nn.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1), 1), x)
    ones = nn.conv2d_forward(np.ones((5, 5, 1)), np.ones((1, 3, 3, 1)), np.zeros(1), 1)
    assert ones.shape == (3, 3, 1) and np.all(ones == 9.0)
    assert nn.conv2d_forward(x, np.ones((1, 3, 3, 1)), np.zeros(1), 2).shape == (2, 2, 1)
    with pytest.raises(KernelLargerThanInput):
        nn.conv2d_forward(x, np.ones((1, 6, 6, 1)), np.zeros(1), 1)
    with pytest.raises(ShapeMismatch):
        nn.conv2d_forward(x, np.ones((1, 3, 3, 2)), np.zeros(1), 1)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 4), st.integers(1, 3),
       st.integers(1, 3), st.integers(1, 2), st.integers(0, 2**31))
def test_conv_matches_loops(h, w, c_in, c_out, k, stride, seed):
    if k > h or k > w:
        return
    rng = np.random.default_rng(seed)
    x, K, b = rng.normal(size=(h, w, c_in)), rng.normal(size=(c_out, k, k, c_in)), rng.normal(size=c_out)
    got = nn.conv2d_forward(x, K, b, stride)
    ref = conv_ref(x, K, b, stride)
    assert np.allclose(got, ref, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(ref).max()))


def test_relu():
    assert nn.relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    assert np.all(nn.relu(-np.arange(1, 5.0)) == 0)
    x = np.arange(5.0)
    assert np.array_equal(nn.relu(x), x)


def test_mse_rmse_examples():
    assert nn.mse([0, 0], [3, 4]) == 12.5
    assert nn.rmse([0, 0], [3, 4]) == pytest.approx(3.5355339, abs=1e-7)
    assert nn.mse([1, 2], [1, 2]) == 0 and nn.rmse([1, 2], [1, 2]) == 0
    with pytest.raises(EmptyInput):
        nn.mse([], [])
    with pytest.raises(ShapeMismatch):
        nn.mse([1, 2], [1])


@given(st.integers(0, 2**31), st.integers(1, 50))
def test_mse_properties(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=n), rng.normal(size=n)
    m = nn.mse(a, b)
    assert m >= 0
    assert nn.mse(b + 2 * (a - b), b) == pytest.approx(4 * m, rel=1e-12)
    assert nn.rmse(a, b) == nn.rmse(b, a)
    assert nn.rmse(a, b) ** 2 == pytest.approx(m, rel=1e-12)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_single_dense_closed_form():
    rng = np.random.default_rng(1)
    layer = nn.Dense(3, 1, rng=rng)
    net = nn.Sequential([layer])
    x = rng.normal(size=(1, 3))
    y = np.array([0.7])
    g = nn.backward(net, x, y)
    yhat = float(net.forward(x)[0, 0])
    assert np.allclose(g.params[0], 2 * (yhat - 0.7) * x, rtol=1e-12)
    assert np.allclose(g.params[1], [2 * (yhat - 0.7)], rtol=1e-12)


def test_zero_residual_zero_gradient():
    rng = np.random.default_rng(2)
    net = nn.Sequential([nn.Dense(4, 3, rng=rng), nn.ReLU(), nn.Dense(3, 1, rng=rng)])
    x = rng.normal(size=(5, 4))
    g = nn.backward(net, x, net.forward(x).ravel())
    assert all(np.all(p == 0) for p in g.params)
    assert np.all(g.inputs[0] == 0)


def test_grad_check_linear_model_is_exact():
    rng = np.random.default_rng(3)
    net = nn.Sequential([nn.Dense(4, 1, rng=rng)])
    rep = nn.grad_check(net, rng.normal(size=(6, 4)), rng.normal(size=6), h=1e-4, rtol=1e-9)
    assert rep.passed, rep


def test_grad_check_finds_planted_fault():
    rng = np.random.default_rng(4)
    net = nn.Sequential([nn.Dense(4, 3, rng=rng), nn.ReLU(), nn.Dense(3, 1, rng=rng)])
    x, y = rng.normal(size=(6, 4)), rng.normal(size=6)
    grads = nn.backward(net, x, y).params
    grads[2] = grads[2].copy()
    grads[2].flat[1] *= 2.0
    rep = nn.grad_check(net, x, y, analytic=grads)
    assert not rep.passed
    assert (rep.worst_param, rep.worst_index) == (2, 1)


@pytest.mark.parametrize("layer_factory, in_shape", [
    (lambda rng: nn.Dense(5, 3, rng=rng), (5,)),
    (lambda rng: nn.Conv2D(2, 3, 3, 1, rng=rng), (7, 8, 2)),
    (lambda rng: nn.Conv2D(2, 3, 5, 2, rng=rng), (11, 12, 2)),
    (lambda rng: nn.ReLU(), (6,)),
    (lambda rng: nn.Normalize(), (6,)),
])
def test_each_layer_passes_grad_check(layer_factory, in_shape):
    rng = np.random.default_rng(7)
    layer = layer_factory(rng)
    out_shape = layer.output_shape(in_shape)
    readout = nn.Dense(int(np.prod(out_shape)), 1, rng=rng)
    layers = [layer] + ([nn.Flatten()] if len(out_shape) > 1 else []) + [readout]
    net = nn.Sequential(layers)
    x = rng.normal(size=(3,) + in_shape)
    y = rng.normal(size=3)
    rep = nn.grad_check(net, x, y, h=1e-4, rtol=1e-4)
    assert rep.passed, rep
    # input gradient against central differences too
    g = nn.backward(net, x, y).inputs[0]
    for idx in [(0,) + tuple(0 for _ in in_shape), (2,) + tuple(d - 1 for d in in_shape)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += 1e-5
        xm[idx] -= 1e-5
        num = (nn.loss_of(net, xp, y) - nn.loss_of(net, xm, y)) / 2e-5
        assert g[idx] == pytest.approx(num, rel=1e-4, abs=1e-9)


def test_grad_check_skips_kink_crossings_only():
    first = nn.Dense(1, 1)
    first.params[0][:] = 1.0
    first.params[1][:] = 3e-5           # pre-activation sits inside +-h of the kink
    last = nn.Dense(1, 1)
    last.params[0][:] = 2.0
    net = nn.Sequential([first, nn.ReLU(), last])
    x, y = np.zeros((1, 1)), np.array([1.0])
    strict = nn.grad_check(net, x, y, h=1e-4, rtol=1e-4, skip_kinks=False)
    assert not strict.passed
    rep = nn.grad_check(net, x, y, h=1e-4, rtol=1e-4)
    # x = 0, so only the first bias moves the pre-activation
    assert rep.passed and rep.n_skipped == 1 and rep.n_checked == 3


def test_relu_layers_walks_composites():
    net = nn.Sequential([nn.Dense(2, 2), nn.ReLU(), nn.Sequential([nn.ReLU(), nn.Flatten()])])
    assert len(nn.relu_layers(net)) == 2


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_identity():
    p = [np.array([1.0, -2.0])]
    st_ = nn.AdamState.for_params(p)
    nn.adam_step(p, [np.zeros(2)], st_)
    assert p[0].tolist() == [1.0, -2.0]
    assert st_.t == 1


def test_adam_first_step_hand_value():
    p = [np.array([1.0])]
    st_ = nn.AdamState.for_params(p, lr=1e-4)
    nn.adam_step(p, [np.array([1.0])], st_)
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert p[0][0] == pytest.approx(1.0 - 1e-4 / (1.0 + 1e-8), abs=1e-15)


def test_adam_quadratic_descends():
    p = [np.array([1.0])]
    st_ = nn.AdamState.for_params(p, lr=1e-4)
    losses = [p[0][0] ** 2]
    for _ in range(10):
        nn.adam_step(p, [2 * p[0]], st_)
        losses.append(p[0][0] ** 2)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_lr_zero_keeps_params_but_updates_moments():
    p = [np.array([0.5, 0.25])]
    st_ = nn.AdamState.for_params(p, lr=0.0)
    nn.adam_step(p, [np.array([1.0, -3.0])], st_)
    assert p[0].tolist() == [0.5, 0.25]
    assert st_.m[0].tolist() == pytest.approx([0.1, -0.3])
    assert np.all(st_.v[0] >= 0)


def test_adam_shape_mismatch():
    p = [np.zeros(3)]
    with pytest.raises(ShapeMismatch):
        nn.adam_step(p, [np.zeros(2)], nn.AdamState.for_params(p))


def test_training_is_bit_deterministic():
    def run():
        rng = np.random.default_rng(9)
        net = nn.Sequential([nn.Dense(3, 4, rng=rng), nn.ReLU(), nn.Dense(4, 1, rng=rng)])
        st_ = nn.AdamState.for_params(net.params, lr=1e-2)
        x, y = rng.normal(size=(8, 3)), rng.normal(size=8)
        for _ in range(25):
            nn.adam_step(net.params, nn.backward(net, x, y).params, st_)
        return np.concatenate([p.ravel() for p in net.params])
    assert np.array_equal(run(), run())


def test_checkpoint_round_trip():
    rng = np.random.default_rng(0)
    params = [rng.normal(size=(3, 2)), rng.normal(size=4), np.array(2.5)]
    state = nn.AdamState.for_params(params, lr=3e-4)
    nn.adam_step(params, [np.ones_like(p) for p in params], state)
    buf = io.BytesIO()
    nn.write_checkpoint(buf, params, state)
    assert buf.getvalue().startswith(b"CFNN1\n")
    back, st2 = nn.read_checkpoint(io.BytesIO(buf.getvalue()))
    assert all(np.array_equal(a, b) for a, b in zip(params, back))
    assert (st2.lr, st2.t) == (3e-4, 1)
    assert all(np.array_equal(a, b) for a, b in zip(state.v, st2.v))
