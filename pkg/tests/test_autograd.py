import numpy as np
import pytest

from mrunet import ops
from mrunet.gradcheck import check_gradients
from mrunet.optim import Adam, adam_step
from mrunet.tensor import Tensor, add_n, center_crop_half, concat, mean, no_grad, relu

SEEDS = range(5)


def naive_conv3d(x, w, b, stride=1, pad=0):
    n, cin, *sp = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3)
    out_sp = [(s + 2 * pad - k) // stride + 1 for s in sp]
    out = np.zeros((n, cout, *out_sp))
    for i in range(n):
        for o in range(cout):
            for d in range(out_sp[0]):
                for h in range(out_sp[1]):
                    for v in range(out_sp[2]):
                        acc = b[o]
                        for c in range(cin):
                            for a in range(k):
                                for e in range(k):
                                    for f in range(k):
                                        acc += w[o, c, a, e, f] * xp[i, c, d * stride + a, h * stride + e, v * stride + f]
                        out[i, o, d, h, v] = acc
    return out


# -- conv3d ------------------------------------------------------------------------

def test_conv3d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 1, 4, 4, 4)).astype(np.float32)
    w = np.ones((1, 1, 1, 1, 1), np.float32)
    out = ops.conv3d(Tensor(x), Tensor(w)).data
    np.testing.assert_array_equal(out, x)


def test_conv3d_ones_kernel_on_constant_input():
    x = np.ones((1, 1, 5, 5, 5))
    w = np.ones((1, 1, 3, 3, 3))
    out = ops.conv3d(Tensor(x), Tensor(w), Tensor(np.zeros(1)), padding=1).data
    expected = naive_conv3d(x, w, np.zeros(1), pad=1)
    np.testing.assert_array_equal(out, expected)
    assert np.all(out[0, 0, 1:-1, 1:-1, 1:-1] == 27)
    assert out[0, 0, 0, 0, 0] == 8


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv3d_matches_direct_loops(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 2, 5, 4, 6))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    out = ops.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    ref = naive_conv3d(x, w, b, stride, pad)
    assert out.shape == ref.shape
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-12)


def test_conv3d_output_size_formula():
    x = Tensor(np.zeros((1, 1, 9, 8, 7)))
    w = Tensor(np.zeros((1, 1, 3, 3, 3)))
    for stride in (1, 2, 3):
        for pad in (0, 1, 2):
            out = ops.conv3d(x, w, stride=stride, padding=pad)
            assert out.shape[2:] == tuple((s + 2 * pad - 3) // stride + 1 for s in (9, 8, 7))


def test_conv3d_channel_mismatch():
    with pytest.raises(ValueError, match="channel mismatch"):
        ops.conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((1, 3, 3, 3, 3))))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv3d_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 4, 4, 4))
    w = rng.standard_normal((2, 2, 3, 3, 3))
    b = rng.standard_normal(2)
    errs = check_gradients(lambda x, w, b: ops.conv3d(x, w, b, padding=1), [x, w, b], seed=seed)
    assert max(errs) < 1e-4


def test_conv3d_strided_gradients():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 1, 4, 4, 4))
    w = rng.standard_normal((2, 1, 2, 2, 2))
    errs = check_gradients(lambda x, w: ops.conv3d(x, w, stride=2), [x, w], seed=7)
    assert max(errs) < 1e-4


# -- transposed convolution ----------------------------------------------------------

def test_conv_transpose_ones_kernel_paints_block():
    x = np.full((1, 1, 1, 1, 1), 2.5)
    w = np.ones((1, 1, 2, 2, 2))
    out = ops.conv_transpose3d(Tensor(x), Tensor(w), stride=2).data
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2, 2), 2.5))


def test_conv_transpose_zero_input():
    rng = np.random.default_rng(0)
    out = ops.conv_transpose3d(Tensor(np.zeros((2, 3, 2, 2, 2))), Tensor(rng.standard_normal((3, 4, 2, 2, 2)))).data
    assert out.shape == (2, 4, 4, 4, 4)
    assert not out.any()


def test_conv_transpose_is_adjoint_of_strided_conv():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((3, 2, 2, 2, 2))  # (Cin of transpose, Cout of transpose, ...)
    x = rng.standard_normal((2, 3, 2, 3, 2))
    y = rng.standard_normal((2, 2, 4, 6, 4))
    up = ops.conv_transpose3d(Tensor(x), Tensor(w), stride=2).data
    # conv3d weight is (Cout, Cin, ...) = (3, 2, ...): the same array
    down = ops.conv3d(Tensor(y), Tensor(w), stride=2).data
    assert np.isclose((up * y).sum(), (x * down).sum(), rtol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_transpose_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 2, 2, 2))
    w = rng.standard_normal((2, 3, 2, 2, 2))
    b = rng.standard_normal(3)
    errs = check_gradients(lambda x, w, b: ops.conv_transpose3d(x, w, b), [x, w, b], seed=seed)
    assert max(errs) < 1e-4


# -- pooling ---------------------------------------------------------------------------

def test_avg_pool_block_mean():
    x = np.arange(8, dtype=np.float64).reshape(1, 1, 2, 2, 2)
    out = ops.avg_pool3d(Tensor(x), 2).data
    assert out.shape == (1, 1, 1, 1, 1)
    assert out.item() == np.mean(np.arange(8))  # 3.5


def test_avg_pool_constant():
    out = ops.avg_pool3d(Tensor(np.full((1, 2, 8, 8, 8), 7.0)), 4).data
    assert out.shape == (1, 2, 2, 2, 2)
    assert np.all(out == 7.0)


def test_avg_pool_overlapping_matches_brute_force():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 1, 5, 5, 5))
    out = ops.avg_pool3d(Tensor(x), 3, 1).data
    ref = np.array([[[[x[0, 0, i:i + 3, j:j + 3, l:l + 3].mean() for l in range(3)] for j in range(3)] for i in range(3)]])
    np.testing.assert_allclose(out[0], ref, rtol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("k,stride", [(2, 2), (3, 1)])
def test_avg_pool_gradients(seed, k, stride):
    x = np.random.default_rng(seed).standard_normal((1, 2, 4, 4, 4))
    assert max(check_gradients(lambda x: ops.avg_pool3d(x, k, stride), [x], seed=seed)) < 1e-4


def test_max_pool_values():
    x = np.random.default_rng(0).permutation(8).astype(float).reshape(1, 1, 2, 2, 2)
    assert ops.max_pool3d(Tensor(x)).data.item() == 7
    c = ops.max_pool3d(Tensor(np.full((1, 1, 4, 4, 4), 3.0))).data
    assert c.shape == (1, 1, 2, 2, 2) and np.all(c == 3.0)


def test_max_pool_gradient_routes_to_argmax():
    x = np.random.default_rng(0).permutation(8).astype(float).reshape(1, 1, 2, 2, 2)
    t = Tensor(x, requires_grad=True)
    ops.max_pool3d(t).sum().backward()
    expected = (x == 7).astype(float)
    np.testing.assert_array_equal(t.grad, expected)


@pytest.mark.parametrize("seed", SEEDS)
def test_max_pool_gradients(seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, 4, 4, 4))
    assert max(check_gradients(lambda x: ops.max_pool3d(x), [x], seed=seed)) < 1e-4


# -- elementwise, concat, crop -------------------------------------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_relu_gradients(seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, 4, 4, 4))
    assert max(check_gradients(relu, [x], seed=seed)) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_concat_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((1, 2, 4, 4, 4)), rng.standard_normal((1, 3, 4, 4, 4))
    assert max(check_gradients(lambda a, b: concat([a, b]), [a, b], seed=seed)) < 1e-4


def test_center_crop_half_offsets():
    x = np.zeros((1, 1, 64, 64, 64))
    x[0, 0, 16, 16, 16] = 1.0
    out = center_crop_half(Tensor(x)).data
    assert out.shape == (1, 1, 32, 32, 32)
    assert out[0, 0, 0, 0, 0] == 1.0 and out.sum() == 1.0


def test_center_crop_half_coordinate_coded():
    i, j, l = np.meshgrid(np.arange(4), np.arange(4), np.arange(4), indexing="ij")
    coded = (100 * i + 10 * j + l).astype(float)[None, None]
    out = center_crop_half(Tensor(coded)).data[0, 0]
    for a in range(2):
        for b in range(2):
            for c in range(2):
                assert out[a, b, c] == 100 * (a + 1) + 10 * (b + 1) + (c + 1)


def test_center_crop_half_gradient_scatter():
    t = Tensor(np.ones((1, 1, 4, 4, 4)), requires_grad=True)
    center_crop_half(t).sum().backward()
    expected = np.zeros((4, 4, 4))
    expected[1:3, 1:3, 1:3] = 1
    np.testing.assert_array_equal(t.grad[0, 0], expected)


def test_center_crop_half_rejects_odd():
    with pytest.raises(ValueError):
        center_crop_half(Tensor(np.zeros((1, 1, 5, 4, 4))))


@pytest.mark.parametrize("seed", SEEDS)
def test_center_crop_gradients(seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, 4, 4, 4))
    assert max(check_gradients(center_crop_half, [x], seed=seed)) < 1e-4


# -- normalization and softmax ----------------------------------------------------------------

def test_instance_norm_moments():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4, 4)) * 5 + 2
    y = ops.instance_norm(Tensor(x)).data
    assert np.abs(y.mean(axis=(2, 3, 4))).max() < 1e-5
    assert np.abs(y.var(axis=(2, 3, 4)) - 1).max() < 1e-4


def test_instance_norm_constant_channel():
    y = ops.instance_norm(Tensor(np.full((1, 1, 4, 4, 4), 3.0))).data
    assert np.all(np.isfinite(y)) and np.all(y == 0)


@pytest.mark.parametrize("seed", SEEDS)
def test_instance_norm_gradients(seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, 4, 4, 4))
    assert max(check_gradients(ops.instance_norm, [x], seed=seed)) < 1e-4


def test_softmax_sums_to_one():
    x = np.random.default_rng(0).standard_normal((2, 5, 3, 3, 3)) * 10
    p = ops.softmax_channels(Tensor(x)).data
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-6
    u = ops.softmax_channels(Tensor(np.zeros((1, 4, 2, 2, 2)))).data
    np.testing.assert_allclose(u, 0.25)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_gradients(seed):
    x = np.random.default_rng(seed).standard_normal((1, 3, 4, 4, 4))
    assert max(check_gradients(ops.softmax_channels, [x], seed=seed)) < 1e-4


# -- graph mechanics ----------------------------------------------------------------------

def test_shared_subexpression_accumulates():
    t = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    r = relu(t)
    add_n([r.sum(), r.sum(), mean(t)]).backward()
    np.testing.assert_allclose(t.grad, [2 + 1 / 3, 1 / 3, 2 + 1 / 3])


def test_backward_twice_raises():
    t = Tensor(np.ones(3), requires_grad=True)
    out = relu(t).sum()
    out.backward()
    with pytest.raises(RuntimeError):
        out.backward()


def test_no_grad_builds_no_graph():
    t = Tensor(np.ones((1, 1, 2, 2, 2)), requires_grad=True)
    with no_grad():
        out = ops.max_pool3d(relu(t))
    assert out._backward is None


def test_forward_determinism():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3, 3)).astype(np.float32)
    a = ops.conv3d(Tensor(x), Tensor(w), padding=1).data
    b = ops.conv3d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


# -- Adam ---------------------------------------------------------------------------------

def test_adam_single_step_hand_computed():
    p = np.array([1.0])
    m, v = np.zeros(1), np.zeros(1)
    lr, b1, b2, eps = 0.001, 0.9, 0.999, 1e-8
    adam_step(p, np.array([1.0]), m, v, 1, lr, b1, b2, eps)
    # m_hat = 1, v_hat = 1 after bias correction
    assert p[0] == pytest.approx(1.0 - lr * 1.0 / (1.0 + eps), abs=1e-15)
    assert m[0] == pytest.approx(0.1) and v[0] == pytest.approx(0.001)


def test_adam_zero_gradient_leaves_param():
    t = Tensor(np.array([0.5, -1.5]), requires_grad=True)
    opt = Adam({"p": t}, lr=0.001)
    t.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(t.data, [0.5, -1.5])


def test_adam_zero_gradient_decays_moments():
    m, v = np.array([0.2, -0.4]), np.array([0.01, 0.04])
    p = np.array([1.0, 2.0])
    adam_step(p, np.zeros(2), m, v, 3, lr=0.0)
    np.testing.assert_allclose(m, [0.9 * 0.2, -0.9 * 0.4])
    np.testing.assert_allclose(v, [0.999 * 0.01, 0.999 * 0.04])
    np.testing.assert_array_equal(p, [1.0, 2.0])


def test_adam_quadratic_bowl():
    t = Tensor(np.array([3.0]), requires_grad=True)
    opt = Adam({"p": t}, lr=0.05)
    trace = []
    for _ in range(200):
        opt.zero_grad()
        t.grad = 2 * t.data  # d/dp p^2
        opt.step()
        trace.append(abs(t.data[0]))
    warm = trace[5:60]
    assert all(a > b for a, b in zip(warm, warm[1:]))
    assert trace[-1] < 0.1 * 3.0
