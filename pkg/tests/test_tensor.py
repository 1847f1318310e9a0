import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hseg import kernels
from hseg import tensor as T
from hseg.errors import DimensionError, GeometryError, UsageError
from hseg.gradcheck import check_gradients
from hseg.tensor import Tape, Tensor


def brute_conv(x, w, b, stride, pad):
    """Direct loop convolution, float64."""
    x = np.pad(np.asarray(x, np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for y in range(ho):
                for z in range(wo):
                    patch = x[i, :, y * stride:y * stride + kh, z * stride:z * stride + kw]
                    out[i, o, y, z] = (patch * w[o]).sum() + b[o]
    return out


def grads_of(fn, *arrs, dtype=np.float32):
    leaves = [Tensor(a, requires_grad=True, dtype=dtype) for a in arrs]
    with Tape() as tape:
        loss = fn(*leaves)
    g = tape.backward(loss)
    return [g[t] for t in leaves]


# conv2d

def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 4)).astype(np.float32)
    w = np.zeros((3, 3, 1, 1), np.float32)
    for c in range(3):
        w[c, c] = 1.0
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_conv_ones_kernel_on_constant_image():
    x = np.full((1, 1, 3, 3), 2.0)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1).data[0, 0]
    assert out[1, 1] == 18
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 8
    assert out[0, 1] == out[1, 0] == out[1, 2] == out[2, 1] == 12
    assert np.allclose(out, brute_conv(x, np.ones((1, 1, 3, 3)), [0.0], 1, 1)[0, 0])


@pytest.mark.parametrize("stride,pad,hw", [(1, 0, (5, 6)), (1, 1, (4, 4)), (2, 1, (7, 9)), (1, 2, (3, 3))])
def test_conv_matches_brute_force(stride, pad, hw):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 3) + hw)
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = T.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64),
                   stride=stride, padding=pad)
    assert np.allclose(out.data, brute_conv(x, w, b, stride, pad), atol=1e-12)


def test_conv_kernel_gradient_small_case():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 1, 5, 5))
    w = rng.standard_normal((1, 1, 3, 3))
    errs = check_gradients(lambda a, b: T.conv2d(a, b, Tensor(np.zeros(1), dtype=a.dtype)).sum(), [x, w])
    assert max(errs) < 1e-3


def test_conv_errors():
    x = Tensor(np.zeros((1, 2, 6, 6)))
    with pytest.raises(DimensionError, match=r"\(1, 2, 6, 6\).*\(1, 3, 3, 3\)"):
        T.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(GeometryError):
        T.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros(1)), stride=2, padding=1)
    with pytest.raises(GeometryError):
        T.conv2d(x, Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros(1)))
    with pytest.raises(DimensionError):
        T.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros(2)))


# pooling / upsampling / concat

def test_maxpool_window():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert T.maxpool2(x).data.item() == 4


def test_maxpool_constant_routes_to_first_position():
    (g,) = grads_of(lambda x: T.maxpool2(x).sum(), np.full((1, 2, 4, 4), 3.0))
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1
    assert np.array_equal(g[0, 0], expected) and np.array_equal(g[0, 1], expected)


def test_maxpool_odd_size():
    with pytest.raises(GeometryError):
        T.maxpool2(Tensor(np.zeros((1, 1, 3, 4))))


def test_upsample():
    out = T.upsample_nearest2(Tensor(np.full((1, 1, 1, 1), 7.0)))
    assert out.shape == (1, 1, 2, 2) and np.all(out.data == 7)
    (g,) = grads_of(lambda x: T.upsample_nearest2(x).sum(), np.ones((1, 2, 3, 3)))
    assert np.all(g == 4)


def test_concat():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4)).astype(np.float32)
    assert np.array_equal(T.concat_channels(Tensor(x), Tensor(np.zeros((2, 0, 4, 4)))).data, x)
    out = T.concat_channels(Tensor(np.full((1, 1, 2, 2), 3.0)), Tensor(np.full((1, 1, 2, 2), 5.0))).data
    assert np.all(out[0, 0] == 3) and np.all(out[0, 1] == 5)
    ga, gb = grads_of(lambda a, b: T.concat_channels(a, b).sum(), np.ones((1, 2, 3, 3)), np.ones((1, 1, 3, 3)))
    assert np.all(ga == 1) and ga.shape == (1, 2, 3, 3) and np.all(gb == 1) and gb.shape == (1, 1, 3, 3)
    with pytest.raises(DimensionError):
        T.concat_channels(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 4))))


# activations

def test_activation_values():
    assert T.sigmoid(Tensor(np.zeros(1))).data.item() == 0.5
    assert list(T.relu(Tensor(np.array([-1.0, 2.0]))).data) == [0, 2]
    out = T.softmax_channels(Tensor(np.zeros((1, 4, 2, 3)))).data
    assert np.allclose(out, 0.25)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 4, 3, 3), elements=st.floats(-30, 30)),
       arrays(np.float64, (2, 1, 3, 3), elements=st.floats(-50, 50)))
def test_softmax_distribution_and_shift_invariance(z, c):
    p = T.softmax_channels(Tensor(z)).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1, atol=1e-5)
    assert np.allclose(T.softmax_channels(Tensor(z + c)).data, p, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-15, 15)))
def test_sigmoid_open_interval(z):
    # beyond about |z| = 16 float32 rounds to exactly 0 or 1
    s = T.sigmoid(Tensor(z)).data
    assert np.all((s > 0) & (s < 1))


# backward

def test_backward_simple():
    x = np.random.default_rng(3).standard_normal((3, 4)).astype(np.float32)
    (g,) = grads_of(lambda t: t.sum(), x)
    assert np.array_equal(g, np.ones_like(x))
    (g,) = grads_of(lambda t: (t * t).sum(), x)
    assert np.allclose(g, 2 * x)


def test_gradient_accumulation_over_reuse():
    rng = np.random.default_rng(4)
    x, a, b = (rng.standard_normal((2, 3)) for _ in range(3))
    (g1,) = grads_of(lambda t: (t * Tensor(a)).sum(), x, dtype=np.float64)
    (g2,) = grads_of(lambda t: (T.sigmoid(t) * Tensor(b)).sum(), x, dtype=np.float64)
    (g,) = grads_of(lambda t: (t * Tensor(a)).sum() + (T.sigmoid(t) * Tensor(b)).sum(), x, dtype=np.float64)
    assert np.allclose(g, g1 + g2, atol=1e-6)


def test_unused_leaf_gets_zero_gradient():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = Tensor(np.ones((3,)), requires_grad=True)
    with Tape() as tape:
        tape.watch(y)
        loss = (x * 2.0).sum()
    g = tape.backward(loss)
    assert np.array_equal(g[y], np.zeros(3)) and g[y].shape == y.shape
    assert np.array_equal(g[x], np.full((2, 2), 2.0))


def test_non_scalar_loss():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(UsageError):
        tape.backward(y)


def test_tensor_immutable_and_shape():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert t.dtype == np.float32 and t.size == 6
    with pytest.raises(ValueError):
        t.data[0, 0] = 1


def test_forward_determinism():
    rng = np.random.default_rng(5)
    x, w, b = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    run = lambda: T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
    assert np.array_equal(run(), run())


# finite differences over the op set

def _sq(t):
    return (t * t).sum()


OPS = {
    "conv2d": (lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1).sum() * 0.1,
               lambda r: [r.standard_normal((2, 2, 4, 5)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)]),
    "conv2d_stride2": (lambda x, w, b: _sq(T.conv2d(x, w, b, stride=2, padding=1)),
                       lambda r: [r.standard_normal((1, 2, 7, 7)), r.standard_normal((2, 2, 3, 3)),
                                  r.standard_normal(2)]),
    "maxpool2": (lambda x: (T.maxpool2(x) * T.maxpool2(x)).sum(),
                 lambda r: [r.standard_normal((1, 1, 4, 4))]),
    "upsample": (lambda x: _sq(T.upsample_nearest2(x)), lambda r: [r.standard_normal((1, 2, 3, 3))]),
    "concat": (lambda a, b: _sq(T.concat_channels(a, b)),
               lambda r: [r.standard_normal((1, 2, 3, 3)), r.standard_normal((1, 1, 3, 3))]),
    "relu": (lambda x: _sq(T.relu(x)), lambda r: [r.standard_normal((3, 4)) + 0.01]),
    "sigmoid": (lambda x: _sq(T.sigmoid(x)), lambda r: [r.standard_normal((3, 4))]),
    "softmax": (lambda x, y: (T.softmax_channels(x) * y).sum(),
                lambda r: [r.standard_normal((2, 4, 2, 2)), r.standard_normal((2, 4, 2, 2))]),
    "log_clip": (lambda x: T.log(T.clip(x, 0.05, 5.0)).sum(), lambda r: [r.uniform(0.1, 3.0, (3, 3))]),
    "div": (lambda a, b: (a / b).sum(), lambda r: [r.standard_normal((2, 3)), r.uniform(0.5, 2.0, (2, 3))]),
    "getitem_mean": (lambda x: (x[:, 1] * x[:, 2]).mean(), lambda r: [r.standard_normal((2, 4, 3))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(10))
def test_finite_difference(name, seed):
    fn, make = OPS[name]
    errs = check_gradients(fn, make(np.random.default_rng(seed)), h=1e-3)
    assert max(errs) < 1e-3, (name, errs)


# kernel backends

@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")
def test_backends_agree():
    rng = np.random.default_rng(6)
    xp = rng.standard_normal((2, 3, 11, 11)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    nb, npy = kernels.IMPLEMENTATIONS["numba"], kernels.IMPLEMENTATIONS["numpy"]
    for stride in (1, 2):
        o1, o2 = nb["conv2d_forward"](xp, w, b, stride), npy["conv2d_forward"](xp, w, b, stride)
        assert np.allclose(o1, o2, atol=1e-5)
        dout = rng.standard_normal(o1.shape).astype(np.float32)
        for a, c in zip(nb["conv2d_backward"](xp, w, dout, stride), npy["conv2d_backward"](xp, w, dout, stride)):
            assert np.allclose(a, c, atol=1e-4)
    x = rng.standard_normal((2, 3, 6, 8)).astype(np.float32)
    x[0, 0, :2, :2] = 1.0  # a tie
    (o1, i1), (o2, i2) = nb["maxpool2_forward"](x), npy["maxpool2_forward"](x)
    assert np.array_equal(o1, o2) and np.array_equal(i1, i2)
    d = rng.standard_normal(o1.shape).astype(np.float32)
    assert np.array_equal(nb["maxpool2_backward"](d, i1), npy["maxpool2_backward"](d, i2))
    a, c = rng.integers(0, 50, (30, 2)), rng.integers(0, 50, (40, 2))
    assert np.array_equal(nb["min_sq_dists"](a, c), npy["min_sq_dists"](a, c))
