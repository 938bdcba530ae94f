import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stn_icnn.gradcheck import grad_check
from stn_icnn.ops import (BatchNormState, UninitializedStateError, avgpool2d, batchnorm2d,
                          concat_channels, conv2d, grid_sample_bilinear, linear, maxpool2d,
                          relu, sigmoid, softmax_channels, upsample_nearest)
from stn_icnn.tensor import Tensor


def conv_loop(x, w, b):
    """Direct nested-loop 3x3 / pad 1 convolution."""
    bsz, c, h, wd = x.shape
    f = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((bsz, f, h, wd))
    for n in range(bsz):
        for o in range(f):
            for y in range(h):
                for xx in range(wd):
                    out[n, o, y, xx] = b[o] + np.sum(xp[n, :, y:y + 3, xx:xx + 3] * w[o])
    return out


def sample_loop(img, gx, gy):
    """Per-pixel bilinear lookup with zero outside, corner-aligned."""
    c, h, w = img.shape
    out = np.zeros((c,) + gx.shape)
    for (i, j), _ in np.ndenumerate(gx):
        sx = (gx[i, j] + 1) * (w - 1) / 2
        sy = (gy[i, j] + 1) * (h - 1) / 2
        x0, y0 = int(np.floor(sx)), int(np.floor(sy))
        for yy, wy in ((y0, 1 - (sy - y0)), (y0 + 1, sy - y0)):
            for xx, wx in ((x0, 1 - (sx - x0)), (x0 + 1, sx - x0)):
                if 0 <= yy < h and 0 <= xx < w:
                    out[:, i, j] += wy * wx * img[:, yy, xx]
    return out


# conv2d

def test_conv_ones_window_sums():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))),
                 Tensor(np.zeros(1))).numpy()[0, 0]
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(2, 1, 5, 6)).astype(np.float32)
    k = np.zeros((1, 1, 3, 3), np.float32)
    k[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(k)).numpy(), x)


def test_conv_matches_loop_oracle(f64, rng):
    x = rng.normal(size=(2, 3, 5, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b)).numpy()
    np.testing.assert_allclose(out, conv_loop(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv_gradient_matches_finite_differences(f64, rng):
    x = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    err = grad_check(lambda x, w, b: conv2d(x, w, b).sum(), [x, w, b], step=1e-5)
    assert err < 1e-6


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv_relu_chain_gradient(f64, rng):
    x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    assert grad_check(lambda x, w: relu(conv2d(x, w)).sum(), [x, w], step=1e-5) < 1e-6


# pooling and upsampling

def test_maxpool_examples():
    out = maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).numpy()
    np.testing.assert_array_equal(out, [[[[4.0]]]])
    const = maxpool2d(Tensor(np.full((1, 2, 4, 6), 2.5))).numpy()
    np.testing.assert_array_equal(const, np.full((1, 2, 2, 3), 2.5))


def test_maxpool_routes_gradient_to_first_argmax():
    x = Tensor(np.array([[[[1.0, 5.0], [5.0, 0.0]]]]), requires_grad=True)
    maxpool2d(x).sum().backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[0, 1], [0, 0]])


def test_maxpool_odd_extent_rejected():
    with pytest.raises(ValueError):
        maxpool2d(Tensor(np.ones((1, 1, 3, 4))))


def test_avgpool_examples():
    assert avgpool2d(Tensor(np.array([[[[9.0]]]]))).item() == pytest.approx(1.0)
    out = avgpool2d(Tensor(np.full((1, 1, 8, 8), 3.0))).numpy()
    assert out.shape == (1, 1, 4, 4)
    assert out[0, 0, 2, 2] == pytest.approx(3.0)


def test_avgpool_gradient(f64, rng):
    x = Tensor(rng.normal(size=(2, 2, 5, 6)), requires_grad=True)
    assert grad_check(lambda x: avgpool2d(x).sum(), [x], step=1e-5) < 1e-6


def test_upsample_examples():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
    out = upsample_nearest(x, 2)
    np.testing.assert_array_equal(out.numpy()[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2],
                                                      [3, 3, 4, 4], [3, 3, 4, 4]])
    out.sum().backward()
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))
    np.testing.assert_array_equal(upsample_nearest(x, 1).numpy(), x.numpy())
    with pytest.raises(ValueError):
        upsample_nearest(x, 0)


# batch norm

def test_batchnorm_train_normalises(rng):
    x = Tensor((rng.normal(size=(4, 3, 5, 5)) * 3 + 2).astype(np.float32))
    st_ = BatchNormState(3)
    out = batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), st_, train=True).numpy()
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)
    np.testing.assert_allclose(st_.running_mean, 0.1 * x.numpy().mean(axis=(0, 2, 3)), rtol=1e-5)


def test_batchnorm_eval_identity(rng):
    # eps scales by 1/sqrt(1 + 1e-5), a 5e-6 relative change, so keep |x| <= 1
    x = rng.uniform(-1, 1, size=(2, 3, 4, 4)).astype(np.float32)
    st_ = BatchNormState(3)
    st_.reset()
    out = batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), st_, train=False)
    np.testing.assert_allclose(out.numpy(), x, atol=1e-5)


def test_batchnorm_eval_before_stats_raises():
    with pytest.raises(UninitializedStateError):
        batchnorm2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                    BatchNormState(1), train=False)


def test_batchnorm_gradient(f64, rng):
    x = Tensor(rng.normal(size=(3, 2, 4, 4)), requires_grad=True)
    g = Tensor(rng.normal(size=2), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    proj = rng.normal(size=(3, 2, 4, 4))

    def f(x, g, b):
        return (batchnorm2d(x, g, b, BatchNormState(2), train=True) * proj).sum()

    assert grad_check(f, [x, g, b], step=1e-5) < 1e-5


# elementwise and dense

def test_elementwise_examples():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 2.0])).numpy(), [0.0, 2.0])
    assert sigmoid(Tensor([0.0])).numpy()[0] == 0.5
    sm = softmax_channels(Tensor(np.zeros((1, 4, 2, 2)))).numpy()
    np.testing.assert_allclose(sm, 0.25, atol=1e-7)
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).numpy(), x)


def test_concat_shape_mismatch():
    with pytest.raises(ValueError):
        concat_channels([Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 2)))])


def test_linear_gradient(f64, rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    assert grad_check(lambda x, w, b: linear(x, w, b).sum(), [x, w, b], step=1e-5) < 1e-8


# grid sampling

def _identity_grid(h, w):
    ys, xs = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    return np.stack([xs, ys], -1)[None]


def test_grid_sample_identity(rng):
    x = rng.normal(size=(1, 2, 5, 7)).astype(np.float32)
    out = grid_sample_bilinear(Tensor(x), Tensor(_identity_grid(5, 7).astype(np.float32)))
    np.testing.assert_array_equal(out.numpy(), x)


def test_grid_sample_integer_positions_extract_exactly(rng):
    img = rng.normal(size=(1, 1, 9, 9))
    ys, xs = np.meshgrid(np.arange(2, 6), np.arange(3, 8), indexing="ij")
    grid = np.stack([xs / 8 * 2 - 1, ys / 8 * 2 - 1], -1)[None]
    out = grid_sample_bilinear(Tensor(img), Tensor(grid)).numpy()
    assert np.abs(out[0, 0] - img[0, 0, 2:6, 3:8]).max() == 0


def test_grid_sample_ramp_is_exact(f64, rng):
    h, w = 6, 8
    ys, xs = np.mgrid[0:h, 0:w]
    img = (xs + 2.0 * ys)[None, None]
    grid = rng.uniform(-1, 1, size=(1, 4, 5, 2))
    out = grid_sample_bilinear(Tensor(img), Tensor(grid)).numpy()[0, 0]
    sx = (grid[0, ..., 0] + 1) * (w - 1) / 2
    sy = (grid[0, ..., 1] + 1) * (h - 1) / 2
    np.testing.assert_allclose(out, sx + 2 * sy, atol=1e-12)


def test_grid_sample_matches_loop_oracle(f64, rng):
    img = rng.normal(size=(1, 2, 6, 5))
    grid = rng.uniform(-1.3, 1.3, size=(1, 4, 4, 2))
    out = grid_sample_bilinear(Tensor(img), Tensor(grid)).numpy()[0]
    np.testing.assert_allclose(out, sample_loop(img[0], grid[0, ..., 0], grid[0, ..., 1]),
                               atol=1e-12)


def test_grid_sample_gradient_at_half_integers(f64, rng):
    img = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    pos = rng.integers(0, 5, size=(1, 3, 3, 2)) + 0.5
    grid = Tensor(pos / 5 * 2 - 1, requires_grad=True)
    proj = rng.normal(size=(1, 2, 3, 3))
    err = grad_check(lambda a, g: (grid_sample_bilinear(a, g) * proj).sum(), [img, grid],
                     step=1e-5)
    assert err < 1e-5


def test_grid_sample_gradient_on_pixel_is_mean_slope(f64):
    # row 0 1 3 6: slopes 1 (left of x=1) and 2 (right of x=1)
    img = Tensor(np.array([0.0, 1.0, 3.0, 6.0]).reshape(1, 1, 1, 4))
    for px, slope in ((1, 1.5), (2, 2.5)):
        grid = Tensor(np.array([[[[px / 3 * 2 - 1, -1.0]]]]), requires_grad=True)
        out = grid_sample_bilinear(img, grid)
        out.sum().backward()
        assert out.item() == img.numpy()[0, 0, 0, px]
        # normalised units: one pixel is 2 / (w - 1)
        assert grid.grad[0, 0, 0, 0] == pytest.approx(slope * 1.5, abs=1e-12)


def test_grid_sample_gradient_on_pixels_matches_central_difference(f64, rng):
    img = Tensor(rng.normal(size=(1, 2, 7, 7)))
    pos = rng.integers(1, 6, size=(1, 3, 3, 2)).astype(float)
    grid = Tensor(pos / 6 * 2 - 1, requires_grad=True)
    proj = rng.normal(size=(1, 2, 3, 3))
    err = grad_check(lambda g: (grid_sample_bilinear(img, g) * proj).sum(), [grid], step=1e-5)
    assert err < 1e-5


def test_grid_sample_rejects_bad_grid():
    with pytest.raises(ValueError):
        grid_sample_bilinear(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros((1, 2, 2, 3))))


# properties

dims = st.integers(1, 9)


@settings(max_examples=30, deadline=None)
@given(b=st.integers(1, 2), c=st.integers(1, 3), h=dims, w=dims, f=st.integers(1, 3))
def test_shape_arithmetic(b, c, h, w, f):
    x = Tensor(np.ones((b, c, h, w)))
    assert conv2d(x, Tensor(np.ones((f, c, 3, 3)))).shape == (b, f, h, w)
    assert avgpool2d(x).shape == (b, c, -(-h // 2), -(-w // 2))
    assert upsample_nearest(x, 3).shape == (b, c, 3 * h, 3 * w)
    if h % 2 == 0 and w % 2 == 0:
        assert maxpool2d(x).shape == (b, c, h // 2, w // 2)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 50.0))
def test_softmax_channel_sums(seed, scale):
    z = np.random.default_rng(seed).normal(size=(2, 5, 3, 3)) * scale
    p = softmax_channels(Tensor(z.astype(np.float32))).numpy()
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_grid_sample_is_linear_in_image(seed, a, b):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(2, 1, 2, 5, 5))
    grid = Tensor(r.uniform(-1.2, 1.2, size=(1, 3, 4, 2)))
    lhs = grid_sample_bilinear(Tensor(a * x + b * y), grid).numpy()
    rhs = a * grid_sample_bilinear(Tensor(x), grid).numpy() + \
        b * grid_sample_bilinear(Tensor(y), grid).numpy()
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


def test_ops_are_deterministic(rng):
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = maxpool2d(conv2d(Tensor(x), Tensor(w))).numpy()
    b = maxpool2d(conv2d(Tensor(x), Tensor(w))).numpy()
    assert a.tobytes() == b.tobytes()
