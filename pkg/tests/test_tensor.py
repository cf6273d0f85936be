"""Tensor engine tests: forward oracles and finite-difference gradients.

The spatial ops are checked against independent brute-force implementations
written as plain nested loops, so a bug in the vectorized code cannot hide
in its own oracle.
"""

import numpy as np
import pytest

from fedseg.errors import ShapeError, UsageError
from fedseg.tensor import (
    Tensor,
    concat_channels,
    conv2d,
    expand_channels,
    grad_check,
    maxpool2d,
    mul,
    no_grad,
    relu,
    sigmoid,
    upsample2d,
)


# -- independent oracles ------------------------------------------------------


def conv2d_reference(x, w, b, stride, padding):
    """Direct six-nested-loop convolution (zero padding semantics)."""
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    xp = np.zeros((n, cin, h + 2 * padding, wid + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wid] = x
    out = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[ni, ci, i * stride + u, j * stride + v] * w[co, ci, u, v]
                    out[ni, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


def maxpool_reference(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for ni in range(n):
        for ci in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[ni, ci, i, j] = x[ni, ci, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
    return out


def bilinear_reference(x):
    """Per-pixel x2 bilinear interpolation, sample centers at (i+0.5)/2 - 0.5."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w))
    for ni in range(n):
        for ci in range(c):
            for i in range(2 * h):
                for j in range(2 * w):
                    sy = min(max((i + 0.5) / 2.0 - 0.5, 0.0), h - 1.0)
                    sx = min(max((j + 0.5) / 2.0 - 0.5, 0.0), w - 1.0)
                    y0, x0 = int(np.floor(sy)), int(np.floor(sx))
                    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
                    fy, fx = sy - y0, sx - x0
                    out[ni, ci, i, j] = (
                        x[ni, ci, y0, x0] * (1 - fy) * (1 - fx)
                        + x[ni, ci, y0, x1] * (1 - fy) * fx
                        + x[ni, ci, y1, x0] * fy * (1 - fx)
                        + x[ni, ci, y1, x1] * fy * fx
                    )
    return out


def projected(op):
    """Scalar objective sum(op(x) * R) with a fixed random projection R."""
    def wrap(*tensors):
        out = op(*tensors)
        rng = np.random.default_rng(99)
        r = Tensor(rng.normal(size=out.shape))
        return mul(out, r).sum()
    return wrap


# -- forward oracles ----------------------------------------------------------


class TestConv2d:
    def test_all_ones_sums_window(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = conv2d(x, w, b)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 1, 5, 5)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        out = conv2d(x, w, Tensor(np.zeros(1)))
        assert np.array_equal(out.data, x.data)

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
        want = conv2d_reference(x, w, b, stride=2, padding=1)
        assert got.shape == want.shape
        assert np.max(np.abs(got.data - want)) < 1e-12

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
    def test_oracle_shape_grid(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        for shape, kshape in [((2, 4, 8, 8), (3, 4, 3, 3)), ((1, 1, 4, 6), (2, 1, 2, 2))]:
            x = rng.normal(size=shape)
            w = rng.normal(size=kshape)
            b = rng.normal(size=kshape[0])
            got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
            want = conv2d_reference(x, w, b, stride, padding)
            assert np.max(np.abs(got.data - want)) < 1e-12

    def test_channel_mismatch_names_axes(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        w = Tensor(np.zeros((2, 2, 3, 3)))
        with pytest.raises(ShapeError, match="axis 1"):
            conv2d(x, w)

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ShapeError, match="smaller"):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


class TestMaxpool:
    def test_single_window(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert maxpool2d(x).item() == 4.0

    def test_constant_input(self):
        x = Tensor(np.full((1, 2, 4, 4), 3.7))
        out = maxpool2d(x)
        assert np.all(out.data == 3.7)

    def test_matches_window_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 8, 8))
        got = maxpool2d(Tensor(x))
        assert np.array_equal(got.data, maxpool_reference(x))

    def test_oracle_all_shapes_up_to_2x4x8x8(self):
        rng = np.random.default_rng(20)
        for n in (1, 2):
            for c in (1, 2, 3, 4):
                for h in (2, 4, 6, 8):
                    for w in (2, 4, 6, 8):
                        x = rng.normal(size=(n, c, h, w))
                        got = maxpool2d(Tensor(x))
                        assert np.array_equal(got.data, maxpool_reference(x))

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeError, match="even"):
            maxpool2d(Tensor(np.zeros((1, 1, 3, 4))))

    def test_tie_routes_to_first_occurrence(self):
        x = Tensor(np.array([[5.0, 5.0], [5.0, 5.0]]).reshape(1, 1, 2, 2),
                   requires_grad=True)
        out = maxpool2d(x)
        out.sum().backward()
        assert np.array_equal(x.grad.reshape(4), [1.0, 0.0, 0.0, 0.0])


class TestUpsample:
    def test_nearest_replicates(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = upsample2d(x, "nearest")
        want = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]],
                        dtype=float)
        assert np.array_equal(out.data[0, 0], want)

    def test_bilinear_constant_preserved(self):
        x = Tensor(np.full((1, 3, 4, 4), 0.25))
        out = upsample2d(x, "bilinear")
        assert np.all(out.data == 0.25)

    def test_bilinear_matches_formula_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 1, 4, 4))
        got = upsample2d(Tensor(x), "bilinear")
        assert np.max(np.abs(got.data - bilinear_reference(x))) < 1e-12

    def test_oracle_all_shapes_up_to_2x4x8x8(self):
        rng = np.random.default_rng(4)
        for n in (1, 2):
            for c in (1, 2, 3, 4):
                for h in (1, 2, 3, 5, 8):
                    for w in (1, 2, 4, 7, 8):
                        x = rng.normal(size=(n, c, h, w))
                        got_b = upsample2d(Tensor(x), "bilinear")
                        assert np.max(np.abs(got_b.data - bilinear_reference(x))) < 1e-12
                        got_n = upsample2d(Tensor(x), "nearest")
                        assert np.array_equal(
                            got_n.data, x.repeat(2, axis=2).repeat(2, axis=3))

    def test_unknown_mode(self):
        with pytest.raises(UsageError):
            upsample2d(Tensor(np.zeros((1, 1, 2, 2))), "cubic")


class TestElementwise:
    def test_sigmoid_symmetry_point(self):
        assert sigmoid(Tensor(np.zeros(1))).data[0] == 0.5

    def test_sigmoid_strictly_open_interval(self):
        x = Tensor(np.array([-1e6, -50.0, 0.0, 50.0, 1e6]))
        out = sigmoid(x).data
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_relu_definition(self):
        out = relu(Tensor(np.array([-3.5, 2.0, 0.0])))
        assert np.array_equal(out.data, [0.0, 2.0, 0.0])
        rng = np.random.default_rng(5)
        assert np.all(relu(Tensor(rng.normal(size=100))).data >= 0.0)

    def test_concat_slices_equal_inputs(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(2, 2, 3, 3))
        b = rng.normal(size=(2, 3, 3, 3))
        out = concat_channels([Tensor(a), Tensor(b)])
        assert out.shape == (2, 5, 3, 3)
        assert np.array_equal(out.data[:, :2], a)
        assert np.array_equal(out.data[:, 2:], b)

    def test_concat_rejects_mismatched_extents(self):
        with pytest.raises(ShapeError):
            concat_channels([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 5)))])

    def test_bias_broadcast_add(self):
        x = Tensor(np.zeros((2, 3, 2, 2)))
        b = Tensor(np.array([1.0, 2.0, 3.0]))
        out = x + b
        assert np.array_equal(out.data[0, :, 0, 0], [1.0, 2.0, 3.0])

    def test_general_broadcast_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3, 4, 4))) + Tensor(np.zeros((2, 3, 4, 1)))

    def test_expand_channels_tiles_and_sums_back(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2), requires_grad=True)
        out = expand_channels(x, 3)
        assert out.shape == (1, 3, 2, 2)
        assert np.array_equal(out.data[0, 0], out.data[0, 2])
        out.sum().backward()
        assert np.all(x.grad == 3.0)

    def test_forward_values_finite(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(2, 2, 4, 4)) * 100)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        for t in (conv2d(x, w, padding=1), maxpool2d(x), upsample2d(x, "bilinear"),
                  relu(x), sigmoid(x)):
            assert np.all(np.isfinite(t.data))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.random.default_rng(8).normal(size=(2, 3, 4, 4)), requires_grad=True)
        x.sum().backward()
        assert np.all(x.grad == 1.0)

    def test_quadratic_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        mul(x, x).sum().backward()
        assert np.array_equal(x.grad, [2.0, 4.0])

    def test_accumulation_across_consumers(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = (x + x) + mul(x, 2.0)
        y.sum().backward()
        assert x.grad[0] == 4.0

    def test_backward_without_graph_is_usage_error(self):
        with pytest.raises(UsageError):
            Tensor(np.zeros(1), requires_grad=True).backward()

    def test_backward_on_vector_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = x + 1.0
        with pytest.raises(UsageError):
            y.backward()

    def test_no_grad_suppresses_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert y._backward_fn is None and not y.requires_grad

    def test_determinism(self):
        rng = np.random.default_rng(9)
        xv = rng.normal(size=(1, 2, 4, 4))
        wv = rng.normal(size=(2, 2, 3, 3))
        results = []
        for _ in range(2):
            x = Tensor(xv, requires_grad=True)
            w = Tensor(wv, requires_grad=True)
            out = relu(conv2d(x, w, padding=1))
            out.sum().backward()
            results.append((out.data.copy(), x.grad.copy(), w.grad.copy()))
        for a, b in zip(results[0], results[1]):
            assert np.array_equal(a, b)


class TestGradCheck:
    def test_sigmoid_gradient(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        err = grad_check(lambda t: sigmoid(t).sum(), [x])
        assert err <= 1e-7

    def test_linear_is_nearly_exact(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=6), requires_grad=True)
        err = grad_check(lambda t: (t * 3.0).sum(), [x])
        assert err <= 1e-10

    def test_conv_relu_composite(self):
        rng = np.random.default_rng(12)
        x = Tensor(np.abs(rng.normal(size=(1, 2, 4, 4))) + 0.1, requires_grad=True)
        w = Tensor(np.abs(rng.normal(size=(2, 2, 3, 3))) * 0.5 + 0.1, requires_grad=True)
        b = Tensor(np.full(2, 0.1), requires_grad=True)
        err = grad_check(lambda *ts: relu(conv2d(ts[0], ts[1], ts[2], padding=1)).sum(),
                         [x, w, b])
        assert err <= 1e-5

    @pytest.mark.parametrize("name,builder", [
        ("conv2d", None), ("maxpool2d", None), ("upsample_nearest", None),
        ("upsample_bilinear", None), ("relu", None), ("sigmoid", None),
        ("add", None), ("mul", None), ("concat", None), ("expand", None),
        ("div", None),
    ])
    def test_primitive_gradients(self, name, builder):
        rng = np.random.default_rng(hash(name) % (2 ** 32))
        if name == "conv2d":
            x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
            w = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
            b = Tensor(rng.normal(size=2), requires_grad=True)
            err = grad_check(projected(lambda *t: conv2d(t[0], t[1], t[2], stride=2, padding=1)),
                             [x, w, b])
        elif name == "maxpool2d":
            base = rng.normal(size=(1, 2, 4, 4))
            base += np.arange(base.size).reshape(base.shape) * 1e-3  # distinct window values
            x = Tensor(base, requires_grad=True)
            err = grad_check(projected(maxpool2d), [x])
        elif name == "upsample_nearest":
            x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
            err = grad_check(projected(lambda t: upsample2d(t, "nearest")), [x])
        elif name == "upsample_bilinear":
            x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
            err = grad_check(projected(lambda t: upsample2d(t, "bilinear")), [x])
        elif name == "relu":
            x = Tensor(np.sign(rng.normal(size=(2, 8))) * (rng.uniform(0.2, 1.0, (2, 8))),
                       requires_grad=True)
            err = grad_check(projected(relu), [x])
        elif name == "sigmoid":
            x = Tensor(rng.normal(size=(2, 8)), requires_grad=True)
            err = grad_check(projected(sigmoid), [x])
        elif name == "add":
            a = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
            b = Tensor(rng.normal(size=3), requires_grad=True)
            err = grad_check(projected(lambda u, v: u + v), [a, b])
        elif name == "mul":
            a = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
            b = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
            err = grad_check(projected(mul), [a, b])
        elif name == "concat":
            a = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
            b = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
            err = grad_check(projected(lambda u, v: concat_channels([u, v])), [a, b])
        elif name == "expand":
            x = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
            err = grad_check(projected(lambda t: expand_channels(t, 4)), [x])
        else:  # div
            a = Tensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True)
            b = Tensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True)
            err = grad_check(projected(lambda u, v: u / v), [a, b])
        assert err <= 1e-5, f"{name}: rel err {err}"
