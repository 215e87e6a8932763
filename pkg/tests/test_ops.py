import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import max_grad_error, t64
from scaa import ops
from scaa.ops import ShapeError
from scaa.tensor import Tensor, no_grad

PRIM_TOL = 1e-5


def conv_loop(x, w, b, pad):
    """Direct cross-correlation by explicit loops (stride 1)."""
    c_in, *sp = x.shape
    c_out, _, *k = w.shape
    xp = np.pad(x, [(0, 0)] + [(pad, pad)] * len(sp))
    out_sp = [s + 2 * pad - kk + 1 for s, kk in zip(sp, k)]
    out = np.zeros([c_out] + out_sp)
    for o in range(c_out):
        for idx in np.ndindex(*out_sp):
            window = xp[(slice(None),) + tuple(slice(i, i + kk) for i, kk in zip(idx, k))]
            out[(o,) + idx] = (window * w[o]).sum() + b[o]
    return out


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((3, 5, 4))
        w = np.zeros((3, 3, 1, 1))
        w[range(3), range(3)] = 1.0
        y = ops.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(y.data, x)

    def test_all_ones_center(self):
        y = ops.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), pad=1)
        assert y.shape == (1, 3, 3)
        assert y.data[0, 1, 1] == 9.0
        assert y.data[0, 0, 0] == 4.0

    @pytest.mark.parametrize("shape,cout,k,pad", [((2, 5, 5), 3, 3, 1), ((1, 6, 4), 2, 3, 0), ((3, 4, 5), 2, 1, 0)])
    def test_matches_loop_oracle(self, rng, shape, cout, k, pad):
        x = rng.standard_normal(shape)
        w = rng.standard_normal((cout, shape[0], k, k))
        b = rng.standard_normal(cout)
        y = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), pad=pad)
        np.testing.assert_allclose(y.data, conv_loop(x, w, b, pad), rtol=1e-12, atol=1e-12)

    def test_stride_output_extent(self, rng):
        y = ops.conv2d(Tensor(rng.standard_normal((1, 7, 7))), Tensor(np.ones((1, 1, 3, 3))), stride=2, pad=1)
        assert y.shape == (1, 4, 4)  # floor((7 + 2 - 3) / 2) + 1

    def test_sum_gradient_fd(self, rng):
        x = t64(rng.standard_normal((2, 5, 5)))
        w = t64(rng.standard_normal((3, 2, 3, 3)), grad=False)
        from scaa.gradcheck import check_gradients

        errs = check_gradients(lambda: ops.sum(ops.conv2d(x, w, pad=1)), {"x": x})
        assert errs["x"] < 1e-6

    @pytest.mark.parametrize("shape,cout,stride,pad", [
        ((2, 5, 5), 3, 1, 1), ((1, 3, 6, 4), 2, 1, 1), ((2, 2, 7, 7), 2, 2, 1), ((3, 4, 4), 2, 1, 0),
    ])
    def test_gradcheck(self, rng, shape, cout, stride, pad):
        cin = shape[-3]
        x = t64(rng.standard_normal(shape))
        w = t64(rng.standard_normal((cout, cin, 3, 3)))
        b = t64(rng.standard_normal(cout))
        err = max_grad_error(lambda: ops.conv2d(x, w, b, stride=stride, pad=pad), {"x": x, "w": w, "b": b})
        assert err < PRIM_TOL

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            ops.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_kernel_too_big(self):
        with pytest.raises(ShapeError, match="does not fit"):
            ops.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


class TestConv3d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        w = np.zeros((2, 2, 1, 1, 1))
        w[0, 0] = w[1, 1] = 1.0
        np.testing.assert_array_equal(ops.conv3d(Tensor(x), Tensor(w)).data, x)

    def test_all_ones_27(self):
        y = ops.conv3d(Tensor(np.ones((1, 3, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))))
        assert y.shape == (1, 1, 1, 1)
        assert y.data.item() == 27.0

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((2, 4, 3, 5))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        y = ops.conv3d(Tensor(x), Tensor(w), Tensor(b), pad=1)
        np.testing.assert_allclose(y.data, conv_loop(x, w, b, 1), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("shape,cout,pad", [((1, 4, 4, 4), 2, 1), ((2, 3, 4, 3), 2, 1), ((1, 2, 3, 4, 4), 3, 0)])
    def test_gradcheck(self, rng, shape, cout, pad):
        cin = shape[-4]
        x = t64(rng.standard_normal(shape))
        w = t64(rng.standard_normal((cout, cin, 3, 3, 3)))
        b = t64(rng.standard_normal(cout))
        err = max_grad_error(lambda: ops.conv3d(x, w, b, pad=pad), {"x": x, "w": w, "b": b})
        assert err < 1e-6


class TestMaxpool:
    def test_direct_max(self):
        y = ops.maxpool(Tensor([[1.0, 2.0], [3.0, 4.0]]), 2, dims=2)
        assert y.data.item() == 4.0

    def test_constant_routes_to_first(self):
        x = Tensor(np.full((1, 4, 4), 3.0), requires_grad=True)
        y = ops.maxpool(x, 2, dims=2)
        np.testing.assert_array_equal(y.data, np.full((1, 2, 2), 3.0))
        ops.sum(y).backward()
        expected = np.zeros((1, 4, 4))
        expected[0, ::2, ::2] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_matches_block_max(self, rng):
        x = rng.standard_normal((2, 3, 4, 6, 8))
        y = ops.maxpool(Tensor(x), 2, dims=3)
        ref = x.reshape(2, 3, 2, 2, 3, 2, 4, 2).max(axis=(3, 5, 7))
        np.testing.assert_array_equal(y.data, ref)

    @pytest.mark.parametrize("shape,dims", [((2, 4, 4), 2), ((1, 2, 4, 6), 2), ((2, 4, 2, 4), 3)])
    def test_gradcheck(self, rng, shape, dims):
        x = t64(rng.permutation(np.arange(np.prod(shape), dtype=float)).reshape(shape) * 0.1)
        assert max_grad_error(lambda: ops.maxpool(x, 2, dims=dims), {"x": x}) < 1e-6

    def test_non_divisible(self):
        with pytest.raises(ShapeError, match="divisible"):
            ops.maxpool(Tensor(np.ones((1, 3, 4))), 2, dims=2)


class TestInstanceNorm:
    def test_zero_mean_unit_var(self, rng):
        x = Tensor(rng.standard_normal((4, 6, 7)) * 5 + 3)
        y = ops.instance_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.all(np.abs(y.data.mean(axis=(1, 2))) < 1e-6)
        assert np.all(np.abs(y.data.var(axis=(1, 2)) - 1) < 1e-4)

    def test_constant_channel_gives_beta(self):
        beta = np.array([0.5, -2.0])
        y = ops.instance_norm(Tensor(np.full((2, 3, 3), 7.0)), Tensor(np.ones(2)), Tensor(beta))
        np.testing.assert_allclose(y.data, np.broadcast_to(beta[:, None, None], (2, 3, 3)))

    @pytest.mark.parametrize("shape,sd", [((2, 3, 3), 2), ((3, 2, 4, 2), 2), ((2, 2, 3, 2, 2), 3)])
    def test_gradcheck(self, rng, shape, sd):
        c = shape[-sd - 1]
        x = t64(rng.standard_normal(shape))
        g = t64(rng.standard_normal(c) + 1.5)
        b = t64(rng.standard_normal(c))
        err = max_grad_error(lambda: ops.instance_norm(x, g, b, spatial_dims=sd), {"x": x, "g": g, "b": b})
        assert err < PRIM_TOL


class TestAdaptivePool:
    def test_identity(self, rng):
        x = rng.standard_normal((2, 4, 5))
        np.testing.assert_array_equal(ops.adaptive_avg_pool(Tensor(x), (4, 5)).data, x)

    def test_ramp_quadrants(self):
        x = np.arange(16, dtype=float).reshape(4, 4)
        y = ops.adaptive_avg_pool(Tensor(x), (2, 2)).data
        ref = np.array([[x[:2, :2].mean(), x[:2, 2:].mean()], [x[2:, :2].mean(), x[2:, 2:].mean()]])
        np.testing.assert_allclose(y, ref, rtol=0, atol=1e-12)

    def test_uneven_bins_match_floor_ceil(self, rng):
        x = rng.standard_normal((3, 5, 7))
        y = ops.adaptive_avg_pool(Tensor(x), (3, 4)).data
        for i in range(3):
            for j in range(4):
                r0, r1 = (i * 5) // 3, math.ceil((i + 1) * 5 / 3)
                c0, c1 = (j * 7) // 4, math.ceil((j + 1) * 7 / 4)
                np.testing.assert_allclose(y[:, i, j], x[:, r0:r1, c0:c1].mean(axis=(1, 2)), atol=1e-12)

    def test_target_too_large(self):
        with pytest.raises(ShapeError, match="exceeds"):
            ops.adaptive_avg_pool(Tensor(np.ones((2, 2))), (3, 2))

    @pytest.mark.parametrize("shape,target", [((2, 4, 4), (2, 2)), ((1, 5, 7), (3, 4)), ((2, 3, 6, 5, 4), (2, 2, 3))])
    def test_gradcheck(self, rng, shape, target):
        x = t64(rng.standard_normal(shape))
        assert max_grad_error(lambda: ops.adaptive_avg_pool(x, target), {"x": x}) < 1e-6


class TestSoftmax:
    def test_uniform(self):
        y = ops.softmax(Tensor(np.full(7, 2.5)), axis=0)
        np.testing.assert_allclose(y.data, np.full(7, 1 / 7))

    def test_closed_form(self):
        y = ops.softmax(Tensor(np.array([0.0, math.log(3.0)])), axis=0)
        np.testing.assert_allclose(y.data, [0.25, 0.75], rtol=1e-12)

    def test_stable_for_large_logits(self):
        y = ops.softmax(Tensor(np.array([1000.0, 1000.0])), axis=0)
        np.testing.assert_allclose(y.data, [0.5, 0.5])

    @pytest.mark.parametrize("shape,axis", [((5,), 0), ((2, 4), 1), ((3, 2, 4), 2), ((3, 4, 2), 0)])
    def test_gradcheck(self, rng, shape, axis):
        x = t64(rng.standard_normal(shape))
        assert max_grad_error(lambda: ops.softmax(x, axis), {"x": x}) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
    def test_range_sum_and_shift(self, logits, c):
        x = np.array(logits)
        y = ops.softmax(Tensor(x), axis=0).data
        assert np.all(y >= 0) and np.all(y <= 1)
        assert abs(y.sum() - 1) < 1e-12
        np.testing.assert_allclose(ops.softmax(Tensor(x + c), axis=0).data, y, atol=1e-12)


class TestUpsample:
    def test_nearest_definition(self):
        y = ops.upsample2x(Tensor(np.array([1.0, 2.0])), "nearest", dims=1)
        np.testing.assert_array_equal(y.data, [1, 1, 2, 2])

    @pytest.mark.parametrize("mode,dims", [("nearest", 2), ("bilinear", 2), ("trilinear", 3)])
    def test_constant(self, mode, dims):
        x = np.full((2,) + (3,) * dims, 1.25)
        y = ops.upsample2x(Tensor(x), mode, dims=dims)
        assert y.shape == (2,) + (6,) * dims
        np.testing.assert_allclose(y.data, 1.25)

    def test_bilinear_halfpixel_values(self):
        y = ops.upsample2x(Tensor(np.array([0.0, 4.0])), "linear", dims=1).data
        np.testing.assert_allclose(y, [0.0, 1.0, 3.0, 4.0])

    def test_factor16(self):
        y = ops.upsample(Tensor(np.arange(8.0).reshape(1, 2, 2, 2)), 16, "nearest", dims=3)
        assert y.shape == (1, 32, 32, 32)
        assert y.data[0, 31, 0, 31] == 5.0

    @pytest.mark.parametrize("mode,shape,dims", [
        ("nearest", (2, 3, 2), 2), ("bilinear", (2, 3, 4), 2), ("trilinear", (1, 2, 3, 2), 3), ("nearest", (1, 2, 2, 3), 3),
    ])
    def test_gradcheck(self, rng, mode, shape, dims):
        x = t64(rng.standard_normal(shape))
        assert max_grad_error(lambda: ops.upsample2x(x, mode, dims), {"x": x}) < 1e-6


class TestContract:
    def test_one_hot_selects_slice(self, rng):
        f = rng.standard_normal((2, 4, 3, 3))
        sel = np.zeros(4)
        sel[2] = 1.0
        y = ops.contract("cdhw,d->chw", Tensor(f), Tensor(sel))
        np.testing.assert_array_equal(y.data, f[:, 2])

    def test_triple_loop_oracle(self, rng):
        f = rng.standard_normal((2, 3, 2, 2))
        a = rng.standard_normal(3)
        ref = np.zeros((2, 2, 2))
        for c in range(2):
            for h in range(2):
                for w in range(2):
                    ref[c, h, w] = sum(f[c, d, h, w] * a[d] for d in range(3))
        np.testing.assert_allclose(ops.contract("cdhw,d->chw", Tensor(f), Tensor(a)).data, ref, atol=1e-14)

    @pytest.mark.parametrize("spec,sa,sb", [
        ("cdhw,d->chw", (2, 3, 2, 2), (3,)),
        ("cdhw,ec->edhw", (3, 2, 2, 2), (4, 3)),
        ("nhexy,hedxy->nhd", (2, 2, 3, 2, 2), (2, 3, 4, 2, 2)),
        ("ab,c->ac", (2, 3), (4,)),
    ])
    def test_gradcheck_both_operands(self, rng, spec, sa, sb):
        a = t64(rng.standard_normal(sa))
        b = t64(rng.standard_normal(sb))
        assert max_grad_error(lambda: ops.contract(spec, a, b), {"a": a, "b": b}) < 1e-6

    def test_extent_mismatch_names_index(self):
        with pytest.raises(ShapeError, match="'d'"):
            ops.contract("cd,d->c", Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


class TestElementwise:
    @pytest.mark.parametrize("shape", [(3,), (2, 3), (2, 2, 3)])
    def test_gradcheck_arith(self, rng, shape):
        a = t64(rng.standard_normal(shape))
        b = t64(rng.uniform(0.5, 2.0, shape))
        fn = lambda: ops.div(ops.add(ops.mul(a, b), ops.sub(a, 2.0)), b) * 3.0  # noqa: E731
        assert max_grad_error(fn, {"a": a, "b": b}) < PRIM_TOL

    @pytest.mark.parametrize("shape", [(5,), (2, 3), (2, 3, 2)])
    def test_gradcheck_relu_sigmoid(self, rng, shape):
        x = t64(rng.standard_normal(shape) + 0.05)
        assert max_grad_error(lambda: ops.relu(x), {"x": x}) < 1e-6
        assert max_grad_error(lambda: ops.sigmoid(x), {"x": x}) < 1e-6

    @pytest.mark.parametrize("shape,axis", [((4,), None), ((2, 3), 1), ((2, 3, 4), (0, 2))])
    def test_gradcheck_reductions(self, rng, shape, axis):
        x = t64(rng.standard_normal(shape))
        assert max_grad_error(lambda: ops.mean(x, axis), {"x": x}) < 1e-6
        assert max_grad_error(lambda: ops.sum(x, axis), {"x": x}) < 1e-6

    @pytest.mark.parametrize("axis", [0, 1, 2])
    def test_gradcheck_concat_flatten_expand(self, rng, axis):
        a = t64(rng.standard_normal((2, 3, 2)))
        b = t64(rng.standard_normal((2, 3, 2)))
        assert max_grad_error(lambda: ops.flatten(ops.concat([a, b], axis)), {"a": a, "b": b}) < 1e-6
        g = t64(rng.standard_normal((1, 3, 1)))
        assert max_grad_error(lambda: ops.expand(g, (2, 3, 4)), {"g": g}) < 1e-6

    def test_no_implicit_broadcast(self):
        with pytest.raises(ShapeError, match="scalar"):
            ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_sigmoid_range(self, rng):
        y = ops.sigmoid(Tensor(rng.standard_normal(100) * 30)).data
        assert np.all((y >= 0) & (y <= 1))


class TestTape:
    def test_unreachable_leaf_has_no_grad(self, rng):
        a = t64(rng.standard_normal(3))
        b = t64(rng.standard_normal(3))
        ops.sum(ops.mul(a, a)).backward()
        np.testing.assert_allclose(a.grad, 2 * a.data)
        assert b.grad is None

    def test_shared_subexpression_accumulates(self):
        a = t64([2.0])
        y = ops.add(ops.mul(a, a), ops.mul(a, 3.0))
        ops.sum(y).backward()
        np.testing.assert_allclose(a.grad, [7.0])

    def test_deep_chain_no_recursion_error(self):
        x = t64([1.0])
        y = x
        for _ in range(5000):
            y = ops.add(y, 0.0)
        ops.sum(y).backward()
        assert x.grad[0] == 1.0

    def test_no_grad_records_nothing(self):
        x = t64([1.0, 2.0])
        with no_grad():
            y = ops.mul(x, 2.0)
        assert not y.requires_grad

    def test_forward_deterministic(self, rng):
        x = Tensor(rng.standard_normal((2, 8, 8)).astype(np.float32))
        w = Tensor(rng.standard_normal((4, 2, 3, 3)).astype(np.float32))
        a = ops.conv2d(x, w, pad=1).data
        b = ops.conv2d(x, w, pad=1).data
        assert a.tobytes() == b.tobytes()

    def test_grads_finite(self, rng):
        x = t64(rng.standard_normal((2, 4, 4)))
        w = t64(rng.standard_normal((2, 2, 3, 3)))
        y = ops.softmax(ops.flatten(ops.conv2d(x, w, pad=1)), axis=0)
        ops.sum(ops.mul(y, y)).backward()
        assert np.all(np.isfinite(x.grad)) and np.all(np.isfinite(w.grad))

    def test_float32_preserved(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 4)).astype(np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        y = ops.instance_norm(ops.conv2d(x, w, pad=1), Tensor(np.ones(1, np.float32)), Tensor(np.zeros(1, np.float32)))
        assert y.dtype == np.float32


def test_sigmoid_keeps_relative_precision_for_negative_inputs():
    x = np.array([-30.0, -20.0, -5.0, 0.0, 5.0, 30.0], dtype=np.float32)
    got = ops.sigmoid(Tensor(x)).data
    ref = 1.0 / (1.0 + np.exp(-x.astype(np.float64)))
    np.testing.assert_allclose(got, ref, rtol=1e-6)
    assert got[0] > 0


def test_primitive_suite_covers_ops_and_passes():
    from scaa.gradcheck import primitive_suite

    errs = primitive_suite(seed=3)
    assert len(errs) >= 20
    assert max(errs.values()) < PRIM_TOL
