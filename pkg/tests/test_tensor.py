import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smvit import tensor as T
from smvit.errors import DegenerateBatchError, LabelError, ShapeError, TilingError
from smvit.tensor import Tensor


def naive_matmul(a, b):
    # independent triple-loop oracle
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def naive_conv2d(x, k, stride, pad):
    # sliding-window sum oracle, single image
    B, C, H, W = x.shape
    O, C2, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[b, c, i * stride + di, j * stride + dj] * k[o, c, di, dj]
                    out[b, o, i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        out = T.matmul(Tensor(np.eye(2)), Tensor(b))
        npt.assert_array_equal(out.data, b)

    def test_against_triple_loop(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        expected = naive_matmul(a, b)
        npt.assert_array_equal(expected, [[19.0, 22.0], [43.0, 50.0]])
        npt.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, expected)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            a = rng.normal(size=(4, 3))
            b = rng.normal(size=(3, 5))
            npt.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_batched(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(2, 3, 4, 5))
        b = rng.normal(size=(2, 3, 5, 6))
        out = T.matmul(Tensor(a), Tensor(b))
        npt.assert_allclose(out.data, np.matmul(a, b))


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 1, 5, 5))
        k = np.ones((1, 1, 1, 1))
        npt.assert_array_equal(T.conv2d(Tensor(x), Tensor(k)).data, x)

    def test_sliding_window_sum(self):
        x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
        k = np.ones((1, 1, 2, 2))
        out = T.conv2d(Tensor(x), Tensor(k), stride=1, padding=0)
        npt.assert_array_equal(out.data[0, 0], [[12.0, 16.0], [24.0, 28.0]])
        npt.assert_array_equal(out.data, naive_conv2d(x, k, 1, 0))

    def test_constant_preserved_by_averaging_kernel(self):
        c = 3.7
        x = np.full((1, 1, 6, 6), c)
        k = np.full((1, 1, 3, 3), 1.0 / 9.0)
        out = T.conv2d(Tensor(x), Tensor(k))
        npt.assert_allclose(out.data, c, rtol=1e-12)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_random_against_oracle(self, stride, pad):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 6, 5))
        k = rng.normal(size=(4, 3, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad)
        npt.assert_allclose(out.data, naive_conv2d(x, k, stride, pad), atol=1e-12)

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


class TestDepthwiseConv2d:
    def test_per_channel_scaling(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 2, 4, 4))
        k = np.array([[[1.0]], [[2.0]]])
        out = T.depthwise_conv2d(Tensor(x), Tensor(k))
        npt.assert_allclose(out.data[:, 0], x[:, 0])
        npt.assert_allclose(out.data[:, 1], 2 * x[:, 1])

    def test_zero_kernel(self):
        x = np.ones((1, 3, 4, 4))
        out = T.depthwise_conv2d(Tensor(x), Tensor(np.zeros((3, 3, 3))), padding=1)
        npt.assert_array_equal(out.data, 0)

    def test_channel_independence(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 3, 5, 5))
        k = rng.normal(size=(3, 3, 3))
        base = T.depthwise_conv2d(Tensor(x), Tensor(k), padding=1).data
        x2 = x.copy()
        x2[:, 1] = 0
        out2 = T.depthwise_conv2d(Tensor(x2), Tensor(k), padding=1).data
        npt.assert_array_equal(out2[:, 0], base[:, 0])
        npt.assert_array_equal(out2[:, 2], base[:, 2])
        npt.assert_array_equal(out2[:, 1], 0)

    def test_matches_grouped_dense_conv(self):
        # each depthwise channel equals a dense conv with the other channels zeroed
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 3, 6, 6))
        k = rng.normal(size=(3, 3, 3))
        dense = np.zeros((3, 3, 3, 3))
        for c in range(3):
            dense[c, c] = k[c]
        out = T.depthwise_conv2d(Tensor(x), Tensor(k), stride=2, padding=1)
        ref = naive_conv2d(x, dense, 2, 1)
        npt.assert_allclose(out.data, ref, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.depthwise_conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 1, 1))))


class TestBatchNorm:
    def test_constant_input_zeroed(self):
        x = np.full((2, 3, 2, 2), 5.0)
        st_ = T.BatchNorm2dState.create(3)
        out = T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), st_, "train")
        assert np.abs(out.data).max() < 1e-3

    def test_two_value_batch(self):
        # hand evaluation: mu=2, population var=1, eps=1e-5
        x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        st_ = T.BatchNorm2dState.create(1)
        out = T.batchnorm2d(Tensor(x), Tensor([1.0]), Tensor([0.0]), st_, "train")
        expected = (x - 2.0) / math.sqrt(1.0 + 1e-5)
        npt.assert_allclose(out.data, expected, rtol=1e-12)
        npt.assert_allclose(out.data.reshape(-1), [-0.999995, 0.999995], atol=1e-6)

    def test_affine_contract(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(4, 2, 3, 3))
        st1 = T.BatchNorm2dState.create(2)
        st2 = T.BatchNorm2dState.create(2)
        base = T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st1, "train")
        scaled = T.batchnorm2d(Tensor(x), Tensor([2.0, 2.0]), Tensor([5.0, 5.0]), st2, "train")
        npt.assert_allclose(scaled.data, 2 * base.data + 5, rtol=1e-12)

    def test_train_mode_normalizes(self):
        rng = np.random.default_rng(8)
        x = rng.normal(loc=3.0, scale=2.0, size=(4, 3, 4, 4))
        st_ = T.BatchNorm2dState.create(3)
        out = T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), st_, "train")
        mu = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        assert np.abs(mu).max() < 1e-5
        assert np.abs(var - 1).max() < 1e-4

    def test_running_stats_and_infer(self):
        rng = np.random.default_rng(9)
        st_ = T.BatchNorm2dState.create(1, momentum=0.1)
        x = rng.normal(loc=2.0, size=(8, 1, 4, 4))
        T.batchnorm2d(Tensor(x), Tensor([1.0]), Tensor([0.0]), st_, "train")
        expected_mean = 0.9 * 0.0 + 0.1 * x.mean()
        npt.assert_allclose(st_.running_mean, [expected_mean], rtol=1e-12)
        out = T.batchnorm2d(Tensor(x), Tensor([1.0]), Tensor([0.0]), st_, "infer")
        expected = (x - st_.running_mean) / np.sqrt(st_.running_var + 1e-5)
        npt.assert_allclose(out.data, expected, rtol=1e-10)

    def test_degenerate_batch(self):
        st_ = T.BatchNorm2dState.create(1)
        with pytest.raises(DegenerateBatchError):
            T.batchnorm2d(Tensor(np.ones((1, 1, 1, 1))), Tensor([1.0]), Tensor([0.0]), st_, "train")


class TestSilu:
    def test_zero_fixed_point(self):
        assert T.silu(Tensor([0.0])).data[0] == 0.0

    def test_value_at_one(self):
        # direct evaluation of x / (1 + e^-x)
        npt.assert_allclose(T.silu(Tensor([1.0])).data[0], 1.0 / (1.0 + math.exp(-1.0)), rtol=1e-12)
        npt.assert_allclose(T.silu(Tensor([1.0])).data[0], 0.7310586, atol=1e-7)

    def test_large_negative(self):
        v = T.silu(Tensor([-20.0])).data[0]
        assert abs(v) < 1e-7
        npt.assert_allclose(v, -20.0 / (1.0 + math.exp(20.0)), rtol=1e-9)

    @given(st.floats(min_value=-50, max_value=50))
    def test_global_minimum_bound(self, x):
        assert T.silu(Tensor([x])).data[0] >= -0.279


class TestSoftmax:
    def test_symmetry(self):
        npt.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_direct_evaluation(self):
        x = np.array([1.0, 2.0, 3.0])
        e = np.exp(x)
        npt.assert_allclose(T.softmax(Tensor(x)).data, e / e.sum(), rtol=1e-12)
        npt.assert_allclose(T.softmax(Tensor(x)).data, [0.0900, 0.2447, 0.6652], atol=5e-5)

    @given(st.lists(st.floats(min_value=-30, max_value=30), min_size=1, max_size=8),
           st.floats(min_value=-20, max_value=20))
    @settings(max_examples=50)
    def test_shift_invariance_and_rows(self, xs, c):
        x = np.array(xs)
        a = T.softmax(Tensor(x)).data
        b = T.softmax(Tensor(x + c)).data
        assert abs(a.sum() - 1) < 1e-6
        assert (a > 0).all()
        assert np.abs(a - b).max() < 1e-7

    def test_large_values_stable(self):
        out = T.softmax(Tensor([1000.0, 1000.0])).data
        npt.assert_allclose(out, [0.5, 0.5])


class TestGlobalAvgPool:
    def test_constant(self):
        x = np.full((2, 3, 4, 4), 1.3)
        npt.assert_allclose(T.global_avg_pool(Tensor(x)).data, 1.3)

    def test_mean(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        assert T.global_avg_pool(Tensor(x)).data[0, 0] == 2.5

    def test_shape_contract(self):
        x = np.zeros((3, 8, 5, 7))
        assert T.global_avg_pool(Tensor(x)).shape == (3, 8)


class TestPatches:
    def test_unit_patch_is_permutation(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 3, 4, 4))
        out = T.unfold_patches(Tensor(x), 1, 1)
        assert out.shape == (1, 16, 1, 3)
        assert sorted(out.data.reshape(-1)) == sorted(x.reshape(-1))

    def test_full_image_patch(self):
        x = np.arange(4.0).reshape(1, 1, 2, 2)
        out = T.unfold_patches(Tensor(x), 2, 2)
        assert out.shape == (1, 1, 4, 1)
        npt.assert_array_equal(out.data.reshape(-1), [0, 1, 2, 3])

    @pytest.mark.parametrize("B,C,H,W,ph,pw", [
        (1, 1, 2, 2, 2, 2), (2, 3, 8, 8, 2, 2), (1, 4, 6, 4, 3, 2), (2, 2, 4, 6, 1, 3),
    ])
    def test_fold_unfold_identity(self, B, C, H, W, ph, pw):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(B, C, H, W))
        t = T.unfold_patches(Tensor(x), pw, ph)
        back = T.fold_patches(t, H, W, pw, ph)
        npt.assert_array_equal(back.data, x)  # bitwise

    def test_non_divisible_rejected(self):
        with pytest.raises(TilingError):
            T.unfold_patches(Tensor(np.zeros((1, 1, 5, 4))), 2, 2)

    def test_fold_geometry_rejected(self):
        with pytest.raises(TilingError):
            T.fold_patches(Tensor(np.zeros((1, 4, 4, 1))), 5, 4, 2, 2)


class TestLinear:
    def test_identity(self):
        x = np.array([[1.0, 2.0]])
        out = T.linear(Tensor(x), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        npt.assert_array_equal(out.data, x)

    def test_hand_evaluation(self):
        out = T.linear(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 2.0]]), Tensor([3.0, 3.0]))
        npt.assert_array_equal(out.data, [[4.0, 7.0]])

    def test_bias_gradient_is_ones(self):
        b = Tensor(np.zeros(3), requires_grad=True)
        x = Tensor(np.random.default_rng(12).normal(size=(4, 2)))
        w = Tensor(np.zeros((2, 3)))
        out = T.sum_all(T.linear(x, w, b))
        out.backward()
        npt.assert_array_equal(b.grad, [4.0, 4.0, 4.0])

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = np.zeros((2, 4))
        out = T.cross_entropy(Tensor(logits), [0, 3])
        npt.assert_allclose(out.item(), math.log(4), rtol=1e-9)
        npt.assert_allclose(out.item(), 1.386294, atol=1e-6)

    def test_near_perfect(self):
        logits = np.zeros((1, 5))
        logits[0, 2] = 30.0
        out = T.cross_entropy(Tensor(logits), [2])
        assert out.item() < 1e-9

    def test_out_of_range_label(self):
        with pytest.raises(LabelError):
            T.cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(3, 4)))
        rep = T.grad_check(lambda t: T.cross_entropy(t, [0, 2, 1]), x, step=1e-5, tol=1e-4,
                           name="cross_entropy")
        assert rep.passed, rep


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        loss = T.sum_all(T.mul(x, x))
        loss.backward()
        npt.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)

    def test_disconnected_tensor(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones(3), requires_grad=True)
        T.sum_all(x).backward()
        assert y.grad is None

    def test_accumulation(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = T.add(x, x)
        T.sum_all(y).backward()
        npt.assert_array_equal(x.grad, [2.0, 2.0])

    def test_accumulation_equals_sum_of_single_uses(self):
        rng = np.random.default_rng(14)
        v = rng.normal(size=4)

        x = Tensor(v.copy(), requires_grad=True)
        T.sum_all(T.add(T.mul(x, x), T.mul(x, 3.0))).backward()
        both = x.grad.copy()

        x1 = Tensor(v.copy(), requires_grad=True)
        T.sum_all(T.mul(x1, x1)).backward()
        x2 = Tensor(v.copy(), requires_grad=True)
        T.sum_all(T.mul(x2, 3.0)).backward()
        npt.assert_array_equal(both, x1.grad + x2.grad)

    def test_non_scalar_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros(3), requires_grad=True).backward()


class TestGradCheck:
    def test_sum_of_squares_passes(self):
        x = Tensor(np.random.default_rng(15).normal(size=6))
        rep = T.grad_check(lambda t: T.sum_all(T.mul(t, t)), x, name="sum_sq")
        assert rep.passed and rep.max_rel_error < 1e-6

    def test_silu_linear_chain(self):
        rng = np.random.default_rng(16)
        w = Tensor(rng.normal(size=(4, 3)))
        b = Tensor(rng.normal(size=3))
        x = Tensor(rng.normal(size=(2, 4)))
        rep = T.grad_check(lambda t: T.sum_all(T.silu(T.linear(t, w, b))), x, name="silu.linear")
        assert rep.passed and rep.max_rel_error < 1e-6

    def test_negative_control(self):
        # deliberately wrong backward: gradient scaled by 2
        def bad(t):
            out = T.sum_all(T.mul(t, t))
            orig = out._backward

            def doubled(g):
                orig(2 * g)

            out._backward = doubled
            return out

        x = Tensor(np.random.default_rng(17).normal(size=4))
        rep = T.grad_check(bad, x, name="bad")
        assert not rep.passed


def _case_matmul(rng):
    b = Tensor(rng.normal(size=(3, 4)))
    return lambda t: T.sum_all(T.silu(T.matmul(t, b))), rng.normal(size=(2, 3))


def _case_conv2d(rng):
    k = Tensor(rng.normal(size=(2, 2, 3, 3)))
    return lambda t: T.sum_all(T.silu(T.conv2d(t, k, 2, 1))), rng.normal(size=(1, 2, 5, 5))


def _case_conv2d_kernel(rng):
    x = Tensor(rng.normal(size=(1, 2, 4, 4)))
    return lambda t: T.sum_all(T.silu(T.conv2d(x, t, 1, 1))), rng.normal(size=(3, 2, 3, 3))


def _case_depthwise(rng):
    k = Tensor(rng.normal(size=(2, 3, 3)))
    return lambda t: T.sum_all(T.silu(T.depthwise_conv2d(t, k, 1, 1))), rng.normal(size=(1, 2, 4, 4))


def _case_batchnorm(rng):
    gamma = Tensor(rng.normal(size=2))
    beta = Tensor(rng.normal(size=2))

    def f(t):
        return T.sum_all(
            T.silu(T.batchnorm2d(t, gamma, beta, T.BatchNorm2dState.create(2), "train"))
        )

    return f, rng.normal(size=(2, 2, 3, 3))


def _case_layernorm(rng):
    gamma = Tensor(rng.normal(size=4))
    beta = Tensor(rng.normal(size=4))
    return lambda t: T.sum_all(T.silu(T.layernorm(t, gamma, beta))), rng.normal(size=(3, 4))


def _case_silu(rng):
    return lambda t: T.sum_all(T.mul(T.silu(t), T.silu(t))), rng.normal(size=7)


def _case_softmax(rng):
    w = Tensor(rng.normal(size=(2, 5)))
    return lambda t: T.sum_all(T.mul(T.softmax(t), w)), rng.normal(size=(2, 5))


def _case_gap(rng):
    return lambda t: T.sum_all(T.silu(T.global_avg_pool(t))), rng.normal(size=(2, 3, 3, 4))


def _case_unfold_fold(rng):
    def f(t):
        return T.sum_all(T.silu(T.fold_patches(T.unfold_patches(t, 2, 2), 4, 4, 2, 2)))

    return f, rng.normal(size=(1, 2, 4, 4))


def _case_linear(rng):
    w = Tensor(rng.normal(size=(4, 3)))
    b = Tensor(rng.normal(size=3))
    return lambda t: T.sum_all(T.silu(T.linear(t, w, b))), rng.normal(size=(2, 4))


def _case_cross_entropy(rng):
    return lambda t: T.cross_entropy(t, [1, 0, 2]), rng.normal(size=(3, 4))


OP_CASES = {
    "matmul": _case_matmul,
    "conv2d": _case_conv2d,
    "conv2d_kernel": _case_conv2d_kernel,
    "depthwise_conv2d": _case_depthwise,
    "batchnorm2d": _case_batchnorm,
    "layernorm": _case_layernorm,
    "silu": _case_silu,
    "softmax": _case_softmax,
    "global_avg_pool": _case_gap,
    "unfold_fold": _case_unfold_fold,
    "linear": _case_linear,
    "cross_entropy": _case_cross_entropy,
}


@pytest.mark.parametrize("op_name", sorted(OP_CASES))
def test_gradcheck_all_ops_random_inputs(op_name):
    # >= 20 random small inputs per op, 64-bit, h=1e-5, tol 1e-6
    for trial in range(20):
        rng = np.random.default_rng(1000 + trial)
        f, x = OP_CASES[op_name](rng)
        rep = T.grad_check(f, Tensor(np.asarray(x, dtype=np.float64)), step=1e-5,
                           tol=1e-6, name=op_name)
        assert rep.passed, f"trial {trial}: {rep}"


def test_gradcheck_32bit_mode():
    # 32-bit with h=1e-3 must stay under 1e-3
    for trial in range(5):
        rng = np.random.default_rng(2000 + trial)
        f, x = OP_CASES["linear"](rng)
        rep = T.grad_check(f, Tensor(np.asarray(x, dtype=np.float32)), step=1e-3,
                           tol=1e-3, name="linear32")
        assert rep.passed, rep
