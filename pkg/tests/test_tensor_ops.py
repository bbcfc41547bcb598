"""Tensor primitive contracts: forward values, backward rules, invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustmix.tensor import (
    Tensor,
    add,
    argmax,
    backward,
    bias_add,
    channel_affine,
    clamp,
    conv2d,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    sign,
    softmax,
    softmax_cross_entropy,
    sub,
    weighted_sum,
)


def t(data, grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


class TestElementwise:
    def test_sign_values(self):
        assert np.array_equal(sign(t([-2.3, 0.0, 0.7])).data, [-1.0, 0.0, 1.0])

    def test_clamp_box(self):
        assert np.array_equal(clamp(t([1.05, -0.1, 0.5]), 0, 1).data, [1.0, 0.0, 0.5])

    def test_add(self):
        assert np.array_equal(add(t([1, 2]), t([3, 4])).data, [4.0, 6.0])

    def test_sub_mul_scale(self):
        assert np.array_equal(sub(t([3, 1]), t([1, 1])).data, [2.0, 0.0])
        assert np.array_equal(mul(t([2, 3]), t([4, 5])).data, [8.0, 15.0])
        assert np.array_equal(scale(t([2, 3]), -2.0).data, [-4.0, -6.0])

    def test_relu(self):
        assert np.array_equal(relu(t([-1.0, 0.0, 2.5])).data, [0.0, 0.0, 2.5])

    def test_scalar_broadcast(self):
        assert np.array_equal(add(t([1.0, 2.0]), 1.5).data, [2.5, 3.5])
        assert np.array_equal(mul(t([1.0, 2.0]), 3.0).data, [3.0, 6.0])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            add(t([1, 2]), t([1, 2, 3]))
        with pytest.raises(ValueError, match="shape mismatch"):
            mul(t([[1, 2]]), t([1, 2]))

    def test_clamp_gradient_zero_at_boundary(self):
        x = t([0.0, 0.5, 1.0, 2.0], grad=True)
        backward(reduce_sum(clamp(x, 0.0, 1.0)))
        assert np.array_equal(x.grad, [0.0, 1.0, 0.0, 0.0])

    def test_relu_gradient_zero_at_kink(self):
        x = t([-1.0, 0.0, 3.0], grad=True)
        backward(reduce_sum(relu(x)))
        assert np.array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_sign_output_is_constant(self):
        x = t([1.0, -2.0], grad=True)
        s = sign(x)
        assert not s.requires_grad


class TestMatmul:
    def test_identity(self):
        out = matmul(t([[1, 0], [0, 1]]), t([[5, 6], [7, 8]]))
        assert np.array_equal(out.data, [[5.0, 6.0], [7.0, 8.0]])

    def test_inner_product(self):
        assert np.array_equal(matmul(t([[1, 2]]), t([[3], [4]])).data, [[11.0]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            matmul(t([[1, 2]]), t([[1, 2]]))

    def test_backward_of_sum_is_ones_bt(self):
        a = t(np.arange(6, dtype=float).reshape(2, 3), grad=True)
        b = t(np.arange(12, dtype=float).reshape(3, 4))
        backward(reduce_sum(matmul(a, b)))
        assert np.allclose(a.grad, np.ones((2, 4)) @ b.data.T)


class TestConv2d:
    def test_sum_of_ones(self):
        x = t(np.ones((1, 1, 3, 3)))
        k = t(np.ones((1, 1, 3, 3)))
        assert conv2d(x, k, 1, 0).data.reshape(()) == 9.0

    def test_delta_kernel_identity(self):
        rng = np.random.default_rng(0)
        x = rng.random((2, 1, 5, 5))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = conv2d(t(x), t(k), 1, 1)
        assert np.allclose(out.data, x)

    def test_non_integral_output_rejected(self):
        with pytest.raises(ValueError, match="non-integral"):
            conv2d(t(np.ones((1, 1, 5, 5))), t(np.ones((1, 1, 2, 2))), 2, 0)

    def test_kernel_too_large_rejected(self):
        with pytest.raises(ValueError, match="larger than"):
            conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 5, 5))), 1, 0)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channels"):
            conv2d(t(np.ones((1, 2, 4, 4))), t(np.ones((1, 3, 2, 2))), 1, 0)

    @pytest.mark.parametrize("stride,padding,kernel", [(1, 1, 3), (1, 0, 2), (2, 1, 4), (2, 0, 2)])
    def test_output_shape(self, stride, padding, kernel):
        h = 8
        out = conv2d(t(np.ones((2, 3, h, h))), t(np.ones((5, 3, kernel, kernel))), stride, padding)
        expect = (h + 2 * padding - kernel) // stride + 1
        assert out.shape == (2, 5, expect, expect)


class TestReduce:
    def test_mean(self):
        assert reduce_mean(t([1.0, 2.0, 3.0])).data == 2.0

    def test_argmax_tie_lowest_index(self):
        assert argmax(t([0.2, 0.9, 0.9])) == 1

    def test_sum_axis(self):
        assert np.array_equal(reduce_sum(t([[1, 2], [3, 4]]), axis=0).data, [4.0, 6.0])

    def test_invalid_axis_rejected(self):
        for fn in (reduce_sum, reduce_mean, argmax):
            with pytest.raises(ValueError, match="axis"):
                fn(t([[1.0, 2.0]]), axis=2)

    def test_mean_axis_backward(self):
        x = t([[1.0, 2.0], [3.0, 4.0]], grad=True)
        backward(reduce_sum(reduce_mean(x, axis=1)))
        assert np.array_equal(x.grad, np.full((2, 2), 0.5))


class TestSoftmaxCrossEntropy:
    def test_uniform_case(self):
        loss = softmax_cross_entropy(t([[0.0, 0.0]]), np.array([0]))
        assert loss.item() == pytest.approx(np.log(2), abs=1e-12)

    def test_stabilized_large_logits(self):
        loss = softmax_cross_entropy(t([[1000.0, 0.0]]), np.array([0]))
        assert np.isfinite(loss.item())
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="label out of range"):
            softmax_cross_entropy(t([[0.0, 0.0]]), np.array([2]))

    def test_backward_is_softmax_minus_onehot_over_n(self):
        logits = t([[1.0, -1.0], [0.5, 0.5]], grad=True)
        y = np.array([0, 1])
        backward(softmax_cross_entropy(logits, y))
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        p[np.arange(2), y] -= 1
        assert np.allclose(logits.grad, p / 2, atol=1e-15)


class TestHelpers:
    def test_softmax_rows_sum_to_one(self):
        s = softmax(t(np.random.default_rng(0).standard_normal((4, 5))), axis=1)
        assert np.allclose(s.data.sum(axis=1), 1.0, atol=1e-12)

    def test_bias_add_backward(self):
        x = t(np.ones((2, 3, 2, 2)), grad=True)
        b = t(np.zeros(3), grad=True)
        backward(reduce_sum(bias_add(x, b)))
        assert np.array_equal(b.grad, [8.0, 8.0, 8.0])
        assert np.array_equal(x.grad, np.ones((2, 3, 2, 2)))

    def test_channel_affine_matches_manual(self):
        x = np.random.default_rng(1).random((2, 3, 4, 4))
        out = channel_affine(t(x), t([2.0, 1.0, 0.5]), t([0.1, 0.0, -0.1]))
        manual = x * np.array([2.0, 1.0, 0.5]).reshape(1, 3, 1, 1) + np.array([0.1, 0.0, -0.1]).reshape(1, 3, 1, 1)
        assert np.allclose(out.data, manual, atol=1e-15)

    def test_weighted_sum_matches_manual(self):
        rng = np.random.default_rng(2)
        outs = [t(rng.standard_normal((3, 4))) for _ in range(2)]
        w = rng.random((3, 2))
        got = weighted_sum(outs, t(w))
        manual = outs[0].data * w[:, :1] + outs[1].data * w[:, 1:]
        assert np.allclose(got.data, manual, atol=1e-14)

    def test_reshape_backward(self):
        x = t(np.arange(6, dtype=float), grad=True)
        backward(reduce_sum(mul(reshape(x, (2, 3)), reshape(x, (2, 3)))))
        assert np.allclose(x.grad, 2 * x.data)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = t(np.random.default_rng(0).random((3, 4)), grad=True)
        backward(reduce_sum(x))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_square_gradient(self):
        x = t([3.0], grad=True)
        backward(reduce_sum(mul(x, x)))
        assert np.array_equal(x.grad, [6.0])

    def test_non_scalar_loss_rejected(self):
        x = t([1.0, 2.0], grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(mul(x, x))

    def test_cycle_rejected(self):
        x = t([1.0], grad=True)
        y = add(x, x)
        y._parents = (y,)  # forge a self-loop
        with pytest.raises(ValueError, match="cycle"):
            backward(y)

    def test_shared_subgraph_single_accumulation(self):
        # y = x*x + x*x reuses the same product node through two paths
        x = t([2.0], grad=True)
        sq = mul(x, x)
        backward(add(sq, sq))
        assert np.array_equal(x.grad, [8.0])

    def test_deterministic_bitwise(self):
        rng = np.random.default_rng(3)
        xv = rng.standard_normal((4, 5))
        wv = rng.standard_normal((5, 3))

        def run():
            x = t(xv, grad=True)
            w = t(wv, grad=True)
            backward(reduce_sum(relu(matmul(x, w))))
            return x.grad.copy(), w.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])

    def test_gradient_linearity(self):
        rng = np.random.default_rng(4)
        xv = rng.standard_normal(6)

        def grad_of(fn):
            x = t(xv, grad=True)
            backward(fn(x))
            return x.grad

        g_sum = grad_of(lambda x: add(reduce_sum(mul(x, x)), reduce_sum(scale(x, 3.0))))
        g_parts = grad_of(lambda x: reduce_sum(mul(x, x))) + grad_of(lambda x: reduce_sum(scale(x, 3.0)))
        assert np.allclose(g_sum, g_parts, rtol=1e-12, atol=1e-12)


@st.composite
def small_arrays(draw):
    shape = draw(st.sampled_from([(3,), (2, 3), (2, 2, 2)]))
    vals = draw(
        st.lists(
            st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
            min_size=int(np.prod(shape)),
            max_size=int(np.prod(shape)),
        )
    )
    return np.asarray(vals).reshape(shape)


class TestFiniteness:
    @settings(max_examples=60, deadline=None)
    @given(small_arrays())
    def test_primitives_stay_finite(self, arr):
        x = t(arr, grad=True)
        outs = [
            add(x, x), sub(x, scale(x, 0.5)), mul(x, 0.5), clamp(x, -1e6, 1e6),
            sign(x), relu(x),
        ]
        for out in outs:
            assert np.all(np.isfinite(out.data))
        loss = reduce_mean(mul(x, 1e-6))
        backward(loss)
        assert np.all(np.isfinite(x.grad))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False), min_size=4, max_size=4))
    def test_cross_entropy_finite_at_extremes(self, vals):
        logits = t(np.asarray(vals).reshape(2, 2), grad=True)
        loss = softmax_cross_entropy(logits, np.array([0, 1]))
        assert np.isfinite(loss.item())
        backward(loss)
        assert np.all(np.isfinite(logits.grad))
