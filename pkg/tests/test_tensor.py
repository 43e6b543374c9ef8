import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subcond import tensor as T
from subcond.errors import DimensionError, InputError, NonFiniteError, UsageError
from subcond.gradcheck import check_params
from subcond.optim import AdamWState, adamw_step
from subcond.tensor import Tensor


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.5, -2.0], [0.25, 3.0]])
        assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_hand_product(self):
        out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
        assert np.array_equal(out.data, [[19, 22], [43, 50]])

    def test_annihilator(self):
        m = np.random.default_rng(0).normal(size=(3, 4))
        assert not T.matmul(Tensor(np.zeros((2, 3))), Tensor(m)).data.any()

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(1).normal(size=(2, 1, 5, 4))
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        assert np.array_equal(out.data, x)

    def test_hand_value(self):
        out = T.conv2d(Tensor([[[[1, 2], [3, 4]]]]), Tensor([[[[1, 0], [0, 1]]]]))
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 5.0

    def test_zero_kernel(self):
        x = np.random.default_rng(2).normal(size=(1, 3, 6, 6))
        assert not T.conv2d(Tensor(x), Tensor(np.zeros((2, 3, 3, 3))), 2, 1).data.any()

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 7, 6))
        k = rng.normal(size=(4, 3, 3, 2))
        stride, pad = 2, 1
        got = T.conv2d(Tensor(x), Tensor(k), stride, pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        oh, ow = (7 + 2 - 3) // 2 + 1, (6 + 2 - 2) // 2 + 1
        ref = np.zeros((2, 4, oh, ow))
        for n in range(2):
            for o in range(4):
                for i in range(oh):
                    for j in range(ow):
                        ref[n, o, i, j] = (xp[n, :, i * 2 : i * 2 + 3, j * 2 : j * 2 + 2] * k[o]).sum()
        np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), stride=st.integers(1, 3), pad=st.integers(0, 2))
    def test_linear_in_kernel(self, seed, stride, pad):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 2, 6, 5)))
        k1, k2 = rng.normal(size=(2, 3, 2, 3, 3))
        lhs = T.conv2d(x, Tensor(k1 + k2), stride, pad).data
        rhs = T.conv2d(x, Tensor(k1), stride, pad).data + T.conv2d(x, Tensor(k2), stride, pad).data
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


class TestActivation:
    def test_identity(self):
        x = Tensor([-1.0, 2.0])
        assert np.array_equal(T.activation(x, "identity").data, x.data)

    def test_relu(self):
        assert np.array_equal(T.activation(Tensor([-2.0, 3.0]), "relu").data, [0.0, 3.0])

    def test_elu(self):
        assert T.activation(Tensor([-1.0]), "elu").data[0] == pytest.approx(-0.6321205588285577, abs=1e-15)

    def test_gelu_exact_form(self):
        x = np.array([-1.3, 0.0, 0.7])
        expect = [v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in x]
        np.testing.assert_allclose(T.activation(Tensor(x), "gelu").data, expect, rtol=1e-15)

    def test_unknown(self):
        with pytest.raises(InputError):
            T.activation(Tensor([1.0]), "tanh")


class TestCrossEntropy:
    def test_uniform(self):
        loss = T.softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-15)

    def test_hand_softmax(self):
        loss = T.softmax_cross_entropy(Tensor([[0.0, math.log(3)]]), [1])
        assert loss.item() == pytest.approx(0.2876820724517809, abs=1e-15)

    def test_huge_margin(self):
        loss = T.softmax_cross_entropy(Tensor([[1000.0, 0.0, 0.0]]), [0])
        assert loss.item() == pytest.approx(0.0, abs=1e-300)

    def test_label_out_of_range(self):
        with pytest.raises(InputError):
            T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.random.default_rng(0).normal(size=(2, 3, 4)))
        x.sum().backward()
        assert np.array_equal(x.grad, np.ones((2, 3, 4)))

    def test_quadratic(self):
        x = leaf([1.0, 2.0])
        (x * x).sum().backward()
        assert np.array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar(self):
        with pytest.raises(UsageError):
            T.backward(leaf([1.0, 2.0]) * 2.0)

    def test_twice(self):
        x = leaf([1.0, 2.0])
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(UsageError):
            loss.backward()

    def test_graph_is_released(self):
        x = leaf([1.0, 2.0])
        y = x * 3.0
        loss = y.sum()
        loss.backward()
        assert y._parents == () and loss._parents == ()

    def test_shared_leaf_accumulates(self):
        x = leaf([3.0])
        (x * x + x).sum().backward()
        assert x.grad[0] == 7.0


class TestAdamW:
    def test_first_step(self):
        p = leaf([1.0])
        p.grad = np.array([1.0])
        adamw_step({"p": p}, AdamWState(lr=0.1, weight_decay=0.0))
        assert p.data[0] == pytest.approx(0.9, abs=1e-8)

    def test_decay_only(self):
        p = leaf([2.0])
        p.grad = np.array([0.0])
        adamw_step({"p": p}, AdamWState(lr=0.1, weight_decay=0.01))
        assert p.data[0] == 2.0 * (1 - 0.001)

    def test_zero_lr(self):
        p = leaf([1.0, -4.0])
        p.grad = np.array([3.0, 1.0])
        adamw_step({"p": p}, AdamWState(lr=0.0))
        assert np.array_equal(p.data, [1.0, -4.0])

    def test_step_counter_and_buffers(self):
        p = leaf(np.ones((2, 3)))
        state = AdamWState()
        for k in range(3):
            p.grad = np.full((2, 3), 0.5)
            adamw_step({"p": p}, state)
            assert state.step == k + 1
        assert state.exp_avg["p"].shape == state.exp_avg_sq["p"].shape == (2, 3)

    def test_non_finite_grad_names_parameter(self):
        p = leaf([1.0])
        p.grad = np.array([np.nan])
        with pytest.raises(NonFiniteError, match="weights"):
            adamw_step({"weights": p}, AdamWState())

    def test_untouched_parameter_skipped(self):
        p = leaf([1.0])
        adamw_step({"p": p}, AdamWState(lr=0.1))
        assert p.data[0] == 1.0


def _gc(loss_fn, params):
    errs = check_params(loss_fn, params)
    assert max(errs.values()) < 1e-4, errs


class TestGradients:
    @pytest.mark.parametrize("shape", [(1, 1, 1), (2, 3, 4), (5, 2, 3), (3, 7, 2)])
    def test_matmul(self, shape):
        p, q, r = shape
        rng = np.random.default_rng(sum(shape))
        a, b = leaf(rng.normal(size=(p, q))), leaf(rng.normal(size=(q, r)))
        w = rng.normal(size=(p, r))
        _gc(lambda: (T.matmul(a, b) * w).sum(), {"a": a, "b": b})

    @pytest.mark.parametrize("kind", ["identity", "relu", "elu", "gelu"])
    def test_activation(self, kind):
        rng = np.random.default_rng(7)
        x = leaf(rng.normal(size=(4, 5)) + 0.05)
        w = rng.normal(size=(4, 5))
        _gc(lambda: (T.activation(x, kind) * w).sum(), {"x": x})

    @pytest.mark.parametrize("cfg", [
        ((1, 1, 4, 4), (1, 1, 1, 1), 1, 0),
        ((2, 3, 5, 6), (4, 3, 3, 3), 1, 1),
        ((2, 2, 7, 5), (3, 2, 2, 3), 2, 0),
        ((1, 3, 6, 6), (2, 3, 3, 1), 3, 2),
        ((2, 1, 4, 9), (2, 1, 1, 9), 1, (0, 4)),
    ])
    def test_conv2d(self, cfg):
        xs, ks, stride, pad = cfg
        rng = np.random.default_rng(len(xs) + ks[0])
        x, k = leaf(rng.normal(size=xs)), leaf(rng.normal(size=ks))
        w = rng.normal(size=T.conv2d(x, k, stride, pad).shape)
        _gc(lambda: (T.conv2d(x, k, stride, pad) * w).sum(), {"x": x, "k": k})

    def test_cross_entropy(self):
        rng = np.random.default_rng(11)
        z = leaf(rng.normal(size=(6, 4)))
        labels = rng.integers(0, 4, 6)
        _gc(lambda: T.softmax_cross_entropy(z, labels), {"z": z})

    def test_gather_scatter_mean_reshape(self):
        rng = np.random.default_rng(12)
        x = leaf(rng.normal(size=(5, 3)))
        w = rng.normal(size=(5, 3))

        def loss():
            a = T.take_rows(x, [0, 3, 3])
            b = T.take_rows(x, [1])
            y = T.scatter_rows([a, b], [[4, 0, 2], [1]], 5, (3,))
            return (T.reshape(y + x * 2.0, (15,)) * w.reshape(15)).mean()

        _gc(loss, {"x": x})

    def test_broadcast_add_and_mean_axis(self):
        rng = np.random.default_rng(13)
        x, b = leaf(rng.normal(size=(2, 3, 4, 5))), leaf(rng.normal(size=3))
        w = rng.normal(size=(2, 3))
        _gc(lambda: (T.mean(x + T.reshape(b, (1, 3, 1, 1)), axis=(2, 3)) * w).sum(), {"x": x, "b": b})


def test_determinism_bitwise():
    rng = np.random.default_rng(5)
    x, k = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(k), 1, 1).data
    b = T.conv2d(Tensor(x), Tensor(k), 1, 1).data
    assert a.tobytes() == b.tobytes()
