import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subcond import tensor as T
from subcond.errors import ConfigError, DimensionError, InputError
from subcond.gradcheck import check_params
from subcond.layers import (
    UNKNOWN,
    Conv2d,
    Linear,
    LowRankLinear,
    SubjectConditionedConv2d,
    SubjectConditionedLinear,
    adapter_similarity,
    low_rank_linear_forward,
    params_from_totals,
    route,
)
from subcond.tensor import Tensor


def masked_sum_linear(layer, X, ids):
    """Literal masked-sum form: X W^T + b + sum_s (M_s X) (alpha/r) A_s B_s, dense masks."""
    mask = route(ids, layer.subjects)
    out = X @ layer.weight.data.T + (layer.bias.data if layer.bias is not None else 0.0)
    for s in layer.subjects:
        out = out + (mask.matrix(s) @ X) @ ((layer.alpha / layer.rank) * layer.A[s].data @ layer.B[s].data)
    return out


def randomize_adapters(layer, rng):
    for s in layer.subjects:
        layer.B[s].data[...] = rng.normal(size=layer.B[s].shape)


class TestRoute:
    def test_small(self):
        m = route([0, 1, 0], 2)
        assert m.rows[0].tolist() == [0, 2]
        assert m.rows[1].tolist() == [1]

    def test_all_unknown(self):
        m = route([UNKNOWN] * 4, 3)
        assert all(ix.size == 0 for ix in m.rows.values())
        assert m.unknown.tolist() == [0, 1, 2, 3]

    def test_stray_id(self):
        with pytest.raises(InputError):
            route([0, 5], 2)

    @settings(max_examples=50, deadline=None)
    @given(ids=st.lists(st.integers(-1, 7), min_size=1, max_size=40))
    def test_partition_and_round_trip(self, ids):
        m = route(ids, 8)
        covered = np.concatenate([m.unknown] + list(m.rows.values()))
        assert sorted(covered.tolist()) == list(range(len(ids)))
        known = np.array([i >= 0 for i in ids], dtype=float)
        assert np.array_equal(sum(m.matrix(s) for s in range(8)), np.diag(known))
        x = Tensor(np.arange(len(ids) * 3, dtype=float).reshape(len(ids), 3))
        back = m.scatter(m.gather(x), (3,)).data
        assert np.array_equal(back, x.data * known[:, None])


class TestSubjectConditionedLinear:
    def test_hand_example(self):
        layer = SubjectConditionedLinear(2, 1, rank=1, n_subjects=1, alpha=1.0, bias=False)
        layer.weight.data[...] = [[1.0, 1.0]]
        layer.A[0].data[...] = [[1.0], [0.0]]
        layer.B[0].data[...] = [[2.0]]
        assert layer(Tensor([[1.0, 2.0]]), [0]).data.tolist() == [[5.0]]

    def test_init_equals_plain(self):
        X = np.random.default_rng(0).normal(size=(9, 5))
        sc = SubjectConditionedLinear(5, 4, 2, 3, activation="elu", seed=4, name="l")
        plain = Linear(5, 4, activation="elu", seed=4, name="l")
        ids = [0, 1, 2, 0, 1, 2, UNKNOWN, 0, 1]
        assert np.array_equal(sc(Tensor(X), ids).data, plain(Tensor(X)).data)

    def test_init_b_zero_a_normal(self):
        layer = SubjectConditionedLinear(50, 40, 8, 3, seed=2)
        for s in range(3):
            assert not layer.B[s].data.any()
            assert abs(layer.A[s].data.std() - np.sqrt(1 / 50)) < 0.02
        assert layer.subjects == [0, 1, 2]

    def test_seed_determinism(self):
        a = SubjectConditionedLinear(6, 5, 2, 4, seed=1).parameters()
        b = SubjectConditionedLinear(6, 5, 2, 4, seed=1).parameters()
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)

    def test_full_rank_capacity(self):
        rng = np.random.default_rng(3)
        n, m = 3, 4
        layer = SubjectConditionedLinear(n, m, rank=min(n, m), n_subjects=1, alpha=3.0, bias=False)
        target = rng.normal(size=(n, m))
        # any n x m correction factorizes as A B with r = min(n, m)
        layer.A[0].data[...] = np.eye(n)
        layer.B[0].data[...] = target
        assert np.allclose(layer.correction(0), target)

    def test_alpha_zero_is_shared_only(self):
        rng = np.random.default_rng(5)
        layer = SubjectConditionedLinear(4, 3, 2, 2, alpha=0.0)
        randomize_adapters(layer, rng)
        X = Tensor(rng.normal(size=(6, 4)))
        g, a = layer.parts(X, [0, 1, 0, 1, 1, 0])
        assert np.array_equal((g + a).data, g.data)

    def test_gradient_isolation(self):
        rng = np.random.default_rng(6)
        layer = SubjectConditionedLinear(4, 3, 2, 9, seed=1)
        randomize_adapters(layer, rng)
        layer(Tensor(rng.normal(size=(5, 4))), [7] * 5).sum().backward()
        for s in layer.subjects:
            for p in (layer.A[s], layer.B[s]):
                if s == 7:
                    assert p.grad is not None and p.grad.any()
                else:
                    assert p.grad is None or not p.grad.any()

    def test_unknown_rows_shared_only(self):
        rng = np.random.default_rng(8)
        layer = SubjectConditionedLinear(4, 3, 2, 2)
        randomize_adapters(layer, rng)
        X = rng.normal(size=(3, 4))
        out = layer(Tensor(X), [UNKNOWN, 0, UNKNOWN]).data
        shared = X @ layer.weight.data.T + layer.bias.data
        assert np.array_equal(out[[0, 2]], shared[[0, 2]])
        assert not np.allclose(out[1], shared[1])

    def test_routing_matches_masked_sum(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            n_subj = int(rng.integers(1, 9))
            layer = SubjectConditionedLinear(5, 6, 3, n_subj, alpha=float(rng.uniform(0.5, 4)), seed=int(rng.integers(99)))
            randomize_adapters(layer, rng)
            B = int(rng.integers(1, 20))
            ids = rng.integers(-1, n_subj, B)
            X = rng.normal(size=(B, 5))
            np.testing.assert_allclose(layer.pre_activation(Tensor(X), ids).data, masked_sum_linear(layer, X, ids),
                                       rtol=0, atol=1e-12)

    def test_scale_linearity(self):
        rng = np.random.default_rng(10)
        layer = SubjectConditionedLinear(4, 3, 2, 3, alpha=1.5)
        randomize_adapters(layer, rng)
        X, ids = Tensor(rng.normal(size=(7, 4))), rng.integers(0, 3, 7)
        a1 = layer.parts(X, ids)[1].data
        layer.alpha = 3.0
        a2 = layer.parts(X, ids)[1].data
        np.testing.assert_allclose(a2, 2 * a1, rtol=0, atol=1e-12)

    def test_errors(self):
        with pytest.raises(ConfigError):
            SubjectConditionedLinear(3, 4, 4, 2)
        layer = SubjectConditionedLinear(3, 4, 2, 2)
        with pytest.raises(InputError):
            layer(Tensor(np.zeros((0, 3))), [])
        with pytest.raises(DimensionError):
            layer(Tensor(np.zeros((2, 5))), [0, 1])

    def test_add_subject_existing(self):
        layer = SubjectConditionedLinear(3, 4, 2, 2)
        with pytest.raises(ConfigError):
            layer.add_subject(1)

    def test_add_subject_matches_construction(self):
        grown = SubjectConditionedLinear(3, 4, 2, 2, seed=3)
        grown.add_subject(2)
        built = SubjectConditionedLinear(3, 4, 2, 3, seed=3)
        assert np.array_equal(grown.A[2].data, built.A[2].data)

    def test_gradients(self):
        rng = np.random.default_rng(11)
        layer = SubjectConditionedLinear(4, 3, 2, 3, alpha=2.0, activation="gelu")
        randomize_adapters(layer, rng)
        X = Tensor(rng.normal(size=(8, 4)), requires_grad=True)
        ids = [0, 1, 2, 0, UNKNOWN, 1, 2, 2]
        params = dict(layer.parameters(), X=X)
        w = rng.normal(size=(8, 3))
        errs = check_params(lambda: (layer(X, ids) * w).sum(), params)
        assert max(errs.values()) < 1e-4, errs


class TestLowRank:
    def test_init_is_bias(self):
        layer = LowRankLinear(5, 3, 2, activation="relu", seed=2)
        out = layer(Tensor(np.random.default_rng(0).normal(size=(4, 5)))).data
        assert np.array_equal(out, np.tile(np.maximum(layer.bias.data, 0), (4, 1)))

    def test_hand_example(self):
        out = low_rank_linear_forward(Tensor([[1.0], [0.0]]), Tensor([[2.0]]), Tensor([[1.0, 2.0]]), alpha=1.0)
        assert out.data.tolist() == [[2.0]]

    def test_full_rank_matches_dense(self):
        rng = np.random.default_rng(1)
        W = rng.normal(size=(3, 4))
        X = rng.normal(size=(5, 3))
        out = low_rank_linear_forward(Tensor(np.eye(3)), Tensor(W * 3 / 2.0), Tensor(X), alpha=2.0)
        np.testing.assert_allclose(out.data, X @ W, rtol=1e-13)


def composed_kernel(layer, s):
    b = layer.B[s].data[:, :, 0, 0]
    return np.einsum("or,rcij->ocij", b, layer.A[s].data)


class TestSubjectConditionedConv:
    def test_init_equals_plain(self):
        X = np.random.default_rng(0).normal(size=(4, 2, 5, 7))
        sc = SubjectConditionedConv2d(2, 3, (3, 2), 2, 2, stride=2, padding=1, activation="elu", seed=5, name="c")
        plain = Conv2d(2, 3, (3, 2), stride=2, padding=1, activation="elu", seed=5, name="c")
        assert np.array_equal(sc(Tensor(X), [0, 1, UNKNOWN, 0]).data, plain(Tensor(X)).data)

    def test_adapter_shapes(self):
        layer = SubjectConditionedConv2d(3, 5, (2, 4), 2, 1)
        assert layer.A[0].shape == (2, 3, 2, 4)
        assert layer.B[0].shape == (5, 2, 1, 1)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), c_in=st.integers(1, 4), c_out=st.integers(1, 5),
           kh=st.integers(1, 3), kw=st.integers(1, 3), stride=st.integers(1, 3), pad=st.integers(0, 2))
    def test_factorization_matches_composed_kernel(self, seed, c_in, c_out, kh, kw, stride, pad):
        rng = np.random.default_rng(seed)
        rank = int(rng.integers(1, min(c_in * kh * kw, c_out) + 1))
        layer = SubjectConditionedConv2d(c_in, c_out, (kh, kw), rank, 1, stride=stride, padding=pad, bias=False)
        layer.A[0].data[...] = rng.normal(size=layer.A[0].shape)
        layer.B[0].data[...] = rng.normal(size=layer.B[0].shape)
        X = Tensor(rng.normal(size=(2, c_in, 6, 5)))
        seq = T.conv2d(T.conv2d(X, layer.A[0], stride, pad), layer.B[0]).data
        dense = T.conv2d(X, Tensor(composed_kernel(layer, 0)), stride, pad).data
        np.testing.assert_allclose(seq, dense, rtol=0, atol=1e-10)

    def test_alpha_zero(self):
        rng = np.random.default_rng(2)
        layer = SubjectConditionedConv2d(2, 3, 3, 2, 2, alpha=0.0, padding=1)
        randomize_adapters(layer, rng)
        X = Tensor(rng.normal(size=(3, 2, 4, 4)))
        g, a = layer.parts(X, [0, 1, 1])
        assert np.array_equal((g + a).data, g.data)

    def test_masked_sum(self):
        rng = np.random.default_rng(3)
        layer = SubjectConditionedConv2d(2, 3, (1, 3), 2, 3, alpha=2.0, padding=(0, 1))
        randomize_adapters(layer, rng)
        X = rng.normal(size=(5, 2, 3, 6))
        ids = np.array([2, 0, UNKNOWN, 2, 1])
        got = layer.pre_activation(Tensor(X), ids).data
        expect = T.conv2d(Tensor(X), layer.weight, 1, (0, 1)).data + layer.bias.data[None, :, None, None]
        for s in range(3):
            sel = (ids == s).astype(float)[:, None, None, None]
            k = composed_kernel(layer, s) * layer.alpha / layer.rank
            expect = expect + sel * T.conv2d(Tensor(X), Tensor(k), 1, (0, 1)).data
        np.testing.assert_allclose(got, expect, rtol=0, atol=1e-10)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        layer = SubjectConditionedConv2d(2, 3, (2, 3), 2, 2, alpha=1.0, stride=(1, 2), padding=(1, 1),
                                         activation="elu")
        randomize_adapters(layer, rng)
        X = Tensor(rng.normal(size=(3, 2, 4, 5)), requires_grad=True)
        ids = [1, 0, 1]
        w = rng.normal(size=layer(X, ids).shape)
        errs = check_params(lambda: (layer(X, ids) * w).sum(), dict(layer.parameters(), X=X))
        assert max(errs.values()) < 1e-4, errs


class TestCounting:
    def test_linear_hand_count(self):
        layer = SubjectConditionedLinear(3, 4, 2, 5, bias=False)
        c = layer.param_counts()
        total = c["shared"] + 5 * c["adapter"]
        assert (total, c["shared"] + c["adapter"]) == (82, 26)

    def test_conv_count(self):
        c = SubjectConditionedConv2d(3, 5, (2, 4), 2, 1, bias=False).param_counts()
        assert c == {"shared": 5 * 3 * 2 * 4, "adapter": 2 * 3 * 2 * 4 + 5 * 2}

    def test_published_compact_cnn_counts(self):
        assert params_from_totals(55_972, 134_884, 9) == (8_768, 64_740)

    def test_published_large_model_counts(self):
        assert params_from_totals(867_460, 1_480_612, 9) == (68_128, 935_588)

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            params_from_totals(10, 21, 2)


class TestSimilarity:
    def test_identical(self):
        layer = SubjectConditionedLinear(4, 3, 2, 2)
        layer.A[1].data[...] = layer.A[0].data
        layer.B[0].data[...] = 1.0
        layer.B[1].data[...] = 1.0
        assert adapter_similarity(layer)[0, 1] == pytest.approx(1.0, abs=1e-15)

    def test_disjoint_rows(self):
        layer = SubjectConditionedLinear(4, 3, 2, 2)
        for s, row in ((0, 0), (1, 2)):
            layer.A[s].data[...] = 0.0
            layer.A[s].data[row] = 1.0
            layer.B[s].data[...] = 1.0
        assert adapter_similarity(layer)[0, 1] == 0.0

    def test_zero_corrections(self):
        sim = adapter_similarity(SubjectConditionedLinear(4, 3, 2, 3))
        assert not sim.any()

    def test_random_symmetric_bounded_brute_force(self):
        rng = np.random.default_rng(0)
        layer = SubjectConditionedConv2d(2, 4, 3, 2, 5)
        randomize_adapters(layer, rng)
        sim = adapter_similarity(layer)
        assert np.array_equal(sim, sim.T)
        assert np.all(np.abs(sim) <= 1.0)
        for s in range(5):
            for t in range(5):
                a, b = layer.correction(s).ravel(), layer.correction(t).ravel()
                brute = sum(x * y for x, y in zip(a, b)) / (np.sqrt(sum(x * x for x in a)) * np.sqrt(sum(y * y for y in b)))
                assert sim[s, t] == pytest.approx(brute, abs=1e-12)
        assert np.allclose(np.diag(sim), 1.0)
