"""Forward-value contracts of the tensor ops, checked against hand values
and high-precision (mpmath) oracles that share no code with the package."""

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from picovlm import tensor as T
from picovlm.errors import DegenerateRowError, GraphError, ShapeError
from picovlm.tensor import Tape, Tensor

mpmath.mp.dps = 50


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(t64([[1, 0], [0, 1]]), t64([[3, 4], [5, 6]]))
        assert np.array_equal(out.data, [[3, 4], [5, 6]])

    def test_inner_product(self):
        out = T.matmul(t64([[1, 2]]), t64([[3], [4]]))
        assert np.array_equal(out.data, [[11]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            T.matmul(t64(np.zeros((2, 3))), t64(np.zeros((4, 5))))
        assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)

    def test_batched(self, rng):
        a = rng.normal(size=(3, 2, 4))
        b = rng.normal(size=(3, 4, 5))
        out = T.matmul(t64(a), t64(b))
        assert np.allclose(out.data, np.einsum("bij,bjk->bik", a, b))


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax_rows(t64([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, [1 / 3] * 3, atol=1e-12)

    def test_large_logit_no_overflow(self):
        out = T.softmax_rows(t64([60.0, 0.0]))
        assert np.isfinite(out.data).all()
        assert out.data[0] > 1 - 1e-12 and out.data[1] < 1e-12

    def test_matches_high_precision(self, rng):
        x = rng.normal(size=(3, 4))
        out = T.softmax_rows(t64(x))
        for i in range(3):
            row = [mpmath.e ** mpmath.mpf(v) for v in x[i]]
            total = mpmath.fsum(row)
            expected = [float(v / total) for v in row]
            assert np.max(np.abs(out.data[i] - expected)) < 1e-12

    def test_masked_entries_exactly_zero(self):
        mask = np.array([[True, False, True]])
        out = T.softmax_rows(t64([[1.0, 5.0, 2.0]]), mask=mask)
        assert out.data[0, 1] == 0.0
        assert abs(out.data[0].sum() - 1.0) < 1e-6

    def test_fully_masked_row_raises(self):
        with pytest.raises(DegenerateRowError):
            T.softmax_rows(t64([[1.0, 2.0]]), mask=np.array([[False, False]]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=6),
           st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, row, shift):
        x = np.array([row], dtype=np.float64)
        out = T.softmax_rows(t64(x))
        assert abs(out.data.sum() - 1.0) < 1e-6
        shifted = T.softmax_rows(t64(x + shift))
        assert np.max(np.abs(out.data - shifted.data)) < 1e-6


class TestLayerNorm:
    def test_constant_row_zeroed_by_eps(self):
        out = T.layernorm(t64([5.0, 5.0, 5.0]), T.ones((3,), np.float64),
                          T.zeros((3,), np.float64), eps=1e-5)
        assert np.allclose(out.data, 0.0)

    def test_gamma_zero_gives_beta(self, rng):
        beta = t64([1.0, -2.0, 0.5])
        out = T.layernorm(t64(rng.normal(size=(4, 3))), T.zeros((3,), np.float64), beta)
        assert np.allclose(out.data, np.broadcast_to(beta.data, (4, 3)))

    def test_normalises_rows(self, rng):
        x = rng.normal(size=(5, 16)) * 3 + 1
        out = T.layernorm(t64(x), T.ones((16,), np.float64), T.zeros((16,), np.float64),
                          eps=1e-12)
        assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-9)
        assert np.allclose(out.data.var(axis=-1), 1.0, atol=1e-6)


class TestGelu:
    def test_zero(self):
        assert T.gelu(t64([0.0])).data[0] == 0.0

    def test_large_positive_asymptote(self):
        x = 25.0
        assert abs(T.gelu(t64([x])).data[0] - x) < 1e-10

    def test_matches_high_precision_cdf(self):
        got = T.gelu(t64([1.0])).data[0]
        expected = float(mpmath.mpf(1) * mpmath.ncdf(mpmath.mpf(1)))
        assert abs(got - expected) < 1e-10

    def test_random_points_match_cdf(self, rng):
        xs = rng.normal(size=8) * 2
        got = T.gelu(t64(xs)).data
        for x, g in zip(xs, got):
            assert abs(g - float(mpmath.mpf(x) * mpmath.ncdf(mpmath.mpf(x)))) < 1e-10


class TestCrossEntropy:
    def test_perfect_prediction_loss_near_zero(self):
        logits = np.zeros((2, 3))
        logits[0, 1] = logits[1, 2] = 80.0
        loss = T.cross_entropy_next_token(t64(logits), [1, 2])
        assert loss.data < 1e-10

    def test_uniform_logits_ln_v(self):
        loss = T.cross_entropy_next_token(t64(np.zeros((3, 4))), [0, 1, 2])
        assert abs(loss.data - np.log(4)) < 1e-12

    def test_matches_high_precision_naive(self, rng):
        z = rng.normal(size=(5, 7)) * 2
        targets = rng.integers(0, 7, size=5).tolist()
        loss = T.cross_entropy_next_token(t64(z), targets)
        per_row = []
        for i, tgt in enumerate(targets):
            row = [mpmath.e ** mpmath.mpf(v) for v in z[i]]
            p = row[tgt] / mpmath.fsum(row)
            per_row.append(-mpmath.log(p))
        expected = float(mpmath.fsum(per_row) / 5)
        assert abs(float(loss.data) - expected) < 1e-10

    def test_ignored_positions_skipped(self, rng):
        z = rng.normal(size=(4, 5))
        full = T.cross_entropy_next_token(t64(z), [1, 2, 3, 0])
        partial = T.cross_entropy_next_token(t64(z), [1, -1, 3, -1])
        assert not np.isclose(full.data, partial.data)

    def test_all_ignored_raises(self):
        with pytest.raises(GraphError):
            T.cross_entropy_next_token(t64(np.zeros((2, 3))), [-1, -1])

    def test_target_out_of_range(self):
        with pytest.raises(ShapeError):
            T.cross_entropy_next_token(t64(np.zeros((2, 3))), [0, 3])


class TestBackward:
    def test_identity_grad(self):
        with Tape() as tape:
            x = t64([3.0], requires_grad=True)
            y = T.add(x, 0.0)
            tape.backward(y)
        assert np.array_equal(x.grad, [1.0])

    def test_sum_of_squares(self, rng):
        xv = rng.normal(size=(3, 4))
        with Tape() as tape:
            x = t64(xv, requires_grad=True)
            tape.backward(T.sum_all(T.mul(x, x)))
        assert np.allclose(x.grad, 2 * xv)

    def test_accumulation_equals_sum_of_single_uses(self, rng):
        xv = rng.normal(size=4)

        def single(fn):
            with Tape() as tape:
                x = t64(xv, requires_grad=True)
                tape.backward(fn(x))
            return x.grad.copy()

        g_sum = single(T.sum_all)
        g_sq = single(lambda x: T.sum_all(T.mul(x, x)))
        with Tape() as tape:
            x = t64(xv, requires_grad=True)
            tape.backward(T.add(T.sum_all(x), T.sum_all(T.mul(x, x))))
        assert np.array_equal(x.grad, g_sum + g_sq)

    def test_non_scalar_root_raises(self):
        with Tape() as tape:
            x = t64([1.0, 2.0], requires_grad=True)
            y = T.mul(x, 2.0)
            with pytest.raises(GraphError):
                tape.backward(y)

    def test_no_tape_backward_raises(self):
        x = t64([1.0], requires_grad=True)
        with pytest.raises(GraphError):
            x.backward()

    def test_frozen_leaf_gets_no_grad(self, rng):
        with Tape() as tape:
            a = t64(rng.normal(size=(2, 2)), requires_grad=True)
            b = t64(rng.normal(size=(2, 2)), requires_grad=False)
            tape.backward(T.sum_all(T.matmul(a, b)))
        assert a.grad is not None and b.grad is None

    def test_gradient_flows_through_frozen_interior(self, rng):
        # frozen weight must still pass gradient to what feeds it
        with Tape() as tape:
            a = t64(rng.normal(size=(2, 3)), requires_grad=True)
            frozen = t64(rng.normal(size=(3, 3)), requires_grad=False)
            tape.backward(T.sum_all(T.matmul(T.matmul(a, frozen), frozen)))
        assert a.grad is not None and np.abs(a.grad).max() > 0


class TestStructuralOps:
    def test_embedding_repeated_ids_accumulate(self):
        with Tape() as tape:
            w = t64(np.arange(6.0).reshape(3, 2), requires_grad=True)
            out = T.embedding(w, [0, 2, 0])
            tape.backward(T.sum_all(out))
        assert np.array_equal(w.grad, [[2, 2], [0, 0], [1, 1]])

    def test_concat_slice_roundtrip(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
        cat = T.concat_rows(t64(a), t64(b))
        assert np.array_equal(cat.data[:2], a) and np.array_equal(cat.data[2:], b)
        back = T.slice_rows(cat, 2, 6)
        assert np.array_equal(back.data, b)

    def test_scale_by_gate(self, rng):
        xv = rng.normal(size=(2, 2))
        with Tape() as tape:
            x = t64(xv, requires_grad=True)
            g = t64([0.5], requires_grad=True)
            tape.backward(T.sum_all(T.scale(x, g)))
        assert np.allclose(x.grad, 0.5)
        assert np.allclose(g.grad, xv.sum())

    def test_mean_rows(self, rng):
        x = rng.normal(size=(4, 3))
        assert np.allclose(T.mean_rows(t64(x)).data, x.mean(axis=0))

    def test_stop_gradient_blocks(self, rng):
        with Tape() as tape:
            x = t64(rng.normal(size=3), requires_grad=True)
            y = T.stop_gradient(T.mul(x, 2.0))
            z = T.sum_all(T.mul(y, y))
            tape.backward(z)
        assert x.grad is None

    def test_invariant_size_matches_shape(self, rng):
        x = t64(rng.normal(size=(3, 5)))
        assert x.size == 15 and int(np.prod(x.shape)) == x.data.size


class TestDeterminism:
    def test_bit_identical_forward_and_grads(self):
        def run():
            rng = np.random.default_rng(1234)
            with Tape() as tape:
                a = t64(rng.normal(size=(4, 4)), requires_grad=True)
                b = t64(rng.normal(size=(4, 4)), requires_grad=True)
                h = T.gelu(T.matmul(a, b))
                out = T.cross_entropy_next_token(
                    T.matmul(h, T.transpose(b)), [0, 1, 2, 3])
                tape.backward(out)
            return out.data.copy(), a.grad.copy(), b.grad.copy()

        first, second = run(), run()
        for x, y in zip(first, second):
            assert np.array_equal(x, y)
