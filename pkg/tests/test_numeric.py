"""Matrix op semantics, backward rules, and tape determinism."""

import numpy as np
import pytest

from pancan import numeric as nm
from pancan.errors import EvaluationError, ShapeError


def rand_mat(rng, r, c, scale=1.0):
    return nm.Mat(rng.standard_normal((r, c)) * scale)


class TestMatConstruction:
    def test_rejects_nan_and_inf(self):
        with pytest.raises(ValueError):
            nm.Mat([[1.0, np.nan]])
        with pytest.raises(ValueError):
            nm.Mat([[np.inf, 0.0]])

    def test_rejects_bad_rank(self):
        with pytest.raises(ShapeError):
            nm.Mat(np.zeros((2, 2, 2)))

    def test_immutable_and_copied(self):
        src = np.ones((2, 2))
        m = nm.Mat(src)
        src[0, 0] = 5.0
        assert m.data[0, 0] == 1.0
        with pytest.raises(ValueError):
            m.data[0, 0] = 7.0


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        a = rand_mat(rng, 3, 3)
        out = nm.matmul(nm.Mat.eye(3), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_case(self):
        out = nm.matmul(nm.Mat([[1, 2], [3, 4]]), nm.Mat([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(1)
        a, b = rand_mat(rng, 5, 4), rand_mat(rng, 4, 3)
        want = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                for k in range(4):
                    want[i, j] += a.data[i, k] * b.data[k, j]
        np.testing.assert_allclose(nm.matmul(a, b).data, want, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nm.matmul(nm.Mat.zeros(2, 3), nm.Mat.zeros(2, 3))

    def test_associativity(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            a, b, c = (rand_mat(rng, 4, 5), rand_mat(rng, 5, 6), rand_mat(rng, 6, 3))
            left = nm.matmul(nm.matmul(a, b), c).data
            right = nm.matmul(a, nm.matmul(b, c)).data
            np.testing.assert_allclose(left, right, rtol=1e-10, atol=1e-12)


class TestSoftmax:
    def test_uniform_row(self):
        out = nm.softmax_rows(nm.Mat([[3.0, 3.0, 3.0, 3.0]]))
        np.testing.assert_allclose(out.data, 0.25, atol=1e-15)

    def test_large_values_stable(self):
        out = nm.softmax_rows(nm.Mat([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0, 0] == pytest.approx(1.0)
        assert out.data[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(3)
        a = rand_mat(rng, 4, 6)
        e = np.exp(a.data)
        want = e / e.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(nm.softmax_rows(a).data, want, atol=1e-12)

    def test_rows_sum_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a = rand_mat(rng, 3, 5, scale=4.0)
            p = nm.softmax_rows(a)
            np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-12)
            shifted = nm.Mat(a.data + 7.5)
            np.testing.assert_allclose(nm.softmax_rows(shifted).data, p.data, atol=1e-12)

    def test_masked_rows(self):
        mask = np.array([[True, True, False], [False, False, False]])
        p = nm.masked_softmax_rows(nm.Mat([[0.0, 0.0, 99.0], [1.0, 2.0, 3.0]]), mask)
        np.testing.assert_allclose(p.data[0], [0.5, 0.5, 0.0], atol=1e-12)
        np.testing.assert_array_equal(p.data[1], 0.0)


class TestSimpleOps:
    def test_relu(self):
        out = nm.relu(nm.Mat([[-1.0, 2.0]]))
        np.testing.assert_array_equal(out.data, [[0.0, 2.0]])

    def test_concat_rows_shape(self):
        out = nm.concat_rows([nm.Mat.zeros(2, 3), nm.Mat.zeros(4, 3)])
        assert out.shape == (6, 3)
        with pytest.raises(ShapeError):
            nm.concat_rows([nm.Mat.zeros(2, 3), nm.Mat.zeros(2, 4)])

    def test_l2_col_norms(self):
        np.testing.assert_allclose(nm.l2_col_norms(nm.Mat([[3.0], [4.0]])), [5.0])
        rng = np.random.default_rng(5)
        a = rand_mat(rng, 4, 7)
        want = [np.sqrt(sum(a.data[i, j] ** 2 for i in range(4))) for j in range(7)]
        np.testing.assert_allclose(nm.l2_col_norms(a), want, atol=1e-12)

    def test_add_col(self):
        a = nm.Mat([[1.0, 2.0], [3.0, 4.0]])
        b = nm.Mat([[10.0], [20.0]])
        np.testing.assert_array_equal(nm.add_col(a, b).data, [[11.0, 12.0], [23.0, 24.0]])

    def test_gather_cols(self):
        a = nm.Mat([[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(nm.gather_cols(a, [2, 0]).data, [[3.0, 1.0]])

    def test_bce_logits_values(self):
        z = nm.Mat([[0.0]])
        y = np.array([[1.0]])
        assert nm.bce_logits_sum(z, y).item() == pytest.approx(np.log(2.0))
        big = nm.Mat([[40.0]])
        assert nm.bce_logits_sum(big, y).item() == pytest.approx(0.0, abs=1e-12)
        assert np.isfinite(nm.bce_logits_sum(nm.Mat([[800.0]]), np.array([[0.0]])).item())


class TestSampleBlockOps:
    def test_sample_scores_matches_per_sample_loop(self):
        rng = np.random.default_rng(6)
        d, b, nq, nk = 3, 2, 4, 5
        q = rand_mat(rng, d, b * nq)
        m = rand_mat(rng, d, b * nk)
        out = nm.sample_scores(q, m, nq, nk).data
        for bb in range(b):
            for i in range(nq):
                for j in range(nk):
                    want = q.data[:, bb * nq + i] @ m.data[:, bb * nk + j]
                    assert out[bb * nq + i, j] == pytest.approx(want, abs=1e-12)

    def test_sample_aggregate_matches_loop(self):
        rng = np.random.default_rng(7)
        d, b, nq, nk = 3, 2, 2, 4
        v = rand_mat(rng, d, b * nk)
        p = rand_mat(rng, b * nq, nk)
        out = nm.sample_aggregate(v, p, nq, nk).data
        for bb in range(b):
            for i in range(nq):
                want = sum(p.data[bb * nq + i, j] * v.data[:, bb * nk + j] for j in range(nk))
                np.testing.assert_allclose(out[:, bb * nq + i], want, atol=1e-12)

    def test_sample_apply_matches_loop(self):
        rng = np.random.default_rng(8)
        d, b, n = 3, 2, 4
        f = rand_mat(rng, d, b * n)
        p = rand_mat(rng, n, n)
        out = nm.sample_apply(f, p, n).data
        for bb in range(b):
            block = f.data[:, bb * n:(bb + 1) * n]
            np.testing.assert_allclose(out[:, bb * n:(bb + 1) * n], block @ p.data.T, atol=1e-12)

    def test_support_softmax_rows(self):
        rows = np.array([0, 0, 0, 2])
        cols = np.array([1, 2, 3, 0])
        w = nm.Mat([[0.0, 0.0, 0.0, 4.2]])
        out = nm.support_softmax(w, rows, cols, 4).data
        np.testing.assert_allclose(out[0, 1:], 1.0 / 3.0, atol=1e-12)
        assert out[2, 0] == pytest.approx(1.0)
        np.testing.assert_array_equal(out[1], 0.0)
        np.testing.assert_array_equal(out[3], 0.0)


def _scalar(fn):
    """Wrap an op into a scalar function for grad_check via sum of entries."""
    return lambda params: nm.sum_all(fn(params))


OPS_FOR_GRADCHECK = {
    "add": (lambda p: nm.add(p[0], p[1]), [(3, 4), (3, 4)]),
    "sub": (lambda p: nm.sub(p[0], p[1]), [(3, 4), (3, 4)]),
    "hadamard": (lambda p: nm.hadamard(p[0], p[1]), [(3, 4), (3, 4)]),
    "scale": (lambda p: nm.scale(p[0], -1.7), [(3, 4)]),
    "transpose": (lambda p: nm.matmul(nm.transpose(p[0]), p[1]), [(3, 4), (3, 2)]),
    "matmul": (lambda p: nm.matmul(p[0], p[1]), [(3, 4), (4, 2)]),
    "relu": (lambda p: nm.relu(p[0]), [(3, 4)]),
    "sigmoid": (lambda p: nm.sigmoid(p[0]), [(3, 4)]),
    "softmax_rows": (lambda p: nm.matmul(nm.softmax_rows(p[0]), p[1]), [(3, 4), (4, 2)]),
    "concat_rows": (lambda p: nm.concat_rows([p[0], p[1]]), [(2, 3), (4, 3)]),
    "concat_cols": (lambda p: nm.concat_cols([p[0], p[1]]), [(3, 2), (3, 4)]),
    "gather_cols": (lambda p: nm.gather_cols(p[0], np.array([2, 0, 2])), [(3, 4)]),
    "gather_rows": (lambda p: nm.gather_rows(p[0], np.array([1, 1, 0])), [(3, 4)]),
    "add_col": (lambda p: nm.add_col(p[0], p[1]), [(3, 4), (3, 1)]),
    "mean_cols": (lambda p: nm.mean_cols(p[0]), [(3, 5)]),
    "frobenius_sq": (lambda p: nm.frobenius_sq(p[0]), [(3, 4)]),
    "sample_scores": (lambda p: nm.sample_scores(p[0], p[1], 2, 3), [(3, 4), (3, 6)]),
    "sample_aggregate": (lambda p: nm.sample_aggregate(p[0], p[1], 2, 3), [(3, 6), (4, 3)]),
    "sample_apply": (lambda p: nm.sample_apply(p[0], p[1], 3), [(2, 6), (3, 3)]),
}


def small_gather(n=3, m=2):
    # cell 0 -> members {1, 2}; cell 1 -> {0}; cell 2 -> none
    gather = np.zeros((n, n * m))
    gather[1, 0 * m + 0] = 1.0
    gather[2, 0 * m + 1] = 1.0
    gather[0, 1 * m + 0] = 1.0
    return gather


OPS_FOR_GRADCHECK["member_scores"] = (
    lambda p: nm.member_scores(p[0], p[1], small_gather(), 3, 2),
    [(4, 6), (4, 6)])
OPS_FOR_GRADCHECK["member_aggregate"] = (
    lambda p: nm.member_aggregate(p[0], p[1], small_gather(), 3, 2),
    [(4, 6), (6, 2)])


class TestBackwardRules:
    @pytest.mark.parametrize("name", sorted(OPS_FOR_GRADCHECK))
    def test_op_grad_check(self, name):
        fn, shapes = OPS_FOR_GRADCHECK[name]
        rng = np.random.default_rng(hash(name) % (2**32))
        params = [rand_mat(rng, r, c) for r, c in shapes]
        err = nm.grad_check(_scalar(fn), params, eps=1e-5)
        assert err <= 1e-6, f"{name}: rel err {err}"

    def test_masked_softmax_grad(self):
        rng = np.random.default_rng(11)
        mask = rng.random((3, 5)) > 0.4
        mask[0] = False  # one dead row
        mask[1, 2] = True
        a = rand_mat(rng, 3, 5)
        w = rand_mat(rng, 5, 2)

        def f(p):
            return nm.sum_all(nm.matmul(nm.masked_softmax_rows(p[0], mask), p[1]))

        assert nm.grad_check(f, [a, w], eps=1e-5) <= 1e-6

    def test_support_softmax_grad(self):
        rng = np.random.default_rng(12)
        rows = np.array([0, 0, 1, 3, 3, 3])
        cols = np.array([1, 3, 2, 0, 1, 2])
        w = rand_mat(rng, 1, 6)
        mix = rand_mat(rng, 4, 2)

        def f(p):
            return nm.sum_all(nm.matmul(nm.support_softmax(p[0], rows, cols, 4), p[1]))

        assert nm.grad_check(f, [w, mix], eps=1e-5) <= 1e-6

    def test_bce_logits_grad(self):
        rng = np.random.default_rng(13)
        z = rand_mat(rng, 3, 4)
        y = (rng.random((3, 4)) > 0.5).astype(float)
        assert nm.grad_check(lambda p: nm.bce_logits_sum(p[0], y), [z], eps=1e-5) <= 1e-6

    def test_reused_node_accumulates(self):
        # x used twice: f = sum(x*x + x) -> grad 2x + 1
        x = nm.Mat([[1.5, -2.0]])
        out = nm.sum_all(nm.add(nm.hadamard(x, x), x))
        (g,) = nm.gradients(out, [x])
        np.testing.assert_allclose(g, 2.0 * x.data + 1.0, atol=1e-12)

    def test_unused_leaf_gets_zero(self):
        x, y = nm.Mat([[1.0]]), nm.Mat([[2.0]])
        out = nm.sum_all(x)
        gx, gy = nm.gradients(out, [x, y])
        assert gx[0, 0] == 1.0 and gy[0, 0] == 0.0


class TestGradCheckContract:
    def test_square_function(self):
        x = nm.Mat([[3.0]])
        err = nm.grad_check(lambda p: nm.hadamard(p[0], p[0]), [x], eps=1e-5)
        assert err < 1e-9

    def test_quadratic_form_closed_gradient(self):
        rng = np.random.default_rng(14)
        a = rng.standard_normal((4, 4))
        x = nm.Mat(rng.standard_normal((4, 1)))
        am = nm.Mat(a)

        def f(p):
            return nm.matmul(nm.transpose(p[0]), nm.matmul(am, p[0]))

        out = f([x])
        (g,) = nm.gradients(out, [x])
        np.testing.assert_allclose(g, (a + a.T) @ x.data, atol=1e-10)
        assert nm.grad_check(f, [x], eps=1e-5) < 1e-7

    def test_non_finite_loss_raises(self):
        x = nm.Mat([[710.0]])  # exp overflow inside an unclamped composite

        def f(p):
            with np.errstate(over="ignore"):
                e = np.exp(p[0].data)  # deliberately bypasses the stable ops
            return nm.Mat._wrap(e, (p[0],), lambda g: (g * e,))

        with pytest.raises(EvaluationError):
            nm.grad_check(f, [x], eps=1e-5)


class TestDeterminism:
    def test_bit_identical_pipelines(self):
        def run():
            rng = np.random.default_rng(99)
            a = rand_mat(rng, 6, 6)
            b = rand_mat(rng, 6, 6)
            out = nm.matmul(nm.softmax_rows(nm.matmul(a, b)), nm.relu(b))
            loss = nm.sum_all(out)
            ga, gb = nm.gradients(loss, [a, b])
            return out.data.tobytes(), ga.tobytes(), gb.tobytes()

        assert run() == run()
