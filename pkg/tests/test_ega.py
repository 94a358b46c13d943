import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from diffcore import Tensor, backward
from ega import (
    PEARSON_EPS,
    EmbeddingBatch,
    LossNorm,
    Origin,
    combine_terms,
    cross_entropy,
    edge_loss,
    edge_matrix,
    ega_loss,
    ega_terms,
    kd_loss,
    node_loss,
    node_matrix,
    pearson,
    total_loss,
)
from errors import DataError, NumericalError, ShapeError

from helpers import pearson_oracle

ORTHOGONAL_ROWS = np.array([[1.0, 0.0, -1.0], [1.0, -2.0, 1.0]])


def _random_batch(rng, scale=1.0):
    b, d = int(rng.integers(3, 9)), int(rng.integers(4, 17))
    return rng.normal(scale=scale, size=(b, d))


class TestPearson:
    def test_perfect_positive(self):
        assert pearson([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]).item() == pytest.approx(1.0, abs=1e-7)

    def test_perfect_negative(self):
        assert pearson([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]).item() == pytest.approx(-1.0, abs=1e-7)

    def test_against_scalar_formula(self):
        x, y = [1.0, 2.0, 4.0], [1.0, 3.0, 5.0]
        assert pearson(x, y).item() == pytest.approx(pearson_oracle(x, y), abs=1e-12)
        assert pearson(x, y).item() == pytest.approx(0.98198, abs=1e-5)

    def test_needs_two_dimensions(self):
        with pytest.raises(ShapeError):
            pearson([1.0], [2.0])

    def test_non_finite_input(self):
        with pytest.raises(NumericalError):
            pearson([1.0, float("nan"), 2.0], [1.0, 2.0, 3.0])

    def test_constant_vector_gives_zero(self):
        assert pearson([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]).item() == pytest.approx(0.0, abs=1e-12)


class TestEdgeMatrix:
    def test_orthogonal_rows_give_identity(self):
        assert_allclose(edge_matrix(ORTHOGONAL_ROWS).values.data, np.eye(2), atol=1e-6)

    def test_identical_rows_give_all_ones(self):
        x = np.tile([1.0, 4.0, 2.0, 7.0], (3, 1))
        assert_allclose(edge_matrix(x).values.data, np.ones((3, 3)), atol=1e-7)

    def test_invariants_over_random_batches(self, rng):
        for _ in range(100):
            e = edge_matrix(_random_batch(rng, scale=1000.0)).values.data
            assert np.max(np.abs(e - e.T)) <= 1e-12
            assert np.max(np.abs(np.diag(e) - 1.0)) <= 1e-9
            assert np.max(np.abs(e)) <= 1.0 + 1e-9

    def test_unit_scale_diagonal_is_shrunk_by_eps(self, rng):
        for _ in range(100):
            x = _random_batch(rng)
            centered = x - x.mean(axis=1, keepdims=True)
            norm_sq = np.sum(centered * centered, axis=1)
            diag = np.diag(edge_matrix(x).values.data)
            assert_allclose(diag, norm_sq / (norm_sq + PEARSON_EPS), rtol=0, atol=1e-12)
            assert np.all(diag <= 1.0)

    def test_positive_affine_rows_leave_edges_unchanged(self, rng):
        for _ in range(100):
            x = _random_batch(rng, scale=1000.0)
            a = rng.uniform(0.5, 2.0, size=(x.shape[0], 1))
            b = rng.normal(scale=100.0, size=(x.shape[0], 1))
            assert_allclose(edge_matrix(a * x + b).values.data, edge_matrix(x).values.data, rtol=0, atol=1e-9)

    def test_negating_one_row_flips_its_edges(self, rng):
        x = rng.normal(scale=1000.0, size=(5, 8))
        flipped = x.copy()
        flipped[2] *= -1.0
        e, f = edge_matrix(x).values.data, edge_matrix(flipped).values.data
        off = [j for j in range(5) if j != 2]
        assert_allclose(f[2, off], -e[2, off], atol=1e-12)
        assert_allclose(f[off, 2], -e[off, 2], atol=1e-12)

    def test_permutation_equivariance(self, rng):
        x = rng.normal(size=(6, 9))
        perm = rng.permutation(6)
        e = edge_matrix(x).values.data
        assert_allclose(edge_matrix(x[perm]).values.data, e[np.ix_(perm, perm)], atol=1e-12)

    @pytest.mark.parametrize("b, d", [(3, 5), (5, 7), (6, 10), (8, 16)])
    def test_matches_double_loop_oracle(self, rng, b, d):
        x = rng.normal(size=(b, d))
        e = edge_matrix(x).values.data
        for i in range(b):
            for j in range(b):
                assert abs(e[i, j] - pearson_oracle(x[i], x[j])) <= 1e-12

    def test_degenerate_rows_are_flagged(self):
        x = np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0], [3.0, 1.0, 2.0]])
        edges = edge_matrix(x)
        assert edges.degenerate.tolist() == [False, True, False]
        assert_allclose(edges.values.data[1], 0.0, atol=1e-12)


class TestEmbeddingBatch:
    @pytest.mark.parametrize("shape", [(1, 4), (4, 1), (4,)])
    def test_rejects_bad_shapes(self, shape):
        with pytest.raises(ShapeError):
            EmbeddingBatch(Tensor(np.ones(shape)))

    def test_detach_keeps_origin(self):
        batch = EmbeddingBatch(Tensor(np.ones((2, 3)), requires_grad=True), Origin.TEACHER)
        detached = batch.detach()
        assert detached.origin == Origin.TEACHER
        assert not detached.values.requires_grad


class TestNodeMatrix:
    def test_aligned_orthogonal_rows_give_identity(self):
        assert_allclose(node_matrix(ORTHOGONAL_ROWS, ORTHOGONAL_ROWS).values.data, np.eye(2), atol=1e-6)

    def test_negated_student(self, rng):
        x = rng.normal(size=(4, 6))
        assert_allclose(node_matrix(x, -x).values.data, -edge_matrix(x).values.data, atol=1e-12)

    @pytest.mark.parametrize("b, d", [(3, 5), (4, 6), (8, 16)])
    def test_matches_double_loop_oracle(self, rng, b, d):
        xt, xs = rng.normal(size=(b, d)), rng.normal(size=(b, d))
        n = node_matrix(xt, xs).values.data
        for i in range(b):
            for j in range(b):
                assert abs(n[i, j] - pearson_oracle(xt[i], xs[j])) <= 1e-12

    def test_permuting_student_permutes_columns(self, rng):
        xt, xs = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
        perm = rng.permutation(5)
        n = node_matrix(xt, xs).values.data
        assert_allclose(node_matrix(xt, xs[perm]).values.data, n[:, perm], atol=1e-12)

    def test_bounded(self, rng):
        for _ in range(20):
            x = _random_batch(rng)
            n = node_matrix(x, rng.normal(size=x.shape)).values.data
            assert np.max(np.abs(n)) <= 1.0 + 1e-9

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            node_matrix(rng.normal(size=(4, 6)), rng.normal(size=(5, 6)))


class TestMatchingLosses:
    def test_edge_loss_zero_for_equal_graphs(self, rng):
        e = edge_matrix(rng.normal(size=(4, 5)))
        assert edge_loss(e, e).item() == 0.0

    def test_edge_loss_known_value(self):
        assert edge_loss(np.eye(2), np.ones((2, 2))).item() == pytest.approx(math.sqrt(2), abs=1e-12)

    def test_edge_loss_matches_scalar_oracle(self, rng):
        a, b = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
        expected = math.sqrt(sum((a[i, j] - b[i, j]) ** 2 for i in range(5) for j in range(5)))
        assert edge_loss(a, b).item() == pytest.approx(expected, abs=1e-12)

    def test_node_loss_values(self, rng):
        assert node_loss(np.eye(3)).item() == 0.0
        assert node_loss(np.ones((2, 2))).item() == pytest.approx(math.sqrt(2), abs=1e-12)
        n = rng.normal(size=(6, 6))
        expected = math.sqrt(sum((n[i, j] - (i == j)) ** 2 for i in range(6) for j in range(6)))
        assert node_loss(n).item() == pytest.approx(expected, abs=1e-12)

    def test_node_loss_needs_square(self):
        with pytest.raises(ShapeError):
            node_loss(np.ones((2, 3)))

    def test_edge_loss_shape_mismatch(self):
        with pytest.raises(ShapeError):
            edge_loss(np.eye(2), np.eye(3))

    def test_mean_squared_normalization(self):
        value = node_loss(np.ones((2, 2)), norm=LossNorm.MEAN_SQUARED).item()
        assert value == pytest.approx(2.0 / 4.0, abs=1e-12)


class TestEgaLoss:
    def test_lambda_zero_is_node_loss(self, rng):
        xt, xs = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        assert ega_loss(xt, xs, lam=0.0).item() == node_loss(node_matrix(xt, xs)).item()

    @pytest.mark.parametrize("lam", [0.0, 0.3, 1.0, 5.0])
    def test_aligned_orthogonal_construction_is_zero(self, lam):
        assert ega_loss(ORTHOGONAL_ROWS, ORTHOGONAL_ROWS, lam=lam).item() == pytest.approx(0.0, abs=1e-6)

    def test_combination_arithmetic(self):
        root2 = Tensor(math.sqrt(2))
        assert combine_terms(root2, root2, lam=0.3).item() == pytest.approx(1.83848, abs=1e-5)

    def test_positive_for_random_pairs(self, rng):
        for _ in range(100):
            x = _random_batch(rng)
            assert ega_loss(x, rng.normal(size=x.shape)).item() > 0.0

    def test_node_weight_scales_node_term(self, rng):
        xt, xs = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        l_node, l_edge = ega_terms(xt, xs)
        value = ega_loss(xt, xs, lam=0.3, node_weight=1.5).item()
        assert value == pytest.approx(1.5 * l_node.item() + 0.3 * l_edge.item(), abs=1e-12)

    def test_teacher_side_gets_no_gradient(self, rng):
        xt = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        xs = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        backward(ega_loss(xt, xs))
        assert xt.grad is None
        assert xs.grad is not None and np.any(xs.grad != 0)


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert cross_entropy(np.zeros((3, 4)), [0, 1, 2]).item() == pytest.approx(math.log(4), abs=1e-12)

    def test_large_margin_goes_to_zero(self):
        logits = 50.0 * np.eye(3)
        assert cross_entropy(logits, [0, 1, 2]).item() == pytest.approx(0.0, abs=1e-9)

    def test_matches_row_formula(self, rng):
        logits = rng.normal(size=(3, 5))
        labels = [4, 0, 2]
        expected = np.mean([-(logits[i, labels[i]] - math.log(np.exp(logits[i]).sum())) for i in range(3)])
        assert cross_entropy(logits, labels).item() == pytest.approx(expected, abs=1e-12)

    def test_label_out_of_range_names_row(self):
        with pytest.raises(DataError, match="row 1"):
            cross_entropy(np.zeros((2, 3)), [0, 3])


class TestKdLoss:
    def test_identical_logits(self, rng):
        z = rng.normal(size=(4, 5))
        for t in (1.0, 2.0, 4.0):
            assert kd_loss(z, z, temperature=t).item() == pytest.approx(0.0, abs=1e-12)

    def _oracle(self, student, teacher, t):
        total = 0.0
        for s_row, t_row in zip(student, teacher):
            pt = np.exp(t_row / t) / np.exp(t_row / t).sum()
            ps = np.exp(s_row / t) / np.exp(s_row / t).sum()
            total += float(np.sum(pt * np.log(pt / ps)))
        return t * t * total / len(student)

    def test_confident_teacher_against_uniform_student(self):
        teacher, student = np.array([[10.0, 0.0]]), np.array([[0.0, 0.0]])
        p = 1.0 / (1.0 + math.exp(-10.0))
        expected = p * math.log(p / 0.5) + (1 - p) * math.log((1 - p) / 0.5)
        assert kd_loss(student, teacher, temperature=1.0).item() == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("t", [1.0, 2.0, 4.0])
    def test_temperature_convention(self, rng, t):
        student, teacher = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        assert kd_loss(student, teacher, temperature=t).item() == pytest.approx(self._oracle(student, teacher, t),
                                                                                abs=1e-12)

    def test_teacher_logits_get_no_gradient(self, rng):
        s = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        t = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        backward(kd_loss(s, t))
        assert t.grad is None and s.grad is not None


class TestTotalLoss:
    def test_no_distillation_equals_ce(self):
        assert total_loss(Tensor(1.25), Tensor(3.0), 0.0).item() == 1.25

    def test_weighted_sum(self):
        assert total_loss(Tensor(1.0), Tensor(2.0), 0.8).item() == pytest.approx(2.6, abs=1e-12)

    def test_zero_kd_weight_matches_no_kd(self):
        ce, ega = Tensor(1.0), Tensor(2.0)
        assert total_loss(ce, ega, 0.8, Tensor(5.0), 0.0).item() == total_loss(ce, ega, 0.8).item()

    def test_kd_term(self):
        assert total_loss(Tensor(1.0), Tensor(2.0), 0.8, Tensor(0.5), 2.0).item() == pytest.approx(3.6, abs=1e-12)
