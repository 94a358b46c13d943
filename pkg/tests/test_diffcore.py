import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from diffcore import (
    ComputationRecord,
    Sgd,
    SgdConfig,
    Tensor,
    add,
    add_bias,
    backward,
    div,
    finite_diff_grad,
    frobenius_norm,
    log_softmax,
    lr_at_epoch,
    matmul,
    mean,
    mul,
    neg,
    relative_error,
    relu,
    row_center,
    row_mean,
    row_norm,
    row_scale,
    scale_add,
    scaled_error,
    sgd_step,
    sqrt,
    sub,
    sum as tensor_sum,
)
from errors import ConfigError, GradientError, NumericalError, ShapeError


class TestForwardOps:
    def test_matmul_with_identity_padded_matrix(self):
        a = np.arange(6.0).reshape(2, 3)
        b = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        assert_array_equal(matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_relu(self):
        assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_frobenius_norm(self):
        assert frobenius_norm(Tensor([[0.0, 1.0], [1.0, 0.0]])).item() == pytest.approx(1.41421356, abs=1e-8)

    def test_matmul_shape_mismatch_names_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_non_finite_output_is_an_error(self):
        with pytest.raises(NumericalError):
            div(Tensor([1.0]), Tensor([0.0]))

    def test_row_helpers(self):
        x = Tensor([[1.0, 2.0, 3.0], [4.0, 4.0, 4.0]])
        assert_array_equal(row_mean(x).data, [[2.0], [4.0]])
        assert_array_equal(row_center(x).data, [[-1.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
        assert_allclose(row_norm(Tensor([[3.0, 4.0]])).data, [[5.0]])
        assert_array_equal(row_scale(x, Tensor([[1.0], [2.0]])).data, [[1.0, 2.0, 3.0], [2.0, 2.0, 2.0]])

    def test_log_softmax_is_shift_stable(self):
        out = log_softmax(Tensor([[1000.0, 1000.0]])).data
        assert_allclose(out, np.log([[0.5, 0.5]]))

    def test_operator_sugar(self):
        x = Tensor([1.0, 2.0])
        assert_array_equal((x * 2 + 1).data, [3.0, 5.0])
        assert_array_equal((1 - x).data, [0.0, -1.0])
        assert_array_equal((-x).data, [-1.0, -2.0])

    def test_forward_is_deterministic(self, rng):
        a, b = rng.normal(size=(4, 8)), rng.normal(size=(8, 3))
        first = log_softmax(matmul(Tensor(a), Tensor(b))).data
        second = log_softmax(matmul(Tensor(a), Tensor(b))).data
        assert_array_equal(first, second)

    def test_nothing_recorded_without_grad(self):
        out = add(Tensor([1.0]), Tensor([2.0]))
        assert out.is_leaf
        assert not out.requires_grad


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        backward(tensor_sum(x))
        assert_array_equal(x.grad, np.ones((3, 4)))

    def test_frobenius_grad_is_x_over_norm(self):
        x = Tensor([[3.0, 4.0], [0.0, 0.0]], requires_grad=True)
        backward(frobenius_norm(x))
        assert_allclose(x.grad, x.data / 5.0)

    def test_frobenius_grad_at_zero_is_zero(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        backward(frobenius_norm(x))
        assert_array_equal(x.grad, np.zeros((2, 2)))

    def test_sqrt_grad_at_zero_is_zero(self):
        x = Tensor([0.0, 4.0], requires_grad=True)
        backward(tensor_sum(sqrt(x)))
        assert_array_equal(x.grad, [0.0, 0.25])

    def test_relu_grad_at_zero_is_zero(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        backward(tensor_sum(relu(x)))
        assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_neg_flips_gradient(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        out = neg(x)
        assert out._op == "neg"
        backward(tensor_sum(mul(out, Tensor([3.0, 5.0]))))
        assert_array_equal(x.grad, [-3.0, -5.0])

    def test_reused_leaf_accumulates_exactly(self, rng):
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        w1, w2 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))

        backward(tensor_sum(mul(x, Tensor(w1))))
        single_1 = x.grad.copy()
        x.zero_grad()
        backward(tensor_sum(mul(x, Tensor(w2))))
        single_2 = x.grad.copy()
        x.zero_grad()

        backward(add(tensor_sum(mul(x, Tensor(w1))), tensor_sum(mul(x, Tensor(w2)))))
        assert_array_equal(x.grad, single_1 + single_2)

    def test_grads_accumulate_across_calls(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(tensor_sum(x))
        backward(tensor_sum(x))
        assert_array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar_output_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GradientError):
            backward(scale_add(x, 2.0))

    def test_detached_output_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GradientError):
            backward(tensor_sum(x.detach()))

    def test_record_orders_inputs_before_consumers(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        out = mean(relu(add_bias(matmul(x, Tensor(rng.normal(size=(4, 2)))), Tensor(np.zeros(2)))))
        record = ComputationRecord.from_output(out)
        assert record.ops == ["matmul", "add_bias", "relu", "mean"]
        assert record.entries[-1].output is out

    def test_composite_matches_finite_differences(self, rng):
        w = rng.normal(size=(8, 5))
        labels_weight = rng.normal(size=(4, 5))

        def f(x):
            h = relu(matmul(row_center(x), Tensor(w)))
            return add(tensor_sum(mul(log_softmax(h), Tensor(labels_weight))), frobenius_norm(sub(x, h @ Tensor(w.T))))

        point = rng.normal(size=(4, 8))
        x = Tensor(point, requires_grad=True)
        backward(f(x))
        assert scaled_error(x.grad, finite_diff_grad(f, point)) <= 1e-5


class TestFiniteDifferences:
    def test_sum_of_squares(self):
        grad = finite_diff_grad(lambda t: tensor_sum(mul(t, t)), np.array([1.0, 2.0]))
        assert_allclose(grad, [2.0, 4.0], atol=1e-8)

    def test_constant_function(self):
        assert_array_equal(finite_diff_grad(lambda t: 3.0, np.zeros(3)), np.zeros(3))

    def test_non_finite_evaluation_is_an_error(self):
        with pytest.raises(NumericalError):
            finite_diff_grad(lambda t: float("nan"), np.zeros(2))

    def test_step_must_be_positive(self):
        with pytest.raises(ConfigError):
            finite_diff_grad(lambda t: 0.0, np.zeros(2), step=0.0)

    def test_relative_error_uses_floor_for_zero_gradients(self):
        assert relative_error(np.zeros(3), np.full(3, 1e-10)) == pytest.approx(1e-2)
        assert relative_error(np.array([2.0, 1.0]), np.array([2.0, 1.0])) == 0.0

    def test_relative_error_is_per_entry(self):
        analytic, numeric = np.array([1.0, 1e-4]), np.array([1.0, 1.1e-4])
        assert relative_error(analytic, numeric) == pytest.approx(1e-5 / 1.1e-4)
        assert scaled_error(analytic, numeric) == pytest.approx(1e-5)

    def test_scaled_error_never_exceeds_relative_error(self, rng):
        for _ in range(50):
            analytic = rng.normal(size=(3, 4)) * 10.0 ** rng.integers(-6, 2, size=(3, 4))
            numeric = analytic + rng.normal(scale=1e-7, size=(3, 4))
            assert scaled_error(analytic, numeric) <= relative_error(analytic, numeric)

    def test_error_shapes_must_match(self):
        with pytest.raises(ShapeError):
            relative_error(np.zeros(2), np.zeros(3))
        with pytest.raises(ShapeError):
            scaled_error(np.zeros(2), np.zeros(3))


class TestSgd:
    def test_single_step(self):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([2.0])
        sgd_step([p], 0.5)
        assert_array_equal(p.data, [0.0])
        assert p.grad is None

    def test_zero_lr_leaves_params(self):
        p = Tensor([1.5], requires_grad=True)
        p.grad = np.array([2.0])
        sgd_step([p], 0.0)
        assert_array_equal(p.data, [1.5])

    def test_missing_grad_is_an_error(self):
        with pytest.raises(GradientError):
            sgd_step([Tensor([1.0], requires_grad=True)], 0.1)

    def test_quadratic_converges(self):
        w = Tensor([0.0], requires_grad=True)
        for _ in range(100):
            diff = scale_add(w, 1.0, -3.0)
            backward(tensor_sum(mul(diff, diff)))
            sgd_step([w], 0.1)
        assert abs(w.item() - 3.0) < 1e-6

    def test_optimizer_uses_schedule(self):
        p = Tensor([1.0], requires_grad=True)
        opt = Sgd([p], SgdConfig(initial_lr=0.5, decay_start_epoch=1, decay_every=1, total_epochs=3))
        p.grad = np.array([1.0])
        assert opt.step(0) == 0.5
        p.grad = np.array([1.0])
        assert opt.step(1) == pytest.approx(0.05)
        assert p.item() == pytest.approx(0.45)


class TestSchedule:
    @pytest.mark.parametrize("epoch, lr", [(0, 0.05), (149, 0.05), (150, 0.005), (179, 0.005),
                                           (180, 0.0005), (210, 0.00005), (239, 0.00005)])
    def test_default_schedule(self, epoch, lr):
        assert lr_at_epoch(SgdConfig(), epoch) == pytest.approx(lr, rel=1e-12)

    def test_non_increasing_with_exact_breakpoints(self):
        cfg = SgdConfig()
        rates = [lr_at_epoch(cfg, e) for e in range(cfg.total_epochs)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        breaks = [e for e in range(1, cfg.total_epochs) if rates[e] != rates[e - 1]]
        assert breaks == [150, 180, 210]

    @pytest.mark.parametrize("epoch", [-1, 240])
    def test_out_of_range(self, epoch):
        with pytest.raises(ConfigError):
            lr_at_epoch(SgdConfig(), epoch)

    @pytest.mark.parametrize("field, value", [("initial_lr", 0.0), ("decay_factor", 1.0), ("decay_every", 0)])
    def test_invalid_config(self, field, value):
        with pytest.raises(ValueError):
            SgdConfig(**{field: value})
