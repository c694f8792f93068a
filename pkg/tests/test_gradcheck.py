"""Tests for gradcheck: finite-difference agreement on whole networks."""

import numpy as np
import pytest

from bdrrn.gradcheck import FD_STEP, TOLERANCE, check_gradients, model_gradcheck, relative_error
from bdrrn.model import Fusion, ModelConfig, Variant
from bdrrn.tensor import Tensor, mse_loss, relu


class TestModelGradcheck:
    @pytest.mark.parametrize("fusion", [Fusion.ADD, Fusion.CONCAT])
    def test_bdrrn_every_parameter(self, fusion: Fusion) -> None:
        errors = model_gradcheck(ModelConfig(variant=Variant.BDRRN, fusion=fusion, channels=4), 16, 16)
        assert max(errors.values()) < TOLERANCE
        assert ("fuse.w" in errors) == (fusion is Fusion.CONCAT)

    def test_drrn(self) -> None:
        errors = model_gradcheck(ModelConfig(variant=Variant.DRRN, channels=2, main_iters=3), 8, 8)
        assert max(errors.values()) < TOLERANCE


class TestCheckGradients:
    def test_agrees_away_from_relu_kinks(self) -> None:
        x = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)

        def loss_fn() -> Tensor:
            return mse_loss(relu(x), np.zeros(3))

        errors = check_gradients(loss_fn, {"x": x})
        assert errors["x"] < 1e-8
        assert x.grad is not None

    def test_input_within_one_step_of_a_kink(self) -> None:
        # x - FD_STEP is negative, so a plain central difference would see the kink
        x = Tensor(np.array([0.3 * FD_STEP]), requires_grad=True)
        errors = check_gradients(lambda: mse_loss(relu(x), -np.ones(1)), {"x": x})
        assert errors["x"] < 1e-6

    def test_wrong_small_gradient_is_caught(self) -> None:
        x = Tensor(np.array([0.3, 0.8]), requires_grad=True)

        def loss_fn() -> Tensor:
            # true gradient is [1, 1e-6]; the backward drops the second term
            value = x.data[0] + 1e-6 * x.data[1]
            return Tensor(np.array(value), requires_grad=True, _parents=(x,),
                          _backward=lambda g: (g * np.array([1.0, 0.0]),))

        assert check_gradients(loss_fn, {"x": x})["x"] > 0.05

    def test_leaves_data_unchanged(self) -> None:
        x = Tensor(np.array([0.3, 0.7]), requires_grad=True)
        before = x.data.copy()
        check_gradients(lambda: mse_loss(x, np.ones(2)), {"x": x})
        assert np.array_equal(x.data, before)


class TestRelativeError:
    def test_relative_to_larger_magnitude(self) -> None:
        assert relative_error(1.0, 0.5) == 0.5
        assert relative_error(-2.0, 2.0) == 2.0

    def test_floor_bounds_the_denominator(self) -> None:
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(0.0, 1e-9, floor=1e-5) == pytest.approx(1e-4)
