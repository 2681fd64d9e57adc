"""
Tests for the Adadelta optimizer and the step learning-rate schedule.
"""

import json
import math

import numpy as np
import pytest

from confidence_iqn import tensor_core as tc
from confidence_iqn.checkpoint import decode, encode
from confidence_iqn.errors import ContractError, ParameterError
from confidence_iqn.optim import (
    Adadelta,
    AdadeltaConfig,
    AdadeltaState,
    StepLrSchedule,
    adadelta_step,
    schedule_epoch_end,
)
from confidence_iqn.tensor_core import Parameter


def _scalar_param(value=0.0):
    return Parameter(np.array([value], dtype=np.float64))


class TestAdadeltaStep:
    def test_first_step_hand_value(self):
        w = _scalar_param()
        adadelta_step({"w": w}, {"w": np.array([1.0])}, AdadeltaState())
        expected = -math.sqrt(1e-6) / math.sqrt(0.1 + 1e-6)
        assert w.data[0] == pytest.approx(expected, abs=1e-9)
        assert w.data[0] == pytest.approx(-3.1623e-3, abs=1e-7)

    def test_accumulators_after_first_step(self):
        w = _scalar_param()
        state = AdadeltaState()
        adadelta_step({"w": w}, {"w": np.array([1.0])}, state)
        delta = w.data[0]
        assert state.sq_avg["w"][0] == pytest.approx(0.1, abs=1e-12)
        assert state.acc_delta["w"][0] == pytest.approx(0.1 * delta * delta, abs=1e-15)
        assert state.steps == 1

    def test_zero_gradient_leaves_params(self):
        w = Parameter(np.array([1.5, -2.0]))
        adadelta_step({"w": w}, {"w": np.zeros(2)}, AdadeltaState())
        assert w.data.tolist() == [1.5, -2.0]

    def test_lr_scales_update(self):
        a, b = _scalar_param(), _scalar_param()
        adadelta_step({"w": a}, {"w": np.array([1.0])}, AdadeltaState(lr=1.0))
        adadelta_step({"w": b}, {"w": np.array([1.0])}, AdadeltaState(lr=0.5))
        assert b.data[0] == pytest.approx(0.5 * a.data[0], rel=1e-12)

    def test_missing_gradient(self):
        with pytest.raises(ContractError, match="no gradient for parameter 'w'"):
            adadelta_step({"w": _scalar_param()}, {"w": None}, AdadeltaState())

    def test_gradient_shape_checked(self):
        with pytest.raises(ContractError, match="shape"):
            adadelta_step({"w": _scalar_param()}, {"w": np.zeros(3)}, AdadeltaState())

    def test_converges_on_quadratic(self, float64):
        w = _scalar_param()
        optimizer = Adadelta({"w": w})
        for _ in range(5000):
            optimizer.zero_grad()
            diff = tc.sub(w, tc.constant([3.0]))
            tc.backward(tc.sum(tc.elementwise_mul(diff, diff)))
            optimizer.step()
        assert abs(w.data[0] - 3.0) < 0.1

    def test_deterministic_runs(self):
        def run():
            rng = np.random.default_rng(11)
            w = Parameter(np.zeros(4, dtype=np.float32))
            state = AdadeltaState()
            for _ in range(10):
                adadelta_step({"w": w}, {"w": rng.normal(size=4).astype(np.float32)}, state)
            return w.data

        assert run().tobytes() == run().tobytes()


class TestAdadeltaState:
    def test_tensor_round_trip(self):
        w = Parameter(np.zeros(3, dtype=np.float32))
        state = AdadeltaState(rho=0.8, lr=0.49)
        adadelta_step({"w": w}, {"w": np.array([1.0, -2.0, 0.5], dtype=np.float32)}, state)

        restored = AdadeltaState.from_tensors(state.to_tensors("opt"), state.hyperparameters(), "opt")
        assert restored.steps == 1
        assert restored.rho == 0.8
        assert restored.sq_avg["w"].tobytes() == state.sq_avg["w"].tobytes()
        assert restored.acc_delta["w"].tobytes() == state.acc_delta["w"].tobytes()

    def test_scalars_exact_through_container(self):
        state = AdadeltaState(rho=0.9, eps=1e-6, lr=0.7, steps=2**24 + 1)
        state.sq_avg["w"] = np.array([0.25, 0.5], dtype=np.float32)
        state.acc_delta["w"] = np.array([1e-3, 2e-3], dtype=np.float32)

        tensors = decode(encode(state.to_tensors("optim")))
        hyper = json.loads(json.dumps(state.hyperparameters()))
        restored = AdadeltaState.from_tensors(tensors, hyper, "optim")

        assert (restored.rho, restored.eps, restored.lr) == (0.9, 1e-6, 0.7)
        assert restored.steps == 2**24 + 1
        assert restored.sq_avg["w"].tolist() == [0.25, 0.5]

    def test_no_scalar_tensor_in_container(self):
        assert set(AdadeltaState(steps=3).to_tensors("optim")) == set()

    def test_missing_state(self):
        with pytest.raises(ContractError, match="no optimizer state"):
            AdadeltaState.from_tensors({}, None, "optim")
        with pytest.raises(ContractError, match="steps"):
            AdadeltaState.from_tensors({}, {"rho": 0.9, "eps": 1e-6, "lr": 1.0}, "optim")


class TestAdadelta:
    def test_skips_frozen_parameters(self):
        trained, frozen = _scalar_param(), _scalar_param(1.0)
        frozen.requires_grad = False
        optimizer = Adadelta({"a": trained, "b": frozen})
        trained.grad = np.array([1.0])
        optimizer.step()
        assert list(optimizer.trainable) == ["a"]
        assert frozen.data[0] == 1.0
        assert trained.data[0] < 0.0

    def test_state_follows_config(self):
        optimizer = Adadelta({}, AdadeltaConfig(lr=0.3, rho=0.95, eps=1e-8))
        assert (optimizer.state.lr, optimizer.state.rho, optimizer.state.eps) == (0.3, 0.95, 1e-8)
        optimizer.set_lr(0.1)
        assert optimizer.state.lr == 0.1

    @pytest.mark.parametrize("kwargs", [
        {"lr": 0.0},
        {"rho": 1.0},
        {"eps": 0.0},
        {"gamma": -0.5},
        {"step_every": 0},
    ])
    def test_config_validation(self, kwargs):
        with pytest.raises(ParameterError):
            AdadeltaConfig(**kwargs)


class TestStepLrSchedule:
    def test_two_epochs(self):
        schedule = StepLrSchedule()
        schedule_epoch_end(schedule)
        assert schedule_epoch_end(schedule) == pytest.approx(0.49, abs=1e-9)

    def test_twenty_epochs(self):
        schedule = StepLrSchedule()
        for _ in range(20):
            lr = schedule_epoch_end(schedule)
        assert lr == pytest.approx(7.98e-4, rel=1e-3)

    def test_gamma_one_is_constant(self):
        schedule = StepLrSchedule(gamma=1.0)
        assert [schedule_epoch_end(schedule) for _ in range(3)] == [1.0, 1.0, 1.0]

    def test_step_every(self):
        schedule = StepLrSchedule(step_every=2)
        assert [schedule_epoch_end(schedule) for _ in range(4)] == pytest.approx([1.0, 0.7, 0.7, 0.49])

    def test_from_config(self):
        schedule = StepLrSchedule.from_config(AdadeltaConfig(lr=2.0, gamma=0.5))
        assert schedule.current_lr == 2.0
        assert schedule_epoch_end(schedule) == 1.0
