import numpy as np
import pytest
from pydantic import ValidationError

from app.schemas.optim import AdamWConfig, ScheduleSpec
from app.services.optim import OptState, ScheduleError, adamw_step, clip_global_norm, lr_at_step
from app.services.params import ParamMap


@pytest.fixture
def schedule() -> ScheduleSpec:
    return ScheduleSpec(peak_lr=1.0, warmup_steps=50, total_steps=150)


def test_lr_endpoints_and_midpoint(schedule):
    assert lr_at_step(schedule, 0) == 0.0
    assert lr_at_step(schedule, 25) == 0.5
    assert lr_at_step(schedule, 50) == 1.0
    assert lr_at_step(schedule, 100) == pytest.approx(0.5, abs=1e-15)
    assert lr_at_step(schedule, 150) == 0.0


def test_lr_outside_run_raises(schedule):
    with pytest.raises(ScheduleError):
        lr_at_step(schedule, 151)
    with pytest.raises(ScheduleError):
        lr_at_step(schedule, -1)


def test_warmup_must_end_before_total():
    with pytest.raises(ValidationError):
        ScheduleSpec(peak_lr=1.0, warmup_steps=10, total_steps=10)


def test_short_runs_shrink_warmup():
    assert ScheduleSpec.for_run(1e-3, 50, 20).warmup_steps == 2
    assert ScheduleSpec.for_run(1e-3, 5, 20).warmup_steps == 5


def test_clip_three_four():
    clipped = clip_global_norm(ParamMap({"g": [3.0, 4.0]}), 1.0)
    assert clipped["g"].tolist() == [0.6, 0.8]


def test_clip_leaves_small_gradients():
    grads = ParamMap({"a": [0.3], "b": [0.4]})
    assert clip_global_norm(grads, 1.0) is grads


def test_clip_is_joint_across_tensors():
    clipped = clip_global_norm(ParamMap({"a": [6.0], "b": [8.0]}), 1.0)
    assert clipped.global_norm() == pytest.approx(1.0, abs=1e-15)
    assert clipped["a"][0] / clipped["b"][0] == pytest.approx(0.75)


def test_zero_gradient_leaves_params_unchanged():
    params = ParamMap({"w": [1.0, -2.0, 3.0]})
    new, state = adamw_step(params, params.zeros_like(), OptState.fresh(params), lr=0.1)
    assert new.bitwise_equal(params)
    assert state.step == 1


def test_first_adam_step_moves_by_lr():
    params = ParamMap({"w": [0.0, 0.0]})
    grads = ParamMap({"w": [2.0, -0.5]})
    new, _ = adamw_step(params, grads, OptState.fresh(params), lr=0.01)
    np.testing.assert_allclose(new["w"], [-0.01, 0.01], rtol=1e-6)


def test_decoupled_weight_decay():
    params = ParamMap({"w": [2.0]})
    state = OptState.fresh(params, AdamWConfig(weight_decay=0.1))
    new, _ = adamw_step(params, params.zeros_like(), state, lr=0.5)
    assert new["w"][0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)


def test_adamw_does_not_mutate_inputs():
    params = ParamMap({"w": [1.0]})
    grads = ParamMap({"w": [1.0]})
    state = OptState.fresh(params)
    adamw_step(params, grads, state, lr=0.1)
    assert params["w"][0] == 1.0
    assert state.step == 0
    assert state.m["w"][0] == 0.0
