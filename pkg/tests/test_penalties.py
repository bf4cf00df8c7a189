import numpy as np
import pytest

from app.services import autodiff as ad
from app.services.models import INPUT, forward, init_params, model_graph
from app.services.params import IncompatibleParamsError, ParamMap
from app.services.penalties import (
    KD_TARGET,
    anchor_bindings,
    kd_penalty,
    kd_penalty_expr,
    l1_penalty,
    l1_penalty_expr,
    l2_penalty,
    l2_penalty_expr,
    penalized_names,
)


def test_l1_of_identical_maps_is_zero():
    theta = ParamMap({"w": [1.0, -2.0]})
    assert l1_penalty(theta, theta, 1.0).value == 0.0


def test_l1_direct_arithmetic():
    theta = ParamMap({"w": [3.0, -4.0]})
    theta0 = ParamMap({"w": [0.0, 0.0]})
    result = l1_penalty(theta, theta0, 1.0)
    assert result.value == 7.0
    np.testing.assert_array_equal(result.grads["w"], [1.0, -1.0])


def test_l1_subgradient_is_zero_where_delta_is_zero():
    theta = ParamMap({"w": [1.0, 5.0]})
    theta0 = ParamMap({"w": [1.0, 2.0]})
    np.testing.assert_array_equal(l1_penalty(theta, theta0, 2.0).grads["w"], [0.0, 2.0])


def test_l1_matches_elementwise_oracle(rng):
    theta = ParamMap({"a": rng.normal(size=6), "b": rng.normal(size=(2, 2))})
    theta0 = ParamMap({"a": rng.normal(size=6), "b": rng.normal(size=(2, 2))})
    oracle = 0.5 * sum(float(np.abs(theta[n] - theta0[n]).sum()) for n in theta)
    assert l1_penalty(theta, theta0, 0.5).value == pytest.approx(oracle, abs=1e-12)


def test_l2_direct_arithmetic():
    theta = ParamMap({"w": [3.0, 4.0]})
    theta0 = ParamMap({"w": [0.0, 0.0]})
    result = l2_penalty(theta, theta0, 1.0)
    assert result.value == 25.0
    np.testing.assert_array_equal(result.grads["w"], [6.0, 8.0])


def test_l2_of_identical_maps_has_zero_gradient():
    theta = ParamMap({"w": [1.0, -2.0], "head.b": [0.5]})
    result = l2_penalty(theta, theta, 3.0)
    assert result.value == 0.0
    assert all(not np.any(g) for g in result.grads.values())


def test_head_can_be_exempted():
    theta = ParamMap({"phi.0.W": [1.0], "head.W": [10.0]})
    theta0 = ParamMap({"phi.0.W": [0.0], "head.W": [0.0]})
    assert l2_penalty(theta, theta0, 1.0).value == 101.0
    exempt = l2_penalty(theta, theta0, 1.0, exempt_head=True)
    assert exempt.value == 1.0
    assert exempt.grads["head.W"][0] == 0.0
    assert penalized_names(theta, exempt_head=True) == ["phi.0.W"]


def test_penalties_reject_incompatible_maps():
    with pytest.raises(IncompatibleParamsError):
        l2_penalty(ParamMap({"w": [1.0]}), ParamMap({"w": [1.0, 2.0]}), 1.0)


def test_negative_lambda_is_rejected():
    theta = ParamMap({"w": [1.0]})
    with pytest.raises(ValueError):
        l1_penalty(theta, theta, -1.0)


@pytest.mark.parametrize("seed", range(5))
def test_anchor_penalty_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    theta = {"a": rng.normal(size=(4, 5)), "b": rng.normal(size=5)}
    # L1 is only differentiable away from zero deltas.
    theta0 = {
        n: t - np.where(rng.random(t.shape) < 0.5, -1.0, 1.0) * rng.uniform(0.01, 1.0, t.shape)
        for n, t in theta.items()
    }
    names = sorted(theta)
    bindings = {**theta, **anchor_bindings(ParamMap(theta0), names)}
    for builder in (l1_penalty_expr, l2_penalty_expr):
        expr = builder(names, 0.7)
        assert ad.finite_difference_check(expr, bindings, wrt=names) <= 1e-6


def test_empty_name_list_builds_no_penalty():
    assert l1_penalty_expr([], 1.0) is None
    assert l2_penalty_expr([], 1.0) is None


# ── KD ────────────────────────────────────────────────────────────────────────


@pytest.mark.parametrize("match", ["logits", "features"])
def test_kd_null_case(match, attn_spec, attn_random_params, rng):
    result = kd_penalty(attn_spec, attn_random_params, attn_random_params, rng.normal(size=(5, 8)), 2.0, match)
    assert result.value == 0.0
    assert all(not np.any(g) for g in result.grads.values())


def test_kd_bias_shift(mlp_spec, mlp_random_params, rng):
    c = 0.3
    shifted = mlp_random_params.updated({"head.b": mlp_random_params["head.b"] + c})
    result = kd_penalty(mlp_spec, shifted, mlp_random_params, rng.normal(size=(7, 8)), 2.0)
    assert result.value == pytest.approx(2.0 * mlp_spec.num_classes * c * c, rel=1e-12)


def test_kd_matches_double_forward_oracle(mlp_spec, mlp_random_params, rng):
    other = init_params(mlp_spec, seed=99)
    x = rng.normal(size=(4, 8))
    diff = forward(mlp_spec, other, x).logits - forward(mlp_spec, mlp_random_params, x).logits
    oracle = 0.5 * float((diff**2).sum(axis=1).mean())
    assert kd_penalty(mlp_spec, other, mlp_random_params, x, 0.5).value == pytest.approx(oracle, abs=1e-10)


def test_kd_teacher_is_not_differentiated(mlp_spec, mlp_random_params, rng):
    other = init_params(mlp_spec, seed=5)
    result = kd_penalty(mlp_spec, other, mlp_random_params, rng.normal(size=(4, 8)), 1.0)
    assert set(result.grads) == set(other)
    assert any(np.any(g) for g in result.grads.values())


@pytest.mark.parametrize("architecture", ["mlp", "attn"])
@pytest.mark.parametrize("match", ["logits", "features"])
def test_kd_gradient_matches_finite_differences(architecture, match, mlp_spec, attn_spec, rng):
    spec = mlp_spec if architecture == "mlp" else attn_spec
    theta, theta0 = init_params(spec, 1), init_params(spec, 2)
    x = rng.normal(size=(4, spec.input_dim))
    teacher = forward(spec, theta0, x)
    graph = model_graph(spec)
    output = graph.logits if match == "logits" else graph.features
    expr = kd_penalty_expr(output, 1.5, 4)
    target = teacher.logits if match == "logits" else teacher.features
    bindings = {**theta, INPUT: x, KD_TARGET: target}
    assert ad.finite_difference_check(expr, bindings, wrt=list(theta)) <= 1e-6
