import numpy as np
import pytest
from pydantic import ValidationError

from app.schemas.model import ModelSpec
from app.services.models import (
    LORA_TARGETS,
    LoraAdapter,
    LoraConfigError,
    apply_lora,
    attention_forward,
    check_params,
    forward,
    init_lora_adapters,
    init_params,
    param_shapes,
)
from app.services.params import IncompatibleParamsError, ParamMap, delta_stats, param_add, param_delta
from app.services.tensor import NonFiniteError, ShapeError


# ── ParamMap ──────────────────────────────────────────────────────────────────


def test_param_map_is_sorted_and_read_only():
    source = np.array([1.0, 2.0])
    params = ParamMap({"b": source, "a": [[0.0]]})
    assert list(params) == ["a", "b"]
    source[0] = 99.0
    assert params["b"][0] == 1.0
    with pytest.raises(ValueError):
        params["b"][0] = 5.0


def test_param_map_rejects_non_finite_values():
    with pytest.raises(NonFiniteError):
        ParamMap({"w": [np.nan]})


def test_delta_and_add_are_inverse():
    a = ParamMap({"w": [1.0, 2.0], "b": [0.5]})
    b = ParamMap({"w": [0.25, -1.0], "b": [2.0]})
    assert param_add(param_delta(a, b), b).bitwise_equal(a)


def test_incompatible_maps_are_rejected():
    a = ParamMap({"w": [1.0, 2.0]})
    with pytest.raises(IncompatibleParamsError):
        param_delta(a, ParamMap({"w": [1.0, 2.0, 3.0]}))
    with pytest.raises(IncompatibleParamsError):
        param_delta(a, ParamMap({"v": [1.0, 2.0]}))


def test_global_norm_and_delta_stats():
    theta0 = ParamMap({"w": [0.0, 0.0, 0.0, 0.0]})
    theta = ParamMap({"w": [3.0, 4.0, 0.0, 0.0]})
    assert theta.global_norm() == 5.0
    stats = delta_stats(theta, theta0)
    assert stats["l2_distance"] == 5.0
    assert stats["sparsity"] == 0.5


# ── Specs & forward ───────────────────────────────────────────────────────────


def test_attn_spec_requires_divisible_tokens():
    with pytest.raises(ValidationError):
        ModelSpec(architecture="attn", input_dim=9, hidden_dim=4, num_classes=2, tokens=2)
    with pytest.raises(ValidationError):
        ModelSpec(architecture="attn", input_dim=8, hidden_dim=4, num_classes=2)


def test_param_shapes_follow_naming_scheme(mlp_spec, attn_spec):
    assert set(param_shapes(mlp_spec)) == {"phi.0.W", "phi.0.b", "phi.1.W", "phi.1.b", "head.W", "head.b"}
    shapes = param_shapes(attn_spec)
    assert shapes["phi.q.W"] == (4, 4)
    assert shapes["phi.ff.W"] == (6, 4)
    assert shapes["head.W"] == (3, 6)


def test_init_is_deterministic(attn_spec):
    assert init_params(attn_spec, 5).bitwise_equal(init_params(attn_spec, 5))
    assert not init_params(attn_spec, 5).bitwise_equal(init_params(attn_spec, 6))


def test_check_params_rejects_wrong_architecture(mlp_spec, attn_random_params):
    with pytest.raises(IncompatibleParamsError):
        check_params(mlp_spec, attn_random_params)


@pytest.mark.parametrize("architecture", ["mlp", "attn"])
def test_forward_shapes(architecture, mlp_spec, attn_spec, rng):
    spec = mlp_spec if architecture == "mlp" else attn_spec
    out = forward(spec, init_params(spec, 0), rng.normal(size=(5, spec.input_dim)))
    assert out.features.shape == (5, spec.hidden_dim)
    assert out.logits.shape == (5, spec.num_classes)


def test_forward_rejects_wrong_width(mlp_spec, mlp_random_params):
    with pytest.raises(ShapeError):
        forward(mlp_spec, mlp_random_params, np.zeros((2, 5)))


def test_attention_rows_are_distributions(attn_spec, attn_random_params, rng):
    out = attention_forward(attn_spec, attn_random_params, rng.normal(size=(3, attn_spec.input_dim)))
    assert out.attention.shape == (3, 2, 2)
    np.testing.assert_allclose(out.attention.sum(axis=-1), 1.0, atol=1e-12)


def test_logits_are_linear_in_features(attn_spec, attn_random_params, rng):
    out = forward(attn_spec, attn_random_params, rng.normal(size=(4, attn_spec.input_dim)))
    expected = out.features @ attn_random_params["head.W"].T + attn_random_params["head.b"]
    np.testing.assert_allclose(out.logits, expected, atol=1e-12)


def zero_params(spec: ModelSpec, **overrides) -> ParamMap:
    return ParamMap({name: np.zeros(shape) for name, shape in param_shapes(spec).items()}).updated(overrides)


def test_mlp_shape_map_and_zero_biases():
    spec = ModelSpec(architecture="mlp", input_dim=4, hidden_dim=8, num_classes=3, depth=2)
    params = init_params(spec, seed=0)
    assert params.shapes() == {
        "head.W": (3, 8),
        "head.b": (3,),
        "phi.0.W": (8, 4),
        "phi.0.b": (8,),
        "phi.1.W": (8, 8),
        "phi.1.b": (8,),
    }
    for name in ("head.b", "phi.0.b", "phi.1.b"):
        assert not np.any(params[name])


@pytest.mark.parametrize("architecture", ["mlp", "attn"])
def test_all_zero_weights_give_zero_logits(architecture, mlp_spec, attn_spec, rng):
    spec = mlp_spec if architecture == "mlp" else attn_spec
    out = forward(spec, zero_params(spec), rng.normal(size=(4, spec.input_dim)))
    assert np.array_equal(out.logits, np.zeros((4, spec.num_classes)))


def test_hand_set_mlp_logits():
    spec = ModelSpec(architecture="mlp", input_dim=2, hidden_dim=2, num_classes=2, depth=1)
    params = ParamMap(
        {
            "phi.0.W": [[1.0, -1.0], [2.0, 0.0]],
            "phi.0.b": [0.0, -7.0],
            "head.W": [[1.0, 2.0], [-1.0, 1.0]],
            "head.b": [0.5, 0.0],
        }
    )
    # pre-activation (2, -1) → relu (2, 0) → logits (2 + 0.5, -2)
    out = forward(spec, params, [[3.0, 1.0]])
    np.testing.assert_allclose(out.features, [[2.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(out.logits, [[2.5, -2.0]], atol=1e-12)


def test_replacing_the_head_leaves_features_alone(attn_spec, attn_random_params, rng):
    x = rng.normal(size=(5, attn_spec.input_dim))
    swapped = attn_random_params.updated(
        {"head.W": rng.normal(size=(3, 6)), "head.b": rng.normal(size=3)}
    )
    before, after = forward(attn_spec, attn_random_params, x), forward(attn_spec, swapped, x)
    assert np.array_equal(before.features, after.features)
    assert not np.allclose(before.logits, after.logits)


# ── Attention ─────────────────────────────────────────────────────────────────


def value_path(spec: ModelSpec, params: ParamMap, x: np.ndarray) -> np.ndarray:
    """V per token, computed directly from the embedding and phi.v.W."""
    embedded = x @ params["phi.embed.W"].T + params["phi.embed.b"]
    return embedded.reshape(len(x), spec.tokens, spec.token_dim) @ params["phi.v.W"].T


def test_zero_query_and_key_give_uniform_attention(rng):
    spec = ModelSpec(architecture="attn", input_dim=8, hidden_dim=6, num_classes=3, tokens=4)
    params = init_params(spec, seed=3).updated({"phi.q.W": np.zeros((2, 2)), "phi.k.W": np.zeros((2, 2))})
    x = rng.normal(size=(3, 8))
    out = attention_forward(spec, params, x)
    assert np.array_equal(out.attention, np.full((3, 4, 4), 0.25))
    pooled = value_path(spec, params, x).mean(axis=1)
    for token in range(4):
        np.testing.assert_allclose(out.context[:, token], pooled, atol=1e-12)


def test_single_token_attends_to_itself(rng):
    spec = ModelSpec(architecture="attn", input_dim=4, hidden_dim=3, num_classes=2, tokens=1)
    params = init_params(spec, seed=2)
    x = rng.normal(size=(5, 4))
    out = attention_forward(spec, params, x)
    assert np.array_equal(out.attention, np.ones((5, 1, 1)))
    np.testing.assert_allclose(out.context, value_path(spec, params, x), atol=1e-12)


def test_two_token_context_by_hand():
    spec = ModelSpec(architecture="attn", input_dim=4, hidden_dim=3, num_classes=2, tokens=2)
    params = zero_params(
        spec,
        **{
            "phi.embed.W": np.eye(4),
            # q1·k1/√2 = ln 3, every other score 0
            "phi.q.W": [[np.sqrt(2.0) * np.log(3.0), 0.0], [0.0, 0.0]],
            "phi.k.W": np.eye(2),
            "phi.v.W": [[1.0, 2.0], [3.0, 4.0]],
        },
    )
    # tokens (1, 0) and (0, 1); V rows (1, 3) and (2, 4)
    out = attention_forward(spec, params, [[1.0, 0.0, 0.0, 1.0]])
    np.testing.assert_allclose(out.attention[0], [[0.75, 0.25], [0.5, 0.5]], atol=1e-12)
    np.testing.assert_allclose(out.context[0], [[1.25, 3.25], [1.5, 3.5]], atol=1e-12)


def test_attention_forward_needs_attn(mlp_spec, mlp_random_params):
    with pytest.raises(ValueError):
        attention_forward(mlp_spec, mlp_random_params, np.zeros((1, 8)))


# ── LoRA ──────────────────────────────────────────────────────────────────────


def test_zero_b_adapters_leave_outputs_unchanged(attn_spec, attn_random_params, rng):
    x = rng.normal(size=(6, attn_spec.input_dim))
    adapters = init_lora_adapters(attn_spec, attn_random_params, rank=2, seed=0)
    assert apply_lora(attn_random_params, adapters) is attn_random_params
    base = forward(attn_spec, attn_random_params, x).logits
    adapted = forward(attn_spec, attn_random_params, x, adapters=adapters).logits
    np.testing.assert_allclose(adapted, base, atol=1e-12)


@pytest.mark.parametrize("rank", [1, 2, 3])
def test_merged_and_adapter_paths_agree(rank, attn_spec, attn_random_params, rng):
    adapters = tuple(
        LoraAdapter(target=t, A=rng.normal(size=(rank, 4)), B=rng.normal(size=(4, rank))) for t in LORA_TARGETS
    )
    x = rng.normal(size=(6, attn_spec.input_dim))
    merged = forward(attn_spec, apply_lora(attn_random_params, adapters, scale=0.5), x).logits
    adapter_path = forward(attn_spec, attn_random_params, x, adapters=adapters, lora_scale=0.5).logits
    np.testing.assert_allclose(adapter_path, merged, atol=1e-9)


def test_apply_lora_leaves_other_tensors_untouched(attn_random_params, rng):
    adapters = (LoraAdapter(target="phi.q.W", A=rng.normal(size=(1, 4)), B=rng.normal(size=(4, 1))),)
    merged = apply_lora(attn_random_params, adapters)
    for name in attn_random_params:
        if name != "phi.q.W":
            assert merged[name].tobytes() == attn_random_params[name].tobytes()
    assert not np.array_equal(merged["phi.q.W"], attn_random_params["phi.q.W"])


def test_lora_rank_must_be_below_projection_size(attn_spec, attn_random_params):
    with pytest.raises(LoraConfigError):
        init_lora_adapters(attn_spec, attn_random_params, rank=4, seed=0)


def test_lora_needs_attention(mlp_spec, mlp_random_params):
    with pytest.raises(LoraConfigError):
        init_lora_adapters(mlp_spec, mlp_random_params, rank=1, seed=0)


def test_lora_factor_shapes_must_chain():
    with pytest.raises(ShapeError):
        LoraAdapter(target="phi.q.W", A=np.ones((2, 4)), B=np.ones((4, 3)))
