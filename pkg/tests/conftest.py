"""Shared fixtures: tiny models and a tiny benchmark that train in well under a second."""

import numpy as np
import pytest

from app.core.config import get_settings
from app.schemas.bench import BenchSpec, PretrainConfig
from app.schemas.model import ModelSpec
from app.services.bench import generate_domains, pretrain
from app.services.models import init_params


@pytest.fixture(autouse=True)
def fresh_settings(monkeypatch):
    """Every test sees default settings, whatever the developer's environment holds."""
    for name in (
        "FTLAB_ENVIRONMENT",
        "FTLAB_LOG_LEVEL",
        "FTLAB_OUTPUT_DIR",
        "FTLAB_MAX_WORKERS",
        "FTLAB_CHECKPOINTS_PER_RUN",
    ):
        monkeypatch.delenv(name, raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mlp_spec() -> ModelSpec:
    return ModelSpec(architecture="mlp", input_dim=8, hidden_dim=6, num_classes=3, depth=2)


@pytest.fixture
def attn_spec() -> ModelSpec:
    # token_dim = 4, so LoRA ranks 1..3 are valid.
    return ModelSpec(architecture="attn", input_dim=8, hidden_dim=6, num_classes=3, tokens=2)


@pytest.fixture
def tiny_bench() -> BenchSpec:
    return BenchSpec(
        num_classes=3,
        core_dim=4,
        input_dim=8,
        num_styles=4,
        pretrain_styles=(0, 1, 2),
        source_style=0,
        target_styles=(1, 2, 3),
        train_per_class=20,
        test_per_class=20,
        sigma_core=0.3,
        sigma_noise=0.1,
        kappa=2.0,
    )


@pytest.fixture
def tiny_pretrain() -> PretrainConfig:
    return PretrainConfig(steps=40, batch_size=32, peak_lr=1e-2, warmup_steps=5, seed=7)


@pytest.fixture
def suite(tiny_bench):
    return generate_domains(tiny_bench, seed=3)


@pytest.fixture
def mlp_theta0(mlp_spec, suite, tiny_pretrain):
    return pretrain(mlp_spec, suite.pretrain, tiny_pretrain)


@pytest.fixture
def attn_theta0(attn_spec, suite, tiny_pretrain):
    return pretrain(attn_spec, suite.pretrain, tiny_pretrain)


@pytest.fixture
def mlp_random_params(mlp_spec):
    return init_params(mlp_spec, seed=11)


@pytest.fixture
def attn_random_params(attn_spec):
    return init_params(attn_spec, seed=11)


TINY_CONFIG = """\
bench.num_classes = 3
bench.core_dim = 4
bench.input_dim = 8
bench.num_styles = 4
bench.pretrain_styles = 0, 1, 2
bench.source_style = 0
bench.target_styles = 1, 2, 3
bench.train_per_class = 20
bench.test_per_class = 20
bench.sigma_core = 0.3
bench.sigma_noise = 0.1
bench.kappa = 2

model.architecture = attn
model.input_dim = 8
model.hidden_dim = 6
model.num_classes = 3
model.tokens = 2

pretrain.steps = 30
pretrain.batch_size = 32
pretrain.peak_lr = 1e-2
pretrain.warmup_steps = 5

train.steps = 12
train.batch_size = 16
train.peak_lr = 1e-2
train.warmup_steps = 3
train.checkpoint_interval = 4
"""


@pytest.fixture
def tiny_config_text() -> str:
    return TINY_CONFIG
