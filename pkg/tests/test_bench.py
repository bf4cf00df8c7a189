import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st
from pydantic import ValidationError

from app.schemas.bench import BenchSpec
from app.schemas.model import ModelSpec
from app.schemas.probing import ProbeConfig
from app.services.bench import (
    BenchError,
    DomainDataset,
    aggregate_ood,
    evaluate,
    export_domains,
    generate_domains,
    predict,
    pretrain,
)
from app.services.models import forward, init_params
from app.services.probing import head_accuracy, train_linear_probe
from app.services.training import EmptyDatasetError


def test_generation_is_deterministic(tiny_bench):
    a, b = generate_domains(tiny_bench, 9), generate_domains(tiny_bench, 9)
    for x, y in zip(a.all(), b.all()):
        assert x.X.tobytes() == y.X.tobytes()
        assert np.array_equal(x.y, y.y)


def test_different_seeds_differ(tiny_bench):
    assert not np.array_equal(generate_domains(tiny_bench, 1).source.X, generate_domains(tiny_bench, 2).source.X)


def test_split_sizes_and_balance(tiny_bench, suite):
    c = tiny_bench.num_classes
    assert len(suite.pretrain) == len(tiny_bench.pretrain_styles) * c * tiny_bench.train_per_class
    assert suite.source.label_counts(c) == [tiny_bench.train_per_class] * c
    assert suite.id_test.label_counts(c) == [tiny_bench.test_per_class] * c
    assert [t.domain_id for t in suite.targets] == ["1", "2", "3"]
    assert suite.target("2").style == 2
    assert suite.source.X.shape[1] == tiny_bench.input_dim


def test_splits_do_not_share_examples(suite):
    rows = np.concatenate([d.X for d in suite.all() if d.name != "pretrain"])
    assert len({row.tobytes() for row in rows}) == len(rows)
    source_rows = {row.tobytes() for row in suite.source.X}
    assert not source_rows & {row.tobytes() for row in suite.pretrain.X}


def test_styles_are_independent_of_the_target_list(tiny_bench):
    fewer = tiny_bench.model_copy(update={"target_styles": (3,)})
    a, b = generate_domains(tiny_bench, 4), generate_domains(fewer, 4)
    assert a.target("3").X.tobytes() == b.target("3").X.tobytes()
    assert a.source.X.tobytes() == b.source.X.tobytes()


def test_noiseless_single_style_is_linearly_separable(tiny_bench):
    spec = tiny_bench.model_copy(update={"sigma_core": 0.0, "sigma_noise": 0.0, "kappa": 1.0})
    source = generate_domains(spec, 0).source
    for c in range(spec.num_classes):
        rows = source.X[source.y == c]
        np.testing.assert_allclose(rows, np.broadcast_to(rows[0], rows.shape), atol=1e-12)
    fit = train_linear_probe(source.X, source.y, spec.num_classes, ProbeConfig(l2=1e-6))
    assert head_accuracy(source.X, source.y, fit.head) == 1.0


def test_bench_spec_validation():
    with pytest.raises(ValidationError):
        BenchSpec.model_validate(BenchSpec.reference().model_dump() | {"source_style": 9})
    with pytest.raises(ValidationError):
        BenchSpec.model_validate(BenchSpec.reference().model_dump() | {"target_styles": (0, 1)})
    with pytest.raises(ValidationError):
        BenchSpec.model_validate(BenchSpec.reference().model_dump() | {"core_dim": 64})


def test_dataset_validation():
    with pytest.raises(BenchError):
        DomainDataset("bad", np.zeros((3, 2)), np.array([0, 1]))
    with pytest.raises(BenchError):
        DomainDataset("bad", np.zeros((2, 2)), np.array([0.5, 1.0]))


# ── Evaluation ────────────────────────────────────────────────────────────────


@pytest.fixture
def two_class_spec() -> ModelSpec:
    return ModelSpec(architecture="mlp", input_dim=8, hidden_dim=4, num_classes=2, depth=1)


def test_ties_go_to_the_lowest_class(two_class_spec, rng):
    params = init_params(two_class_spec, 0).map(np.zeros_like)
    data = DomainDataset("t", rng.normal(size=(10, 8)), np.array([0, 1] * 5))
    assert np.all(predict(two_class_spec, params, data) == 0)
    assert evaluate(two_class_spec, params, data) == 0.5


def test_hand_built_classifier_is_perfect(two_class_spec):
    # Feature 0 is relu(x0), feature 1 is relu(-x0); the head picks whichever is active.
    params = init_params(two_class_spec, 0).map(np.zeros_like)
    W = np.zeros((4, 8))
    W[0, 0], W[1, 0] = 1.0, -1.0
    head = np.zeros((2, 4))
    head[0, 0], head[1, 1] = 1.0, 1.0
    params = params.updated({"phi.0.W": W, "head.W": head})
    X = np.zeros((6, 8))
    X[:, 0] = [2.0, 1.0, 0.5, -0.5, -1.0, -2.0]
    data = DomainDataset("t", X, np.array([0, 0, 0, 1, 1, 1]))
    assert evaluate(two_class_spec, params, data) == 1.0


def test_evaluate_matches_argmax_oracle(mlp_spec, mlp_random_params, rng):
    data = DomainDataset("t", rng.normal(size=(20, 8)), rng.integers(0, 3, size=20))
    logits = forward(mlp_spec, mlp_random_params, data.X).logits
    hits = 0
    for row, label in zip(logits.tolist(), data.y.tolist()):
        best = 0
        for c in range(1, 3):
            if row[c] > row[best]:
                best = c
        hits += best == label
    oracle = hits / 20
    assert evaluate(mlp_spec, mlp_random_params, data) == oracle


def test_evaluate_rejects_empty_dataset(mlp_spec, mlp_random_params):
    empty = DomainDataset("t", np.zeros((0, 8)), np.zeros(0, dtype=np.int64))
    with pytest.raises(EmptyDatasetError):
        evaluate(mlp_spec, mlp_random_params, empty)


# ── Avg OOD ───────────────────────────────────────────────────────────────────


def test_aggregate_ood_reproduces_table_rows():
    assert round(aggregate_ood([70.89, 65.34, 36.92, 45.83, 50.18]), 2) == 53.83
    assert round(aggregate_ood([62.00, 77.62, 49.96, 48.26, 53.77]), 2) == 58.32


def test_aggregate_ood_of_single_entry():
    assert aggregate_ood([0.37]) == 0.37


def test_aggregate_ood_rejects_empty():
    with pytest.raises(ValueError):
        aggregate_ood([])


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=12), st.randoms())
def test_aggregate_ood_is_permutation_invariant(values, random):
    shuffled = list(values)
    random.shuffle(shuffled)
    assert aggregate_ood(shuffled) == pytest.approx(aggregate_ood(values), abs=1e-15)


@given(st.floats(0.0, 1.0), st.integers(1, 10))
def test_aggregate_ood_of_constants(value, count):
    assert aggregate_ood([value] * count) == pytest.approx(value, abs=1e-15)


# ── Pretraining & export ──────────────────────────────────────────────────────


def test_pretraining_beats_chance(mlp_spec, mlp_theta0, suite):
    assert evaluate(mlp_spec, mlp_theta0, suite.id_test) > 1.0 / mlp_spec.num_classes


def test_pretraining_zero_steps_is_init(mlp_spec, suite, tiny_pretrain):
    theta0 = pretrain(mlp_spec, suite.pretrain, tiny_pretrain.model_copy(update={"steps": 0}))
    assert theta0.bitwise_equal(init_params(mlp_spec, tiny_pretrain.seed))


def test_export_writes_one_csv_per_domain(suite, tmp_path):
    paths = export_domains(suite, tmp_path)
    assert sorted(p.name for p in paths) == sorted(f"{d.name}.csv" for d in suite.all())
    with (tmp_path / "source.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["label", *(f"x{j}" for j in range(8))]
    assert len(rows) == len(suite.source) + 1
    assert float(rows[1][1]) == suite.source.X[0, 0]
