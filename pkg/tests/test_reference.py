"""Qualitative trade-offs on the frozen reference benchmark.

Run with ``pytest -m slow``; the full grid takes a few minutes on one core.
"""

from pathlib import Path

import pytest

from app.schemas.sweep import TradeoffRecord, make_run_id
from app.services.bench import evaluate, generate_domains
from app.services.checkpoint import read_checkpoint
from app.services.config_file import load_config
from app.services.params import ParamMap, param_delta
from app.services.probing import DOMINANCE_SLACK
from app.services.sweep import find_run_dir, load_trajectory, pretrained_filename, run_probe_report, run_sweep

pytestmark = pytest.mark.slow

REFERENCE_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "reference.conf"
UNSEEN_STYLES = ("6", "7")


@pytest.fixture(scope="module")
def reference_out(tmp_path_factory) -> Path:
    return tmp_path_factory.mktemp("reference")


@pytest.fixture(scope="module")
def reference(reference_out):
    config = load_config(REFERENCE_CONFIG)
    outcome = run_sweep(config, out=reference_out)
    assert outcome.failed == 0
    return config, outcome


@pytest.fixture(scope="module")
def suite(reference):
    config, _ = reference
    return generate_domains(config.bench, config.seeds[0])


@pytest.fixture(scope="module")
def probe_results(reference, reference_out, suite):
    config, _ = reference
    run_dir = find_run_dir(reference_out, config.probe_run, config.seeds[0])
    return run_probe_report(config.model, run_dir, list(suite.targets), config.probe, reference_out / "probe.csv")


def final_params(reference_out: Path, record: TradeoffRecord) -> ParamMap:
    return load_trajectory(reference_out / "runs" / make_run_id(record.method, record.hyper, record.seed)).final


def rows(outcome, method: str) -> list[TradeoffRecord]:
    return [r for r in outcome.records if r.method == method]


def test_vanilla_trades_ood_for_id(reference):
    _, outcome = reference
    (pretrained,) = rows(outcome, "pretrained")
    (vanilla,) = rows(outcome, "vanilla")
    assert vanilla.id_acc > pretrained.id_acc
    assert vanilla.avg_ood < pretrained.avg_ood


def test_wiseft_interior_alpha_beats_both_endpoints(reference):
    _, outcome = reference
    (pretrained,) = rows(outcome, "pretrained")
    (vanilla,) = rows(outcome, "vanilla")
    best_interior = max(r.avg_ood for r in rows(outcome, "wiseft"))
    assert best_interior > pretrained.avg_ood
    assert best_interior > vanilla.avg_ood


def test_some_l2_strength_improves_both_axes(reference):
    _, outcome = reference
    (pretrained,) = rows(outcome, "pretrained")
    (vanilla,) = rows(outcome, "vanilla")
    assert any(r.avg_ood > vanilla.avg_ood and r.id_acc > pretrained.id_acc for r in rows(outcome, "l2"))


def test_probing_shows_forgetting_on_an_unseen_style(probe_results):
    final_step = max(r.step for r in probe_results)
    by_key = {(r.target, r.step): r.probe_accuracy for r in probe_results}
    assert any(by_key[(t, final_step)] < by_key[(t, 0)] for t in UNSEEN_STYLES)


def test_rerun_is_byte_identical(reference, tmp_path):
    config, outcome = reference
    again = run_sweep(config, out=tmp_path)
    assert again.report_path.read_bytes() == outcome.report_path.read_bytes()


def test_pretrained_model_fits_the_pretraining_mixture(reference, reference_out, suite):
    config, _ = reference
    theta0 = read_checkpoint(reference_out / pretrained_filename(config.seeds[0], config.seeds))
    assert evaluate(config.model, theta0, suite.pretrain) >= 0.9


def test_vanilla_improves_source_accuracy(reference, reference_out, suite):
    config, outcome = reference
    (vanilla,) = rows(outcome, "vanilla")
    trajectory = load_trajectory(reference_out / "runs" / make_run_id("vanilla", "", vanilla.seed))
    start = evaluate(config.model, trajectory.checkpoints[0].params, suite.source)
    assert evaluate(config.model, trajectory.final, suite.source) > start


def test_stronger_l2_stays_closer_to_the_pretrained_model(reference, reference_out):
    config, outcome = reference
    theta0 = read_checkpoint(reference_out / pretrained_filename(config.seeds[0], config.seeds))
    by_lambda = sorted(rows(outcome, "l2"), key=lambda r: float(r.hyper.split("=", 1)[1]))
    assert len(by_lambda) == 5
    distances = [param_delta(final_params(reference_out, r), theta0).global_norm() for r in by_lambda]
    assert all(later <= earlier for earlier, later in zip(distances, distances[1:]))


def test_probe_never_loses_to_the_carried_head(probe_results, suite):
    assert {r.target for r in probe_results} == {t.domain_id for t in suite.targets}
    for result in probe_results:
        assert result.probe_loss <= result.carried_loss + DOMINANCE_SLACK
