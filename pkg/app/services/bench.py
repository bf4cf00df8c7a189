"""
app/services/bench.py

Synthetic multi-style domain-shift benchmark, pretraining, and accuracy.

Generation (all draws from ``np.random.default_rng([seed, tag, ...])`` so
every stream is independent of the others and of style ordering):

    μ_c ~ N(0, I_k)                                   class prototypes
    M_s = Q_s · diag(σ_s),  σ_s ∈ [1/κ, κ]            style map, Q_s orthonormal d×k
    b_s ~ N(0, I_d)                                   style offset
    x   = M_s (μ_c + σ_core ε) + b_s + σ_noise η
"""

import csv
from collections.abc import Sequence
from dataclasses import dataclass
from math import log
from pathlib import Path
from statistics import fmean

import numpy as np
import numpy.typing as npt

from app.core.logging import get_logger
from app.schemas.bench import BenchSpec, PretrainConfig
from app.schemas.model import ModelSpec
from app.services.models import check_params, forward, init_params, model_graph
from app.services.params import ParamMap
from app.services.tensor import frozen
from app.services.training import EmptyDatasetError, Objective, cross_entropy_loss, plateau_reached, train

logger = get_logger(__name__)

_PROTOTYPES, _STYLE, _SAMPLES = 0, 1, 2
_SPLIT_PRETRAIN, _SPLIT_SOURCE, _SPLIT_ID_TEST, _SPLIT_TARGET = 0, 1, 2, 3


class BenchError(ValueError):
    """Raised for malformed datasets."""

    pass


@dataclass(frozen=True)
class DomainDataset:
    name: str
    X: npt.NDArray[np.float64]
    y: npt.NDArray[np.int64]
    style: int | None = None

    def __post_init__(self) -> None:
        X = frozen(np.asarray(self.X, dtype=np.float64))
        y = np.asarray(self.y)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise BenchError(f"{self.name}: X must be n×d and y length n, got {X.shape} and {y.shape}")
        if not np.all(np.isfinite(X)):
            raise BenchError(f"{self.name}: inputs contain non-finite values")
        labels = y.astype(np.int64)
        if not np.array_equal(labels, y) or np.any(labels < 0):
            raise BenchError(f"{self.name}: labels must be non-negative integers")
        labels.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", labels)

    def __len__(self) -> int:
        return int(self.X.shape[0])

    @property
    def domain_id(self) -> str:
        return self.name if self.style is None else str(self.style)

    def label_counts(self, num_classes: int) -> list[int]:
        return np.bincount(self.y, minlength=num_classes).tolist()


@dataclass(frozen=True)
class DomainSuite:
    pretrain: DomainDataset
    source: DomainDataset
    targets: tuple[DomainDataset, ...]
    id_test: DomainDataset

    def all(self) -> tuple[DomainDataset, ...]:
        return (self.pretrain, self.source, self.id_test, *self.targets)

    def target(self, domain_id: str) -> DomainDataset:
        for t in self.targets:
            if t.domain_id == domain_id:
                return t
        raise KeyError(f"no target domain {domain_id!r}")


# ── Generation ────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class _Style:
    transform: npt.NDArray[np.float64]  # d×k
    offset: npt.NDArray[np.float64]  # d


def _style(spec: BenchSpec, seed: int, style: int) -> _Style:
    rng = np.random.default_rng([seed, _STYLE, style])
    q, r = np.linalg.qr(rng.normal(size=(spec.input_dim, spec.core_dim)))
    # Sign-fix so Q is a deterministic function of the draw.
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    singular = np.exp(rng.uniform(-log(spec.kappa), log(spec.kappa), size=spec.core_dim))
    offset = rng.normal(size=spec.input_dim)
    return _Style(transform=q * singular, offset=offset)


def _sample(
    spec: BenchSpec,
    seed: int,
    prototypes: npt.NDArray[np.float64],
    style_id: int,
    style: _Style,
    split: int,
    per_class: int,
) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.int64]]:
    rng = np.random.default_rng([seed, _SAMPLES, style_id, split])
    y = np.repeat(np.arange(spec.num_classes), per_class)
    core = prototypes[y] + spec.sigma_core * rng.normal(size=(y.size, spec.core_dim))
    noise = spec.sigma_noise * rng.normal(size=(y.size, spec.input_dim))
    return core @ style.transform.T + style.offset + noise, y


def generate_domains(spec: BenchSpec, seed: int) -> DomainSuite:
    """Pretrain mixture, source split, one split per target style, held-out ID test.

    Bit-identical for equal (spec, seed).
    """
    prototypes = np.random.default_rng([seed, _PROTOTYPES]).normal(size=(spec.num_classes, spec.core_dim))
    used = sorted(set(spec.pretrain_styles) | set(spec.target_styles) | {spec.source_style})
    styles = {s: _style(spec, seed, s) for s in used}

    def draw(style_id: int, split: int, per_class: int):
        return _sample(spec, seed, prototypes, style_id, styles[style_id], split, per_class)

    parts = [draw(s, _SPLIT_PRETRAIN, spec.train_per_class) for s in spec.pretrain_styles]
    pretrain = DomainDataset(
        name="pretrain",
        X=np.concatenate([p[0] for p in parts]),
        y=np.concatenate([p[1] for p in parts]),
    )
    source = DomainDataset("source", *draw(spec.source_style, _SPLIT_SOURCE, spec.train_per_class), spec.source_style)
    id_test = DomainDataset("id_test", *draw(spec.source_style, _SPLIT_ID_TEST, spec.test_per_class), spec.source_style)
    targets = tuple(
        DomainDataset(f"target_{s}", *draw(s, _SPLIT_TARGET, spec.test_per_class), s) for s in spec.target_styles
    )
    logger.info(
        "domains_generated",
        seed=seed,
        pretrain=len(pretrain),
        source=len(source),
        id_test=len(id_test),
        targets=[t.domain_id for t in targets],
    )
    return DomainSuite(pretrain=pretrain, source=source, targets=targets, id_test=id_test)


# ── Pretraining & evaluation ──────────────────────────────────────────────────


def pretrain(spec: ModelSpec, data: DomainDataset, config: PretrainConfig) -> ParamMap:
    """θ0: train from ``init_params(spec, config.seed)`` until the loss plateaus or the budget ends."""
    if len(data) == 0:
        raise EmptyDatasetError("pretraining set is empty")
    init = init_params(spec, config.seed)
    if config.steps == 0:
        return init
    objective = Objective(loss=cross_entropy_loss(model_graph(spec).logits))
    result = train(
        objective,
        init,
        data.X,
        data.y,
        config,
        checkpoint_interval=config.steps,
        run_id="pretrain",
        should_stop=lambda losses: plateau_reached(losses, config.plateau_window, config.plateau_tol),
    )
    return result.final


def predict(spec: ModelSpec, params: ParamMap, data: DomainDataset) -> npt.NDArray[np.int64]:
    logits = forward(spec, params, data.X).logits
    # np.argmax returns the first maximum: ties go to the lowest class index.
    return np.argmax(logits, axis=1)


def evaluate(spec: ModelSpec, params: ParamMap, data: DomainDataset) -> float:
    """Fraction of examples whose argmax logit equals the label."""
    if len(data) == 0:
        raise EmptyDatasetError(f"{data.name}: cannot evaluate on an empty dataset")
    check_params(spec, params)
    return float(np.mean(predict(spec, params, data) == data.y))


def aggregate_ood(accuracies: Sequence[float]) -> float:
    """Unweighted mean of per-target accuracies, full precision."""
    if not accuracies:
        raise ValueError("aggregate_ood needs at least one target accuracy")
    return fmean(accuracies)


# ── Export ────────────────────────────────────────────────────────────────────


def export_dataset(data: DomainDataset, path: Path) -> Path:
    """Write ``label,x0,...,x{d-1}`` rows with 17 significant digits."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", *(f"x{j}" for j in range(data.X.shape[1]))])
        for label, row in zip(data.y.tolist(), data.X):
            writer.writerow([label, *(f"{v:.17g}" for v in row.tolist())])
    return path


def export_domains(suite: DomainSuite, directory: Path) -> list[Path]:
    paths = [export_dataset(d, directory / f"{d.name}.csv") for d in suite.all()]
    logger.info("domains_exported", directory=str(directory), files=len(paths))
    return paths
