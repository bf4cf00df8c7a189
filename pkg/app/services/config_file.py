"""
app/services/config_file.py

Line-based experiment configuration.

    # comment
    bench.num_classes = 10
    bench.target_styles = 1, 2, 3, 4, 5, 6, 7
    model.architecture = attn
    train.steps = 300                 # defaults shared by every method
    method.vanilla = on
    method.l2.lambda = 1e-4, 1e-3, 1e-2
    method.lora.rank = 1, 2, 4
    method.wiseft.alpha = 0.2, 0.4, 0.6, 0.8
    seeds = 42

Sections: ``bench``, ``model``, ``pretrain``, ``train``, ``method.<kind>``,
``probe``, ``sweep`` and the top-level keys ``seeds`` / ``out``. Dotted
keys below a section become nested fields (``train.optimizer.beta1``).
A comma-separated value under ``method.<kind>`` is a hyper grid; one method
config is produced per point of the cartesian product of all grids of that
kind. Values are validated by the pydantic schemas; every failure is a
``ConfigError`` naming the offending line.
"""

import copy
import itertools
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from pydantic import BaseModel, TypeAdapter, ValidationError

from app.core.logging import get_logger
from app.schemas.bench import BenchSpec, PretrainConfig
from app.schemas.methods import MethodConfig
from app.schemas.model import ModelSpec
from app.schemas.probing import ProbeConfig
from app.schemas.sweep import SweepConfig

logger = get_logger(__name__)

METHOD_KINDS = ("pretrained", "vanilla", "l1", "l2", "kd", "lora", "wiseft")
SECTIONS = ("bench", "model", "pretrain", "train", "method", "probe", "sweep")
TOP_LEVEL = ("seeds", "out")

# Keys whose value is always a list, even with one element.
LIST_KEYS = frozenset({"bench.pretrain_styles", "bench.target_styles", "seeds", "method.wiseft.alpha"})
# Keys that map onto differently named fields.
RENAMES = {"method.wiseft.alpha": "alphas"}
# SweepConfig fields set from keys outside their own section.
SWEEP_FIELD_KEYS = {"seeds": "seeds", "out": "out", "probe_run": "probe.run", "max_workers": "sweep.max_workers"}

_method_adapter: TypeAdapter = TypeAdapter(MethodConfig)
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    """Malformed or invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, *, line: int | None = None, source: str = "<config>") -> None:
        self.message = message
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class ConfigEntry:
    key: str
    value: str
    line: int


def parse_lines(text: str, source: str = "<config>") -> dict[str, ConfigEntry]:
    """Split ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    entries: dict[str, ConfigEntry] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=number, source=source)
        if not key or any(not part for part in key.split(".")) or any(c.isspace() for c in key):
            raise ConfigError(f"malformed key {key!r}", line=number, source=source)
        if not value:
            raise ConfigError(f"key {key!r} has no value", line=number, source=source)
        if key in entries:
            first = entries[key].line
            raise ConfigError(f"duplicate key {key!r} (first set on line {first})", line=number, source=source)
        section = key.split(".", 1)[0]
        if key not in TOP_LEVEL and (section not in SECTIONS or "." not in key):
            raise ConfigError(f"unknown key {key!r}", line=number, source=source)
        entries[key] = ConfigEntry(key, value, number)
    return entries


def _split(value: str) -> list[str]:
    return [part.strip() for part in value.split(",")]


def _set_nested(target: dict[str, Any], path: list[str], value: Any) -> None:
    for part in path[:-1]:
        target = target.setdefault(part, {})
        if not isinstance(target, dict):
            raise ValueError(f"{'.'.join(path)} conflicts with a scalar key")
    target[path[-1]] = value


class _Builder:
    def __init__(self, entries: Mapping[str, ConfigEntry], source: str) -> None:
        self.entries = entries
        self.source = source

    def error(self, message: str, key: str | None = None) -> ConfigError:
        line = self.entries[key].line if key in self.entries else None
        return ConfigError(message, line=line, source=self.source)

    def section(self, prefix: str) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for key, entry in self.entries.items():
            if not key.startswith(prefix + "."):
                continue
            rest = key[len(prefix) + 1 :].split(".")
            value: Any = _split(entry.value) if key in LIST_KEYS else entry.value
            try:
                _set_nested(out, rest, value)
            except ValueError as exc:
                raise self.error(str(exc), key) from exc
        return out

    def validate(self, model: type[BaseModel], data: dict[str, Any], prefix: str) -> BaseModel:
        try:
            return model.model_validate(data)
        except ValidationError as exc:
            raise self.from_validation(exc, prefix) from exc

    def from_validation(
        self,
        exc: ValidationError,
        prefix: str,
        skip: int = 0,
        fallback: str | None = None,
    ) -> ConfigError:
        first = exc.errors()[0]
        message = first["msg"]
        loc = [str(part) for part in first["loc"][skip:]]
        if prefix == "method.wiseft" and loc[:1] == ["alphas"]:
            loc = ["alpha"]
        # The most specific key present in the file names the line.
        for base in filter(None, (prefix, fallback)):
            for depth in range(len(loc), 0, -1):
                key = ".".join([base, *loc[:depth]])
                if key in self.entries:
                    return self.error(f"{key}: {message}", key)
        key = SWEEP_FIELD_KEYS.get(loc[0]) if loc else None
        if key in self.entries:
            return self.error(f"{key}: {message}", key)
        if prefix in self.entries:
            return self.error(f"{prefix}: {message}", prefix)
        where = ".".join(filter(None, [prefix, *loc])) or "config"
        return self.error(f"{where}: {message}")

    # ── methods ──────────────────────────────────────────────────────────────

    def methods(self) -> list[MethodConfig]:
        shared = self.section("train")
        kinds = sorted(
            {key.split(".")[1] for key in self.entries if key.startswith("method.")},
            key=METHOD_KINDS.index,
        )
        configs: list[MethodConfig] = []
        for kind in kinds:
            configs.extend(self.method_grid(kind, shared))
        if not configs:
            raise self.error("no methods configured (add at least one 'method.<kind>' key)")
        return configs

    def method_grid(self, kind: str, shared: dict[str, Any]) -> list[MethodConfig]:
        prefix = f"method.{kind}"
        switch = self.entries.get(prefix)
        if switch is not None:
            flag = switch.value.lower()
            if flag not in _TRUE | _FALSE:
                raise self.error(f"{prefix} must be on/off, got {switch.value!r}", prefix)
            if flag in _FALSE:
                return []

        fixed: dict[str, Any] = {}
        grids: dict[str, list[str]] = {}
        for key, entry in self.entries.items():
            if not key.startswith(prefix + "."):
                continue
            field = key[len(prefix) + 1 :]
            if key in LIST_KEYS:
                fixed[RENAMES.get(key) or field] = _split(entry.value)
            elif "," in entry.value:
                grids[field] = _split(entry.value)
            else:
                fixed[field] = entry.value

        configs = []
        for point in itertools.product(*grids.values()):
            data: dict[str, Any] = copy.deepcopy(shared)
            for field, value in [*fixed.items(), *zip(grids, point)]:
                try:
                    _set_nested(data, field.split("."), value)
                except ValueError as exc:
                    raise self.error(str(exc), f"{prefix}.{field}") from exc
            data["kind"] = kind
            try:
                configs.append(_method_adapter.validate_python(data))
            except ValidationError as exc:
                raise self.from_validation(exc, prefix, skip=1, fallback="train") from exc
        return configs

    # ── sweep ────────────────────────────────────────────────────────────────

    def build(self, *, seeds: tuple[int, ...] | None, out: Path | None) -> SweepConfig:
        unknown_kinds = sorted(
            {key.split(".")[1] for key in self.entries if key.startswith("method.")} - set(METHOD_KINDS)
        )
        if unknown_kinds:
            key = next(k for k in self.entries if k.startswith(f"method.{unknown_kinds[0]}"))
            raise self.error(f"unknown method kind {unknown_kinds[0]!r}", key)
        for key in self.entries:
            if key.startswith("sweep.") and key != "sweep.max_workers":
                raise self.error(f"unknown key {key!r}", key)

        bench = self.validate(BenchSpec, self.section("bench"), "bench")
        model = self.validate(ModelSpec, self.section("model"), "model")
        pretrain = self.validate(PretrainConfig, self.section("pretrain"), "pretrain")
        probe_data = self.section("probe")
        probe_run = probe_data.pop("run", None)
        probe = self.validate(ProbeConfig, probe_data, "probe")

        data: dict[str, Any] = {
            "bench": bench,
            "model": model,
            "pretrain": pretrain,
            "methods": tuple(self.methods()),
            "probe": probe,
        }
        if probe_run is not None:
            data["probe_run"] = probe_run
        if "sweep.max_workers" in self.entries:
            data["max_workers"] = self.entries["sweep.max_workers"].value
        if seeds is not None:
            data["seeds"] = seeds
        elif "seeds" in self.entries:
            data["seeds"] = _split(self.entries["seeds"].value)
        if out is not None:
            data["out"] = out
        elif "out" in self.entries:
            data["out"] = self.entries["out"].value
        return self.validate(SweepConfig, data, "")


def parse_config(
    text: str,
    *,
    source: str = "<config>",
    seeds: tuple[int, ...] | None = None,
    out: Path | None = None,
) -> SweepConfig:
    """Parse and validate a config; ``seeds`` / ``out`` override the file's values."""
    entries = parse_lines(text, source)
    config = _Builder(entries, source).build(seeds=seeds, out=out)
    logger.debug("config_parsed", source=source, keys=len(entries), methods=len(config.methods))
    return config


def load_config(
    path: Path,
    *,
    seeds: tuple[int, ...] | None = None,
    out: Path | None = None,
) -> SweepConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", source=str(path)) from exc
    return parse_config(text, source=str(path), seeds=seeds, out=out)
