"""
app/services/reporting.py

Report files of a sweep:

  - ``report.csv``: one row per TradeoffRecord, columns
    ``method,hyper,seed,id_acc,target_<id>_acc...,avg_ood,status``;
    floats written with ``repr`` so they read back bit-exactly.
  - ``summary.md``: human-facing table (percentages, 2 decimals) rendered
    with Jinja2, plus the best Avg OOD row per method.
  - ``probe_<run_id>.csv``: accuracy / linear-probing accuracy per
    (step, target).
"""

import csv
import io
from collections.abc import Iterable, Sequence
from pathlib import Path

from jinja2 import Template

from app.core.logging import get_logger
from app.schemas.probing import ProbeResult
from app.schemas.sweep import TradeoffRecord, make_run_id
from app.services.bench import aggregate_ood
from app.services.probing import DOMINANCE_SLACK

logger = get_logger(__name__)

FIXED_HEAD = ("method", "hyper", "seed", "id_acc")
FIXED_TAIL = ("avg_ood", "status")
PROBE_COLUMNS = ("step", "target", "carried_acc", "probe_acc", "probe_loss", "carried_loss", "converged")


class ReportError(ValueError):
    pass


def report_columns(target_ids: Sequence[str]) -> list[str]:
    return [*FIXED_HEAD, *(f"target_{t}_acc" for t in target_ids), *FIXED_TAIL]


def format_float(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def _to_csv(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def target_ids_of(records: Sequence[TradeoffRecord]) -> list[str]:
    ids: list[str] = []
    for record in records:
        for t in record.target_acc:
            if t not in ids:
                ids.append(t)
    return ids


def sort_records(records: Iterable[TradeoffRecord]) -> list[TradeoffRecord]:
    return sorted(records, key=lambda r: r.sort_key)


def render_report_csv(records: Sequence[TradeoffRecord], target_ids: Sequence[str] | None = None) -> str:
    ids = list(target_ids) if target_ids is not None else target_ids_of(records)
    rows = [
        [
            r.method,
            r.hyper,
            str(r.seed),
            format_float(r.id_acc),
            *(format_float(r.target_acc.get(t)) for t in ids),
            format_float(r.avg_ood),
            r.status,
        ]
        for r in sort_records(records)
    ]
    return _to_csv(report_columns(ids), rows)


def write_report_csv(path: Path, records: Sequence[TradeoffRecord], target_ids: Sequence[str] | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_report_csv(records, target_ids), encoding="utf-8", newline="")
    logger.info("report_written", path=str(path), rows=len(records))
    return path


# ── Reading & validation ──────────────────────────────────────────────────────


def _parse_float(text: str, *, where: str) -> float | None:
    if text == "":
        return None
    try:
        return float(text)
    except ValueError as exc:
        raise ReportError(f"{where}: {text!r} is not a number") from exc


def read_report_csv(path: Path) -> tuple[list[TradeoffRecord], list[str]]:
    """Rows of a report back as records (``run_id`` is rebuilt from the key columns)."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"cannot read report {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ReportError(f"{path}: empty report") from None
    middle = header[len(FIXED_HEAD) : len(header) - len(FIXED_TAIL)]
    target_ids = [c.removeprefix("target_").removesuffix("_acc") for c in middle]
    if header != report_columns(target_ids) or not target_ids:
        raise ReportError(f"{path}: unexpected header {header}")

    records = []
    for number, row in enumerate(reader, start=2):
        where = f"{path}:{number}"
        if len(row) != len(header):
            raise ReportError(f"{where}: expected {len(header)} cells, got {len(row)}")
        cells = dict(zip(header, row))
        if cells["status"] not in ("ok", "failed"):
            raise ReportError(f"{where}: unknown status {cells['status']!r}")
        try:
            seed = int(cells["seed"])
        except ValueError as exc:
            raise ReportError(f"{where}: seed {cells['seed']!r} is not an integer") from exc
        records.append(
            TradeoffRecord(
                method=cells["method"],
                hyper=cells["hyper"],
                seed=seed,
                run_id=make_run_id(cells["method"], cells["hyper"], seed),
                id_acc=_parse_float(cells["id_acc"], where=where),
                target_acc={t: _parse_float(cells[f"target_{t}_acc"], where=where) for t in target_ids},
                avg_ood=_parse_float(cells["avg_ood"], where=where),
                status=cells["status"],
            )
        )
    return records, target_ids


def validate_records(records: Sequence[TradeoffRecord]) -> None:
    """Every ``ok`` row must carry all accuracies, and Avg OOD must equal the mean of its targets exactly."""
    for r in records:
        if r.status != "ok":
            continue
        accs = list(r.target_acc.values())
        if r.id_acc is None or r.avg_ood is None or any(a is None for a in accs):
            raise ReportError(f"{r.run_id}: ok row with missing accuracies")
        expected = aggregate_ood(accs)
        if r.avg_ood != expected:
            raise ReportError(f"{r.run_id}: avg_ood {r.avg_ood!r} != mean of targets {expected!r}")


# ── Summary ───────────────────────────────────────────────────────────────────

SUMMARY_TEMPLATE = """\
# Fine-tuning trade-off summary

Accuracies in %, rounded to 2 decimals. Targets: {{ target_ids | join(", ") }}.

| Method | Hyper | Seed | ID |{% for t in target_ids %} {{ t }} |{% endfor %} Avg OOD | Status |
|---|---|---|---|{% for t in target_ids %}---|{% endfor %}---|---|
{% for r in rows -%}
| {{ r.method }} | {{ r.hyper or "-" }} | {{ r.seed }} | {{ pct(r.id_acc) }} |\
{% for t in target_ids %} {{ pct(r.target_acc.get(t)) }} |{% endfor %} {{ pct(r.avg_ood) }} | {{ r.status }} |
{% endfor %}
{% if best %}
## Best Avg OOD per method

| Method | Hyper | Seed | ID | Avg OOD |
|---|---|---|---|---|
{% for r in best -%}
| {{ r.method }} | {{ r.hyper or "-" }} | {{ r.seed }} | {{ pct(r.id_acc) }} | {{ pct(r.avg_ood) }} |
{% endfor %}
{% endif %}
{% if failed %}
## Failed runs

{% for r in failed -%}
- `{{ r.run_id }}`: {{ r.error or "no error recorded" }}
{% endfor %}
{% endif %}\
"""

_compiled_template = Template(SUMMARY_TEMPLATE)


def percent(value: float | None) -> str:
    return "-" if value is None else f"{100.0 * value:.2f}"


def best_per_method(records: Sequence[TradeoffRecord]) -> list[TradeoffRecord]:
    best: dict[str, TradeoffRecord] = {}
    for r in sort_records(records):
        if r.status != "ok" or r.avg_ood is None:
            continue
        current = best.get(r.method)
        if current is None or r.avg_ood > current.avg_ood:
            best[r.method] = r
    return [best[m] for m in sorted(best)]


def render_summary(records: Sequence[TradeoffRecord], target_ids: Sequence[str] | None = None) -> str:
    rows = sort_records(records)
    rendered = _compiled_template.render(
        rows=rows,
        target_ids=list(target_ids) if target_ids is not None else target_ids_of(rows),
        best=best_per_method(rows),
        failed=[r for r in rows if r.status == "failed"],
        pct=percent,
    )
    logger.debug("summary_rendered", rows=len(rows), length=len(rendered))
    return rendered


def write_summary(path: Path, records: Sequence[TradeoffRecord], target_ids: Sequence[str] | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_summary(records, target_ids), encoding="utf-8", newline="")
    return path


# ── Probing ───────────────────────────────────────────────────────────────────


def render_probe_csv(results: Sequence[ProbeResult]) -> str:
    rows = [
        [
            str(r.step),
            r.target,
            format_float(r.carried_accuracy),
            format_float(r.probe_accuracy),
            format_float(r.probe_loss),
            format_float(r.carried_loss),
            "1" if r.converged else "0",
        ]
        for r in results
    ]
    return _to_csv(PROBE_COLUMNS, rows)


def validate_probe_results(results: Sequence[ProbeResult]) -> None:
    for r in results:
        if r.probe_loss > r.carried_loss + DOMINANCE_SLACK:
            raise ReportError(
                f"step {r.step}, target {r.target}: probe loss {r.probe_loss!r} "
                f"exceeds carried-head loss {r.carried_loss!r}"
            )


def write_probe_csv(path: Path, results: Sequence[ProbeResult]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_probe_csv(results), encoding="utf-8", newline="")
    logger.info("probe_report_written", path=str(path), rows=len(results))
    return path
