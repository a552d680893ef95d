"""Cross-tabulate evaluation results by domain and gender.

Produces the identification-accuracy grid (metric x domain rows, All /
Males / Females columns) plus the in-domain minus out-of-domain gap per
group.  The "all" cell pools hits and attempts across genders; with the
standard equal-sized strata this coincides with the mean of the per-gender
accuracies, but pooling is the definition.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from datetime import datetime, timezone

from .engine import EvalResult, RankCounters, accuracies
from .errors import ReportError
from .probes import IN_DOMAIN, OUT_OF_DOMAIN, ManifestSummary, ProbeManifest

GROUPS = ("all", "male", "female")

RENDER_FORMATS = ("json", "csv", "markdown")

_DOMAIN_TITLES = {IN_DOMAIN: "In-Domain", OUT_OF_DOMAIN: "Out-of-Domain"}
_GROUP_TITLES = {"all": "All", "male": "Males", "female": "Females"}


@dataclass(frozen=True)
class GroupedReport:
    """Accuracy cells keyed (domain, group, k) and per-group domain gaps."""

    cells: dict[tuple[str, str, int], float]
    gaps: dict[tuple[str, int], float]
    metadata: dict


def _report_timestamp() -> str:
    # honors SOURCE_DATE_EPOCH so pipeline reruns can be byte-identical
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    moment = (
        datetime.fromtimestamp(int(epoch), tz=timezone.utc)
        if epoch
        else datetime.now(tz=timezone.utc)
    )
    return moment.replace(microsecond=0).isoformat()


def _group_counters(result: EvalResult, genders: dict[str, str]) -> dict[str, RankCounters]:
    thresholds = sorted(result.counters.hits)
    grouped = {g: RankCounters.zero(thresholds) for g in GROUPS}
    for ident, counters in result.per_identity.items():
        if ident not in genders:
            raise ReportError(f"identity {ident!r} in results but not in its manifest")
        gender = genders[ident]
        if gender not in grouped:
            raise ReportError(f"identity {ident!r} has unreportable gender {gender!r}")
        grouped[gender].add(counters)
        grouped["all"].add(counters)
    return grouped


def build_report(
    in_domain: EvalResult,
    out_of_domain: EvalResult,
    manifests: tuple[ProbeManifest | ManifestSummary, ProbeManifest | ManifestSummary] | None = None,
) -> GroupedReport:
    """Tabulate two evaluation runs into the domain x gender x rank grid.

    ``manifests`` supplies the gender labels; when omitted, the summaries
    embedded in the results are used.  Refuses to compare runs with
    different thresholds or gallery fingerprints.
    """
    if in_domain.config_echo.get("thresholds") != out_of_domain.config_echo.get("thresholds"):
        raise ReportError(
            "cannot compare runs with different thresholds: "
            f"{in_domain.config_echo.get('thresholds')} vs "
            f"{out_of_domain.config_echo.get('thresholds')}"
        )
    fp_in = in_domain.config_echo.get("gallery_fingerprint")
    fp_out = out_of_domain.config_echo.get("gallery_fingerprint")
    if fp_in != fp_out:
        raise ReportError(
            f"cannot compare runs against different galleries: {fp_in} vs {fp_out}"
        )
    if manifests is None:
        if in_domain.manifest_summary is None or out_of_domain.manifest_summary is None:
            raise ReportError("results carry no manifest summaries; pass manifests")
        manifests = (in_domain.manifest_summary, out_of_domain.manifest_summary)

    cells: dict[tuple[str, str, int], float] = {}
    seeds = {}
    for result, manifest, domain in (
        (in_domain, manifests[0], IN_DOMAIN),
        (out_of_domain, manifests[1], OUT_OF_DOMAIN),
    ):
        genders = dict(
            manifest.genders
            if isinstance(manifest, ManifestSummary)
            else manifest.gender_map()
        )
        seeds[domain] = manifest.seed
        for group, counters in _group_counters(result, genders).items():
            if counters.attempts == 0:
                continue  # stratum absent from this run; no cell
            for k, acc in accuracies(counters).items():
                cells[(domain, group, k)] = acc

    thresholds = sorted(in_domain.counters.hits)
    gaps = {
        (group, k): cells[(IN_DOMAIN, group, k)] - cells[(OUT_OF_DOMAIN, group, k)]
        for group in GROUPS
        for k in thresholds
        if (IN_DOMAIN, group, k) in cells and (OUT_OF_DOMAIN, group, k) in cells
    }
    metadata = {
        "in_domain_seed": seeds[IN_DOMAIN],
        "out_of_domain_seed": seeds[OUT_OF_DOMAIN],
        "gallery_fingerprint": fp_in,
        "thresholds": list(thresholds),
        "generated_at": _report_timestamp(),
    }
    return GroupedReport(cells=cells, gaps=gaps, metadata=metadata)


def _thresholds_of(report: GroupedReport) -> list[int]:
    return list(report.metadata["thresholds"])


def _render_markdown(report: GroupedReport) -> str:
    lines = [
        "| Metric | Probe Set | All | Males | Females |",
        "| --- | --- | --- | --- | --- |",
    ]
    for k in _thresholds_of(report):
        for row_in_pair, domain in enumerate((IN_DOMAIN, OUT_OF_DOMAIN)):
            metric = f"Rank-{k} Accuracy (%)" if row_in_pair == 0 else ""
            row = [metric, _DOMAIN_TITLES[domain]]
            for group in GROUPS:
                cell = report.cells.get((domain, group, k))
                row.append("-" if cell is None else f"{100.0 * cell:.2f}")
            lines.append("| " + " | ".join(row) + " |")
    lines.append("")
    lines.append("| Gap (In-Domain - Out-of-Domain, pp) | All | Males | Females |")
    lines.append("| --- | --- | --- | --- |")
    for k in _thresholds_of(report):
        row = [f"Rank-{k}"]
        for group in GROUPS:
            gap = report.gaps.get((group, k))
            row.append("-" if gap is None else f"{100.0 * gap:.2f}")
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def _render_csv(report: GroupedReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "domain", "group", "accuracy"])
    for k in _thresholds_of(report):
        for domain in (IN_DOMAIN, OUT_OF_DOMAIN):
            for group in GROUPS:
                if (domain, group, k) in report.cells:
                    writer.writerow(
                        [f"rank{k}", domain, group, repr(report.cells[(domain, group, k)])]
                    )
    return buf.getvalue()


def _render_json(report: GroupedReport) -> str:
    cells: dict[str, dict[str, dict[str, float]]] = {}
    for (domain, group, k), acc in report.cells.items():
        cells.setdefault(domain, {}).setdefault(group, {})[str(k)] = acc
    gaps: dict[str, dict[str, float]] = {}
    for (group, k), gap in report.gaps.items():
        gaps.setdefault(group, {})[str(k)] = gap
    doc = {"cells": cells, "gaps": gaps, "metadata": report.metadata}
    return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def render(report: GroupedReport, format: str) -> str:
    """Render a report; markdown uses two-decimal percentages, csv/json full precision."""
    if format == "markdown":
        return _render_markdown(report)
    if format == "csv":
        return _render_csv(report)
    if format == "json":
        return _render_json(report)
    raise ValueError(f"unknown render format {format!r}")
