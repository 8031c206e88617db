"""Comparison tables over saved run reports."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from typing import Iterable, Sequence

from .loop import RunReport, format_cell


class SchemaMismatchError(ValueError):
    """Two reports claim the same table cell with different configurations."""


GroupKey = tuple[str, str, bool]


def group_reports(reports: Iterable[RunReport]) -> dict[GroupKey, list[RunReport]]:
    """Reports that may share one table: same backend, variant and CoT flag."""
    groups: dict[GroupKey, list[RunReport]] = defaultdict(list)
    for r in reports:
        groups[(r.backend_id, r.variant, r.cot)].append(r)
    return dict(groups)


def build_matrix(reports: Sequence[RunReport]) -> tuple[list[str], list[str], dict[tuple[str, str], RunReport]]:
    datasets: list[str] = []
    regimes: list[str] = []
    cells: dict[tuple[str, str], RunReport] = {}
    for r in reports:
        key = (r.dataset_id, r.regime)
        prior = cells.get(key)
        if prior is not None:
            if prior.fingerprint != r.fingerprint:
                raise SchemaMismatchError(
                    f"conflicting reports for dataset {r.dataset_id!r}, regime {r.regime!r}: "
                    f"fingerprints {prior.fingerprint[:12]} vs {r.fingerprint[:12]}"
                )
            continue
        cells[key] = r
        if r.dataset_id not in datasets:
            datasets.append(r.dataset_id)
        if r.regime not in regimes:
            regimes.append(r.regime)
    return datasets, regimes, cells


def render_table(reports: Sequence[RunReport]) -> str:
    datasets, regimes, cells = build_matrix(reports)
    header = ["dataset"] + regimes
    body = [
        [d] + [format_cell(cells[(d, g)].mean, cells[(d, g)].std) if (d, g) in cells else "-" for g in regimes]
        for d in datasets
    ]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]

    def line(row: list[str]) -> str:
        return " | ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()

    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), sep] + [line(r) for r in body])


def render_report(reports: Sequence[RunReport]) -> str:
    chunks = []
    for (backend_id, variant, cot), members in group_reports(reports).items():
        title = f"backend={backend_id} variant={variant} cot={'on' if cot else 'off'}"
        chunks.append(title + "\n" + render_table(members))
    return "\n\n".join(chunks) + "\n"


CSV_FIELDS = ["backend_id", "variant", "cot", "dataset", "regime", "run", "accuracy", "mean", "std", "fingerprint"]


def render_csv(reports: Sequence[RunReport]) -> str:
    """One row per (dataset, regime, run)."""
    for members in group_reports(reports).values():
        build_matrix(members)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in reports:
        for run, acc in enumerate(r.per_run_accuracy):
            writer.writerow(
                [r.backend_id, r.variant, r.cot, r.dataset_id, r.regime, run, f"{acc:.6f}",
                 f"{r.mean:.6f}", f"{r.std:.6f}", r.fingerprint]
            )
    return buf.getvalue()
