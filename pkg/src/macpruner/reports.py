"""Report emission: trajectory, outcome distribution, timing, oracle cost.

Each table is written three ways (aligned text, CSV, JSON). The outcome
distribution buckets every revision by its tolerance-band position, so
accuracy collapses count toward the band bucket they landed in, matching
the published outcome tables.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass

from .macprof import within_tolerance
from .oracle import OracleUsage
from .orchestrator import SearchState

OUTCOME_LABELS = (
    ("valid", "Within Tolerance"),
    ("undershoot", "Undershoot (too aggressive)"),
    ("overshoot", "Overshoot (too conservative)"),
)
TIMING_PHASES = ("profiling", "analysis", "pruning", "finetune", "evaluation")


def _write(outdir: str, name: str, content: str) -> str:
    path = os.path.join(outdir, name)
    with open(path, "w") as fh:
        fh.write(content)
    return path


def _csv_text(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def trajectory_rows(state: SearchState) -> list[list]:
    rows = [["rev", "achieved_macs_g", "mac_error_pct", "strategy", "inline_acc"]]
    for rec in state.history:
        rows.append([
            rec.index,
            f"{rec.achieved_macs / 1e9:.3f}",
            f"{rec.mac_error:+.1f}",
            rec.strategy.summary(),
            "" if rec.inline_ft_acc is None else f"{rec.inline_ft_acc:.2f}",
        ])
    return rows


def outcome_distribution(state: SearchState) -> dict[str, int]:
    counts = {"valid": 0, "undershoot": 0, "overshoot": 0}
    for rec in state.history:
        if state.band is not None and state.target:
            status = within_tolerance(rec.achieved_macs, state.target, state.band)
        else:
            status = rec.status if rec.status in counts else "undershoot"
        counts[status] += 1
    return counts


def outcome_rows(state: SearchState) -> list[list]:
    counts = outcome_distribution(state)
    total = len(state.history)
    rows = [["outcome", "count", "share"]]
    for key, label in OUTCOME_LABELS:
        pct = 100.0 * counts[key] / total if total else 0.0
        rows.append([label, counts[key], f"{pct:.0f}%"])
    rows.append(["Total Revisions", total, "100%" if total else "0%"])
    return rows


def timing_rows(timings: dict[str, float]) -> list[list]:
    total = sum(timings.get(phase, 0.0) for phase in TIMING_PHASES)
    rows = [["phase", "seconds", "share"]]
    for phase in TIMING_PHASES:
        seconds = timings.get(phase, 0.0)
        pct = 100.0 * seconds / total if total > 0 else 0.0
        rows.append([phase, f"{seconds:.3f}", f"{pct:.2f}%"])
    rows.append(["total", f"{total:.3f}", "100.00%" if total > 0 else "0.00%"])
    return rows


def usage_rows(usage: OracleUsage) -> list[list]:
    return [
        ["metric", "value"],
        ["llm_calls", usage.calls],
        ["input_tokens", usage.input_tokens],
        ["output_tokens", usage.output_tokens],
        ["rate_in_per_mtok", usage.rate_in_per_mtok],
        ["rate_out_per_mtok", usage.rate_out_per_mtok],
        ["estimated_cost", f"{usage.estimated_cost:.6f}"],
    ]


def _aligned(rows: list[list]) -> str:
    cells = [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cells[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
             for row in cells]
    return "\n".join(lines) + "\n"


def emit_reports(state: SearchState, timings: dict[str, float],
                 usage: OracleUsage, outdir: str) -> list[str]:
    """Write trajectory, outcome, timing and oracle-usage reports.

    Returns the list of file paths written. An empty history produces
    all-zero tables rather than failing.
    """
    os.makedirs(outdir, exist_ok=True)
    written: list[str] = []

    tables = {
        "trajectory": trajectory_rows(state),
        "outcomes": outcome_rows(state),
        "timing": timing_rows(timings),
        "oracle_usage": usage_rows(usage),
    }
    for name, rows in tables.items():
        written.append(_write(outdir, f"{name}.txt", _aligned(rows)))
        written.append(_write(outdir, f"{name}.csv", _csv_text(rows)))
        header, data = rows[0], rows[1:]
        doc = [dict(zip(header, row)) for row in data]
        written.append(_write(outdir, f"{name}.json",
                              json.dumps(doc, indent=2, sort_keys=True) + "\n"))

    counts = outcome_distribution(state)
    summary = {
        "revisions": len(state.history),
        "outcome_counts": counts,
        "phase": state.phase,
        "stop_reason": state.stop_reason,
        "target_macs": state.target,
        "band": state.band.as_text() if state.band else None,
        "candidates": len(state.candidates),
        "oracle_usage": usage.to_dict(),
    }
    if state.candidates:
        from .orchestrator import select_best

        best = select_best(state.candidates)
        summary["best"] = {
            "revision": best.revision,
            "achieved_macs": best.achieved_macs,
            "mac_error_pct": round(best.mac_error, 3),
            "inline_acc": best.inline_acc,
            "strategy": best.strategy.to_dict(),
        }
    written.append(_write(outdir, "summary.json",
                          json.dumps(summary, indent=2, sort_keys=True) + "\n"))
    return written
