"""Markdown comparison table: point estimates, CIs, deltas and significance marks."""

from __future__ import annotations

from typing import Sequence

from .metrics import MetricReport

SMALL_DELTA = 0.5  # percentage points
LARGE_DELTA = 1.5


def delta_arrow(value: float, reference: float) -> str:
    """``-`` under 0.5 points, one arrow up to 1.5 points, two beyond."""
    d = round(100.0 * (value - reference), 9)
    if abs(d) < SMALL_DELTA:
        return "-"
    arrow = "↑" if d > 0 else "↓"
    return arrow * (2 if abs(d) > LARGE_DELTA else 1)


def significance_marker(p: float | None) -> str:
    if p is None:
        return ""
    if p < 0.001:
        return "*"
    if p < 0.01:
        return "†"
    return ""


def _cell(value: float, ci, marker: str = "") -> str:
    return f"{value:.3f}{marker} ({ci[0]:.3f}, {ci[1]:.3f})"


def render_table(rows: Sequence[tuple[str, MetricReport]], reference: str | None = None) -> str:
    """One line per model; the reference row gets no arrows."""
    ref = dict(rows).get(reference) if reference is not None else None
    if reference is not None and ref is None:
        raise KeyError(f"reference {reference!r} not among the rows")
    lines = ["| Model | AUROC (95% CI) | AUPRC (95% CI) |", "|---|---|---|"]
    for name, rep in rows:
        mark = significance_marker(rep.p_value_vs_reference)
        auroc = _cell(rep.auroc, rep.auroc_ci, mark)
        auprc = _cell(rep.auprc, rep.auprc_ci)
        if ref is not None and name != reference:
            auroc += " " + delta_arrow(rep.auroc, ref.auroc)
            auprc += " " + delta_arrow(rep.auprc, ref.auprc)
        lines.append(f"| {name} | {auroc} | {auprc} |")
    if ref is not None:
        lines += [
            "",
            f"↑/↓: 0.5-1.5 points better/worse than {reference}; ↑↑/↓↓: more than 1.5 points; -: under 0.5.",
            f"* p < 0.001, † p < 0.01 (paired permutation test on AUROC against {reference}).",
        ]
    return "\n".join(lines) + "\n"
