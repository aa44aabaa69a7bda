"""Human-readable renderings of machine reports and metric tables.

Renderings are pure functions of the machine records, in markdown that
diffs cleanly in review tools. The machine files stay the source of truth.
"""

from __future__ import annotations

from .metrics import GROUP_LABELS, GroupedMetrics, LengthGroup, MetricsSummary
from .pipeline import EvaluationReport
from .seg_quality import ScoreDistribution


def render_report(report: EvaluationReport) -> str:
    """Markdown document for one task report."""
    verdict_word = "SUCCESS" if report.final.success else "FAILURE"
    lines = [
        f"# Task {report.task_id}",
        "",
        f"- variant: {report.variant}",
        f"- final: {verdict_word} (via {report.final.derived_from})",
    ]
    if report.final.justification:
        lines.append(f"- justification: {report.final.justification}")
    lines.append(
        f"- screenshots: {report.images_available}/{report.images_total} steps covered"
    )
    if report.repaired:
        lines.append("- note: model output needed mechanical repair somewhere")
    if report.evaluator_error:
        lines.append("- note: evaluator error degraded part of this evaluation")
    for note in report.notes:
        lines.append(f"- note: {note}")

    if report.segmentation is not None and report.diagnoses is None:
        lines.append("")
        lines.append("## Subtasks")
        for subtask in report.segmentation.subtasks:
            lines.append(f"### Subtask {subtask.index}: {subtask.description}")
            lines.append(f"- steps: {subtask.span_text}")
            if report.bare_verdicts is not None:
                lines.append(f"- verdict: {report.bare_verdicts[subtask.index - 1]}")

    if report.diagnoses is not None:
        lines.append("")
        lines.append("## Subtasks")
        for diagnosis in report.diagnoses:
            if report.segmentation is not None:
                subtask = report.segmentation.subtasks[diagnosis.subtask_index - 1]
                header = f"### Subtask {diagnosis.subtask_index}: {subtask.description}"
                span = f"- steps: {subtask.span_text}"
            else:
                header = f"### Subtask {diagnosis.subtask_index}"
                span = None
            lines.append(header)
            if span:
                lines.append(span)
            lines.append(f"- verdict: {diagnosis.verdict.value}")
            if diagnosis.evaluator_error:
                lines.append("- evaluator error: this is a degraded placeholder verdict")
            lines.append(f"- reasoning: {diagnosis.reasoning}")
            if diagnosis.error_analysis.strip():
                lines.append(f"- error analysis: {diagnosis.error_analysis}")
            if diagnosis.issues:
                lines.append("- issues:")
                for issue in diagnosis.issues:
                    lines.append(f"    - step {issue.step_index}: {issue.problem}")
                    lines.append(f"      root cause: {issue.root_cause}")
                    lines.append(f"      fix: {issue.suggested_fix}")

    lines.append("")
    lines.append("---")
    prompt_bits = " ".join(f"{name}={h}" for name, h in sorted(report.prompt_hashes.items()))
    lines.append(
        f"config {report.config_fingerprint} | seed {report.seed} | "
        f"backend {report.backend_name} | prompts {prompt_bits}"
    )
    lines.append("")
    return "\n".join(lines)


def render_metrics(summary: MetricsSummary, title: str = "Overall") -> str:
    """One-row Acc/P/R/F1 table, percentages to 2 decimal places."""
    lines = [
        f"{title}  (n={summary.matrix.total}, tp={summary.matrix.tp} "
        f"fp={summary.matrix.fp} fn={summary.matrix.fn} tn={summary.matrix.tn})",
        f"{'Acc':>8} {'P':>8} {'R':>8} {'F1':>8}",
        f"{summary.accuracy:>8.2f} {summary.precision:>8.2f} "
        f"{summary.recall:>8.2f} {summary.f1:>8.2f}",
    ]
    return "\n".join(lines)


def render_group_table(grouped: GroupedMetrics) -> str:
    """Per-length-group Acc/P/R/F1 rows plus the overall row."""
    lines = [f"{'Group':<8} {'n':>6} {'Acc':>8} {'P':>8} {'R':>8} {'F1':>8}"]
    for group, summary in grouped.by_group.items():
        label = GROUP_LABELS[group]
        lines.append(
            f"{label:<8} {summary.matrix.total:>6} {summary.accuracy:>8.2f} "
            f"{summary.precision:>8.2f} {summary.recall:>8.2f} {summary.f1:>8.2f}"
        )
    overall = grouped.overall
    lines.append(
        f"{'overall':<8} {overall.matrix.total:>6} {overall.accuracy:>8.2f} "
        f"{overall.precision:>8.2f} {overall.recall:>8.2f} {overall.f1:>8.2f}"
    )
    omitted = [GROUP_LABELS[g] for g in grouped.omitted_groups if g != LengthGroup.OVERFLOW]
    if omitted:
        lines.append(f"(no items in: {', '.join(omitted)})")
    return "\n".join(lines)


def render_distribution(distribution: ScoreDistribution) -> str:
    """Score histogram table (1 decimal place) with the usable rate."""
    quality_words = {5: "highly usable", 4: "usable", 3: "minor issues", 2: "risky", 1: "unusable"}
    lines = [f"{'Score':>5}  {'Level':<14} {'Count':>6} {'%':>7}"]
    for score in range(5, 0, -1):
        lines.append(
            f"{score:>5}  {quality_words[score]:<14} "
            f"{distribution.counts[score]:>6} {distribution.percent(score):>7.1f}"
        )
    lines.append(
        f"usable (>= 4): {distribution.usable_count}/{distribution.total} "
        f"= {distribution.usable_rate:.1f}%"
    )
    return "\n".join(lines)
