"""Stage 3: aggregate subtask diagnoses into the task-level verdict.

The model reasons holistically over the diagnostic evidence, which lets it
credit recoveries that a fixed rule would fail. The fixed rule
(``aggregate_hard_rule``) is still here: it is the no-summary ablation and
the fallback when the summary call exhausts its retries. The fallback biases
toward false negatives, which is the hard rule's known failure mode, so it
is always flagged in the justification.
"""

from __future__ import annotations

import random
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass

from .backend import (
    Backend,
    ChatRequest,
    RetryPolicy,
    RetriesExhausted,
    TextPart,
    TranscriptSink,
    complete_with_retry,
)
from .extraction import SchemaViolation, extract_structured
from .diagnosis import SubtaskDiagnosis, Verdict
from .prompts import DEFAULT_SYSTEM_TEXT, PromptLibrary
from .segmentation import Segmentation
from .trajectory import TaskInstance

DERIVED_FROM = ("model_summary", "hard_rule", "naive_call", "baseline")


@dataclass(frozen=True)
class FinalVerdict:
    success: bool
    justification: str
    derived_from: str

    def __post_init__(self) -> None:
        if self.derived_from not in DERIVED_FROM:
            raise ValueError(f"unknown derivation {self.derived_from!r}")
        if self.derived_from == "model_summary" and not self.justification.strip():
            raise ValueError("model-summary verdicts need a justification")

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "justification": self.justification,
            "derived_from": self.derived_from,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FinalVerdict":
        return cls(
            success=data["success"],
            justification=data["justification"],
            derived_from=data["derived_from"],
        )


def aggregate_hard_rule(diagnoses: Sequence[SubtaskDiagnosis]) -> FinalVerdict:
    """Success iff every subtask verdict is success; partial counts against."""
    if not diagnoses:
        raise ValueError("at least one diagnosis required")
    offending = [d.subtask_index for d in diagnoses if d.verdict is not Verdict.SUCCESS]
    if offending:
        listed = ", ".join(str(i) for i in offending)
        return FinalVerdict(
            success=False,
            justification=f"subtask(s) {listed} not fully successful",
            derived_from="hard_rule",
        )
    return FinalVerdict(
        success=True,
        justification=f"all {len(diagnoses)} subtasks succeeded",
        derived_from="hard_rule",
    )


def evidence_block(diagnosis: SubtaskDiagnosis) -> str:
    lines = [
        f"Subtask {diagnosis.subtask_index}: verdict {diagnosis.verdict.value}",
        f"  Reasoning: {diagnosis.reasoning}",
    ]
    if diagnosis.error_analysis.strip():
        lines.append(f"  Error analysis: {diagnosis.error_analysis}")
    if diagnosis.issues:
        lines.append("  Problematic steps:")
        for issue in diagnosis.issues:
            lines.append(
                f"    step {issue.step_index}: {issue.problem} "
                f"(root cause: {issue.root_cause}; fix: {issue.suggested_fix})"
            )
    else:
        lines.append("  Problematic steps: none")
    if diagnosis.evaluator_error:
        lines.append("  Note: this verdict is a degraded evaluator-error placeholder")
    return "\n".join(lines)


def secondary_text(seg: Segmentation) -> str:
    return "\n".join(
        f"{s.index}. {s.description} (steps {s.span_text})" for s in seg.subtasks
    )


def parse_summary_response(text: str) -> tuple[bool, str]:
    """Validate the summary schema: a strict boolean plus a justification."""
    parsed = extract_structured(text)
    if not isinstance(parsed, dict):
        raise SchemaViolation("summary response must be a JSON object")
    reasoning = parsed.get("reasoning")
    if not isinstance(reasoning, str) or not reasoning.strip():
        raise SchemaViolation("summary needs a non-empty 'reasoning' string")
    success = parsed.get("success")
    if not isinstance(success, bool):
        raise SchemaViolation("'success' must be a JSON boolean")
    justification = parsed.get("justification")
    if not isinstance(justification, str) or not justification.strip():
        raise SchemaViolation("summary needs a non-empty 'justification' string")
    return success, justification


def build_summary_request(
    task: TaskInstance,
    seg: Segmentation,
    evidence_blocks: Sequence[str],
    prompts: PromptLibrary,
    temperature: float | None = None,
) -> ChatRequest:
    user_text = prompts.get("summarize").render(
        task_instruction=task.instruction,
        diagnostic_evidence="\n\n".join(evidence_blocks),
        subtask_summaries_secondary=secondary_text(seg),
    )
    return ChatRequest(
        stage_tag="summarize",
        system_text=DEFAULT_SYSTEM_TEXT,
        user_parts=(TextPart(user_text),),
        temperature=temperature,
    )


def summarize_evidence(
    task: TaskInstance,
    seg: Segmentation,
    evidence_blocks: Sequence[str],
    backend: Backend,
    policy: RetryPolicy,
    prompts: PromptLibrary,
    *,
    temperature: float | None = None,
    rng: random.Random | None = None,
    sleep: Callable[[float], None] = time.sleep,
    sink: TranscriptSink | None = None,
) -> FinalVerdict:
    """One summary call over pre-formatted evidence blocks (text-only).

    Raises RetriesExhausted; callers that hold diagnoses should prefer
    ``summarize``, which falls back to the hard rule instead.
    """
    request = build_summary_request(task, seg, evidence_blocks, prompts, temperature)

    def validate(response):
        return parse_summary_response(response.text)

    success, justification = complete_with_retry(
        backend, request, policy, validate, rng=rng, sleep=sleep, sink=sink
    )
    return FinalVerdict(
        success=success, justification=justification, derived_from="model_summary"
    )


def summarize(
    task: TaskInstance,
    seg: Segmentation,
    diagnoses: Sequence[SubtaskDiagnosis],
    backend: Backend,
    policy: RetryPolicy,
    prompts: PromptLibrary,
    *,
    temperature: float | None = None,
    rng: random.Random | None = None,
    sleep: Callable[[float], None] = time.sleep,
    sink: TranscriptSink | None = None,
) -> FinalVerdict:
    """Model summary over all k diagnoses; hard-rule fallback on exhaustion."""
    if len(diagnoses) != seg.k:
        raise ValueError(f"need {seg.k} diagnoses, got {len(diagnoses)}")
    blocks = [evidence_block(d) for d in diagnoses]
    try:
        return summarize_evidence(
            task, seg, blocks, backend, policy, prompts,
            temperature=temperature, rng=rng, sleep=sleep, sink=sink,
        )
    except RetriesExhausted as exc:
        fallback = aggregate_hard_rule(diagnoses)
        return FinalVerdict(
            success=fallback.success,
            justification=(
                f"summary stage exhausted {len(exc.attempts)} attempts; "
                f"hard-rule fallback: {fallback.justification}"
            ),
            derived_from="hard_rule",
        )
