"""Stage 2: grade one subtask segment in context.

Each diagnosis is a (verdict, error analysis, corrections) triple with
step-level issues. The model sees the whole subtask list so it never
re-credits work that belongs to a different segment, plus the segment's
screenshots and the trajectory's final frame. Requests therefore stay
bounded by the segment length, not the trajectory length.
"""

from __future__ import annotations

import random
import time
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

from .backend import (
    Backend,
    ChatRequest,
    Part,
    RetryPolicy,
    RetriesExhausted,
    TextPart,
    TranscriptSink,
    complete_with_retry,
)
from .extraction import SchemaViolation, extract_structured
from .images import DEFAULT_MAX_DIM, load_image_part
from .prompts import DEFAULT_SYSTEM_TEXT, PromptLibrary
from .segmentation import Segmentation, SubtaskSpec
from .trajectory import TaskInstance, Trajectory


class Verdict(str, Enum):
    SUCCESS = "success"
    PARTIAL = "partial"
    FAIL = "fail"


_VERDICT_SYNONYMS = {
    "success": Verdict.SUCCESS,
    "succeeded": Verdict.SUCCESS,
    "partial": Verdict.PARTIAL,
    "partially": Verdict.PARTIAL,
    "partial success": Verdict.PARTIAL,
    "fail": Verdict.FAIL,
    "failed": Verdict.FAIL,
    "failure": Verdict.FAIL,
}


def parse_verdict(value: object, *, allowed: tuple[Verdict, ...] | None = None) -> Verdict:
    """Map model verdict text onto the closed enumeration, case-insensitively."""
    if not isinstance(value, str):
        raise SchemaViolation(f"verdict must be a string, got {type(value).__name__}")
    verdict = _VERDICT_SYNONYMS.get(value.strip().lower())
    if verdict is None:
        raise SchemaViolation(f"unrecognized verdict {value!r}")
    if allowed is not None and verdict not in allowed:
        raise SchemaViolation(f"verdict {verdict.value!r} not allowed here")
    return verdict


@dataclass(frozen=True)
class StepIssue:
    """A problematic step: global 1-based index, what, why, and the fix."""

    step_index: int
    problem: str
    root_cause: str
    suggested_fix: str


@dataclass(frozen=True)
class SubtaskDiagnosis:
    subtask_index: int
    verdict: Verdict
    reasoning: str
    error_analysis: str
    issues: tuple[StepIssue, ...] = ()
    repaired: bool = False
    evaluator_error: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "issues", tuple(self.issues))
        if not self.reasoning or not self.reasoning.strip():
            raise ValueError("reasoning must be non-empty")
        if self.verdict is not Verdict.SUCCESS and not self.error_analysis.strip():
            raise ValueError("a non-success verdict requires an error analysis")

    def to_dict(self) -> dict:
        return {
            "subtask_index": self.subtask_index,
            "verdict": self.verdict.value,
            "reasoning": self.reasoning,
            "error_analysis": self.error_analysis,
            "issues": [
                {
                    "step": i.step_index,
                    "problem": i.problem,
                    "root_cause": i.root_cause,
                    "suggested_fix": i.suggested_fix,
                }
                for i in self.issues
            ],
            "repaired": self.repaired,
            "evaluator_error": self.evaluator_error,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SubtaskDiagnosis":
        return cls(
            subtask_index=data["subtask_index"],
            verdict=Verdict(data["verdict"]),
            reasoning=data["reasoning"],
            error_analysis=data["error_analysis"],
            issues=tuple(
                StepIssue(
                    step_index=i["step"],
                    problem=i["problem"],
                    root_cause=i["root_cause"],
                    suggested_fix=i["suggested_fix"],
                )
                for i in data.get("issues", [])
            ),
            repaired=data.get("repaired", False),
            evaluator_error=data.get("evaluator_error", False),
        )


def subtask_list_text(seg: Segmentation, current_index: int) -> str:
    lines = []
    for subtask in seg.subtasks:
        marker = "  <-- CURRENT" if subtask.index == current_index else ""
        lines.append(
            f"{subtask.index}. {subtask.description} (steps {subtask.span_text}){marker}"
        )
    return "\n".join(lines)


def segment_action_text(subtask: SubtaskSpec, trajectory: Trajectory) -> str:
    return "\n".join(
        f"Step {j}: {trajectory.steps[j - 1].action_text}"
        for j in range(subtask.start_step, subtask.end_step + 1)
    )


def _segment_image_parts(
    subtask: SubtaskSpec, trajectory: Trajectory, max_image_dim: int
) -> list[Part]:
    """The segment's screenshots in step order, with textual placeholders for
    missing ones, preceded by the segment's starting frame when available."""
    parts: list[Part] = []
    if subtask.start_step == 1:
        start_ref = trajectory.initial_screenshot_ref
    else:
        start_ref = trajectory.steps[subtask.start_step - 2].screenshot_ref
    start_image = load_image_part(start_ref, max_image_dim)
    if start_image is not None:
        parts.append(TextPart(f"Screen before step {subtask.start_step}:"))
        parts.append(start_image)
    for j in range(subtask.start_step, subtask.end_step + 1):
        image = load_image_part(trajectory.steps[j - 1].screenshot_ref, max_image_dim)
        if image is None:
            parts.append(TextPart(f"[no screenshot for step {j}]"))
        else:
            parts.append(TextPart(f"Screen after step {j}:"))
            parts.append(image)
    return parts


def build_diagnosis_request(
    task: TaskInstance,
    seg: Segmentation,
    i: int,
    trajectory: Trajectory,
    prompts: PromptLibrary,
    *,
    bare: bool = False,
    max_image_dim: int = DEFAULT_MAX_DIM,
    temperature: float | None = None,
) -> ChatRequest:
    if not 1 <= i <= seg.k:
        raise ValueError(f"subtask index {i} outside 1..{seg.k}")
    subtask = seg.subtasks[i - 1]
    template = prompts.get("diagnose_bare" if bare else "diagnose")
    user_text = template.render(
        task_instruction=task.instruction,
        subtask_list=subtask_list_text(seg, i),
        current_subtask=f"{subtask.description} (steps {subtask.span_text})",
        segment_actions=segment_action_text(subtask, trajectory),
    )
    parts: list[Part] = [TextPart(user_text)]
    parts.extend(_segment_image_parts(subtask, trajectory, max_image_dim))
    final_image = load_image_part(trajectory.final_screenshot_ref, max_image_dim)
    if final_image is not None:
        parts.append(TextPart("Final screen of the whole attempt:"))
        parts.append(final_image)
    else:
        parts.append(TextPart("[no final screenshot available]"))
    return ChatRequest(
        stage_tag="diagnose",
        system_text=DEFAULT_SYSTEM_TEXT,
        user_parts=tuple(parts),
        temperature=temperature,
    )


def _require_reasoning_before_verdict(parsed: dict) -> None:
    # json.loads preserves key order, so the emitted field order is checkable.
    keys = list(parsed.keys())
    if "reasoning" not in keys or "verdict" not in keys:
        raise SchemaViolation("diagnosis needs 'reasoning' and 'verdict' fields")
    if keys.index("reasoning") > keys.index("verdict"):
        raise SchemaViolation("reasoning must be generated before the verdict")


def parse_diagnosis_response(text: str, subtask: SubtaskSpec) -> SubtaskDiagnosis:
    """Validate a diagnosis response and clamp stray issue indices.

    Raises SchemaViolation (a retryable parse failure) when the reasoning is
    missing or ordered after the verdict, the verdict is unknown, or a
    non-success verdict arrives without an error analysis.
    """
    parsed = extract_structured(text)
    if not isinstance(parsed, dict):
        raise SchemaViolation("diagnosis response must be a JSON object")
    _require_reasoning_before_verdict(parsed)
    reasoning = parsed.get("reasoning")
    if not isinstance(reasoning, str) or not reasoning.strip():
        raise SchemaViolation("reasoning must be a non-empty string")
    verdict = parse_verdict(parsed.get("verdict"))
    error_analysis = parsed.get("error_analysis", "")
    if not isinstance(error_analysis, str):
        raise SchemaViolation("error_analysis must be a string")
    if verdict is not Verdict.SUCCESS and not error_analysis.strip():
        raise SchemaViolation("non-success verdicts require a non-empty error_analysis")

    repaired = False
    issues: list[StepIssue] = []
    raw_issues = parsed.get("issues", [])
    if not isinstance(raw_issues, list):
        raw_issues = []
        repaired = True
    for raw in raw_issues:
        if not isinstance(raw, dict):
            repaired = True
            continue
        step = raw.get("step")
        if isinstance(step, float) and step.is_integer():
            step = int(step)
        if not isinstance(step, int) or isinstance(step, bool):
            repaired = True
            continue
        if step < subtask.start_step or step > subtask.end_step:
            step = min(max(step, subtask.start_step), subtask.end_step)
            repaired = True
        issues.append(
            StepIssue(
                step_index=step,
                problem=str(raw.get("problem", "")),
                root_cause=str(raw.get("root_cause", "")),
                suggested_fix=str(raw.get("suggested_fix", "")),
            )
        )
    return SubtaskDiagnosis(
        subtask_index=subtask.index,
        verdict=verdict,
        reasoning=reasoning,
        error_analysis=error_analysis,
        issues=tuple(issues),
        repaired=repaired,
    )


def diagnose_subtask(
    task: TaskInstance,
    seg: Segmentation,
    i: int,
    trajectory: Trajectory,
    backend: Backend,
    policy: RetryPolicy,
    prompts: PromptLibrary,
    *,
    max_image_dim: int = DEFAULT_MAX_DIM,
    temperature: float | None = None,
    rng: random.Random | None = None,
    sleep: Callable[[float], None] = time.sleep,
    sink: TranscriptSink | None = None,
) -> SubtaskDiagnosis:
    """Grade subtask i. Raises RetriesExhausted if no valid response arrives."""
    request = build_diagnosis_request(
        task, seg, i, trajectory, prompts,
        max_image_dim=max_image_dim, temperature=temperature,
    )
    subtask = seg.subtasks[i - 1]

    def validate(response):
        return parse_diagnosis_response(response.text, subtask)

    return complete_with_retry(
        backend, request, policy, validate, rng=rng, sleep=sleep, sink=sink
    )


def synthetic_failure(subtask_index: int, reason: str) -> SubtaskDiagnosis:
    """Stand-in diagnosis when the evaluator itself failed on a subtask."""
    message = f"evaluator error: {reason}"
    return SubtaskDiagnosis(
        subtask_index=subtask_index,
        verdict=Verdict.FAIL,
        reasoning=message,
        error_analysis=message,
        issues=(),
        evaluator_error=True,
    )


def diagnose_all(
    task: TaskInstance,
    seg: Segmentation,
    trajectory: Trajectory,
    backend: Backend,
    policy: RetryPolicy,
    prompts: PromptLibrary,
    *,
    parallelism: int = 1,
    max_image_dim: int = DEFAULT_MAX_DIM,
    temperature: float | None = None,
    rng_factory: Callable[[int], random.Random] | None = None,
    sleep: Callable[[float], None] = time.sleep,
    sink: TranscriptSink | None = None,
) -> list[SubtaskDiagnosis]:
    """Diagnose every subtask, in subtask order regardless of completion order.

    A subtask that exhausts its retries degrades to a synthetic fail
    diagnosis flagged evaluator_error instead of aborting the trajectory.
    Diagnoses share no mutable state, so execution order cannot change the
    result.
    """

    def run(i: int) -> SubtaskDiagnosis:
        rng = rng_factory(i) if rng_factory is not None else None
        try:
            return diagnose_subtask(
                task, seg, i, trajectory, backend, policy, prompts,
                max_image_dim=max_image_dim, temperature=temperature,
                rng=rng, sleep=sleep, sink=sink,
            )
        except RetriesExhausted as exc:
            return synthetic_failure(
                i, f"no valid diagnosis after {len(exc.attempts)} attempts"
            )

    indices = range(1, seg.k + 1)
    if parallelism <= 1 or seg.k == 1:
        return [run(i) for i in indices]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(run, indices))
