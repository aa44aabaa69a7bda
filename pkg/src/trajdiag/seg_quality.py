"""Independent scoring of segmentation quality, plus agreement tooling.

A multimodal model rates each produced subtask 1..5 on segment coherence
and description accuracy; a subtask is usable at score >= 4. The scorer
sees the neighbouring segments because boundary quality cannot be judged
from one segment alone. Scores validate the segmenter; they never gate or
re-run it.
"""

from __future__ import annotations

import json
import logging
import random
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

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
from .diagnosis import segment_action_text
from .extraction import SchemaViolation, extract_structured
from .images import DEFAULT_MAX_DIM, load_image_part
from .metrics import cohen_kappa
from .prompts import DEFAULT_SYSTEM_TEXT, PromptLibrary
from .segmentation import Segmentation
from .trajectory import TaskInstance, Trajectory

logger = logging.getLogger(__name__)

USABLE_THRESHOLD = 4


@dataclass(frozen=True)
class SegQualityScore:
    """One subtask's quality rating; evaluator-error entries carry score 0."""

    task_id: str
    subtask_index: int
    score: int
    coherence_notes: str = ""
    alignment_notes: str = ""
    repaired: bool = False
    evaluator_error: bool = False

    def __post_init__(self) -> None:
        if self.evaluator_error:
            if self.score != 0:
                raise ValueError("evaluator-error entries carry score 0")
        elif self.score not in (1, 2, 3, 4, 5):
            raise ValueError(f"score must be 1..5, got {self.score}")

    @property
    def usable(self) -> bool:
        return self.score >= USABLE_THRESHOLD

    @property
    def ref(self) -> str:
        return f"{self.task_id}#{self.subtask_index}"


def _neighbor_context(seg: Segmentation, i: int) -> str:
    lines = []
    if i > 1:
        before = seg.subtasks[i - 2]
        lines.append(f"previous: {before.description} (steps {before.span_text})")
    else:
        lines.append("previous: none (this is the first subtask)")
    if i < seg.k:
        after = seg.subtasks[i]
        lines.append(f"next: {after.description} (steps {after.span_text})")
    else:
        lines.append("next: none (this is the last subtask)")
    return "\n".join(lines)


def build_quality_request(
    task: TaskInstance,
    seg: Segmentation,
    i: int,
    trajectory: Trajectory,
    prompts: PromptLibrary,
    *,
    max_image_dim: int = DEFAULT_MAX_DIM,
    temperature: float | None = None,
) -> ChatRequest:
    if not 1 <= i <= seg.k:
        raise ValueError(f"subtask index {i} outside 1..{seg.k}")
    subtask = seg.subtasks[i - 1]
    user_text = prompts.get("seg_quality").render(
        task_instruction=task.instruction,
        subtask_description=subtask.description,
        subtask_span=subtask.span_text,
        segment_actions=segment_action_text(subtask, trajectory),
        neighbor_context=_neighbor_context(seg, i),
    )
    parts: list[Part] = [TextPart(user_text)]
    for j in range(subtask.start_step, subtask.end_step + 1):
        image = load_image_part(trajectory.steps[j - 1].screenshot_ref, max_image_dim)
        if image is None:
            parts.append(TextPart(f"[no screenshot for step {j}]"))
        else:
            parts.append(TextPart(f"Screen after step {j}:"))
            parts.append(image)
    return ChatRequest(
        stage_tag="seg_quality",
        system_text=DEFAULT_SYSTEM_TEXT,
        user_parts=tuple(parts),
        temperature=temperature,
    )


def parse_quality_response(text: str, task_id: str, subtask_index: int) -> SegQualityScore:
    """Validate the score schema; out-of-range integers clamp to 1..5."""
    parsed = extract_structured(text)
    if not isinstance(parsed, dict):
        raise SchemaViolation("quality response must be a JSON object")
    raw_score = parsed.get("score")
    if isinstance(raw_score, bool):
        raise SchemaViolation("score must be an integer")
    if isinstance(raw_score, float) and raw_score.is_integer():
        raw_score = int(raw_score)
    if isinstance(raw_score, str) and raw_score.strip().isdigit():
        raw_score = int(raw_score.strip())
    if not isinstance(raw_score, int):
        raise SchemaViolation(f"score must be an integer, got {raw_score!r}")
    repaired = False
    score = raw_score
    if score < 1 or score > 5:
        score = min(max(score, 1), 5)
        repaired = True
    coherence = parsed.get("coherence_notes", "")
    alignment = parsed.get("alignment_notes", "")
    return SegQualityScore(
        task_id=task_id,
        subtask_index=subtask_index,
        score=score,
        coherence_notes=coherence if isinstance(coherence, str) else "",
        alignment_notes=alignment if isinstance(alignment, str) else "",
        repaired=repaired,
    )


def score_subtask(
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
) -> SegQualityScore:
    request = build_quality_request(
        task, seg, i, trajectory, prompts,
        max_image_dim=max_image_dim, temperature=temperature,
    )

    def validate(response):
        return parse_quality_response(response.text, task.task_id, i)

    return complete_with_retry(
        backend, request, policy, validate, rng=rng, sleep=sleep, sink=sink
    )


def score_all_subtasks(
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
) -> list[SegQualityScore]:
    """Score every subtask; exhausted retries become evaluator-error entries."""

    def run(i: int) -> SegQualityScore:
        rng = rng_factory(i) if rng_factory is not None else None
        try:
            return score_subtask(
                task, seg, i, trajectory, backend, policy, prompts,
                max_image_dim=max_image_dim, temperature=temperature,
                rng=rng, sleep=sleep, sink=sink,
            )
        except RetriesExhausted:
            return SegQualityScore(
                task_id=task.task_id, subtask_index=i, score=0, evaluator_error=True
            )

    indices = range(1, seg.k + 1)
    if parallelism <= 1 or seg.k == 1:
        return [run(i) for i in indices]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(run, indices))


@dataclass(frozen=True)
class ScoreDistribution:
    counts: dict[int, int]  # keys 1..5, all present
    total: int

    def percent(self, score: int) -> float:
        if self.total == 0:
            return 0.0
        return 100.0 * self.counts[score] / self.total

    @property
    def usable_count(self) -> int:
        return self.counts[4] + self.counts[5]

    @property
    def usable_rate(self) -> float:
        """Percentage of scores at or above the usable threshold."""
        if self.total == 0:
            return 0.0
        return 100.0 * self.usable_count / self.total

    def to_dict(self) -> dict:
        return {
            "counts": {str(s): self.counts[s] for s in range(1, 6)},
            "total": self.total,
            "percent": {str(s): self.percent(s) for s in range(1, 6)},
            "usable_rate": self.usable_rate,
        }


def score_distribution(scores: Iterable[SegQualityScore]) -> ScoreDistribution:
    """Histogram over 1..5 plus the usable rate; error entries are excluded."""
    counts = {s: 0 for s in range(1, 6)}
    total = 0
    excluded = 0
    for score in scores:
        if score.evaluator_error:
            excluded += 1
            continue
        counts[score.score] += 1
        total += 1
    if total == 0:
        raise ValueError("no scores to aggregate")
    if excluded:
        logger.info("excluded %d evaluator-error score entries", excluded)
    return ScoreDistribution(counts=counts, total=total)


def load_human_labels(path: str | Path) -> dict[str, bool]:
    """Line-delimited {"subtask_ref": "task#i", "usable": bool} records."""
    labels: dict[str, bool] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            ref = record.get("subtask_ref")
            usable = record.get("usable")
            if not isinstance(ref, str) or not isinstance(usable, bool):
                raise ValueError(
                    f"line {lineno}: need string 'subtask_ref' and boolean 'usable'"
                )
            labels[ref] = usable
    return labels


def agreement_vs_human(
    scores: Sequence[SegQualityScore],
    human_labels: Mapping[str, bool],
) -> float:
    """Cohen's kappa between binarised machine scores and human usable labels.

    Scores binarise at the usable threshold; pairs align on subtask_ref.
    Unmatched refs on either side are reported and skipped; an empty
    intersection is an error.
    """
    machine = {s.ref: s.usable for s in scores if not s.evaluator_error}
    shared = sorted(set(machine) & set(human_labels))
    unmatched = len(set(machine) ^ set(human_labels))
    if unmatched:
        logger.warning("%d subtask refs present on only one side; skipped", unmatched)
    if not shared:
        raise ValueError("no subtask refs shared between machine scores and human labels")
    return cohen_kappa(
        [machine[ref] for ref in shared],
        [human_labels[ref] for ref in shared],
    )
