"""Stage 1: partition a trajectory into described subtask segments.

Segmentation is text-only by design: the model sees the task instruction and
the numbered action transcript, never screenshots. The model proposes
1-based inclusive step ranges; boundaries are derived from the range ends
and then mechanically repaired into a valid partition, so a Segmentation
that violates the partition law cannot escape this module.
"""

from __future__ import annotations

import math
import random
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass

from .backend import (
    Backend,
    ChatRequest,
    RetryPolicy,
    TextPart,
    TranscriptSink,
    complete_with_retry,
)
from .extraction import SchemaViolation, extract_structured
from .prompts import DEFAULT_SYSTEM_TEXT, PromptLibrary
from .trajectory import TaskInstance, action_transcript

DEFAULT_MAX_SEGMENT_LEN = 30


@dataclass(frozen=True)
class SubtaskSpec:
    """One segment: a goal description plus its 1-based inclusive step range."""

    index: int
    description: str
    start_step: int
    end_step: int
    repaired: bool = False

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError("subtask index is 1-based")
        if not self.description or not self.description.strip():
            raise ValueError("subtask description must be non-empty")
        if not 1 <= self.start_step <= self.end_step:
            raise ValueError(
                f"invalid step range {self.start_step}..{self.end_step}"
            )

    @property
    def length(self) -> int:
        return self.end_step - self.start_step + 1

    @property
    def span_text(self) -> str:
        return f"{self.start_step}-{self.end_step}"


@dataclass(frozen=True)
class Segmentation:
    """A valid partition: boundaries 0 = b0 < b1 < ... < bk = n.

    Subtask i covers steps b(i-1)+1 through b(i), so the spans tile 1..n
    exactly. ``repaired`` records that normalization had to alter the model's
    proposal somewhere.
    """

    boundaries: tuple[int, ...]
    subtasks: tuple[SubtaskSpec, ...]
    repaired: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "boundaries", tuple(self.boundaries))
        object.__setattr__(self, "subtasks", tuple(self.subtasks))
        bounds = self.boundaries
        if len(bounds) < 2 or bounds[0] != 0:
            raise ValueError("boundaries must start at 0 and contain at least [0, n]")
        if any(b1 >= b2 for b1, b2 in zip(bounds, bounds[1:])):
            raise ValueError("boundaries must be strictly increasing")
        if len(self.subtasks) != len(bounds) - 1:
            raise ValueError("need exactly one subtask per boundary interval")
        for i, subtask in enumerate(self.subtasks):
            if subtask.index != i + 1:
                raise ValueError("subtask indices must run 1..k in order")
            if subtask.start_step != bounds[i] + 1 or subtask.end_step != bounds[i + 1]:
                raise ValueError(
                    f"subtask {i + 1} span {subtask.start_step}..{subtask.end_step} "
                    f"does not match boundaries {bounds[i]}..{bounds[i + 1]}"
                )

    @property
    def n(self) -> int:
        return self.boundaries[-1]

    @property
    def k(self) -> int:
        return len(self.subtasks)

    @property
    def max_segment_len(self) -> int:
        return max(s.length for s in self.subtasks)

    def to_dict(self) -> dict:
        return {
            "boundaries": list(self.boundaries),
            "repaired": self.repaired,
            "subtasks": [
                {
                    "index": s.index,
                    "description": s.description,
                    "start_step": s.start_step,
                    "end_step": s.end_step,
                    "repaired": s.repaired,
                }
                for s in self.subtasks
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Segmentation":
        return cls(
            boundaries=tuple(data["boundaries"]),
            repaired=data.get("repaired", False),
            subtasks=tuple(
                SubtaskSpec(
                    index=s["index"],
                    description=s["description"],
                    start_step=s["start_step"],
                    end_step=s["end_step"],
                    repaired=s.get("repaired", False),
                )
                for s in data["subtasks"]
            ),
        )


def _pad_description(start: int, end: int) -> str:
    return f"Unnamed subtask (steps {start}-{end})"


def _build(
    boundaries: Sequence[int],
    descriptions: Sequence[str | None],
    repaired: bool,
) -> Segmentation:
    """Assemble a Segmentation, padding any missing/blank descriptions."""
    subtasks = []
    desc_repaired = False
    for i in range(len(boundaries) - 1):
        start, end = boundaries[i] + 1, boundaries[i + 1]
        description = descriptions[i] if i < len(descriptions) else None
        if not isinstance(description, str) or not description.strip():
            description = _pad_description(start, end)
            desc_repaired = True
            flagged = True
        else:
            flagged = False
        subtasks.append(
            SubtaskSpec(
                index=i + 1,
                description=description,
                start_step=start,
                end_step=end,
                repaired=flagged,
            )
        )
    return Segmentation(
        boundaries=tuple(boundaries),
        subtasks=tuple(subtasks),
        repaired=repaired or desc_repaired,
    )


def _coerce_int(value: object) -> int | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        text = value.strip()
        if text and (text.isdigit() or (text[0] == "-" and text[1:].isdigit())):
            return int(text)
    return None


def normalize_boundaries(
    raw: Sequence[object],
    n: int,
    raw_descriptions: Sequence[object] = (),
    *,
    fallback_description: str | None = None,
) -> Segmentation:
    """Repair a model boundary proposal into a valid partition. Total: any
    raw list and description list yield a Segmentation for a given n >= 1.

    Rules: drop non-integers and out-of-range values, sort, deduplicate,
    force 0 and n into the set. Description lists that mismatch the segment
    count are truncated or padded. An empty or degenerate proposal falls
    back to a single segment described by ``fallback_description``. The
    repaired flag is set exactly when some rule changed the proposal.
    """
    if n < 1:
        raise ValueError("trajectory length must be >= 1")
    values = [_coerce_int(v) for v in raw]
    dropped_junk = any(v is None for v in values)
    in_range = [v for v in values if v is not None and 0 <= v <= n]
    dropped_range = len(in_range) != sum(1 for v in values if v is not None)
    interior = sorted({v for v in in_range if 0 < v < n})
    # A proposal is accepted verbatim when, ignoring optional 0/n endpoints,
    # it already lists the interior boundaries exactly once in order.
    proposed_interior = [v for v in in_range if v not in (0, n)]
    reordered = proposed_interior != interior
    repaired = dropped_junk or dropped_range or reordered

    descriptions = [d if isinstance(d, str) and d.strip() else None for d in raw_descriptions]
    if any(d is None for d in descriptions) or len(descriptions) != len(raw_descriptions):
        repaired = True

    if not interior and not any(d for d in descriptions):
        # Nothing usable came back: one segment covering the whole trajectory.
        return _build([0, n], [fallback_description], repaired=True)

    boundaries = [0] + interior + [n]
    segment_count = len(boundaries) - 1
    if len(descriptions) != segment_count:
        repaired = True
        descriptions = descriptions[:segment_count]
        descriptions += [None] * (segment_count - len(descriptions))
    return _build(boundaries, descriptions, repaired=repaired)


def enforce_max_segment(
    seg: Segmentation, max_len: int = DEFAULT_MAX_SEGMENT_LEN
) -> Segmentation:
    """Split any segment longer than max_len into near-equal pieces.

    Pieces are ceil-balanced (sizes differ by at most one, larger pieces
    first) and descriptions gain a "(part j)" suffix. Idempotent, and never
    increases the maximum segment length.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if seg.max_segment_len <= max_len:
        return seg
    boundaries = [0]
    pieces: list[tuple[str, bool]] = []
    for subtask in seg.subtasks:
        length = subtask.length
        if length <= max_len:
            boundaries.append(boundaries[-1] + length)
            pieces.append((subtask.description, subtask.repaired))
            continue
        count = math.ceil(length / max_len)
        base, remainder = divmod(length, count)
        sizes = [base + 1] * remainder + [base] * (count - remainder)
        for j, size in enumerate(sizes, start=1):
            boundaries.append(boundaries[-1] + size)
            pieces.append((f"{subtask.description} (part {j})", True))
    subtasks = tuple(
        SubtaskSpec(
            index=i + 1,
            description=description,
            start_step=boundaries[i] + 1,
            end_step=boundaries[i + 1],
            repaired=flagged,
        )
        for i, (description, flagged) in enumerate(pieces)
    )
    return Segmentation(boundaries=tuple(boundaries), subtasks=subtasks, repaired=True)


def parse_segment_response(text: str) -> tuple[list[object], list[object]]:
    """Extract (end_steps, descriptions) from the segmentation response.

    The response must be a JSON object with a "subtasks" list; anything else
    is a SchemaViolation and burns a retry. Malformed items inside the list
    are salvaged loosely (normalize_boundaries repairs the rest).
    """
    parsed = extract_structured(text)
    if not isinstance(parsed, dict):
        raise SchemaViolation("segmentation response must be a JSON object")
    subtasks = parsed.get("subtasks")
    if not isinstance(subtasks, list):
        raise SchemaViolation("segmentation response needs a 'subtasks' list")
    ends: list[object] = []
    descriptions: list[object] = []
    for item in subtasks:
        if not isinstance(item, dict):
            continue
        ends.append(item.get("end_step"))
        descriptions.append(item.get("description"))
    return ends, descriptions


def build_segment_request(
    task: TaskInstance, prompts: PromptLibrary, temperature: float | None = None
) -> ChatRequest:
    user_text = prompts.get("segment").render(
        task_instruction=task.instruction,
        action_transcript=action_transcript(task.trajectory),
    )
    return ChatRequest(
        stage_tag="segment",
        system_text=DEFAULT_SYSTEM_TEXT,
        user_parts=(TextPart(user_text),),
        temperature=temperature,
    )


def segment_trajectory(
    task: TaskInstance,
    backend: Backend,
    policy: RetryPolicy,
    prompts: PromptLibrary,
    *,
    max_segment_len: int = DEFAULT_MAX_SEGMENT_LEN,
    temperature: float | None = None,
    rng: random.Random | None = None,
    sleep: Callable[[float], None] = time.sleep,
    sink: TranscriptSink | None = None,
) -> Segmentation:
    """Ask the model for subtask ranges, then repair them into a valid
    partition. Propagates RetriesExhausted; never returns an invalid one.
    """
    request = build_segment_request(task, prompts, temperature)

    def validate(response):
        return parse_segment_response(response.text)

    ends, descriptions = complete_with_retry(
        backend, request, policy, validate, rng=rng, sleep=sleep, sink=sink
    )
    seg = normalize_boundaries(
        ends,
        task.trajectory.length,
        descriptions,
        fallback_description=task.instruction,
    )
    return enforce_max_segment(seg, max_segment_len)
