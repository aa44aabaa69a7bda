"""Shared fixtures: tiny datasets, scripted mock backends, fake clocks."""

from __future__ import annotations

import json
import re
from pathlib import Path

import pytest
from PIL import Image

from trajdiag.backend import ChatRequest, MockBackend
from trajdiag.trajectory import Step, TaskInstance, Trajectory

# Valid stage responses reused all over the suite.
DIAGNOSE_OK = json.dumps(
    {
        "reasoning": "The steps match the subtask goal and the final screen confirms it.",
        "verdict": "success",
        "error_analysis": "",
        "issues": [],
    }
)
SUMMARY_OK = json.dumps(
    {
        "reasoning": "Every subtask succeeded and the final state matches the goal.",
        "success": True,
        "justification": "All subtasks completed; the final screen shows the goal met.",
    }
)
BASELINE_OK = json.dumps(
    {"success": True, "justification": "The final state shows the task completed."}
)
QUALITY_OK = json.dumps(
    {
        "coherence_notes": "Self-contained unit with natural boundaries.",
        "alignment_notes": "Description matches the observed actions.",
        "score": 5,
    }
)

_STEP_LINE = re.compile(r"(?m)^Step (\d+): ")


def transcript_length(request: ChatRequest) -> int:
    """Infer n from the numbered transcript embedded in the request text."""
    numbers = [int(m) for m in _STEP_LINE.findall(request.joined_text())]
    return max(numbers) if numbers else 0


def make_segmenter(pieces: int):
    """Stage default callable: split 1..n into near-equal consecutive ranges."""

    def respond(request: ChatRequest) -> str:
        n = transcript_length(request)
        count = min(pieces, n) or 1
        base, remainder = divmod(n, count)
        sizes = [base + 1] * remainder + [base] * (count - remainder)
        subtasks = []
        start = 1
        for i, size in enumerate(sizes, start=1):
            end = start + size - 1
            subtasks.append(
                {"description": f"phase {i}", "start_step": start, "end_step": end}
            )
            start = end + 1
        return json.dumps({"subtasks": subtasks})

    return respond


def scripted_defaults(pieces: int = 2) -> dict:
    return {
        "segment": make_segmenter(pieces),
        "diagnose": DIAGNOSE_OK,
        "summarize": SUMMARY_OK,
        "baseline": BASELINE_OK,
        "seg_quality": QUALITY_OK,
    }


def scripted_backend(pieces: int = 2, **kwargs) -> MockBackend:
    return MockBackend(stage_defaults=scripted_defaults(pieces), **kwargs)


def make_task(
    task_id: str = "t1",
    n: int = 4,
    instruction: str = "Order a blue mug",
    gold: bool | None = True,
    screenshots: list[str | None] | None = None,
    initial: str | None = None,
) -> TaskInstance:
    steps = tuple(
        Step(
            index=i,
            action_text=f"action {i + 1}",
            screenshot_ref=screenshots[i] if screenshots else None,
        )
        for i in range(n)
    )
    return TaskInstance(
        task_id=task_id,
        instruction=instruction,
        trajectory=Trajectory(steps=steps, initial_screenshot_ref=initial),
        gold_label=gold,
    )


def make_png(path: Path, size: tuple[int, int] = (32, 24), color=(200, 30, 30)) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", size, color).save(path, format="PNG")
    return str(path)


def write_dataset(path: Path, records: list[dict]) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
    return path


def simple_record(task_id: str, n: int = 4, gold: bool | None = True, **extra) -> dict:
    record = {
        "task_id": task_id,
        "instruction": f"Complete task {task_id}",
        "steps": [{"index": i, "action": f"action {i + 1}"} for i in range(n)],
    }
    if gold is not None:
        record["gold_label"] = gold
    record.update(extra)
    return record


class FakeClock:
    """Virtual clock: records requested sleeps instead of sleeping."""

    def __init__(self) -> None:
        self.sleeps: list[float] = []

    def __call__(self, seconds: float) -> None:
        self.sleeps.append(seconds)


@pytest.fixture
def fake_clock() -> FakeClock:
    return FakeClock()


@pytest.fixture
def prompts():
    from trajdiag.prompts import PromptLibrary

    return PromptLibrary.load()
