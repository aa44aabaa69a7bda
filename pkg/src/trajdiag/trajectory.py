"""Trajectory/task data model and dataset ingestion.

A dataset file is line-delimited JSON, one task per line:

    {"task_id": "...", "instruction": "...", "gold_label": true,
     "source_tag": "...", "initial_screenshot": "shots/t0.png",
     "steps": [{"index": 0, "action": "click 'Login'", "screenshot": "shots/t1.png"}]}

Screenshot paths resolve relative to the dataset file's directory. Step
indices may be declared 0-based or 1-based; ingestion normalizes to 0-based
and records the original convention. All types are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path

from .metrics import LengthGroup, group_of_length

logger = logging.getLogger(__name__)


class DatasetError(Exception):
    """A dataset file could not be ingested."""


@dataclass(frozen=True)
class Step:
    """One executed action; the screenshot shows the screen after it ran."""

    index: int
    action_text: str
    screenshot_ref: str | None = None

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError(f"step index must be >= 0, got {self.index}")
        if not self.action_text or not self.action_text.strip():
            raise ValueError("action_text must be non-empty")


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[Step, ...]
    initial_screenshot_ref: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise ValueError("a trajectory needs at least one step")
        for position, step in enumerate(self.steps):
            if step.index != position:
                raise ValueError(
                    f"step at position {position} carries index {step.index}; "
                    "indices must be a gapless 0..n-1 sequence"
                )

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def final_screenshot_ref(self) -> str | None:
        return self.steps[-1].screenshot_ref

    @property
    def screenshot_count(self) -> int:
        """Step screenshots present (the initial frame is counted separately)."""
        return sum(1 for s in self.steps if s.screenshot_ref is not None)

    @property
    def has_all_screenshots(self) -> bool:
        return self.screenshot_count == self.length


@dataclass(frozen=True)
class TaskInstance:
    task_id: str
    instruction: str
    trajectory: Trajectory
    gold_label: bool | None = None
    source_tag: str | None = None

    def __post_init__(self) -> None:
        if not self.task_id:
            raise ValueError("task_id must be non-empty")
        if not self.instruction or not self.instruction.strip():
            raise ValueError("instruction must be non-empty")


@dataclass(frozen=True)
class Dataset:
    name: str
    items: tuple[TaskInstance, ...]
    # Manifest metadata, not identity: two datasets with the same items are
    # equal regardless of the index convention their source files used.
    index_convention: str = field(default="0-based", compare=False)
    _by_id: dict[str, TaskInstance] = field(
        init=False, repr=False, compare=False, default_factory=dict
    )

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple(self.items))
        by_id: dict[str, TaskInstance] = {}
        for item in self.items:
            if item.task_id in by_id:
                raise ValueError(f"duplicate task_id {item.task_id!r}")
            by_id[item.task_id] = item
        object.__setattr__(self, "_by_id", by_id)

    def __len__(self) -> int:
        return len(self.items)

    def get(self, task_id: str) -> TaskInstance:
        try:
            return self._by_id[task_id]
        except KeyError:
            raise KeyError(f"task_id {task_id!r} not in dataset {self.name!r}") from None

    @property
    def success_count(self) -> int:
        return sum(1 for i in self.items if i.gold_label is True)

    @property
    def failure_count(self) -> int:
        return sum(1 for i in self.items if i.gold_label is False)

    @property
    def unlabeled_count(self) -> int:
        return sum(1 for i in self.items if i.gold_label is None)

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "items": len(self.items),
            "success_count": self.success_count,
            "failure_count": self.failure_count,
            "unlabeled_count": self.unlabeled_count,
            "index_convention": self.index_convention,
        }


@dataclass(frozen=True)
class IngestOptions:
    verify_images: bool = False
    name: str | None = None  # defaults to the dataset file's stem


def _resolve_ref(ref: str | None, base_dir: Path) -> str | None:
    """Resolve a screenshot reference against the dataset directory.

    Content-address-style refs (anything with a scheme, e.g. "sha256:..."
    or "s3://...") are left untouched; absolute paths pass through.
    """
    if ref is None:
        return None
    if "://" in ref or ref.startswith("sha256:"):
        return ref
    path = Path(ref)
    if path.is_absolute():
        return str(path)
    return str(base_dir / path)


def _parse_steps(raw_steps: object, base_dir: Path, lineno: int) -> tuple[tuple[Step, ...], str]:
    if not isinstance(raw_steps, list) or not raw_steps:
        raise DatasetError(f"line {lineno}: 'steps' must be a non-empty array")
    declared: list[tuple[int, str, str | None]] = []
    for raw in raw_steps:
        if not isinstance(raw, dict):
            raise DatasetError(f"line {lineno}: each step must be an object")
        try:
            index = raw["index"]
            action = raw["action"]
        except KeyError as exc:
            raise DatasetError(f"line {lineno}: step missing field {exc}") from None
        if not isinstance(index, int) or isinstance(index, bool):
            raise DatasetError(f"line {lineno}: step index must be an integer")
        if not isinstance(action, str) or not action.strip():
            raise DatasetError(f"line {lineno}: step action must be a non-empty string")
        screenshot = raw.get("screenshot")
        if screenshot is not None and not isinstance(screenshot, str):
            raise DatasetError(f"line {lineno}: step screenshot must be a string path")
        declared.append((index, action, _resolve_ref(screenshot, base_dir)))

    declared.sort(key=lambda t: t[0])
    indices = [d[0] for d in declared]
    n = len(indices)
    if indices == list(range(n)):
        convention = "0-based"
        offset = 0
    elif indices == list(range(1, n + 1)):
        convention = "1-based"
        offset = 1
    else:
        raise DatasetError(
            f"line {lineno}: step indices {indices} are not a contiguous "
            "0-based or 1-based sequence"
        )
    steps = tuple(
        Step(index=i - offset, action_text=action, screenshot_ref=ref)
        for i, action, ref in declared
    )
    return steps, convention


def load_dataset(path: str | Path, options: IngestOptions = IngestOptions()) -> Dataset:
    """Parse a line-delimited dataset file into a Dataset.

    Malformed records fail with their line number; duplicate task_ids name
    both offending lines. With options.verify_images, every screenshot path
    must exist on disk.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    base_dir = path.parent
    items: list[TaskInstance] = []
    first_line_of: dict[str, int] = {}
    conventions: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON: {exc}") from None
            if not isinstance(record, dict):
                raise DatasetError(f"line {lineno}: record must be a JSON object")
            task_id = record.get("task_id")
            if not isinstance(task_id, str) or not task_id:
                raise DatasetError(f"line {lineno}: missing or empty 'task_id'")
            if task_id in first_line_of:
                raise DatasetError(
                    f"duplicate task_id {task_id!r} on lines "
                    f"{first_line_of[task_id]} and {lineno}"
                )
            instruction = record.get("instruction")
            if not isinstance(instruction, str) or not instruction.strip():
                raise DatasetError(f"line {lineno}: missing or empty 'instruction'")
            gold = record.get("gold_label")
            if gold is not None and not isinstance(gold, bool):
                raise DatasetError(f"line {lineno}: 'gold_label' must be a boolean")
            source_tag = record.get("source_tag")
            if source_tag is not None and not isinstance(source_tag, str):
                raise DatasetError(f"line {lineno}: 'source_tag' must be a string")
            steps, convention = _parse_steps(record.get("steps"), base_dir, lineno)
            conventions.add(convention)
            trajectory = Trajectory(
                steps=steps,
                initial_screenshot_ref=_resolve_ref(record.get("initial_screenshot"), base_dir),
            )
            if options.verify_images:
                refs = [trajectory.initial_screenshot_ref] + [
                    s.screenshot_ref for s in trajectory.steps
                ]
                for ref in refs:
                    if ref is None or "://" in ref or ref.startswith("sha256:"):
                        continue
                    if not Path(ref).exists():
                        raise DatasetError(
                            f"line {lineno}: task {task_id!r} references missing image {ref}"
                        )
            first_line_of[task_id] = lineno
            items.append(
                TaskInstance(
                    task_id=task_id,
                    instruction=instruction,
                    trajectory=trajectory,
                    gold_label=gold,
                    source_tag=source_tag,
                )
            )
    if not items:
        logger.warning("dataset %s contains no records", path)
    if not conventions:
        convention = "0-based"
    elif len(conventions) == 1:
        convention = conventions.pop()
    else:
        convention = "mixed"
    return Dataset(
        name=options.name or path.stem,
        items=tuple(items),
        index_convention=convention,
    )


def task_to_record(item: TaskInstance) -> dict:
    record: dict = {"task_id": item.task_id, "instruction": item.instruction}
    if item.gold_label is not None:
        record["gold_label"] = item.gold_label
    if item.source_tag is not None:
        record["source_tag"] = item.source_tag
    if item.trajectory.initial_screenshot_ref is not None:
        record["initial_screenshot"] = item.trajectory.initial_screenshot_ref
    steps = []
    for step in item.trajectory.steps:
        raw: dict = {"index": step.index, "action": step.action_text}
        if step.screenshot_ref is not None:
            raw["screenshot"] = step.screenshot_ref
        steps.append(raw)
    record["steps"] = steps
    return record


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset back to line-delimited form (0-based step indices).

    Screenshot refs are written as stored, so a load/save/load round trip
    yields an equal Dataset.
    """
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for item in dataset.items:
            fh.write(json.dumps(task_to_record(item), sort_keys=True) + "\n")


@dataclass(frozen=True)
class StatsSummary:
    items: int
    success_count: int
    failure_count: int
    unlabeled_count: int
    success_ratio: float | None  # fraction of labeled items; None if unlabeled
    failure_ratio: float | None
    length_histogram: dict[LengthGroup, int]


def dataset_stats(dataset: Dataset) -> StatsSummary:
    """Label counts, success/failure ratio, and the length-group histogram."""
    labeled = dataset.success_count + dataset.failure_count
    histogram: dict[LengthGroup, int] = {group: 0 for group in LengthGroup}
    for item in dataset.items:
        histogram[group_of_length(item.trajectory.length)] += 1
    return StatsSummary(
        items=len(dataset.items),
        success_count=dataset.success_count,
        failure_count=dataset.failure_count,
        unlabeled_count=dataset.unlabeled_count,
        success_ratio=dataset.success_count / labeled if labeled else None,
        failure_ratio=dataset.failure_count / labeled if labeled else None,
        length_histogram=histogram,
    )


def action_transcript(trajectory: Trajectory) -> str:
    """Newline-delimited "Step i: <action>" rendering, 1-based, no images."""
    return "\n".join(
        f"Step {i}: {step.action_text}" for i, step in enumerate(trajectory.steps, start=1)
    )


def iter_jsonl(path: str | Path) -> Iterable[dict]:
    """Yield JSON objects from a line-delimited file, skipping blank lines."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
