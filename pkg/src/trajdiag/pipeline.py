"""Pipeline orchestration: variant dispatch, batch runs, and reports.

The full variant runs segment -> diagnose each subtask -> summarize. The
ablation variants drop one stage each, and two single-call baselines are
provided for comparison runs. Every evaluation emits a machine report;
per-stage failures degrade inside the stages, so a report is produced for
every ingested task.

Determinism contract: with a MockBackend and a fixed seed, two runs write
byte-identical report files and manifests. Nothing derived from wall-clock
time may enter a report; stage timings come from backend-reported latency.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import threading
import time
from collections import Counter, defaultdict
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backend import (
    Backend,
    BackendConfig,
    ChatRequest,
    CompositeSink,
    Part,
    RetryPolicy,
    RetriesExhausted,
    TextPart,
    TranscriptSink,
    complete_with_retry,
)
from .diagnosis import (
    SubtaskDiagnosis,
    Verdict,
    build_diagnosis_request,
    diagnose_all,
    parse_verdict,
)
from .extraction import SchemaViolation, extract_structured
from .images import DEFAULT_MAX_DIM, load_image_part
from .prompts import DEFAULT_SYSTEM_TEXT, PromptLibrary
from .segmentation import (
    DEFAULT_MAX_SEGMENT_LEN,
    Segmentation,
    SubtaskSpec,
    segment_trajectory,
)
from .summary import FinalVerdict, aggregate_hard_rule, summarize, summarize_evidence
from .trajectory import Dataset, TaskInstance, action_transcript

logger = logging.getLogger(__name__)

VARIANTS = ("full", "naive", "no_seg", "no_diag", "no_sum", "agenttrek_baseline")

# Which report sections each variant carries.
SEGMENTATION_VARIANTS = frozenset({"full", "no_diag", "no_sum"})
DIAGNOSES_VARIANTS = frozenset({"full", "no_seg", "no_sum"})


class PipelineError(Exception):
    """Run-level configuration or output-directory failure."""


@dataclass(frozen=True)
class PipelineConfig:
    variant: str = "full"
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    max_segment_len: int = DEFAULT_MAX_SEGMENT_LEN
    parallelism: int = 1  # tasks evaluated concurrently
    subtask_parallelism: int = 1  # diagnosis fan-out within one task
    seed: int = 0
    max_image_dim: int = DEFAULT_MAX_DIM
    naive_include_images: bool = True
    prompt_dir: str | None = None
    backend: BackendConfig | None = None

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; pick one of {VARIANTS}")
        if self.parallelism < 1 or self.subtask_parallelism < 1:
            raise ValueError("parallelism limits must be >= 1")
        if self.max_segment_len < 1:
            raise ValueError("max_segment_len must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "variant": self.variant,
            "retry": {
                "max_attempts": self.retry.max_attempts,
                "base_delay": self.retry.base_delay,
                "factor": self.retry.factor,
                "max_delay": self.retry.max_delay,
                "jitter_fraction": self.retry.jitter_fraction,
            },
            "max_segment_len": self.max_segment_len,
            "parallelism": self.parallelism,
            "subtask_parallelism": self.subtask_parallelism,
            "seed": self.seed,
            "max_image_dim": self.max_image_dim,
            "naive_include_images": self.naive_include_images,
            "prompt_dir": self.prompt_dir,
            "backend": self.backend.to_dict() if self.backend else None,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PipelineConfig":
        retry_raw = data.get("retry", {})
        backend_raw = data.get("backend")
        return cls(
            variant=data.get("variant", "full"),
            retry=RetryPolicy(
                max_attempts=retry_raw.get("max_attempts", 10),
                base_delay=retry_raw.get("base_delay", 1.0),
                factor=retry_raw.get("factor", 2.0),
                max_delay=retry_raw.get("max_delay", 60.0),
                jitter_fraction=retry_raw.get("jitter_fraction", 0.2),
            ),
            max_segment_len=data.get("max_segment_len", DEFAULT_MAX_SEGMENT_LEN),
            parallelism=data.get("parallelism", 1),
            subtask_parallelism=data.get("subtask_parallelism", 1),
            seed=data.get("seed", 0),
            max_image_dim=data.get("max_image_dim", DEFAULT_MAX_DIM),
            naive_include_images=data.get("naive_include_images", True),
            prompt_dir=data.get("prompt_dir"),
            backend=BackendConfig.from_dict(backend_raw) if backend_raw else None,
        )


def load_config(path: str | Path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PipelineError(f"cannot read config {path}: {exc}") from exc
    try:
        return PipelineConfig.from_dict(data)
    except (ValueError, KeyError, TypeError) as exc:
        raise PipelineError(f"invalid config {path}: {exc}") from exc


def config_fingerprint(config: PipelineConfig) -> str:
    """Stable hash of the semantic configuration.

    Worker-pool sizes are scheduling knobs that cannot change any output
    (results assemble by index), so they are excluded: a run may be resumed
    with a different parallelism, and reports produced at different
    parallelism levels remain byte-identical.
    """
    semantic = config.to_dict()
    semantic.pop("parallelism")
    semantic.pop("subtask_parallelism")
    canonical = json.dumps(semantic, sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


class RunStats:
    """Transcript sink that totals attempts, latency, and token usage by stage."""

    def __init__(self) -> None:
        self.attempts: Counter[str] = Counter()
        self.latency: dict[str, float] = defaultdict(float)
        self.usage: Counter[str] = Counter()
        self._lock = threading.Lock()

    def write(self, entry: dict[str, Any]) -> None:
        with self._lock:
            stage = entry["stage"]
            self.attempts[stage] += 1
            self.latency[stage] += entry.get("latency", 0.0)
            for key, value in (entry.get("usage") or {}).items():
                self.usage[key] += value


@dataclass(frozen=True)
class EvaluationReport:
    """Hierarchical per-task record; the machine format is the source of truth."""

    task_id: str
    variant: str
    config_fingerprint: str
    prompt_hashes: dict[str, str]
    seed: int
    backend_name: str
    final: FinalVerdict
    segmentation: Segmentation | None = None
    diagnoses: tuple[SubtaskDiagnosis, ...] | None = None
    bare_verdicts: tuple[str, ...] | None = None
    stage_attempts: dict[str, int] = field(default_factory=dict)
    stage_latency: dict[str, float] = field(default_factory=dict)
    token_usage: dict[str, int] = field(default_factory=dict)
    images_total: int = 0
    images_available: int = 0
    repaired: bool = False
    evaluator_error: bool = False
    notes: tuple[str, ...] = ()


def validate_report(report: EvaluationReport) -> None:
    """Enforce the per-variant presence rules before a report is written."""
    if report.variant not in VARIANTS:
        raise ValueError(f"unknown variant {report.variant!r}")
    expects_seg = report.variant in SEGMENTATION_VARIANTS
    if (report.segmentation is not None) != expects_seg:
        raise ValueError(
            f"variant {report.variant!r} must {'include' if expects_seg else 'omit'} "
            "the segmentation section"
        )
    expects_diag = report.variant in DIAGNOSES_VARIANTS
    if (report.diagnoses is not None) != expects_diag:
        raise ValueError(
            f"variant {report.variant!r} must {'include' if expects_diag else 'omit'} "
            "the diagnoses section"
        )
    if (report.bare_verdicts is not None) != (report.variant == "no_diag"):
        raise ValueError("bare verdicts appear exactly in the no_diag variant")
    if report.diagnoses is not None and report.segmentation is not None:
        if len(report.diagnoses) != report.segmentation.k:
            raise ValueError("diagnosis count must match subtask count")


def report_to_dict(report: EvaluationReport) -> dict[str, Any]:
    return {
        "task_id": report.task_id,
        "variant": report.variant,
        "config_fingerprint": report.config_fingerprint,
        "prompt_hashes": dict(report.prompt_hashes),
        "seed": report.seed,
        "backend_name": report.backend_name,
        "final": report.final.to_dict(),
        "segmentation": report.segmentation.to_dict() if report.segmentation else None,
        "diagnoses": (
            [d.to_dict() for d in report.diagnoses] if report.diagnoses is not None else None
        ),
        "bare_verdicts": list(report.bare_verdicts) if report.bare_verdicts is not None else None,
        "stage_attempts": dict(report.stage_attempts),
        "stage_latency": dict(report.stage_latency),
        "token_usage": dict(report.token_usage),
        "images_total": report.images_total,
        "images_available": report.images_available,
        "repaired": report.repaired,
        "evaluator_error": report.evaluator_error,
        "notes": list(report.notes),
    }


def report_from_dict(data: dict[str, Any]) -> EvaluationReport:
    return EvaluationReport(
        task_id=data["task_id"],
        variant=data["variant"],
        config_fingerprint=data["config_fingerprint"],
        prompt_hashes=dict(data.get("prompt_hashes", {})),
        seed=data.get("seed", 0),
        backend_name=data.get("backend_name", ""),
        final=FinalVerdict.from_dict(data["final"]),
        segmentation=(
            Segmentation.from_dict(data["segmentation"]) if data.get("segmentation") else None
        ),
        diagnoses=(
            tuple(SubtaskDiagnosis.from_dict(d) for d in data["diagnoses"])
            if data.get("diagnoses") is not None
            else None
        ),
        bare_verdicts=(
            tuple(data["bare_verdicts"]) if data.get("bare_verdicts") is not None else None
        ),
        stage_attempts=dict(data.get("stage_attempts", {})),
        stage_latency=dict(data.get("stage_latency", {})),
        token_usage=dict(data.get("token_usage", {})),
        images_total=data.get("images_total", 0),
        images_available=data.get("images_available", 0),
        repaired=data.get("repaired", False),
        evaluator_error=data.get("evaluator_error", False),
        notes=tuple(data.get("notes", ())),
    )


def _derive_rng(seed: int, task_id: str, stage: str, sub: int | None = None) -> random.Random:
    # String seeding hashes via sha512 internally, so this is stable across
    # runs and processes, and each call site gets an independent stream.
    return random.Random(f"{seed}:{task_id}:{stage}:{sub if sub is not None else ''}")


def _whole_trajectory_segmentation(task: TaskInstance) -> Segmentation:
    n = task.trajectory.length
    return Segmentation(
        boundaries=(0, n),
        subtasks=(
            SubtaskSpec(index=1, description=task.instruction, start_step=1, end_step=n),
        ),
    )


def _parse_boolean_response(text: str) -> tuple[bool, str]:
    """{"success": bool} with an optional justification string."""
    parsed = extract_structured(text)
    if not isinstance(parsed, dict):
        raise SchemaViolation("response must be a JSON object")
    success = parsed.get("success")
    if not isinstance(success, bool):
        raise SchemaViolation("'success' must be a JSON boolean")
    justification = parsed.get("justification", "")
    if not isinstance(justification, str):
        justification = ""
    return success, justification


def naive_evaluate(
    task: TaskInstance,
    backend: Backend,
    policy: RetryPolicy,
    prompts: PromptLibrary,
    *,
    include_images: bool = True,
    max_image_dim: int = DEFAULT_MAX_DIM,
    rng: random.Random | None = None,
    sleep: Callable[[float], None] = time.sleep,
    sink: TranscriptSink | None = None,
) -> FinalVerdict:
    """Single holistic call: instruction, transcript, and every screenshot."""
    trajectory = task.trajectory
    user_text = prompts.get("naive").render(
        task_instruction=task.instruction,
        action_transcript=action_transcript(trajectory),
    )
    parts: list[Part] = [TextPart(user_text)]
    if include_images:
        refs = [trajectory.initial_screenshot_ref] + [
            step.screenshot_ref for step in trajectory.steps
        ]
        for ref in refs:
            image = load_image_part(ref, max_image_dim)
            if image is not None:
                parts.append(image)
    request = ChatRequest(
        stage_tag="baseline", system_text=DEFAULT_SYSTEM_TEXT, user_parts=tuple(parts)
    )

    def validate(response):
        return _parse_boolean_response(response.text)

    success, justification = complete_with_retry(
        backend, request, policy, validate, rng=rng, sleep=sleep, sink=sink
    )
    return FinalVerdict(success=success, justification=justification, derived_from="naive_call")


def agenttrek_baseline(
    task: TaskInstance,
    backend: Backend,
    policy: RetryPolicy,
    prompts: PromptLibrary,
    *,
    max_image_dim: int = DEFAULT_MAX_DIM,
    rng: random.Random | None = None,
    sleep: Callable[[float], None] = time.sleep,
    sink: TranscriptSink | None = None,
) -> FinalVerdict:
    """Single call with the full transcript and only the final screenshot."""
    trajectory = task.trajectory
    user_text = prompts.get("agenttrek").render(
        task_instruction=task.instruction,
        action_transcript=action_transcript(trajectory),
    )
    parts: list[Part] = [TextPart(user_text)]
    final_image = load_image_part(trajectory.final_screenshot_ref, max_image_dim)
    if final_image is not None:
        parts.append(final_image)
    request = ChatRequest(
        stage_tag="baseline", system_text=DEFAULT_SYSTEM_TEXT, user_parts=tuple(parts)
    )

    def validate(response):
        return _parse_boolean_response(response.text)

    success, justification = complete_with_retry(
        backend, request, policy, validate, rng=rng, sleep=sleep, sink=sink
    )
    return FinalVerdict(success=success, justification=justification, derived_from="baseline")


def _bare_verdicts(
    task: TaskInstance,
    seg: Segmentation,
    backend: Backend,
    policy: RetryPolicy,
    prompts: PromptLibrary,
    config: PipelineConfig,
    sleep: Callable[[float], None],
    sink: TranscriptSink | None,
) -> tuple[list[str], list[str], bool]:
    """Per-subtask binary verdicts for the no_diag variant.

    Returns (verdicts, one-line reasonings, any_evaluator_error); a subtask
    that exhausts retries is recorded as a fail with an evaluator-error line.
    """
    verdicts: list[str] = []
    reasonings: list[str] = []
    degraded = False
    for i in range(1, seg.k + 1):
        request = build_diagnosis_request(
            task, seg, i, task.trajectory, prompts,
            bare=True, max_image_dim=config.max_image_dim,
        )

        def validate(response):
            parsed = extract_structured(response.text)
            if not isinstance(parsed, dict):
                raise SchemaViolation("bare verdict must be a JSON object")
            reasoning = parsed.get("reasoning")
            if not isinstance(reasoning, str) or not reasoning.strip():
                raise SchemaViolation("bare verdict needs a one-line 'reasoning'")
            verdict = parse_verdict(
                parsed.get("verdict"), allowed=(Verdict.SUCCESS, Verdict.FAIL)
            )
            return verdict.value, reasoning

        try:
            verdict_value, reasoning = complete_with_retry(
                backend, request, policy, validate,
                rng=_derive_rng(config.seed, task.task_id, "diagnose", i),
                sleep=sleep, sink=sink,
            )
        except RetriesExhausted as exc:
            verdict_value = Verdict.FAIL.value
            reasoning = f"evaluator error: no valid verdict after {len(exc.attempts)} attempts"
            degraded = True
        verdicts.append(verdict_value)
        reasonings.append(reasoning)
    return verdicts, reasonings, degraded


def evaluate(
    task: TaskInstance,
    config: PipelineConfig,
    backend: Backend,
    *,
    prompts: PromptLibrary | None = None,
    sink: TranscriptSink | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> EvaluationReport:
    """Evaluate one task under the configured variant.

    Stage failures degrade (synthetic diagnoses, hard-rule fallback, or a
    default-failed verdict flagged evaluator_error); a report always comes
    back for a well-formed task.
    """
    prompts = prompts if prompts is not None else PromptLibrary.load(config.prompt_dir)
    stats = RunStats()
    call_sink = CompositeSink(stats, sink) if sink is not None else stats
    trajectory = task.trajectory
    notes: list[str] = []
    evaluator_error = False
    segmentation: Segmentation | None = None
    diagnoses: list[SubtaskDiagnosis] | None = None
    bare: tuple[str, ...] | None = None

    def rng(stage: str, sub: int | None = None) -> random.Random:
        return _derive_rng(config.seed, task.task_id, stage, sub)

    def run_segmentation() -> Segmentation:
        nonlocal evaluator_error
        try:
            return segment_trajectory(
                task, backend, config.retry, prompts,
                max_segment_len=config.max_segment_len,
                rng=rng("segment"), sleep=sleep, sink=call_sink,
            )
        except RetriesExhausted as exc:
            evaluator_error = True
            notes.append(
                f"segmentation exhausted {len(exc.attempts)} attempts; "
                "fell back to a single whole-trajectory segment"
            )
            return _whole_trajectory_segmentation(task)

    def run_diagnoses(seg: Segmentation) -> list[SubtaskDiagnosis]:
        return diagnose_all(
            task, seg, trajectory, backend, config.retry, prompts,
            parallelism=config.subtask_parallelism,
            max_image_dim=config.max_image_dim,
            rng_factory=lambda i: rng("diagnose", i),
            sleep=sleep, sink=call_sink,
        )

    def run_summary(seg: Segmentation, diag: list[SubtaskDiagnosis]) -> FinalVerdict:
        return summarize(
            task, seg, diag, backend, config.retry, prompts,
            rng=rng("summarize"), sleep=sleep, sink=call_sink,
        )

    if config.variant == "full":
        segmentation = run_segmentation()
        diagnoses = run_diagnoses(segmentation)
        final = run_summary(segmentation, diagnoses)
    elif config.variant == "no_seg":
        seg = _whole_trajectory_segmentation(task)
        diagnoses = run_diagnoses(seg)
        final = run_summary(seg, diagnoses)
    elif config.variant == "no_sum":
        segmentation = run_segmentation()
        diagnoses = run_diagnoses(segmentation)
        final = aggregate_hard_rule(diagnoses)
    elif config.variant == "no_diag":
        segmentation = run_segmentation()
        verdicts, reasonings, degraded = _bare_verdicts(
            task, segmentation, backend, config.retry, prompts, config, sleep, call_sink
        )
        evaluator_error = evaluator_error or degraded
        bare = tuple(verdicts)
        blocks = [
            f"Subtask {i}: verdict {verdict}\n  Reasoning: {reasoning}"
            for i, (verdict, reasoning) in enumerate(zip(verdicts, reasonings), start=1)
        ]
        try:
            final = summarize_evidence(
                task, segmentation, blocks, backend, config.retry, prompts,
                rng=rng("summarize"), sleep=sleep, sink=call_sink,
            )
        except RetriesExhausted as exc:
            evaluator_error = True
            success = all(v == Verdict.SUCCESS.value for v in verdicts)
            final = FinalVerdict(
                success=success,
                justification=(
                    f"summary stage exhausted {len(exc.attempts)} attempts; "
                    "hard rule over bare verdicts"
                ),
                derived_from="hard_rule",
            )
    elif config.variant == "naive":
        try:
            final = naive_evaluate(
                task, backend, config.retry, prompts,
                include_images=config.naive_include_images,
                max_image_dim=config.max_image_dim,
                rng=rng("baseline"), sleep=sleep, sink=call_sink,
            )
        except RetriesExhausted as exc:
            evaluator_error = True
            final = FinalVerdict(
                success=False,
                justification=f"evaluator error: {len(exc.attempts)} attempts failed",
                derived_from="naive_call",
            )
    elif config.variant == "agenttrek_baseline":
        if trajectory.final_screenshot_ref is None:
            notes.append("text-only: no final screenshot available")
        try:
            final = agenttrek_baseline(
                task, backend, config.retry, prompts,
                max_image_dim=config.max_image_dim,
                rng=rng("baseline"), sleep=sleep, sink=call_sink,
            )
        except RetriesExhausted as exc:
            evaluator_error = True
            final = FinalVerdict(
                success=False,
                justification=f"evaluator error: {len(exc.attempts)} attempts failed",
                derived_from="baseline",
            )
    else:  # unreachable; PipelineConfig validates the variant
        raise PipelineError(f"unknown variant {config.variant!r}")

    if diagnoses is not None:
        evaluator_error = evaluator_error or any(d.evaluator_error for d in diagnoses)
    if config.variant in ("full", "no_seg") and final.derived_from == "hard_rule":
        evaluator_error = True  # the summary stage fell back

    repaired = bool(segmentation and segmentation.repaired) or bool(
        diagnoses and any(d.repaired for d in diagnoses)
    )
    report = EvaluationReport(
        task_id=task.task_id,
        variant=config.variant,
        config_fingerprint=config_fingerprint(config),
        prompt_hashes=prompts.fingerprint(),
        seed=config.seed,
        backend_name=getattr(backend, "name", type(backend).__name__),
        final=final,
        segmentation=segmentation,
        diagnoses=tuple(diagnoses) if diagnoses is not None else None,
        bare_verdicts=bare,
        stage_attempts=dict(sorted(stats.attempts.items())),
        stage_latency=dict(sorted(stats.latency.items())),
        token_usage=dict(sorted(stats.usage.items())),
        images_total=trajectory.length,
        images_available=trajectory.screenshot_count,
        repaired=repaired,
        evaluator_error=evaluator_error,
        notes=tuple(notes),
    )
    validate_report(report)
    return report


@dataclass(frozen=True)
class RunManifest:
    dataset: str
    variant: str
    config_fingerprint: str
    prompt_hashes: dict[str, str]
    seed: int
    items_total: int
    completed_ids: tuple[str, ...]
    failed: dict[str, str]
    predicted_success: int
    predicted_failure: int
    evaluator_errors: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset,
            "variant": self.variant,
            "config_fingerprint": self.config_fingerprint,
            "prompt_hashes": dict(self.prompt_hashes),
            "seed": self.seed,
            "items_total": self.items_total,
            "completed_ids": list(self.completed_ids),
            "failed": dict(self.failed),
            "predicted_success": self.predicted_success,
            "predicted_failure": self.predicted_failure,
            "evaluator_errors": self.evaluator_errors,
        }


def load_reports(path: str | Path) -> list[EvaluationReport]:
    reports = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                reports.append(report_from_dict(json.loads(line)))
    return reports


def _write_manifest(path: Path, manifest: RunManifest) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(
        json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    tmp.replace(path)


def evaluate_dataset(
    dataset: Dataset,
    config: PipelineConfig,
    backend: Backend,
    out_dir: str | Path,
    *,
    prompts: PromptLibrary | None = None,
    sink: TranscriptSink | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> RunManifest:
    """Evaluate every task, writing reports.jsonl and manifest.json as it goes.

    Rerunning over the same output directory skips task_ids the manifest
    already lists as completed, issuing zero backend calls for them. The
    manifest is rewritten after every task, so an interrupted run resumes
    where it stopped. A task that raises an unexpected error is recorded
    under "failed" and the run continues.
    """
    if not dataset.items:
        raise PipelineError("cannot evaluate an empty dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports_path = out / "reports.jsonl"
    manifest_path = out / "manifest.json"
    fingerprint = config_fingerprint(config)
    prompts = prompts if prompts is not None else PromptLibrary.load(config.prompt_dir)

    if manifest_path.exists():
        previous = json.loads(manifest_path.read_text(encoding="utf-8"))
        if previous.get("config_fingerprint") != fingerprint:
            raise PipelineError(
                f"output dir {out} was produced with a different config; "
                "use a fresh directory"
            )

    # The reports file, not the manifest, decides what is already done: a
    # crash can land between the report write and the manifest write.
    completed: set[str] = set()
    counts = {"predicted_success": 0, "predicted_failure": 0, "evaluator_errors": 0}
    if reports_path.exists():
        for prior in load_reports(reports_path):
            completed.add(prior.task_id)
            counts["predicted_success" if prior.final.success else "predicted_failure"] += 1
            if prior.evaluator_error:
                counts["evaluator_errors"] += 1

    failed: dict[str, str] = {}

    def make_manifest() -> RunManifest:
        ordered = tuple(i.task_id for i in dataset.items if i.task_id in completed)
        return RunManifest(
            dataset=dataset.name,
            variant=config.variant,
            config_fingerprint=fingerprint,
            prompt_hashes=prompts.fingerprint(),
            seed=config.seed,
            items_total=len(dataset.items),
            completed_ids=ordered,
            failed=dict(sorted(failed.items())),
            predicted_success=counts["predicted_success"],
            predicted_failure=counts["predicted_failure"],
            evaluator_errors=counts["evaluator_errors"],
        )

    pending = [item for item in dataset.items if item.task_id not in completed]
    logger.info(
        "run %s: %d task(s) pending, %d already completed",
        dataset.name, len(pending), len(completed),
    )

    def run_one(item: TaskInstance) -> EvaluationReport:
        return evaluate(item, config, backend, prompts=prompts, sink=sink, sleep=sleep)

    def consume(item: TaskInstance, report: EvaluationReport | None, error: str | None) -> None:
        if report is None:
            failed[item.task_id] = error or "unknown error"
            logger.error("task %s failed: %s", item.task_id, error)
        else:
            with open(reports_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(report_to_dict(report), sort_keys=True) + "\n")
            completed.add(item.task_id)
            counts["predicted_success" if report.final.success else "predicted_failure"] += 1
            if report.evaluator_error:
                counts["evaluator_errors"] += 1
        _write_manifest(manifest_path, make_manifest())

    if config.parallelism <= 1 or len(pending) <= 1:
        for item in pending:
            try:
                consume(item, run_one(item), None)
            except Exception as exc:  # defensive: keep the fleet run alive
                consume(item, None, f"{type(exc).__name__}: {exc}")
    else:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            futures = [(item, pool.submit(run_one, item)) for item in pending]
            # Collect in submission order so output files are deterministic.
            for item, future in futures:
                try:
                    consume(item, future.result(), None)
                except Exception as exc:
                    consume(item, None, f"{type(exc).__name__}: {exc}")

    manifest = make_manifest()
    _write_manifest(manifest_path, manifest)
    return manifest
