"""Command-line surface: evaluate, meta-eval, and seg-quality.

Exit-code policy: 0 when the run itself completed, even if individual tasks
hit evaluator errors (those are counted in the manifest); 1 for
configuration or ingestion failures, so fleet scripts can tell the two
apart.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backend import Backend, HttpBackend, JsonlTranscript, MockBackend
from .metrics import metrics_by_group
from .pipeline import (
    VARIANTS,
    PipelineConfig,
    PipelineError,
    evaluate_dataset,
    load_config,
    load_reports,
)
from .prompts import PromptLibrary
from .rendering import (
    render_distribution,
    render_group_table,
    render_metrics,
    render_report,
)
from .seg_quality import (
    agreement_vs_human,
    load_human_labels,
    score_all_subtasks,
    score_distribution,
)
from .segmentation import segment_trajectory
from .trajectory import DatasetError, IngestOptions, load_dataset

logger = logging.getLogger(__name__)


def _build_backend(args: argparse.Namespace, config: PipelineConfig) -> Backend:
    if getattr(args, "mock_script", None):
        return MockBackend.from_script_file(args.mock_script)
    if config.backend is not None:
        return HttpBackend(config.backend)
    raise PipelineError(
        "no backend available: pass --mock-script or configure 'backend' in the config file"
    )


def _load_pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    overrides = {}
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if getattr(args, "parallelism", None) is not None:
        overrides["parallelism"] = args.parallelism
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if overrides:
        merged = config.to_dict()
        merged.update(overrides)
        config = PipelineConfig.from_dict(merged)
    return config


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _load_pipeline_config(args)
    dataset = load_dataset(args.dataset, IngestOptions(verify_images=args.verify_images))
    backend = _build_backend(args, config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sink = None if args.no_transcript else JsonlTranscript(out_dir / "transcript.jsonl")
    manifest = evaluate_dataset(dataset, config, backend, out_dir, sink=sink)

    rendered_dir = out_dir / "rendered"
    rendered_dir.mkdir(exist_ok=True)
    for report in load_reports(out_dir / "reports.jsonl"):
        (rendered_dir / f"{report.task_id}.md").write_text(
            render_report(report), encoding="utf-8"
        )

    print(
        f"evaluated {len(manifest.completed_ids)}/{manifest.items_total} task(s): "
        f"{manifest.predicted_success} predicted success, "
        f"{manifest.predicted_failure} predicted failure, "
        f"{manifest.evaluator_errors} evaluator error(s), "
        f"{len(manifest.failed)} failed outright"
    )
    print(f"reports: {out_dir / 'reports.jsonl'}")
    return 0


def cmd_meta_eval(args: argparse.Namespace) -> int:
    reports = load_reports(args.reports)
    dataset = load_dataset(args.dataset)
    grouped = metrics_by_group(reports, dataset, exclude_errors=args.exclude_errors)
    print(render_metrics(grouped.overall))
    if args.by_length:
        print()
        print(render_group_table(grouped))
    if grouped.excluded_missing_gold:
        print(f"(excluded {grouped.excluded_missing_gold} item(s) without gold labels)")
    if grouped.excluded_evaluator_errors:
        print(f"(excluded {grouped.excluded_evaluator_errors} evaluator-error report(s))")
    out_path = Path(args.out) if args.out else Path(args.reports).parent / "metrics.json"
    out_path.write_text(
        json.dumps(grouped.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(f"machine copy: {out_path}")
    return 0


def cmd_seg_quality(args: argparse.Namespace) -> int:
    config = _load_pipeline_config(args)
    dataset = load_dataset(args.dataset)
    backend = _build_backend(args, config)
    prompts = PromptLibrary.load(config.prompt_dir)

    segmentations = {}
    if args.reports:
        for report in load_reports(args.reports):
            if report.segmentation is not None:
                segmentations[report.task_id] = report.segmentation

    scores = []
    for item in dataset.items:
        seg = segmentations.get(item.task_id)
        if seg is None:
            seg = segment_trajectory(
                item, backend, config.retry, prompts,
                max_segment_len=config.max_segment_len,
            )
        scores.extend(
            score_all_subtasks(
                item, seg, item.trajectory, backend, config.retry, prompts,
                parallelism=config.subtask_parallelism,
                max_image_dim=config.max_image_dim,
            )
        )

    distribution = score_distribution(scores)
    print(render_distribution(distribution))
    if args.human_labels:
        labels = load_human_labels(args.human_labels)
        kappa = agreement_vs_human(scores, labels)
        print(f"agreement vs human (Cohen's kappa): {kappa:.4f}")
    if args.out:
        payload = {
            "distribution": distribution.to_dict(),
            "scores": [
                {
                    "subtask_ref": s.ref,
                    "score": s.score,
                    "usable": s.usable,
                    "coherence_notes": s.coherence_notes,
                    "alignment_notes": s.alignment_notes,
                    "repaired": s.repaired,
                    "evaluator_error": s.evaluator_error,
                }
                for s in scores
            ],
        }
        Path(args.out).write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        print(f"machine copy: {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajdiag",
        description="Segment, diagnose, and judge GUI-agent trajectories.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_eval = sub.add_parser("evaluate", help="evaluate a dataset and write reports")
    p_eval.add_argument("dataset", help="line-delimited dataset file")
    p_eval.add_argument("out_dir", help="output directory for reports and manifest")
    p_eval.add_argument("--config", help="pipeline config JSON file")
    p_eval.add_argument("--variant", choices=list(VARIANTS),
                        help="override the configured variant")
    p_eval.add_argument("--parallelism", type=int, help="task-level worker count")
    p_eval.add_argument("--seed", type=int, help="jitter seed override")
    p_eval.add_argument("--mock-script", help="JSON mock script (offline run)")
    p_eval.add_argument("--verify-images", action="store_true",
                        help="fail ingestion when a referenced screenshot is missing")
    p_eval.add_argument("--no-transcript", action="store_true",
                        help="skip the per-attempt audit transcript")
    p_eval.set_defaults(func=cmd_evaluate)

    p_meta = sub.add_parser("meta-eval", help="score reports against gold labels")
    p_meta.add_argument("reports", help="reports.jsonl from an evaluate run")
    p_meta.add_argument("dataset", help="the dataset the reports were produced from")
    p_meta.add_argument("--exclude-errors", action="store_true",
                        help="drop evaluator-error reports from scoring")
    p_meta.add_argument("--by-length", action="store_true",
                        help="also print the trajectory-length group table")
    p_meta.add_argument("--out", help="where to write metrics.json")
    p_meta.set_defaults(func=cmd_meta_eval)

    p_quality = sub.add_parser("seg-quality", help="score segmentation quality")
    p_quality.add_argument("dataset", help="line-delimited dataset file")
    p_quality.add_argument("--config", help="pipeline config JSON file")
    p_quality.add_argument("--reports", help="reuse segmentations from reports.jsonl")
    p_quality.add_argument("--mock-script", help="JSON mock script (offline run)")
    p_quality.add_argument("--human-labels",
                           help="line-delimited {subtask_ref, usable} labels for kappa")
    p_quality.add_argument("--out", help="where to write the machine-readable scores")
    p_quality.set_defaults(func=cmd_seg_quality)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, PipelineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
