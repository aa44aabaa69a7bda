"""trajdiag: segment, diagnose, and judge GUI-agent trajectories.

The pipeline splits a trajectory into subtask segments, grades each segment
with a verdict/error-analysis/fix triple, and aggregates the grades into a
task-level judgment. A meta-evaluation layer scores the evaluator itself
against gold labels, and a deterministic mock backend makes every run
reproducible offline.
"""

from .backend import (
    Backend,
    BackendConfig,
    ChatRequest,
    ChatResponse,
    HttpBackend,
    ImagePart,
    JsonlTranscript,
    MockBackend,
    RetriesExhausted,
    RetryPolicy,
    TextPart,
    TransportError,
    complete_with_retry,
)
from .diagnosis import (
    StepIssue,
    SubtaskDiagnosis,
    Verdict,
    diagnose_all,
    diagnose_subtask,
)
from .extraction import (
    ExtractionError,
    NoStructureFound,
    ParseFailed,
    SchemaViolation,
    extract_structured,
)
from .metrics import (
    ConfusionMatrix,
    EmptyInputError,
    GroupedMetrics,
    LengthGroup,
    MetricsSummary,
    cohen_kappa,
    compute_metrics,
    group_of_length,
    metrics_by_group,
)
from .pipeline import (
    EvaluationReport,
    PipelineConfig,
    PipelineError,
    RunManifest,
    agenttrek_baseline,
    evaluate,
    evaluate_dataset,
    load_config,
    load_reports,
    naive_evaluate,
)
from .prompts import PromptLibrary, PromptTemplate
from .seg_quality import (
    SegQualityScore,
    agreement_vs_human,
    score_all_subtasks,
    score_distribution,
    score_subtask,
)
from .segmentation import (
    Segmentation,
    SubtaskSpec,
    enforce_max_segment,
    normalize_boundaries,
    segment_trajectory,
)
from .summary import FinalVerdict, aggregate_hard_rule, summarize
from .trajectory import (
    Dataset,
    DatasetError,
    IngestOptions,
    Step,
    TaskInstance,
    Trajectory,
    action_transcript,
    dataset_stats,
    load_dataset,
    save_dataset,
)

__version__ = "0.1.0"
