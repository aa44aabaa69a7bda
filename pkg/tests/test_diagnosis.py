"""Verdict normalization, schema gating, clamping, and the diagnosis fan-out."""

from __future__ import annotations

import json

import pytest

from trajdiag.backend import MockBackend, RetryPolicy, request_fingerprint
from trajdiag.diagnosis import (
    SubtaskDiagnosis,
    Verdict,
    build_diagnosis_request,
    diagnose_all,
    diagnose_subtask,
    parse_verdict,
)
from trajdiag.extraction import SchemaViolation
from trajdiag.segmentation import normalize_boundaries

from conftest import DIAGNOSE_OK, make_png, make_task, scripted_backend


def diagnosis_json(**overrides):
    payload = {
        "reasoning": "looked at each step",
        "verdict": "success",
        "error_analysis": "",
        "issues": [],
    }
    payload.update(overrides)
    return json.dumps(payload)


@pytest.fixture
def task14():
    return make_task(n=14)


@pytest.fixture
def seg14():
    return normalize_boundaries([0, 4, 9, 14], 14, ["open", "search", "buy"])


def run_diagnose(task, seg, i, backend, prompts, attempts=3):
    return diagnose_subtask(
        task, seg, i, task.trajectory, backend,
        RetryPolicy(max_attempts=attempts, jitter_fraction=0.0), prompts,
        sleep=lambda s: None,
    )


class TestParseVerdict:
    @pytest.mark.parametrize(
        "text,expected",
        [
            ("success", Verdict.SUCCESS),
            ("Succeeded", Verdict.SUCCESS),
            ("partial", Verdict.PARTIAL),
            ("Partially", Verdict.PARTIAL),
            ("PARTIAL SUCCESS", Verdict.PARTIAL),
            ("fail", Verdict.FAIL),
            ("failed", Verdict.FAIL),
            ("Failure", Verdict.FAIL),
        ],
    )
    def test_synonyms(self, text, expected):
        assert parse_verdict(text) is expected

    def test_unknown_rejected(self):
        with pytest.raises(SchemaViolation):
            parse_verdict("meh")

    def test_allowed_subset(self):
        with pytest.raises(SchemaViolation):
            parse_verdict("partial", allowed=(Verdict.SUCCESS, Verdict.FAIL))


class TestInvariants:
    def test_non_success_needs_error_analysis(self):
        with pytest.raises(ValueError):
            SubtaskDiagnosis(
                subtask_index=1, verdict=Verdict.FAIL, reasoning="r", error_analysis=""
            )

    def test_reasoning_required(self):
        with pytest.raises(ValueError):
            SubtaskDiagnosis(
                subtask_index=1, verdict=Verdict.SUCCESS, reasoning=" ", error_analysis=""
            )


class TestDiagnoseSubtask:
    def test_clean_success_passthrough(self, task14, seg14, prompts):
        backend = MockBackend(stage_defaults={"diagnose": diagnosis_json()})
        diagnosis = run_diagnose(task14, seg14, 1, backend, prompts)
        assert diagnosis.verdict is Verdict.SUCCESS
        assert diagnosis.issues == ()
        assert diagnosis.repaired is False
        assert diagnosis.subtask_index == 1

    def test_synonym_normalized(self, task14, seg14, prompts):
        backend = MockBackend(
            stage_defaults={"diagnose": diagnosis_json(verdict="succeeded")}
        )
        assert run_diagnose(task14, seg14, 1, backend, prompts).verdict is Verdict.SUCCESS

    def test_out_of_span_issue_clamped(self, task14, seg14, prompts):
        response = diagnosis_json(
            verdict="fail",
            error_analysis="wrong product page",
            issues=[{"step": 3, "problem": "p", "root_cause": "rc", "suggested_fix": "f"}],
        )
        backend = MockBackend(stage_defaults={"diagnose": response})
        # Subtask 2 spans steps 5..9; step 3 is outside and clamps to 5.
        diagnosis = run_diagnose(task14, seg14, 2, backend, prompts)
        assert diagnosis.issues[0].step_index == 5
        assert diagnosis.repaired is True

    def test_issue_above_span_clamps_down(self, task14, seg14, prompts):
        response = diagnosis_json(
            verdict="partial",
            error_analysis="late mistake",
            issues=[{"step": 99, "problem": "p", "root_cause": "rc", "suggested_fix": "f"}],
        )
        backend = MockBackend(stage_defaults={"diagnose": response})
        diagnosis = run_diagnose(task14, seg14, 2, backend, prompts)
        assert diagnosis.issues[0].step_index == 9

    def test_verdict_before_reasoning_is_rejected(self, task14, seg14, prompts):
        response = '{"verdict": "success", "reasoning": "afterthought", "error_analysis": "", "issues": []}'
        backend = MockBackend(stage_defaults={"diagnose": response})
        from trajdiag.backend import RetriesExhausted

        with pytest.raises(RetriesExhausted) as excinfo:
            run_diagnose(task14, seg14, 1, backend, prompts, attempts=2)
        assert "reasoning" in excinfo.value.reasons[0]

    def test_non_success_without_analysis_is_rejected(self, task14, seg14, prompts):
        backend = MockBackend(
            stage_defaults={"diagnose": diagnosis_json(verdict="fail", error_analysis="")}
        )
        from trajdiag.backend import RetriesExhausted

        with pytest.raises(RetriesExhausted):
            run_diagnose(task14, seg14, 1, backend, prompts, attempts=2)


class TestRequestContents:
    def test_all_subtask_descriptions_present_with_current_marker(
        self, task14, seg14, prompts
    ):
        request = build_diagnosis_request(task14, seg14, 2, task14.trajectory, prompts)
        text = request.joined_text()
        for description in ("open", "search", "buy"):
            assert description in text
        assert "2. search (steps 5-9)  <-- CURRENT" in text
        assert request.stage_tag == "diagnose"

    def test_placeholders_for_missing_screenshots(self, task14, seg14, prompts):
        request = build_diagnosis_request(task14, seg14, 1, task14.trajectory, prompts)
        text = request.joined_text()
        assert "[no screenshot for step 1]" in text
        assert "[no final screenshot available]" in text
        assert len(request.image_parts) == 0

    def test_image_budget_is_segment_plus_two(self, tmp_path, prompts):
        shots = [make_png(tmp_path / f"s{i}.png") for i in range(14)]
        task = make_task(n=14, screenshots=shots, initial=make_png(tmp_path / "init.png"))
        seg = normalize_boundaries([0, 4, 9, 14], 14, ["open", "search", "buy"])
        for i in (1, 2, 3):
            request = build_diagnosis_request(task, seg, i, task.trajectory, prompts)
            segment_len = seg.subtasks[i - 1].length
            assert len(request.image_parts) <= segment_len + 2

    def test_final_screenshot_appended(self, tmp_path, prompts):
        shots = [None] * 13 + [make_png(tmp_path / "last.png")]
        task = make_task(n=14, screenshots=shots)
        seg = normalize_boundaries([0, 4, 9, 14], 14, ["open", "search", "buy"])
        request = build_diagnosis_request(task, seg, 1, task.trajectory, prompts)
        # Segment 1 has no screenshots of its own; only the final frame rides.
        assert len(request.image_parts) == 1
        assert "Final screen of the whole attempt:" in request.joined_text()


class TestDiagnoseAll:
    def run_all(self, task, seg, backend, prompts, parallelism=1):
        return diagnose_all(
            task, seg, task.trajectory, backend,
            RetryPolicy(max_attempts=2, jitter_fraction=0.0), prompts,
            parallelism=parallelism, sleep=lambda s: None,
        )

    def test_ordered_results(self, task14, seg14, prompts):
        backend = scripted_backend()
        diagnoses = self.run_all(task14, seg14, backend, prompts)
        assert [d.subtask_index for d in diagnoses] == [1, 2, 3]
        assert all(d.verdict is Verdict.SUCCESS for d in diagnoses)

    def test_one_subtask_degrades_to_synthetic_failure(self, task14, seg14, prompts):
        bad_request = build_diagnosis_request(task14, seg14, 2, task14.trajectory, prompts)
        fingerprint = request_fingerprint(bad_request)
        backend = MockBackend(
            script={("diagnose", fingerprint): "garbage with no json"},
            stage_defaults={"diagnose": DIAGNOSE_OK},
        )
        diagnoses = self.run_all(task14, seg14, backend, prompts)
        assert len(diagnoses) == 3
        assert diagnoses[0].evaluator_error is False
        assert diagnoses[1].evaluator_error is True
        assert diagnoses[1].verdict is Verdict.FAIL
        assert "evaluator error" in diagnoses[1].error_analysis
        assert diagnoses[2].evaluator_error is False

    def test_parallelism_does_not_change_results(self, task14, seg14, prompts):
        sequential = self.run_all(task14, seg14, scripted_backend(), prompts, parallelism=1)
        parallel = self.run_all(task14, seg14, scripted_backend(), prompts, parallelism=4)
        assert sequential == parallel
