"""Quality scoring: clamping, distributions, and human-agreement kappa."""

from __future__ import annotations

import json

import pytest

from trajdiag.backend import MockBackend, RetryPolicy, request_fingerprint
from trajdiag.seg_quality import (
    SegQualityScore,
    agreement_vs_human,
    build_quality_request,
    load_human_labels,
    score_all_subtasks,
    score_distribution,
    score_subtask,
)
from trajdiag.segmentation import normalize_boundaries

from conftest import QUALITY_OK, make_task


def quality_json(score, **overrides):
    payload = {"coherence_notes": "cn", "alignment_notes": "an", "score": score}
    payload.update(overrides)
    return json.dumps(payload)


@pytest.fixture
def case():
    task = make_task(n=9)
    seg = normalize_boundaries([0, 3, 6, 9], 9, ["open", "search", "buy"])
    return task, seg


def run_score(task, seg, i, backend, prompts, attempts=2):
    return score_subtask(
        task, seg, i, task.trajectory, backend,
        RetryPolicy(max_attempts=attempts, jitter_fraction=0.0), prompts,
        sleep=lambda s: None,
    )


class TestScoreSubtask:
    def test_score_five_is_usable(self, case, prompts):
        task, seg = case
        backend = MockBackend(stage_defaults={"seg_quality": quality_json(5)})
        score = run_score(task, seg, 1, backend, prompts)
        assert score.score == 5
        assert score.usable is True
        assert score.ref == "t1#1"

    def test_score_three_is_problematic(self, case, prompts):
        task, seg = case
        backend = MockBackend(stage_defaults={"seg_quality": quality_json(3)})
        assert run_score(task, seg, 1, backend, prompts).usable is False

    def test_out_of_range_clamps(self, case, prompts):
        task, seg = case
        backend = MockBackend(stage_defaults={"seg_quality": quality_json(7)})
        score = run_score(task, seg, 1, backend, prompts)
        assert score.score == 5
        assert score.repaired is True
        low = MockBackend(stage_defaults={"seg_quality": quality_json(0)})
        assert run_score(task, seg, 1, low, prompts).score == 1

    def test_numeric_string_coerced(self, case, prompts):
        task, seg = case
        backend = MockBackend(stage_defaults={"seg_quality": quality_json("4")})
        score = run_score(task, seg, 1, backend, prompts)
        assert score.score == 4
        assert score.repaired is False

    def test_non_numeric_score_burns_retries(self, case, prompts):
        task, seg = case
        from trajdiag.backend import RetriesExhausted

        backend = MockBackend(stage_defaults={"seg_quality": quality_json("superb")})
        with pytest.raises(RetriesExhausted):
            run_score(task, seg, 1, backend, prompts)

    def test_request_carries_neighbors_and_span(self, case, prompts):
        task, seg = case
        request = build_quality_request(task, seg, 2, task.trajectory, prompts)
        text = request.joined_text()
        assert "previous: open (steps 1-3)" in text
        assert "next: buy (steps 7-9)" in text
        assert "steps 4-6" in text
        assert request.stage_tag == "seg_quality"

    def test_edge_subtasks_note_missing_neighbors(self, case, prompts):
        task, seg = case
        first = build_quality_request(task, seg, 1, task.trajectory, prompts)
        assert "previous: none" in first.joined_text()
        last = build_quality_request(task, seg, 3, task.trajectory, prompts)
        assert "next: none" in last.joined_text()


class TestScoreAll:
    def test_error_entries_flagged_and_excluded(self, case, prompts):
        task, seg = case
        bad = build_quality_request(task, seg, 2, task.trajectory, prompts)
        backend = MockBackend(
            script={("seg_quality", request_fingerprint(bad)): "not json"},
            stage_defaults={"seg_quality": QUALITY_OK},
        )
        scores = score_all_subtasks(
            task, seg, task.trajectory, backend,
            RetryPolicy(max_attempts=2, jitter_fraction=0.0), prompts,
            sleep=lambda s: None,
        )
        assert [s.evaluator_error for s in scores] == [False, True, False]
        distribution = score_distribution(scores)
        assert distribution.total == 2  # the error entry is excluded


class TestDistribution:
    def build_scores(self, counts: dict[int, int]) -> list[SegQualityScore]:
        scores = []
        serial = 0
        for value, count in counts.items():
            for _ in range(count):
                scores.append(
                    SegQualityScore(task_id=f"t{serial}", subtask_index=1, score=value)
                )
                serial += 1
        return scores

    def test_hand_counted_fixture(self):
        distribution = score_distribution(self.build_scores({5: 5, 4: 2, 3: 2, 1: 1}))
        assert distribution.total == 10
        assert distribution.percent(5) == pytest.approx(50.0)
        assert distribution.percent(4) == pytest.approx(20.0)
        assert distribution.usable_rate == pytest.approx(70.0)

    def test_published_scale_distribution(self):
        # 1000 subtasks: 96.9% fives, 2.5% fours, remainder spread downward.
        distribution = score_distribution(
            self.build_scores({5: 969, 4: 25, 3: 3, 2: 2, 1: 1})
        )
        assert round(distribution.percent(5), 1) == 96.9
        assert round(distribution.percent(4), 1) == 2.5
        assert round(distribution.usable_rate, 1) == 99.4

    def test_all_ones_is_zero_usable(self):
        distribution = score_distribution(self.build_scores({1: 4}))
        assert distribution.usable_rate == 0.0

    def test_percentages_sum_to_one_hundred(self):
        distribution = score_distribution(self.build_scores({5: 3, 4: 1, 2: 3}))
        total = sum(distribution.percent(s) for s in range(1, 6))
        assert total == pytest.approx(100.0, abs=0.2)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            score_distribution([])


class TestAgreement:
    def scores_from(self, usable_flags: dict[str, bool]) -> list[SegQualityScore]:
        scores = []
        for ref, usable in usable_flags.items():
            task_id, index = ref.split("#")
            scores.append(
                SegQualityScore(
                    task_id=task_id, subtask_index=int(index),
                    score=5 if usable else 2,
                )
            )
        return scores

    def test_perfect_match_is_kappa_one(self):
        flags = {f"t{i}#1": i % 3 != 0 for i in range(200)}
        scores = self.scores_from(flags)
        assert agreement_vs_human(scores, flags) == 1.0

    def test_known_disagreements_match_direct_formula(self):
        from test_metrics import kappa_oracle

        machine = {f"t{i}#1": i < 60 for i in range(100)}
        human = {f"t{i}#1": i < 50 for i in range(100)}
        refs = sorted(machine)
        expected = kappa_oracle([machine[r] for r in refs], [human[r] for r in refs])
        assert agreement_vs_human(self.scores_from(machine), human) == pytest.approx(
            expected, abs=1e-12
        )

    def test_empty_intersection_is_an_error(self):
        scores = self.scores_from({"a#1": True})
        with pytest.raises(ValueError):
            agreement_vs_human(scores, {"b#1": True})

    def test_unmatched_refs_warned_and_skipped(self, caplog):
        scores = self.scores_from({"a#1": True, "a#2": False, "c#1": True})
        labels = {"a#1": True, "a#2": False, "d#9": True}
        kappa = agreement_vs_human(scores, labels)
        assert kappa == 1.0
        assert any("only one side" in r.message for r in caplog.records)

    def test_error_entries_do_not_participate(self):
        scores = self.scores_from({"a#1": True}) + [
            SegQualityScore(task_id="a", subtask_index=2, score=0, evaluator_error=True)
        ]
        assert agreement_vs_human(scores, {"a#1": True, "a#2": False}) == 1.0


class TestHumanLabelFile:
    def test_load(self, tmp_path):
        path = tmp_path / "labels.jsonl"
        path.write_text(
            '{"subtask_ref": "t1#1", "usable": true}\n'
            '{"subtask_ref": "t1#2", "usable": false}\n'
        )
        assert load_human_labels(path) == {"t1#1": True, "t1#2": False}

    def test_bad_record_rejected(self, tmp_path):
        path = tmp_path / "labels.jsonl"
        path.write_text('{"subtask_ref": "t1#1", "usable": "yes"}\n')
        with pytest.raises(ValueError, match="line 1"):
            load_human_labels(path)


class TestScoreInvariants:
    def test_score_must_be_1_to_5(self):
        with pytest.raises(ValueError):
            SegQualityScore(task_id="t", subtask_index=1, score=6)

    def test_usable_exactly_at_threshold(self):
        for value in (1, 2, 3, 4, 5):
            score = SegQualityScore(task_id="t", subtask_index=1, score=value)
            assert score.usable is (value >= 4)
