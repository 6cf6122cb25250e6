from __future__ import annotations

import json
import random

import pytest

from expertloop.guidance import UNIFORM_COSTS, QueryKind
from expertloop.harness import (
    CountingProvider,
    GuidedPolicy,
    RandomPolicy,
    RunState,
    UncertaintyPolicy,
    predict,
    replay_run,
    run_stream,
    step,
)
from expertloop.integrate import IntegrationParams
from expertloop.kr import (
    ContentKind,
    ItemStatus,
    KnowledgeContent,
    ScoringParams,
    Source,
    TransitionCause,
)
from expertloop.metrics import Confusion, compute_metrics
from expertloop.mockllm import RuleDomainProvider, rule_sentence
from expertloop.oracle import ScriptedOracle
from expertloop.prompts import load_questions, load_templates
from expertloop.stream import Instance, LabelSpace, PhaseSpec, load_stream, write_stream
from expertloop.streamgen import (
    DriftStreamConfig,
    RuleDomainSpec,
    make_drift_stream,
    make_rule_discovery_task,
)

LABELS = ("Match", "Non-Match")


def make_state(budget=10, run_id="t", phases=None, **kw) -> RunState:
    return RunState.create(
        run_id=run_id,
        label_space=LabelSpace(labels=LABELS),
        budget=budget,
        cost_table=UNIFORM_COSTS,
        scoring=kw.pop("scoring", ScoringParams.from_config(n_top=5)),
        integration=kw.pop("integration", IntegrationParams()),
        templates=load_templates(),
        questions=load_questions(),
        phases=phases,
        **kw,
    )


def rule_instance(ordinal=1, marker="R0", rev=1, truth="Match"):
    return Instance(
        id=f"s{ordinal:05d}",
        ordinal=ordinal,
        ts=(ordinal - 1) * 60,
        fields={"marker": marker, "rev": str(rev), "case": f"case {ordinal}"},
        truth=truth,
    )


class TestPredict:
    def test_empty_kr_defaults_conservatively(self):
        state = make_state()
        llm = CountingProvider(RuleDomainProvider())
        label, reasoning, visible = predict(rule_instance(), state, llm)
        assert label == "Non-Match"
        assert visible == []

    def test_rule_in_kr_drives_label(self):
        state = make_state()
        state.kr.add_item(
            KnowledgeContent(kind=ContentKind.RULE, text=rule_sentence("R0", 1, "Match")),
            Source.HUMAN,
            now=0,
        )
        llm = CountingProvider(RuleDomainProvider())
        label, _, visible = predict(rule_instance(marker="R0"), state, llm)
        assert label == "Match"
        assert len(visible) == 1

    def test_superseded_rule_never_in_prompt(self):
        state = make_state()
        old = state.kr.add_item(
            KnowledgeContent(kind=ContentKind.RULE, text=rule_sentence("R0", 1, "Match")),
            Source.HUMAN,
            now=0,
        )
        new = state.kr.add_item(
            KnowledgeContent(kind=ContentKind.RULE, text=rule_sentence("R0", 2, "Non-Match")),
            Source.HUMAN,
            now=0,
        )
        state.kr.transition_status(old, ItemStatus.SUPERSEDED, 0, TransitionCause(other_kid=new))
        state.now = 60
        llm = CountingProvider(RuleDomainProvider())
        label, _, visible = predict(rule_instance(marker="R0", rev=2), state, llm)
        kids = [s.item.kid for s in visible]
        assert old not in kids
        assert new in kids
        assert label == "Non-Match"


class TestStepEvents:
    def _run_one(self, budget=10, marker="R0", with_rule=False):
        spec = RuleDomainSpec(n=10, n_rules=2, seed=5)
        _, table, _ = make_rule_discovery_task(spec)
        state = make_state(budget=budget)
        if with_rule:
            state.kr.add_item(
                KnowledgeContent(kind=ContentKind.RULE, text=rule_sentence(marker, 1, "Match")),
                Source.HUMAN,
                now=0,
            )
        llm = CountingProvider(RuleDomainProvider())
        x = rule_instance(ordinal=1, marker=marker, truth="Match")
        table.truth[x.id] = (x.truth, (marker,))
        outcome = step(state, x, ScriptedOracle(table), GuidedPolicy(llm), llm)
        return state, outcome

    def test_high_confidence_prediction_only(self):
        state, outcome = self._run_one(with_rule=True)
        # drop the setup add; the step itself emits the stream record, the
        # retrieval usage bump, and the prediction - no dialogue/query trail
        kinds = [r.kind for r in state.log.records][1:]
        assert kinds == ["kr_mutation", "prediction"] or kinds == [
            "instance_seen",
            "kr_mutation",
            "prediction",
        ]
        assert "dialogue" not in kinds and "query_issued" not in kinds
        assert outcome.queried is None

    def test_uncertain_step_emits_full_trace(self):
        state, outcome = self._run_one(with_rule=False)
        kinds = [r.kind for r in state.log.records]
        assert kinds[0] == "instance_seen"
        assert "dialogue" in kinds
        assert "query_issued" in kinds
        assert "feedback_received" in kinds
        assert "kr_mutation" in kinds
        assert kinds[-1] == "prediction"
        assert outcome.queried is not None
        assert outcome.queried.kind == QueryKind.ASK_RULES
        assert state.ledger.spent == outcome.queried.cost

    def test_budget_exhausted_predict_only(self):
        state, outcome = self._run_one(budget=0, with_rule=False)
        assert outcome.queried is None
        assert state.ledger.spent == 0
        kinds = [r.kind for r in state.log.records]
        assert "query_issued" not in kinds


class TestRunStream:
    def test_empty_stream(self):
        state = make_state()
        llm = CountingProvider(RuleDomainProvider())
        spec = RuleDomainSpec(n=4, n_rules=2, seed=5)
        _, table, _ = make_rule_discovery_task(spec)
        metrics = run_stream([], state, ScriptedOracle(table), GuidedPolicy(llm), llm)
        assert metrics.overall.n == 0
        assert metrics.overall.accuracy is None
        assert metrics.budget_spent == 0

    def test_synthetic_learning_run(self):
        spec = RuleDomainSpec(n=60, n_rules=3, seed=11)
        stream, table, phases = make_rule_discovery_task(spec)
        state = make_state(budget=10, phases=phases)
        llm = CountingProvider(RuleDomainProvider())
        metrics = run_stream(stream, state, ScriptedOracle(table), GuidedPolicy(llm), llm)
        assert metrics.budget_spent == 3  # one rule query per hidden rule
        assert metrics.overall.accuracy > 0.9
        assert metrics.queries_by_kind == {"AskRules": 3}
        assert metrics.aht_proxy_s > 0

    def test_replay_matches_live(self):
        spec = RuleDomainSpec(n=40, n_rules=3, seed=13)
        stream, table, phases = make_rule_discovery_task(spec)
        state = make_state(budget=10, phases=phases, run_id="rep")
        llm = CountingProvider(RuleDomainProvider())
        metrics = run_stream(stream, state, ScriptedOracle(table), GuidedPolicy(llm), llm)
        result = replay_run(state.log.records)
        assert result.kr.serialize_state() == state.kr.serialize_state()
        assert result.metrics.to_dict() == metrics.to_dict()
        assert result.spent == state.ledger.spent

    def test_final_label_equals_oracle_label_when_asklabel(self):
        spec = RuleDomainSpec(n=30, n_rules=3, seed=7)
        stream, table, phases = make_rule_discovery_task(spec)
        state = make_state(budget=30)
        llm = CountingProvider(RuleDomainProvider())
        run_stream(stream, state, ScriptedOracle(table), RandomPolicy(rate=1.0, seed=3), llm)
        issued = {r.payload["qid"]: r.payload for r in state.log.records if r.kind == "query_issued"}
        answered = {
            r.payload["qid"]: r.payload["feedback"]
            for r in state.log.records
            if r.kind == "feedback_received" and r.payload.get("status") == "answered"
        }
        finals = {r.payload["instance_id"]: r.payload["label"] for r in state.log.records if r.kind == "prediction"}
        truths = {r.payload["id"]: r.payload["truth"] for r in state.log.records if r.kind == "instance_seen"}
        assert answered
        for qid, feedback in answered.items():
            if issued[qid]["kind"] == "AskLabel":
                iid = issued[qid]["payload"]["instance_id"]
                assert finals[iid] == feedback["label"] == truths[iid]


class TestComputeMetrics:
    def test_sensitivity_fixture(self):
        confusion = Confusion()
        confusion.record("Match", "Match", 130)
        confusion.record("Match", "Non-Match", 26)
        confusion.record("Non-Match", "Non-Match", 400)
        m = compute_metrics(confusion, "binary", positive="Match")
        assert m.sensitivity == pytest.approx(130 / 156)
        assert round(m.sensitivity, 4) == 0.8333

    def test_fp_zero_specificity_one(self):
        confusion = Confusion()
        confusion.record("Non-Match", "Non-Match", 10)
        confusion.record("Match", "Match", 1)
        m = compute_metrics(confusion, "binary", positive="Match")
        assert m.specificity == 1.0

    def test_all_zero_all_absent(self):
        m = compute_metrics(Confusion(), "binary", positive="Match")
        assert m.accuracy is None and m.sensitivity is None and m.specificity is None

    def test_matches_brute_force_random(self):
        rng = random.Random(99)
        labels = ("Match", "Non-Match")
        for _ in range(200):
            confusion = Confusion()
            pairs = [(rng.choice(labels), rng.choice(labels)) for _ in range(rng.randrange(0, 50))]
            for truth, pred in pairs:
                confusion.record(truth, pred)
            m = compute_metrics(confusion, "binary", positive="Match")
            n = len(pairs)
            if n == 0:
                assert m.accuracy is None
                continue
            assert m.accuracy == pytest.approx(sum(1 for t, p in pairs if t == p) / n)
            tp = sum(1 for t, p in pairs if t == "Match" and p == "Match")
            fn = sum(1 for t, p in pairs if t == "Match" and p != "Match")
            tn = sum(1 for t, p in pairs if t == "Non-Match" and p == "Non-Match")
            fp = sum(1 for t, p in pairs if t == "Non-Match" and p == "Match")
            assert m.sensitivity == (pytest.approx(tp / (tp + fn)) if (tp + fn) else None)
            assert m.specificity == (pytest.approx(tn / (tn + fp)) if (tn + fp) else None)


class TestDriftStreamGenerator:
    def _config(self, n=400):
        return DriftStreamConfig(
            n=n,
            labels=["alpha", "beta"],
            field_templates={
                "alpha": {"summary": "alpha case {ordinal} {nonce}"},
                "beta": {"summary": "beta case {ordinal} {nonce}"},
            },
        )

    def test_uniform_single_phase_counts(self):
        phases = [PhaseSpec(start_ordinal=1, label_frequency={"alpha": 1.0, "beta": 1.0})]
        instances, _ = make_drift_stream(phases, self._config(), seed=17)
        counts = {"alpha": 0, "beta": 0}
        for x in instances:
            counts[x.truth] += 1
        # frozen seed: binomial(400, .5) stays well inside 4 sigma of 200
        assert abs(counts["alpha"] - 200) < 40

    def test_two_phase_frequency_swap(self):
        phases = [
            PhaseSpec(start_ordinal=1, label_frequency={"alpha": 0.9, "beta": 0.1}),
            PhaseSpec(start_ordinal=201, label_frequency={"alpha": 0.1, "beta": 0.9}),
        ]
        instances, _ = make_drift_stream(phases, self._config(), seed=17)
        first = [x for x in instances if x.ordinal <= 200]
        second = [x for x in instances if x.ordinal > 200]
        share_first = sum(1 for x in first if x.truth == "alpha") / len(first)
        share_second = sum(1 for x in second if x.truth == "alpha") / len(second)
        assert share_first > 0.75
        assert share_second < 0.25

    def test_same_seed_byte_identical_files(self, tmp_path):
        phases = [PhaseSpec(start_ordinal=1, label_frequency={"alpha": 1.0, "beta": 1.0})]
        for name in ("a", "b"):
            instances, table = make_drift_stream(phases, self._config(n=50), seed=4)
            write_stream(tmp_path / f"{name}.jsonl", instances)
            table.write(tmp_path / f"{name}.truth.jsonl", tmp_path / f"{name}.pack.json")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert (tmp_path / "a.truth.jsonl").read_bytes() == (tmp_path / "b.truth.jsonl").read_bytes()
        assert (tmp_path / "a.pack.json").read_bytes() == (tmp_path / "b.pack.json").read_bytes()

    def test_stream_file_round_trip(self, tmp_path):
        phases = [PhaseSpec(start_ordinal=1, label_frequency={"alpha": 1.0})]
        instances, _ = make_drift_stream(phases, self._config(n=20), seed=9)
        write_stream(tmp_path / "s.jsonl", instances)
        assert load_stream(tmp_path / "s.jsonl") == instances


class TestBaselinePolicies:
    def _run(self, policy, budget=100, n=30):
        spec = RuleDomainSpec(n=n, n_rules=3, seed=21)
        stream, table, phases = make_rule_discovery_task(spec)
        state = make_state(budget=budget)
        llm = CountingProvider(RuleDomainProvider())
        metrics = run_stream(stream, state, ScriptedOracle(table), policy, llm)
        return state, metrics

    def test_random_rate_one_queries_every_instance(self):
        state, metrics = self._run(RandomPolicy(rate=1.0, seed=2), budget=100, n=30)
        assert metrics.queries_by_kind == {"AskLabel": 30}

    def test_random_respects_budget(self):
        state, metrics = self._run(RandomPolicy(rate=1.0, seed=2), budget=7, n=30)
        assert metrics.budget_spent == 7

    def test_random_fixed_seed_same_ordinals(self):
        picks = []
        for _ in range(2):
            state, _ = self._run(RandomPolicy(rate=0.4, seed=5), budget=100, n=30)
            queried = [
                r.payload["payload"]["instance_id"]
                for r in state.log.records
                if r.kind == "query_issued"
            ]
            picks.append(queried)
        assert picks[0] == picks[1]
        assert 0 < len(picks[0]) < 30

    def test_uncertainty_theta_zero_never_queries(self):
        llm = CountingProvider(RuleDomainProvider())
        state, metrics = self._run(UncertaintyPolicy(llm, theta=0.0), budget=100, n=20)
        assert metrics.queries_by_kind == {}

    def test_uncertainty_queries_until_learned(self):
        # probe is low exactly while the marker's rule is missing; labels do
        # not teach rules, so every instance with missing rules queries
        llm = CountingProvider(RuleDomainProvider())
        state, metrics = self._run(UncertaintyPolicy(llm, theta=0.5), budget=100, n=20)
        assert metrics.queries_by_kind.get("AskLabel", 0) == 20

    def test_baseline_feedback_flows_through_integration(self):
        state, _ = self._run(RandomPolicy(rate=1.0, seed=2), budget=100, n=10)
        adds = [
            r
            for r in state.log.records
            if r.kind == "kr_mutation" and r.payload.get("op") == "add"
        ]
        assert adds  # label feedback became exemplar knowledge items


class TestPerPhaseMetrics:
    def test_segments_follow_phase_boundaries(self):
        spec = RuleDomainSpec(n=60, n_rules=2, seed=3, flip_ordinal=31)
        stream, table, phases = make_rule_discovery_task(spec)
        state = make_state(budget=20, phases=phases)
        llm = CountingProvider(RuleDomainProvider())
        metrics = run_stream(stream, state, ScriptedOracle(table), GuidedPolicy(llm), llm)
        starts = [start for start, _ in metrics.per_phase]
        assert starts == [1, 31]
        assert sum(m.n for _, m in metrics.per_phase) == 60
