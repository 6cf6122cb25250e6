from __future__ import annotations

import math
import random

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from expertloop.errors import (
    ClockSkew,
    ContentInvalid,
    InvalidTransition,
    NonMonotoneSequence,
    UnknownKid,
)
from expertloop.events import EventLog, EventRecord
from expertloop.kr import (
    ContentKind,
    ExemplarPayload,
    ItemStatus,
    KnowledgeContent,
    KnowledgeRepository,
    ScoringParams,
    Source,
    TransitionCause,
    composite_score,
)

DAY = 86_400


def rule(text: str) -> KnowledgeContent:
    return KnowledgeContent(kind=ContentKind.RULE, text=text)


def make_repo(log: EventLog | None = None) -> KnowledgeRepository:
    if log is None:
        return KnowledgeRepository(run_id="t")
    return KnowledgeRepository(run_id="t", emit=lambda kind, payload: log.append(kind, payload, ts=0))


class TestContent:
    def test_empty_text_rejected(self):
        with pytest.raises(ContentInvalid):
            KnowledgeContent(kind=ContentKind.RULE, text="   ")

    def test_exemplar_payload_required_iff_exemplar(self):
        with pytest.raises(ContentInvalid):
            KnowledgeContent(kind=ContentKind.EXEMPLAR, text="case")
        with pytest.raises(ContentInvalid):
            KnowledgeContent(
                kind=ContentKind.RULE,
                text="r",
                exemplar_payload=ExemplarPayload("x", "Match", "because"),
            )
        ok = KnowledgeContent(
            kind=ContentKind.EXEMPLAR,
            text="case",
            exemplar_payload=ExemplarPayload("x", "Match", "because"),
        )
        assert ok.exemplar_payload.label == "Match"


class TestAddItem:
    def test_add_starts_valid_with_both_timestamps(self):
        repo = make_repo()
        kid = repo.add_item(rule("Month/Year DOB match sufficient for PEP L3"), Source.HUMAN, now=1000)
        item = repo.get(kid)
        assert item.status == ItemStatus.VALID
        assert item.ts_added == 1000
        assert item.ts_validated == 1000
        assert item.meta.usage_count == 0
        assert item.meta.source == Source.HUMAN

    def test_two_adds_same_timepoint_distinct_kids(self):
        repo = make_repo()
        k1 = repo.add_item(rule("a"), Source.HUMAN, now=5)
        k2 = repo.add_item(rule("b"), Source.HUMAN, now=5)
        assert k1 != k2

    def test_add_emits_event(self):
        log = EventLog()
        repo = make_repo(log)
        repo.add_item(rule("r"), Source.LLM_ORACLE, now=7)
        assert len(log) == 1
        assert log.records[0].kind == "kr_mutation"
        assert log.records[0].payload["op"] == "add"

    def test_explicit_kid_duplicate_rejected(self):
        repo = make_repo()
        repo.add_item(rule("a"), Source.HUMAN, now=1, kid="Rule_045")
        with pytest.raises(ContentInvalid):
            repo.add_item(rule("b"), Source.HUMAN, now=1, kid="Rule_045")


class TestTransitions:
    def setup_method(self):
        self.repo = make_repo()
        self.old = self.repo.add_item(rule("Exact pinyin match is required for Chinese names."), Source.HUMAN, 10)
        self.new = self.repo.add_item(rule("Minor pinyin variations acceptable."), Source.HUMAN, 20)

    def test_valid_to_superseded_links_and_updates_ts(self):
        item = self.repo.transition_status(
            self.old, ItemStatus.SUPERSEDED, now=30,
            cause=TransitionCause(relation="supersedes", other_kid=self.new),
        )
        assert item.status == ItemStatus.SUPERSEDED
        assert item.meta.superseded_by == self.new
        assert item.ts_validated == 30

    def test_superseded_is_terminal(self):
        self.repo.transition_status(
            self.old, ItemStatus.SUPERSEDED, 30, TransitionCause(other_kid=self.new)
        )
        for target in ItemStatus:
            with pytest.raises(InvalidTransition):
                self.repo.transition_status(self.old, target, 40, TransitionCause(other_kid=self.new, override=True))

    def test_po_to_valid_requires_override(self):
        self.repo.transition_status(self.old, ItemStatus.POTENTIALLY_OUTDATED, 30, TransitionCause())
        with pytest.raises(InvalidTransition):
            self.repo.transition_status(self.old, ItemStatus.VALID, 40, TransitionCause())
        item = self.repo.transition_status(
            self.old, ItemStatus.VALID, 40, TransitionCause(override=True)
        )
        assert item.status == ItemStatus.VALID
        assert item.ts_validated == 40

    def test_exhaustive_transition_table(self):
        # Every (from, to, override) combination behaves per the lattice.
        allowed = {
            (ItemStatus.VALID, ItemStatus.POTENTIALLY_OUTDATED, False),
            (ItemStatus.VALID, ItemStatus.POTENTIALLY_OUTDATED, True),
            (ItemStatus.VALID, ItemStatus.SUPERSEDED, False),
            (ItemStatus.VALID, ItemStatus.SUPERSEDED, True),
            (ItemStatus.POTENTIALLY_OUTDATED, ItemStatus.SUPERSEDED, False),
            (ItemStatus.POTENTIALLY_OUTDATED, ItemStatus.SUPERSEDED, True),
            (ItemStatus.POTENTIALLY_OUTDATED, ItemStatus.VALID, True),
        }
        for origin in ItemStatus:
            for target in ItemStatus:
                for override in (False, True):
                    repo = make_repo()
                    other = repo.add_item(rule("other"), Source.HUMAN, 0)
                    kid = repo.add_item(rule("subject"), Source.HUMAN, 0)
                    if origin == ItemStatus.POTENTIALLY_OUTDATED:
                        repo.transition_status(kid, ItemStatus.POTENTIALLY_OUTDATED, 1, TransitionCause())
                    elif origin == ItemStatus.SUPERSEDED:
                        repo.transition_status(kid, ItemStatus.SUPERSEDED, 1, TransitionCause(other_kid=other))
                    cause = TransitionCause(other_kid=other, override=override)
                    if (origin, target, override) in allowed:
                        updated = repo.transition_status(kid, target, 2, cause)
                        assert updated.status == target
                    else:
                        with pytest.raises(InvalidTransition):
                            repo.transition_status(kid, target, 2, cause)

    def test_unknown_kid(self):
        with pytest.raises(UnknownKid):
            self.repo.transition_status("nope", ItemStatus.SUPERSEDED, 30, TransitionCause(other_kid=self.new))

    def test_supersede_requires_existing_other(self):
        with pytest.raises(UnknownKid):
            self.repo.transition_status(self.old, ItemStatus.SUPERSEDED, 30, TransitionCause(other_kid="ghost"))

    def test_supersession_cycle_rejected(self):
        self.repo.transition_status(self.old, ItemStatus.SUPERSEDED, 30, TransitionCause(other_kid=self.new))
        with pytest.raises(InvalidTransition):
            self.repo.transition_status(self.new, ItemStatus.SUPERSEDED, 40, TransitionCause(other_kid=self.old))

    def test_clock_skew_rejected(self):
        with pytest.raises(ClockSkew):
            self.repo.transition_status(self.old, ItemStatus.POTENTIALLY_OUTDATED, 5, TransitionCause())


class TestCompositeScore:
    def test_valid_fresh_item_scores_relevance(self):
        repo = make_repo()
        kid = repo.add_item(rule("r"), Source.HUMAN, 100)
        scored = composite_score(repo.get(kid), s_r=0.8, now=100, params=ScoringParams())
        assert scored.composite == pytest.approx(0.8, abs=0)
        assert scored.w_s == 1.0 and scored.s_t == 1.0

    def test_superseded_scores_zero(self):
        repo = make_repo()
        other = repo.add_item(rule("n"), Source.HUMAN, 0)
        kid = repo.add_item(rule("o"), Source.HUMAN, 0)
        repo.transition_status(kid, ItemStatus.SUPERSEDED, 50, TransitionCause(other_kid=other))
        scored = composite_score(repo.get(kid), s_r=1.0, now=10_000, params=ScoringParams())
        assert scored.composite == 0.0

    def test_po_decayed_value(self):
        # w_po=0.5, decay 0.01/day, age 100 days, s_r=1.0 -> 0.5 * e^-1
        repo = make_repo()
        kid = repo.add_item(rule("o"), Source.HUMAN, 0)
        repo.transition_status(kid, ItemStatus.POTENTIALLY_OUTDATED, 0, TransitionCause())
        params = ScoringParams.from_config(w_po=0.5, decay_per_day=0.01)
        scored = composite_score(repo.get(kid), s_r=1.0, now=100 * DAY, params=params)
        assert scored.composite == pytest.approx(0.18393972058572117, rel=1e-12)

    def test_clock_skew(self):
        repo = make_repo()
        kid = repo.add_item(rule("r"), Source.HUMAN, 100)
        with pytest.raises(ClockSkew):
            composite_score(repo.get(kid), 0.5, now=99, params=ScoringParams())

    @given(
        status=st.sampled_from(list(ItemStatus)),
        age=st.integers(min_value=0, max_value=10 * 365 * DAY),
        s_r=st.one_of(st.just(0.0), st.floats(min_value=1e-6, max_value=1.0)),
        w_po=st.one_of(st.just(0.0), st.floats(min_value=1e-6, max_value=1.0)),
        decay_per_day=st.floats(min_value=0.0, max_value=1.0),
    )
    @settings(max_examples=200)
    def test_bounds_property(self, status, age, s_r, w_po, decay_per_day):
        # exp underflows to exactly 0.0 past ~-745; stay where S_T > 0 holds in floats
        assume(decay_per_day / DAY * age < 600.0)
        repo = make_repo()
        other = repo.add_item(rule("n"), Source.HUMAN, 0)
        kid = repo.add_item(rule("o"), Source.HUMAN, 0)
        if status == ItemStatus.POTENTIALLY_OUTDATED:
            repo.transition_status(kid, status, 0, TransitionCause())
        elif status == ItemStatus.SUPERSEDED:
            repo.transition_status(kid, status, 0, TransitionCause(other_kid=other))
        params = ScoringParams.from_config(w_po=w_po, decay_per_day=decay_per_day)
        scored = composite_score(repo.get(kid), s_r, now=age, params=params)
        assert 0.0 <= scored.composite <= s_r + 1e-15
        # zero exactly when superseded or irrelevant (or w_po == 0 for flagged items)
        if scored.composite == 0.0:
            assert status == ItemStatus.SUPERSEDED or s_r == 0.0 or (
                status == ItemStatus.POTENTIALLY_OUTDATED and w_po == 0.0
            )
        assert scored.s_t > 0.0

    def test_monotone_decay(self):
        repo = make_repo()
        kid = repo.add_item(rule("r"), Source.HUMAN, 0)
        params = ScoringParams.from_config(decay_per_day=0.5)
        values = [
            composite_score(repo.get(kid), 0.9, now=t, params=params).composite
            for t in (0, DAY, 2 * DAY, 10 * DAY)
        ]
        assert values == sorted(values, reverse=True)
        assert all(a > b for a, b in zip(values, values[1:]))


def brute_force_rank(items, relevance, now, params):
    """Independent selection oracle: score, sort, truncate/filter."""
    rows = []
    for item in items:
        if item.status == ItemStatus.VALID:
            w = 1.0
        elif item.status == ItemStatus.POTENTIALLY_OUTDATED:
            w = params.w_po
        else:
            w = 0.0
        s_t = math.exp(-params.decay_per_s * (now - item.ts_validated))
        composite = w * s_t * relevance(item.kid)
        rows.append((composite, item))
    rows.sort(key=lambda row: (-row[0], -row[1].ts_validated, row[1].kid))
    if params.mode == "top_n":
        rows = rows[: params.n_top]
    else:
        rows = [row for row in rows if row[0] >= params.tau_score]
    return [(item.kid, composite) for composite, item in rows]


def random_repo(rng: random.Random, size: int, now: int) -> KnowledgeRepository:
    repo = KnowledgeRepository(run_id=f"r{rng.randrange(1000)}")
    kids = []
    for i in range(size):
        added = rng.randrange(0, now + 1)
        kid = repo.add_item(rule(f"rule {i} {rng.random():.3f}"), Source.HUMAN, added)
        kids.append((kid, added))
    for index, (kid, added) in enumerate(kids):
        roll = rng.random()
        t = rng.randrange(added, now + 1)
        if roll < 0.25:
            repo.transition_status(kid, ItemStatus.POTENTIALLY_OUTDATED, t, TransitionCause())
        elif roll < 0.45 and index + 1 < len(kids):
            # point forward only: keeps the supersession graph acyclic
            other = kids[rng.randrange(index + 1, len(kids))][0]
            repo.transition_status(kid, ItemStatus.SUPERSEDED, t, TransitionCause(other_kid=other))
    return repo


class TestRetrieveSubset:
    def test_top_n_example(self):
        # A: fresh Valid s_r=0.5 -> 0.5; B: half-life-aged Valid s_r=0.9 -> 0.45;
        # C: Superseded s_r=1.0 -> 0.0. top_n=2 keeps [A, B].
        repo = make_repo()
        params = ScoringParams.from_config(decay_per_day=0.5, n_top=2)
        half_life_s = int(math.log(2) / params.decay_per_s)
        a = repo.add_item(rule("a"), Source.HUMAN, 1_000_000)
        b = repo.add_item(rule("b"), Source.HUMAN, 1_000_000 - half_life_s)
        winner = repo.add_item(rule("w"), Source.HUMAN, 0)
        c = repo.add_item(rule("c"), Source.HUMAN, 0)
        repo.transition_status(c, ItemStatus.SUPERSEDED, 10, TransitionCause(other_kid=winner))
        rel = {a: 0.5, b: 0.9, winner: 0.0, c: 1.0}
        out = repo.retrieve_subset(lambda kid: rel[kid], now=1_000_000, params=params)
        assert [s.item.kid for s in out] == [a, b]
        assert out[0].composite == pytest.approx(0.5)
        assert out[1].composite == pytest.approx(0.45, rel=1e-4)

    def test_empty_repo(self):
        repo = make_repo()
        assert repo.retrieve_subset(lambda kid: 1.0, now=0, params=ScoringParams()) == []

    def test_threshold_zero_returns_all_non_superseded(self):
        rng = random.Random(3)
        repo = random_repo(rng, 30, now=10_000)
        params = ScoringParams.from_config(tau_score=0.0, mode="threshold")
        out = repo.retrieve_subset(lambda kid: 0.5, now=10_000, params=params)
        # threshold 0.0 admits zero-scored items too: everything comes back
        assert len(out) == len(repo)
        positive = [s for s in out if s.composite > 0]
        non_superseded = [i for i in repo.items() if i.status != ItemStatus.SUPERSEDED]
        assert len(positive) == len(non_superseded)

    def test_usage_count_incremented_only_for_returned(self):
        repo = make_repo()
        a = repo.add_item(rule("a"), Source.HUMAN, 0)
        b = repo.add_item(rule("b"), Source.HUMAN, 0)
        params = ScoringParams.from_config(n_top=1)
        rel = {a: 0.9, b: 0.1}
        repo.retrieve_subset(lambda kid: rel[kid], now=0, params=params)
        assert repo.get(a).meta.usage_count == 1
        assert repo.get(b).meta.usage_count == 0

    def test_matches_brute_force_random_repos(self):
        rng = random.Random(42)
        for _ in range(50):
            now = 50_000
            repo = random_repo(rng, rng.randrange(0, 40), now)
            rel = {kid: rng.random() for kid in repo.kids()}
            mode = rng.choice(["top_n", "threshold"])
            params = ScoringParams.from_config(
                w_po=rng.random(),
                decay_per_day=rng.random() * 5,
                tau_score=rng.random() * 0.5,
                n_top=rng.randrange(1, 10),
                mode=mode,
            )
            expected = brute_force_rank(repo.items(), lambda kid: rel[kid], now, params)
            got = repo.retrieve_subset(lambda kid: rel[kid], now=now, params=params)
            assert [(s.item.kid, s.composite) for s in got] == expected


class TestReplay:
    def test_empty_log_empty_repo(self):
        repo = KnowledgeRepository.replay_from_log([])
        assert len(repo) == 0

    def test_add_and_supersede_replay(self):
        log = EventLog()
        live = KnowledgeRepository(run_id="t", emit=lambda k, p: log.append(k, p, ts=0))
        old = live.add_item(rule("old"), Source.HUMAN, 1)
        new = live.add_item(rule("new"), Source.HUMAN, 2)
        live.transition_status(old, ItemStatus.SUPERSEDED, 3, TransitionCause(other_kid=new))
        live.link_items(new, old, 3)
        live.retrieve_subset(lambda kid: 1.0, now=3, params=ScoringParams())
        replayed = KnowledgeRepository.replay_from_log(log.records, run_id="t")
        assert replayed.serialize_state() == live.serialize_state()
        assert replayed.get(old).status == ItemStatus.SUPERSEDED
        assert replayed.get(old).meta.superseded_by == new

    def test_seq_gap_rejected(self):
        records = [
            EventRecord(seq=1, ts=0, kind="kr_mutation", payload={"op": "usage", "kids": []}),
            EventRecord(seq=3, ts=0, kind="kr_mutation", payload={"op": "usage", "kids": []}),
        ]
        with pytest.raises(NonMonotoneSequence):
            KnowledgeRepository.replay_from_log(records)

    def test_counter_restored_after_replay(self):
        log = EventLog()
        live = KnowledgeRepository(run_id="t", emit=lambda k, p: log.append(k, p, ts=0))
        live.add_item(rule("a"), Source.HUMAN, 1)
        live.add_item(rule("b"), Source.HUMAN, 1)
        replayed = KnowledgeRepository.replay_from_log(log.records, run_id="t")
        fresh = replayed.add_item(rule("c"), Source.HUMAN, 2)
        assert fresh not in {k for k in log.records[0].payload["item"]["kid"]}
        assert len(replayed) == 3
