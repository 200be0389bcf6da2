from __future__ import annotations

import pytest

from skillmas.config import EngineConfig
from skillmas.evolution import (
    Diagnosis,
    Proposal,
    SkillDelta,
    apply_skill_delta,
    diagnose,
    promote_pool,
    propose,
    retrieve_policy_cards,
    skill_evolve,
    update_pool_counters,
)
from skillmas.model import (
    BoundedTag,
    CauseLabel,
    CauseObservation,
    EpisodeTrace,
    ExecutorSlice,
    PolicyCard,
    SkillStatus,
    TaskType,
    UtilityTable,
)
from skillmas.retention import RetainedTrace, RetentionCategory
from skillmas.world import LatentSkill, Scenario, motif_skill, realized_catalog

from conftest import make_skill, make_state

TASK = TaskType("t1", ("p1", "p2"))


def scenario_with(latents=()):
    return Scenario(
        name="evo",
        task_types=(TASK,),
        task_weights={"t1": 1.0},
        base_difficulty={},
        latent_catalog=tuple(latents),
    )


def retained_failure(cause, confident=True, selected=("sk",), invoked=("sk",),
                     phase="p1", episode_id="e0", executor="worker"):
    obs = CauseObservation(cause, confident)
    slices = (
        ExecutorSlice(executor, phase, frozenset(selected), frozenset(invoked),
                      frozenset()),
    )
    trace = EpisodeTrace(episode_id, TASK, slices, 0, 0.0, obs)
    return RetainedTrace(trace, frozenset({RetentionCategory.REPEATED_FAILURE}))


def retained_success(selected=("sk",), invoked=("sk",), phase="p1",
                     episode_id="e0", executor="worker"):
    slices = (
        ExecutorSlice(executor, phase, frozenset(selected), frozenset(invoked),
                      frozenset()),
    )
    trace = EpisodeTrace(episode_id, TASK, slices, 1, 1.0)
    return RetainedTrace(trace, frozenset({RetentionCategory.REUSABLE_SUCCESS}))


class TestDiagnose:
    def test_confident_missing_precondition(self):
        d = diagnose(retained_failure(CauseLabel.MISSING_PRECONDITION))
        assert d == Diagnosis(CauseLabel.MISSING_PRECONDITION, True, BoundedTag.ADD_GUARD)
        assert d.locally_diagnosable

    def test_unconfident_observation_is_unknown(self):
        d = diagnose(retained_failure(CauseLabel.MISSING_PRECONDITION, confident=False))
        assert d == Diagnosis(CauseLabel.UNKNOWN, False, BoundedTag.NONE)
        assert not d.locally_diagnosable

    def test_bad_assignment_hands_off_to_structure(self):
        d = diagnose(retained_failure(CauseLabel.BAD_EXECUTOR_ASSIGNMENT))
        assert d.tag is BoundedTag.HANDOFF_TO_STRUCTURE
        assert d.unique
        assert not d.locally_diagnosable  # excluded from local repair

    def test_success_trace_is_contract_violation(self):
        with pytest.raises(ValueError):
            diagnose(retained_success())

    def test_full_tag_table(self):
        expected = {
            CauseLabel.MISSING_PRECONDITION: BoundedTag.ADD_GUARD,
            CauseLabel.WRONG_ACTION_ORDER: BoundedTag.REORDER_STEP,
            CauseLabel.MISLEADING_RETRIEVAL: BoundedTag.TIGHTEN_RETRIEVAL,
            CauseLabel.SKILL_CONFLICT: BoundedTag.SPLIT_SKILL,
            CauseLabel.BAD_EXECUTOR_ASSIGNMENT: BoundedTag.HANDOFF_TO_STRUCTURE,
        }
        for cause, tag in expected.items():
            assert diagnose(retained_failure(cause)).tag is tag


class TestPolicyCards:
    def card(self, ident, cause=CauseLabel.MISSING_PRECONDITION, task="t1"):
        return PolicyCard(ident, cause, task, BoundedTag.ADD_GUARD)

    def test_empty_index(self):
        assert retrieve_policy_cards((), "t1", CauseLabel.MISSING_PRECONDITION) == []

    def test_two_matches_sorted(self):
        cards = (self.card("b"), self.card("a"))
        out = retrieve_policy_cards(cards, "t1", CauseLabel.MISSING_PRECONDITION)
        assert [c.id for c in out] == ["a", "b"]

    def test_truncated_to_three(self):
        cards = tuple(self.card(f"c{i}") for i in range(5))
        out = retrieve_policy_cards(cards, "t1", CauseLabel.MISSING_PRECONDITION)
        assert [c.id for c in out] == ["c0", "c1", "c2"]

    def test_exact_match_filter(self):
        cards = (
            self.card("a"),
            self.card("b", cause=CauseLabel.SKILL_CONFLICT),
            self.card("c", task="t9"),
        )
        out = retrieve_policy_cards(cards, "t1", CauseLabel.MISSING_PRECONDITION)
        assert [c.id for c in out] == ["a"]


class TestPropose:
    def test_non_diagnosable_failure_yields_nothing(self):
        rt = retained_failure(CauseLabel.MISSING_PRECONDITION, confident=False)
        library = {"sk": make_skill("sk")}
        out = propose(rt, diagnose(rt), (), scenario_with(), library, 0, EngineConfig())
        assert out is None

    def test_handoff_yields_nothing(self):
        rt = retained_failure(CauseLabel.BAD_EXECUTOR_ASSIGNMENT)
        library = {"sk": make_skill("sk")}
        out = propose(rt, diagnose(rt), (), scenario_with(), library, 0, EngineConfig())
        assert out is None

    def test_add_guard_repair_realizes_matching_latent(self):
        latent = LatentSkill("lat-a", ("t1", "p1"), 2.0, CauseLabel.MISSING_PRECONDITION)
        scenario = scenario_with([latent])
        library = {"sk": make_skill("sk", pairs=(("t1", "p1"),))}
        rt = retained_failure(CauseLabel.MISSING_PRECONDITION)
        card = PolicyCard("pc", CauseLabel.MISSING_PRECONDITION, "t1",
                          BoundedTag.ADD_GUARD, template_skill="lat-a")
        out = propose(rt, diagnose(rt), (card,), scenario, library, 1, EngineConfig())
        assert out is not None and out.edit is not None
        assert out.edit.tag is BoundedTag.ADD_GUARD
        # the guard token carries the latent whose repairs_cause matched
        assert f"require:{latent.id}" in out.edit.guards
        assert latent.id in out.edit.steps
        # applying the edit makes the skill realize the latent
        edited = make_skill("sk", pairs=(("t1", "p1"),), steps=out.edit.steps,
                            guards=out.edit.guards)
        assert realized_catalog(scenario, {"sk": edited})[0].realized_by == "sk"

    def test_success_motif_realizes_undiscovered_latent(self):
        latent = LatentSkill("lat-b", ("t1", "p1"), 2.0, CauseLabel.MISSING_PRECONDITION)
        scenario = scenario_with([latent])
        library = {"sk": make_skill("sk", pairs=(("t1", "p1"),))}
        rt = retained_success()
        out = propose(rt, None, (), scenario, library, 2, EngineConfig())
        assert out is not None and out.kind == "success-motif"
        draft = out.drafts[0]
        assert draft.applicability == frozenset({("t1", "p1")})
        assert draft.status is SkillStatus.POOLED
        assert draft.owner == "worker"
        resolved = realized_catalog(scenario, {**library, draft.id: draft})
        assert resolved[0].realized_by == draft.id

    def test_success_with_pooled_skill_suppressed(self):
        latent = LatentSkill("lat-c", ("t1", "p1"), 2.0, CauseLabel.MISSING_PRECONDITION)
        scenario = scenario_with([latent])
        library = {"sk": make_skill("sk", status=SkillStatus.POOLED)}
        rt = retained_success()
        assert propose(rt, None, (), scenario, library, 0, EngineConfig()) is None

    def test_success_with_realized_latent_yields_nothing(self):
        latent = LatentSkill("lat-d", ("t1", "p1"), 2.0, CauseLabel.MISSING_PRECONDITION)
        scenario = scenario_with([latent])
        realizer = make_skill("sk", pairs=(("t1", "p1"),), steps=("lat-d",))
        rt = retained_success()
        assert propose(rt, None, (), scenario, {"sk": realizer}, 0, EngineConfig()) is None

    def test_split_partitions_applicability(self):
        wide = make_skill("wide", pairs=(("t1", "p1"), ("t1", "p2")))
        rt = retained_failure(CauseLabel.SKILL_CONFLICT, selected=("wide",),
                              invoked=("wide",))
        out = propose(rt, diagnose(rt), (), scenario_with(), {"wide": wide}, 3,
                      EngineConfig())
        assert out is not None
        assert len(out.drafts) == 2
        halves = [d.applicability for d in out.drafts]
        assert halves[0] | halves[1] == wide.applicability
        assert not halves[0] & halves[1]
        assert all(d.status is SkillStatus.POOLED for d in out.drafts)

    def test_tighten_retrieval_narrows_interfering_skill(self):
        noisy = make_skill("noisy", pairs=(("t1", "p1"), ("t1", "p2")))
        rt = retained_failure(CauseLabel.MISLEADING_RETRIEVAL, selected=("noisy",),
                              invoked=("noisy",))
        out = propose(rt, diagnose(rt), (), scenario_with(), {"noisy": noisy}, 0,
                      EngineConfig())
        assert out is not None and out.edit is not None
        assert out.edit.applicability == frozenset({("t1", "p2")})


class TestSkillEvolve:
    def test_no_proposals_empty_delta(self):
        delta = skill_evolve((), {}, (), UtilityTable(), EngineConfig())
        assert delta == SkillDelta(())

    def test_duplicate_create_becomes_no_op(self):
        latent = LatentSkill("lat-e", ("t1", "p1"), 2.0, CauseLabel.MISSING_PRECONDITION)
        existing = motif_skill(latent, "existing", "worker")
        existing = type(existing)(
            id="existing", applicability=existing.applicability, steps=existing.steps,
            guards=existing.guards, checks=existing.checks,
            status=SkillStatus.VALIDATED, owner="worker",
        )
        draft = motif_skill(latent, "lat-e-r1", "worker")
        proposal = Proposal(
            kind="success-motif", source_trace="e0", target_cluster="existing",
            task_type="t1", drafts=(draft,),
        )
        delta = skill_evolve(
            (proposal,), {"existing": existing}, (), UtilityTable(), EngineConfig()
        )
        assert [a.action for a in delta.actions] == ["no-op"]

    def test_partial_overlap_above_threshold_still_deduped(self):
        # similarity 5/6 ~= 0.83: above the 0.8 bar without being identical
        from skillmas.model import skill_similarity

        existing = make_skill("old", steps=("a", "b", "c", "d", "e"),
                              status=SkillStatus.VALIDATED)
        draft = make_skill("new", steps=("a", "b", "c", "d", "e", "f"),
                           status=SkillStatus.POOLED)
        assert 0.8 <= skill_similarity(existing, draft) < 1.0
        proposal = Proposal(
            kind="success-motif", source_trace="e0", target_cluster="old",
            task_type="t1", drafts=(draft,),
        )
        delta = skill_evolve((proposal,), {"old": existing}, (), UtilityTable(),
                             EngineConfig())
        assert [a.action for a in delta.actions] == ["no-op"]

    def test_template_dedup(self):
        latent = LatentSkill("lat-f", ("t1", "p1"), 2.0, CauseLabel.MISSING_PRECONDITION)
        card = PolicyCard("pc", CauseLabel.MISSING_PRECONDITION, "t1",
                          BoundedTag.ADD_GUARD, template_skill="lat-f")
        draft = motif_skill(latent, "lat-f-r0", "worker")
        proposal = Proposal(
            kind="success-motif", source_trace="e0", target_cluster=f"new:{draft.id}",
            task_type="t1", drafts=(draft,),
        )
        delta = skill_evolve((proposal,), {}, (card,), UtilityTable(), EngineConfig())
        assert [a.action for a in delta.actions] == ["no-op"]

    def test_low_utility_cluster_pruned(self):
        bad = make_skill("bad")
        q = UtilityTable({("bad", "t1"): (0.1, 8)})
        proposal = Proposal(
            kind="failure-repair", source_trace="e0", target_cluster="bad",
            task_type="t1", cause=CauseLabel.MISSING_PRECONDITION,
            edit=None,
        )
        # a refine proposal on the same cluster loses to the prune predicate
        from skillmas.evolution import SkillEdit

        proposal = Proposal(
            kind="failure-repair", source_trace="e0", target_cluster="bad",
            task_type="t1", cause=CauseLabel.MISSING_PRECONDITION,
            edit=SkillEdit(BoundedTag.ADD_GUARD, "bad", bad.steps,
                           bad.guards | {"require:x"}, bad.checks, bad.applicability),
        )
        delta = skill_evolve((proposal,), {"bad": bad}, (), q, EngineConfig())
        assert [a.action for a in delta.actions] == ["prune"]
        assert "conflicting candidates" in delta.actions[0].note

    def test_heavy_rewrite_held_in_pool(self):
        skill = make_skill("sk", steps=("a", "b"))
        from skillmas.evolution import SkillEdit

        edit = SkillEdit(
            BoundedTag.ADD_GUARD, "sk", ("a", "b", "x", "y"),
            frozenset({"g1", "g2"}), frozenset(), skill.applicability,
        )
        proposal = Proposal(
            kind="failure-repair", source_trace="e0", target_cluster="sk",
            task_type="t1", cause=CauseLabel.MISSING_PRECONDITION, edit=edit,
        )
        delta = skill_evolve((proposal,), {"sk": skill}, (), UtilityTable(),
                             EngineConfig())
        assert [a.action for a in delta.actions] == ["hold-in-pool"]

    def test_per_cluster_action_bound(self):
        skill = make_skill("sk", steps=("a", "b", "c", "d"))
        from skillmas.evolution import SkillEdit

        light = SkillEdit(BoundedTag.ADD_GUARD, "sk", skill.steps,
                          frozenset({"require:x"}), frozenset(), skill.applicability)
        proposals = [
            Proposal(kind="failure-repair", source_trace=f"e{i}", target_cluster="sk",
                     task_type="t1", cause=CauseLabel.MISSING_PRECONDITION, edit=light)
            for i in range(4)
        ]
        delta = skill_evolve(proposals, {"sk": skill}, (), UtilityTable(),
                             EngineConfig())
        assert len(delta.actions) == 1
        clusters = [a.cluster for a in delta.actions]
        assert len(clusters) == len(set(clusters))

    def test_demotion_after_drop_claims_cluster(self):
        edited = make_skill("sk", status=SkillStatus.VALIDATED)
        delta = skill_evolve(
            (), {"sk": edited}, (), UtilityTable(), EngineConfig(),
            last_round_drop=True, last_round_edits=frozenset({"sk"}),
        )
        assert [a.action for a in delta.actions] == ["hold-in-pool"]
        assert delta.actions[0].skills == ("sk",)


class TestApplyDelta:
    def test_create_adds_pooled_skill_with_ownership(self):
        state = make_state([])
        draft = make_skill("new", status=SkillStatus.POOLED, owner="worker")
        from skillmas.evolution import SkillAction

        delta = SkillDelta(
            (SkillAction(cluster="new:new", action="create", skills=("new",),
                         new_skills=(draft,)),)
        )
        lib, execs, pool = apply_skill_delta(
            state.library, state.executors, state.pool, delta
        )
        assert lib["new"].status is SkillStatus.POOLED
        assert "new" in execs["worker"].owned_skills
        assert pool["new"] == (0, 0)

    def test_id_reuse_rejected(self):
        state = make_state([make_skill("sk")])
        from skillmas.evolution import SkillAction

        delta = SkillDelta(
            (SkillAction(cluster="sk", action="create", skills=("sk",),
                         new_skills=(make_skill("sk"),)),)
        )
        with pytest.raises(Exception):
            apply_skill_delta(state.library, state.executors, state.pool, delta)

    def test_prune_removes_ownership_and_pool_entry(self):
        pooled = make_skill("sk", status=SkillStatus.POOLED)
        state = make_state([pooled], pool={"sk": (2, 0)})
        from skillmas.evolution import SkillAction

        delta = SkillDelta(
            (SkillAction(cluster="sk", action="prune", skills=("sk",)),)
        )
        lib, execs, pool = apply_skill_delta(
            state.library, state.executors, state.pool, delta
        )
        assert lib["sk"].status is SkillStatus.PRUNED
        assert "sk" not in execs["worker"].owned_skills
        assert "sk" not in pool


class TestPoolLifecycle:
    def test_counters_respect_used_gating(self):
        pooled = make_skill("pk", status=SkillStatus.POOLED)
        library = {"pk": pooled, "other": make_skill("other")}
        selected_only = EpisodeTrace(
            "e0", TASK,
            (ExecutorSlice("w", "p1", frozenset({"pk", "other"}),
                           frozenset({"other"}), frozenset()),),
            1, 1.0,
        )
        used = EpisodeTrace(
            "e1", TASK,
            (ExecutorSlice("w", "p1", frozenset({"pk"}), frozenset({"pk"}),
                           frozenset()),),
            1, 1.0,
        )
        pool = update_pool_counters({"pk": (0, 0)}, library, [selected_only, used])
        assert pool["pk"] == (1, 1)

    def test_promotion_at_threshold(self):
        pooled = make_skill("pk", status=SkillStatus.POOLED)
        state = make_state([pooled], pool={"pk": (3, 3)})
        lib, pool, execs, outcomes = promote_pool(
            state.library, state.pool, state.executors, EngineConfig()
        )
        assert lib["pk"].status is SkillStatus.VALIDATED
        assert "pk" not in pool
        assert outcomes == [("pk", "validated")]

    def test_prune_at_threshold(self):
        pooled = make_skill("pk", status=SkillStatus.POOLED)
        state = make_state([pooled], pool={"pk": (5, 1)})
        lib, pool, execs, outcomes = promote_pool(
            state.library, state.pool, state.executors, EngineConfig()
        )
        assert lib["pk"].status is SkillStatus.PRUNED
        assert "pk" not in execs["worker"].owned_skills
        assert outcomes == [("pk", "pruned")]

    def test_insufficient_evidence_stays_pooled(self):
        pooled = make_skill("pk", status=SkillStatus.POOLED)
        state = make_state([pooled], pool={"pk": (2, 2)})
        lib, pool, execs, outcomes = promote_pool(
            state.library, state.pool, state.executors, EngineConfig()
        )
        assert lib["pk"].status is SkillStatus.POOLED
        assert pool["pk"] == (2, 2)
        assert outcomes == []
