"""Evidence-gated restructuring: diagnostic artifacts and the single bounded edit.

The decision operator returns exactly one of keep/add/merge-remove/modify
per round, and anything other than keep must carry evidence that
re-evaluates true on the recorded values.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .config import EngineConfig
from .evolution import SkillDelta, diagnose
from .model import (
    BoundedTag,
    Executor,
    Pair,
    Skill,
    SkillStatus,
    StateError,
    UtilityTable,
    skill_similarity,
)
from .numfmt import q12
from .retention import RetainedTrace


@dataclass(frozen=True)
class ExecutorEvidence:
    id: str
    value: float
    count: int


@dataclass(frozen=True)
class DiagnosticArtifact:
    """Structural evidence for one task family with retained failures."""

    task_type: str
    failure_mass: int
    implicated_executors: tuple[ExecutorEvidence, ...]
    utility_gap: float
    overlap: float
    pending_actions: tuple[str, ...]
    failing_pairs: tuple[Pair, ...]
    handoff_present: bool


@dataclass(frozen=True)
class RestructureDecision:
    action: str  # keep | add | merge-remove | modify
    subjects: tuple[str, ...] = ()
    new_boundary: frozenset[Pair] | None = None
    transferred_skills: tuple[str, ...] = ()
    evidence: dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.action != "keep" and not self.evidence:
            raise StateError("a non-keep decision requires evidence")


def _executor_tokens(executor: Executor, library: Mapping[str, Skill]) -> frozenset[str]:
    tokens: set[str] = set()
    for sid in executor.owned_skills:
        skill = library.get(sid)
        if skill is not None and skill.status is not SkillStatus.PRUNED:
            tokens.update(skill.tokens())
    return frozenset(tokens)


def _token_overlap(a: frozenset[str], b: frozenset[str]) -> float:
    union = a | b
    if not union:
        return 0.0
    return len(a & b) / len(union)


def _failing_pair(trace) -> Pair | None:
    phases = trace.task_type.phases
    completed = round(trace.progress * len(phases))
    if completed == len(trace.slices):
        # every attempted phase succeeded: the next one could not be routed
        index = len(trace.slices)
        return (trace.task_type.id, phases[index]) if index < len(phases) else None
    if trace.slices:
        return (trace.task_type.id, trace.slices[-1].phase)
    return None


def build_artifacts(
    retained: Sequence[RetainedTrace],
    library: Mapping[str, Skill],
    executors: Mapping[str, Executor],
    q_exec_plus: UtilityTable,
    skill_delta: SkillDelta,
    config: EngineConfig,
) -> list[DiagnosticArtifact]:
    """One artifact per task family holding retained failures.

    Failure mass excludes failures whose proposals already became a pending
    create or refine this round, so restructuring only sees what skill
    repair leaves unaddressed.
    """
    addressed = skill_delta.source_traces(("create", "refine"))
    failures: dict[str, list[RetainedTrace]] = {}
    for rt in retained:
        if rt.trace.outcome == 0:
            failures.setdefault(rt.trace.task_type.id, []).append(rt)

    artifacts = []
    for task_id in sorted(failures):
        family = failures[task_id]
        mass = sum(1 for rt in family if rt.trace.episode_id not in addressed)

        implicated_ids = sorted(
            {
                rt.trace.slices[-1].executor
                for rt in family
                if rt.trace.slices
            }
        )
        implicated = tuple(
            ExecutorEvidence(
                id=eid,
                value=q12(q_exec_plus.value(eid, task_id)),
                count=q_exec_plus.count(eid, task_id),
            )
            for eid in implicated_ids
        )

        confident = [
            e.value for e in implicated if e.count >= config.min_count
        ]
        gap = q12(max(confident) - min(confident)) if len(confident) >= 2 else 0.0

        token_sets = {
            eid: _executor_tokens(executors[eid], library)
            for eid in implicated_ids
            if eid in executors
        }
        overlap = 0.0
        for a, b in itertools.combinations(sorted(token_sets), 2):
            overlap = max(overlap, _token_overlap(token_sets[a], token_sets[b]))

        pending = tuple(
            f"{a.action}:{','.join(a.skills)}"
            for a in skill_delta.actions
            if a.task_type == task_id
        )
        failing_pairs = tuple(
            sorted({p for rt in family if (p := _failing_pair(rt.trace)) is not None})
        )
        handoff = any(
            diagnose(rt).tag is BoundedTag.HANDOFF_TO_STRUCTURE for rt in family
        )
        artifacts.append(
            DiagnosticArtifact(
                task_type=task_id,
                failure_mass=mass,
                implicated_executors=implicated,
                utility_gap=gap,
                overlap=q12(overlap),
                pending_actions=pending,
                failing_pairs=failing_pairs,
                handoff_present=handoff,
            )
        )
    return artifacts


def decide_restructure(
    artifacts: Sequence[DiagnosticArtifact],
    executors: Mapping[str, Executor],
    q_exec_plus: UtilityTable,
    config: EngineConfig,
    *,
    round_index: int = 0,
    library: Mapping[str, Skill] | None = None,
) -> RestructureDecision:
    """Evaluate the restructuring predicates in fixed priority.

    (1) add a specialist: a family's unaddressed failure mass meets the
    threshold, every implicated executor is demonstrably weak there, and the
    failures include structural handoffs; (2) merge two redundant
    non-manager executors with overlapping boundaries, near-identical skill
    content, and indistinguishable utility on every shared family;
    (3) modify an over-capacity executor with a demonstrably weak family by
    narrowing its boundary; otherwise (4) keep.
    """
    library = library or {}

    # (1) add
    for artifact in artifacts:
        if artifact.failure_mass < config.mass_threshold:
            continue
        if not artifact.implicated_executors or not artifact.handoff_present:
            continue
        if not all(
            e.count >= config.min_count and e.value < config.weak_executor_utility
            for e in artifact.implicated_executors
        ):
            continue
        if not artifact.failing_pairs:
            continue
        boundary = frozenset(artifact.failing_pairs)
        new_id = f"exec-{artifact.task_type}-r{round_index}"
        transferred = tuple(
            sorted(
                s.id
                for s in library.values()
                if s.status is SkillStatus.VALIDATED and s.applicability & boundary
            )
        )
        return RestructureDecision(
            action="add",
            subjects=(new_id,),
            new_boundary=boundary,
            transferred_skills=transferred,
            evidence={
                "predicate": "add",
                "task_type": artifact.task_type,
                "failure_mass": artifact.failure_mass,
                "mass_threshold": config.mass_threshold,
                "executors": [
                    {"id": e.id, "value": e.value, "count": e.count}
                    for e in artifact.implicated_executors
                ],
                "weak_utility": config.weak_executor_utility,
                "min_count": config.min_count,
                "handoff_present": True,
            },
        )

    # (2) merge-remove
    workers = sorted(eid for eid, e in executors.items() if not e.is_manager)
    for a_id, b_id in itertools.combinations(workers, 2):
        a, b = executors[a_id], executors[b_id]
        if not a.boundary & b.boundary:
            continue
        overlap = _token_overlap(
            _executor_tokens(a, library), _executor_tokens(b, library)
        )
        if overlap < config.overlap_threshold:
            continue
        shared_families = sorted(
            {p[0] for p in a.boundary} & {p[0] for p in b.boundary}
        )
        gaps = {}
        comparable = True
        for task_id in shared_families:
            ea, eb = q_exec_plus.get(a_id, task_id), q_exec_plus.get(b_id, task_id)
            if (
                ea is None
                or eb is None
                or ea[1] < config.min_count
                or eb[1] < config.min_count
            ):
                comparable = False
                break
            gaps[task_id] = q12(abs(ea[0] - eb[0]))
        if not comparable or not gaps:
            continue
        if all(gap < config.merge_gap for gap in gaps.values()):
            return RestructureDecision(
                action="merge-remove",
                subjects=(a_id, b_id),
                evidence={
                    "predicate": "merge-remove",
                    "survivor": a_id,
                    "removed": b_id,
                    "skill_overlap": q12(overlap),
                    "overlap_threshold": config.overlap_threshold,
                    "utility_gaps": gaps,
                    "merge_gap": config.merge_gap,
                },
            )

    # (3) modify
    for eid in sorted(executors):
        executor = executors[eid]
        if executor.is_manager:
            continue
        owned_active = sum(
            1
            for sid in executor.owned_skills
            if sid in library and library[sid].status is not SkillStatus.PRUNED
        )
        if owned_active <= executor.capacity:
            continue
        families = sorted({p[0] for p in executor.boundary})
        for task_id in families:
            entry = q_exec_plus.get(eid, task_id)
            if entry is None or entry[1] < config.min_count:
                continue
            if entry[0] >= config.weak_executor_utility:
                continue
            new_boundary = frozenset(
                p for p in executor.boundary if p[0] != task_id
            )
            if not new_boundary:
                continue
            transferred = tuple(
                sorted(
                    sid
                    for sid in executor.owned_skills
                    if sid in library
                    and library[sid].status is not SkillStatus.PRUNED
                    and not (library[sid].applicability & new_boundary)
                )
            )
            return RestructureDecision(
                action="modify",
                subjects=(eid,),
                new_boundary=new_boundary,
                transferred_skills=transferred,
                evidence={
                    "predicate": "modify",
                    "executor": eid,
                    "owned_skills": owned_active,
                    "capacity": executor.capacity,
                    "weak_family": task_id,
                    "utility": q12(entry[0]),
                    "count": entry[1],
                    "weak_utility": config.weak_executor_utility,
                    "min_count": config.min_count,
                },
            )

    return RestructureDecision(action="keep")


def evidence_holds(decision: RestructureDecision) -> bool:
    """Re-evaluate a decision's firing predicate on its recorded values."""
    ev = decision.evidence
    if decision.action == "keep":
        return not ev
    predicate = ev.get("predicate")
    if predicate == "add":
        return (
            ev["failure_mass"] >= ev["mass_threshold"]
            and bool(ev["handoff_present"])
            and bool(ev["executors"])
            and all(
                e["count"] >= ev["min_count"] and e["value"] < ev["weak_utility"]
                for e in ev["executors"]
            )
        )
    if predicate == "merge-remove":
        return ev["skill_overlap"] >= ev["overlap_threshold"] and bool(
            ev["utility_gaps"]
        ) and all(gap < ev["merge_gap"] for gap in ev["utility_gaps"].values())
    if predicate == "modify":
        return (
            ev["owned_skills"] > ev["capacity"]
            and ev["count"] >= ev["min_count"]
            and ev["utility"] < ev["weak_utility"]
        )
    return False


def apply_restructure(
    library: Mapping[str, Skill],
    executors: Mapping[str, Executor],
    pool: Mapping[str, tuple[int, int]],
    q_skill: UtilityTable,
    decision: RestructureDecision,
    config: EngineConfig,
) -> tuple[
    dict[str, Skill], dict[str, Executor], dict[str, tuple[int, int]], list[str]
]:
    """Apply the single bounded edit, transferring skill ownership as needed.

    Merges consolidate near-duplicate owned skills down to the higher-utility
    copy; modify hands out-of-boundary skills to the manager.  The manager
    can never be removed.
    """
    lib = dict(library)
    execs = dict(executors)
    new_pool = dict(pool)
    log: list[str] = []

    manager_id = next(eid for eid, e in execs.items() if e.is_manager)

    def reassign(skill_id: str, new_owner: str) -> None:
        skill = lib[skill_id]
        old_owner = execs.get(skill.owner)
        if old_owner is not None and skill_id in old_owner.owned_skills:
            execs[skill.owner] = dataclasses.replace(
                old_owner, owned_skills=old_owner.owned_skills - {skill_id}
            )
        lib[skill_id] = dataclasses.replace(skill, owner=new_owner)
        target = execs[new_owner]
        execs[new_owner] = dataclasses.replace(
            target, owned_skills=target.owned_skills | {skill_id}
        )

    if decision.action == "keep":
        return lib, execs, new_pool, log

    if decision.action == "add":
        new_id = decision.subjects[0]
        if new_id in execs:
            raise StateError(f"executor id {new_id!r} would be reused")
        assert decision.new_boundary is not None
        execs[new_id] = Executor(
            id=new_id,
            boundary=decision.new_boundary,
            owned_skills=frozenset(),
            capacity=config.default_capacity,
        )
        for sid in decision.transferred_skills:
            reassign(sid, new_id)
            log.append(f"transferred {sid} to {new_id}")

    elif decision.action == "merge-remove":
        survivor_id, removed_id = sorted(decision.subjects)
        if execs[removed_id].is_manager or execs[survivor_id].is_manager:
            raise StateError("the manager executor cannot be merged away")
        survivor = execs[survivor_id]
        removed = execs.pop(removed_id)
        execs[survivor_id] = dataclasses.replace(
            survivor,
            boundary=survivor.boundary | removed.boundary,
            owned_skills=survivor.owned_skills | removed.owned_skills,
        )
        for sid in sorted(removed.owned_skills):
            lib[sid] = dataclasses.replace(lib[sid], owner=survivor_id)
            log.append(f"transferred {sid} to {survivor_id}")

        # consolidate near-duplicates down to the higher-utility copy
        owned = sorted(
            sid
            for sid in execs[survivor_id].owned_skills
            if lib[sid].status is not SkillStatus.PRUNED
        )
        def best_utility(sid: str) -> float:
            values = [v for (key, _), (v, _) in q_skill.entries.items() if key == sid]
            return max(values) if values else 0.5

        dropped: set[str] = set()
        for a_id, b_id in itertools.combinations(owned, 2):
            if a_id in dropped or b_id in dropped:
                continue
            if skill_similarity(lib[a_id], lib[b_id]) < config.dedup_similarity:
                continue
            keep_id, drop_id = a_id, b_id
            if (best_utility(b_id), a_id) > (best_utility(a_id), b_id):
                keep_id, drop_id = b_id, a_id
            lib[drop_id] = dataclasses.replace(lib[drop_id], status=SkillStatus.PRUNED)
            new_pool.pop(drop_id, None)
            dropped.add(drop_id)
            log.append(f"consolidated {drop_id} into {keep_id}")
        if dropped:
            survivor = execs[survivor_id]
            execs[survivor_id] = dataclasses.replace(
                survivor, owned_skills=survivor.owned_skills - dropped
            )

    elif decision.action == "modify":
        eid = decision.subjects[0]
        executor = execs[eid]
        if executor.is_manager:
            raise StateError("the manager boundary cannot be narrowed")
        assert decision.new_boundary is not None
        execs[eid] = dataclasses.replace(executor, boundary=decision.new_boundary)
        for sid in decision.transferred_skills:
            reassign(sid, manager_id)
            log.append(f"transferred {sid} to {manager_id}")
    else:
        raise StateError(f"unknown restructuring action {decision.action!r}")

    if not any(e.is_manager for e in execs.values()):
        raise StateError("restructuring removed the manager executor")
    return lib, execs, new_pool, log
