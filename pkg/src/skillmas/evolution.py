"""Bounded skill evolution: diagnosis, per-trace proposals, consolidation, pool lifecycle.

Each retained trace yields at most one proposal; consolidation applies at
most one action per implicated skill cluster per round; new or heavily
rewritten skills sit in the validation pool until usage evidence promotes
or prunes them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Sequence

from .config import EngineConfig
from .model import (
    BoundedTag,
    CauseLabel,
    Executor,
    PolicyCard,
    REPAIR_TAGS,
    Skill,
    SkillStatus,
    StateError,
    TAG_BY_CAUSE,
    UtilityTable,
    cluster_key_map,
    skill_similarity,
)
from .retention import RetainedTrace
from .utility import used_skills
from .world import LatentSkill, Scenario, motif_skill, realized_catalog


@dataclass(frozen=True)
class Diagnosis:
    """Bounded diagnosability of a retained failure: cause, uniqueness, tag."""

    cause: CauseLabel
    unique: bool
    tag: BoundedTag

    @property
    def locally_diagnosable(self) -> bool:
        return self.unique and self.tag in REPAIR_TAGS


def diagnose(retained: RetainedTrace) -> Diagnosis:
    """Map a retained failure to (cause, uniqueness, bounded tag)."""
    trace = retained.trace
    if trace.outcome != 0:
        raise ValueError("diagnosis applies to failure traces only")
    obs = trace.latent_cause_observation
    cause = obs.cause if obs is not None and obs.confident else CauseLabel.UNKNOWN
    unique = bool(obs is not None and obs.confident)
    return Diagnosis(cause=cause, unique=unique, tag=TAG_BY_CAUSE[cause])


def retrieve_policy_cards(
    policy_index: Sequence[PolicyCard], task_id: str, cause: CauseLabel
) -> list[PolicyCard]:
    """Up to three repair priors matching (task type, cause), by id."""
    matches = sorted(
        (c for c in policy_index if c.task_type == task_id and c.cause == cause),
        key=lambda c: c.id,
    )
    return matches[:3]


@dataclass(frozen=True)
class SkillEdit:
    """A bounded token change to one existing skill."""

    tag: BoundedTag
    target: str
    steps: tuple[str, ...]
    guards: frozenset[str]
    checks: frozenset[str]
    applicability: frozenset[tuple[str, str]]


@dataclass(frozen=True)
class Proposal:
    """At most one per retained trace: a success motif or a failure repair."""

    kind: str  # "success-motif" | "failure-repair"
    source_trace: str
    target_cluster: str
    task_type: str
    cause: CauseLabel | None = None
    drafts: tuple[Skill, ...] = ()
    edit: SkillEdit | None = None


@dataclass(frozen=True)
class SkillAction:
    cluster: str
    action: str  # create | refine | prune | hold-in-pool | no-op
    skills: tuple[str, ...]
    source_trace: str | None = None
    task_type: str | None = None
    cause: str | None = None
    note: str = ""
    new_skills: tuple[Skill, ...] = ()
    edit: SkillEdit | None = None


@dataclass(frozen=True)
class SkillDelta:
    actions: tuple[SkillAction, ...] = ()

    def edited_skill_ids(self) -> frozenset[str]:
        """Skills created or rewritten this round (the penalty rule's targets)."""
        ids: set[str] = set()
        for action in self.actions:
            if action.action in ("create", "refine", "hold-in-pool"):
                ids.update(action.skills)
        return frozenset(ids)

    def source_traces(self, actions: tuple[str, ...] = ("create", "refine")) -> frozenset[str]:
        return frozenset(
            a.source_trace
            for a in self.actions
            if a.action in actions and a.source_trace
        )


def _edit_from_skill(tag: BoundedTag, skill: Skill) -> SkillEdit:
    return SkillEdit(
        tag=tag,
        target=skill.id,
        steps=skill.steps,
        guards=skill.guards,
        checks=skill.checks,
        applicability=skill.applicability,
    )


def _nearest_cluster(
    draft: Skill, library: Mapping[str, Skill], keys: Mapping[str, str], threshold: float
) -> str:
    best_id, best_sim = None, 0.0
    for skill in sorted(library.values(), key=lambda s: s.id):
        if skill.status is SkillStatus.PRUNED:
            continue
        sim = skill_similarity(draft, skill)
        if sim > best_sim:
            best_id, best_sim = skill.id, sim
    if best_id is not None and best_sim >= threshold:
        return keys[best_id]
    return f"new:{draft.id}"


def _pick_implicated(
    candidates: Sequence[str], library: Mapping[str, Skill], pair: tuple[str, str]
) -> Skill | None:
    """Lexicographically smallest usable skill, preferring exact-pair coverage."""
    usable = [
        library[sid]
        for sid in sorted(candidates)
        if sid in library and library[sid].status is not SkillStatus.PRUNED
    ]
    for skill in usable:
        if skill.applies_to(pair):
            return skill
    return usable[0] if usable else None


def _repair_latent(
    scenario: Scenario,
    library: Mapping[str, Skill],
    pair: tuple[str, str],
    cause: CauseLabel,
    cards: Sequence[PolicyCard],
) -> LatentSkill | None:
    """The unrealized latent procedure this repair should target, if any.

    The first matching policy card's template takes precedence; otherwise the
    lexicographically smallest candidate.
    """
    unrealized = [
        l
        for l in realized_catalog(scenario, library)
        if l.applicability == pair and l.repairs_cause == cause and l.realized_by is None
    ]
    by_id = {l.id: l for l in unrealized}
    for card in cards:
        if card.template_skill in by_id:
            return by_id[card.template_skill]
    return min(unrealized, key=lambda l: l.id) if unrealized else None


def _repair_edit(
    tag: BoundedTag,
    skill: Skill,
    latent: LatentSkill | None,
    cause: CauseLabel,
    pair: tuple[str, str],
) -> SkillEdit | None:
    steps = skill.steps
    guards = skill.guards
    checks = skill.checks
    applicability = skill.applicability

    if tag is BoundedTag.ADD_GUARD:
        if latent is not None and latent.id not in steps:
            steps = steps + (latent.id,)
        token = f"require:{latent.id}" if latent is not None else f"require:{cause.value}"
        guards = guards | {token}
    elif tag is BoundedTag.REORDER_STEP:
        if latent is not None:
            rest = tuple(s for s in steps if s != latent.id)
            steps = (latent.id,) + rest  # the missing-order action leads
        else:
            steps = tuple(sorted(steps))  # canonical order as the repair
    elif tag is BoundedTag.TIGHTEN_RETRIEVAL:
        if latent is not None:
            if latent.id not in steps:
                steps = steps + (latent.id,)
            checks = checks | {f"match:{latent.id}"}
        elif len(applicability) > 1:
            applicability = applicability - {pair}
        else:
            guards = guards | {f"scope:{pair[0]}:{pair[1]}"}
    else:
        return None

    edit = SkillEdit(tag, skill.id, steps, guards, checks, applicability)
    unchanged = (
        steps == skill.steps
        and guards == skill.guards
        and checks == skill.checks
        and applicability == skill.applicability
    )
    return None if unchanged else edit


def _split_proposal(
    retained: RetainedTrace,
    rep: Skill,
    latent: LatentSkill | None,
    pair: tuple[str, str],
    cause: CauseLabel,
    keys: Mapping[str, str],
    round_index: int,
) -> Proposal:
    """Two narrower drafts partitioning the representative's applicability,
    or an isolating refine when there is nothing to partition."""
    if len(rep.applicability) >= 2:
        pairs = sorted(rep.applicability)
        halves = (pairs[: len(pairs) // 2], pairs[len(pairs) // 2 :])
        drafts = []
        for suffix, half in zip(("a", "b"), halves):
            steps = rep.steps
            if latent is not None and pair in half and latent.id not in steps:
                steps = steps + (latent.id,)
            drafts.append(
                Skill(
                    id=f"{rep.id}-{suffix}-r{round_index}",
                    applicability=frozenset(half),
                    steps=steps,
                    guards=rep.guards,
                    checks=rep.checks,
                    status=SkillStatus.POOLED,
                    owner=rep.owner,
                )
            )
        return Proposal(
            kind="failure-repair",
            source_trace=retained.trace.episode_id,
            target_cluster=keys[rep.id],
            task_type=retained.trace.task_type.id,
            cause=cause,
            drafts=tuple(drafts),
        )
    steps = rep.steps
    if latent is not None and latent.id not in steps:
        steps = steps + (latent.id,)
    edit = SkillEdit(
        BoundedTag.SPLIT_SKILL,
        rep.id,
        steps,
        rep.guards,
        rep.checks | {f"isolate:{cause.value}"},
        rep.applicability,
    )
    return Proposal(
        kind="failure-repair",
        source_trace=retained.trace.episode_id,
        target_cluster=keys[rep.id],
        task_type=retained.trace.task_type.id,
        cause=cause,
        edit=edit,
    )


def propose(
    retained: RetainedTrace,
    diagnosis: Diagnosis | None,
    cards: Sequence[PolicyCard],
    scenario: Scenario,
    library: Mapping[str, Skill],
    round_index: int,
    config: EngineConfig,
) -> Proposal | None:
    """Convert one retained trace into at most one local proposal.

    Successes can yield a motif draft realizing an undiscovered latent
    procedure (unless a pooled skill already took part, whose counters carry
    the evidence).  Failures yield a repair only when locally diagnosable;
    structural handoffs and unknown causes yield nothing.
    """
    trace = retained.trace
    task_id = trace.task_type.id
    keys = cluster_key_map(library, config.cluster_threshold)

    if trace.outcome == 1:
        if any(
            sid in library and library[sid].status is SkillStatus.POOLED
            for sl in trace.slices
            for sid in used_skills(sl)
        ):
            return None
        catalog = realized_catalog(scenario, library)
        for sl in trace.slices:
            pair = (task_id, sl.phase)
            undiscovered = sorted(
                (l for l in catalog if l.applicability == pair and l.realized_by is None),
                key=lambda l: l.id,
            )
            if not undiscovered:
                continue
            latent = undiscovered[0]
            draft = motif_skill(latent, f"{latent.id}-r{round_index}", sl.executor)
            return Proposal(
                kind="success-motif",
                source_trace=trace.episode_id,
                target_cluster=_nearest_cluster(
                    draft, library, keys, config.cluster_threshold
                ),
                task_type=task_id,
                drafts=(draft,),
            )
        return None

    if diagnosis is None or not diagnosis.locally_diagnosable:
        return None
    if not trace.slices:
        return None
    failing = trace.slices[-1]
    pair = (task_id, failing.phase)
    cause = diagnosis.cause
    latent = _repair_latent(scenario, library, pair, cause, cards)

    candidates = sorted(used_skills(failing)) or sorted(failing.selected)
    implicated = _pick_implicated(candidates, library, pair)
    if implicated is None:
        return None

    if diagnosis.tag is BoundedTag.SPLIT_SKILL:
        return _split_proposal(
            retained, implicated, latent, pair, cause, keys, round_index
        )

    if diagnosis.tag is BoundedTag.TIGHTEN_RETRIEVAL and latent is None:
        # target the interfering usage rather than the pair-matching skill
        catalog = realized_catalog(scenario, library)
        realized_here = {
            l.realized_by for l in catalog if l.applicability == pair and l.realized_by
        }
        noisy = [sid for sid in candidates if sid not in realized_here]
        implicated = _pick_implicated(noisy, library, pair) or implicated

    edit = _repair_edit(diagnosis.tag, implicated, latent, cause, pair)
    if edit is None:
        return None
    return Proposal(
        kind="failure-repair",
        source_trace=trace.episode_id,
        target_cluster=keys[implicated.id],
        task_type=task_id,
        cause=cause,
        edit=edit,
    )


_ACTION_PRIORITY = {"prune": 0, "refine": 1, "create": 2, "hold-in-pool": 3, "no-op": 4}


def _token_change_is_heavy(skill: Skill, edit: SkillEdit) -> bool:
    before = skill.tokens()
    after = frozenset(edit.steps) | edit.guards
    return len(before ^ after) > len(before) / 2


def _is_duplicate(
    draft: Skill,
    library: Mapping[str, Skill],
    policy_index: Sequence[PolicyCard],
    threshold: float,
) -> bool:
    for skill in library.values():
        if skill.status is SkillStatus.VALIDATED:
            if skill_similarity(draft, skill) >= threshold:
                return True
    for card in policy_index:
        if card.template_skill:
            template = motif_skill(
                LatentSkill(
                    card.template_skill,
                    next(iter(draft.applicability)),
                    1.0,
                    card.cause,
                ),
                card.template_skill,
                "template",
            )
            if skill_similarity(draft, template) >= threshold:
                return True
    return False


def _cluster_prunable(
    member_ids: Sequence[str],
    library: Mapping[str, Skill],
    q_skill: UtilityTable,
    config: EngineConfig,
) -> bool:
    """Every member has enough evidence and poor utility on every covered task."""
    for sid in member_ids:
        skill = library[sid]
        covered = sorted({pair[0] for pair in skill.applicability})
        for task_id in covered:
            entry = q_skill.get(sid, task_id)
            if entry is None:
                return False
            value, count = entry
            if count < config.prune_min_count or value >= config.prune_max_utility:
                return False
    return True


def skill_evolve(
    proposals: Sequence[Proposal],
    library: Mapping[str, Skill],
    policy_index: Sequence[PolicyCard],
    q_skill: UtilityTable,
    config: EngineConfig,
    *,
    last_round_drop: bool = False,
    last_round_edits: frozenset[str] = frozenset(),
) -> SkillDelta:
    """Consolidate proposals into at most one action per implicated cluster.

    Create drafts are deduplicated against validated skills and policy-card
    templates; repairs that rewrite more than half a skill's tokens are held
    in the pool instead of refined; clusters whose members all show enough
    low-utility evidence are pruned.  After a round-level performance drop,
    the previous round's edits are demoted to the pool first and their
    clusters are off limits for further actions.
    """
    keys = cluster_key_map(library, config.cluster_threshold)
    clusters = {
        key: tuple(sid for sid, k in keys.items() if k == key)
        for key in set(keys.values())
    }

    actions: list[SkillAction] = []
    claimed: set[str] = set()

    if last_round_drop and last_round_edits:
        demotable = sorted(
            sid
            for sid in last_round_edits
            if sid in library
            and library[sid].status in (SkillStatus.VALIDATED, SkillStatus.SEEDED)
        )
        by_cluster: dict[str, list[str]] = {}
        for sid in demotable:
            by_cluster.setdefault(keys[sid], []).append(sid)
        for key in sorted(by_cluster):
            actions.append(
                SkillAction(
                    cluster=key,
                    action="hold-in-pool",
                    skills=tuple(by_cluster[key]),
                    note="demoted after round-level performance drop",
                )
            )
            claimed.add(key)

    grouped: dict[str, list[Proposal]] = {}
    for proposal in proposals:
        grouped.setdefault(proposal.target_cluster, []).append(proposal)

    for key in sorted(grouped):
        if key in claimed:
            continue
        group = sorted(grouped[key], key=lambda p: p.source_trace)
        candidates: list[tuple[str, SkillAction]] = []

        member_ids = clusters.get(key, ())
        if member_ids and _cluster_prunable(member_ids, library, q_skill, config):
            candidates.append(
                (
                    "prune",
                    SkillAction(
                        cluster=key,
                        action="prune",
                        skills=tuple(member_ids),
                        source_trace=group[0].source_trace,
                        task_type=group[0].task_type,
                        note="all members below the utility floor",
                    ),
                )
            )

        for proposal in group:
            cause = proposal.cause.value if proposal.cause else None
            if proposal.drafts:
                fresh = tuple(
                    d
                    for d in proposal.drafts
                    if not _is_duplicate(d, library, policy_index, config.dedup_similarity)
                )
                if not fresh:
                    candidates.append(
                        (
                            "no-op",
                            SkillAction(
                                cluster=key,
                                action="no-op",
                                skills=tuple(d.id for d in proposal.drafts),
                                source_trace=proposal.source_trace,
                                task_type=proposal.task_type,
                                cause=cause,
                                note="duplicate of an existing validated skill or template",
                            ),
                        )
                    )
                else:
                    candidates.append(
                        (
                            "create",
                            SkillAction(
                                cluster=key,
                                action="create",
                                skills=tuple(d.id for d in fresh),
                                source_trace=proposal.source_trace,
                                task_type=proposal.task_type,
                                cause=cause,
                                new_skills=fresh,
                            ),
                        )
                    )
            elif proposal.edit is not None:
                target = library.get(proposal.edit.target)
                if target is None or target.status is SkillStatus.PRUNED:
                    continue
                heavy = _token_change_is_heavy(target, proposal.edit)
                candidates.append(
                    (
                        "hold-in-pool" if heavy else "refine",
                        SkillAction(
                            cluster=key,
                            action="hold-in-pool" if heavy else "refine",
                            skills=(target.id,),
                            source_trace=proposal.source_trace,
                            task_type=proposal.task_type,
                            cause=cause,
                            note="rewrite beyond half the tokens" if heavy else "",
                            edit=proposal.edit,
                        ),
                    )
                )

        if not candidates:
            continue
        distinct = {name for name, _ in candidates}
        candidates.sort(key=lambda c: (_ACTION_PRIORITY[c[0]], c[1].source_trace or ""))
        chosen = candidates[0][1]
        if len(distinct) > 1:
            note = f"conflicting candidates {sorted(distinct)}; kept {chosen.action}"
            chosen = dataclasses.replace(
                chosen, note=f"{chosen.note}; {note}" if chosen.note else note
            )
        actions.append(chosen)
        claimed.add(key)

    return SkillDelta(tuple(sorted(actions, key=lambda a: a.cluster)))


def apply_skill_delta(
    library: Mapping[str, Skill],
    executors: Mapping[str, Executor],
    pool: Mapping[str, tuple[int, int]],
    delta: SkillDelta,
) -> tuple[dict[str, Skill], dict[str, Executor], dict[str, tuple[int, int]]]:
    """Apply consolidated actions, keeping ownership and pool maps consistent."""
    lib = dict(library)
    execs = dict(executors)
    new_pool = dict(pool)

    def give(owner_id: str, skill_id: str) -> None:
        owner = execs[owner_id]
        execs[owner_id] = dataclasses.replace(
            owner, owned_skills=owner.owned_skills | {skill_id}
        )

    def take(owner_id: str, skill_id: str) -> None:
        owner = execs.get(owner_id)
        if owner is not None and skill_id in owner.owned_skills:
            execs[owner_id] = dataclasses.replace(
                owner, owned_skills=owner.owned_skills - {skill_id}
            )

    for action in delta.actions:
        if action.action == "create":
            for draft in action.new_skills:
                if draft.id in lib:
                    raise StateError(f"skill id {draft.id!r} would be reused")
                if draft.owner not in execs:
                    raise StateError(f"draft {draft.id!r} owned by unknown executor")
                lib[draft.id] = draft
                give(draft.owner, draft.id)
                new_pool[draft.id] = (0, 0)
        elif action.action == "refine":
            edit = action.edit
            assert edit is not None
            skill = lib[edit.target]
            lib[edit.target] = dataclasses.replace(
                skill,
                steps=edit.steps,
                guards=edit.guards,
                checks=edit.checks,
                applicability=edit.applicability,
            )
        elif action.action == "hold-in-pool":
            for sid in action.skills:
                skill = lib[sid]
                if action.edit is not None and action.edit.target == sid:
                    skill = dataclasses.replace(
                        skill,
                        steps=action.edit.steps,
                        guards=action.edit.guards,
                        checks=action.edit.checks,
                        applicability=action.edit.applicability,
                    )
                lib[sid] = dataclasses.replace(skill, status=SkillStatus.POOLED)
                new_pool[sid] = (0, 0)
        elif action.action == "prune":
            for sid in action.skills:
                skill = lib[sid]
                lib[sid] = dataclasses.replace(skill, status=SkillStatus.PRUNED)
                take(skill.owner, sid)
                new_pool.pop(sid, None)
    return lib, execs, new_pool


def update_pool_counters(
    pool: Mapping[str, tuple[int, int]],
    library: Mapping[str, Skill],
    traces: Sequence,
) -> dict[str, tuple[int, int]]:
    """Advance usage/success counters for pooled skills that saw real use."""
    new_pool = dict(pool)
    for trace in traces:
        used_all: set[str] = set()
        for sl in trace.slices:
            used_all.update(used_skills(sl))
        for sid in sorted(used_all):
            if sid in new_pool:
                uses, successes = new_pool[sid]
                new_pool[sid] = (uses + 1, successes + trace.outcome)
    return new_pool


def promote_pool(
    library: Mapping[str, Skill],
    pool: Mapping[str, tuple[int, int]],
    executors: Mapping[str, Executor],
    config: EngineConfig,
) -> tuple[
    dict[str, Skill],
    dict[str, tuple[int, int]],
    dict[str, Executor],
    list[tuple[str, str]],
]:
    """Promote pooled skills with sufficient evidence; prune the hopeless ones."""
    lib = dict(library)
    execs = dict(executors)
    new_pool = dict(pool)
    outcomes: list[tuple[str, str]] = []
    for sid in sorted(pool):
        uses, successes = pool[sid]
        skill = lib[sid]
        if uses >= config.promote_min_uses and successes / uses >= config.promote_min_ratio:
            lib[sid] = dataclasses.replace(skill, status=SkillStatus.VALIDATED)
            del new_pool[sid]
            outcomes.append((sid, "validated"))
        elif uses >= config.pool_prune_min_uses and successes / uses < config.pool_prune_max_ratio:
            lib[sid] = dataclasses.replace(skill, status=SkillStatus.PRUNED)
            owner = execs.get(skill.owner)
            if owner is not None and sid in owner.owned_skills:
                execs[skill.owner] = dataclasses.replace(
                    owner, owned_skills=owner.owned_skills - {sid}
                )
            del new_pool[sid]
            outcomes.append((sid, "pruned"))
    return lib, new_pool, execs, outcomes
