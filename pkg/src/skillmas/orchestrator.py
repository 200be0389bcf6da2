"""Round orchestration: the full adaptation loop, experiments, and reports.

A round is one transactional state transition: execute a batch with the
state fixed, learn utilities, retain evidence, consolidate skill proposals,
apply at most one restructuring edit, promote from the validation pool.
Any failure aborts the round with the input state untouched.
"""

from __future__ import annotations

import dataclasses
import json
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

from .config import EngineConfig
from .evolution import (
    Proposal,
    apply_skill_delta,
    diagnose,
    promote_pool,
    propose,
    retrieve_policy_cards,
    skill_evolve,
    update_pool_counters,
)
from .model import (
    CauseLabel,
    EpisodeTrace,
    RoundState,
    SkillStatus,
    validate_state,
)
from .numfmt import q12
from .restructure import apply_restructure, build_artifacts, decide_restructure
from .retention import retain
from .streams import derive_seed
from .utility import learn
from .world import Scenario, exec_round

TRANSPLANT_ROWS = (
    "Full",
    "Final-library/seed-MAS",
    "Specialized-MAS/seed-skills",
    "Seed",
)


@dataclass(frozen=True)
class RoundReport:
    """Everything needed to audit and replay one round."""

    round_index: int
    episodes: int
    successes: int
    per_family: dict[str, tuple[int, int]]  # task id -> (successes, attempts)
    active_skills: int
    active_executors: int
    pool_size: int
    retained: dict[str, list[str]]  # category -> episode ids
    skill_actions: tuple[dict[str, object], ...]
    restructure: dict[str, object]
    promotions: tuple[tuple[str, str], ...]
    last_round_drop: bool

    @property
    def success_rate(self) -> float:
        return q12(self.successes / self.episodes) if self.episodes else 0.0

    def to_dict(self) -> dict[str, object]:
        return {
            "round": self.round_index,
            "episodes": self.episodes,
            "successes": self.successes,
            "success_rate": self.success_rate,
            "per_family": {
                task: {"successes": s, "attempts": a}
                for task, (s, a) in sorted(self.per_family.items())
            },
            "active_skills": self.active_skills,
            "active_executors": self.active_executors,
            "pool_size": self.pool_size,
            "retained": {k: v for k, v in sorted(self.retained.items())},
            "skill_actions": list(self.skill_actions),
            "restructure": self.restructure,
            "promotions": [list(p) for p in self.promotions],
            "last_round_drop": self.last_round_drop,
        }


@dataclass(frozen=True)
class TrajectoryReport:
    scenario: str
    seed: int
    rounds: tuple[RoundReport, ...]
    checkpoint_round: int

    def to_dict(self) -> dict[str, object]:
        return {
            "format": 1,
            "scenario": self.scenario,
            "seed": self.seed,
            "rounds": [r.to_dict() for r in self.rounds],
            "checkpoint": {
                "round": self.checkpoint_round,
                "successes": self.rounds[self.checkpoint_round].successes,
            },
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


@dataclass(frozen=True)
class ExperimentResult:
    """A trajectory report plus the per-round states (X_0 .. X_R)."""

    report: TrajectoryReport
    states: tuple[RoundState, ...]
    traces_by_round: tuple[tuple[EpisodeTrace, ...], ...]

    @property
    def seed_state(self) -> RoundState:
        return self.states[0]

    @property
    def checkpoint_state(self) -> RoundState:
        return self.states[self.report.checkpoint_round]

    @property
    def final_state(self) -> RoundState:
        return self.states[-1]


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    successes: int
    episodes: int

    @property
    def rate(self) -> float:
        return q12(self.successes / self.episodes) if self.episodes else 0.0


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple[ComparisonRow, ...]

    def to_dict(self) -> dict[str, object]:
        return {
            "format": 1,
            "rows": [
                {
                    "variant": r.label,
                    "successes": r.successes,
                    "episodes": r.episodes,
                    "rate": r.rate,
                }
                for r in self.rows
            ],
        }

    def by_label(self) -> dict[str, ComparisonRow]:
        return {r.label: r for r in self.rows}


def canonical_json(payload: object) -> str:
    """Deterministic JSON rendering used for every persisted report."""
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _summarize_action(action) -> dict[str, object]:
    summary: dict[str, object] = {
        "cluster": action.cluster,
        "action": action.action,
        "skills": list(action.skills),
    }
    if action.source_trace:
        summary["source_trace"] = action.source_trace
    if action.task_type:
        summary["task_type"] = action.task_type
    if action.cause:
        summary["cause"] = action.cause
    if action.note:
        summary["note"] = action.note
    return summary


def _summarize_decision(decision, log: list[str]) -> dict[str, object]:
    summary: dict[str, object] = {
        "action": decision.action,
        "subjects": list(decision.subjects),
        "evidence": decision.evidence,
    }
    if decision.new_boundary is not None:
        summary["new_boundary"] = [list(p) for p in sorted(decision.new_boundary)]
    if decision.transferred_skills:
        summary["transferred_skills"] = list(decision.transferred_skills)
    if log:
        summary["ownership_log"] = log
    return summary


def collect_proposals(
    retained: Sequence,
    state: RoundState,
    scenario: Scenario,
    config: EngineConfig,
) -> list[Proposal]:
    """At most one local proposal per retained trace.

    Failures go through diagnosis and policy-card retrieval first; successes
    go straight to motif extraction.
    """
    proposals: list[Proposal] = []
    for rt in retained:
        if rt.trace.outcome == 0:
            diagnosis = diagnose(rt)
            cards = retrieve_policy_cards(
                state.policy_index, rt.trace.task_type.id, diagnosis.cause
            )
            proposal = propose(
                rt, diagnosis, cards, scenario, state.library, state.round_index, config
            )
        else:
            proposal = propose(
                rt, None, (), scenario, state.library, state.round_index, config
            )
        if proposal is not None:
            proposals.append(proposal)
    return proposals


def run_round(
    state: RoundState,
    scenario: Scenario,
    config: EngineConfig,
    seed: int,
    *,
    last_round_drop: bool = False,
    last_round_edits: frozenset[str] = frozenset(),
    prior_failure_counts: Mapping[tuple[str, CauseLabel], int] | None = None,
) -> tuple[RoundState, RoundReport, tuple[EpisodeTrace, ...]]:
    """One adaptation round; returns the next state, its report, and the traces.

    The update is all-or-nothing: every stage builds fresh values, so an
    error anywhere leaves the caller's state exactly as passed in.
    """
    traces = exec_round(
        state,
        scenario,
        config.episodes_per_round,
        seed,
        config,
        id_prefix=f"r{state.round_index:04d}",
    )

    q_skill_plus, q_exec_plus = learn(
        state.q_skill,
        state.q_exec,
        traces,
        known_skills=state.library,
        known_executors=state.executors,
    )
    pool_counted = update_pool_counters(state.pool, state.library, traces)

    retained = retain(
        traces,
        q_skill_plus,
        q_exec_plus,
        config,
        state.library,
        q_exec_prior=state.q_exec,
        prior_failure_counts=prior_failure_counts,
    )

    proposals = collect_proposals(retained, state, scenario, config)

    delta = skill_evolve(
        proposals,
        state.library,
        state.policy_index,
        q_skill_plus,
        config,
        last_round_drop=last_round_drop,
        last_round_edits=last_round_edits,
    )
    library2, executors2, pool2 = apply_skill_delta(
        state.library, state.executors, pool_counted, delta
    )

    artifacts = build_artifacts(
        retained, state.library, state.executors, q_exec_plus, delta, config
    )
    decision = decide_restructure(
        artifacts,
        state.executors,
        q_exec_plus,
        config,
        round_index=state.round_index,
        library=library2,
    )
    library3, executors3, pool3, ownership_log = apply_restructure(
        library2, executors2, pool2, q_skill_plus, decision, config
    )

    library4, pool4, executors4, promotions = promote_pool(
        library3, pool3, executors3, config
    )

    next_state = RoundState(
        round_index=state.round_index + 1,
        library=library4,
        executors=executors4,
        q_skill=q_skill_plus,
        q_exec=q_exec_plus,
        pool=pool4,
        policy_index=state.policy_index,
    )
    validate_state(next_state, scenario.universe())

    per_family: dict[str, tuple[int, int]] = {}
    for trace in traces:
        s, a = per_family.get(trace.task_type.id, (0, 0))
        per_family[trace.task_type.id] = (s + trace.outcome, a + 1)

    retained_summary: dict[str, list[str]] = {}
    for rt in retained:
        for category in sorted(c.value for c in rt.categories):
            retained_summary.setdefault(category, []).append(rt.trace.episode_id)

    report = RoundReport(
        round_index=state.round_index,
        episodes=len(traces),
        successes=sum(t.outcome for t in traces),
        per_family=per_family,
        active_skills=state.active_skill_count(),
        active_executors=len(state.executors),
        pool_size=len(state.pool),
        retained=retained_summary,
        skill_actions=tuple(_summarize_action(a) for a in delta.actions),
        restructure=_summarize_decision(decision, ownership_log),
        promotions=tuple(promotions),
        last_round_drop=last_round_drop,
    )
    return next_state, report, traces


def run_experiment(
    scenario: Scenario,
    seed_state: RoundState,
    seed: int,
    rounds: int,
    config: EngineConfig,
) -> ExperimentResult:
    """Chain rounds from the scenario's seed state.

    The checkpoint is the round with the highest success count, earliest on
    ties.  A round-level success drop arms the demotion penalty for the next
    round's consolidation.
    """
    if rounds < 1:
        raise ValueError("an experiment needs at least one round")
    validate_state(seed_state, scenario.universe())

    states = [seed_state]
    reports: list[RoundReport] = []
    all_traces: list[tuple[EpisodeTrace, ...]] = []
    edits_by_round: list[frozenset[str]] = []
    failure_history: Counter[tuple[str, CauseLabel]] = Counter()

    for r in range(rounds):
        drop = r >= 2 and reports[r - 1].successes < reports[r - 2].successes
        last_edits = edits_by_round[r - 1] if r >= 1 else frozenset()
        prior = dict(failure_history) if config.cross_round_repeats and r > 0 else None
        next_state, report, traces = run_round(
            states[r],
            scenario,
            config,
            derive_seed(seed, "round", r),
            last_round_drop=drop,
            last_round_edits=last_edits,
            prior_failure_counts=prior,
        )
        states.append(next_state)
        reports.append(report)
        all_traces.append(traces)
        edits_by_round.append(
            frozenset(
                sid
                for action in report.skill_actions
                if action["action"] in ("create", "refine", "hold-in-pool")
                for sid in action["skills"]  # type: ignore[union-attr]
            )
        )
        if config.cross_round_repeats:
            for trace in traces:
                if trace.outcome == 0:
                    obs = trace.latent_cause_observation
                    cause = obs.cause if obs else CauseLabel.UNKNOWN
                    failure_history[(trace.task_type.id, cause)] += 1

    best = max(range(rounds), key=lambda r: (reports[r].successes, -r))
    report = TrajectoryReport(
        scenario=scenario.name,
        seed=seed,
        rounds=tuple(reports),
        checkpoint_round=best,
    )
    return ExperimentResult(report, tuple(states), tuple(all_traces))


def _reowned(
    library_source: RoundState, mas_source: RoundState, *, reown_all_to_manager: bool
) -> RoundState:
    """Cross-combine one state's library side with another's executor side."""
    manager_id = mas_source.manager_id()
    executors = {
        eid: dataclasses.replace(e, owned_skills=frozenset())
        for eid, e in mas_source.executors.items()
    }
    library = {}
    for sid, skill in library_source.library.items():
        if skill.status is SkillStatus.PRUNED:
            library[sid] = skill
            continue
        if reown_all_to_manager or skill.owner not in executors:
            owner = manager_id
        else:
            owner = skill.owner
        library[sid] = dataclasses.replace(skill, owner=owner)
        executors[owner] = dataclasses.replace(
            executors[owner], owned_skills=executors[owner].owned_skills | {sid}
        )
    return RoundState(
        round_index=0,
        library=library,
        executors=executors,
        q_skill=library_source.q_skill,
        q_exec=mas_source.q_exec,
        pool=dict(library_source.pool),
        policy_index=library_source.policy_index,
    )


def transplant_variants(
    final_state: RoundState, seed_state: RoundState
) -> dict[str, RoundState]:
    """The four frozen cross-combinations of final and seed sides."""
    return {
        TRANSPLANT_ROWS[0]: final_state,
        TRANSPLANT_ROWS[1]: _reowned(
            final_state, seed_state, reown_all_to_manager=True
        ),
        TRANSPLANT_ROWS[2]: _reowned(
            seed_state, final_state, reown_all_to_manager=False
        ),
        TRANSPLANT_ROWS[3]: seed_state,
    }


def evaluate_state(
    state: RoundState,
    scenario: Scenario,
    episodes: int,
    seed: int,
    config: EngineConfig,
    *,
    id_prefix: str = "v",
) -> tuple[EpisodeTrace, ...]:
    """Frozen evaluation: fresh episodes, no adaptation, state untouched."""
    return exec_round(state, scenario, episodes, seed, config, id_prefix=id_prefix)


def transplant_stress_test(
    scenario: Scenario,
    seed_state: RoundState,
    seed: int,
    rounds: int,
    eval_episodes: int,
    config: EngineConfig,
) -> ComparisonTable:
    """Cross-transplant the adapted library and executor organization.

    Runs a full experiment, then evaluates four frozen variants on the same
    fresh evaluation stream: the adapted checkpoint, each one-sided
    transplant, and the untouched seed.
    """
    result = run_experiment(scenario, seed_state, seed, rounds, config)
    return evaluate_transplants(
        scenario, result.checkpoint_state, seed_state, seed, eval_episodes, config
    )


def evaluate_transplants(
    scenario: Scenario,
    final_state: RoundState,
    seed_state: RoundState,
    seed: int,
    eval_episodes: int,
    config: EngineConfig,
) -> ComparisonTable:
    variants = transplant_variants(final_state, seed_state)
    eval_seed = derive_seed(seed, "transplant-eval")
    rows = []
    for label in TRANSPLANT_ROWS:
        traces = evaluate_state(
            variants[label], scenario, eval_episodes, eval_seed, config
        )
        rows.append(
            ComparisonRow(label, sum(t.outcome for t in traces), eval_episodes)
        )
    return ComparisonTable(tuple(rows))


@dataclass(frozen=True)
class FamilyRow:
    task_type: str
    successes: int
    attempts: int
    baseline_successes: int | None = None
    baseline_attempts: int | None = None

    @property
    def gain(self) -> int | None:
        if self.baseline_successes is None:
            return None
        return self.successes - self.baseline_successes


def task_family_breakdown(
    traces: Sequence[EpisodeTrace],
    baseline: Sequence[EpisodeTrace] | None = None,
) -> list[FamilyRow]:
    """Per-task-family success counts, with a gain column when a baseline run
    is supplied.  Families absent from both runs are omitted."""
    if not traces:
        raise ValueError("breakdown needs a non-empty trace set")

    def tally(batch: Sequence[EpisodeTrace]) -> dict[str, tuple[int, int]]:
        counts: dict[str, tuple[int, int]] = {}
        for t in batch:
            s, a = counts.get(t.task_type.id, (0, 0))
            counts[t.task_type.id] = (s + t.outcome, a + 1)
        return counts

    current = tally(traces)
    base = tally(baseline) if baseline is not None else None
    rows = []
    for task_id in sorted(current):
        s, a = current[task_id]
        if base is not None:
            bs, ba = base.get(task_id, (0, 0))
            rows.append(FamilyRow(task_id, s, a, bs, ba))
        else:
            rows.append(FamilyRow(task_id, s, a))
    return rows


def _ratio(successes: int, attempts: int) -> str:
    pct = 100.0 * successes / attempts if attempts else 0.0
    return f"{successes}/{attempts} ({pct:.1f}%)"


def render_trajectory(report: TrajectoryReport) -> str:
    lines = [
        f"Scenario {report.scenario}, seed {report.seed}",
        f"{'R':>2}  {'Success':<16} {'Skills':>6}  {'Executors':>9}  Event",
    ]
    for r in report.rounds:
        event = r.restructure.get("action", "keep")
        if event == "add":
            event = f"+ executor {', '.join(r.restructure.get('subjects', []))}"
        marker = " *" if r.round_index == report.checkpoint_round else ""
        lines.append(
            f"{r.round_index:>2}  {_ratio(r.successes, r.episodes):<16} "
            f"{r.active_skills:>6}  {r.active_executors:>9}  {event}{marker}"
        )
    lines.append(f"Checkpoint: round {report.checkpoint_round}")
    return "\n".join(lines) + "\n"


def render_breakdown(rows: Sequence[FamilyRow]) -> str:
    has_baseline = any(r.baseline_successes is not None for r in rows)
    if has_baseline:
        lines = [f"{'Task family':<24} {'Seed':<16} {'Best':<16} Gain"]
        for r in rows:
            base = _ratio(r.baseline_successes or 0, r.baseline_attempts or 0)
            gain = r.gain or 0
            lines.append(
                f"{r.task_type:<24} {base:<16} "
                f"{_ratio(r.successes, r.attempts):<16} {gain:+d}"
            )
    else:
        lines = [f"{'Task family':<24} Success"]
        for r in rows:
            lines.append(f"{r.task_type:<24} {_ratio(r.successes, r.attempts)}")
    return "\n".join(lines) + "\n"


def render_comparison(table: ComparisonTable) -> str:
    lines = [f"{'Variant':<28} Success"]
    for row in table.rows:
        lines.append(f"{row.label:<28} {_ratio(row.successes, row.episodes)}")
    return "\n".join(lines) + "\n"
