"""Utility learning: trace-grounded credit assignment and utility-driven selection.

Credit is conservative: a skill earns an update only when it was invoked or
pattern-supported in an executor slice, and an executor earns an update only
when it actually holds a slice in the episode.  Merely retrieved skills get
nothing.
"""

from __future__ import annotations

import random
from typing import Iterable, Sequence

from .model import (
    EpisodeTrace,
    Executor,
    ExecutorSlice,
    RoundState,
    SkillStatus,
    StateError,
    UtilityTable,
)
from .numfmt import q12


class RoutingError(RuntimeError):
    """No executor is eligible for a (task, phase) pair."""


def used_skills(sl: ExecutorSlice) -> frozenset[str]:
    """Skills that actually participated in the slice: invoked or pattern-supported."""
    return sl.invoked | sl.pattern_supported


def step_size(count: int) -> float:
    """Count-based update rate 1/(1+N); unseen entries get a full overwrite."""
    if count < 0:
        raise ValueError("update count cannot be negative")
    return 1.0 / (1.0 + count)


def mc_update(entry: tuple[float, int] | None, outcome: int) -> tuple[float, int]:
    """One Monte Carlo update of a (value, count) entry toward a binary outcome."""
    value, count = entry if entry is not None else (0.0, 0)
    alpha = step_size(count)
    return q12(value + alpha * (outcome - value)), count + 1


def learn(
    q_skill: UtilityTable,
    q_exec: UtilityTable,
    traces: Sequence[EpisodeTrace],
    *,
    known_skills: Iterable[str] | None = None,
    known_executors: Iterable[str] | None = None,
) -> tuple[UtilityTable, UtilityTable]:
    """Fold a round's traces into fresh skill and executor utility tables.

    Traces are processed in episode-id order.  Entries never touched stay
    bit-identical; touched entries move toward the episode outcome at the
    count-based rate, which makes each value the exact running mean of the
    outcomes applied to it.
    """
    skill_ids = frozenset(known_skills) if known_skills is not None else None
    executor_ids = frozenset(known_executors) if known_executors is not None else None

    s_entries = dict(q_skill.entries)
    a_entries = dict(q_exec.entries)
    for trace in sorted(traces, key=lambda t: t.episode_id):
        task_id = trace.task_type.id
        outcome = trace.outcome

        used_by: dict[str, set[str]] = {}
        for sl in trace.slices:
            if executor_ids is not None and sl.executor not in executor_ids:
                raise StateError(f"trace {trace.episode_id} routes unknown executor {sl.executor!r}")
            if skill_ids is not None and not sl.selected <= skill_ids:
                unknown = sorted(sl.selected - skill_ids)
                raise StateError(f"trace {trace.episode_id} references unknown skills {unknown}")
            used_by.setdefault(sl.executor, set()).update(used_skills(sl))

        for executor_id in trace.executors():
            for skill_id in sorted(used_by[executor_id]):
                key = (skill_id, task_id)
                s_entries[key] = mc_update(s_entries.get(key), outcome)

        for executor_id in trace.executors():
            key = (executor_id, task_id)
            a_entries[key] = mc_update(a_entries.get(key), outcome)

    return UtilityTable(s_entries), UtilityTable(a_entries)


def select_skills(
    q_skill: UtilityTable,
    state: RoundState,
    task_id: str,
    phase: str,
    executor: Executor | str,
    k: int,
) -> list[str]:
    """Task-conditioned skill retrieval for one phase.

    Candidates are the non-pruned skills applicable to the task type and
    owned by the routed executor or the manager; retrieval is task-wide, and
    only skills whose applicability covers the exact phase end up invoked.
    Ranking is by skill utility (unseen entries rank at the 0.5 prior) with
    lexicographic tie-breaks.  At most one applicable pooled skill is
    appended beyond the top k so the validation pool keeps accumulating
    usage evidence.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    executor_id = executor.id if isinstance(executor, Executor) else executor
    owners = {executor_id, state.manager_id()}
    candidates = [
        s
        for s in state.library.values()
        if s.status is not SkillStatus.PRUNED
        and s.owner in owners
        and s.applies_to_task(task_id)
    ]
    candidates.sort(key=lambda s: (-q_skill.value(s.id, task_id), s.id))
    chosen = [s.id for s in candidates[:k]]
    for s in candidates:
        if s.status is SkillStatus.POOLED and s.id not in chosen:
            chosen.append(s.id)  # one pooled exposure per phase
            break
    return chosen


def select_executor(
    q_exec: UtilityTable,
    state: RoundState,
    task_id: str,
    phase: str,
    rng: random.Random,
    epsilon: float,
) -> str:
    """Route one phase: greedy on executor utility with epsilon exploration."""
    eligible = sorted(
        e.id for e in state.executors.values() if e.covers((task_id, phase))
    )
    if not eligible:
        raise RoutingError(f"no executor covers ({task_id}, {phase})")
    if rng.random() < epsilon:
        return eligible[rng.randrange(len(eligible))]
    return min(eligible, key=lambda eid: (-q_exec.value(eid, task_id), eid))
