"""Synthetic task world with known ground truth.

The world stands in for a real benchmark harness: it generates verified
episode traces, emits (noisily observed) latent failure causes, and hides a
catalog of discoverable procedures.  Success is an additive-logit model
with two penalty directions — selection interference from non-matching
skill usage and executor overload from oversized owned-skill sets — so
both one-sided failure modes of coupled adaptation are expressible.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

from .config import EngineConfig
from .model import (
    CauseLabel,
    CauseObservation,
    EpisodeTrace,
    Executor,
    ExecutorSlice,
    Pair,
    RoundState,
    Skill,
    SkillStatus,
    StateError,
    TaskType,
)
from .numfmt import q12
from .streams import substream
from .utility import RoutingError, select_executor, select_skills


@dataclass(frozen=True)
class LatentSkill:
    """A discoverable ground-truth procedure for one (task, phase) pair.

    Using a library skill that realizes it adds `effect` to the phase logit;
    when it stays unrealized, failures at the pair surface `repairs_cause`.
    """

    id: str
    applicability: Pair
    effect: float
    repairs_cause: CauseLabel
    realized_by: str | None = None

    def __post_init__(self) -> None:
        if self.effect <= 0:
            raise StateError(f"latent skill {self.id!r} needs a positive effect")


@dataclass(frozen=True)
class Scenario:
    """Ground-truth model of one synthetic task world."""

    name: str
    task_types: tuple[TaskType, ...]
    task_weights: dict[str, float]
    base_difficulty: dict[Pair, float]
    latent_catalog: tuple[LatentSkill, ...] = ()
    interference_weight: float = 0.0
    overload_weight: float = 0.0
    routing_noise: float = 0.1
    cause_confidence: float = 0.9

    def __post_init__(self) -> None:
        if not self.task_types:
            raise StateError("scenario has no task types")
        for task in self.task_types:
            if self.task_weights.get(task.id, 0.0) <= 0.0:
                raise StateError(f"task {task.id!r} needs a positive sampling weight")
        if self.interference_weight < 0 or self.overload_weight < 0:
            raise StateError("penalty weights must be non-negative")
        if not 0.0 <= self.routing_noise < 1.0:
            raise StateError("routing noise must be in [0, 1)")
        if not 0.0 < self.cause_confidence <= 1.0:
            raise StateError("cause observation confidence must be in (0, 1]")

    def universe(self) -> frozenset[Pair]:
        return frozenset(pair for task in self.task_types for pair in task.pairs())

    def task(self, task_id: str) -> TaskType:
        for task in self.task_types:
            if task.id == task_id:
                return task
        raise KeyError(task_id)


def logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def motif_steps(latent_id: str) -> tuple[str, ...]:
    return (latent_id, f"{latent_id}:verify")


def motif_skill(latent: LatentSkill, skill_id: str, owner: str) -> Skill:
    """The canonical draft realizing a latent procedure."""
    return Skill(
        id=skill_id,
        applicability=frozenset({latent.applicability}),
        steps=motif_steps(latent.id),
        guards=frozenset({f"{latent.id}:guard"}),
        checks=frozenset({f"{latent.id}:check"}),
        status=SkillStatus.POOLED,
        owner=owner,
    )


def realizes(skill: Skill, latent: LatentSkill) -> bool:
    """A skill realizes a latent procedure when it carries the latent's
    marker step and covers its (task, phase) pair."""
    return (
        skill.status is not SkillStatus.PRUNED
        and latent.id in skill.steps
        and latent.applicability in skill.applicability
    )


def realized_catalog(
    scenario: Scenario, library: Mapping[str, Skill]
) -> tuple[LatentSkill, ...]:
    """The latent catalog with `realized_by` resolved against a library.

    Realization is derived, not stored: the lexicographically smallest
    non-pruned realizing skill wins, so the view is deterministic.
    """
    resolved = []
    for latent in scenario.latent_catalog:
        match = min(
            (s.id for s in library.values() if realizes(s, latent)),
            default=None,
        )
        resolved.append(replace(latent, realized_by=match))
    return tuple(resolved)


def _matching_latents(
    scenario: Scenario, pair: Pair
) -> tuple[LatentSkill, ...]:
    return tuple(l for l in scenario.latent_catalog if l.applicability == pair)


def ground_truth_success_prob(
    scenario: Scenario,
    library: Mapping[str, Skill],
    task_id: str,
    phase: str,
    executor: Executor,
    used_skill_ids: Iterable[str],
) -> float:
    """Phase success probability under the additive-logit ground truth.

    logit = base difficulty
          + effects of latent procedures realized by some used skill
          - interference * (# used skills matching no latent here)
          - overload * max(0, owned skills - capacity)
    """
    pair = (task_id, phase)
    if not executor.covers(pair):
        raise RoutingError(f"executor {executor.id!r} routed outside its boundary {pair}")
    used = []
    for skill_id in used_skill_ids:
        skill = library.get(skill_id)
        if skill is None:
            raise StateError(f"used skill {skill_id!r} is not in the library")
        used.append(skill)

    logit = scenario.base_difficulty.get(pair, 0.0)
    matching: set[str] = set()
    for latent in _matching_latents(scenario, pair):
        realizers = [s.id for s in used if realizes(s, latent)]
        if realizers:
            logit += latent.effect
            matching.update(realizers)
    mismatched = sum(1 for s in used if s.id not in matching)
    logit -= scenario.interference_weight * mismatched

    owned_active = sum(
        1
        for sid in executor.owned_skills
        if sid in library and library[sid].status is not SkillStatus.PRUNED
    )
    logit -= scenario.overload_weight * max(0, owned_active - executor.capacity)
    return logistic(logit)


def _dominant_deficit(
    scenario: Scenario,
    library: Mapping[str, Skill],
    executor: Executor,
    task_id: str,
    phase: str,
    used_ids: frozenset[str],
) -> tuple[CauseLabel, float] | None:
    """The largest unmet term of the success model, with its magnitude.

    Priority on exact ties: absent latent procedure, then interference,
    then overload.
    """
    pair = (task_id, phase)
    used = [library[sid] for sid in sorted(used_ids)]

    absent = [
        latent
        for latent in _matching_latents(scenario, pair)
        if not any(realizes(s, latent) for s in used)
    ]
    candidates: list[tuple[float, int, CauseLabel]] = []
    if absent:
        top = max(absent, key=lambda l: (l.effect, l.id))
        candidates.append((top.effect, 0, top.repairs_cause))

    matching: set[str] = set()
    for latent in _matching_latents(scenario, pair):
        matching.update(s.id for s in used if realizes(s, latent))
    mismatched = sum(1 for s in used if s.id not in matching)
    interference = scenario.interference_weight * mismatched
    if interference > 0:
        cause = (
            CauseLabel.SKILL_CONFLICT
            if mismatched >= 2
            else CauseLabel.MISLEADING_RETRIEVAL
        )
        candidates.append((interference, 1, cause))

    owned_active = sum(
        1
        for sid in executor.owned_skills
        if sid in library and library[sid].status is not SkillStatus.PRUNED
    )
    overload = scenario.overload_weight * max(0, owned_active - executor.capacity)
    if overload > 0:
        candidates.append((overload, 2, CauseLabel.BAD_EXECUTOR_ASSIGNMENT))

    if not candidates:
        return None
    magnitude, _, cause = max(candidates, key=lambda c: (c[0], -c[1]))
    return cause, magnitude


def _observe_cause(
    deficit: tuple[CauseLabel, float] | None, rng: random.Random, confidence: float
) -> CauseObservation:
    if deficit is not None and rng.random() < confidence:
        return CauseObservation(deficit[0], True)
    return CauseObservation(CauseLabel.UNKNOWN, False)


def sample_episode(
    scenario: Scenario,
    state: RoundState,
    task_type: TaskType,
    rng: random.Random,
    *,
    episode_id: str,
    config: EngineConfig,
) -> EpisodeTrace:
    """Run one episode against the ground truth with the current state fixed.

    Phases run in order; each routes an executor, retrieves skills, invokes
    the phase-matching ones, and draws a Bernoulli success.  The episode
    succeeds only if every phase does.  On failure the dominant deficit is
    emitted as a cause observation, confidently with the scenario's
    observation probability.
    """
    epsilon = (
        config.routing_noise
        if config.routing_noise is not None
        else scenario.routing_noise
    )
    total = len(task_type.phases)
    slices: list[ExecutorSlice] = []
    completed = 0
    observation: CauseObservation | None = None

    for phase in task_type.phases:
        pair = (task_type.id, phase)
        try:
            executor_id = select_executor(
                state.q_exec, state, task_type.id, phase, rng, epsilon
            )
        except RoutingError:
            observation = CauseObservation(CauseLabel.BAD_EXECUTOR_ASSIGNMENT, True)
            break
        executor = state.executors[executor_id]

        selected = frozenset(
            select_skills(
                state.q_skill, state, task_type.id, phase, executor, config.top_k
            )
        )
        invoked = frozenset(
            sid for sid in selected if state.library[sid].applies_to(pair)
        )
        realized_actions = frozenset(
            step for sid in invoked for step in state.library[sid].steps
        )
        pattern_supported = frozenset(
            sid
            for sid in selected - invoked
            if set(state.library[sid].steps) <= realized_actions
        )
        used = invoked | pattern_supported
        slices.append(
            ExecutorSlice(executor_id, phase, selected, invoked, pattern_supported)
        )

        p = ground_truth_success_prob(
            scenario, state.library, task_type.id, phase, executor, sorted(used)
        )
        if rng.random() < p:
            completed += 1
            continue
        deficit = _dominant_deficit(
            scenario, state.library, executor, task_type.id, phase, used
        )
        observation = _observe_cause(deficit, rng, scenario.cause_confidence)
        break

    outcome = 1 if completed == total else 0
    return EpisodeTrace(
        episode_id=episode_id,
        task_type=task_type,
        slices=tuple(slices),
        outcome=outcome,
        progress=q12(completed / total),
        latent_cause_observation=observation if outcome == 0 else None,
    )


def _weighted_choice(
    rng: random.Random, tasks: Sequence[TaskType], weights: Mapping[str, float]
) -> TaskType:
    total = sum(weights[t.id] for t in tasks)
    mark = rng.random() * total
    acc = 0.0
    for task in tasks:
        acc += weights[task.id]
        if mark < acc:
            return task
    return tasks[-1]


def exec_round(
    state: RoundState,
    scenario: Scenario,
    n_episodes: int,
    seed: int,
    config: EngineConfig,
    *,
    id_prefix: str = "",
) -> tuple[EpisodeTrace, ...]:
    """Execute a batch of episodes with the state held fixed.

    Execution is read-only over the state.  Episode i draws from its own
    stream derived from (seed, i), so the batch is reproducible and safe to
    parallelize; results merge in episode-id order either way.
    """
    if n_episodes < 1:
        raise ValueError("a round needs at least one episode")
    traces = []
    for i in range(n_episodes):
        rng = substream(seed, "episode", i)
        task = _weighted_choice(rng, scenario.task_types, scenario.task_weights)
        traces.append(
            sample_episode(
                scenario,
                state,
                task,
                rng,
                episode_id=f"{id_prefix}e{i:05d}",
                config=config,
            )
        )
    return tuple(traces)
