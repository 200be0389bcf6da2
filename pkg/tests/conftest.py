from __future__ import annotations

import random

import pytest

from skillmas.config import EngineConfig
from skillmas.model import (
    CauseLabel,
    Executor,
    RoundState,
    Skill,
    SkillStatus,
    TaskType,
    UtilityTable,
)
from skillmas.world import LatentSkill, Scenario

CAUSES = [c for c in CauseLabel if c is not CauseLabel.UNKNOWN]


def make_skill(
    skill_id: str,
    pairs=(("t1", "p1"),),
    steps=("go", "do"),
    guards=(),
    checks=(),
    status=SkillStatus.SEEDED,
    owner="worker",
) -> Skill:
    return Skill(
        id=skill_id,
        applicability=frozenset(pairs),
        steps=tuple(steps),
        guards=frozenset(guards),
        checks=frozenset(checks),
        status=status,
        owner=owner,
    )


def make_state(
    skills=(),
    executors=None,
    tasks=(TaskType("t1", ("p1", "p2")),),
    q_skill=None,
    q_exec=None,
    pool=None,
    cards=(),
    round_index=0,
) -> RoundState:
    universe = frozenset(pair for task in tasks for pair in task.pairs())
    library = {s.id: s for s in skills}
    if executors is None:
        owned = frozenset(s.id for s in skills if s.owner == "worker")
        executors = [
            Executor("manager", universe, frozenset(
                s.id for s in skills if s.owner == "manager"
            ), capacity=8, is_manager=True),
            Executor("worker", universe, owned, capacity=8),
        ]
    return RoundState(
        round_index=round_index,
        library=library,
        executors={e.id: e for e in executors},
        q_skill=q_skill or UtilityTable(),
        q_exec=q_exec or UtilityTable(),
        pool=dict(pool or {}),
        policy_index=tuple(cards),
    )


def random_scenario(rng: random.Random, name: str = "fuzz") -> tuple[Scenario, RoundState]:
    """A small randomized world plus a consistent seed state, for property tests."""
    n_tasks = rng.randint(1, 3)
    tasks = []
    weights = {}
    for t in range(n_tasks):
        phases = tuple(f"p{i}" for i in range(rng.randint(1, 3)))
        tasks.append(TaskType(f"task{t}", phases))
        weights[f"task{t}"] = rng.uniform(0.5, 2.0)
    universe = [pair for task in tasks for pair in task.pairs()]

    difficulty = {pair: rng.uniform(-1.5, 1.5) for pair in universe}
    latents = []
    for i, pair in enumerate(universe):
        if rng.random() < 0.6:
            latents.append(
                LatentSkill(
                    f"lat{i}",
                    pair,
                    rng.uniform(1.0, 3.0),
                    rng.choice(CAUSES),
                )
            )
    scenario = Scenario(
        name=name,
        task_types=tuple(tasks),
        task_weights=weights,
        base_difficulty=difficulty,
        latent_catalog=tuple(latents),
        interference_weight=rng.uniform(0.0, 0.6),
        overload_weight=rng.uniform(0.0, 0.8),
        routing_noise=rng.uniform(0.0, 0.3),
        cause_confidence=rng.uniform(0.5, 1.0),
    )

    executors = {
        "manager": Executor(
            "manager", frozenset(universe), frozenset(), capacity=rng.randint(2, 6),
            is_manager=True,
        )
    }
    n_workers = rng.randint(1, 2)
    library = {}
    for w in range(n_workers):
        wid = f"worker{w}"
        region = frozenset(rng.sample(universe, rng.randint(1, len(universe))))
        owned = set()
        for s in range(rng.randint(0, 2)):
            sid = f"seed-{wid}-{s}"
            pairs = frozenset(rng.sample(sorted(region), rng.randint(1, len(region))))
            library[sid] = Skill(
                id=sid,
                applicability=pairs,
                steps=tuple(f"act{rng.randint(0, 5)}" for _ in range(rng.randint(1, 3))),
                guards=frozenset({f"g{rng.randint(0, 3)}"} if rng.random() < 0.5 else set()),
                status=SkillStatus.SEEDED,
                owner=wid,
            )
            owned.add(sid)
        executors[wid] = Executor(
            wid, region, frozenset(owned), capacity=rng.randint(1, 5)
        )
    state = RoundState(
        round_index=0,
        library=library,
        executors=executors,
        q_skill=UtilityTable(),
        q_exec=UtilityTable(),
        pool={},
        policy_index=(),
    )
    return scenario, state


@pytest.fixture
def config() -> EngineConfig:
    return EngineConfig()
