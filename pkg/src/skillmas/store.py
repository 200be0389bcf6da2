"""Persistence: scenario files, state snapshots, trace logs.

Scenario files are a line-oriented sectioned text format so parse errors can
point at the offending line.  Snapshots are a versioned record stream with
records sorted by id; serialize/deserialize is an exact round trip.  Trace
logs are append-only JSON lines with a monotonic episode-id check.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .config import EngineConfig, config_from_mapping
from .model import (
    BoundedTag,
    CauseLabel,
    CauseObservation,
    EpisodeTrace,
    Executor,
    ExecutorSlice,
    Pair,
    PolicyCard,
    RoundState,
    Skill,
    SkillStatus,
    TaskType,
    UtilityTable,
    validate_state,
)
from .numfmt import fmt
from .world import LatentSkill, Scenario

SNAPSHOT_VERSION = 1
SNAPSHOT_HEADER = "skillmas-state"

_TOKEN = re.compile(r"^[A-Za-z0-9_.:+-]+$")


class StoreError(ValueError):
    """A persistence operation failed; carries a byte offset when parsing."""

    def __init__(self, message: str, *, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ScenarioError(ValueError):
    """A scenario file is invalid; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class ScenarioPack:
    """A parsed scenario file: world model, seed state, and thresholds."""

    scenario: Scenario
    seed_state: RoundState
    config: EngineConfig
    text: str


# ---------------------------------------------------------------------------
# scenario files


def _parse_pair(text: str, line: int) -> Pair:
    if text.count("/") != 1:
        raise ScenarioError(f"expected task/phase, got {text!r}", line)
    task, phase = text.split("/")
    if not task or not phase:
        raise ScenarioError(f"expected task/phase, got {text!r}", line)
    return (task, phase)


def _parse_pairs(text: str, line: int) -> frozenset[Pair]:
    if text == "-":
        return frozenset()
    return frozenset(_parse_pair(part, line) for part in text.split(",") if part)


def _split_kv(text: str, line: int) -> tuple[str, str]:
    if "=" not in text:
        raise ScenarioError(f"expected 'key = value', got {text!r}", line)
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


_SEED_OPT = re.compile(r"(\w[\w-]*)=(\S+)")


def _parse_executor_line(
    body: str, line: int, universe: frozenset[Pair]
) -> tuple[frozenset[Pair], int, bool]:
    """Parse '<boundary> [capacity=N] [manager]' into (boundary, capacity, manager)."""
    parts = body.split()
    if not parts:
        raise ScenarioError("executor needs '<id> = <boundary> [capacity=N] [manager]'", line)
    boundary_text = parts[0]
    boundary = universe if boundary_text == "*" else _parse_pairs(boundary_text, line)
    unknown = boundary - universe
    if unknown:
        raise ScenarioError(f"boundary pairs {sorted(unknown)} not in the task space", line)
    capacity = 4
    manager = False
    for part in parts[1:]:
        if part == "manager":
            manager = True
        else:
            match = _SEED_OPT.fullmatch(part)
            if not match or match.group(1) != "capacity":
                raise ScenarioError(f"unknown executor option {part!r}", line)
            capacity = int(match.group(2))
    return frozenset(boundary), capacity, manager


def _parse_skill_line(body: str, line: int) -> dict[str, object]:
    fields: dict[str, object] = {
        "guards": frozenset(),
        "checks": frozenset(),
        "status": SkillStatus.SEEDED,
    }
    for part in body.split():
        match = _SEED_OPT.fullmatch(part)
        if not match:
            raise ScenarioError(f"expected key=value, got {part!r}", line)
        key, value = match.group(1), match.group(2)
        if key == "owner":
            fields["owner"] = value
        elif key == "applies":
            fields["applicability"] = _parse_pairs(value, line)
        elif key == "steps":
            fields["steps"] = tuple(t for t in value.split(",") if t)
        elif key == "guards":
            fields["guards"] = frozenset(t for t in value.split(",") if t and t != "-")
        elif key == "checks":
            fields["checks"] = frozenset(t for t in value.split(",") if t and t != "-")
        elif key == "status":
            try:
                fields["status"] = SkillStatus(value)
            except ValueError:
                raise ScenarioError(f"unknown skill status {value!r}", line) from None
        else:
            raise ScenarioError(f"unknown skill option {key!r}", line)
    for required in ("owner", "applicability", "steps"):
        if required not in fields:
            raise ScenarioError(f"skill line missing {required!r}", line)
    return fields


def parse_scenario(text: str, name: str = "scenario") -> ScenarioPack:
    """Parse a scenario document into (world, seed state, thresholds)."""
    sections = {
        "tasks": [],
        "difficulty": [],
        "latent": [],
        "penalties": [],
        "seed-state": [],
        "thresholds": [],
    }
    section: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in sections:
                raise ScenarioError(f"unknown section [{section}]", lineno)
            continue
        if section is None:
            raise ScenarioError("content before the first section header", lineno)
        sections[section].append((lineno, stripped))

    tasks: list[TaskType] = []
    weights: dict[str, float] = {}
    for lineno, entry in sections["tasks"]:
        key, value = _split_kv(entry, lineno)
        if "|" not in value:
            raise ScenarioError("task needs '<phases...> | <weight>'", lineno)
        phases_text, weight_text = value.rsplit("|", 1)
        phases = tuple(phases_text.split())
        if not phases:
            raise ScenarioError(f"task {key!r} has no phases", lineno)
        try:
            weight = float(weight_text)
        except ValueError:
            raise ScenarioError(f"bad weight {weight_text.strip()!r}", lineno) from None
        if any(t.id == key for t in tasks):
            raise ScenarioError(f"duplicate task {key!r}", lineno)
        tasks.append(TaskType(key, phases))
        weights[key] = weight
    if not tasks:
        raise ScenarioError("scenario defines no tasks", 1)
    universe = frozenset(pair for t in tasks for pair in t.pairs())

    difficulty: dict[Pair, float] = {}
    for lineno, entry in sections["difficulty"]:
        key, value = _split_kv(entry, lineno)
        pair = _parse_pair(key, lineno)
        if pair not in universe:
            raise ScenarioError(f"difficulty for unknown pair {key!r}", lineno)
        try:
            difficulty[pair] = float(value)
        except ValueError:
            raise ScenarioError(f"bad difficulty {value!r}", lineno) from None

    latents: list[LatentSkill] = []
    for lineno, entry in sections["latent"]:
        key, value = _split_kv(entry, lineno)
        parts = value.split()
        if len(parts) != 3:
            raise ScenarioError("latent needs '<task/phase> <effect> <cause>'", lineno)
        pair = _parse_pair(parts[0], lineno)
        if pair not in universe:
            raise ScenarioError(f"latent pair {parts[0]!r} not in the task space", lineno)
        try:
            effect = float(parts[1])
        except ValueError:
            raise ScenarioError(f"bad effect {parts[1]!r}", lineno) from None
        try:
            cause = CauseLabel(parts[2])
        except ValueError:
            raise ScenarioError(f"unknown cause {parts[2]!r}", lineno) from None
        latents.append(LatentSkill(key, pair, effect, cause))

    penalties = {
        "interference": 0.0,
        "overload": 0.0,
        "routing-noise": 0.1,
        "cause-confidence": 0.9,
    }
    for lineno, entry in sections["penalties"]:
        key, value = _split_kv(entry, lineno)
        if key not in penalties:
            raise ScenarioError(f"unknown penalty {key!r}", lineno)
        try:
            penalties[key] = float(value)
        except ValueError:
            raise ScenarioError(f"bad penalty value {value!r}", lineno) from None

    scenario = Scenario(
        name=name,
        task_types=tuple(tasks),
        task_weights=weights,
        base_difficulty=difficulty,
        latent_catalog=tuple(latents),
        interference_weight=penalties["interference"],
        overload_weight=penalties["overload"],
        routing_noise=penalties["routing-noise"],
        cause_confidence=penalties["cause-confidence"],
    )

    executors: dict[str, Executor] = {}
    skills: dict[str, Skill] = {}
    cards: list[PolicyCard] = []
    for lineno, entry in sections["seed-state"]:
        kind, rest = (entry.split(None, 1) + [""])[:2]
        if kind == "executor":
            ident, body = _split_kv(rest, lineno)
            boundary, capacity, manager = _parse_executor_line(body, lineno, universe)
            executors[ident] = Executor(
                id=ident, boundary=boundary, capacity=capacity, is_manager=manager
            )
        elif kind == "skill":
            ident, body = _split_kv(rest, lineno)
            fields = _parse_skill_line(body, lineno)
            skills[ident] = Skill(id=ident, **fields)  # type: ignore[arg-type]
        elif kind == "card":
            ident, body = _split_kv(rest, lineno)
            parts = body.split()
            if len(parts) not in (3, 4):
                raise ScenarioError(
                    "card needs '<task> <cause> <tag> [template]'", lineno
                )
            try:
                cause = CauseLabel(parts[1])
                tag = BoundedTag(parts[2])
            except ValueError as exc:
                raise ScenarioError(str(exc), lineno) from None
            cards.append(
                PolicyCard(
                    id=ident,
                    task_type=parts[0],
                    cause=cause,
                    recommended_tag=tag,
                    template_skill=parts[3] if len(parts) == 4 else None,
                )
            )
        else:
            raise ScenarioError(f"unknown seed-state entry {kind!r}", lineno)

    owned: dict[str, set[str]] = {eid: set() for eid in executors}
    for skill in skills.values():
        if skill.owner not in executors:
            raise ScenarioError(f"skill {skill.id!r} owned by unknown executor", 1)
        owned[skill.owner].add(skill.id)
    executors = {
        eid: Executor(
            id=e.id,
            boundary=e.boundary,
            owned_skills=frozenset(owned[eid]),
            capacity=e.capacity,
            is_manager=e.is_manager,
        )
        for eid, e in executors.items()
    }
    pool = {
        sid: (0, 0) for sid, s in skills.items() if s.status is SkillStatus.POOLED
    }
    seed_state = RoundState(
        round_index=0,
        library=skills,
        executors=executors,
        q_skill=UtilityTable(),
        q_exec=UtilityTable(),
        pool=pool,
        policy_index=tuple(sorted(cards, key=lambda c: c.id)),
    )
    try:
        validate_state(seed_state, scenario.universe())
    except Exception as exc:
        raise ScenarioError(f"seed state invalid: {exc}", 1) from None

    config = EngineConfig()
    for lineno, entry in sections["thresholds"]:
        key, value = _split_kv(entry, lineno)
        try:
            config = config_from_mapping({key: value}, base=config)
        except ValueError as exc:
            raise ScenarioError(str(exc), lineno) from None

    return ScenarioPack(scenario=scenario, seed_state=seed_state, config=config, text=text)


def load_scenario(path: str | Path) -> ScenarioPack:
    path = Path(path)
    if not path.exists():
        raise StoreError(f"scenario file {path} does not exist")
    return parse_scenario(path.read_text(encoding="utf-8"), name=path.stem)


# ---------------------------------------------------------------------------
# state snapshots


def _check_token(token: str) -> str:
    if not _TOKEN.fullmatch(token):
        raise StoreError(f"token {token!r} is not snapshot-safe")
    return token


def _join(values: Iterable[str]) -> str:
    items = sorted(_check_token(v) for v in values)
    return ",".join(items) if items else "-"


def _join_pairs(pairs: Iterable[Pair]) -> str:
    items = sorted(f"{t}/{p}" for t, p in pairs)
    return ",".join(items) if items else "-"


def serialize_state(state: RoundState) -> str:
    """Render a round state as a sorted, versioned record stream."""
    lines = [f"{SNAPSHOT_HEADER} v{SNAPSHOT_VERSION}", f"round {state.round_index}"]
    for sid in sorted(state.library):
        s = state.library[sid]
        steps = ",".join(_check_token(t) for t in s.steps)
        lines.append(
            f"skill {_check_token(sid)} owner={_check_token(s.owner)} "
            f"status={s.status.value} applies={_join_pairs(s.applicability)} "
            f"steps={steps} guards={_join(s.guards)} checks={_join(s.checks)}"
        )
    for eid in sorted(state.executors):
        e = state.executors[eid]
        lines.append(
            f"executor {_check_token(eid)} manager={int(e.is_manager)} "
            f"capacity={e.capacity} boundary={_join_pairs(e.boundary)} "
            f"owns={_join(e.owned_skills)}"
        )
    for (key, task_id), (value, count) in state.q_skill.sorted_entries():
        lines.append(f"qskill {key} {task_id} {fmt(value)} {count}")
    for (key, task_id), (value, count) in state.q_exec.sorted_entries():
        lines.append(f"qexec {key} {task_id} {fmt(value)} {count}")
    for sid in sorted(state.pool):
        uses, successes = state.pool[sid]
        lines.append(f"pool {sid} {uses} {successes}")
    for card in sorted(state.policy_index, key=lambda c: c.id):
        template = card.template_skill or "-"
        lines.append(
            f"card {_check_token(card.id)} {card.task_type} {card.cause.value} "
            f"{card.recommended_tag.value} {template}"
        )
    lines.append("end")
    return "\n".join(lines) + "\n"


def _split_pairs(text: str, offset: int) -> frozenset[Pair]:
    if text == "-":
        return frozenset()
    pairs = set()
    for part in text.split(","):
        if part.count("/") != 1:
            raise StoreError(f"bad pair {part!r}", offset=offset)
        t, p = part.split("/")
        pairs.add((t, p))
    return frozenset(pairs)


def _split_set(text: str) -> frozenset[str]:
    return frozenset() if text == "-" else frozenset(text.split(","))


def _opts(parts: Sequence[str], offset: int) -> dict[str, str]:
    values = {}
    for part in parts:
        if "=" not in part:
            raise StoreError(f"expected key=value, got {part!r}", offset=offset)
        key, value = part.split("=", 1)
        values[key] = value
    return values


def deserialize_state(text: str) -> RoundState:
    """Parse a snapshot; any malformation raises with the byte offset."""
    offset = 0
    lines = []
    for raw in text.splitlines(keepends=True):
        lines.append((offset, raw.rstrip("\n")))
        offset += len(raw.encode("utf-8"))

    if not lines:
        raise StoreError("empty snapshot stream", offset=0)
    first_offset, header = lines[0]
    parts = header.split()
    if len(parts) != 2 or parts[0] != SNAPSHOT_HEADER or not parts[1].startswith("v"):
        raise StoreError(f"not a state snapshot: {header!r}", offset=first_offset)
    version = parts[1][1:]
    if version != str(SNAPSHOT_VERSION):
        raise StoreError(
            f"snapshot version mismatch: file v{version}, supported v{SNAPSHOT_VERSION}"
        )

    round_index: int | None = None
    library: dict[str, Skill] = {}
    executors: dict[str, Executor] = {}
    s_entries: dict[tuple[str, str], tuple[float, int]] = {}
    a_entries: dict[tuple[str, str], tuple[float, int]] = {}
    pool: dict[str, tuple[int, int]] = {}
    cards: list[PolicyCard] = []
    ended = False

    for offset, line in lines[1:]:
        if not line:
            continue
        if ended:
            raise StoreError("content after end marker", offset=offset)
        kind, *rest = line.split()
        try:
            if kind == "round":
                round_index = int(rest[0])
            elif kind == "skill":
                sid = rest[0]
                opts = _opts(rest[1:], offset)
                library[sid] = Skill(
                    id=sid,
                    applicability=_split_pairs(opts["applies"], offset),
                    steps=tuple(opts["steps"].split(",")),
                    guards=_split_set(opts["guards"]),
                    checks=_split_set(opts["checks"]),
                    status=SkillStatus(opts["status"]),
                    owner=opts["owner"],
                )
            elif kind == "executor":
                eid = rest[0]
                opts = _opts(rest[1:], offset)
                executors[eid] = Executor(
                    id=eid,
                    boundary=_split_pairs(opts["boundary"], offset),
                    owned_skills=_split_set(opts["owns"]),
                    capacity=int(opts["capacity"]),
                    is_manager=bool(int(opts["manager"])),
                )
            elif kind == "qskill":
                key, task_id, value, count = rest
                s_entries[(key, task_id)] = (float(value), int(count))
            elif kind == "qexec":
                key, task_id, value, count = rest
                a_entries[(key, task_id)] = (float(value), int(count))
            elif kind == "pool":
                sid, uses, successes = rest
                pool[sid] = (int(uses), int(successes))
            elif kind == "card":
                ident, task_id, cause, tag, template = rest
                cards.append(
                    PolicyCard(
                        id=ident,
                        task_type=task_id,
                        cause=CauseLabel(cause),
                        recommended_tag=BoundedTag(tag),
                        template_skill=None if template == "-" else template,
                    )
                )
            elif kind == "end":
                ended = True
            else:
                raise StoreError(f"unknown record {kind!r}", offset=offset)
        except StoreError:
            raise
        except (KeyError, ValueError, IndexError) as exc:
            raise StoreError(f"malformed {kind} record: {exc}", offset=offset) from None

    if not ended or round_index is None:
        raise StoreError("truncated snapshot stream: no end marker", offset=offset)
    return RoundState(
        round_index=round_index,
        library=library,
        executors=executors,
        q_skill=UtilityTable(s_entries),
        q_exec=UtilityTable(a_entries),
        pool=pool,
        policy_index=tuple(cards),
    )


# ---------------------------------------------------------------------------
# trace logs


def trace_to_record(trace: EpisodeTrace) -> dict[str, object]:
    obs = trace.latent_cause_observation
    return {
        "episode": trace.episode_id,
        "task": {"id": trace.task_type.id, "phases": list(trace.task_type.phases)},
        "outcome": trace.outcome,
        "progress": trace.progress,
        "cause": (
            {"label": obs.cause.value, "confident": obs.confident} if obs else None
        ),
        "slices": [
            {
                "executor": sl.executor,
                "phase": sl.phase,
                "selected": sorted(sl.selected),
                "invoked": sorted(sl.invoked),
                "pattern": sorted(sl.pattern_supported),
            }
            for sl in trace.slices
        ],
    }


def trace_from_record(record: Mapping[str, object]) -> EpisodeTrace:
    task = record["task"]
    obs = record["cause"]
    return EpisodeTrace(
        episode_id=record["episode"],  # type: ignore[arg-type]
        task_type=TaskType(task["id"], tuple(task["phases"])),  # type: ignore[index]
        slices=tuple(
            ExecutorSlice(
                executor=sl["executor"],
                phase=sl["phase"],
                selected=frozenset(sl["selected"]),
                invoked=frozenset(sl["invoked"]),
                pattern_supported=frozenset(sl["pattern"]),
            )
            for sl in record["slices"]  # type: ignore[union-attr]
        ),
        outcome=record["outcome"],  # type: ignore[arg-type]
        progress=record["progress"],  # type: ignore[arg-type]
        latent_cause_observation=(
            CauseObservation(CauseLabel(obs["label"]), obs["confident"])  # type: ignore[index]
            if obs
            else None
        ),
    )


def _last_episode_id(path: Path) -> str | None:
    if not path.exists() or path.stat().st_size == 0:
        return None
    last = None
    with path.open("r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                last = line
    if last is None:
        return None
    return json.loads(last)["episode"]


def append_trace_log(traces: Sequence[EpisodeTrace], path: str | Path) -> None:
    """Append one JSON record per episode; episode ids must stay increasing."""
    path = Path(path)
    previous = _last_episode_id(path)
    with path.open("a", encoding="utf-8") as handle:
        for trace in traces:
            if previous is not None and trace.episode_id <= previous:
                raise StoreError(
                    f"episode {trace.episode_id!r} does not follow {previous!r}"
                )
            handle.write(
                json.dumps(trace_to_record(trace), sort_keys=True, separators=(",", ":"))
                + "\n"
            )
            previous = trace.episode_id


def read_trace_log(path: str | Path) -> tuple[EpisodeTrace, ...]:
    """Read a trace log back; out-of-order episode ids are an integrity error."""
    path = Path(path)
    if not path.exists():
        raise StoreError(f"trace log {path} does not exist")
    traces = []
    previous: str | None = None
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise StoreError(f"trace log line {lineno} is not valid JSON: {exc}") from None
        trace = trace_from_record(record)
        if previous is not None and trace.episode_id <= previous:
            raise StoreError(
                f"trace log line {lineno}: episode {trace.episode_id!r} "
                f"out of order after {previous!r}"
            )
        traces.append(trace)
        previous = trace.episode_id
    return tuple(traces)
