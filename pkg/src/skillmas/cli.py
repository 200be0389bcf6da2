"""Command-line surface: run, eval, transplant, report, replay.

Every artifact a run writes is a deterministic function of (scenario, seed,
config); `replay` re-executes a run directory and diffs the regenerated
bytes against what is on disk, so determinism is an executable check, not a
promise.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
from pathlib import Path

from .config import EngineConfig, config_from_mapping
from .model import StateError
from .orchestrator import (
    ExperimentResult,
    canonical_json,
    evaluate_state,
    evaluate_transplants,
    render_breakdown,
    render_comparison,
    render_trajectory,
    run_experiment,
    task_family_breakdown,
)
from .presets import load_preset
from .store import (
    ScenarioError,
    ScenarioPack,
    StoreError,
    deserialize_state,
    load_scenario,
    read_trace_log,
    serialize_state,
    trace_to_record,
)
from .streams import derive_seed


class UsageError(Exception):
    pass


def _load_pack(source: str) -> ScenarioPack:
    if source.startswith("preset:"):
        try:
            return load_preset(source.split(":", 1)[1])
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from None
    try:
        return load_scenario(source)
    except ScenarioError as exc:
        raise UsageError(f"{source}: {exc}") from None
    except StoreError as exc:
        raise UsageError(str(exc)) from None


def _load_config(
    pack: ScenarioPack, args: argparse.Namespace, *, episodes_override: bool = False
) -> EngineConfig:
    config = pack.config
    override_path = getattr(args, "config", None)
    if override_path:
        try:
            overrides = json.loads(Path(override_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file {override_path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{override_path}: invalid JSON: {exc}") from None
        try:
            config = config_from_mapping(overrides, base=config)
        except ValueError as exc:
            raise UsageError(f"{override_path}: {exc}") from None
    if episodes_override and args.episodes is not None:
        config = config.replace(episodes_per_round=args.episodes)
    return config


def _default_out(scenario_name: str, seed: int) -> Path:
    base = os.environ.get("SKILLMAS_OUT", "runs")
    return Path(base) / f"{scenario_name}-{seed}"


def _snapshot_name(round_index: int) -> str:
    return f"snapshots/state_r{round_index:03d}.txt"


def run_artifacts(
    pack: ScenarioPack, seed: int, rounds: int, config: EngineConfig
) -> tuple[dict[str, str], ExperimentResult]:
    """Produce every run artifact as path -> text; shared by run and replay."""
    result = run_experiment(pack.scenario, pack.seed_state, seed, rounds, config)
    artifacts: dict[str, str] = {}
    artifacts["trajectory.json"] = result.report.to_json()
    artifacts["trajectory.txt"] = render_trajectory(result.report)
    artifacts["checkpoint.json"] = canonical_json(
        {
            "round": result.report.checkpoint_round,
            "successes": result.report.rounds[result.report.checkpoint_round].successes,
            "snapshot": _snapshot_name(result.report.checkpoint_round),
        }
    )
    for index, state in enumerate(result.states):
        artifacts[_snapshot_name(index)] = serialize_state(state)
    log = io.StringIO()
    for batch in result.traces_by_round:
        for trace in batch:
            log.write(
                json.dumps(trace_to_record(trace), sort_keys=True, separators=(",", ":"))
                + "\n"
            )
    artifacts["traces.jsonl"] = log.getvalue()
    return artifacts, result


def _write_run_dir(
    out: Path, pack: ScenarioPack, seed: int, rounds: int, config: EngineConfig
) -> ExperimentResult:
    artifacts, result = run_artifacts(pack, seed, rounds, config)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    (out / "scenario.scn").write_text(pack.text, encoding="utf-8")
    (out / "run.json").write_text(
        canonical_json(
            {
                "format": 1,
                "scenario": "scenario.scn",
                "scenario_name": pack.scenario.name,
                "seed": seed,
                "rounds": rounds,
                "config": config.to_dict(),
            }
        ),
        encoding="utf-8",
    )
    for rel, content in sorted(artifacts.items()):
        target = out / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(content, encoding="utf-8")
    return result


def _load_run_dir(run_dir: Path) -> tuple[ScenarioPack, int, int, EngineConfig]:
    manifest_path = run_dir / "run.json"
    if not manifest_path.exists():
        raise UsageError(f"{run_dir} is not a run directory (missing run.json)")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    scenario_text = (run_dir / manifest["scenario"]).read_text(encoding="utf-8")
    from .store import parse_scenario

    pack = parse_scenario(scenario_text, name=manifest.get("scenario_name", "scenario"))
    config = config_from_mapping(manifest["config"])
    return pack, manifest["seed"], manifest["rounds"], config


def cmd_run(args: argparse.Namespace) -> int:
    if args.rounds < 1:
        raise UsageError("--rounds must be at least 1")
    if args.episodes is not None and args.episodes < 1:
        raise UsageError("--episodes must be at least 1")
    pack = _load_pack(args.scenario)
    config = _load_config(pack, args, episodes_override=True)
    out = Path(args.out) if args.out else _default_out(pack.scenario.name, args.seed)
    result = _write_run_dir(out, pack, args.seed, args.rounds, config)
    if not args.quiet:
        print(render_trajectory(result.report), end="")
        print(f"run directory: {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    if args.episodes < 1:
        raise UsageError("--episodes must be at least 1")
    pack = _load_pack(args.scenario)
    config = _load_config(pack, args)
    try:
        state = deserialize_state(Path(args.state).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"snapshot {args.state} does not exist") from None
    traces = evaluate_state(
        state, pack.scenario, args.episodes, derive_seed(args.seed, "eval"), config
    )
    rows = task_family_breakdown(traces)
    successes = sum(t.outcome for t in traces)
    print(render_breakdown(rows), end="")
    print(f"total: {successes}/{len(traces)}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(
            canonical_json(
                {
                    "episodes": len(traces),
                    "successes": successes,
                    "per_family": {
                        r.task_type: {"successes": r.successes, "attempts": r.attempts}
                        for r in rows
                    },
                }
            ),
            encoding="utf-8",
        )
    return 0


def cmd_transplant(args: argparse.Namespace) -> int:
    if args.episodes < 1:
        raise UsageError("--episodes must be at least 1")
    run_dir = Path(args.run)
    pack, seed, rounds, config = _load_run_dir(run_dir)
    checkpoint = json.loads((run_dir / "checkpoint.json").read_text(encoding="utf-8"))
    final_state = deserialize_state(
        (run_dir / checkpoint["snapshot"]).read_text(encoding="utf-8")
    )
    seed_state = deserialize_state(
        (run_dir / _snapshot_name(0)).read_text(encoding="utf-8")
    )
    table = evaluate_transplants(
        pack.scenario, final_state, seed_state, seed, args.episodes, config
    )
    print(render_comparison(table), end="")
    (run_dir / "transplant.json").write_text(
        canonical_json(table.to_dict()), encoding="utf-8"
    )
    (run_dir / "transplant.txt").write_text(render_comparison(table), encoding="utf-8")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    trajectory_path = run_dir / "trajectory.json"
    if not trajectory_path.exists():
        raise UsageError(f"{run_dir} has no trajectory.json")
    trajectory = json.loads(trajectory_path.read_text(encoding="utf-8"))
    checkpoint_round = trajectory["checkpoint"]["round"]

    traces = read_trace_log(run_dir / "traces.jsonl")
    seed_traces = [t for t in traces if t.episode_id.startswith("r0000")]
    best_traces = [
        t for t in traces if t.episode_id.startswith(f"r{checkpoint_round:04d}")
    ]

    lines = [f"{'R':>2}  {'Success':<16} {'Skills':>6}  {'Executors':>9}  Event"]
    for row in trajectory["rounds"]:
        event = row["restructure"].get("action", "keep")
        marker = " *" if row["round"] == checkpoint_round else ""
        success = f"{row['successes']}/{row['episodes']}"
        rate = 100.0 * row["successes"] / row["episodes"] if row["episodes"] else 0.0
        lines.append(
            f"{row['round']:>2}  {success + f' ({rate:.1f}%)':<16} "
            f"{row['active_skills']:>6}  {row['active_executors']:>9}  {event}{marker}"
        )
    print("\n".join(lines))
    print()
    if best_traces:
        rows = task_family_breakdown(best_traces, baseline=seed_traces)
        print(render_breakdown(rows), end="")
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    pack, seed, rounds, config = _load_run_dir(run_dir)
    artifacts, _ = run_artifacts(pack, seed, rounds, config)
    for rel in sorted(artifacts):
        target = run_dir / rel
        if not target.exists():
            print(f"replay divergence: {rel} is missing from the run directory")
            return 1
        stored = target.read_text(encoding="utf-8")
        expected = artifacts[rel]
        if stored != expected:
            stored_lines = stored.splitlines()
            expected_lines = expected.splitlines()
            for number, (got, want) in enumerate(
                zip(stored_lines, expected_lines), start=1
            ):
                if got != want:
                    print(
                        f"replay divergence in {rel} at line {number}:\n"
                        f"  stored:   {got}\n"
                        f"  expected: {want}"
                    )
                    return 1
            print(
                f"replay divergence in {rel}: length mismatch "
                f"({len(stored_lines)} stored vs {len(expected_lines)} expected lines)"
            )
            return 1
    print(f"replay clean: {len(artifacts)} artifacts match")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skillmas",
        description="Deterministic coupled-adaptation engine on synthetic task worlds",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a multi-round adaptation experiment")
    run.add_argument("--scenario", required=True, help="scenario file or preset:<name>")
    run.add_argument("--seed", type=int, required=True)
    run.add_argument("--rounds", type=int, required=True)
    run.add_argument("--out", help="run directory (default $SKILLMAS_OUT/<name>-<seed>)")
    run.add_argument("--config", help="JSON file with threshold overrides")
    run.add_argument("--episodes", type=int, help="episodes per round override")
    run.add_argument("--quiet", action="store_true")
    run.set_defaults(handler=cmd_run)

    ev = sub.add_parser("eval", help="evaluate a state snapshot, no adaptation")
    ev.add_argument("--scenario", required=True)
    ev.add_argument("--state", required=True, help="state snapshot file")
    ev.add_argument("--episodes", type=int, default=100)
    ev.add_argument("--seed", type=int, required=True)
    ev.add_argument("--config", help="JSON file with threshold overrides")
    ev.add_argument("--out", help="write the success table as JSON here")
    ev.set_defaults(handler=cmd_eval)

    tr = sub.add_parser("transplant", help="cross-transplant stress test on a run")
    tr.add_argument("--run", required=True, help="completed run directory")
    tr.add_argument("--episodes", type=int, default=60)
    tr.set_defaults(handler=cmd_transplant)

    rep = sub.add_parser("report", help="trajectory and task-family tables for a run")
    rep.add_argument("--run", required=True)
    rep.set_defaults(handler=cmd_report)

    re_ = sub.add_parser("replay", help="re-execute a run and diff against stored artifacts")
    re_.add_argument("--run", required=True)
    re_.set_defaults(handler=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ScenarioError, StoreError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
