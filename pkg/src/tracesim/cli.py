"""Command line entry point: ``tracesim run|gen|compile|replay|ctl|schedule``."""

from __future__ import annotations

import argparse
import json
import logging
import socket
import sys
from dataclasses import asdict

from .engine import Engine, EngineFailed, SimConfig
from .eventlog import EventLogError, ReplaySource, compile_events
from .harness import GreedyScheduler, SchedulerClient
from .pipeline import DEFAULT_LOOKAHEAD_MICROS, DEFAULT_MAX_EVENTS
from .protocol import Bye, Control, Hello, LineChannel, ProtocolError, Stats, parse_endpoint
from .synth import SyntheticSpec, generate_trace


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--speed", type=float, default=1.0, help="simulated seconds per wall second (0 = unpaced)")
    p.add_argument("--tick-micros", type=int, default=5_000_000)
    p.add_argument("--offset-micros", type=int, default=600_000_000)
    p.add_argument("--end-micros", type=int, default=None)
    p.add_argument("--buffer-max-events", type=int, default=DEFAULT_MAX_EVENTS)
    p.add_argument("--buffer-lookahead-micros", type=int, default=DEFAULT_LOOKAHEAD_MICROS)
    p.add_argument("--listen", metavar="HOST:PORT")
    p.add_argument("--stats-out")
    p.add_argument("--snapshot-out")
    p.add_argument("--stats-period-ticks", type=int, default=12)
    p.add_argument("--workers", type=int, default=2, help="parser fill threads (0 = inline)")
    p.add_argument("--shadows", type=int, default=0, help="extra in-process greedy shadow schedulers")
    p.add_argument("--no-local-scheduler", action="store_true", help="leave scheduling to remote clients")
    p.add_argument("--authoritative", help="scheduler id that places on the real state")
    p.add_argument("--await-schedulers", type=int, default=0, help="remote schedulers to wait for before starting")
    p.add_argument("--decision-timeout", type=float, default=None, help="seconds to wait for remote decisions")


def _config(args, trace_root=None) -> SimConfig:
    return SimConfig(
        trace_root=trace_root,
        start_offset_micros=args.offset_micros,
        tick_micros=args.tick_micros,
        speed_factor=args.speed,
        lookahead_micros=args.buffer_lookahead_micros,
        max_events=args.buffer_max_events,
        end_time=args.end_micros,
        listen_endpoint=args.listen,
        stats_period_ticks=args.stats_period_ticks,
        workers=args.workers,
        stats_out=args.stats_out,
        snapshot_out=args.snapshot_out,
        authoritative=args.authoritative,
        decision_timeout=args.decision_timeout,
        await_schedulers=args.await_schedulers,
    )


def _schedulers(args) -> list:
    out = [] if args.no_local_scheduler else [GreedyScheduler("greedy")]
    out += [GreedyScheduler(f"shadow-{i}") for i in range(args.shadows)]
    return out


def _report(result) -> None:
    print(json.dumps(
        {
            "state": result.state.value,
            "ticks": result.ticks,
            "snapshot_digest": result.snapshot.digest,
            "final": asdict(result.final),
            "schedulers": result.harness,
        },
        indent=2,
        sort_keys=True,
    ))


def cmd_run(args) -> int:
    engine = Engine(_config(args, args.trace), schedulers=_schedulers(args))
    _report(engine.run())
    return 0


def cmd_replay(args) -> int:
    source = ReplaySource(args.log, args.expect_source_digest)
    engine = Engine(_config(args), source=source, schedulers=_schedulers(args))
    _report(engine.run())
    return 0


def cmd_gen(args) -> int:
    spec = SyntheticSpec(
        nodes=args.nodes,
        tasks=args.tasks,
        duration_micros=args.duration_micros,
        seed=args.seed,
        anomaly_rate=args.anomaly_rate,
        mean_task_micros=args.mean_task_micros,
    )
    m = generate_trace(spec, args.out)
    print(json.dumps({"tables": m["tables"], "injected": m["injected"]}, indent=2, sort_keys=True))
    return 0


def cmd_compile(args) -> int:
    stats = compile_events(args.trace, args.out, workers=args.workers)
    print(json.dumps(
        {"events_written": stats.events_written, "anomalies": stats.anomalies, "source_digest": stats.source_digest},
        indent=2,
        sort_keys=True,
    ))
    return 0


def cmd_ctl(args) -> int:
    argument = None
    if args.command in ("speed", "snapshot"):
        if args.argument is None:
            print(f"ctl {args.command} needs an argument", file=sys.stderr)
            return 2
        argument = float(args.argument) if args.command == "speed" else args.argument
    sock = socket.create_connection(parse_endpoint(args.endpoint), timeout=args.timeout)
    chan = LineChannel(sock)
    try:
        chan.send(Hello("ctl", role="control"))
        reply = chan.recv()
        if not isinstance(reply, Hello):
            print(f"refused: {reply.reason if isinstance(reply, Bye) else reply}", file=sys.stderr)
            return 1
        chan.send(Control(args.command, argument))
        stats = chan.recv()
        if not isinstance(stats, Stats):
            print(f"unexpected reply {stats!r}", file=sys.stderr)
            return 1
        print(json.dumps(
            {"ok": stats.ok, "state": stats.state, "detail": stats.detail,
             "stats": asdict(stats.sample) if stats.sample else None},
            indent=2,
            sort_keys=True,
        ))
        return 0 if stats.ok else 1
    finally:
        chan.close()


def cmd_schedule(args) -> int:
    client = SchedulerClient(args.endpoint, args.id)
    try:
        reason = client.serve(args.max_ticks)
    finally:
        client.close()
    print(json.dumps({"ticks": client.ticks, "placed": client.placed, "refused": client.refused, "ended": reason}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracesim", description="Trace-driven cluster workload simulator")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="replay a trace directory")
    p.add_argument("--trace", required=True)
    _run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen", help="write a seeded synthetic trace")
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--tasks", type=int, required=True)
    p.add_argument("--duration-micros", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--anomaly-rate", type=float, default=0.0)
    p.add_argument("--mean-task-micros", type=int, default=SyntheticSpec.mean_task_micros)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("compile", help="pre-compile a trace into an event log")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=2)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("replay", help="run from a compiled event log")
    p.add_argument("--log", required=True)
    p.add_argument("--expect-source-digest")
    _run_flags(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("ctl", help="control a running simulation")
    p.add_argument("command", choices=("pause", "resume", "speed", "snapshot", "stats", "stop"))
    p.add_argument("argument", nargs="?")
    p.add_argument("--endpoint", required=True)
    p.add_argument("--timeout", type=float, default=60.0)
    p.set_defaults(func=cmd_ctl)

    p = sub.add_parser("schedule", help="connect a greedy scheduler to a running simulation")
    p.add_argument("--endpoint", required=True)
    p.add_argument("--id", default="remote-greedy")
    p.add_argument("--max-ticks", type=int, default=None)
    p.set_defaults(func=cmd_schedule)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (EngineFailed, EventLogError, ProtocolError, OSError, ValueError) as exc:
        print(f"tracesim: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
