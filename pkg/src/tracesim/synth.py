"""Seeded synthetic traces in the six-table cluster-trace layout.

Output is byte-identical for a given :class:`SyntheticSpec`: all randomness
comes from one ``random.Random(seed)``, records are sorted with a stable
sequence number, and gzip headers carry no timestamp or file name.

Deliberate anomalies are *extra* lines added to an otherwise clean trace, so
each one produces exactly one anomaly count and never disturbs the clean
records around it. The per-class numbers land in ``manifest.json``.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import os
import random
from dataclasses import asdict, dataclass, field

from .model import ConstraintOp, Resources, TaskConstraint, TaskId, UsageSample
from .parsing import (
    AnomalyKind,
    JobEventRecord,
    MachineAttributeRecord,
    MachineEventKind,
    MachineEventRecord,
    RECORD_TABLE,
    TaskAction,
    TaskConstraintRecord,
    TaskEventRecord,
    TaskUsageRecord,
    TraceTable,
    encode,
)

SECOND = 1_000_000
USAGE_PERIOD = 300 * SECOND
PART_LINES = 250_000

# GCD machines come in a few normalized shapes
_SHAPES = ((0.5, 0.4995), (0.5, 0.2493), (0.5, 0.749), (1.0, 1.0), (0.25, 0.2498))
_ARCH = ("x86a", "x86b", "arm")
_CORES = ("4", "8", "16")
_TERMINAL = (TaskAction.FINISH, TaskAction.FAIL, TaskAction.KILL, TaskAction.LOST, TaskAction.EVICT)
_TERMINAL_WEIGHTS = (70, 10, 12, 2, 6)

# injected kinds, in the order they are dealt out
INJECTED_KINDS = (
    AnomalyKind.SCHEMA_MISMATCH,
    AnomalyKind.MISSING_FIELD,
    AnomalyKind.BAD_FIELD_FORMAT,
    AnomalyKind.USAGE_FOR_NONEXISTENT_TASK,
    AnomalyKind.UNKNOWN_TASK,
    AnomalyKind.CORRUPT_TASK_STATE,
    AnomalyKind.UNKNOWN_NODE,
)

ORPHAN_JOB_BASE = 9_000_000_000
UNKNOWN_MACHINE_BASE = 8_000_000_000


@dataclass
class SyntheticSpec:
    nodes: int = 50
    tasks: int = 550
    duration_micros: int = 6 * 3600 * SECOND
    seed: int = 0
    anomaly_rate: float = 0.0
    mean_task_micros: int = 2 * 3600 * SECOND
    priority_weights: tuple = (30, 8, 20, 4, 10, 2, 2, 2, 12, 8, 1, 1)
    scheduling_class_weights: tuple = (40, 30, 20, 10)
    constraint_probability: float = 0.15
    node_churn: float = 0.05
    usage_period_micros: int = USAGE_PERIOD
    tasks_per_job: int = 8
    disk_cutoff_micros: int = 14 * 24 * 3600 * SECOND

    def __post_init__(self) -> None:
        if self.nodes < 1 or self.tasks < 0:
            raise ValueError("need at least one node and a non-negative task count")
        if not 0.0 <= self.anomaly_rate < 1.0:
            raise ValueError("anomaly_rate must be in [0, 1)")
        if self.duration_micros < 60 * SECOND:
            raise ValueError("duration must be at least one minute")
        if len(self.priority_weights) != 12 or len(self.scheduling_class_weights) != 4:
            raise ValueError("need 12 priority weights and 4 scheduling-class weights")


@dataclass
class _Segment:
    submit: int
    schedule: int
    end: int
    action: TaskAction


@dataclass
class _Task:
    id: TaskId
    priority: int
    scheduling_class: int
    requested: Resources
    constraints: tuple
    user: str
    segments: list = field(default_factory=list)


class _Tables:
    """Collects ``(timestamp, seq, line)`` rows per table."""

    def __init__(self) -> None:
        self.rows = {t: [] for t in TraceTable}
        self.seq = 0

    def add(self, table: TraceTable, ts: int, line: str) -> None:
        self.seq += 1
        self.rows[table].append((ts, self.seq, line))

    def record(self, rec, ts: int) -> None:
        self.add(RECORD_TABLE[type(rec)], ts, encode(rec))

    def clean_count(self) -> int:
        return sum(len(r) for r in self.rows.values())


def _round(x: float, digits: int = 6) -> float:
    return round(x, digits)


class _Generator:
    def __init__(self, spec: SyntheticSpec) -> None:
        self.spec = spec
        self.rng = random.Random(spec.seed)
        self.out = _Tables()
        self.tasks: list[_Task] = []

    # --- machines ------------------------------------------------------------

    def machines(self) -> None:
        s, rng, out = self.spec, self.rng, self.out
        end = s.duration_micros
        for m in range(1, s.nodes + 1):
            cpu, mem = rng.choice(_SHAPES)
            platform = f"plat{rng.randrange(3)}"
            out.record(MachineEventRecord(0, m, MachineEventKind.ADD, platform, Resources(cpu, mem)), 0)
            for name, value in (("arch", rng.choice(_ARCH)), ("cores", rng.choice(_CORES)), ("rack", f"r{m % 20}")):
                out.record(MachineAttributeRecord(0, m, name, value, False), 0)
            if rng.random() < s.node_churn:
                down = rng.randrange(end // 4, end - end // 8)
                up = down + rng.randrange(60 * SECOND, max(61 * SECOND, end // 10))
                out.record(MachineEventRecord(down, m, MachineEventKind.REMOVE, platform, Resources()), down)
                if up < end:
                    out.record(MachineEventRecord(up, m, MachineEventKind.ADD, platform, Resources(cpu, mem)), up)
            elif rng.random() < s.node_churn:
                t = rng.randrange(1, end)
                ncpu, nmem = rng.choice(_SHAPES)
                out.record(MachineEventRecord(t, m, MachineEventKind.UPDATE, platform, Resources(ncpu, nmem)), t)
            if rng.random() < s.node_churn:
                t0 = rng.randrange(1, end // 2)
                t1 = rng.randrange(t0 + 1, end)
                out.record(MachineAttributeRecord(t0, m, "maint", "1", False), t0)
                out.record(MachineAttributeRecord(t1, m, "maint", None, True), t1)

    # --- tasks ---------------------------------------------------------------

    def _constraints(self) -> tuple:
        rng = self.rng
        if rng.random() >= self.spec.constraint_probability:
            return ()
        pick = rng.random()
        if pick < 0.5:
            return (TaskConstraint("arch", ConstraintOp.EQ, rng.choice(_ARCH)),)
        if pick < 0.8:
            return (TaskConstraint("arch", ConstraintOp.NEQ, rng.choice(_ARCH)),)
        return (TaskConstraint("cores", ConstraintOp.GT, "4"),)

    def _duration(self) -> int:
        mean = self.spec.mean_task_micros
        return max(10 * SECOND, int(self.rng.expovariate(1.0 / mean)))

    def tasks_(self) -> None:
        s, rng, out = self.spec, self.rng, self.out
        end = s.duration_micros
        arrival_end = max(2, int(end * 0.9))
        job_id, index, job_size = 0, 0, 0
        for _ in range(s.tasks):
            if index >= job_size:
                job_id += 1
                index = 0
                job_size = rng.randint(1, s.tasks_per_job)
                job_submit = rng.randrange(0, arrival_end)
                job_user = f"user{rng.randrange(40)}"
                job_class = rng.choices(range(4), s.scheduling_class_weights)[0]
                out.record(JobEventRecord(job_submit, None, job_id, TaskAction.SUBMIT, job_user, job_class, f"job{job_id}", f"lj{job_id % 97}"), job_submit)
                job_last = job_submit
            tid = TaskId(job_id, index)
            index += 1
            submit = job_submit + rng.randrange(0, 5 * SECOND)
            disk = None if submit >= s.disk_cutoff_micros else _round(rng.uniform(0.0001, 0.002))
            task = _Task(
                tid,
                rng.choices(range(12), s.priority_weights)[0],
                job_class,
                Resources(_round(rng.uniform(0.005, 0.0625)), _round(rng.uniform(0.003, 0.05)), disk),
                self._constraints(),
                job_user,
            )
            resubmits = 0
            while submit < end - 4:
                schedule = min(end - 3, submit + rng.randrange(1, 30 * SECOND))
                stop = min(end - 1, schedule + self._duration())
                action = rng.choices(_TERMINAL, _TERMINAL_WEIGHTS)[0]
                if action is TaskAction.EVICT and resubmits >= 2:
                    action = TaskAction.FINISH
                task.segments.append(_Segment(submit, schedule, stop, action))
                if action is not TaskAction.EVICT:
                    break
                resubmits += 1
                submit = stop + rng.randrange(1, 60 * SECOND)
            if task.segments:
                self.tasks.append(task)
                self._emit_task(task)
                job_last = max(job_last, task.segments[-1].end)
            if index >= job_size:
                out.record(JobEventRecord(job_last, None, job_id, TaskAction.FINISH, job_user, job_class, f"job{job_id}", f"lj{job_id % 97}"), job_last)

    def _task_event(self, task: _Task, ts: int, action: TaskAction, machine=None, requested=None) -> None:
        self.out.record(
            TaskEventRecord(
                ts, None, task.id, machine, action, task.user, task.scheduling_class, task.priority,
                requested or task.requested, self.rng.choice((None, 0, 1)),
            ),
            ts,
        )

    def _emit_task(self, task: _Task) -> None:
        s, rng = self.spec, self.rng
        for seg in task.segments:
            machine = rng.randint(1, s.nodes)
            self._task_event(task, seg.submit, TaskAction.SUBMIT)
            for c in task.constraints:
                self.out.record(TaskConstraintRecord(seg.submit, task.id, c), seg.submit)
            if seg.schedule - seg.submit >= 2 and rng.random() < 0.05:
                t = rng.randrange(seg.submit + 1, seg.schedule)
                self._task_event(task, t, TaskAction.UPDATE_PENDING)
            self._task_event(task, seg.schedule, TaskAction.SCHEDULE, machine)
            if seg.end - seg.schedule >= 2 and rng.random() < 0.05:
                t = rng.randrange(seg.schedule + 1, seg.end)
                self._task_event(task, t, TaskAction.UPDATE_RUNNING, machine)
            self._usage(task, seg, machine)
            self._task_event(task, seg.end, seg.action, machine)

    def _usage(self, task: _Task, seg: _Segment, machine: int) -> None:
        s, rng, out = self.spec, self.rng, self.out
        period = s.usage_period_micros
        rq = task.requested
        util = rng.uniform(0.05, 0.35)
        k = (seg.schedule + 1) // period
        while True:
            ws = k * period
            start = max(ws, seg.schedule + 1)
            stop = min(ws + period, seg.end)
            if start >= seg.end:
                break
            k += 1
            if start >= stop:
                continue
            cpu = _round(rq.cpu * util * rng.uniform(0.6, 1.4))
            mem = _round(rq.memory * util * rng.uniform(0.8, 1.2))
            cpi = _round(rng.uniform(0.8, 3.5)) if rng.random() > 0.001 else 45.7
            disk = None if start >= s.disk_cutoff_micros else _round(rng.uniform(0.00001, 0.0005))
            sample = UsageSample(
                start, stop, task.id, machine,
                cpu, mem, _round(mem * 1.1), _round(mem * 0.1), _round(mem * 0.2), _round(mem * 1.3),
                _round(rng.uniform(0, 0.01)), disk, _round(cpu * 2.5), _round(rng.uniform(0, 0.05)),
                cpi, _round(rng.uniform(0.001, 0.02)),
            )
            out.record(TaskUsageRecord(sample, 1.0, 0, _round(cpu * 0.9)), start)

    # --- injected anomalies ----------------------------------------------------

    def inject(self) -> dict[str, int]:
        s, rng, out = self.spec, self.rng, self.out
        counts = {k.value: 0 for k in INJECTED_KINDS}
        n = round(s.anomaly_rate * out.clean_count())
        if n == 0:
            return counts
        kinds = list(INJECTED_KINDS)
        if not self.tasks:
            kinds = [k for k in kinds if k not in (AnomalyKind.UNKNOWN_TASK, AnomalyKind.CORRUPT_TASK_STATE)]
        live = [(t, seg) for t in self.tasks for seg in t.segments if seg.end - seg.submit >= 2]
        if not live:
            kinds = [k for k in kinds if k is not AnomalyKind.CORRUPT_TASK_STATE]
        end = s.duration_micros
        for i in range(n):
            kind = kinds[i % len(kinds)]
            ts = rng.randrange(0, end)
            if kind is AnomalyKind.SCHEMA_MISMATCH:
                table = rng.choice(list(TraceTable))
                out.add(table, ts, ",".join(["1"] * (len(table.columns) + rng.choice((-2, -1, 1, 3)))))
            elif kind is AnomalyKind.MISSING_FIELD:
                out.add(TraceTable.TASK_EVENTS, ts, f"{ts},,,0,,0,user0,0,0,0.01,0.01,,")
            elif kind is AnomalyKind.BAD_FIELD_FORMAT:
                out.add(TraceTable.TASK_EVENTS, ts, f"{ts},,{rng.randint(1, 10**6)},0,,9,user0,0,0,0.01,0.01,,")
            elif kind is AnomalyKind.USAGE_FOR_NONEXISTENT_TASK:
                sample = UsageSample(ts, ts + USAGE_PERIOD, TaskId(ORPHAN_JOB_BASE + i, 0), 1, 0.01, 0.01)
                out.record(TaskUsageRecord(sample), ts)
            elif kind is AnomalyKind.UNKNOWN_TASK:
                task = rng.choice(self.tasks)
                seg = rng.choice(task.segments)
                self._task_event(task, seg.end, seg.action)
            elif kind is AnomalyKind.CORRUPT_TASK_STATE:
                task, seg = rng.choice(live)
                self._task_event(task, rng.randrange(seg.submit + 1, seg.end), TaskAction.SUBMIT)
            else:
                out.record(MachineAttributeRecord(ts, UNKNOWN_MACHINE_BASE + i, "arch", "x86a", False), ts)
            counts[kind.value] += 1
        return counts


def _write_gz(path: str, lines: list) -> str:
    h = hashlib.sha256()
    with open(path, "wb") as raw:
        with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0, compresslevel=6) as gz:
            buf = []
            for line in lines:
                buf.append(line)
                if len(buf) >= 4096:
                    gz.write(("\n".join(buf) + "\n").encode())
                    buf.clear()
            if buf:
                gz.write(("\n".join(buf) + "\n").encode())
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def generate_trace(spec: SyntheticSpec, out_dir: str) -> dict:
    """Write a trace under ``out_dir`` and return its manifest."""
    g = _Generator(spec)
    g.machines()
    g.tasks_()
    clean = g.out.clean_count()
    injected = g.inject()
    manifest = {
        "spec": asdict(spec),
        "clean_records": clean,
        "injected": injected,
        "injected_total": sum(injected.values()),
        "tasks": sum(len(t.segments) for t in g.tasks),
        "task_ids": len(g.tasks),
        "tables": {},
        "files": {},
    }
    for table, rows in g.out.rows.items():
        rows.sort()
        d = os.path.join(out_dir, table.dirname)
        os.makedirs(d, exist_ok=True)
        nparts = max(1, -(-len(rows) // PART_LINES))
        manifest["tables"][table.dirname] = len(rows)
        for p in range(nparts):
            name = f"part-{p:05d}-of-{nparts:05d}.csv.gz"
            chunk = rows[p * PART_LINES:(p + 1) * PART_LINES]
            manifest["files"][f"{table.dirname}/{name}"] = _write_gz(os.path.join(d, name), [r[2] for r in chunk])
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
