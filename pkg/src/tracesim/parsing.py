"""GCD (clusterdata-2011-2) table parsing: CSV line -> typed record -> events.

Each table is a directory of lexicographically ordered part files
(``part-NNNNN-of-NNNNN.csv.gz`` or plain ``.csv``). Lines are split on commas
with no quoting; an empty field is an absent value (``None``).
"""

from __future__ import annotations

import gzip
import io
import os
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional, Union

from .model import (
    AddNode,
    AddNodeAttributes,
    AddTask,
    ConstraintOp,
    NodeRecord,
    RemoveCause,
    RemoveNode,
    RemoveNodeAttributes,
    RemoveTask,
    Resources,
    TaskConstraint,
    TaskId,
    UpdateNodeTotalResources,
    UpdateTaskConstraints,
    UpdateTaskRequiredResources,
    UpdateTaskUsedResources,
    UsageSample,
    WorkloadEvent,
)


class TraceTable(Enum):
    # value is the merge rank used to break timestamp ties
    MACHINE_EVENTS = 0
    MACHINE_ATTRIBUTES = 1
    JOB_EVENTS = 2
    TASK_EVENTS = 3
    TASK_CONSTRAINTS = 4
    TASK_USAGE = 5

    @property
    def dirname(self) -> str:
        return self.name.lower()

    @property
    def columns(self) -> tuple[str, ...]:
        return SCHEMAS[self]


SCHEMAS: dict[TraceTable, tuple[str, ...]] = {
    TraceTable.MACHINE_EVENTS: ("timestamp", "machine_id", "event_type", "platform_id", "cpus", "memory"),
    TraceTable.MACHINE_ATTRIBUTES: ("timestamp", "machine_id", "attribute_name", "attribute_value", "deleted"),
    TraceTable.JOB_EVENTS: (
        "timestamp",
        "missing_info",
        "job_id",
        "event_type",
        "user",
        "scheduling_class",
        "job_name",
        "logical_job_name",
    ),
    TraceTable.TASK_EVENTS: (
        "timestamp",
        "missing_info",
        "job_id",
        "task_index",
        "machine_id",
        "event_type",
        "user",
        "scheduling_class",
        "priority",
        "cpu_request",
        "memory_request",
        "disk_space_request",
        "different_machines_restriction",
    ),
    TraceTable.TASK_CONSTRAINTS: (
        "timestamp",
        "job_id",
        "task_index",
        "comparison_operator",
        "attribute_name",
        "attribute_value",
    ),
    TraceTable.TASK_USAGE: (
        "start_time",
        "end_time",
        "job_id",
        "task_index",
        "machine_id",
        "cpu_rate",
        "canonical_memory_usage",
        "assigned_memory_usage",
        "unmapped_page_cache",
        "total_page_cache",
        "max_memory_usage",
        "disk_io_time",
        "local_disk_space_usage",
        "max_cpu_rate",
        "max_disk_io_time",
        "cycles_per_instruction",
        "memory_accesses_per_instruction",
        "sample_portion",
        "aggregation_type",
        "sampled_cpu_usage",
    ),
}

REQUIRED: dict[TraceTable, tuple[int, ...]] = {
    TraceTable.MACHINE_EVENTS: (0, 1, 2),
    TraceTable.MACHINE_ATTRIBUTES: (0, 1, 2, 4),
    TraceTable.JOB_EVENTS: (0, 2, 3),
    TraceTable.TASK_EVENTS: (0, 2, 3, 5, 7, 8),
    TraceTable.TASK_CONSTRAINTS: (0, 1, 2, 3, 4),
    TraceTable.TASK_USAGE: (0, 1, 2, 3),
}


class TaskAction(Enum):
    SUBMIT = 0
    SCHEDULE = 1
    EVICT = 2
    FAIL = 3
    FINISH = 4
    KILL = 5
    LOST = 6
    UPDATE_PENDING = 7
    UPDATE_RUNNING = 8


TERMINAL_CAUSE = {
    TaskAction.EVICT: RemoveCause.EVICT,
    TaskAction.FAIL: RemoveCause.FAIL,
    TaskAction.FINISH: RemoveCause.FINISH,
    TaskAction.KILL: RemoveCause.KILL,
    TaskAction.LOST: RemoveCause.LOST,
}


class MachineEventKind(Enum):
    ADD = 0
    REMOVE = 1
    UPDATE = 2


class AnomalyKind(Enum):
    MISSING_FIELD = "MissingField"
    UNKNOWN_TASK = "UnknownTask"
    UNKNOWN_NODE = "UnknownNode"
    CORRUPT_TASK_STATE = "CorruptTaskState"
    USAGE_FOR_NONEXISTENT_TASK = "UsageForNonexistentTask"
    BAD_FIELD_FORMAT = "BadFieldFormat"
    SCHEMA_MISMATCH = "SchemaMismatch"
    DUPLICATE_NODE = "DuplicateNode"


Source = tuple[str, int]


class AnomalyReport:
    """Per-class anomaly counters plus the last 100 offending sources."""

    SAMPLE_LIMIT = 100

    def __init__(self) -> None:
        self.counts: dict[AnomalyKind, int] = {k: 0 for k in AnomalyKind}
        self.samples: dict[AnomalyKind, deque] = {k: deque(maxlen=self.SAMPLE_LIMIT) for k in AnomalyKind}

    def record(self, kind: AnomalyKind, source: Optional[Source] = None) -> None:
        self.counts[kind] += 1
        if source is not None:
            self.samples[kind].append(source)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def as_dict(self) -> dict:
        return {
            k.value: {"count": self.counts[k], "samples": [list(s) for s in self.samples[k]]}
            for k in AnomalyKind
        }

    def copy(self) -> "AnomalyReport":
        other = AnomalyReport()
        other.counts = dict(self.counts)
        other.samples = {k: deque(v, maxlen=self.SAMPLE_LIMIT) for k, v in self.samples.items()}
        return other


class RecordError(ValueError):
    """A line or field that cannot be decoded; ``kind`` is the anomaly class."""

    def __init__(self, kind: AnomalyKind, message: str = "") -> None:
        super().__init__(message or kind.value)
        self.kind = kind


@dataclass(frozen=True, slots=True)
class RawRecord:
    table: TraceTable
    fields: tuple[Optional[str], ...]
    source: Source = ("", 0)


@dataclass(frozen=True, slots=True)
class Rejection:
    kind: AnomalyKind
    source: Source = ("", 0)
    detail: str = ""


def parse_line(table: TraceTable, line: str, source: Source = ("", 0)) -> Union[RawRecord, Rejection]:
    line = line.rstrip("\r\n")
    if not line:
        return Rejection(AnomalyKind.SCHEMA_MISMATCH, source, "empty line")
    parts = line.split(",")
    if len(parts) != len(SCHEMAS[table]):
        return Rejection(
            AnomalyKind.SCHEMA_MISMATCH, source, f"{len(parts)} fields, expected {len(SCHEMAS[table])}"
        )
    return RawRecord(table, tuple(p if p != "" else None for p in parts), source)


# --- field decoding ---------------------------------------------------------


def _int(v: Optional[str], name: str) -> Optional[int]:
    if v is None:
        return None
    try:
        return int(v)
    except ValueError:
        raise RecordError(AnomalyKind.BAD_FIELD_FORMAT, f"{name}={v!r} is not an integer") from None


def _float(v: Optional[str], name: str, lo: float = 0.0, hi: Optional[float] = None) -> Optional[float]:
    if v is None:
        return None
    try:
        x = float(v)
    except ValueError:
        raise RecordError(AnomalyKind.BAD_FIELD_FORMAT, f"{name}={v!r} is not a number") from None
    if not (x >= lo) or (hi is not None and x > hi):
        raise RecordError(AnomalyKind.BAD_FIELD_FORMAT, f"{name}={v!r} out of range")
    return x


def _time(v: Optional[str], name: str = "timestamp") -> int:
    t = _int(v, name)
    if t is None or t < 0:
        raise RecordError(AnomalyKind.BAD_FIELD_FORMAT, f"{name}={v!r} is not a valid timestamp")
    return t


def _code(v: Optional[str], enum: type, name: str):
    code = _int(v, name)
    try:
        return enum(code)
    except ValueError:
        raise RecordError(AnomalyKind.BAD_FIELD_FORMAT, f"{name}={v!r} is not a valid code") from None


def _bounded_int(v: Optional[str], name: str, lo: int, hi: int) -> int:
    x = _int(v, name)
    if x is None or not lo <= x <= hi:
        raise RecordError(AnomalyKind.BAD_FIELD_FORMAT, f"{name}={v!r} outside {lo}..{hi}")
    return x


def _check(r: RawRecord, table: TraceTable) -> tuple[Optional[str], ...]:
    if r.table is not table:
        raise ValueError(f"expected a {table.dirname} record, got {r.table.dirname}")
    f = r.fields
    for i in REQUIRED[table]:
        if f[i] is None:
            raise RecordError(AnomalyKind.MISSING_FIELD, f"missing {SCHEMAS[table][i]}")
    return f


@dataclass(frozen=True, slots=True)
class TaskEventRecord:
    timestamp: int
    missing_info: Optional[int]
    task: TaskId
    machine: Optional[int]
    action: TaskAction
    user: Optional[str]
    scheduling_class: int
    priority: int
    requested: Resources
    different_machines: Optional[int]


@dataclass(frozen=True, slots=True)
class JobEventRecord:
    timestamp: int
    missing_info: Optional[int]
    job_id: int
    action: TaskAction
    user: Optional[str]
    scheduling_class: Optional[int]
    job_name: Optional[str]
    logical_job_name: Optional[str]


@dataclass(frozen=True, slots=True)
class MachineEventRecord:
    timestamp: int
    machine: int
    kind: MachineEventKind
    platform_id: Optional[str]
    capacity: Resources


@dataclass(frozen=True, slots=True)
class MachineAttributeRecord:
    timestamp: int
    machine: int
    name: str
    value: Optional[str]
    deleted: bool


@dataclass(frozen=True, slots=True)
class TaskConstraintRecord:
    timestamp: int
    task: TaskId
    constraint: TaskConstraint


@dataclass(frozen=True, slots=True)
class TaskUsageRecord:
    sample: UsageSample
    sample_portion: Optional[float] = None
    aggregation_type: Optional[int] = None
    sampled_cpu_usage: Optional[float] = None

    @property
    def timestamp(self) -> int:
        return self.sample.start


DecodedRecord = Union[
    TaskEventRecord, JobEventRecord, MachineEventRecord, MachineAttributeRecord, TaskConstraintRecord, TaskUsageRecord
]


def decode_task_event(r: RawRecord) -> TaskEventRecord:
    f = _check(r, TraceTable.TASK_EVENTS)
    return TaskEventRecord(
        timestamp=_time(f[0]),
        missing_info=_int(f[1], "missing_info"),
        task=TaskId(_int(f[2], "job_id"), _bounded_int(f[3], "task_index", 0, 2**63)),
        machine=_int(f[4], "machine_id"),
        action=_code(f[5], TaskAction, "event_type"),
        user=f[6],
        scheduling_class=_bounded_int(f[7], "scheduling_class", 0, 3),
        priority=_bounded_int(f[8], "priority", 0, 11),
        requested=Resources(
            _float(f[9], "cpu_request", hi=1.0),
            _float(f[10], "memory_request", hi=1.0),
            _float(f[11], "disk_space_request", hi=1.0),
        ),
        different_machines=_int(f[12], "different_machines_restriction"),
    )


def decode_job_event(r: RawRecord) -> JobEventRecord:
    f = _check(r, TraceTable.JOB_EVENTS)
    sc = f[5]
    return JobEventRecord(
        timestamp=_time(f[0]),
        missing_info=_int(f[1], "missing_info"),
        job_id=_int(f[2], "job_id"),
        action=_code(f[3], TaskAction, "event_type"),
        user=f[4],
        scheduling_class=None if sc is None else _bounded_int(sc, "scheduling_class", 0, 3),
        job_name=f[6],
        logical_job_name=f[7],
    )


def decode_machine_event(r: RawRecord) -> MachineEventRecord:
    f = _check(r, TraceTable.MACHINE_EVENTS)
    return MachineEventRecord(
        timestamp=_time(f[0]),
        machine=_int(f[1], "machine_id"),
        kind=_code(f[2], MachineEventKind, "event_type"),
        platform_id=f[3],
        capacity=Resources(_float(f[4], "cpus", hi=1.0), _float(f[5], "memory", hi=1.0), None),
    )


def decode_machine_attribute(r: RawRecord) -> MachineAttributeRecord:
    f = _check(r, TraceTable.MACHINE_ATTRIBUTES)
    deleted = _int(f[4], "deleted")
    if deleted not in (0, 1):
        raise RecordError(AnomalyKind.BAD_FIELD_FORMAT, f"deleted={f[4]!r}")
    return MachineAttributeRecord(_time(f[0]), _int(f[1], "machine_id"), f[2], f[3], bool(deleted))


def decode_task_constraint(r: RawRecord) -> TaskConstraintRecord:
    f = _check(r, TraceTable.TASK_CONSTRAINTS)
    return TaskConstraintRecord(
        timestamp=_time(f[0]),
        task=TaskId(_int(f[1], "job_id"), _bounded_int(f[2], "task_index", 0, 2**63)),
        constraint=TaskConstraint(f[4], _code(f[3], ConstraintOp, "comparison_operator"), f[5] or ""),
    )


def decode_task_usage(r: RawRecord) -> TaskUsageRecord:
    f = _check(r, TraceTable.TASK_USAGE)
    start, end = _time(f[0], "start_time"), _time(f[1], "end_time")
    if end <= start:
        raise RecordError(AnomalyKind.BAD_FIELD_FORMAT, f"end_time {end} <= start_time {start}")
    names = SCHEMAS[TraceTable.TASK_USAGE]
    metrics = [_float(f[i], names[i]) for i in range(5, 17)]
    sample = UsageSample(
        start,
        end,
        TaskId(_int(f[2], "job_id"), _bounded_int(f[3], "task_index", 0, 2**63)),
        _int(f[4], "machine_id"),
        *metrics,
    )
    return TaskUsageRecord(
        sample,
        _float(f[17], "sample_portion"),
        _int(f[18], "aggregation_type"),
        _float(f[19], "sampled_cpu_usage"),
    )


DECODERS = {
    TraceTable.TASK_EVENTS: decode_task_event,
    TraceTable.JOB_EVENTS: decode_job_event,
    TraceTable.MACHINE_EVENTS: decode_machine_event,
    TraceTable.MACHINE_ATTRIBUTES: decode_machine_attribute,
    TraceTable.TASK_CONSTRAINTS: decode_task_constraint,
    TraceTable.TASK_USAGE: decode_task_usage,
}


def decode(r: RawRecord) -> DecodedRecord:
    return DECODERS[r.table](r)


# --- encoding (inverse of decoding, used by the generator) -----------------


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, Enum):
        return str(v.value)
    return str(v)


def encode(record: DecodedRecord) -> str:
    """Render a decoded record as one CSV line (no newline)."""
    if isinstance(record, TaskEventRecord):
        rq = record.requested
        vals = (
            record.timestamp, record.missing_info, record.task.job_id, record.task.task_index, record.machine,
            record.action, record.user, record.scheduling_class, record.priority,
            rq.cpu, rq.memory, rq.disk_space, record.different_machines,
        )
    elif isinstance(record, JobEventRecord):
        vals = (
            record.timestamp, record.missing_info, record.job_id, record.action, record.user,
            record.scheduling_class, record.job_name, record.logical_job_name,
        )
    elif isinstance(record, MachineEventRecord):
        vals = (
            record.timestamp, record.machine, record.kind, record.platform_id,
            record.capacity.cpu, record.capacity.memory,
        )
    elif isinstance(record, MachineAttributeRecord):
        vals = (record.timestamp, record.machine, record.name, record.value, record.deleted)
    elif isinstance(record, TaskConstraintRecord):
        c = record.constraint
        vals = (record.timestamp, record.task.job_id, record.task.task_index, c.op, c.attribute_name, c.value)
    elif isinstance(record, TaskUsageRecord):
        s = record.sample
        vals = (
            s.start, s.end, s.task.job_id, s.task.task_index, s.machine,
            s.cpu_rate, s.canonical_memory, s.assigned_memory, s.unmapped_page_cache, s.total_page_cache,
            s.max_memory, s.disk_io_time, s.local_disk_space, s.max_cpu_rate, s.max_disk_io_time,
            s.cycles_per_instruction, s.memory_accesses_per_instruction,
            record.sample_portion, record.aggregation_type, record.sampled_cpu_usage,
        )
    else:
        raise TypeError(f"cannot encode {record!r}")
    return ",".join(fmt(v) for v in vals)


RECORD_TABLE = {
    TaskEventRecord: TraceTable.TASK_EVENTS,
    JobEventRecord: TraceTable.JOB_EVENTS,
    MachineEventRecord: TraceTable.MACHINE_EVENTS,
    MachineAttributeRecord: TraceTable.MACHINE_ATTRIBUTES,
    TaskConstraintRecord: TraceTable.TASK_CONSTRAINTS,
    TaskUsageRecord: TraceTable.TASK_USAGE,
}


# --- record -> workload events ---------------------------------------------


def map_to_events(record: DecodedRecord) -> list[WorkloadEvent]:
    """Translate one decoded record into zero, one or two workload events.

    SCHEDULE actions and job events produce nothing: placement is decided by
    the scheduler under test, and jobs are only containers of tasks.
    """
    if isinstance(record, TaskEventRecord):
        a, ts = record.action, record.timestamp
        if a is TaskAction.SUBMIT:
            return [
                AddTask(ts, record.task, record.priority, record.scheduling_class, record.requested),
                UpdateTaskRequiredResources(ts, record.task, record.requested, record.priority),
            ]
        if a in TERMINAL_CAUSE:
            return [RemoveTask(ts, record.task, TERMINAL_CAUSE[a])]
        if a in (TaskAction.UPDATE_PENDING, TaskAction.UPDATE_RUNNING):
            return [UpdateTaskRequiredResources(ts, record.task, record.requested, record.priority)]
        return []
    if isinstance(record, TaskUsageRecord):
        return [UpdateTaskUsedResources(record.sample.start, record.sample)]
    if isinstance(record, TaskConstraintRecord):
        return [UpdateTaskConstraints(record.timestamp, record.task, (record.constraint,))]
    if isinstance(record, MachineEventRecord):
        ts, m = record.timestamp, record.machine
        if record.kind is MachineEventKind.ADD:
            return [AddNode(ts, NodeRecord(m, record.platform_id, record.capacity))]
        if record.kind is MachineEventKind.UPDATE:
            return [UpdateNodeTotalResources(ts, m, record.capacity)]
        return [RemoveNode(ts, m)]
    if isinstance(record, MachineAttributeRecord):
        if record.deleted:
            return [RemoveNodeAttributes(record.timestamp, record.machine, (record.name,))]
        return [AddNodeAttributes(record.timestamp, record.machine, ((record.name, record.value or ""),))]
    if isinstance(record, JobEventRecord):
        return []
    raise TypeError(f"cannot map {record!r}")


def entity_key(record: DecodedRecord) -> tuple[int, int]:
    if isinstance(record, (TaskEventRecord, TaskConstraintRecord)):
        return record.task
    if isinstance(record, TaskUsageRecord):
        return record.sample.task
    if isinstance(record, (MachineEventRecord, MachineAttributeRecord)):
        return (record.machine, 0)
    return (record.job_id, 0)


# --- anomaly filter -------------------------------------------------------


def anomaly_filter(event: WorkloadEvent, view) -> Optional[AnomalyKind]:
    """Classify ``event`` against a state view; ``None`` accepts it.

    ``view`` exposes ``tasks``, ``nodes`` and ``tombstones``. A tombstoned task
    was displaced by the simulator but is still live as far as the trace is
    concerned, so it counts as known here.
    """
    if isinstance(event, (AddNode, UpdateNodeTotalResources, AddNodeAttributes, RemoveNodeAttributes, RemoveNode)):
        if isinstance(event, AddNode):
            return None
        node = view.nodes.get(event.machine)
        if node is None or (isinstance(event, RemoveNode) and not node.online):
            return AnomalyKind.UNKNOWN_NODE
        return None
    task = event.task
    live = task in view.tasks or task in view.tombstones
    if isinstance(event, AddTask):
        return AnomalyKind.CORRUPT_TASK_STATE if live else None
    if live:
        return None
    if isinstance(event, UpdateTaskUsedResources):
        return AnomalyKind.USAGE_FOR_NONEXISTENT_TASK
    return AnomalyKind.UNKNOWN_TASK


# --- trace directory access --------------------------------------------------


def table_files(root: str, table: TraceTable) -> list[str]:
    """Part files of ``table`` under ``root``, as root-relative posix paths."""
    d = os.path.join(root, table.dirname)
    if not os.path.isdir(d):
        return []
    names = sorted(n for n in os.listdir(d) if n.endswith(".csv.gz") or n.endswith(".csv"))
    return [f"{table.dirname}/{n}" for n in names]


def open_text(path: str) -> io.TextIOBase:
    if path.endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, "r", encoding="utf-8", newline="")


def iter_lines(root: str, table: TraceTable) -> Iterator[tuple[str, int, str]]:
    """Yield ``(relpath, line_number, line)`` across a table's part files in order."""
    for rel in table_files(root, table):
        with open_text(os.path.join(root, rel)) as fh:
            for n, line in enumerate(fh, 1):
                yield rel, n, line


@dataclass
class ParsedLine:
    """The outcome of one line: its events or a rejection, plus ordering data."""

    timestamp: Optional[int]
    entity: tuple[int, int]
    events: list = field(default_factory=list)
    rejection: Optional[Rejection] = None


def process_line(table: TraceTable, line: str, source: Source) -> ParsedLine:
    raw = parse_line(table, line, source)
    if isinstance(raw, Rejection):
        return ParsedLine(None, (-1, -1), rejection=raw)
    try:
        rec = DECODERS[table](raw)
    except RecordError as exc:
        return ParsedLine(None, (-1, -1), rejection=Rejection(exc.kind, source, str(exc)))
    return ParsedLine(rec.timestamp, entity_key(rec), map_to_events(rec))
