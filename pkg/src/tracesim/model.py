"""Domain types shared by the parser, pipeline, cluster state and harness.

Every type here is an immutable value. Timestamps are integer microseconds
since the trace epoch. Resource quantities are GCD-normalized fractions; an
absent field is ``None`` and only becomes 0 where values are aggregated.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, NamedTuple, Optional, Union

SimTime = int
MachineId = int

_INT_RE = re.compile(r"-?[0-9]+")


class TaskId(NamedTuple):
    job_id: int
    task_index: int

    def __str__(self) -> str:
        return f"{self.job_id}/{self.task_index}"


class ConstraintOp(Enum):
    EQ = 0
    NEQ = 1
    LT = 2
    GT = 3


class RemoveCause(Enum):
    EVICT = "Evict"
    FAIL = "Fail"
    FINISH = "Finish"
    KILL = "Kill"
    LOST = "Lost"


@dataclass(frozen=True, slots=True)
class Resources:
    """Requested resources or node capacity; ``None`` marks an absent field."""

    cpu: Optional[float] = None
    memory: Optional[float] = None
    disk_space: Optional[float] = None

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.cpu or 0.0, self.memory or 0.0, self.disk_space or 0.0)


ZERO = Resources(0.0, 0.0, 0.0)


@dataclass(frozen=True, slots=True)
class TaskConstraint:
    attribute_name: str
    op: ConstraintOp
    value: str


@dataclass(frozen=True, slots=True)
class UsageSample:
    start: SimTime
    end: SimTime
    task: TaskId
    machine: Optional[MachineId]
    cpu_rate: Optional[float] = None
    canonical_memory: Optional[float] = None
    assigned_memory: Optional[float] = None
    unmapped_page_cache: Optional[float] = None
    total_page_cache: Optional[float] = None
    max_memory: Optional[float] = None
    disk_io_time: Optional[float] = None
    local_disk_space: Optional[float] = None
    max_cpu_rate: Optional[float] = None
    max_disk_io_time: Optional[float] = None
    cycles_per_instruction: Optional[float] = None
    memory_accesses_per_instruction: Optional[float] = None

    def __post_init__(self) -> None:
        if self.end <= self.start:
            raise ValueError(f"usage interval must have start < end, got [{self.start}, {self.end})")


USAGE_METRICS = (
    "cpu_rate",
    "canonical_memory",
    "assigned_memory",
    "unmapped_page_cache",
    "total_page_cache",
    "max_memory",
    "disk_io_time",
    "local_disk_space",
    "max_cpu_rate",
    "max_disk_io_time",
    "cycles_per_instruction",
    "memory_accesses_per_instruction",
)


@dataclass(frozen=True, slots=True)
class Running:
    machine: MachineId


class _Pending:
    __slots__ = ()

    def __repr__(self) -> str:
        return "PENDING"

    def __reduce__(self):
        return "PENDING"


PENDING = _Pending()
TaskState = Union[_Pending, Running]


@dataclass(frozen=True, slots=True)
class TaskRecord:
    id: TaskId
    priority: int
    scheduling_class: int
    requested: Resources
    constraints: tuple[TaskConstraint, ...] = ()
    state: TaskState = PENDING
    last_usage: Optional[UsageSample] = None

    @property
    def running_on(self) -> Optional[MachineId]:
        return self.state.machine if isinstance(self.state, Running) else None


@dataclass(frozen=True, slots=True)
class NodeRecord:
    id: MachineId
    platform_id: Optional[str]
    capacity: Resources
    attributes: tuple[tuple[str, str], ...] = ()
    online: bool = True

    def attribute_map(self) -> dict[str, str]:
        return dict(self.attributes)


# --- workload events -------------------------------------------------------


@dataclass(frozen=True, slots=True)
class AddTask:
    timestamp: SimTime
    task: TaskId
    priority: int
    scheduling_class: int
    requested: Resources
    constraints: tuple[TaskConstraint, ...] = ()


@dataclass(frozen=True, slots=True)
class UpdateTaskRequiredResources:
    timestamp: SimTime
    task: TaskId
    requested: Resources
    priority: int


@dataclass(frozen=True, slots=True)
class UpdateTaskUsedResources:
    timestamp: SimTime
    usage: UsageSample

    @property
    def task(self) -> TaskId:
        return self.usage.task


@dataclass(frozen=True, slots=True)
class UpdateTaskConstraints:
    """Upserts constraints keyed by (attribute_name, op)."""

    timestamp: SimTime
    task: TaskId
    constraints: tuple[TaskConstraint, ...]


@dataclass(frozen=True, slots=True)
class RemoveTask:
    timestamp: SimTime
    task: TaskId
    cause: RemoveCause


@dataclass(frozen=True, slots=True)
class AddNode:
    timestamp: SimTime
    node: NodeRecord

    @property
    def machine(self) -> MachineId:
        return self.node.id


@dataclass(frozen=True, slots=True)
class UpdateNodeTotalResources:
    timestamp: SimTime
    machine: MachineId
    capacity: Resources


@dataclass(frozen=True, slots=True)
class AddNodeAttributes:
    timestamp: SimTime
    machine: MachineId
    attributes: tuple[tuple[str, str], ...]


@dataclass(frozen=True, slots=True)
class RemoveNodeAttributes:
    timestamp: SimTime
    machine: MachineId
    names: tuple[str, ...]


@dataclass(frozen=True, slots=True)
class RemoveNode:
    timestamp: SimTime
    machine: MachineId


WorkloadEvent = Union[
    AddTask,
    UpdateTaskRequiredResources,
    UpdateTaskUsedResources,
    UpdateTaskConstraints,
    RemoveTask,
    AddNode,
    UpdateNodeTotalResources,
    AddNodeAttributes,
    RemoveNodeAttributes,
    RemoveNode,
]

EVENT_TYPES: dict[str, type] = {
    cls.__name__: cls
    for cls in (
        AddTask,
        UpdateTaskRequiredResources,
        UpdateTaskUsedResources,
        UpdateTaskConstraints,
        RemoveTask,
        AddNode,
        UpdateNodeTotalResources,
        AddNodeAttributes,
        RemoveNodeAttributes,
        RemoveNode,
    )
}

TASK_EVENTS = (AddTask, UpdateTaskRequiredResources, UpdateTaskUsedResources, UpdateTaskConstraints, RemoveTask)


# --- predicates ------------------------------------------------------------


def _is_int(s: str) -> bool:
    return _INT_RE.fullmatch(s) is not None


def eval_constraint(c: TaskConstraint, attrs: Mapping[str, str]) -> bool:
    """Whether a node's attributes satisfy one task constraint.

    A missing attribute reads as ``""``. LT/GT compare as integers when the
    constraint value and the (possibly defaulted) attribute both parse as
    base-10 integers, with a missing attribute taken as 0; otherwise both
    sides compare as UTF-8 bytes.
    """
    present = c.attribute_name in attrs
    actual = attrs.get(c.attribute_name, "")
    if c.op is ConstraintOp.EQ:
        return actual == c.value
    if c.op is ConstraintOp.NEQ:
        return actual != c.value
    if _is_int(c.value) and (not present or _is_int(actual)):
        lhs, rhs = (int(actual) if present else 0), int(c.value)
    else:
        lhs, rhs = actual.encode(), c.value.encode()
    return lhs < rhs if c.op is ConstraintOp.LT else lhs > rhs


def constraints_hold(constraints: Iterable[TaskConstraint], attrs: Mapping[str, str]) -> bool:
    return all(eval_constraint(c, attrs) for c in constraints)


def fits(requested: Resources, capacity: Resources, allocated: tuple[float, float, float]) -> bool:
    """Admission check on cpu and memory (and disk when the capacity reports it)."""
    req = requested.as_tuple()
    if req[0] > (capacity.cpu or 0.0) - allocated[0] + 1e-12:
        return False
    if req[1] > (capacity.memory or 0.0) - allocated[1] + 1e-12:
        return False
    if capacity.disk_space is not None and req[2] > capacity.disk_space - allocated[2] + 1e-12:
        return False
    return True


def sum_requested(tasks: Iterable[TaskRecord]) -> tuple[float, float, float]:
    cpu = mem = disk = 0.0
    for t in tasks:
        r = t.requested
        cpu += r.cpu or 0.0
        mem += r.memory or 0.0
        disk += r.disk_space or 0.0
    return (cpu, mem, disk)


def task_eligible(task: TaskRecord, node: NodeRecord, running: Iterable[TaskRecord] = ()) -> bool:
    """True iff ``task`` satisfies every constraint on ``node`` and fits in
    the capacity left after the requests of ``running`` (the tasks already
    placed there)."""
    if not node.online:
        return False
    if task.constraints and not constraints_hold(task.constraints, node.attribute_map()):
        return False
    return fits(task.requested, node.capacity, sum_requested(running))


# --- canonical serialization ----------------------------------------------


def _res(r: Resources) -> list:
    return [r.cpu, r.memory, r.disk_space]


def _unres(v) -> Resources:
    return Resources(*v)


def _cons(cs: Iterable[TaskConstraint]) -> list:
    return [[c.attribute_name, c.op.name, c.value] for c in cs]


def _uncons(v) -> tuple[TaskConstraint, ...]:
    return tuple(TaskConstraint(n, ConstraintOp[op], val) for n, op, val in v)


def usage_to_dict(u: UsageSample) -> dict:
    d = {"start": u.start, "end": u.end, "task": list(u.task), "machine": u.machine}
    for name in USAGE_METRICS:
        d[name] = getattr(u, name)
    return d


def usage_from_dict(d: dict) -> UsageSample:
    return UsageSample(
        start=d["start"],
        end=d["end"],
        task=TaskId(*d["task"]),
        machine=d["machine"],
        **{name: d[name] for name in USAGE_METRICS},
    )


def node_to_dict(n: NodeRecord) -> dict:
    return {
        "id": n.id,
        "platform_id": n.platform_id,
        "capacity": _res(n.capacity),
        "attributes": [list(a) for a in n.attributes],
        "online": n.online,
    }


def node_from_dict(d: dict) -> NodeRecord:
    return NodeRecord(
        id=d["id"],
        platform_id=d["platform_id"],
        capacity=_unres(d["capacity"]),
        attributes=tuple((k, v) for k, v in d["attributes"]),
        online=d["online"],
    )


def task_to_dict(t: TaskRecord) -> dict:
    return {
        "id": list(t.id),
        "priority": t.priority,
        "scheduling_class": t.scheduling_class,
        "requested": _res(t.requested),
        "constraints": _cons(t.constraints),
        "running_on": t.running_on,
        "last_usage": usage_to_dict(t.last_usage) if t.last_usage else None,
    }


def event_to_dict(e: WorkloadEvent) -> dict:
    d: dict = {"kind": type(e).__name__, "t": e.timestamp}
    if isinstance(e, AddTask):
        d.update(
            task=list(e.task),
            priority=e.priority,
            scheduling_class=e.scheduling_class,
            requested=_res(e.requested),
            constraints=_cons(e.constraints),
        )
    elif isinstance(e, UpdateTaskRequiredResources):
        d.update(task=list(e.task), requested=_res(e.requested), priority=e.priority)
    elif isinstance(e, UpdateTaskUsedResources):
        d["usage"] = usage_to_dict(e.usage)
    elif isinstance(e, UpdateTaskConstraints):
        d.update(task=list(e.task), constraints=_cons(e.constraints))
    elif isinstance(e, RemoveTask):
        d.update(task=list(e.task), cause=e.cause.value)
    elif isinstance(e, AddNode):
        d["node"] = node_to_dict(e.node)
    elif isinstance(e, UpdateNodeTotalResources):
        d.update(machine=e.machine, capacity=_res(e.capacity))
    elif isinstance(e, AddNodeAttributes):
        d.update(machine=e.machine, attributes=[list(a) for a in e.attributes])
    elif isinstance(e, RemoveNodeAttributes):
        d.update(machine=e.machine, names=list(e.names))
    elif isinstance(e, RemoveNode):
        d["machine"] = e.machine
    else:
        raise TypeError(f"not a workload event: {e!r}")
    return d


def event_from_dict(d: dict) -> WorkloadEvent:
    kind, t = d["kind"], d["t"]
    if kind == "AddTask":
        return AddTask(
            t, TaskId(*d["task"]), d["priority"], d["scheduling_class"], _unres(d["requested"]), _uncons(d["constraints"])
        )
    if kind == "UpdateTaskRequiredResources":
        return UpdateTaskRequiredResources(t, TaskId(*d["task"]), _unres(d["requested"]), d["priority"])
    if kind == "UpdateTaskUsedResources":
        return UpdateTaskUsedResources(t, usage_from_dict(d["usage"]))
    if kind == "UpdateTaskConstraints":
        return UpdateTaskConstraints(t, TaskId(*d["task"]), _uncons(d["constraints"]))
    if kind == "RemoveTask":
        return RemoveTask(t, TaskId(*d["task"]), RemoveCause(d["cause"]))
    if kind == "AddNode":
        return AddNode(t, node_from_dict(d["node"]))
    if kind == "UpdateNodeTotalResources":
        return UpdateNodeTotalResources(t, d["machine"], _unres(d["capacity"]))
    if kind == "AddNodeAttributes":
        return AddNodeAttributes(t, d["machine"], tuple((k, v) for k, v in d["attributes"]))
    if kind == "RemoveNodeAttributes":
        return RemoveNodeAttributes(t, d["machine"], tuple(d["names"]))
    if kind == "RemoveNode":
        return RemoveNode(t, d["machine"])
    raise ValueError(f"unknown event kind {kind!r}")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def dumps_event(e: WorkloadEvent) -> str:
    return canonical_json(event_to_dict(e))


def loads_event(s: str) -> WorkloadEvent:
    return event_from_dict(json.loads(s))
