"""ContextData: the shared cluster-state store and its snapshots."""

from __future__ import annotations

import hashlib
import json
import struct
import threading
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Optional

from .model import (
    PENDING,
    AddNode,
    AddNodeAttributes,
    AddTask,
    MachineId,
    NodeRecord,
    RemoveNode,
    RemoveNodeAttributes,
    RemoveTask,
    Running,
    TaskId,
    TaskRecord,
    UpdateNodeTotalResources,
    UpdateTaskConstraints,
    UpdateTaskRequiredResources,
    UpdateTaskUsedResources,
    WorkloadEvent,
    canonical_json,
    constraints_hold,
    fits,
    node_to_dict,
    task_to_dict,
)
from .parsing import AnomalyKind, AnomalyReport, Source, anomaly_filter
from .pipeline import AnomalyMarker, EventBatch


class ApplyStatus(Enum):
    APPLIED = "Applied"
    ABSORBED = "Absorbed"  # trace event for a task the simulator already displaced
    REJECTED = "Rejected"


@dataclass(frozen=True, slots=True)
class ApplyResult:
    status: ApplyStatus
    anomaly: Optional[AnomalyKind] = None


APPLIED = ApplyResult(ApplyStatus.APPLIED)
ABSORBED = ApplyResult(ApplyStatus.ABSORBED)


class RefuseReason(Enum):
    UNKNOWN_TASK = "UnknownTask"
    UNKNOWN_NODE = "UnknownNode"
    NOT_PENDING = "NotPending"
    INELIGIBLE = "Ineligible"


@dataclass(frozen=True, slots=True)
class PlaceResult:
    reason: Optional[RefuseReason] = None

    @property
    def placed(self) -> bool:
        return self.reason is None

    def __str__(self) -> str:
        return "Placed" if self.reason is None else self.reason.value


PLACED = PlaceResult()


class UnknownTaskError(KeyError):
    pass


class UnknownNodeError(KeyError):
    pass


@dataclass(frozen=True, slots=True)
class Utilization:
    requested: tuple[float, float]
    used: tuple[float, float]


@dataclass(frozen=True)
class StatsSample:
    sim_time: int
    epoch: int
    nodes_online: int
    tasks_pending: int
    tasks_running: int
    events_applied: int
    events_processed: int
    anomalies_total: int
    displaced_total: int
    mean_cpu_requested: float
    mean_cpu_used: float

    CSV_FIELDS = (
        "sim_time",
        "nodes_online",
        "tasks_pending",
        "tasks_running",
        "events_applied",
        "anomalies_total",
        "displaced_total",
        "mean_cpu_requested",
        "mean_cpu_used",
    )

    def csv_row(self) -> list:
        return [getattr(self, f) for f in self.CSV_FIELDS]


def _frac(num: float, cap: Optional[float]) -> float:
    if cap:
        return num / cap
    return 0.0 if num == 0 else float("inf")


COUNTERS = (
    "tasks_added",
    "tasks_removed",
    "tasks_rejected",
    "displaced",
    "absorbed",
    "events_applied",
    "events_processed",
)


class ContextData:
    """Nodes, tasks, the pending queue and placements, updated once per tick.

    One writer (the engine) applies whole batches under ``lock``; readers that
    need a cross-entity consistent view take the same lock. Records are
    immutable and replaced on update, so single-entry reads never see a torn
    value.
    """

    def __init__(self, store_pending_usage: bool = True) -> None:
        self.nodes: dict[MachineId, NodeRecord] = {}
        self.tasks: dict[TaskId, TaskRecord] = {}
        self.pending: dict[TaskId, None] = {}
        self.placements: dict[MachineId, dict[TaskId, None]] = {}
        self.tombstones: set[TaskId] = set()
        self._alloc: dict[MachineId, tuple[float, float, float]] = {}
        self.anomalies = AnomalyReport()
        self.epoch = 0
        # bumped on every mutation / on every mutation that can change where tasks fit
        self.version = 0
        self.layout_version = 0
        self.store_pending_usage = store_pending_usage
        for c in COUNTERS:
            setattr(self, c, 0)
        self.lock = threading.RLock()
        self._dispatch = {
            AddTask: self._add_task,
            UpdateTaskRequiredResources: self._update_required,
            UpdateTaskUsedResources: self._update_used,
            UpdateTaskConstraints: self._update_constraints,
            RemoveTask: self._remove_task,
            AddNode: self._add_node,
            UpdateNodeTotalResources: self._update_capacity,
            AddNodeAttributes: self._add_attributes,
            RemoveNodeAttributes: self._remove_attributes,
            RemoveNode: self._remove_node,
        }

    # --- event application -------------------------------------------------

    def apply_event(self, e: WorkloadEvent, source: Optional[Source] = None) -> ApplyResult:
        self.events_processed += 1
        kind = anomaly_filter(e, self)
        if kind is not None:
            if type(e) is AddTask:
                self.tasks_added += 1
                self.tasks_rejected += 1
            self.anomalies.record(kind, source)
            return ApplyResult(ApplyStatus.REJECTED, kind)
        task = getattr(e, "task", None)
        if task is not None and task in self.tombstones and task not in self.tasks:
            if type(e) is RemoveTask:
                self.tombstones.discard(task)
            self.absorbed += 1
            return ABSORBED
        result = self._dispatch[type(e)](e, source)
        self.version += 1
        if type(e) is not UpdateTaskUsedResources:
            self.layout_version += 1
        if result is APPLIED:
            self.events_applied += 1
        return result

    def apply_batch(self, batch: EventBatch) -> list:
        results = []
        for entry in batch.entries:
            p = entry.payload
            if type(p) is AnomalyMarker:
                self.events_processed += 1
                self.anomalies.record(p.kind, p.source)
                if p.kind is AnomalyKind.CORRUPT_TASK_STATE:
                    # stands in for a rejected AddTask (see apply_event)
                    self.tasks_added += 1
                    self.tasks_rejected += 1
                results.append(ApplyResult(ApplyStatus.REJECTED, p.kind))
            else:
                results.append(self.apply_event(p, entry.source))
        self.epoch += 1
        return results

    def _add_task(self, e: AddTask, source) -> ApplyResult:
        self.tasks_added += 1
        self.tasks[e.task] = TaskRecord(e.task, e.priority, e.scheduling_class, e.requested, e.constraints)
        self.pending[e.task] = None
        return APPLIED

    def _update_required(self, e: UpdateTaskRequiredResources, source) -> ApplyResult:
        t = self.tasks[e.task]
        self.tasks[e.task] = replace(t, requested=e.requested, priority=e.priority)
        if t.running_on is not None:
            self._alloc.pop(t.running_on, None)
        return APPLIED

    def _update_used(self, e: UpdateTaskUsedResources, source) -> ApplyResult:
        t = self.tasks[e.task]
        if t.state is PENDING and not self.store_pending_usage:
            self.absorbed += 1
            return ABSORBED
        self.tasks[e.task] = replace(t, last_usage=e.usage)
        return APPLIED

    def _update_constraints(self, e: UpdateTaskConstraints, source) -> ApplyResult:
        t = self.tasks[e.task]
        merged = {(c.attribute_name, c.op): c for c in t.constraints}
        for c in e.constraints:
            merged[(c.attribute_name, c.op)] = c
        self.tasks[e.task] = replace(t, constraints=tuple(merged.values()))
        return APPLIED

    def _drop_task(self, tid: TaskId) -> None:
        t = self.tasks.pop(tid)
        self.pending.pop(tid, None)
        m = t.running_on
        if m is not None:
            self.placements[m].pop(tid, None)
            self._alloc.pop(m, None)
        self.tasks_removed += 1

    def _remove_task(self, e: RemoveTask, source) -> ApplyResult:
        self._drop_task(e.task)
        return APPLIED

    def _add_node(self, e: AddNode, source) -> ApplyResult:
        old = self.nodes.get(e.node.id)
        if old is not None and old.online:
            self.anomalies.record(AnomalyKind.DUPLICATE_NODE, source)
            self.nodes[old.id] = replace(old, capacity=e.node.capacity)
            return APPLIED
        if old is not None:
            # a machine coming back keeps the attributes it had
            self.nodes[old.id] = replace(old, platform_id=e.node.platform_id, capacity=e.node.capacity, online=True)
        else:
            self.nodes[e.node.id] = replace(e.node, online=True)
        self.placements.setdefault(e.node.id, {})
        return APPLIED

    def _update_capacity(self, e: UpdateNodeTotalResources, source) -> ApplyResult:
        self.nodes[e.machine] = replace(self.nodes[e.machine], capacity=e.capacity)
        return APPLIED

    def _add_attributes(self, e: AddNodeAttributes, source) -> ApplyResult:
        n = self.nodes[e.machine]
        attrs = dict(n.attributes)
        attrs.update(e.attributes)
        self.nodes[e.machine] = replace(n, attributes=tuple(attrs.items()))
        return APPLIED

    def _remove_attributes(self, e: RemoveNodeAttributes, source) -> ApplyResult:
        n = self.nodes[e.machine]
        gone = set(e.names)
        self.nodes[e.machine] = replace(n, attributes=tuple(a for a in n.attributes if a[0] not in gone))
        return APPLIED

    def _remove_node(self, e: RemoveNode, source) -> ApplyResult:
        n = self.nodes[e.machine]
        self.nodes[e.machine] = replace(n, online=False)
        for tid in list(self.placements.get(e.machine, ())):
            self._drop_task(tid)
            self.tombstones.add(tid)
            self.displaced += 1
        return APPLIED

    # --- placement ----------------------------------------------------------

    def allocated(self, m: MachineId) -> tuple[float, float, float]:
        """Summed requests of the tasks running on ``m`` (cached per machine)."""
        got = self._alloc.get(m)
        if got is None:
            got = self._alloc[m] = self._sum_allocated(m)
        return got

    def _sum_allocated(self, m: MachineId) -> tuple[float, float, float]:
        cpu = mem = disk = 0.0
        tasks = self.tasks
        for tid in self.placements.get(m, ()):
            r = tasks[tid].requested
            cpu += r.cpu or 0.0
            mem += r.memory or 0.0
            disk += r.disk_space or 0.0
        return (cpu, mem, disk)

    def eligible(self, task: TaskRecord, node: NodeRecord, allocated=None) -> bool:
        if not node.online:
            return False
        if task.constraints and not constraints_hold(task.constraints, node.attribute_map()):
            return False
        return fits(task.requested, node.capacity, allocated if allocated is not None else self.allocated(node.id))

    def place_task(self, t: TaskId, m: MachineId) -> PlaceResult:
        task = self.tasks.get(t)
        if task is None:
            return PlaceResult(RefuseReason.UNKNOWN_TASK)
        node = self.nodes.get(m)
        if node is None or not node.online:
            return PlaceResult(RefuseReason.UNKNOWN_NODE)
        if task.state is not PENDING:
            return PlaceResult(RefuseReason.NOT_PENDING)
        if not self.eligible(task, node):
            return PlaceResult(RefuseReason.INELIGIBLE)
        self.tasks[t] = replace(task, state=Running(m))
        del self.pending[t]
        self.placements[m][t] = None
        self._alloc.pop(m, None)
        self.version += 1
        self.layout_version += 1
        return PLACED

    def eligible_nodes(self, t: TaskId) -> list[MachineId]:
        task = self.tasks.get(t)
        if task is None:
            raise UnknownTaskError(t)
        return [m for m in sorted(self.nodes) if self.eligible(task, self.nodes[m])]

    def utilization(self, m: MachineId) -> Utilization:
        node = self.nodes.get(m)
        if node is None:
            raise UnknownNodeError(m)
        req_cpu = req_mem = used_cpu = used_mem = 0.0
        for tid in self.placements.get(m, ()):
            t = self.tasks[tid]
            req_cpu += t.requested.cpu or 0.0
            req_mem += t.requested.memory or 0.0
            u = t.last_usage
            if u is not None:
                used_cpu += u.cpu_rate or 0.0
                used_mem += u.canonical_memory or 0.0
        cap = node.capacity
        return Utilization(
            (_frac(req_cpu, cap.cpu), _frac(req_mem, cap.memory)),
            (_frac(used_cpu, cap.cpu), _frac(used_mem, cap.memory)),
        )

    # --- views ---------------------------------------------------------------

    @property
    def tasks_running(self) -> int:
        return len(self.tasks) - len(self.pending)

    def counters(self) -> dict:
        return {c: getattr(self, c) for c in COUNTERS}

    def counters_sample(self, sim_time: int) -> StatsSample:
        online = [m for m, n in self.nodes.items() if n.online and n.capacity.cpu]
        req = used = 0.0
        for m in online:
            u = self.utilization(m)
            req += u.requested[0]
            used += u.used[0]
        k = len(online)
        return StatsSample(
            sim_time=sim_time,
            epoch=self.epoch,
            nodes_online=sum(1 for n in self.nodes.values() if n.online),
            tasks_pending=len(self.pending),
            tasks_running=self.tasks_running,
            events_applied=self.events_applied,
            events_processed=self.events_processed,
            anomalies_total=self.anomalies.total,
            displaced_total=self.displaced,
            mean_cpu_requested=req / k if k else 0.0,
            mean_cpu_used=used / k if k else 0.0,
        )

    def fork(self) -> "ContextData":
        """An independent copy; records are immutable so only containers are copied."""
        other = ContextData(self.store_pending_usage)
        other.nodes = dict(self.nodes)
        other.tasks = dict(self.tasks)
        other.pending = dict(self.pending)
        other.placements = {m: dict(ts) for m, ts in self.placements.items()}
        other.tombstones = set(self.tombstones)
        other._alloc = dict(self._alloc)
        other.anomalies = self.anomalies.copy()
        other.epoch = self.epoch
        other.version = self.version
        other.layout_version = self.layout_version
        for c in COUNTERS:
            setattr(other, c, getattr(self, c))
        return other

    def audit(self) -> list[str]:
        """Internal consistency walk; returns a list of violations."""
        problems = []
        for m, tids in self.placements.items():
            for tid in tids:
                t = self.tasks.get(tid)
                if t is None or t.running_on != m:
                    problems.append(f"placement {m}:{tid} does not match task state")
        for tid, t in self.tasks.items():
            m = t.running_on
            if m is None and tid not in self.pending:
                problems.append(f"pending task {tid} missing from queue")
            if m is not None and (tid in self.pending or tid not in self.placements.get(m, ())):
                problems.append(f"running task {tid} not placed on {m}")
        if any(tid not in self.tasks for tid in self.pending):
            problems.append("pending queue holds unknown tasks")
        if self.tasks_added != len(self.pending) + self.tasks_running + self.tasks_removed + self.tasks_rejected:
            problems.append("task conservation violated")
        for m, cached in self._alloc.items():
            if cached != self._sum_allocated(m):
                problems.append(f"stale allocation cache for machine {m}")
        return problems

    def snapshot(self, sim_time: int, config_digest: str = "", trace_digest: str = "") -> "Snapshot":
        body = {
            "sim_time": sim_time,
            "epoch": self.epoch,
            "config_digest": config_digest,
            "trace_digest": trace_digest,
            "nodes": [node_to_dict(self.nodes[m]) for m in sorted(self.nodes)],
            "tasks": [task_to_dict(self.tasks[t]) for t in sorted(self.tasks)],
            "pending": [list(t) for t in self.pending],
            "placements": [[m, [list(t) for t in self.placements[m]]] for m in sorted(self.placements)],
            "tombstones": [list(t) for t in sorted(self.tombstones)],
            "anomalies": self.anomalies.as_dict(),
            "counters": self.counters(),
        }
        return Snapshot.from_body(body)


# --- snapshot container -------------------------------------------------------

SNAPSHOT_MAGIC = b"tracesim-snap\x00\x00\x00"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct(">16sIQ")


class SnapshotFormatError(ValueError):
    pass


class Snapshot:
    """Point-in-time image of ContextData.

    On disk: 16-byte magic, u32 version, u64 body length (big-endian), the
    canonical-JSON body, then the 32-byte SHA-256 of everything before it.
    """

    def __init__(self, body: dict, raw: bytes) -> None:
        self.body = body
        self._raw = raw

    @classmethod
    def from_body(cls, body: dict) -> "Snapshot":
        payload = canonical_json(body).encode()
        head = _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, len(payload)) + payload
        return cls(body, head + hashlib.sha256(head).digest())

    def serialize(self) -> bytes:
        return self._raw

    @property
    def digest(self) -> str:
        return self._raw[-32:].hex()

    @property
    def sim_time(self) -> int:
        return self.body["sim_time"]

    @classmethod
    def deserialize(cls, raw: bytes) -> "Snapshot":
        if len(raw) < _HEADER.size + 32:
            raise SnapshotFormatError("snapshot truncated")
        magic, version, length = _HEADER.unpack_from(raw)
        if magic != SNAPSHOT_MAGIC:
            raise SnapshotFormatError("bad magic")
        if version != SNAPSHOT_VERSION:
            raise SnapshotFormatError(f"unsupported snapshot version {version}")
        end = _HEADER.size + length
        if len(raw) != end + 32:
            raise SnapshotFormatError("snapshot length mismatch")
        if hashlib.sha256(raw[:end]).digest() != raw[end:]:
            raise SnapshotFormatError("snapshot digest mismatch")
        return cls(json.loads(raw[_HEADER.size : end]), bytes(raw))

    def write(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self._raw)

    @classmethod
    def read(cls, path: str) -> "Snapshot":
        with open(path, "rb") as fh:
            return cls.deserialize(fh.read())

    def __eq__(self, other) -> bool:
        return isinstance(other, Snapshot) and self._raw == other._raw

    def __hash__(self) -> int:
        return hash(self._raw)

    def __repr__(self) -> str:
        return f"Snapshot(sim_time={self.sim_time}, epoch={self.body['epoch']}, digest={self.digest[:12]})"


def apply_all(ctx: ContextData, events: Iterable[WorkloadEvent]) -> list:
    return [ctx.apply_event(e) for e in events]
