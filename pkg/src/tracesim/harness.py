"""Push-model fan-out of each tick to N schedulers.

One scheduler is authoritative and places tasks on the real ContextData.
Every other scheduler is a shadow: it gets a private fork of the state at
registration time, receives the same batches, and its placements only ever
touch that fork.
"""

from __future__ import annotations

import logging
import queue
import socketserver
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

from .model import constraints_hold
from .pipeline import EventBatch
from .protocol import (
    PROTOCOL_VERSION,
    Bye,
    Control,
    DecisionResult,
    DecisionResults,
    Decisions,
    EventBatchMessage,
    Hello,
    LineChannel,
    ProtocolError,
    SchedulerDecision,
    Stats,
    encode,
    parse_endpoint,
)
from .state import ContextData

log = logging.getLogger(__name__)


class Scheduler(Protocol):
    scheduler_id: str

    def decide(self, epoch: int, sim_time: int, events: list, view: ContextData) -> list[SchedulerDecision]: ...


def greedy_schedule(view: ContextData, scheduler_id: str = "greedy") -> list[SchedulerDecision]:
    """Highest priority first (FIFO within a priority), each onto the eligible
    node with the most unreserved CPU; ties go to the lowest machine id.

    The capacity test is the same arithmetic as :func:`fits`, unrolled.
    """
    if not view.pending:
        return []
    eps = 1e-12
    rows = []  # [id, cpu head, mem head, disk head or None, node]
    for m in sorted(view.nodes):
        n = view.nodes[m]
        if not n.online:
            continue
        a = view.allocated(m)
        cap = n.capacity
        disk = None if cap.disk_space is None else cap.disk_space - a[2]
        rows.append([m, (cap.cpu or 0.0) - a[0], (cap.memory or 0.0) - a[1], disk, n])
    attr_maps: dict = {}
    order = sorted(enumerate(view.pending), key=lambda p: (-view.tasks[p[1]].priority, p[0]))
    out = []
    for _, tid in order:
        t = view.tasks[tid]
        rc, rm, rd = t.requested.as_tuple()
        best = None
        for row in rows:
            if rc > row[1] + eps or rm > row[2] + eps or (row[3] is not None and rd > row[3] + eps):
                continue
            if t.constraints:
                attrs = attr_maps.get(row[0])
                if attrs is None:
                    attrs = attr_maps[row[0]] = row[4].attribute_map()
                if not constraints_hold(t.constraints, attrs):
                    continue
            if best is None or row[1] > best[1]:
                best = row
        if best is not None:
            best[1] -= rc
            best[2] -= rm
            if best[3] is not None:
                best[3] -= rd
            out.append(SchedulerDecision(tid, best[0], scheduler_id))
    return out


class GreedyScheduler:
    """In-process greedy policy. Skips work when nothing that affects
    placement changed since a call that produced no decisions."""

    def __init__(self, scheduler_id: str = "greedy") -> None:
        self.scheduler_id = scheduler_id
        self._idle_at: Optional[tuple] = None

    def decide(self, epoch, sim_time, events, view):
        sig = (id(view), view.layout_version)
        if not view.pending or sig == self._idle_at:
            return []
        out = greedy_schedule(view, self.scheduler_id)
        self._idle_at = None if out else sig
        return out


@dataclass
class SlotStats:
    ticks: int = 0
    decisions: int = 0
    placed: int = 0
    refused: Counter = field(default_factory=Counter)
    late: int = 0
    malformed: int = 0


@dataclass
class Slot:
    scheduler: object
    view: ContextData
    authoritative: bool
    stats: SlotStats = field(default_factory=SlotStats)

    @property
    def scheduler_id(self) -> str:
        return self.scheduler.scheduler_id

    @property
    def remote(self) -> bool:
        return isinstance(self.scheduler, RemoteScheduler)


class Harness:
    """Registers schedulers and runs the per-tick decisions cycle."""

    def __init__(
        self,
        ctx: ContextData,
        authoritative: Optional[str] = None,
        decision_timeout: float = 5.0,
        workers: int = 4,
    ) -> None:
        self.ctx = ctx
        self.authoritative_id = authoritative
        self.decision_timeout = decision_timeout
        self.slots: list[Slot] = []
        self._incoming: "queue.Queue" = queue.Queue()
        self._pool = ThreadPoolExecutor(max_workers=max(1, workers), thread_name_prefix="sched")
        self.disconnected = 0
        self.malformed = 0
        self.last_payload: Optional[bytes] = None

    def _is_authoritative(self, scheduler_id: str) -> bool:
        if self.authoritative_id is not None:
            return scheduler_id == self.authoritative_id
        return not any(s.authoritative for s in self.slots)

    def register(self, scheduler) -> Slot:
        """Attach now. Call between ticks (the engine does this for remote
        schedulers, which queue up through :meth:`enqueue`)."""
        if any(s.scheduler_id == scheduler.scheduler_id for s in self.slots):
            raise ValueError(f"scheduler id {scheduler.scheduler_id!r} already registered")
        auth = self._is_authoritative(scheduler.scheduler_id)
        if auth and self.authoritative_id is None:
            self.authoritative_id = scheduler.scheduler_id
        slot = Slot(scheduler, self.ctx if auth else self.ctx.fork(), auth)
        self.slots.append(slot)
        log.info("registered %s scheduler %s", "authoritative" if auth else "shadow", scheduler.scheduler_id)
        return slot

    def enqueue(self, scheduler) -> None:
        self._incoming.put(scheduler)

    def admit_pending(self) -> None:
        while True:
            try:
                sch = self._incoming.get_nowait()
            except queue.Empty:
                return
            try:
                self.register(sch)
            except ValueError as exc:
                if isinstance(sch, RemoteScheduler):
                    sch.refuse(str(exc))

    def unregister(self, scheduler_id: str) -> None:
        self.slots = [s for s in self.slots if s.scheduler_id != scheduler_id]

    def wait_for(self, count: int, timeout: float) -> bool:
        """Block until ``count`` schedulers are registered or queued."""
        deadline = time.monotonic() + timeout
        while True:
            self.admit_pending()
            if len(self.slots) >= count:
                return True
            if time.monotonic() >= deadline:
                return False
            time.sleep(0.01)

    def apply_to_shadows(self, batch: EventBatch) -> None:
        for s in self.slots:
            if s.view is not self.ctx:
                s.view.apply_batch(batch)

    def broadcast_tick(self, epoch: int, sim_time: int, batch) -> dict[str, list[SchedulerDecision]]:
        """Hand the identical events to every scheduler and collect decisions.

        ``batch`` is an :class:`EventBatch` or a plain list of events.

        Remote schedulers that miss the deadline contribute nothing this tick;
        ones that disconnect are dropped.
        """
        if not self.slots:
            return {}
        events = batch.events if isinstance(batch, EventBatch) else list(batch)
        payload = None
        if any(s.remote for s in self.slots):
            payload = encode(EventBatchMessage(epoch, sim_time, tuple(events)))
            self.last_payload = payload

        def call(slot: Slot):
            slot.stats.ticks += 1
            if slot.remote:
                return slot.scheduler.exchange(epoch, payload, self.decision_timeout)
            return slot.scheduler.decide(epoch, sim_time, events, slot.view)

        if len(self.slots) == 1:
            outcomes = [self._guard(call, self.slots[0])]
        else:
            futures = [self._pool.submit(self._guard, call, s) for s in self.slots]
            outcomes = [f.result() for f in futures]
        out = {}
        for slot, got in zip(list(self.slots), outcomes):
            if got is _GONE:
                self.disconnected += 1
                self.unregister(slot.scheduler_id)
                continue
            if got is _MALFORMED:
                slot.stats.malformed += 1
                self.malformed += 1
                got = []
            elif got is None:
                slot.stats.late += 1
                got = []
            out[slot.scheduler_id] = list(got)
        return out

    @staticmethod
    def _guard(call, slot):
        try:
            return call(slot)
        except (ConnectionError, OSError):
            return _GONE
        except ProtocolError:
            return _MALFORMED

    def apply_decisions(self, slot: Slot, decisions: list[SchedulerDecision]) -> list[DecisionResult]:
        """Route decisions to ``slot``'s view in list order (first come wins)."""
        results = []
        for d in decisions:
            r = slot.view.place_task(d.task, d.node)
            if r.placed:
                slot.stats.placed += 1
            else:
                slot.stats.refused[r.reason.value] += 1
            results.append(DecisionResult(d.task, d.node, str(r)))
        slot.stats.decisions += len(decisions)
        return results

    def cycle(self, epoch: int, sim_time: int, batch) -> dict[str, list[DecisionResult]]:
        decided = self.broadcast_tick(epoch, sim_time, batch)
        by_id = {s.scheduler_id: s for s in self.slots}
        out = {}
        for sid in sorted(decided, key=lambda k: (not by_id[k].authoritative, self.slots.index(by_id[k]))):
            slot = by_id[sid]
            results = self.apply_decisions(slot, decided[sid])
            out[sid] = results
            notify = getattr(slot.scheduler, "results", None)
            if notify is not None:
                try:
                    notify(epoch, results)
                except (ConnectionError, OSError):
                    self.disconnected += 1
                    self.unregister(sid)
        return out

    def stats(self) -> dict:
        return {
            s.scheduler_id: {
                "authoritative": s.authoritative,
                "ticks": s.stats.ticks,
                "decisions": s.stats.decisions,
                "placed": s.stats.placed,
                "refused": dict(s.stats.refused),
                "late": s.stats.late,
                "malformed": s.stats.malformed,
            }
            for s in self.slots
        }

    def close(self) -> None:
        for s in self.slots:
            if s.remote:
                s.scheduler.close("simulation finished")
        self._pool.shutdown(wait=False)


_GONE = object()
_MALFORMED = object()


class RemoteScheduler:
    """Server side of one scheduler connection."""

    def __init__(self, scheduler_id: str, channel: LineChannel) -> None:
        self.scheduler_id = scheduler_id
        self.channel = channel
        self.inbox: "queue.Queue" = queue.Queue()
        self.closed = threading.Event()
        self._send_lock = threading.Lock()

    def _send(self, data: bytes) -> None:
        if self.closed.is_set():
            raise ConnectionError("scheduler disconnected")
        with self._send_lock:
            self.channel.send_raw(data)

    def exchange(self, epoch: int, payload: bytes, timeout: float):
        """Send one batch and wait for the matching ``Decisions``.

        Returns the decisions, ``None`` when the deadline passes, or raises
        ``ProtocolError`` / ``ConnectionError``.
        """
        self._send(payload)
        deadline = time.monotonic() + timeout
        while True:
            left = deadline - time.monotonic()
            if left <= 0:
                return None
            try:
                msg = self.inbox.get(timeout=left)
            except queue.Empty:
                return None
            if msg is None:
                raise ConnectionError("scheduler disconnected")
            if isinstance(msg, ProtocolError):
                raise msg
            if isinstance(msg, Bye):
                raise ConnectionError(f"scheduler left: {msg.reason}")
            if not isinstance(msg, Decisions):
                raise ProtocolError(f"expected Decisions, got {type(msg).__name__}")
            if msg.epoch < epoch:
                continue  # answer to a tick that already timed out
            if msg.epoch != epoch:
                raise ProtocolError(f"Decisions for epoch {msg.epoch} while waiting for {epoch}")
            return [SchedulerDecision(d.task, d.node, self.scheduler_id) for d in msg.decisions]

    def results(self, epoch: int, results: list[DecisionResult]) -> None:
        self._send(encode(DecisionResults(epoch, tuple(results))))

    def refuse(self, reason: str) -> None:
        self.close(reason)

    def close(self, reason: str = "") -> None:
        if self.closed.is_set():
            return
        try:
            with self._send_lock:
                self.channel.send(Bye(reason))
        except OSError:
            pass
        self.closed.set()
        self.channel.close()


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        server: HarnessServer = self.server  # type: ignore[assignment]
        chan = LineChannel(self.request)
        try:
            first = chan.recv()
        except ProtocolError as exc:
            chan.send(Bye(f"malformed hello: {exc}"))
            return
        if not isinstance(first, Hello):
            if first is not None:
                chan.send(Bye("Hello must be the first message"))
            return
        if first.protocol_version != PROTOCOL_VERSION:
            chan.send(Bye(f"unsupported protocol_version {first.protocol_version}"))
            return
        chan.send(Hello("server", PROTOCOL_VERSION, first.role))
        if first.role == "control":
            self._control(server, chan)
        else:
            self._scheduler(server, chan, first.scheduler_id)

    def _control(self, server: "HarnessServer", chan: LineChannel) -> None:
        while True:
            try:
                msg = chan.recv()
            except ProtocolError as exc:
                chan.send(Stats(None, ok=False, detail=str(exc)))
                continue
            if msg is None or isinstance(msg, Bye):
                return
            if not isinstance(msg, Control):
                chan.send(Stats(None, ok=False, detail=f"unexpected {type(msg).__name__}"))
                continue
            chan.send(server.on_control(msg))

    def _scheduler(self, server: "HarnessServer", chan: LineChannel, scheduler_id: str) -> None:
        remote = RemoteScheduler(scheduler_id, chan)
        server.harness.enqueue(remote)
        while not remote.closed.is_set():
            try:
                msg = chan.recv()
            except ProtocolError as exc:
                remote.inbox.put(exc)
                continue
            except (OSError, ValueError):
                msg = None
            remote.inbox.put(msg)
            if msg is None or isinstance(msg, Bye):
                remote.closed.set()
                return


class HarnessServer(socketserver.ThreadingTCPServer):
    """TCP endpoint for remote schedulers and control clients."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, endpoint: str, harness: Harness, on_control: Callable[[Control], Stats]) -> None:
        super().__init__(parse_endpoint(endpoint), _Handler)
        self.harness = harness
        self.on_control = on_control
        self._thread: Optional[threading.Thread] = None

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "HarnessServer":
        self._thread = threading.Thread(target=self.serve_forever, name="harness-server", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class SchedulerClient:
    """Client side of a scheduler session.

    Keeps a mirror of the cluster built from the events it is sent plus the
    placements the server confirms, and answers every batch with the
    decisions of ``policy`` (greedy by default). The mirror starts empty, so
    a client must connect before the run starts to see the full cluster.
    """

    def __init__(self, endpoint: str, scheduler_id: str, policy=None, connect_timeout: float = 10.0) -> None:
        import socket

        self.scheduler_id = scheduler_id
        self.policy = policy or greedy_schedule
        self.mirror = ContextData()
        self.ticks = 0
        self.placed = 0
        self.refused = 0
        sock = socket.create_connection(parse_endpoint(endpoint), timeout=connect_timeout)
        sock.settimeout(None)
        self.channel = LineChannel(sock)
        self.channel.send(Hello(scheduler_id))
        reply = self.channel.recv()
        if not isinstance(reply, Hello):
            reason = reply.reason if isinstance(reply, Bye) else "no reply"
            self.channel.close()
            raise ConnectionRefusedError(f"server refused session: {reason}")

    def serve(self, max_ticks: Optional[int] = None) -> str:
        """Answer batches until the server says Bye (returns its reason) or
        ``max_ticks`` batches have been handled."""
        while max_ticks is None or self.ticks < max_ticks:
            msg = self.channel.recv()
            if msg is None:
                return "connection closed"
            if isinstance(msg, Bye):
                return msg.reason
            if isinstance(msg, EventBatchMessage):
                for e in msg.events:
                    self.mirror.apply_event(e, ("remote", msg.epoch))
                self.mirror.epoch = msg.epoch
                out = self.policy(self.mirror, self.scheduler_id)
                self.channel.send(Decisions(msg.epoch, tuple(out)))
                self.ticks += 1
            elif isinstance(msg, DecisionResults):
                for r in msg.results:
                    if r.placed:
                        self.mirror.place_task(r.task, r.node)
                        self.placed += 1
                    else:
                        self.refused += 1
        return "tick limit"

    def close(self) -> None:
        try:
            self.channel.send(Bye("client done"))
        except OSError:
            pass
        self.channel.close()
