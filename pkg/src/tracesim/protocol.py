"""Newline-delimited JSON messages exchanged with remote schedulers and
control clients.

Every message is one UTF-8 JSON object on one line with a ``type`` field.
A session starts with ``Hello``; the server answers ``Hello`` (accepted) or
``Bye`` (refused). Scheduler sessions then loop ``EventBatch`` ->
``Decisions`` -> ``DecisionResults``; control sessions send ``Control`` and
get ``Stats`` back.
"""

from __future__ import annotations

import json
import socket
from dataclasses import asdict, dataclass
from typing import Optional, Union

from .model import MachineId, TaskId, canonical_json, event_from_dict, event_to_dict
from .state import StatsSample

PROTOCOL_VERSION = 1
CONTROL_COMMANDS = ("pause", "resume", "speed", "snapshot", "stats", "stop")


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class SchedulerDecision:
    task: TaskId
    node: MachineId
    scheduler_id: str = ""


@dataclass(frozen=True)
class DecisionResult:
    task: TaskId
    node: MachineId
    outcome: str  # "Placed" or a refusal reason

    @property
    def placed(self) -> bool:
        return self.outcome == "Placed"


@dataclass(frozen=True)
class Hello:
    scheduler_id: str
    protocol_version: int = PROTOCOL_VERSION
    role: str = "scheduler"


@dataclass(frozen=True)
class EventBatchMessage:
    epoch: int
    sim_time: int
    events: tuple = ()


@dataclass(frozen=True)
class Decisions:
    epoch: int
    decisions: tuple = ()


@dataclass(frozen=True)
class DecisionResults:
    epoch: int
    results: tuple = ()


@dataclass(frozen=True)
class Control:
    command: str
    argument: Optional[Union[str, float]] = None


@dataclass(frozen=True)
class Stats:
    sample: Optional[StatsSample]
    state: str = ""
    ok: bool = True
    detail: str = ""


@dataclass(frozen=True)
class Bye:
    reason: str = ""


Message = Union[Hello, EventBatchMessage, Decisions, DecisionResults, Control, Stats, Bye]

_WIRE_NAMES = {
    Hello: "Hello",
    EventBatchMessage: "EventBatch",
    Decisions: "Decisions",
    DecisionResults: "DecisionResults",
    Control: "Control",
    Stats: "Stats",
    Bye: "Bye",
}


def _to_wire(msg: Message) -> dict:
    d: dict = {"type": _WIRE_NAMES[type(msg)]}
    if isinstance(msg, EventBatchMessage):
        d.update(epoch=msg.epoch, sim_time=msg.sim_time, events=[event_to_dict(e) for e in msg.events])
    elif isinstance(msg, Decisions):
        d.update(
            epoch=msg.epoch,
            decisions=[
                {"task": list(x.task), "node": x.node, "scheduler_id": x.scheduler_id} for x in msg.decisions
            ],
        )
    elif isinstance(msg, DecisionResults):
        d.update(
            epoch=msg.epoch,
            results=[{"task": list(r.task), "node": r.node, "outcome": r.outcome} for r in msg.results],
        )
    elif isinstance(msg, Stats):
        d.update(
            sample=asdict(msg.sample) if msg.sample is not None else None,
            state=msg.state,
            ok=msg.ok,
            detail=msg.detail,
        )
    else:
        d.update(asdict(msg))
    return d


def encode(msg: Message) -> bytes:
    return (canonical_json(_to_wire(msg)) + "\n").encode("utf-8")


def _need(d: dict, key: str, typ):
    if key not in d:
        raise ProtocolError(f"missing field {key!r}")
    v = d[key]
    if typ is int and (isinstance(v, bool) or not isinstance(v, int)):
        raise ProtocolError(f"field {key!r} must be an integer")
    if typ is not int and not isinstance(v, typ):
        raise ProtocolError(f"field {key!r} has the wrong type")
    return v


def _task_id(v) -> TaskId:
    if not (isinstance(v, list) and len(v) == 2 and all(isinstance(x, int) and not isinstance(x, bool) for x in v)):
        raise ProtocolError(f"bad task id {v!r}")
    return TaskId(*v)


def decode(line: Union[bytes, str]) -> Message:
    """Parse one line into a message; raises :class:`ProtocolError`."""
    try:
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        d = json.loads(line)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"not a JSON line: {exc}") from None
    if not isinstance(d, dict):
        raise ProtocolError("message must be a JSON object")
    kind = d.get("type")
    try:
        if kind == "Hello":
            return Hello(_need(d, "scheduler_id", str), _need(d, "protocol_version", int), d.get("role", "scheduler"))
        if kind == "EventBatch":
            events = tuple(event_from_dict(e) for e in _need(d, "events", list))
            return EventBatchMessage(_need(d, "epoch", int), _need(d, "sim_time", int), events)
        if kind == "Decisions":
            decisions = tuple(
                SchedulerDecision(_task_id(x.get("task")), _need(x, "node", int), x.get("scheduler_id", ""))
                for x in _need(d, "decisions", list)
            )
            return Decisions(_need(d, "epoch", int), decisions)
        if kind == "DecisionResults":
            results = tuple(
                DecisionResult(_task_id(r.get("task")), _need(r, "node", int), _need(r, "outcome", str))
                for r in _need(d, "results", list)
            )
            return DecisionResults(_need(d, "epoch", int), results)
        if kind == "Control":
            cmd = _need(d, "command", str)
            if cmd not in CONTROL_COMMANDS:
                raise ProtocolError(f"unknown control command {cmd!r}")
            return Control(cmd, d.get("argument"))
        if kind == "Stats":
            s = d.get("sample")
            return Stats(StatsSample(**s) if s is not None else None, d.get("state", ""), d.get("ok", True), d.get("detail", ""))
        if kind == "Bye":
            return Bye(d.get("reason", ""))
    except ProtocolError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ProtocolError(f"malformed {kind}: {exc}") from None
    raise ProtocolError(f"unknown message type {kind!r}")


class LineChannel:
    """A socket wrapped for line-at-a-time message exchange."""

    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self.rfile = sock.makefile("rb")

    def send(self, msg: Message) -> None:
        self.sock.sendall(encode(msg))

    def send_raw(self, data: bytes) -> None:
        self.sock.sendall(data)

    def recv(self) -> Optional[Message]:
        """Next message, or ``None`` at end of stream."""
        line = self.rfile.readline()
        if not line:
            return None
        return decode(line)

    def close(self) -> None:
        # Shut the socket down before closing the reader: a thread blocked in
        # recv() holds the reader's lock and only wakes once the socket is down.
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.rfile.close()
        self.sock.close()


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep:
        raise ValueError(f"endpoint {endpoint!r} must be host:port")
    return (host or "127.0.0.1", int(port))
