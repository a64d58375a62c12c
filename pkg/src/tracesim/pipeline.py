"""Per-table event buffers, fill workers and the timestamp-ordered merge.

Every buffered item is an :class:`Entry` whose key is the total order used
everywhere downstream::

    (timestamp, table rank, entity a, entity b, source file, line, sub-index)

Timestamps are made monotone per table as lines are read: a record that is
earlier than anything already read from its table is clamped forward to the
running maximum. The effective timestamp therefore depends only on file
content, which is what makes batch contents independent of how the fill
threads happen to interleave with the consumer.
"""

from __future__ import annotations

import dataclasses
import hashlib
import heapq
import logging
import os
import threading
from collections import deque
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional, Union

from .model import WorkloadEvent
from .parsing import AnomalyKind, Source, TraceTable, iter_lines, process_line, table_files

log = logging.getLogger(__name__)

DEFAULT_LOOKAHEAD_MICROS = 1_800_000_000
DEFAULT_MAX_EVENTS = 1_000_000
INF = float("inf")


@dataclass(frozen=True, slots=True)
class AnomalyMarker:
    """An anomaly travelling in the ordered stream instead of an event.

    Lines rejected by the parser become markers so they are counted at a
    deterministic point of the run; compiled logs also use them in place of
    events the state rejected.
    """

    kind: AnomalyKind
    source: Source


class Entry(NamedTuple):
    key: tuple
    payload: Union[WorkloadEvent, AnomalyMarker]

    @property
    def timestamp(self) -> int:
        return self.key[0]

    @property
    def source(self) -> Source:
        return (self.key[4], self.key[5])


@dataclass
class EventBatch:
    upto: int
    entries: list

    @property
    def events(self) -> list:
        return [e.payload for e in self.entries if not isinstance(e.payload, AnomalyMarker)]

    def __len__(self) -> int:
        return len(self.entries)


class PipelineError(RuntimeError):
    pass


class TableSource:
    """Reads one table line by line and turns it into keyed entries."""

    def __init__(self, root: str, table: TraceTable) -> None:
        self.table = table
        self._lines = iter_lines(root, table)
        self.horizon = -1
        self.exhausted = False
        self.lines_read = 0
        self.reordered = 0
        self.rejected = 0

    def read(self, max_lines: int) -> list:
        out = []
        rank = self.table.value
        for _ in range(max_lines):
            try:
                rel, n, line = next(self._lines)
            except StopIteration:
                self.exhausted = True
                break
            self.lines_read += 1
            p = process_line(self.table, line, (rel, n))
            if p.rejection is not None:
                self.rejected += 1
                ts = max(self.horizon, 0)
                out.append(Entry((ts, rank, -1, -1, rel, n, 0), AnomalyMarker(p.rejection.kind, (rel, n))))
                continue
            ts = p.timestamp
            if ts < self.horizon:
                self.reordered += 1
                ts = self.horizon
            self.horizon = ts
            a, b = p.entity
            for sub, ev in enumerate(p.events):
                if ev.timestamp != ts:
                    ev = dataclasses.replace(ev, timestamp=ts)
                out.append(Entry((ts, rank, a, b, rel, n, sub), ev))
        return out


class EventBuffer:
    """Bounded look-ahead buffer in front of one :class:`TableSource`.

    Holds at most ``max_events`` entries, none later than the consumer's
    current time plus ``lookahead_micros``. Parsed entries that do not fit yet
    wait in a small staging list owned by the producer. All shared fields are
    guarded by ``cv``; there is one producer and one consumer per buffer.
    """

    def __init__(
        self,
        source: TableSource,
        lookahead_micros: int = DEFAULT_LOOKAHEAD_MICROS,
        max_events: int = DEFAULT_MAX_EVENTS,
        cv: Optional[threading.Condition] = None,
    ) -> None:
        if max_events < 1 or lookahead_micros < 0:
            raise ValueError("buffer caps must be positive")
        self.source = source
        self.lookahead_micros = lookahead_micros
        self.max_events = max_events
        self.cv = cv or threading.Condition()
        self.items: deque = deque()
        self.held: deque = deque()
        self.sim_now = 0
        self.horizon = -1
        self.eof = False
        self.error: Optional[BaseException] = None
        # instrumentation
        self.max_occupancy = 0
        self.max_lead = 0
        self.admitted = 0

    def __len__(self) -> int:
        return len(self.items)

    @property
    def terminal(self) -> bool:
        return self.eof and not self.held and not self.items

    def _admit(self) -> int:
        items, held = self.items, self.held
        limit = self.sim_now + self.lookahead_micros
        n = 0
        while held and len(items) < self.max_events and held[0].key[0] <= limit:
            e = held.popleft()
            items.append(e)
            n += 1
            lead = e.key[0] - self.sim_now
            if lead > self.max_lead:
                self.max_lead = lead
        if len(items) > self.max_occupancy:
            self.max_occupancy = len(items)
        self.admitted += n
        return n

    def fill_step(self, chunk: int = 1024) -> tuple[int, int]:
        """Parse up to ``chunk`` lines if staging is empty, then admit what
        the caps allow. Returns ``(lines read, entries admitted)``."""
        with self.cv:
            if self.error is not None:
                return (0, 0)
            need = not self.held and not self.eof
        read = 0
        if need:
            try:
                before = self.source.lines_read
                new = self.source.read(chunk)
                read = self.source.lines_read - before
            except Exception as exc:  # I/O or gzip failure: the buffer cannot advance
                log.error("reading %s failed: %s", self.source.table.dirname, exc)
                with self.cv:
                    self.error = exc
                    self.eof = True
                    self.cv.notify_all()
                return (0, 0)
            with self.cv:
                self.held.extend(new)
                self.horizon = self.source.horizon
                self.eof = self.source.exhausted
        with self.cv:
            n = self._admit()
            if read or n:
                self.cv.notify_all()
        return (read, n)

    def fill(self, sim_now: Optional[int] = None, chunk: int = 1024) -> int:
        """Fill until a cap is reached or the input is exhausted; returns the
        number of entries added."""
        if sim_now is not None:
            with self.cv:
                self.sim_now = max(self.sim_now, sim_now)
        total = 0
        while True:
            read, n = self.fill_step(chunk)
            total += n
            if not read and not n:
                return total

    def safe_through(self, upto: int) -> bool:
        """Whether every entry with timestamp <= ``upto`` has left the buffer.
        Caller holds ``cv``."""
        if self.items and self.items[0].key[0] <= upto:
            return False
        if self.held:
            return self.held[0].key[0] > upto
        return self.eof or self.horizon > upto

    def pop_through(self, upto: int, out: list) -> None:
        items = self.items
        while items and items[0].key[0] <= upto:
            out.append(items.popleft())


def _entry_key(e: Entry) -> tuple:
    return e.key


class Pipeline:
    """Six table buffers filled by ``workers`` threads and drained in order.

    ``workers=0`` fills synchronously from the consumer thread.
    """

    def __init__(
        self,
        root: str,
        workers: int = 2,
        lookahead_micros: int = DEFAULT_LOOKAHEAD_MICROS,
        max_events: int = DEFAULT_MAX_EVENTS,
        chunk: int = 1024,
        tables: tuple = tuple(TraceTable),
    ) -> None:
        if not os.path.isdir(root):
            raise FileNotFoundError(f"trace root {root!r} is not a directory")
        self.root = root
        self.workers = workers
        self.chunk = chunk
        self.cv = threading.Condition()
        self.buffers = [
            EventBuffer(TableSource(root, t), lookahead_micros, max_events, self.cv) for t in tables
        ]
        self._last_upto: Optional[int] = None
        self._stop = False
        self._threads: list[threading.Thread] = []
        self._digest: Optional[str] = None

    def start(self) -> "Pipeline":
        if self.workers > 0 and not self._threads:
            n = min(self.workers, len(self.buffers))
            for w in range(n):
                mine = self.buffers[w::n]
                t = threading.Thread(target=self._work, args=(mine,), name=f"fill-{w}", daemon=True)
                t.start()
                self._threads.append(t)
        return self

    def _work(self, mine: list) -> None:
        while True:
            progressed = False
            for b in mine:
                if self._stop:
                    return
                read, n = b.fill_step(self.chunk)
                progressed = progressed or read > 0 or n > 0
            if not progressed:
                with self.cv:
                    if self._stop:
                        return
                    self.cv.wait(timeout=0.5)

    def close(self) -> None:
        with self.cv:
            self._stop = True
            self.cv.notify_all()
        for t in self._threads:
            t.join()
        self._threads.clear()

    def __enter__(self) -> "Pipeline":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()

    @property
    def exhausted(self) -> bool:
        with self.cv:
            return all(b.terminal for b in self.buffers)

    @property
    def trace_digest(self) -> str:
        if self._digest is None:
            self._digest = trace_digest(self.root)
        return self._digest

    def drain_until(self, upto: int) -> EventBatch:
        """Every entry with timestamp <= ``upto``, in total key order.

        Blocks until each buffer proves it holds nothing more at or before
        ``upto``.
        """
        if self._last_upto is not None and upto < self._last_upto:
            raise ValueError(f"drain_until({upto}) after drain_until({self._last_upto})")
        self._last_upto = upto
        with self.cv:
            for b in self.buffers:
                if upto > b.sim_now:
                    b.sim_now = upto
                b._admit()
            self.cv.notify_all()
        parts = []
        for b in self.buffers:
            out: list = []
            while True:
                with self.cv:
                    b.pop_through(upto, out)
                    if b.error is not None:
                        raise PipelineError(f"{b.source.table.dirname}: {b.error}") from b.error
                    b._admit()
                    if b.safe_through(upto):
                        break
                    self.cv.notify_all()
                    if self.workers > 0:
                        self.cv.wait(timeout=0.5)
                        continue
                b.fill_step(self.chunk)
            if out:
                out.sort(key=_entry_key)
                parts.append(out)
        if len(parts) == 1:
            entries = parts[0]
        else:
            entries = list(heapq.merge(*parts, key=_entry_key))
        return EventBatch(upto, entries)

    def peek_time(self) -> float:
        """Earliest timestamp not yet drained, or ``inf`` once exhausted."""
        best = INF
        for b in self.buffers:
            while True:
                with self.cv:
                    if b.error is not None:
                        raise PipelineError(f"{b.source.table.dirname}: {b.error}") from b.error
                    front = b.items[0] if b.items else (b.held[0] if b.held else None)
                    if front is not None:
                        best = min(best, front.key[0])
                        break
                    if b.eof:
                        break
                    if self.workers > 0:
                        self.cv.notify_all()
                        self.cv.wait(timeout=0.5)
                        continue
                b.fill_step(self.chunk)
        return best

    def stats(self) -> dict:
        with self.cv:
            return {
                b.source.table.dirname: {
                    "lines_read": b.source.lines_read,
                    "rejected": b.source.rejected,
                    "reordered": b.source.reordered,
                    "buffered": len(b.items),
                    "max_occupancy": b.max_occupancy,
                    "max_lead": b.max_lead,
                }
                for b in self.buffers
            }


def trace_digest(root: str) -> str:
    """SHA-256 over every table part file (relative path and raw bytes)."""
    h = hashlib.sha256()
    for table in TraceTable:
        for rel in table_files(root, table):
            h.update(rel.encode() + b"\0")
            with open(os.path.join(root, rel), "rb") as fh:
                for block in iter(lambda: fh.read(1 << 20), b""):
                    h.update(block)
            h.update(b"\0")
    return h.hexdigest()


def iter_batches(source, step: int, start: int = 0) -> Iterator[EventBatch]:
    """Drain ``source`` in windows of ``step`` micros until it is exhausted."""
    upto = start
    while True:
        batch = source.drain_until(upto)
        if batch.entries:
            yield batch
        nxt = source.peek_time()
        if nxt == INF:
            return
        upto = max(upto + step, int(nxt))
