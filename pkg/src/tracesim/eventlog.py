"""Pre-compiled event logs: parse a trace once, replay it many times.

Layout (UTF-8 text, one JSON document per line)::

    tracesim-eventlog
    {"anomaly_count":A,"event_count":E,"format_version":1,"source_digest":"..."}
    {"k":[ts,rank,a,b,file,line,sub],"e":{...event...}}      E of these
    {"k":[...],"a":"UnknownTask"}                             A of these, interleaved
    #sha256 <hex of every preceding byte>

Events the state would reject are stored as anomaly markers, so a replay
counts the same anomalies at the same points as a direct run.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator, Optional

from .model import canonical_json, event_from_dict, event_to_dict
from .parsing import AnomalyKind
from .pipeline import (
    DEFAULT_LOOKAHEAD_MICROS,
    DEFAULT_MAX_EVENTS,
    INF,
    AnomalyMarker,
    Entry,
    EventBatch,
    Pipeline,
    iter_batches,
)
from .state import ApplyStatus, ContextData

MAGIC = "tracesim-eventlog"
FORMAT_VERSION = 1


class EventLogError(ValueError):
    pass


class TruncatedLog(EventLogError):
    pass


class VersionMismatch(EventLogError):
    pass


class SourceDigestMismatch(EventLogError):
    pass


@dataclass
class CompileStats:
    events_written: int = 0
    anomalies: dict = field(default_factory=dict)
    source_digest: str = ""

    @property
    def anomalies_total(self) -> int:
        return sum(self.anomalies.values())


def _entry_line(e: Entry) -> str:
    p = e.payload
    if type(p) is AnomalyMarker:
        return canonical_json({"k": list(e.key), "a": p.kind.value})
    return canonical_json({"k": list(e.key), "e": event_to_dict(p)})


def compile_events(
    trace_root: str,
    out_file: str,
    workers: int = 2,
    lookahead_micros: int = DEFAULT_LOOKAHEAD_MICROS,
    max_events: int = DEFAULT_MAX_EVENTS,
) -> CompileStats:
    """Parse and merge ``trace_root`` once and write the ordered stream."""
    stats = CompileStats()
    kinds: Counter = Counter()
    ctx = ContextData()
    out_dir = os.path.dirname(os.path.abspath(out_file))
    with Pipeline(trace_root, workers, lookahead_micros, max_events) as pipe:
        stats.source_digest = pipe.trace_digest
        with tempfile.TemporaryFile("w+", encoding="utf-8", dir=out_dir) as body:
            for batch in iter_batches(pipe, lookahead_micros):
                for e in batch.entries:
                    p = e.payload
                    if type(p) is AnomalyMarker:
                        kinds[p.kind.value] += 1
                        ctx.anomalies.record(p.kind, e.source)
                    else:
                        r = ctx.apply_event(p, e.source)
                        if r.status is ApplyStatus.REJECTED:
                            kinds[r.anomaly.value] += 1
                            e = Entry(e.key, AnomalyMarker(r.anomaly, e.source))
                        else:
                            stats.events_written += 1
                    body.write(_entry_line(e))
                    body.write("\n")
            header = {
                "format_version": FORMAT_VERSION,
                "source_digest": stats.source_digest,
                "event_count": stats.events_written,
                "anomaly_count": sum(kinds.values()),
            }
            h = hashlib.sha256()
            tmp = out_file + ".tmp"
            with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
                for chunk in (MAGIC + "\n", canonical_json(header) + "\n"):
                    fh.write(chunk)
                    h.update(chunk.encode())
                body.seek(0)
                for line in body:
                    fh.write(line)
                    h.update(line.encode())
                fh.write(f"#sha256 {h.hexdigest()}\n")
            os.replace(tmp, out_file)
    stats.anomalies = dict(kinds)
    return stats


def read_header(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        magic = fh.readline().rstrip("\n")
        if magic != MAGIC:
            raise EventLogError(f"{path} is not a compiled event log")
        line = fh.readline()
        if not line.endswith("\n"):
            raise TruncatedLog(f"{path}: header is incomplete")
        try:
            header = json.loads(line)
        except json.JSONDecodeError as exc:
            raise EventLogError(f"{path}: bad header: {exc}") from None
    return header


def verify(path: str) -> dict:
    """Check the header, entry count and trailing digest; return the header."""
    header = read_header(path)
    h = hashlib.sha256()
    entries = 0
    trailer = None
    with open(path, "rb") as fh:
        for i, raw in enumerate(fh):
            if raw.startswith(b"#sha256 "):
                trailer = raw
                break
            if not raw.endswith(b"\n"):
                raise TruncatedLog(f"{path}: last line is incomplete")
            h.update(raw)
            if i >= 2:
                entries += 1
        extra = fh.read(1) if trailer is not None else b""
    expected = header.get("event_count", 0) + header.get("anomaly_count", 0)
    if entries < expected:
        raise TruncatedLog(f"{path}: {entries} entries, header promises {expected}")
    if trailer is None:
        raise TruncatedLog(f"{path}: missing digest trailer")
    if entries > expected or extra:
        raise EventLogError(f"{path}: {entries} entries, header promises {expected}")
    if not trailer.endswith(b"\n") or trailer[8:-1].decode() != h.hexdigest():
        raise EventLogError(f"{path}: digest mismatch")
    return header


class ReplaySource:
    """An event source over a compiled log with the pipeline's drain contract."""

    def __init__(self, path: str, expect_source_digest: Optional[str] = None) -> None:
        header = verify(path)
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise VersionMismatch(f"log format {version!r}, this build reads {FORMAT_VERSION}")
        if expect_source_digest is not None and header.get("source_digest") != expect_source_digest:
            raise SourceDigestMismatch("log was compiled from a different trace")
        self.path = path
        self.header = header
        self.trace_digest = header["source_digest"]
        self._fh = open(path, "r", encoding="utf-8")
        self._fh.readline()
        self._fh.readline()
        self._remaining = header["event_count"] + header["anomaly_count"]
        self._next: Optional[Entry] = None
        self._last_upto: Optional[int] = None
        self._advance()

    def _advance(self) -> None:
        if self._remaining == 0:
            self._next = None
            return
        line = self._fh.readline()
        if not line or line.startswith("#"):
            raise TruncatedLog(f"{self.path}: body ended early")
        d = json.loads(line)
        key = tuple(d["k"])
        if "a" in d:
            payload = AnomalyMarker(AnomalyKind(d["a"]), (key[4], key[5]))
        else:
            payload = event_from_dict(d["e"])
        self._remaining -= 1
        self._next = Entry(key, payload)

    def start(self) -> "ReplaySource":
        return self

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "ReplaySource":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @property
    def exhausted(self) -> bool:
        return self._next is None

    def peek_time(self) -> float:
        return INF if self._next is None else self._next.key[0]

    def drain_until(self, upto: int) -> EventBatch:
        if self._last_upto is not None and upto < self._last_upto:
            raise ValueError(f"drain_until({upto}) after drain_until({self._last_upto})")
        self._last_upto = upto
        out = []
        while self._next is not None and self._next.key[0] <= upto:
            out.append(self._next)
            self._advance()
        return EventBatch(upto, out)

    def __iter__(self) -> Iterator[Entry]:
        while self._next is not None:
            e = self._next
            self._advance()
            yield e


def replay_eventlog(log_file: str, config, schedulers=(), expect_source_digest: Optional[str] = None):
    """Run the engine over a compiled log; same contract as ``Engine.run``."""
    from .engine import Engine

    source = ReplaySource(log_file, expect_source_digest)
    return Engine(config, source=source, schedulers=schedulers).run()
