from __future__ import annotations

import os
import random

import pytest

from tracesim.model import AddNode, AddTask
from tracesim.parsing import TraceTable
from tracesim.pipeline import (
    INF,
    AnomalyMarker,
    EventBuffer,
    Pipeline,
    PipelineError,
    TableSource,
    iter_batches,
    trace_digest,
)

MIN = 60 * 1_000_000


def write_table(root, table, lines, part="part-00000-of-00001.csv"):
    d = os.path.join(root, table.dirname)
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, part), "w") as fh:
        fh.write("".join(line + "\n" for line in lines))


def machine_line(ts, m):
    return f"{ts},{m},0,p,0.5,0.5"


def submit_line(ts, job, idx=0):
    return f"{ts},,{job},{idx},,0,u,0,0,0.01,0.01,,"


def attr_line(ts, m, name="a"):
    return f"{ts},{m},{name},v,0"


def drain_all(pipe, step):
    out = []
    for b in iter_batches(pipe, step):
        out.extend(b.entries)
    return out


class TestBuffer:
    def test_fill_within_window(self, tmp_path):
        write_table(tmp_path, TraceTable.MACHINE_ATTRIBUTES, [attr_line(i * 1000, 1) for i in range(500)])
        buf = EventBuffer(TableSource(str(tmp_path), TraceTable.MACHINE_ATTRIBUTES))
        assert buf.fill(0) == 500
        assert len(buf) == 500

    def test_exhausted_input_is_terminal(self, tmp_path):
        write_table(tmp_path, TraceTable.MACHINE_ATTRIBUTES, [attr_line(0, 1)])
        buf = EventBuffer(TableSource(str(tmp_path), TraceTable.MACHINE_ATTRIBUTES))
        buf.fill(0)
        buf.pop_through(10, [])
        assert buf.fill(0) == 0
        assert buf.terminal

    def test_event_cap_is_hard(self, tmp_path):
        write_table(tmp_path, TraceTable.MACHINE_ATTRIBUTES, [attr_line(i, 1) for i in range(2000)])
        buf = EventBuffer(TableSource(str(tmp_path), TraceTable.MACHINE_ATTRIBUTES), max_events=1000)
        assert buf.fill(0, chunk=64) == 1000
        assert buf.max_occupancy == 1000
        assert buf.fill(0) == 0

    def test_lookahead_is_respected(self, tmp_path):
        lines = [attr_line(i * MIN, 1) for i in range(120)]
        write_table(tmp_path, TraceTable.MACHINE_ATTRIBUTES, lines)
        buf = EventBuffer(TableSource(str(tmp_path), TraceTable.MACHINE_ATTRIBUTES), lookahead_micros=30 * MIN)
        buf.fill(0, chunk=7)
        assert len(buf) == 31  # t = 0..30 min inclusive
        assert all(e.timestamp <= 30 * MIN for e in buf.items)
        buf.pop_through(10 * MIN, [])
        buf.fill(10 * MIN)
        assert buf.items[-1].timestamp == 40 * MIN
        assert buf.max_lead <= 30 * MIN


class TestMerge:
    def test_merge_across_tables(self, tmp_path):
        write_table(tmp_path, TraceTable.MACHINE_EVENTS, [machine_line(3, 1)])
        write_table(tmp_path, TraceTable.TASK_EVENTS, [submit_line(1, 1)])
        write_table(tmp_path, TraceTable.MACHINE_ATTRIBUTES, [attr_line(2, 1)])
        with Pipeline(str(tmp_path), workers=0) as p:
            b = p.drain_until(5)
        # SUBMIT produces two events at t=1
        assert [e.timestamp for e in b.entries] == [1, 1, 2, 3]

    def test_upto_before_everything_is_empty(self, tmp_path):
        write_table(tmp_path, TraceTable.MACHINE_EVENTS, [machine_line(100, 1)])
        with Pipeline(str(tmp_path), workers=0) as p:
            assert p.drain_until(50).entries == []
            assert p.peek_time() == 100

    @pytest.mark.parametrize("workers", [0, 1, 3])
    def test_machine_events_precede_task_events_at_equal_time(self, tmp_path, workers):
        rng = random.Random(workers)
        times = sorted(rng.randrange(0, 50) for _ in range(200))
        write_table(tmp_path, TraceTable.MACHINE_EVENTS, [machine_line(t, i) for i, t in enumerate(times)])
        write_table(tmp_path, TraceTable.TASK_EVENTS, [submit_line(t, i + 1) for i, t in enumerate(times)])
        with Pipeline(str(tmp_path), workers=workers, chunk=16) as p:
            entries = drain_all(p, 7)
        keys = [e.key for e in entries]
        assert keys == sorted(keys)
        for t in set(times):
            kinds = [type(e.payload) for e in entries if e.timestamp == t]
            first_task = kinds.index(AddTask)
            assert all(k is AddNode for k in kinds[:first_task])
            assert AddNode not in kinds[first_task:]

    def test_non_monotone_drain_refused(self, tmp_path):
        write_table(tmp_path, TraceTable.MACHINE_EVENTS, [machine_line(0, 1)])
        with Pipeline(str(tmp_path), workers=0) as p:
            p.drain_until(10)
            with pytest.raises(ValueError):
                p.drain_until(5)


def test_out_of_order_records_are_clamped(tmp_path):
    write_table(tmp_path, TraceTable.MACHINE_ATTRIBUTES, [attr_line(10, 1), attr_line(5, 2), attr_line(12, 3)])
    src = TableSource(str(tmp_path), TraceTable.MACHINE_ATTRIBUTES)
    entries = src.read(10)
    assert [e.timestamp for e in entries] == [10, 10, 12]
    assert src.reordered == 1


def test_rejected_lines_become_markers(tmp_path):
    write_table(tmp_path, TraceTable.MACHINE_ATTRIBUTES, [attr_line(10, 1), "garbage", attr_line(12, 3)])
    with Pipeline(str(tmp_path), workers=0) as p:
        b = p.drain_until(100)
    markers = [e for e in b.entries if isinstance(e.payload, AnomalyMarker)]
    assert len(markers) == 1 and markers[0].timestamp == 10 and markers[0].source[1] == 2
    assert len(b.events) == 2


def test_batches_independent_of_workers_and_chunking(small_trace):
    root, _ = small_trace
    runs = []
    for workers, chunk in ((0, 1024), (1, 50), (2, 333), (8, 4096)):
        with Pipeline(root, workers=workers, chunk=chunk, max_events=500, lookahead_micros=10 * MIN) as p:
            runs.append([(b.upto, b.entries) for b in iter_batches(p, 5_000_000, start=600_000_000)])
    assert all(r == runs[0] for r in runs[1:])


def test_caps_hold_on_real_trace(small_trace):
    root, _ = small_trace
    with Pipeline(root, workers=2, max_events=200, lookahead_micros=5 * MIN) as p:
        n = sum(len(b) for b in iter_batches(p, 5_000_000))
        assert p.exhausted and p.peek_time() == INF
        for b in p.buffers:
            assert b.max_occupancy <= 200
            assert b.max_lead <= 5 * MIN
    assert n > 0


def test_unreadable_part_fails_loudly(tmp_path):
    d = tmp_path / TraceTable.TASK_EVENTS.dirname
    d.mkdir()
    (d / "part-00000-of-00001.csv.gz").write_bytes(b"not gzip at all")
    with Pipeline(str(tmp_path), workers=1) as p:
        with pytest.raises(PipelineError):
            p.drain_until(10**12)


def test_trace_digest_tracks_content(tmp_path):
    write_table(tmp_path, TraceTable.MACHINE_EVENTS, [machine_line(0, 1)])
    d1 = trace_digest(str(tmp_path))
    write_table(tmp_path, TraceTable.MACHINE_EVENTS, [machine_line(0, 2)])
    assert trace_digest(str(tmp_path)) != d1
