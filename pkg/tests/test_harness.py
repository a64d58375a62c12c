from __future__ import annotations

import itertools
import socket
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracesim.engine import Engine, EngineFailed, EngineState, SimConfig
from tracesim.harness import GreedyScheduler, Harness, SchedulerClient, greedy_schedule
from tracesim.model import TaskId
from tracesim.pipeline import EventBatch
from tracesim.protocol import (
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
    decode,
    encode,
    parse_endpoint,
)
from tracesim.state import ContextData, StatsSample

from builders import node, task
from test_model import events

OFFSET = 600_000_000
HOUR = 3600 * 1_000_000

# --- protocol ----------------------------------------------------------------------

tids = st.builds(TaskId, st.integers(0, 2**40), st.integers(0, 1000))
ids = st.text(min_size=1, max_size=8)
samples = st.builds(
    StatsSample,
    *[st.integers(0, 2**40) for _ in range(9)],
    st.floats(0, 10, allow_nan=False),
    st.floats(0, 10, allow_nan=False),
)
messages = st.one_of(
    st.builds(Hello, ids, st.integers(0, 5), st.sampled_from(["scheduler", "control"])),
    st.builds(EventBatchMessage, st.integers(0, 2**31), st.integers(0, 2**50), st.lists(events, max_size=4).map(tuple)),
    st.builds(Decisions, st.integers(0, 2**31), st.lists(st.builds(SchedulerDecision, tids, st.integers(0, 2**40), ids), max_size=4).map(tuple)),
    st.builds(DecisionResults, st.integers(0, 2**31), st.lists(st.builds(DecisionResult, tids, st.integers(0, 2**40), st.sampled_from(["Placed", "NotPending", "Ineligible"])), max_size=4).map(tuple)),
    st.builds(Control, st.sampled_from(["pause", "resume", "stats", "stop"])),
    st.builds(Control, st.just("speed"), st.floats(0, 1000, allow_nan=False)),
    st.builds(Control, st.just("snapshot"), st.text(max_size=10)),
    st.builds(Stats, st.one_of(st.none(), samples), st.sampled_from(["Running", "Paused"]), st.booleans(), st.text(max_size=10)),
    st.builds(Bye, st.text(max_size=10)),
)


@settings(max_examples=400)
@given(messages)
def test_message_round_trip(msg):
    wire = encode(msg)
    assert wire.endswith(b"\n") and wire.count(b"\n") == 1
    assert decode(wire) == msg


@pytest.mark.parametrize(
    "line",
    [
        b"not json\n",
        b"[1,2]\n",
        b'{"type":"Nope"}\n',
        b'{"type":"Hello"}\n',
        b'{"type":"Hello","scheduler_id":"x","protocol_version":"1"}\n',
        b'{"type":"Decisions","epoch":1,"decisions":[{"task":[1],"node":2}]}\n',
        b'{"type":"Control","command":"explode"}\n',
        b"\xff\xfe\n",
    ],
)
def test_malformed_lines_raise(line):
    with pytest.raises(ProtocolError):
        decode(line)


def test_parse_endpoint():
    assert parse_endpoint("127.0.0.1:9000") == ("127.0.0.1", 9000)
    assert parse_endpoint(":9000") == ("127.0.0.1", 9000)
    with pytest.raises(ValueError):
        parse_endpoint("nohost")


# --- greedy --------------------------------------------------------------------------


def _ctx(nodes, tasks):
    ctx = ContextData()
    for e in nodes + tasks:
        ctx.apply_event(e)
    return ctx


def test_greedy_single_task_single_node():
    ctx = _ctx([node(1)], [task(1)])
    (d,) = greedy_schedule(ctx)
    assert d.task == TaskId(1, 0) and d.node == 1


def test_greedy_tie_goes_to_lowest_machine():
    ctx = _ctx([node(7), node(3), node(5)], [task(1)])
    assert greedy_schedule(ctx)[0].node == 3


def test_greedy_priority_order():
    ctx = _ctx([node(1, cpu=0.15)], [task(1, prio=0), task(2, prio=9)])
    (d,) = greedy_schedule(ctx)
    assert d.task == TaskId(2, 0)


def _fits_anywhere(ctx, t):
    rec = ctx.tasks[t]
    return any(ctx.eligible(rec, n) for n in ctx.nodes.values())


def test_full_cluster_gets_no_decisions():
    for caps in itertools.product((0.1, 0.2, 0.3), repeat=3):
        ctx = _ctx([node(i + 1, cpu=c, mem=1.0) for i, c in enumerate(caps)], [task(j, cpu=0.1) for j in range(1, 9)])
        for d in greedy_schedule(ctx):
            assert ctx.place_task(d.task, d.node).placed
        # whatever is left fits nowhere (brute-force check on every node)
        for t in ctx.pending:
            assert not _fits_anywhere(ctx, t)
        assert greedy_schedule(ctx) == []


def test_greedy_scheduler_skips_unchanged_views():
    ctx = _ctx([node(1, cpu=0.05)], [task(1)])
    g = GreedyScheduler()
    assert g.decide(1, 0, [], ctx) == []
    calls = []
    import tracesim.harness as h

    orig = h.greedy_schedule
    h.greedy_schedule = lambda *a: calls.append(1) or orig(*a)
    try:
        assert g.decide(2, 0, [], ctx) == []
        assert calls == []
        ctx.apply_event(node(2))
        assert len(g.decide(3, 0, [], ctx)) == 1
        assert calls == [1]
    finally:
        h.greedy_schedule = orig


# --- harness -------------------------------------------------------------------------


def test_zero_schedulers_tick_proceeds():
    ctx = _ctx([node(1)], [task(1)])
    h = Harness(ctx)
    assert h.cycle(1, 0, []) == {}
    assert list(ctx.pending) == [TaskId(1, 0)]


def test_decision_outcomes():
    ctx = _ctx([node(1)], [task(1)])
    h = Harness(ctx)
    slot = h.register(GreedyScheduler())
    d = SchedulerDecision(TaskId(1, 0), 1, "greedy")
    assert [r.outcome for r in h.apply_decisions(slot, [d, d])] == ["Placed", "NotPending"]


def test_shadows_never_touch_authoritative_state():
    ctx = _ctx([node(m) for m in range(1, 4)], [task(j) for j in range(1, 6)])
    h = Harness(ctx)
    h.register(GreedyScheduler("auth"))
    before = ctx.snapshot(0)
    shadow_slots = [h.register(GreedyScheduler(f"s{i}")) for i in range(4)]
    assert ctx.snapshot(0) == before
    for s in shadow_slots:
        assert s.view is not ctx and not s.authoritative
    # a shadow decides first, on its own fork
    h.apply_decisions(shadow_slots[0], greedy_schedule(shadow_slots[0].view, "s0"))
    assert ctx.snapshot(0) == before
    assert shadow_slots[0].view.tasks_running == 5


def test_remote_payloads_are_byte_identical():
    ctx = _ctx([node(1)], [task(1)])
    h = Harness(ctx, decision_timeout=0.5)
    a, b = socket.socketpair()
    c, d = socket.socketpair()
    from tracesim.harness import RemoteScheduler

    r1, r2 = RemoteScheduler("r1", LineChannel(a)), RemoteScheduler("r2", LineChannel(c))
    h.register(r1)
    h.register(r2)
    h.broadcast_tick(1, 5, EventBatch(5, []))
    got1 = b.makefile("rb").readline()
    got2 = d.makefile("rb").readline()
    assert got1 == got2 == h.last_payload
    assert decode(got1) == EventBatchMessage(1, 5, ())
    for s in (a, b, c, d):
        s.close()


# --- live sessions ------------------------------------------------------------------


def _start(engine):
    out = {}

    def body():
        try:
            out["r"] = engine.run()
        except Exception as exc:  # surfaced through ``out`` for the test to inspect
            out["error"] = exc

    t = threading.Thread(target=body, daemon=True)
    t.start()
    deadline = time.monotonic() + 10
    while engine.server is None:
        assert time.monotonic() < deadline
        time.sleep(0.005)
    return t, out


def test_remote_scheduler_matches_in_process(small_trace):
    root, _ = small_trace
    cfg = dict(trace_root=root, speed_factor=0, end_time=OFFSET + HOUR, decision_timeout=30.0)
    local = Engine(SimConfig(**cfg), schedulers=[GreedyScheduler()]).run()
    eng = Engine(SimConfig(listen_endpoint="127.0.0.1:0", await_schedulers=1, **cfg))
    t, out = _start(eng)
    client = SchedulerClient(eng.server.endpoint, "remote")
    ct = threading.Thread(target=client.serve, daemon=True)
    ct.start()
    t.join(120)
    ct.join(10)
    r = out["r"]
    assert r.harness["remote"]["malformed"] == 0 and r.harness["remote"]["late"] == 0
    assert r.snapshot.digest == local.snapshot.digest
    assert client.ticks == r.ticks + 1


def _raw_session(endpoint, hello):
    sock = socket.create_connection(parse_endpoint(endpoint), timeout=10)
    chan = LineChannel(sock)
    chan.send_raw(hello)
    return chan


def test_bad_hello_gets_bye(small_trace):
    eng = Engine(SimConfig(trace_root=small_trace[0], speed_factor=0, listen_endpoint="127.0.0.1:0", await_schedulers=1, await_timeout=5))
    t, out = _start(eng)
    chan = _raw_session(eng.server.endpoint, encode(Hello("x", PROTOCOL_VERSION + 1)))
    assert isinstance(chan.recv(), Bye)
    chan.close()
    chan = _raw_session(eng.server.endpoint, encode(Control("stats")))
    assert isinstance(chan.recv(), Bye)
    chan.close()
    t.join(30)
    assert eng.state is EngineState.FAILED  # nobody valid ever joined
    assert isinstance(out["error"], EngineFailed)


def test_malformed_decisions_are_counted(small_trace):
    cfg = SimConfig(
        trace_root=small_trace[0], speed_factor=0, end_time=OFFSET + 60_000_000,
        listen_endpoint="127.0.0.1:0", await_schedulers=1, decision_timeout=5.0,
    )
    eng = Engine(cfg, schedulers=[GreedyScheduler()])
    t, out = _start(eng)
    chan = _raw_session(eng.server.endpoint, encode(Hello("rude")))
    assert isinstance(chan.recv(), Hello)
    answered = 0
    while True:
        msg = chan.recv()
        if msg is None or isinstance(msg, Bye):
            break
        if isinstance(msg, EventBatchMessage):
            chan.send_raw(b'{"type":"Decisions","epoch":"soon"}\n' if answered % 2 == 0 else encode(Decisions(msg.epoch, ())))
            answered += 1
    t.join(30)
    stats = out["r"].harness
    assert stats["rude"]["malformed"] == (answered + 1) // 2
    assert stats["greedy"]["malformed"] == 0
    chan.close()


def test_control_session(small_trace):
    cfg = SimConfig(trace_root=small_trace[0], speed_factor=50.0, listen_endpoint="127.0.0.1:0")
    eng = Engine(cfg, schedulers=[GreedyScheduler()])
    t, out = _start(eng)
    chan = _raw_session(eng.server.endpoint, encode(Hello("ctl", role="control")))
    assert isinstance(chan.recv(), Hello)

    def ask(cmd, arg=None):
        chan.send(Control(cmd, arg))
        return chan.recv()

    # the listener is up while the engine is still loading; pause is refused then
    deadline = time.monotonic() + 10
    while ask("stats").state != "Running":
        assert time.monotonic() < deadline
        time.sleep(0.01)
    assert ask("pause").state == "Paused"
    s1 = ask("stats").sample
    time.sleep(0.1)
    assert ask("stats").sample == s1
    assert not ask("pause").ok
    assert ask("speed", 0.0).ok
    assert ask("resume").state == "Running"
    assert ask("stop").ok
    t.join(30)
    assert out["r"].state is EngineState.FINISHED
    chan.close()
