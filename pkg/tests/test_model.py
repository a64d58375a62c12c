from __future__ import annotations

import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracesim.model import (
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
    TaskRecord,
    UpdateNodeTotalResources,
    UpdateTaskConstraints,
    UpdateTaskRequiredResources,
    UpdateTaskUsedResources,
    UsageSample,
    canonical_json,
    constraints_hold,
    dumps_event,
    eval_constraint,
    event_from_dict,
    event_to_dict,
    fits,
    loads_event,
    task_eligible,
)


def oracle_constraint(name, op, value, attrs):
    """Reference reading of the attribute-comparison rules, written
    independently of the implementation."""
    actual = attrs[name] if name in attrs else ""
    if op == "EQ":
        return actual == value
    if op == "NEQ":
        return actual != value

    def as_int(s):
        digits = s[1:] if s.startswith("-") else s
        if not digits or any(ch not in "0123456789" for ch in digits):
            return None
        return int(s)

    rhs = as_int(value)
    lhs = as_int(actual) if name in attrs else 0
    if rhs is not None and lhs is not None:
        return lhs < rhs if op == "LT" else lhs > rhs
    a, b = actual.encode("utf-8"), value.encode("utf-8")
    return a < b if op == "LT" else a > b


class TestEvalConstraint:
    def test_eq_exact(self):
        assert eval_constraint(TaskConstraint("k", ConstraintOp.EQ, "1"), {"k": "1"})

    def test_neq_missing_attribute_reads_empty(self):
        assert eval_constraint(TaskConstraint("k", ConstraintOp.NEQ, "1"), {})
        assert not eval_constraint(TaskConstraint("k", ConstraintOp.NEQ, ""), {})

    def test_lt_is_numeric_for_integers(self):
        c = TaskConstraint("n", ConstraintOp.LT, "10")
        assert eval_constraint(c, {"n": "9"})
        # the byte-wise reading would say "9" > "10"
        assert b"9" > b"10"

    def test_gt_falls_back_to_bytes(self):
        assert eval_constraint(TaskConstraint("a", ConstraintOp.GT, "abc"), {"a": "abd"})
        assert not eval_constraint(TaskConstraint("a", ConstraintOp.GT, "abc"), {"a": "ab"})

    def test_brute_force_against_oracle(self):
        values = ["", "0", "1", "9", "10", "-3", "x", "x1", "10a", " 1"]
        ops = {"EQ": ConstraintOp.EQ, "NEQ": ConstraintOp.NEQ, "LT": ConstraintOp.LT, "GT": ConstraintOp.GT}
        for (opname, op), v, present, actual in itertools.product(ops.items(), values, (True, False), values):
            attrs = {"k": actual} if present else {}
            expect = oracle_constraint("k", opname, v, attrs)
            assert eval_constraint(TaskConstraint("k", op, v), attrs) == expect, (opname, v, attrs)

    @given(st.text(max_size=4), st.text(max_size=4), st.sampled_from(list(ConstraintOp)), st.booleans())
    def test_property_matches_oracle(self, value, actual, op, present):
        attrs = {"k": actual} if present else {}
        assert eval_constraint(TaskConstraint("k", op, value), attrs) == oracle_constraint("k", op.name, value, attrs)


class TestEligibility:
    def test_zero_request_no_constraints_fits_any_online_node(self):
        t = TaskRecord(TaskId(1, 0), 0, 0, Resources(0.0, 0.0, 0.0))
        n = NodeRecord(1, None, Resources(0.0, 0.0))
        assert task_eligible(t, n)

    def test_cpu_over_capacity(self):
        t = TaskRecord(TaskId(1, 0), 0, 0, Resources(0.6, 0.1))
        n = NodeRecord(1, None, Resources(0.5, 0.5))
        assert not task_eligible(t, n)

    def test_offline_node_never_eligible(self):
        t = TaskRecord(TaskId(1, 0), 0, 0, Resources(0.0, 0.0))
        assert not task_eligible(t, NodeRecord(1, None, Resources(1.0, 1.0), online=False))

    def test_running_tasks_consume_capacity(self):
        t = TaskRecord(TaskId(1, 0), 0, 0, Resources(0.3, 0.1))
        other = TaskRecord(TaskId(2, 0), 0, 0, Resources(0.3, 0.1))
        n = NodeRecord(1, None, Resources(0.5, 0.5))
        assert task_eligible(t, n)
        assert not task_eligible(t, n, [other])

    def test_conjunction_over_small_constraint_sets(self):
        attrs = {"a": "1", "b": "2", "c": "3"}
        pool = [
            TaskConstraint("a", ConstraintOp.EQ, "1"),
            TaskConstraint("b", ConstraintOp.EQ, "9"),
            TaskConstraint("c", ConstraintOp.GT, "2"),
            TaskConstraint("d", ConstraintOp.LT, "5"),
        ]
        n = NodeRecord(1, None, Resources(1.0, 1.0), tuple(attrs.items()))
        for k in range(len(pool) + 1):
            for subset in itertools.combinations(pool, k):
                expect = all(eval_constraint(c, attrs) for c in subset)
                assert constraints_hold(subset, attrs) == expect
                t = TaskRecord(TaskId(1, 0), 0, 0, Resources(0.0, 0.0), subset)
                assert task_eligible(t, n) == expect

    def test_three_constraints_one_failing(self):
        cs = (
            TaskConstraint("a", ConstraintOp.EQ, "1"),
            TaskConstraint("b", ConstraintOp.EQ, "2"),
            TaskConstraint("c", ConstraintOp.EQ, "nope"),
        )
        t = TaskRecord(TaskId(1, 0), 0, 0, Resources(0.0, 0.0), cs)
        n = NodeRecord(1, None, Resources(1.0, 1.0), (("a", "1"), ("b", "2"), ("c", "3")))
        assert not task_eligible(t, n)

    def test_disk_only_checked_when_reported(self):
        r = Resources(0.1, 0.1, 0.5)
        assert fits(r, Resources(1.0, 1.0), (0.0, 0.0, 0.0))
        assert not fits(r, Resources(1.0, 1.0, 0.4), (0.0, 0.0, 0.0))


def test_usage_interval_must_be_positive():
    UsageSample(0, 300_000_000, TaskId(1, 0), None)
    with pytest.raises(ValueError):
        UsageSample(5, 5, TaskId(1, 0), None)


# --- serialization -----------------------------------------------------------

ints = st.integers(min_value=0, max_value=2**40)
fracs = st.one_of(st.none(), st.floats(min_value=0, max_value=1, allow_nan=False))
names = st.text(alphabet="abcxyz019", min_size=1, max_size=5)
tids = st.builds(TaskId, ints, st.integers(0, 500))
resources = st.builds(Resources, fracs, fracs, fracs)
constraints = st.lists(
    st.builds(TaskConstraint, names, st.sampled_from(list(ConstraintOp)), st.text(max_size=4)), max_size=3
).map(tuple)
attrs = st.lists(st.tuples(names, st.text(max_size=4)), max_size=3).map(tuple)


@st.composite
def usage(draw):
    start = draw(ints)
    return UsageSample(
        start, start + draw(st.integers(1, 10**9)), draw(tids), draw(st.one_of(st.none(), ints)),
        *[draw(st.one_of(st.none(), st.floats(0, 100, allow_nan=False))) for _ in range(12)],
    )


events = st.one_of(
    st.builds(AddTask, ints, tids, st.integers(0, 11), st.integers(0, 3), resources, constraints),
    st.builds(UpdateTaskRequiredResources, ints, tids, resources, st.integers(0, 11)),
    st.builds(UpdateTaskUsedResources, ints, usage()),
    st.builds(UpdateTaskConstraints, ints, tids, constraints),
    st.builds(RemoveTask, ints, tids, st.sampled_from(list(RemoveCause))),
    st.builds(AddNode, ints, st.builds(NodeRecord, ints, st.one_of(st.none(), names), resources, attrs)),
    st.builds(UpdateNodeTotalResources, ints, ints, resources),
    st.builds(AddNodeAttributes, ints, ints, attrs),
    st.builds(RemoveNodeAttributes, ints, ints, st.lists(names, max_size=3).map(tuple)),
    st.builds(RemoveNode, ints, ints),
)


@settings(max_examples=300)
@given(events)
def test_event_dict_round_trip(ev):
    assert event_from_dict(event_to_dict(ev)) == ev
    assert loads_event(dumps_event(ev)) == ev


@given(events)
def test_canonical_json_is_stable(ev):
    d = event_to_dict(ev)
    s = canonical_json(d)
    assert s == canonical_json(json.loads(s))
    assert s == json.dumps(json.loads(s), sort_keys=True, separators=(",", ":"))


def test_canonical_json_rejects_nan():
    with pytest.raises(ValueError):
        canonical_json({"x": float("nan")})
