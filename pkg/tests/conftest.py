from __future__ import annotations

import pytest

from tracesim.synth import SyntheticSpec, generate_trace

HOUR = 3600 * 1_000_000


@pytest.fixture(scope="session")
def small_trace(tmp_path_factory):
    """A 2-hour, 40-node trace with no injected anomalies."""
    root = tmp_path_factory.mktemp("small")
    spec = SyntheticSpec(nodes=40, tasks=400, duration_micros=2 * HOUR, seed=11, mean_task_micros=HOUR // 2)
    manifest = generate_trace(spec, str(root))
    return str(root), manifest


@pytest.fixture(scope="session")
def dirty_trace(tmp_path_factory):
    """Same shape as ``small_trace`` with 10% injected anomalies."""
    root = tmp_path_factory.mktemp("dirty")
    spec = SyntheticSpec(
        nodes=40, tasks=400, duration_micros=2 * HOUR, seed=12, mean_task_micros=HOUR // 2, anomaly_rate=0.1
    )
    manifest = generate_trace(spec, str(root))
    return str(root), manifest

