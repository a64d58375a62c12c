"""Deterministic replay of six-table cluster traces against pluggable schedulers."""

from __future__ import annotations

from .engine import Engine, EngineState, RunResult, SimConfig
from .eventlog import ReplaySource, TruncatedLog, compile_events, replay_eventlog
from .harness import GreedyScheduler, Harness, SchedulerClient
from .pipeline import EventBatch, Pipeline
from .state import ContextData, Snapshot
from .synth import SyntheticSpec, generate_trace

__all__ = [
    "ContextData",
    "Engine",
    "EngineState",
    "EventBatch",
    "GreedyScheduler",
    "Harness",
    "Pipeline",
    "ReplaySource",
    "RunResult",
    "SchedulerClient",
    "SimConfig",
    "Snapshot",
    "SyntheticSpec",
    "TruncatedLog",
    "compile_events",
    "generate_trace",
    "replay_eventlog",
]

__version__ = "0.1.0"
