"""Simulation engine: clock, ticks, pacing, pause/resume."""

from __future__ import annotations

import csv
import hashlib
import logging
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .harness import Harness, HarnessServer
from .model import canonical_json
from .pipeline import DEFAULT_LOOKAHEAD_MICROS, DEFAULT_MAX_EVENTS, AnomalyMarker, Pipeline, PipelineError
from .protocol import Control, Stats
from .state import ApplyStatus, ContextData, Snapshot, StatsSample

log = logging.getLogger(__name__)


@dataclass
class SimConfig:
    trace_root: Optional[str] = None
    start_offset_micros: int = 600_000_000
    tick_micros: int = 5_000_000
    speed_factor: float = 1.0
    lookahead_micros: int = DEFAULT_LOOKAHEAD_MICROS
    max_events: int = DEFAULT_MAX_EVENTS
    end_time: Optional[int] = None
    listen_endpoint: Optional[str] = None
    stats_period_ticks: int = 12
    workers: int = 2
    stats_out: Optional[str] = None
    snapshot_out: Optional[str] = None
    authoritative: Optional[str] = None
    decision_timeout: Optional[float] = None
    await_schedulers: int = 0
    await_timeout: float = 30.0
    store_pending_usage: bool = True

    def __post_init__(self) -> None:
        if self.tick_micros <= 0:
            raise ValueError("tick_micros must be positive")
        if self.speed_factor < 0:
            raise ValueError("speed_factor must be >= 0")
        if self.start_offset_micros < 0:
            raise ValueError("start_offset_micros must be >= 0")
        if self.stats_period_ticks <= 0:
            raise ValueError("stats_period_ticks must be positive")

    def digest(self) -> str:
        """Hash of the settings that can change simulation results.

        Pacing, buffer caps, worker counts and scheduler wiring are left out:
        none of them may alter the outcome.
        """
        relevant = {
            "start_offset_micros": self.start_offset_micros,
            "tick_micros": self.tick_micros,
            "end_time": self.end_time,
            "store_pending_usage": self.store_pending_usage,
        }
        return hashlib.sha256(canonical_json(relevant).encode()).hexdigest()

    def tick_wall_seconds(self) -> float:
        return 0.0 if self.speed_factor == 0 else self.tick_micros / 1e6 / self.speed_factor


class EngineState(Enum):
    LOADING = "Loading"
    RUNNING = "Running"
    PAUSED = "Paused"
    FINISHED = "Finished"
    FAILED = "Failed"


_LEGAL = {
    (EngineState.LOADING, EngineState.RUNNING),
    (EngineState.LOADING, EngineState.FAILED),
    (EngineState.RUNNING, EngineState.PAUSED),
    (EngineState.PAUSED, EngineState.RUNNING),
    (EngineState.RUNNING, EngineState.FINISHED),
    (EngineState.RUNNING, EngineState.FAILED),
    (EngineState.PAUSED, EngineState.FINISHED),
}


class InvalidTransition(RuntimeError):
    def __init__(self, state: EngineState, wanted: str) -> None:
        super().__init__(f"cannot {wanted} while {state.value}")
        self.state = state


class SnapshotWhileRunning(RuntimeError):
    pass


class EngineFailed(RuntimeError):
    pass


def wall_budget(sim_micros: int, speed_factor: float) -> float:
    """Wall-clock seconds that pacing allots to ``sim_micros`` of simulated time."""
    return 0.0 if speed_factor == 0 else sim_micros / 1e6 / speed_factor


@dataclass
class RunResult:
    state: EngineState
    final: StatsSample
    snapshot: Snapshot
    snapshot_path: Optional[str]
    ticks: int
    harness: dict = field(default_factory=dict)


class Engine:
    """Replays an event source tick by tick against a ContextData.

    ``source`` is anything with ``drain_until``, ``exhausted`` and
    ``trace_digest`` (a :class:`Pipeline` or a compiled-log replay); when
    omitted a pipeline over ``config.trace_root`` is built.
    """

    def __init__(self, config: SimConfig, source=None, schedulers=(), ctx: Optional[ContextData] = None) -> None:
        self.config = config
        self.source = source
        self.ctx = ctx or ContextData(store_pending_usage=config.store_pending_usage)
        timeout = config.decision_timeout
        if timeout is None:
            timeout = config.tick_wall_seconds() or 10.0
        self.harness = Harness(self.ctx, config.authoritative, timeout)
        for s in schedulers:
            self.harness.register(s)
        self.state = EngineState.LOADING
        self.sim_time = config.start_offset_micros
        self.ticks = 0
        self.stats_rows: list[StatsSample] = []
        self.on_tick: list[Callable[["Engine"], None]] = []
        self.server: Optional[HarnessServer] = None
        self._cv = threading.Condition()
        self._pause_requested = False
        self._stop_requested = False
        self._speed = config.speed_factor
        self._reanchor = True
        self._stats_writer = None
        self._thread: Optional[threading.Thread] = None

    # --- control surface -----------------------------------------------------

    def _transition(self, new: EngineState) -> None:
        with self._cv:
            if (self.state, new) not in _LEGAL:
                raise InvalidTransition(self.state, new.value)
            log.debug("engine %s -> %s", self.state.value, new.value)
            self.state = new
            self._cv.notify_all()

    def pause(self, wait: bool = True, timeout: float = 30.0) -> EngineState:
        """Request a pause at the next tick boundary; an in-flight tick
        completes first."""
        with self._cv:
            if self.state is not EngineState.RUNNING or self._pause_requested:
                raise InvalidTransition(self.state, "pause")
            self._pause_requested = True
            self._cv.notify_all()
            if wait and threading.current_thread() is not self._thread:
                self._cv.wait_for(lambda: self.state is not EngineState.RUNNING, timeout)
            return self.state

    def resume(self) -> EngineState:
        with self._cv:
            if self.state is not EngineState.PAUSED:
                raise InvalidTransition(self.state, "resume")
            self._pause_requested = False
            self._reanchor = True
            self.state = EngineState.RUNNING
            self._cv.notify_all()
            return self.state

    def set_speed_factor(self, f: float) -> float:
        if f < 0:
            raise ValueError("speed factor must be >= 0")
        with self._cv:
            self._speed = float(f)
            self._reanchor = True
            self._cv.notify_all()
        return self._speed

    @property
    def speed_factor(self) -> float:
        return self._speed

    def stop(self) -> None:
        with self._cv:
            self._stop_requested = True
            self._cv.notify_all()

    def snapshot(self, path: Optional[str] = None) -> Snapshot:
        if self.state not in (EngineState.PAUSED, EngineState.FINISHED, EngineState.FAILED):
            raise SnapshotWhileRunning(f"engine is {self.state.value}; pause it first")
        with self.ctx.lock:
            snap = self.ctx.snapshot(self.sim_time, self.config.digest(), self._trace_digest())
        if path:
            snap.write(path)
        return snap

    def stats(self) -> StatsSample:
        with self.ctx.lock:
            return self.ctx.counters_sample(self.sim_time)

    def control(self, msg: Control) -> Stats:
        """Execute one control command; used by the wire protocol and ``ctl``."""
        try:
            if msg.command == "pause":
                self.pause(wait=True)
            elif msg.command == "resume":
                self.resume()
            elif msg.command == "speed":
                self.set_speed_factor(float(msg.argument))
            elif msg.command == "snapshot":
                if not msg.argument:
                    raise ValueError("snapshot needs a path")
                snap = self.snapshot(str(msg.argument))
                return Stats(self.stats(), self.state.value, True, snap.digest)
            elif msg.command == "stop":
                self.stop()
        except (InvalidTransition, SnapshotWhileRunning, ValueError, TypeError, OSError) as exc:
            return Stats(self.stats(), self.state.value, False, str(exc))
        return Stats(self.stats(), self.state.value, True, "")

    # --- main loop -----------------------------------------------------------

    def _trace_digest(self) -> str:
        return getattr(self.source, "trace_digest", "") or ""

    def run(self) -> RunResult:
        cfg = self.config
        self._thread = threading.current_thread()
        if self.source is None:
            if not cfg.trace_root:
                raise ValueError("config.trace_root is required without an explicit source")
            self.source = Pipeline(cfg.trace_root, cfg.workers, cfg.lookahead_micros, cfg.max_events)
        start = getattr(self.source, "start", None)
        if start is not None:
            start()
        stats_fh = None
        try:
            if cfg.listen_endpoint:
                self.server = HarnessServer(cfg.listen_endpoint, self.harness, self.control).start()
                log.info("listening on %s", self.server.endpoint)
            if cfg.await_schedulers:
                if not self.harness.wait_for(cfg.await_schedulers, cfg.await_timeout):
                    raise EngineFailed(f"only {len(self.harness.slots)} of {cfg.await_schedulers} schedulers connected")
            if cfg.stats_out:
                stats_fh = open(cfg.stats_out, "w", newline="")
                self._stats_writer = csv.writer(stats_fh)
                self._stats_writer.writerow(StatsSample.CSV_FIELDS)
            self._tick(self.sim_time)
            self._transition(EngineState.RUNNING)
            self._loop()
        except BaseException as exc:
            with self._cv:
                self.state = EngineState.FAILED
                self._cv.notify_all()
            if isinstance(exc, (PipelineError, OSError)):
                raise EngineFailed(str(exc)) from exc
            raise
        finally:
            if stats_fh is not None:
                stats_fh.close()
            close = getattr(self.source, "close", None)
            if close is not None:
                close()
            self.harness.close()
            if self.server is not None:
                self.server.stop()
        snap = self.snapshot(cfg.snapshot_out)
        return RunResult(self.state, self.stats(), snap, cfg.snapshot_out, self.ticks, self.harness.stats())

    def _loop(self) -> None:
        cfg = self.config
        anchor_wall = anchor_sim = 0.0
        while True:
            with self._cv:
                if self._pause_requested and not self._stop_requested:
                    self.state = EngineState.PAUSED
                    self._cv.notify_all()
                    self._cv.wait_for(lambda: self.state is not EngineState.PAUSED or self._stop_requested)
                if self._stop_requested:
                    self.state = EngineState.FINISHED
                    self._cv.notify_all()
                    return
            if cfg.end_time is not None and self.sim_time >= cfg.end_time:
                break
            if self.source.exhausted:
                break
            with self._cv:
                if self._reanchor:
                    anchor_wall, anchor_sim = time.monotonic(), self.sim_time
                    self._reanchor = False
                speed = self._speed
            self._tick(self.sim_time + cfg.tick_micros)
            self.ticks += 1
            if speed > 0:
                deadline = anchor_wall + (self.sim_time - anchor_sim) / 1e6 / speed
                with self._cv:
                    while not (self._reanchor or self._stop_requested or self._pause_requested):
                        left = deadline - time.monotonic()
                        if left <= 0:
                            break
                        self._cv.wait(left)
        self._transition(EngineState.FINISHED)

    def _tick(self, sim_time: int) -> None:
        batch = self.source.drain_until(sim_time)
        with self.ctx.lock:
            results = self.ctx.apply_batch(batch)
            delivered = [
                e.payload
                for e, r in zip(batch.entries, results)
                if r.status is ApplyStatus.APPLIED and type(e.payload) is not AnomalyMarker
            ]
            self.harness.apply_to_shadows(batch)
            self.harness.admit_pending()
            self.harness.cycle(self.ctx.epoch, sim_time, delivered)
            self.sim_time = sim_time
            if self.ctx.epoch % self.config.stats_period_ticks == 0:
                sample = self.ctx.counters_sample(sim_time)
                self.stats_rows.append(sample)
                if self._stats_writer is not None:
                    self._stats_writer.writerow(sample.csv_row())
        for hook in self.on_tick:
            hook(self)
