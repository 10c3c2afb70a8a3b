"""The observation phase: evaluator contract, synthetic oracle, wire protocol.

An evaluator turns an :class:`EvalRequest` into an :class:`EvalResult`.  The
engine owns the early-stop policy for every evaluator: trainers merely
stream epoch metrics and honor stop directives.  The synthetic oracle is a
deterministic cost landscape for desk-scale experiments; the external
evaluator drives any trainer process speaking the newline-delimited JSON
protocol over its standard streams.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import queue
import subprocess
import threading
import time
from dataclasses import dataclass
from typing import Sequence

from morphnas.graph import ArchGraph

__all__ = [
    "EvalRequest",
    "EvalResult",
    "early_stop_estimate",
    "synthetic_cost",
    "synthetic_oracle",
    "SyntheticEvaluator",
    "ExternalEvaluator",
    "DEFAULT_TAU",
    "DEFAULT_MAX_EPOCHS",
]

log = logging.getLogger(__name__)

DEFAULT_TAU = 5
DEFAULT_MAX_EPOCHS = 200

# synthetic landscape shape: depth pull toward 8 conv layers, width pull
# toward 2^7 filters, reward for up to 4 skips, small hash-seeded noise
_ORACLE_DEPTH_WEIGHT = 0.5
_ORACLE_WIDTH_WEIGHT = 0.3
_ORACLE_SKIP_WEIGHT = 0.2
_ORACLE_NOISE_WEIGHT = 0.01
_ORACLE_TARGET_DEPTH = 8
_ORACLE_TARGET_LOG_WIDTH = 7
_ORACLE_TARGET_SKIPS = 4
_ORACLE_TRACE_EPOCHS = 10


@dataclass(frozen=True)
class EvalRequest:
    arch_id: int
    graph: ArchGraph
    max_epochs: int = DEFAULT_MAX_EPOCHS
    tau: int = DEFAULT_TAU
    seed: int = 0

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.max_epochs < self.tau:
            raise ValueError("max_epochs must be >= tau")


@dataclass
class EvalResult:
    arch_id: int
    cost: float | None
    epoch_trace: list[tuple[int, float]]
    status: str  # "ok" | "oom" | "failed"
    estimated_bytes: int | None = None
    reason: str | None = None
    wall_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def early_stop_estimate(trace: Sequence[float], tau: int) -> tuple[int, float]:
    """Stop epoch and cost estimate under the tau-window rule.

    Stops at the first epoch e with no new running minimum in the window
    (e - tau, e]; the cost is the mean of the last tau values up to e (all
    values when fewer).  Never stops when minima keep improving.
    """
    if not trace:
        raise ValueError("empty trace")
    if tau < 1:
        raise ValueError("tau must be >= 1")
    best = math.inf
    last_improve = 0  # epoch of the latest new minimum, 1-based
    stop = len(trace)
    for e, value in enumerate(trace, start=1):
        if value < best:
            best = value
            last_improve = e
        if e - last_improve >= tau:
            stop = e
            break
    window = trace[max(0, stop - tau) : stop]
    return stop, float(sum(window) / len(window))


def _unit_noise(structure_key: bytes, seed: int) -> float:
    """Deterministic uniform [0, 1) value from a structure digest and seed."""
    digest = hashlib.blake2b(structure_key + seed.to_bytes(8, "little", signed=True), digest_size=8)
    return int.from_bytes(digest.digest(), "little") / 2**64


def synthetic_cost(graph: ArchGraph, seed: int = 0, noise: bool = True) -> float:
    """Deterministic cost in [0, 1] over the synthetic landscape.

    Minimized at 8 conv layers of width 128 with at least 4 skips.  Invariant
    under morphs that change neither conv count, conv widths, nor skip count.
    """
    conv_widths = sorted(
        layer.params.filters for layer in graph.layers.values() if layer.kind == "conv"
    )
    n_conv = len(conv_widths)
    n_skips = len(graph.skip_set())
    depth_term = abs(n_conv - _ORACLE_TARGET_DEPTH) / _ORACLE_TARGET_DEPTH
    if n_conv:
        width_term = sum(
            abs(math.log2(w) - _ORACLE_TARGET_LOG_WIDTH) / _ORACLE_TARGET_LOG_WIDTH
            for w in conv_widths
        ) / n_conv
    else:
        width_term = 1.0
    skip_term = max(0.0, 1.0 - n_skips / _ORACLE_TARGET_SKIPS)
    cost = (
        _ORACLE_DEPTH_WEIGHT * depth_term
        + _ORACLE_WIDTH_WEIGHT * min(width_term, 1.0)
        + _ORACLE_SKIP_WEIGHT * skip_term
    )
    if noise:
        key = repr((conv_widths, n_skips)).encode()
        cost += _ORACLE_NOISE_WEIGHT * _unit_noise(key, seed)
    return min(max(cost, 0.0), 1.0)


def _synthetic_trace(cost: float, tau: int) -> list[tuple[int, float]]:
    """Ten epochs decaying geometrically to cost; the final tau epochs sit
    exactly at cost so the tau-window estimator reproduces it."""
    trace = []
    for e in range(1, _ORACLE_TRACE_EPOCHS + 1):
        if e <= _ORACLE_TRACE_EPOCHS - tau:
            trace.append((e, cost + (1.0 - cost) * 0.5**e))
        else:
            trace.append((e, cost))
    return trace


def synthetic_oracle(graph: ArchGraph, seed: int = 0, tau: int = DEFAULT_TAU, noise: bool = True) -> EvalResult:
    """Evaluate a graph on the synthetic landscape."""
    c = synthetic_cost(graph, seed, noise)
    trace = _synthetic_trace(c, tau)
    _, cost = early_stop_estimate([v for _, v in trace], tau)
    return EvalResult(arch_id=-1, cost=cost, epoch_trace=trace, status="ok", wall_time=0.0)


class SyntheticEvaluator:
    """Evaluator wrapper around the synthetic oracle."""

    def __init__(self, noise: bool = True):
        self.noise = noise

    def evaluate(self, req: EvalRequest) -> EvalResult:
        res = synthetic_oracle(req.graph, req.seed, req.tau, self.noise)
        res.arch_id = req.arch_id
        return res

    def close(self) -> None:
        pass


# -- external trainer over the line protocol -----------------------------------


class _ProcHandle:
    """Trainer child process with a line-reader thread."""

    def __init__(self, command: list[str]):
        self.command = command
        self.proc = subprocess.Popen(
            command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            bufsize=1,
        )
        self.lines: queue.Queue[str | None] = queue.Queue()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        for line in self.proc.stdout:
            self.lines.put(line)
        self.lines.put(None)  # EOF marker

    def alive(self) -> bool:
        return self.proc.poll() is None

    def send(self, obj: dict) -> None:
        self.proc.stdin.write(json.dumps(obj) + "\n")
        self.proc.stdin.flush()

    def read(self, timeout: float) -> str | None:
        """Next line, None on EOF; raises queue.Empty on timeout."""
        return self.lines.get(timeout=timeout)

    def kill(self) -> None:
        try:
            self.proc.kill()
            self.proc.wait(timeout=5)
        except Exception:
            pass


class ExternalEvaluator:
    """Drives a trainer process speaking the evaluate/epoch/final protocol.

    The engine sends a stop directive once the tau-window rule triggers and
    tolerates epoch lines already in flight.  A failed or timed-out request
    kills the process; the next request respawns it.
    """

    # wait allowance before the first epoch arrives (process startup, data load)
    INITIAL_LINE_TIMEOUT = 600.0

    def __init__(self, command: list[str], timeout: float | None = None):
        self.command = list(command)
        self.timeout = timeout
        self._proc: _ProcHandle | None = None

    def _ensure_proc(self) -> _ProcHandle:
        if self._proc is None or not self._proc.alive():
            self._proc = _ProcHandle(self.command)
        return self._proc

    def _fail(self, req: EvalRequest, trace: list[tuple[int, float]], reason: str, start: float) -> EvalResult:
        log.warning("evaluation of arch %d failed: %s", req.arch_id, reason)
        if self._proc is not None:
            self._proc.kill()
            self._proc = None
        return EvalResult(
            arch_id=req.arch_id,
            cost=None,
            epoch_trace=trace,
            status="failed",
            reason=reason,
            wall_time=time.monotonic() - start,
        )

    def _line_timeout(self, req: EvalRequest, slowest: float | None) -> float:
        if self.timeout is not None:
            return self.timeout
        if slowest is None:
            return self.INITIAL_LINE_TIMEOUT
        return 2.0 * req.max_epochs * slowest

    def evaluate(self, req: EvalRequest) -> EvalResult:
        start = time.monotonic()
        try:
            proc = self._ensure_proc()
            proc.send(
                {
                    "type": "evaluate",
                    "arch_id": req.arch_id,
                    "graph": json.loads(req.graph.to_json(indent=None)),
                    "max_epochs": req.max_epochs,
                    "seed": req.seed,
                }
            )
        except (OSError, ValueError) as exc:
            return self._fail(req, [], f"cannot reach trainer: {exc}", start)

        trace: list[tuple[int, float]] = []
        stop_sent = False
        best = math.inf
        last_improve = 0
        last_epoch_at = None
        slowest: float | None = None
        while True:
            try:
                line = proc.read(self._line_timeout(req, slowest))
            except queue.Empty:
                return self._fail(req, trace, "timeout waiting for trainer", start)
            if line is None:
                return self._fail(req, trace, "trainer exited mid-evaluation", start)
            line = line.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
                mtype = msg["type"]
            except (json.JSONDecodeError, TypeError, KeyError):
                log.warning("unparseable trainer line: %r", line)
                return self._fail(req, trace, f"protocol: unparseable line {line!r}", start)

            if not isinstance(msg, dict) or msg.get("arch_id") != req.arch_id:
                return self._fail(req, trace, f"protocol: unexpected payload {line!r}", start)

            if mtype == "epoch":
                now = time.monotonic()
                if last_epoch_at is not None:
                    slowest = max(slowest or 0.0, now - last_epoch_at)
                else:
                    slowest = max(slowest or 0.0, now - start)
                last_epoch_at = now
                epoch, val = msg["epoch"], float(msg["val_metric"])
                if stop_sent:
                    continue  # in-flight epoch after stop: tolerated, not recorded
                trace.append((epoch, val))
                if val < best:
                    best = val
                    last_improve = len(trace)
                if len(trace) - last_improve >= req.tau and len(trace) < req.max_epochs:
                    proc.send({"type": "stop", "arch_id": req.arch_id})
                    stop_sent = True
            elif mtype == "final":
                if not trace:
                    trace = [(1, float(msg["val_metric"]))]
                stop, cost = early_stop_estimate([v for _, v in trace], req.tau)
                return EvalResult(
                    arch_id=req.arch_id,
                    cost=cost,
                    epoch_trace=trace[:stop],
                    status="ok",
                    wall_time=time.monotonic() - start,
                )
            elif mtype == "oom":
                return EvalResult(
                    arch_id=req.arch_id,
                    cost=None,
                    epoch_trace=trace,
                    status="oom",
                    estimated_bytes=int(msg["estimated_bytes"]),
                    wall_time=time.monotonic() - start,
                )
            elif mtype == "error":
                return self._fail(req, trace, f"trainer error: {msg.get('message')}", start)
            else:
                return self._fail(req, trace, f"protocol: unknown type {mtype!r}", start)

    def close(self) -> None:
        if self._proc is not None:
            if self._proc.alive():
                try:
                    self._proc.proc.stdin.close()
                except OSError:
                    pass
            self._proc.kill()
            self._proc = None
