"""Evaluators: score a sampled architecture with (accuracy, latency).

Built-ins (`synthetic_motif`, `cost_only`) are deterministic and run in
process. `external_process` talks to a child process over line-delimited
JSON on stdin/stdout:

    engine -> child   {"id": 7, "protocol": 1, "architecture": {...}, "proxy_size": 500}
    child  -> engine  {"id": 7, "accuracy": 0.61, "latency_ms": 3.2}
    engine -> child   {"id": null, "cmd": "shutdown"}

The child is expected to train the architecture (momentum SGD, lr 0.01
decayed at 50% and 75% of training, weight decay 5e-4, on a proxy subset of
e.g. 500 samples) and report validation accuracy as a fraction in [0, 1].
Unknown reply fields are ignored. A reply may carry "protocol"; if it does it
must equal 1.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import queue
import subprocess
import threading
from dataclasses import dataclass, field

from . import architecture as arch
from . import profiler
from .errors import (
    ConfigError,
    EvaluatorCrashed,
    EvaluatorSpawnError,
    EvaluatorTimeout,
    IdMismatch,
    MalformedReply,
    ProtocolVersionError,
)

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
KINDS = ("synthetic_motif", "cost_only", "external_process")
PARAMS = {
    "synthetic_motif": {"motif", "base", "gain", "clutter", "cost_model"},
    "cost_only": {"accuracy", "cost_model"},
    "external_process": {"command", "timeout_s", "proxy_size"},
}


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    latency_ms: float

    def __post_init__(self):
        if not (math.isfinite(self.accuracy) and 0.0 <= self.accuracy <= 1.0):
            raise ValueError(f"accuracy must lie in [0, 1], got {self.accuracy!r}")
        if not (math.isfinite(self.latency_ms) and self.latency_ms >= 0.0):
            raise ValueError(f"latency_ms must be finite and >= 0, got {self.latency_ms!r}")


def penalized_score(result: EvalResult, gamma: float) -> float:
    """eta' = eta - gamma * tau; not clamped."""
    return result.accuracy - gamma * result.latency_ms


@dataclass(frozen=True)
class EvaluatorBinding:
    """Which evaluator to use and its parameters.

    synthetic_motif: motif (list of [k, i, j]), base, gain, clutter, cost_model
    cost_only:       accuracy, cost_model
    external_process: command (argv list), timeout_s, proxy_size
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError("evaluator.kind", f"must be one of {KINDS}, got {self.kind!r}")
        unknown = sorted(set(self.params) - PARAMS[self.kind])
        if unknown:
            raise ConfigError(f"evaluator.{unknown[0]}", f"not a {self.kind} parameter")
        if self.kind == "external_process":
            if not self.params.get("command"):
                raise ConfigError("evaluator.command", "external evaluator needs a command")
            if not self.params.get("timeout_s", 60.0) > 0:
                raise ConfigError("evaluator.timeout_s", "must be > 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "EvaluatorBinding":
        doc = dict(doc)
        try:
            kind = doc.pop("kind")
        except KeyError:
            raise ConfigError("evaluator.kind", "missing") from None
        return cls(kind, doc)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}


def _cost_model(params) -> profiler.CostModel | None:
    cm = params.get("cost_model")
    if cm is None or isinstance(cm, profiler.CostModel):
        return cm
    if isinstance(cm, dict):
        return profiler.CostModel.from_dict(cm)
    return profiler.CostModel.load(cm)


class SyntheticMotifEvaluator:
    """Rewards recovering a planted edge set M*.

    eta = base + gain * |E & M*| / |M*| - clutter * |E - M*| / |E_complete|,
    clamped to [0, 1]. Latency comes from the cost model if one is given, else 0.
    """

    def __init__(self, motif, base=0.3, gain=0.6, clutter=0.2, cost_model=None):
        self.motif = frozenset((int(k), int(i), int(j)) for k, i, j in motif)
        if not self.motif:
            raise ConfigError("evaluator.motif", "motif must be non-empty")
        self.base, self.gain, self.clutter = float(base), float(gain), float(clutter)
        self.cost_model = cost_model

    def accuracy(self, sampled) -> float:
        edges = {(k, i, j) for k in range(len(sampled.masks)) for i, j in sampled.edges(k)}
        complete = len(sampled.masks) * sampled.n * (sampled.n - 1) // 2
        hit = len(edges & self.motif) / len(self.motif)
        extra = len(edges - self.motif) / complete
        eta = self.base + self.gain * hit - self.clutter * extra
        return min(1.0, max(0.0, eta))

    def evaluate(self, spec, sampled) -> EvalResult:
        tau = 0.0 if self.cost_model is None else profiler.estimate_latency(spec, self.cost_model)
        return EvalResult(self.accuracy(sampled), tau)

    def close(self):
        pass


class CostOnlyEvaluator:
    """Constant accuracy; latency from the cost model."""

    def __init__(self, accuracy=0.5, cost_model=None):
        self.constant = float(accuracy)
        self.cost_model = cost_model or profiler.CostModel()

    def evaluate(self, spec, sampled) -> EvalResult:
        return EvalResult(self.constant, profiler.estimate_latency(spec, self.cost_model))

    def close(self):
        pass


_EOF = object()


class ExternalProcessEvaluator:
    """One child process, one request in flight. Any protocol error tears the session down;
    the next `evaluate` respawns it."""

    def __init__(self, command, timeout_s=60.0, proxy_size=None):
        self.command = list(command)
        self.timeout_s = float(timeout_s)
        self.proxy_size = proxy_size
        self._proc = None
        self._lines: queue.Queue | None = None
        self._ids = itertools.count(1)

    # -- session management

    def open(self):
        if self._proc is not None:
            return
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                stderr=None, text=True, encoding="utf-8", bufsize=1,
            )
        except OSError as exc:
            raise EvaluatorSpawnError(f"cannot spawn {self.command!r}: {exc}") from exc
        lines: queue.Queue = queue.Queue()
        stdout = self._proc.stdout

        def pump():
            try:
                for line in stdout:
                    lines.put(line)
            except (OSError, ValueError):
                pass
            lines.put(_EOF)

        threading.Thread(target=pump, daemon=True).start()
        self._lines = lines

    def close(self):
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            if proc.poll() is None:
                self._send(proc, {"id": None, "cmd": "shutdown"})
                proc.stdin.close()
                proc.wait(timeout=2.0)
        except (OSError, ValueError, subprocess.TimeoutExpired):
            pass
        finally:
            if proc.poll() is None:
                proc.kill()
                proc.wait()

    def __enter__(self):
        self.open()
        return self

    def __exit__(self, *exc):
        self.close()

    # -- requests

    @staticmethod
    def _send(proc, obj):
        proc.stdin.write(json.dumps(obj) + "\n")
        proc.stdin.flush()

    def request(self, architecture: dict) -> EvalResult:
        self.open()
        rid = next(self._ids)
        msg = {"id": rid, "protocol": PROTOCOL_VERSION, "architecture": architecture}
        if self.proxy_size is not None:
            msg["proxy_size"] = self.proxy_size
        try:
            return self._roundtrip(rid, msg)
        except BaseException:
            self.close()
            raise

    def _roundtrip(self, rid, msg) -> EvalResult:
        proc = self._proc
        try:
            self._send(proc, msg)
        except (BrokenPipeError, OSError):
            raise EvaluatorCrashed("evaluator closed its input", rid, proc.poll()) from None
        try:
            line = self._lines.get(timeout=self.timeout_s)
        except queue.Empty:
            raise EvaluatorTimeout(f"no reply within {self.timeout_s:g}s", rid) from None
        if line is _EOF:
            try:
                code = proc.wait(timeout=self.timeout_s)
            except subprocess.TimeoutExpired:
                code = None
            raise EvaluatorCrashed(f"evaluator exited (code {code}) without replying", rid, code)
        try:
            reply = json.loads(line)
        except json.JSONDecodeError:
            raise MalformedReply(f"reply is not JSON: {line[:200]!r}", rid) from None
        if not isinstance(reply, dict):
            raise MalformedReply("reply is not a JSON object", rid)
        if "protocol" in reply and reply["protocol"] != PROTOCOL_VERSION:
            raise ProtocolVersionError(
                f"evaluator speaks protocol {reply['protocol']!r}, engine speaks {PROTOCOL_VERSION}", rid)
        if reply.get("id") != rid:
            raise IdMismatch(f"reply id {reply.get('id')!r} does not match request id {rid}", rid)
        try:
            return EvalResult(float(reply["accuracy"]), float(reply["latency_ms"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedReply(f"bad reply fields: {exc}", rid) from None

    def evaluate(self, spec, sampled) -> EvalResult:
        return self.request(arch.to_dict(spec))


def make_evaluator(binding: EvaluatorBinding):
    p = binding.params
    if binding.kind == "synthetic_motif":
        return SyntheticMotifEvaluator(p.get("motif", ()), p.get("base", 0.3), p.get("gain", 0.6),
                                       p.get("clutter", 0.2), _cost_model(p))
    if binding.kind == "cost_only":
        return CostOnlyEvaluator(p.get("accuracy", 0.5), _cost_model(p))
    return ExternalProcessEvaluator(p["command"], p.get("timeout_s", 60.0), p.get("proxy_size"))


def evaluate(binding, spec, sampled) -> EvalResult:
    """One-shot evaluation; for repeated calls hold on to `make_evaluator(binding)`."""
    ev = make_evaluator(binding)
    try:
        return ev.evaluate(spec, sampled)
    finally:
        ev.close()
