"""MACs, parameter counts, latency estimates and the pruning-level sweep.

Counting rules:

* conv MACs = H_out * W_out * k^2 * C_in * C_out; dense MACs = C_in * C_out;
  pooling, BN, ELU, concat and flatten cost 0 MACs.
* conv params = k^2 * C_in * C_out, plus C_out when the conv has a bias;
  each BN adds 2 * C (scale and shift, running stats excluded); dense
  params = C_in * C_out + C_out.
* A DAG node applies its op once per live input edge (the summands of its
  aggregation), each application being a separate conv layer; the node has
  one BN after the sum.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterator

from . import architecture as arch
from .architecture import ArchitectureSpec, TensorShape
from .errors import CostModelError

COST_TABLE_VERSION = 1


@dataclass(frozen=True)
class LayerCost:
    name: str
    cost_kind: str | None   # cost-table key; None for zero-time entries (BN)
    macs: int
    params: int
    group: tuple[int, int] | None = None   # (hierarchy, dag) for DAG-internal layers


@dataclass(frozen=True)
class CostModel:
    """Linear latency model: ms per million MACs per op kind, plus a per-layer overhead."""

    coeffs: dict = field(default_factory=lambda: dict(DEFAULT_COEFFS))
    overhead_ms: float = 0.0
    parallel: bool = False

    def __post_init__(self):
        if self.overhead_ms < 0 or any(v < 0 for v in self.coeffs.values()):
            raise CostModelError("cost coefficients and overhead must be >= 0")

    def coeff(self, kind: str) -> float:
        try:
            return self.coeffs[kind]
        except KeyError:
            raise CostModelError(f"op kind {kind!r} missing from cost table") from None

    @classmethod
    def from_dict(cls, doc: dict) -> "CostModel":
        if doc.get("version", COST_TABLE_VERSION) != COST_TABLE_VERSION:
            raise CostModelError(f"unsupported cost table version {doc.get('version')!r}")
        try:
            coeffs = {str(k): float(v) for k, v in doc["coeffs"].items()}
            return cls(coeffs, float(doc.get("overhead_ms", 0.0)), bool(doc.get("parallel", False)))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise CostModelError(f"malformed cost table: {exc}") from exc

    @classmethod
    def load(cls, path) -> "CostModel":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CostModelError(f"cannot read cost table {path}: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {"version": COST_TABLE_VERSION, "parallel": self.parallel,
                "overhead_ms": self.overhead_ms, "coeffs": dict(self.coeffs)}


# Made-up mobile-CPU-ish defaults; not calibrated against any device.
DEFAULT_COEFFS = {"conv1x1": 0.4, "conv3x3": 0.3, "conv7x7": 0.35, "pool": 0.0, "dense": 0.5}


@dataclass(frozen=True)
class ProfileReport:
    macs: int
    params: int
    latency_ms: float
    accuracy_density: float | None = None

    def to_dict(self) -> dict:
        return {"macs": self.macs, "params": self.params, "latency_ms": self.latency_ms,
                "accuracy_density": self.accuracy_density}


def _conv_kind(k: int) -> str:
    return f"conv{k}x{k}"


def layer_costs(spec: ArchitectureSpec) -> Iterator[LayerCost]:
    """Every costed layer of an annotated spec, in forward order."""
    shapes = spec.require_shapes()
    cur = shapes["input"]
    for layer in spec.stem:
        out = shapes[f"stem.{layer.name}"]
        yield from _fixed_layer(f"stem.{layer.name}", layer, cur, out)
        cur = out

    for a, hier in enumerate(spec.hierarchies):
        hin = shapes[f"h{a}.in"]
        for b, sg in enumerate(hier.dags):
            for v in sg.active_nodes:
                op = sg.node_ops[v]
                out = shapes[arch.node_id(a, b, v)]
                k2 = op.kernel * op.kernel
                if v == 0:
                    inputs = [("in", hin[2])]
                else:
                    inputs = [(f"n{u}", shapes[arch.node_id(a, b, u)][2]) for u in sg.predecessors(v)]
                for src, cin in inputs:
                    yield LayerCost(f"{arch.node_id(a, b, v)}<-{src}", op.kind,
                                    out[0] * out[1] * k2 * cin * op.filters,
                                    k2 * cin * op.filters, (a, b))
                yield LayerCost(f"{arch.node_id(a, b, v)}.bn", None, 0, 2 * op.filters, (a, b))
        yield LayerCost(hier.pool.name, "pool", 0, 0)
        cur = shapes[hier.pool.name]

    for layer in spec.head:
        out = shapes[f"head.{layer.name}"]
        yield from _fixed_layer(f"head.{layer.name}", layer, cur, out)
        cur = out


def _fixed_layer(name, layer, cin_shape, out) -> Iterator[LayerCost]:
    if layer.kind == "conv":
        k2 = layer.kernel * layer.kernel
        params = k2 * cin_shape[2] * out[2] + (out[2] if layer.bias else 0)
        yield LayerCost(name, _conv_kind(layer.kernel), out[0] * out[1] * k2 * cin_shape[2] * out[2], params)
        if layer.batch_norm:
            yield LayerCost(f"{name}.bn", None, 0, 2 * out[2])
    elif layer.kind in ("pool", "gap"):
        yield LayerCost(name, "pool", 0, 0)
    elif layer.kind == "dense":
        cin, cout = cin_shape[2], out[2]
        yield LayerCost(name, "dense", cin * cout, cin * cout + (cout if layer.bias else 0))
    # flatten: free, no cost entry


def count_macs(spec: ArchitectureSpec) -> int:
    return sum(lc.macs for lc in layer_costs(spec))


def count_params(spec: ArchitectureSpec) -> int:
    """Parameter count; annotates a copy first if the spec has no shapes yet."""
    if not spec.annotated:
        spec = arch.infer_shapes(spec)
    return sum(lc.params for lc in layer_costs(spec))


def estimate_latency(spec: ArchitectureSpec, cost_model: CostModel) -> float:
    """Sum of macs/1e6 * coeff + overhead over timed layers.

    With `parallel`, the DAGs of one hierarchy overlap: the hierarchy pays the
    slowest DAG instead of the sum.
    """
    total = 0.0
    dag_time: dict[tuple[int, int], float] = {}
    for lc in layer_costs(spec):
        if lc.cost_kind is None:
            continue
        ms = lc.macs / 1e6 * cost_model.coeff(lc.cost_kind) + cost_model.overhead_ms
        if lc.group is not None and cost_model.parallel:
            dag_time[lc.group] = dag_time.get(lc.group, 0.0) + ms
        else:
            total += ms
    if dag_time:
        per_hier: dict[int, float] = {}
        for (a, _), ms in dag_time.items():
            per_hier[a] = max(per_hier.get(a, 0.0), ms)
        total += sum(per_hier.values())
    return total


def timed_layer_count(spec: ArchitectureSpec) -> int:
    return sum(1 for lc in layer_costs(spec) if lc.cost_kind is not None)


def accuracy_density(accuracy_percent: float, macs: int) -> float:
    """Accuracy (%) per million MACs."""
    if macs <= 0:
        raise ValueError("accuracy density is undefined for zero MACs")
    return accuracy_percent / (macs / 1e6)


def profile(spec: ArchitectureSpec, cost_model: CostModel | None = None,
            accuracy_percent: float | None = None) -> ProfileReport:
    if not spec.annotated:
        spec = arch.infer_shapes(spec)
    cost_model = cost_model or CostModel()
    macs = count_macs(spec)
    density = None if accuracy_percent is None else accuracy_density(accuracy_percent, macs)
    return ProfileReport(macs, count_params(spec), estimate_latency(spec, cost_model), density)


@dataclass(frozen=True)
class SweepRow:
    level: float
    macs: int
    params: int
    latency_ms: float


SWEEP_HEADER = ("level", "macs", "params", "latency_ms")


def sweep_pruning(meta, levels, template: str, input_shape: TensorShape, cost_model: CostModel,
                  num_classes: int = 10, upscale: float = 1.0) -> list[SweepRow]:
    rows = []
    for level in sorted(levels):
        subgraphs = arch.prune(meta, level)
        if upscale != 1.0:
            subgraphs = arch.upscale_channels(subgraphs, upscale)
        spec = arch.infer_shapes(arch.assemble(subgraphs, template, input_shape, num_classes,
                                               m=meta.config.m, upscale_factor=upscale))
        rep = profile(spec, cost_model)
        rows.append(SweepRow(level, rep.macs, rep.params, rep.latency_ms))
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for r in rows:
        writer.writerow((repr(float(r.level)), r.macs, r.params, repr(float(r.latency_ms))))
    return buf.getvalue()


def parse_levels(text: str, tol: float = 1e-9) -> list[float]:
    """`start:stop:step` inclusive of both endpoints (within tol), or a comma list."""
    text = text.strip()
    if not text:
        return []
    if ":" not in text:
        return [float(x) for x in text.split(",")]
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"level range must be start:stop:step, got {text!r}")
    start, stop, step = map(float, parts)
    if step <= 0:
        raise ValueError("step must be > 0")
    count = math.floor((stop - start) / step + tol) + 1
    # round away representation noise so 0.2 + 3*0.05 prints as 0.35
    return [round(start + i * step, 12) for i in range(max(count, 0))]
