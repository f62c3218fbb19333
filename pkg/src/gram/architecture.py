"""Assemble, prune, up-scale, shape-annotate and export network descriptions.

Wiring of one DAG inside a hierarchy:

* node 0 is the entry: it applies its op to the hierarchy input;
* node v > 0 is active iff a kept path reaches it from node 0, and computes
  the sum over active predecessors u of op_v(x_u);
* the hierarchy output is concat(hierarchy input, every active node of every
  DAG), followed by a 2x2/2 pool. A DAG with no active node is an identity
  pass-through and contributes only through the shared input.

Under this wiring removing an edge can only remove convolutions and channels,
so cost is monotone in the kept-edge set.
"""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from functools import cached_property

from .errors import ShapeError, StateError
from .ops import NodeOp

ARCH_VERSION = 1
TEMPLATES = ("imagenet", "cifar")


@dataclass(frozen=True)
class TensorShape:
    height: int
    width: int
    channels: int

    def __post_init__(self):
        if min(self.height, self.width, self.channels) < 1:
            raise ShapeError("tensor", f"all dimensions must be >= 1, got {tuple(self)}")

    def __iter__(self):
        return iter((self.height, self.width, self.channels))

    @classmethod
    def square(cls, size: int, channels: int = 3) -> "TensorShape":
        return cls(size, size, channels)


@dataclass(frozen=True)
class Layer:
    """Fixed (non-searched) layer. `kind` is conv, pool, gap, flatten or dense."""

    name: str
    kind: str
    kernel: int = 1
    stride: int = 1
    filters: int | None = None
    batch_norm: bool = False
    bias: bool = False
    activation: str | None = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class DagSubgraph:
    node_ops: tuple[NodeOp, ...]
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        edges = tuple(sorted({(int(i), int(j)) for i, j in self.edges}))
        n = len(self.node_ops)
        for i, j in edges:
            if not 0 <= i < j < n:
                raise ValueError(f"edge {(i, j)} violates 0 <= i < j < {n}")
        object.__setattr__(self, "node_ops", tuple(self.node_ops))
        object.__setattr__(self, "edges", edges)

    @property
    def n(self) -> int:
        return len(self.node_ops)

    @cached_property
    def active_nodes(self) -> tuple[int, ...]:
        reached = {0}
        # edges are sorted by source, and sources are topologically ordered
        for i, j in self.edges:
            if i in reached:
                reached.add(j)
        return tuple(sorted(reached)) if len(reached) > 1 else ()

    @cached_property
    def live_edges(self) -> tuple[tuple[int, int], ...]:
        active = set(self.active_nodes)
        return tuple(e for e in self.edges if e[0] in active)

    @property
    def is_identity(self) -> bool:
        return not self.active_nodes

    @property
    def sources(self) -> tuple[int, ...]:
        return (0,) if self.active_nodes else ()

    @cached_property
    def sinks(self) -> tuple[int, ...]:
        has_succ = {i for i, _ in self.live_edges}
        return tuple(v for v in self.active_nodes if v not in has_succ)

    def predecessors(self, v: int) -> tuple[int, ...]:
        return tuple(i for i, j in self.live_edges if j == v)

    @property
    def feature_channels(self) -> int:
        return sum(self.node_ops[v].filters for v in self.active_nodes)


@dataclass(frozen=True)
class Hierarchy:
    dags: tuple[DagSubgraph, ...]
    pool: Layer


@dataclass(frozen=True)
class ArchitectureSpec:
    template: str
    input_shape: TensorShape
    num_classes: int
    stem: tuple[Layer, ...]
    hierarchies: tuple[Hierarchy, ...]
    head: tuple[Layer, ...]
    upscale_factor: float = 1.0
    shapes: Mapping[str, tuple[int, int, int]] | None = field(default=None, compare=True)

    @property
    def annotated(self) -> bool:
        return self.shapes is not None

    @property
    def h(self) -> int:
        return len(self.hierarchies)

    @property
    def m(self) -> int:
        return len(self.hierarchies[0].dags) if self.hierarchies else 0

    def subgraphs(self) -> list[DagSubgraph]:
        return [d for hier in self.hierarchies for d in hier.dags]

    def require_shapes(self) -> Mapping[str, tuple[int, int, int]]:
        if self.shapes is None:
            raise StateError("architecture spec is not shape-annotated; run infer_shapes first")
        return self.shapes


def node_id(a: int, b: int, v: int) -> str:
    return f"h{a}.d{b}.n{v}"


# -- pruning and scaling ---------------------------------------------------

def prune(meta, level: float) -> list[DagSubgraph]:
    """Keep edge (i, j) of each DAG iff its connection weight >= level."""
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"pruning level must lie in [0, 1], got {level}")
    out = []
    for dag in meta.dags:
        kept = tuple(e for e, w in dag.items() if w >= level)
        out.append(DagSubgraph(dag.node_ops, kept))
    return out


def upscale_channels(obj, factor: float):
    """Scale every node's filter count by `factor` (>= 1), rounding half-up with floor 1.

    Accepts a sequence of DagSubgraph or an ArchitectureSpec; a spec comes back
    unannotated since its shapes no longer hold.
    """
    if not factor >= 1.0:
        raise ValueError(f"up-scaling factor must be >= 1, got {factor}")

    def scale(sg: DagSubgraph) -> DagSubgraph:
        return DagSubgraph(tuple(op.scaled(factor) for op in sg.node_ops), sg.edges)

    if isinstance(obj, ArchitectureSpec):
        hiers = tuple(Hierarchy(tuple(scale(d) for d in hr.dags), hr.pool) for hr in obj.hierarchies)
        return replace(obj, hierarchies=hiers, upscale_factor=obj.upscale_factor * factor, shapes=None)
    return [scale(sg) for sg in obj]


# -- assembly --------------------------------------------------------------

def _template_layers(template: str, num_classes: int) -> tuple[tuple[Layer, ...], tuple[Layer, ...]]:
    if template == "imagenet":
        stem = (
            Layer("conv1", "conv", 7, 2, 64, batch_norm=True, activation="elu"),
            Layer("conv2", "conv", 3, 2, 64, batch_norm=True, activation="elu"),
        )
        head = (
            Layer("conv_head", "conv", 1, 1, num_classes, bias=True),
            Layer("gap", "gap"),
            Layer("flatten", "flatten"),
        )
    elif template == "cifar":
        stem = ()
        head = (Layer("gap", "gap"), Layer("fc", "dense", filters=num_classes, bias=True))
    else:
        raise ValueError(f"unknown template {template!r}; expected one of {TEMPLATES}")
    return stem, head


def _group(subgraphs, m: int | None) -> list[list[DagSubgraph]]:
    subgraphs = list(subgraphs)
    if subgraphs and not isinstance(subgraphs[0], DagSubgraph):
        return [list(g) for g in subgraphs]
    if m is None:
        raise ValueError("m is required when subgraphs are given as a flat list")
    if m < 1 or len(subgraphs) % m:
        raise ValueError(f"{len(subgraphs)} subgraphs cannot be split into groups of m={m}")
    return [subgraphs[i:i + m] for i in range(0, len(subgraphs), m)]


def assemble(subgraphs, template: str, input_shape: TensorShape, num_classes: int, *,
             m: int | None = None, upscale_factor: float = 1.0) -> ArchitectureSpec:
    """Wrap DAG subgraphs (flat with `m`, or grouped per hierarchy) in a template.

    The result is unannotated; spatial divisibility is checked eagerly.
    """
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    groups = _group(subgraphs, m)
    if not groups or any(len(g) != len(groups[0]) or not g for g in groups):
        raise ValueError("every hierarchy needs the same non-zero number of DAGs")
    stem, head = _template_layers(template, num_classes)
    hiers = tuple(
        Hierarchy(tuple(g), Layer(f"h{a}.pool", "pool", 2, 2)) for a, g in enumerate(groups)
    )
    spec = ArchitectureSpec(template, input_shape, num_classes, stem, hiers, head, upscale_factor)
    _spatial_chain(spec)
    return spec


def _halve(size: tuple[int, int], layer: str) -> tuple[int, int]:
    hh, ww = size
    if hh % 2 or ww % 2:
        raise ShapeError(layer, f"spatial size {hh}x{ww} is not divisible by 2")
    if hh < 2 or ww < 2:
        raise ShapeError(layer, f"input too small ({hh}x{ww}) for a stride-2 layer")
    return hh // 2, ww // 2


def _spatial_chain(spec: ArchitectureSpec) -> list[tuple[str, tuple[int, int]]]:
    size = (spec.input_shape.height, spec.input_shape.width)
    chain = []
    for layer in spec.stem:
        if layer.stride == 2:
            size = _halve(size, f"stem.{layer.name}")
        chain.append((layer.name, size))
    for hier in spec.hierarchies:
        size = _halve(size, hier.pool.name)
        chain.append((hier.pool.name, size))
    return chain


def infer_shapes(spec: ArchitectureSpec) -> ArchitectureSpec:
    """Annotate every layer, node, concat and pool with its output (H, W, C)."""
    shapes: dict[str, tuple[int, int, int]] = {}
    cur = tuple(spec.input_shape)
    shapes["input"] = cur

    for layer in spec.stem:
        hh, ww = cur[0], cur[1]
        if layer.stride == 2:
            hh, ww = _halve((hh, ww), f"stem.{layer.name}")
        cur = (hh, ww, layer.filters)
        shapes[f"stem.{layer.name}"] = cur

    for a, hier in enumerate(spec.hierarchies):
        hh, ww, cin = cur
        shapes[f"h{a}.in"] = cur
        channels = cin
        for b, sg in enumerate(hier.dags):
            if sg.is_identity:
                shapes[f"h{a}.d{b}.identity"] = cur
                continue
            for v in sg.active_nodes:
                f = sg.node_ops[v].filters
                inputs = [cur] if v == 0 else [shapes[node_id(a, b, u)] for u in sg.predecessors(v)]
                # op_v keeps H, W (SAME, stride 1) so every summand is (hh, ww, f)
                assert inputs and all(s[:2] == (hh, ww) for s in inputs), (a, b, v)
                shapes[node_id(a, b, v)] = (hh, ww, f)
            fc = sg.feature_channels
            shapes[f"h{a}.d{b}.out"] = (hh, ww, fc)
            channels += fc
        shapes[f"h{a}.concat"] = (hh, ww, channels)
        ph, pw = _halve((hh, ww), hier.pool.name)
        cur = (ph, pw, channels)
        shapes[hier.pool.name] = cur

    for layer in spec.head:
        if layer.kind == "conv":
            cur = (cur[0], cur[1], layer.filters)
        elif layer.kind == "gap":
            cur = (1, 1, cur[2])
        elif layer.kind == "dense":
            if cur[:2] != (1, 1):
                raise ShapeError(f"head.{layer.name}", "dense layer needs a 1x1 input")
            cur = (1, 1, layer.filters)
        shapes[f"head.{layer.name}"] = cur
    return replace(spec, shapes=shapes)


# -- export ----------------------------------------------------------------

def to_dict(spec: ArchitectureSpec) -> dict:
    shapes = spec.require_shapes()
    return {
        "version": ARCH_VERSION,
        "template": spec.template,
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
        "upscale_factor": spec.upscale_factor,
        "stem": [layer.to_dict() for layer in spec.stem],
        "hierarchies": [
            {
                "dags": [
                    {
                        "nodes": [{"id": v, "op": op.kind, "filters": op.filters}
                                  for v, op in enumerate(sg.node_ops)],
                        "edges": [list(e) for e in sg.edges],
                    }
                    for sg in hier.dags
                ],
                "pool": hier.pool.to_dict(),
            }
            for hier in spec.hierarchies
        ],
        "head": [layer.to_dict() for layer in spec.head],
        "shapes": {k: list(v) for k, v in shapes.items()},
    }


def from_dict(doc: dict) -> ArchitectureSpec:
    if doc.get("version") != ARCH_VERSION:
        raise ValueError(f"unsupported architecture version {doc.get('version')!r}")
    hiers = []
    for hier in doc["hierarchies"]:
        dags = []
        for d in hier["dags"]:
            nodes = sorted(d["nodes"], key=lambda nd: nd["id"])
            ops = tuple(NodeOp(nd["op"], nd["filters"]) for nd in nodes)
            dags.append(DagSubgraph(ops, tuple(tuple(e) for e in d["edges"])))
        hiers.append(Hierarchy(tuple(dags), Layer(**hier["pool"])))
    shapes = doc.get("shapes")
    return ArchitectureSpec(
        template=doc["template"],
        input_shape=TensorShape(*doc["input_shape"]),
        num_classes=doc["num_classes"],
        stem=tuple(Layer(**x) for x in doc["stem"]),
        hierarchies=tuple(hiers),
        head=tuple(Layer(**x) for x in doc["head"]),
        upscale_factor=doc["upscale_factor"],
        shapes=None if shapes is None else {k: tuple(v) for k, v in shapes.items()},
    )


def _shape_str(s) -> str:
    return "x".join(str(x) for x in s)


def to_dot(spec: ArchitectureSpec) -> str:
    shapes = spec.require_shapes()
    lines = ["digraph architecture {", "  rankdir=TB;", "  node [shape=box];"]

    def node(name, label, indent="  "):
        lines.append(f'{indent}"{name}" [label="{label}"];')

    node("input", f"input/{spec.input_shape.channels}/{_shape_str(shapes['input'])}")
    prev = "input"
    edges = []
    for layer in spec.stem:
        name = f"stem.{layer.name}"
        node(name, f"{layer.name}:{layer.kind}{layer.kernel}x{layer.kernel}/{layer.filters}/"
                   f"{_shape_str(shapes[name])}")
        edges.append((prev, name))
        prev = name

    for a, hier in enumerate(spec.hierarchies):
        lines.append(f"  subgraph cluster_h{a} {{")
        lines.append(f'    label="hierarchy {a}";')
        concat = f"h{a}.concat"
        edges.append((prev, concat))
        for b, sg in enumerate(hier.dags):
            lines.append(f"    subgraph cluster_h{a}_d{b} {{")
            lines.append(f'      label="dag {b}";')
            if sg.is_identity:
                ident = f"h{a}.d{b}.identity"
                node(ident, f"identity/-/{_shape_str(shapes[ident])}", "      ")
                edges.append((prev, ident))
                edges.append((ident, concat))
            else:
                for v in sg.active_nodes:
                    nid = node_id(a, b, v)
                    op = sg.node_ops[v]
                    node(nid, f"{op.kind}/{op.filters}/{_shape_str(shapes[nid])}", "      ")
                    edges.append((nid, concat))
                edges.append((prev, node_id(a, b, 0)))
                edges.extend((node_id(a, b, u), node_id(a, b, v)) for u, v in sg.live_edges)
            lines.append("    }")
        node(concat, f"concat/{shapes[concat][2]}/{_shape_str(shapes[concat])}", "    ")
        pool = hier.pool.name
        node(pool, f"pool2x2/{shapes[pool][2]}/{_shape_str(shapes[pool])}", "    ")
        edges.append((concat, pool))
        lines.append("  }")
        prev = pool

    for layer in spec.head:
        name = f"head.{layer.name}"
        node(name, f"{layer.name}:{layer.kind}/{layer.filters or '-'}/{_shape_str(shapes[name])}")
        edges.append((prev, name))
        prev = name

    lines.extend(f'  "{u}" -> "{v}";' for u, v in edges)
    lines.append("}")
    return "\n".join(lines) + "\n"


def export(spec: ArchitectureSpec, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(to_dict(spec), indent=1) + "\n"
    if fmt == "dot":
        return to_dot(spec)
    raise ValueError(f"unknown export format {fmt!r}")


def load_spec(text: str) -> ArchitectureSpec:
    return from_dict(json.loads(text))
