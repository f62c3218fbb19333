"""Meta-graph state: K = m*h complete DAGs with per-edge connection weights.

Weights are held as log-weights. After every update each DAG is shifted so its
largest log-weight is exactly 0, i.e. the largest weight is 1 and every weight
doubles as an inclusion probability (floored at ``p_min``, capped at ``p_max``).
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import jsonschema
import numpy as np

from .errors import (
    CheckpointCorruptError,
    CheckpointSchemaError,
    CheckpointVersionError,
    ConfigError,
    NumericError,
)
from .ops import DEFAULT_PALETTE, NodeOp

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MetaGraphConfig:
    h: int = 3
    m: int = 3
    n: int = 30
    op_palette: tuple[NodeOp, ...] = DEFAULT_PALETTE
    seed: int = 0
    p_min: float = 0.05
    # Sampling ceiling. At 1.0 a freshly initialized meta-graph samples the
    # complete DAG every time and the update is a no-op after normalization.
    p_max: float = 0.95
    alpha: float = 0.9
    beta0: float = 0.4
    rho: float = 0.1
    gamma: float = 0.01
    # Reserved: per-node operation search. Only False is supported.
    search_ops: bool = False

    def __post_init__(self):
        object.__setattr__(self, "op_palette", tuple(
            NodeOp.parse(op) if isinstance(op, str) else op for op in self.op_palette))
        self.validate()

    def validate(self):
        for name in ("h", "m", "n", "seed"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(name, f"must be an integer, got {value!r}")
        if self.h < 1:
            raise ConfigError("h", "must be >= 1")
        if self.m < 1:
            raise ConfigError("m", "must be >= 1")
        if self.n < 2:
            raise ConfigError("n", "must be >= 2")
        if self.seed < 0:
            raise ConfigError("seed", "must be a non-negative integer")
        if not self.op_palette:
            raise ConfigError("op_palette", "must be non-empty")
        if not 0 < self.p_min <= 1:
            raise ConfigError("p_min", "must lie in (0, 1]")
        if not self.p_min <= self.p_max <= 1:
            raise ConfigError("p_max", "must lie in [p_min, 1]")
        if not self.alpha > 0:
            raise ConfigError("alpha", "must be > 0")
        if not math.isfinite(self.beta0):
            raise ConfigError("beta0", "must be finite")
        if not 0 < self.rho <= 1:
            raise ConfigError("rho", "must lie in (0, 1]")
        if not self.gamma >= 0:
            raise ConfigError("gamma", "must be >= 0")
        if self.search_ops:
            raise ConfigError("search_ops", "per-node operation search is not implemented")

    @property
    def num_dags(self) -> int:
        return self.m * self.h

    def to_dict(self) -> dict:
        d = asdict(self)
        d["op_palette"] = [op.label for op in self.op_palette]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetaGraphConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config field")
        d = dict(d)
        if "op_palette" in d:
            try:
                d["op_palette"] = tuple(NodeOp.parse(s) if isinstance(s, str) else NodeOp(**s)
                                        for s in d["op_palette"])
            except (ValueError, TypeError) as exc:
                raise ConfigError("op_palette", str(exc)) from exc
        return cls(**d)


@lru_cache(maxsize=None)
def edge_index(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major (i, j) pairs with i < j; position in this order is the edge id."""
    i, j = np.triu_indices(n, 1)
    i.setflags(write=False)
    j.setflags(write=False)
    return i, j


def num_edges(n: int) -> int:
    return n * (n - 1) // 2


@dataclass
class Dag:
    index: int
    node_ops: tuple[NodeOp, ...]
    log_weights: np.ndarray

    @property
    def n(self) -> int:
        return len(self.node_ops)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def weight(self, i: int, j: int) -> float:
        return float(math.exp(self.log_weights[self.edge_id(i, j)]))

    def edge_id(self, i: int, j: int) -> int:
        n = self.n
        if not 0 <= i < j < n:
            raise KeyError((i, j))
        # offset of row i in the row-major upper triangle
        return i * n - i * (i + 1) // 2 + (j - i - 1)

    def items(self):
        """Yield ((i, j), weight) in edge-id order."""
        ii, jj = edge_index(self.n)
        for i, j, w in zip(ii, jj, self.weights):
            yield (int(i), int(j)), float(w)

    def set_weights(self, weights) -> None:
        """Overwrite weights (test and tooling hook); zeros become -inf log-weights."""
        w = np.asarray(weights, dtype=float)
        if w.shape != self.log_weights.shape:
            raise ValueError(f"expected {self.log_weights.shape[0]} weights, got {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        with np.errstate(divide="ignore"):
            self.log_weights = np.log(w)


@dataclass(frozen=True)
class HistoryRecord:
    t: int
    eta: float
    tau: float
    eta_prime: float
    beta: float
    edges_sampled: int


@dataclass(frozen=True, eq=False)
class SampledGraphSet:
    """One concrete subgraph per DAG: boolean inclusion masks in edge-id order."""

    n: int
    masks: tuple[np.ndarray, ...]
    iteration: int
    draw_index: int

    def __post_init__(self):
        for mask in self.masks:
            mask.setflags(write=False)

    def __eq__(self, other):
        if not isinstance(other, SampledGraphSet):
            return NotImplemented
        return (self.n == other.n and self.iteration == other.iteration
                and self.draw_index == other.draw_index
                and len(self.masks) == len(other.masks)
                and all(np.array_equal(a, b) for a, b in zip(self.masks, other.masks)))

    __hash__ = None

    def edges(self, k: int) -> list[tuple[int, int]]:
        ii, jj = edge_index(self.n)
        sel = self.masks[k]
        return list(zip(ii[sel].tolist(), jj[sel].tolist()))

    def active_nodes(self, k: int) -> frozenset[int]:
        ii, jj = edge_index(self.n)
        sel = self.masks[k]
        return frozenset(ii[sel].tolist()) | frozenset(jj[sel].tolist())

    def edge_counts(self) -> list[int]:
        return [int(mask.sum()) for mask in self.masks]

    @property
    def total_edges(self) -> int:
        return sum(self.edge_counts())

    def is_empty(self, k: int) -> bool:
        return not self.masks[k].any()


class MetaGraph:
    """Connection-weight state plus the sampling RNG and moving baseline.

    Single writer: `update_weights` and `update_beta` mutate in place.
    """

    def __init__(self, config: MetaGraphConfig, dags: list[Dag], *, t: int = 0,
                 beta: float | None = None, history: list[HistoryRecord] | None = None,
                 rng: np.random.Generator | None = None, draws: int = 0):
        self.config = config
        self.dags = dags
        self.t = t
        self.beta = config.beta0 if beta is None else beta
        self.history = [] if history is None else history
        self.rng = rng if rng is not None else np.random.default_rng([config.seed, 1])
        self.draws = draws

    @property
    def num_dags(self) -> int:
        return len(self.dags)

    def hierarchy_of(self, k: int) -> int:
        return k // self.config.m

    def inclusion_probabilities(self, k: int, p_min: float | None = None) -> np.ndarray:
        cfg = self.config
        lo = cfg.p_min if p_min is None else p_min
        return np.clip(self.dags[k].weights, lo, cfg.p_max)

    def subsample(self, rng: np.random.Generator | None = None,
                  p_min: float | None = None) -> SampledGraphSet:
        return subsample(self, rng, p_min=p_min)

    def update_weights(self, sampled: SampledGraphSet, eta_prime: float, **kw) -> "MetaGraph":
        return update_weights(self, sampled, eta_prime, **kw)

    def update_beta(self, eta_prime: float) -> float:
        return update_beta(self, eta_prime)

    def __eq__(self, other):
        if not isinstance(other, MetaGraph):
            return NotImplemented
        return (self.config == other.config and self.t == other.t and self.beta == other.beta
                and self.history == other.history and self.draws == other.draws
                and len(self.dags) == len(other.dags)
                and all(a.index == b.index and a.node_ops == b.node_ops
                        and np.array_equal(a.log_weights, b.log_weights)
                        for a, b in zip(self.dags, other.dags))
                and self.rng.bit_generator.state == other.rng.bit_generator.state)

    __hash__ = None

    def __repr__(self):
        c = self.config
        return f"MetaGraph(h={c.h}, m={c.m}, n={c.n}, t={self.t}, beta={self.beta:.6g})"


def init_meta_graph(config: MetaGraphConfig) -> MetaGraph:
    """Uniform weights (all 1); node ops drawn once from the palette with the seeded RNG."""
    config.validate()
    op_rng = np.random.default_rng([config.seed, 0])
    e = num_edges(config.n)
    dags = []
    for k in range(config.num_dags):
        picks = op_rng.integers(len(config.op_palette), size=config.n)
        ops = tuple(config.op_palette[p] for p in picks)
        dags.append(Dag(k, ops, np.zeros(e)))
    return MetaGraph(config, dags)


def subsample(meta: MetaGraph, rng: np.random.Generator | None = None, *,
              p_min: float | None = None) -> SampledGraphSet:
    """Independent Bernoulli draw per edge with probability clamp(w, p_min, p_max).

    `p_min` overrides the configured floor; 0 is accepted here for degenerate tests.
    """
    rng = meta.rng if rng is None else rng
    masks = []
    for k in range(meta.num_dags):
        p = meta.inclusion_probabilities(k, p_min)
        masks.append(rng.random(p.shape[0]) < p)
    sampled = SampledGraphSet(meta.config.n, tuple(masks), meta.t, meta.draws)
    meta.draws += 1
    return sampled


def update_multiplier(alpha: float, eta_prime: float, beta: float) -> float:
    return math.exp(alpha * (eta_prime - beta))


def update_weights(meta: MetaGraph, sampled: SampledGraphSet, eta_prime: float, *,
                   eta: float | None = None, tau: float | None = None,
                   strict: bool = True) -> MetaGraph:
    """Multiply sampled edges by exp[alpha(eta' - beta)], renormalize to max 1, then move beta.

    With `strict`, `sampled` must come from this meta-graph's current iteration;
    batched search passes strict=False to apply updates from a shared snapshot.
    """
    if not math.isfinite(eta_prime):
        raise NumericError(f"eta_prime must be finite, got {eta_prime!r}")
    if strict and sampled.iteration != meta.t:
        raise ValueError(f"sample drawn at iteration {sampled.iteration}, meta-graph is at {meta.t}")
    if len(sampled.masks) != meta.num_dags or sampled.n != meta.config.n:
        raise ValueError("sampled graph set does not match meta-graph shape")

    step = meta.config.alpha * (eta_prime - meta.beta)
    for dag, mask in zip(meta.dags, sampled.masks):
        lw = dag.log_weights.copy()
        lw[mask] += step
        # exact identity on an already-normalized DAG with nothing sampled
        lw -= lw.max()
        dag.log_weights = lw

    meta.t += 1
    beta = update_beta(meta, eta_prime)
    meta.history.append(HistoryRecord(
        t=meta.t,
        eta=float(eta_prime if eta is None else eta),
        tau=float(0.0 if tau is None else tau),
        eta_prime=float(eta_prime),
        beta=beta,
        edges_sampled=sampled.total_edges,
    ))
    return meta


def update_beta(meta: MetaGraph, eta_prime: float) -> float:
    """Exponential moving average: beta <- (1 - rho) * beta + rho * eta'."""
    if not math.isfinite(eta_prime):
        raise NumericError(f"eta_prime must be finite, got {eta_prime!r}")
    rho = meta.config.rho
    meta.beta = (1.0 - rho) * meta.beta + rho * eta_prime
    return meta.beta


def search_space_size(n: int, m: int, h: int) -> tuple[int, float]:
    """Lower bound (sum_{i=1..n} C(n-1, i)) ** (m*h), exact, and its log10."""
    if n < 1 or m < 1 or h < 1:
        raise ValueError("n, m, h must all be >= 1")
    base = sum(math.comb(n - 1, i) for i in range(1, n + 1))
    size = base ** (m * h)
    log10 = -math.inf if size == 0 else m * h * math.log10(base)
    return size, log10


# -- checkpoints -----------------------------------------------------------

_CHECKPOINT_SCHEMA = {
    "type": "object",
    "required": ["version", "config", "dags", "t", "beta", "history"],
    "properties": {
        "version": {"type": "integer"},
        "config": {"type": "object"},
        "t": {"type": "integer", "minimum": 0},
        "beta": {"type": "number"},
        "draws": {"type": "integer", "minimum": 0},
        "rng": {"type": ["object", "null"]},
        "dags": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["node_ops", "weights"],
                "properties": {
                    "node_ops": {"type": "array", "items": {"type": "string"}},
                    "weights": {
                        "type": "array",
                        "items": {"type": "array", "minItems": 3, "maxItems": 3,
                                  "prefixItems": [{"type": "integer"}, {"type": "integer"},
                                                  {"type": "number"}]},
                    },
                    "log_weights": {"type": "array", "items": {"type": ["number", "null"]}},
                },
            },
        },
        "history": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["t", "eta", "tau", "eta_prime", "beta", "edges_sampled"],
            },
        },
        "extra": {"type": "object"},
    },
}


def _float_or_none(x: float):
    # JSON has no -inf; zero weights (test hook only) round-trip as null
    return None if x == -math.inf else float(x)


def checkpoint_dict(meta: MetaGraph, extra: dict | None = None) -> dict:
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": meta.config.to_dict(),
        "dags": [
            {
                "node_ops": [op.label for op in dag.node_ops],
                "weights": [[i, j, w] for (i, j), w in dag.items()],
                "log_weights": [_float_or_none(x) for x in dag.log_weights.tolist()],
            }
            for dag in meta.dags
        ],
        "t": meta.t,
        "beta": meta.beta,
        "draws": meta.draws,
        "rng": meta.rng.bit_generator.state,
        "history": [asdict(r) for r in meta.history],
    }
    if extra is not None:
        doc["extra"] = extra
    return doc


def save_checkpoint(meta: MetaGraph, path, extra: dict | None = None) -> None:
    """Atomically write a versioned JSON checkpoint.

    Floats go through `repr`, which round-trips IEEE doubles exactly.
    """
    path = os.fspath(path)
    text = json.dumps(checkpoint_dict(meta, extra), indent=1, allow_nan=False)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, *, with_extra: bool = False):
    """Read a checkpoint. Returns the MetaGraph, or (MetaGraph, extra) with `with_extra`."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointCorruptError(f"{path}: not valid JSON ({exc})") from exc
    except UnicodeDecodeError as exc:
        raise CheckpointCorruptError(f"{path}: not valid UTF-8") from exc
    meta, extra = meta_from_dict(doc, source=str(path))
    return (meta, extra) if with_extra else meta


def meta_from_dict(doc, source: str = "<checkpoint>") -> tuple[MetaGraph, dict]:
    if not isinstance(doc, dict):
        raise CheckpointSchemaError(f"{source}: top level must be an object")
    version = doc.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{source}: unsupported checkpoint version {version!r} (expected {CHECKPOINT_VERSION})")
    try:
        jsonschema.validate(doc, _CHECKPOINT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise CheckpointSchemaError(f"{source}: {exc.message}") from exc

    try:
        config = MetaGraphConfig.from_dict(doc["config"])
    except (ConfigError, TypeError) as exc:
        raise CheckpointSchemaError(f"{source}: bad config ({exc})") from exc
    if len(doc["dags"]) != config.num_dags:
        raise CheckpointSchemaError(f"{source}: expected {config.num_dags} dags, got {len(doc['dags'])}")

    e = num_edges(config.n)
    ii, jj = edge_index(config.n)
    dags = []
    for k, d in enumerate(doc["dags"]):
        try:
            ops = tuple(NodeOp.parse(s) for s in d["node_ops"])
        except ValueError as exc:
            raise CheckpointSchemaError(f"{source}: dag {k}: {exc}") from exc
        if len(ops) != config.n or len(d["weights"]) != e:
            raise CheckpointSchemaError(f"{source}: dag {k}: wrong node or edge count")
        keys = [(w[0], w[1]) for w in d["weights"]]
        if keys != list(zip(ii.tolist(), jj.tolist())):
            raise CheckpointSchemaError(f"{source}: dag {k}: weight keys must be all i<j in row-major order")
        if "log_weights" in d:
            if len(d["log_weights"]) != e:
                raise CheckpointSchemaError(f"{source}: dag {k}: wrong log_weights length")
            lw = np.array([-math.inf if x is None else x for x in d["log_weights"]], dtype=float)
        else:
            w = np.array([t[2] for t in d["weights"]], dtype=float)
            if np.any(w < 0):
                raise CheckpointSchemaError(f"{source}: dag {k}: negative weight")
            with np.errstate(divide="ignore"):
                lw = np.log(w)
        dags.append(Dag(k, ops, lw))

    rng = np.random.default_rng([config.seed, 1])
    if doc.get("rng") is not None:
        try:
            rng.bit_generator.state = doc["rng"]
        except (ValueError, TypeError, KeyError) as exc:
            raise CheckpointSchemaError(f"{source}: bad rng state ({exc})") from exc
    try:
        history = [HistoryRecord(**r) for r in doc["history"]]
    except TypeError as exc:
        raise CheckpointSchemaError(f"{source}: bad history record ({exc})") from exc
    meta = MetaGraph(config, dags, t=doc["t"], beta=doc["beta"], history=history,
                     rng=rng, draws=doc.get("draws", 0))
    return meta, doc.get("extra", {})
