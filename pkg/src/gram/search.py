"""The search loop: sample -> assemble -> evaluate -> penalize -> update, T times."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import architecture as arch
from . import profiler
from .architecture import DagSubgraph, TensorShape
from .errors import ConfigError, EvaluatorError, SearchAborted
from .evaluator import EvaluatorBinding, make_evaluator, penalized_score
from .meta_graph import (
    HistoryRecord,
    MetaGraph,
    MetaGraphConfig,
    SampledGraphSet,
    init_meta_graph,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

HISTORY_HEADER = ("t", "eta", "tau", "eta_prime", "beta", "edges_sampled")
CHECKPOINT_NAME = "checkpoint.json"
HISTORY_NAME = "history.csv"


@dataclass
class SearchConfig:
    meta: MetaGraphConfig = field(default_factory=MetaGraphConfig)
    T: int = 1000
    evaluator: EvaluatorBinding = field(default_factory=lambda: EvaluatorBinding("cost_only"))
    template: str = "cifar"
    input_shape: TensorShape = field(default_factory=lambda: TensorShape(32, 32, 3))
    num_classes: int = 10
    checkpoint_interval: int = 50
    output_dir: str | None = None
    failure_budget: int = 10
    # batch_size > 1 samples several candidates from one snapshot, evaluates
    # them concurrently and applies their updates in draw order
    batch_size: int = 1
    workers: int = 1

    def __post_init__(self):
        if not isinstance(self.T, int) or self.T < 1:
            raise ConfigError("T", "must be an integer >= 1")
        if not isinstance(self.checkpoint_interval, int) or self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval", "must be an integer >= 1")
        if self.failure_budget < 0:
            raise ConfigError("failure_budget", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        if self.template not in arch.TEMPLATES:
            raise ConfigError("template", f"must be one of {arch.TEMPLATES}")
        if self.num_classes < 1:
            raise ConfigError("num_classes", "must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchConfig":
        doc = dict(doc)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown search config field")
        if "meta" in doc:
            if not isinstance(doc["meta"], dict):
                raise ConfigError("meta", "must be an object")
            doc["meta"] = MetaGraphConfig.from_dict(doc["meta"])
        if "evaluator" in doc:
            doc["evaluator"] = EvaluatorBinding.from_dict(doc["evaluator"])
        if "input_shape" in doc:
            shape = doc["input_shape"]
            try:
                doc["input_shape"] = (TensorShape.square(shape) if isinstance(shape, int)
                                      else TensorShape(*shape))
            except (TypeError, ValueError) as exc:
                raise ConfigError("input_shape", str(exc)) from exc
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from exc

    @classmethod
    def load(cls, path) -> "SearchConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("config", f"{path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config", "top level must be an object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "meta": self.meta.to_dict(),
            "T": self.T,
            "evaluator": self.evaluator.to_dict(),
            "template": self.template,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "checkpoint_interval": self.checkpoint_interval,
            "output_dir": self.output_dir,
            "failure_budget": self.failure_budget,
            "batch_size": self.batch_size,
            "workers": self.workers,
        }


@dataclass
class SearchHistory:
    records: list[HistoryRecord] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in self.records:
            w.writerow((r.t, repr(r.eta), repr(r.tau), repr(r.eta_prime), repr(r.beta), r.edges_sampled))
        return buf.getvalue()


def subgraphs_from_sample(meta: MetaGraph, sampled: SampledGraphSet) -> list[DagSubgraph]:
    return [DagSubgraph(dag.node_ops, tuple(sampled.edges(k))) for k, dag in enumerate(meta.dags)]


def _atomic_write(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


class _Run:
    def __init__(self, config: SearchConfig, meta: MetaGraph, progress: dict, evaluator):
        self.config = config
        self.meta = meta
        self.iteration = progress.get("iteration", 0)
        self.failures = progress.get("failures", 0)
        self.skipped = list(progress.get("skipped", []))
        self._evaluator = evaluator
        self._local = threading.local()
        self._owned = []

    def evaluator(self):
        if self._evaluator is not None:
            return self._evaluator
        ev = getattr(self._local, "ev", None)
        if ev is None:
            ev = self._local.ev = make_evaluator(self.config.evaluator)
            self._owned.append(ev)
        return ev

    def close(self):
        for ev in self._owned:
            ev.close()

    def progress(self) -> dict:
        return {"iteration": self.iteration, "failures": self.failures, "skipped": self.skipped}

    def checkpoint(self):
        out = self.config.output_dir
        if out is None:
            return
        save_checkpoint(self.meta, os.path.join(out, CHECKPOINT_NAME),
                        extra={"search": self.progress(), "search_config": self._stored_config()})
        _atomic_write(os.path.join(out, HISTORY_NAME), self.history().to_csv())

    def _stored_config(self) -> dict:
        # output_dir excluded so identical runs in different directories match byte for byte
        d = self.config.to_dict()
        del d["output_dir"]
        return d

    def history(self) -> SearchHistory:
        return SearchHistory(list(self.meta.history), list(self.skipped))

    def build(self, sampled):
        cfg = self.config
        spec = arch.assemble(subgraphs_from_sample(self.meta, sampled), cfg.template, cfg.input_shape,
                             cfg.num_classes, m=self.meta.config.m)
        return arch.infer_shapes(spec)

    def score(self, spec, sampled):
        try:
            return self.evaluator().evaluate(spec, sampled)
        except EvaluatorError as exc:
            return exc

    def step(self, stop_at: int):
        cfg = self.config
        batch = min(cfg.batch_size, stop_at - self.iteration)
        samples = [self.meta.subsample() for _ in range(batch)]
        specs = [self.build(s) for s in samples]
        if batch > 1 and cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=min(cfg.workers, batch)) as pool:
                results = list(pool.map(self.score, specs, samples))
        else:
            results = [self.score(spec, s) for spec, s in zip(specs, samples)]

        for sampled, result in zip(samples, results):
            self.iteration += 1
            if isinstance(result, EvaluatorError):
                self.failures += 1
                self.skipped.append({"iteration": self.iteration, "error": type(result).__name__,
                                     "message": str(result)})
                log.warning("iteration %d skipped: %s", self.iteration, result)
                if self.failures > cfg.failure_budget:
                    self.checkpoint()
                    raise SearchAborted(
                        f"evaluator failed {self.failures} times (budget {cfg.failure_budget})") from result
            else:
                eta_prime = penalized_score(result, self.meta.config.gamma)
                self.meta.update_weights(sampled, eta_prime, eta=result.accuracy,
                                         tau=result.latency_ms, strict=batch == 1)
                log.debug("t=%d eta=%.4f tau=%.3f eta'=%.4f beta=%.4f", self.meta.t,
                          result.accuracy, result.latency_ms, eta_prime, self.meta.beta)
            if self.iteration % cfg.checkpoint_interval == 0 or self.iteration == cfg.T:
                self.checkpoint()


def run_search(config: SearchConfig, *, resume=None, evaluator=None,
               stop_after: int | None = None) -> tuple[MetaGraph, SearchHistory]:
    """Run (or continue) a search.

    resume: checkpoint path to continue from; the RNG stream position and loop
        progress are restored, so the result matches an uninterrupted run.
    evaluator: an evaluator instance overriding `config.evaluator`.
    stop_after: stop once this many iterations are done (for staged runs).
    """
    if resume is not None:
        meta, extra = load_checkpoint(resume, with_extra=True)
        if meta.config != config.meta:
            raise ConfigError("meta", "checkpoint meta-graph config differs from the search config")
        progress = extra.get("search", {})
    else:
        meta, progress = init_meta_graph(config.meta), {}
    if config.output_dir is not None:
        os.makedirs(config.output_dir, exist_ok=True)

    run = _Run(config, meta, progress, evaluator)
    stop_at = config.T if stop_after is None else min(config.T, stop_after)
    try:
        while run.iteration < stop_at:
            run.step(stop_at)
    finally:
        run.close()
    if stop_after is not None and run.iteration % config.checkpoint_interval:
        run.checkpoint()
    return meta, run.history()


def top_edges(meta: MetaGraph, k: int, limit: int = 10) -> list[tuple[tuple[int, int], float]]:
    items = sorted(meta.dags[k].items(), key=lambda kv: (-kv[1], kv[0]))
    return items[:limit]


def model_name(input_size: int, level: float, upscale: float) -> str:
    return f"swiftnet-{input_size}-{level:g}-{upscale:.2f}"


def extract_best(meta: MetaGraph, level: float, template: str, input_shape: TensorShape,
                 num_classes: int, upscale: float = 1.0,
                 cost_model: profiler.CostModel | None = None):
    """Prune at `level`, up-scale, assemble and profile. Returns (spec, ProfileReport)."""
    subgraphs = arch.prune(meta, level)
    subgraphs = arch.upscale_channels(subgraphs, upscale)
    spec = arch.assemble(subgraphs, template, input_shape, num_classes, m=meta.config.m,
                         upscale_factor=upscale)
    spec = arch.infer_shapes(spec)
    return spec, profiler.profile(spec, cost_model)
