"""Meta-graph neural architecture search: sample, score, update, prune, profile."""

from .architecture import (
    ArchitectureSpec,
    DagSubgraph,
    TensorShape,
    assemble,
    export,
    infer_shapes,
    prune,
    upscale_channels,
)
from .evaluator import EvalResult, EvaluatorBinding, evaluate, make_evaluator, penalized_score
from .meta_graph import (
    MetaGraph,
    MetaGraphConfig,
    SampledGraphSet,
    init_meta_graph,
    load_checkpoint,
    save_checkpoint,
    search_space_size,
    subsample,
    update_beta,
    update_weights,
)
from .ops import DEFAULT_PALETTE, NodeOp
from .profiler import (
    CostModel,
    ProfileReport,
    accuracy_density,
    count_macs,
    count_params,
    estimate_latency,
    profile,
    sweep_pruning,
)
from .search import SearchConfig, SearchHistory, extract_best, run_search

__version__ = "0.1.0"
