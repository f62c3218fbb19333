"""Command-line entry point: ``gram <subcommand> ...``.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure,
3 evaluator protocol failure. ``GRAM_LOG`` (error|info|debug) sets verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from . import architecture as arch
from . import profiler
from .architecture import TensorShape
from .errors import (
    CheckpointError,
    ConfigError,
    CostModelError,
    EvaluatorError,
    GramError,
    SearchAborted,
    ShapeError,
)
from .meta_graph import load_checkpoint, search_space_size
from .search import (
    CHECKPOINT_NAME,
    SearchConfig,
    extract_best,
    model_name,
    run_search,
    top_edges,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_PROTOCOL = 0, 1, 2, 3

log = logging.getLogger("gram")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_classes(template):
    return 1000 if template == "imagenet" else 10


def _existing_file(path):
    if not os.path.isfile(path):
        raise UsageError(f"no such file: {path}")
    return path


def _cost_model(args):
    return profiler.CostModel.load(_existing_file(args.cost_model)) if args.cost_model else profiler.CostModel()


def _write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# -- subcommands -----------------------------------------------------------

def cmd_search(args):
    config = SearchConfig.load(_existing_file(args.config))
    if args.seed is not None:
        config.meta = type(config.meta).from_dict({**config.meta.to_dict(), "seed": args.seed})
    if args.output_dir:
        config.output_dir = args.output_dir
    if config.output_dir is None:
        config.output_dir = "gram-out"
    resume = _existing_file(args.resume) if args.resume else None
    meta, history = run_search(config, resume=resume)
    print(f"iterations: {len(history)} updated, {len(history.skipped)} skipped")
    print(f"final beta: {meta.beta!r}")
    for k in range(meta.num_dags):
        edges = ", ".join(f"{i}->{j}:{w:.4f}" for (i, j), w in top_edges(meta, k))
        print(f"dag {k}: {edges}")
    print(f"checkpoint: {os.path.join(config.output_dir, CHECKPOINT_NAME)}")
    return EXIT_OK


def _input_shape(args):
    return TensorShape(args.input, args.input, args.channels)


def cmd_extract(args):
    meta = load_checkpoint(_existing_file(args.checkpoint))
    num_classes = args.num_classes or _default_classes(args.template)
    spec, report = extract_best(meta, args.level, args.template, _input_shape(args), num_classes,
                                args.upscale, _cost_model(args))
    path = os.path.join(args.out_dir, model_name(args.input, args.level, args.upscale) + ".json")
    _write(path, arch.export(spec, "json"))
    print(f"wrote {path}")
    _print_report(report)
    return EXIT_OK


def _print_report(report):
    print(f"macs: {report.macs}")
    print(f"params: {report.params}")
    print(f"latency_ms: {report.latency_ms:.4f}")
    if report.accuracy_density is not None:
        print(f"accuracy_density: {report.accuracy_density:.2f}")


def _load_spec(path):
    with open(_existing_file(path), encoding="utf-8") as fh:
        try:
            return arch.load_spec(fh.read())
        except (ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"{path}: not an architecture file ({exc})") from exc


def cmd_profile(args):
    spec = _load_spec(args.spec)
    report = profiler.profile(arch.infer_shapes(spec), _cost_model(args), args.accuracy)
    _print_report(report)
    return EXIT_OK


def cmd_sweep(args):
    meta = load_checkpoint(_existing_file(args.checkpoint))
    try:
        levels = profiler.parse_levels(args.levels)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if any(not 0 <= lv <= 1 for lv in levels):
        raise UsageError("levels must lie in [0, 1]")
    rows = profiler.sweep_pruning(meta, levels, args.template, _input_shape(args), _cost_model(args),
                                  args.num_classes or _default_classes(args.template), args.upscale)
    text = profiler.sweep_csv(rows)
    if args.out:
        _write(args.out, text)
        print(f"wrote {args.out} ({len(rows)} rows)")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_space_size(args):
    for name in ("n", "m", "h"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name} must be >= 1")
    size, log10 = search_space_size(args.n, args.m, args.h)
    print(f"{size} (log10={log10:.3f})")
    return EXIT_OK


def cmd_export(args):
    spec = arch.infer_shapes(_load_spec(args.spec))
    text = arch.export(spec, args.format)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval_echo(args):
    """Loopback evaluator: answers every request with fixed numbers.

    --fault injects one failure at request number --fault-after (1-based).
    """
    count = 0
    out = sys.stdout
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
        except json.JSONDecodeError:
            continue
        if req.get("cmd") == "shutdown":
            break
        count += 1
        rid = req.get("id")
        reply = {"id": rid, "accuracy": args.accuracy, "latency_ms": args.latency}
        if args.fault != "none" and count >= args.fault_after:
            if args.fault == "timeout":
                time.sleep(args.hang)
                continue
            if args.fault == "crash":
                return 7
            if args.fault == "malformed":
                out.write("this is not json\n")
                out.flush()
                continue
            if args.fault == "wrong-id":
                reply["id"] = f"{rid}-x"
            if args.fault == "bad-protocol":
                reply["protocol"] = 99
        out.write(json.dumps(reply) + "\n")
        out.flush()
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def _add_arch_args(p, *, level=True):
    p.add_argument("--checkpoint", required=True, help="meta-graph checkpoint JSON")
    if level:
        p.add_argument("--level", type=float, default=0.4, help="structure pruning level in [0, 1]")
    p.add_argument("--upscale", type=float, default=1.0, help="channel up-scaling factor (>= 1)")
    p.add_argument("--input", type=int, default=96, help="square input size in pixels")
    p.add_argument("--channels", type=int, default=3, help="input channels")
    p.add_argument("--template", choices=arch.TEMPLATES, default="imagenet")
    p.add_argument("--num-classes", type=int, default=None,
                   help="classifier width (default 1000 for imagenet, 10 for cifar)")
    p.add_argument("--cost-model", default=None, help="cost table JSON")


def build_parser():
    parser = _Parser(prog="gram", description="Meta-graph neural architecture search engine.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("search", help="run a search")
    p.add_argument("--config", required=True, help="search config JSON")
    p.add_argument("--seed", type=int, default=None, help="override meta.seed")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--output-dir", default=None, help="override output_dir")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("extract", help="prune a trained meta-graph into an architecture file")
    _add_arch_args(p)
    p.add_argument("--out-dir", default=".", help="directory for swiftnet-<input>-<level>-<upscale>.json")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("profile", help="MACs, params, latency (and density) of an architecture file")
    p.add_argument("--spec", required=True, help="architecture JSON")
    p.add_argument("--cost-model", default=None, help="cost table JSON")
    p.add_argument("--accuracy", type=float, default=None, help="accuracy in percent, for density")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("sweep", help="profile a meta-graph across pruning levels (CSV)")
    _add_arch_args(p, level=False)
    p.add_argument("--levels", default="0.2:0.8:0.05", help="start:stop:step (inclusive) or a,b,c")
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("space-size", help="lower bound on the search-space size")
    p.add_argument("--n", type=int, required=True, help="nodes per DAG")
    p.add_argument("--m", type=int, required=True, help="DAGs per hierarchy")
    p.add_argument("--h", type=int, required=True, help="hierarchies")
    p.set_defaults(func=cmd_space_size)

    p = sub.add_parser("export", help="render an architecture file as JSON or DOT")
    p.add_argument("--spec", required=True, help="architecture JSON")
    p.add_argument("--format", choices=("json", "dot"), default="json")
    p.add_argument("--out", default=None, help="output path (default stdout)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("eval-echo", help="loopback external evaluator (protocol test double)")
    p.add_argument("--accuracy", type=float, default=0.5)
    p.add_argument("--latency", type=float, default=1.0)
    p.add_argument("--fault", choices=("none", "timeout", "malformed", "crash", "wrong-id", "bad-protocol"),
                   default="none")
    p.add_argument("--fault-after", type=int, default=1, help="1-based request number that fails")
    p.add_argument("--hang", type=float, default=3600.0, help="seconds to stall for --fault timeout")
    p.set_defaults(func=cmd_eval_echo)
    return parser


def _setup_logging():
    level = os.environ.get("GRAM_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"gram {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EvaluatorError, SearchAborted) as exc:
        print(f"gram {args.command}: evaluator failure: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (CheckpointError, CostModelError, ShapeError, GramError, OSError, ValueError) as exc:
        print(f"gram {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
