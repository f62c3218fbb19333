import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import MOTIF
from gram import architecture as arch
from gram import profiler
from gram.architecture import TensorShape
from gram.errors import (
    ConfigError,
    EvaluatorCrashed,
    EvaluatorSpawnError,
    EvaluatorTimeout,
    IdMismatch,
    MalformedReply,
    ProtocolVersionError,
)
from gram.evaluator import (
    EvalResult,
    EvaluatorBinding,
    ExternalProcessEvaluator,
    SyntheticMotifEvaluator,
    evaluate,
    make_evaluator,
    penalized_score,
)
from gram.meta_graph import MetaGraphConfig, SampledGraphSet, edge_index, init_meta_graph
from gram.search import subgraphs_from_sample

ECHO = [sys.executable, "-m", "gram.cli", "eval-echo"]


def motif_meta():
    return init_meta_graph(MetaGraphConfig(h=1, m=1, n=8, seed=0))


def sample_with(edges, n=8):
    ii, jj = edge_index(n)
    want = set(edges)
    mask = np.array([(i, j) in want for i, j in zip(ii.tolist(), jj.tolist())])
    return SampledGraphSet(n, (mask,), 0, 0)


def spec_for(meta, sampled):
    return arch.infer_shapes(arch.assemble(subgraphs_from_sample(meta, sampled), "cifar",
                                           TensorShape(8, 8, 3), 10, m=1))


# -- built-ins -------------------------------------------------------------

def test_motif_exact_hit():
    ev = SyntheticMotifEvaluator(MOTIF, base=0.3, gain=0.6, clutter=0.2)
    s = sample_with([(i, j) for _, i, j in MOTIF])
    assert ev.accuracy(s) == pytest.approx(0.9, abs=1e-15)


def test_motif_empty_sample_is_base():
    ev = SyntheticMotifEvaluator(MOTIF, base=0.3, gain=0.6, clutter=0.2)
    assert ev.accuracy(sample_with([])) == 0.3


def test_motif_partial_with_clutter():
    ev = SyntheticMotifEvaluator(MOTIF, base=0.3, gain=0.6, clutter=0.2)
    s = sample_with([(0, 1), (1, 3), (2, 6), (6, 7)])
    assert ev.accuracy(s) == pytest.approx(0.3 + 0.6 * 2 / 5 - 0.2 * 2 / 28)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5),
       st.lists(st.booleans(), min_size=28, max_size=28))
def test_motif_clamped(base, gain, clutter, bits):
    ev = SyntheticMotifEvaluator(MOTIF, base, gain, clutter)
    s = SampledGraphSet(8, (np.array(bits),), 0, 0)
    assert 0.0 <= ev.accuracy(s) <= 1.0


def test_builtins_deterministic():
    meta = motif_meta()
    s = meta.subsample()
    spec = spec_for(meta, s)
    for binding in (EvaluatorBinding("synthetic_motif", {"motif": MOTIF, "cost_model": {"coeffs": profiler.DEFAULT_COEFFS}}),
                    EvaluatorBinding("cost_only", {"accuracy": 0.61})):
        assert evaluate(binding, spec, s) == evaluate(binding, spec, s)


def test_cost_only_zero_coefficients():
    meta = motif_meta()
    s = meta.subsample()
    spec = spec_for(meta, s)
    zero = {"coeffs": {k: 0.0 for k in profiler.DEFAULT_COEFFS}, "overhead_ms": 0.5}
    res = evaluate(EvaluatorBinding("cost_only", {"accuracy": 0.42, "cost_model": zero}), spec, s)
    assert res.accuracy == 0.42
    assert res.latency_ms == pytest.approx(profiler.timed_layer_count(spec) * 0.5)


def test_binding_validation():
    with pytest.raises(ConfigError):
        EvaluatorBinding("oracle")
    with pytest.raises(ConfigError):
        EvaluatorBinding("external_process", {"command": ["x"], "timeout_s": 0})
    with pytest.raises(ConfigError):
        EvaluatorBinding("external_process", {})
    with pytest.raises(ConfigError) as err:
        EvaluatorBinding.from_dict({"kind": "cost_only", "params": {"accuracy": 0.5}})
    assert err.value.field == "evaluator.params"


def test_eval_result_invariants():
    with pytest.raises(ValueError):
        EvalResult(1.2, 0.0)
    with pytest.raises(ValueError):
        EvalResult(0.5, -1.0)
    with pytest.raises(ValueError):
        EvalResult(0.5, float("inf"))


# -- penalized score -------------------------------------------------------

def test_penalized_examples():
    assert penalized_score(EvalResult(0.544, 4.24), 0.01) == pytest.approx(0.5016, abs=1e-12)
    assert penalized_score(EvalResult(0.544, 4.24), 0.0) == 0.544
    assert penalized_score(EvalResult(0.9, 0.0), 0.01) == 0.9
    assert penalized_score(EvalResult(0.1, 50.0), 1.0) == pytest.approx(-49.9)


@given(st.floats(0, 1), st.floats(0, 100), st.floats(0, 100), st.sampled_from([0.0, 0.5, 1.0, 2.0]))
def test_penalty_linearity(eta, tau, delta, gamma):
    # powers of two keep gamma * x exact, so the identity holds bit for bit
    a = penalized_score(EvalResult(eta, tau + delta), gamma)
    b = penalized_score(EvalResult(eta, tau), gamma) - gamma * delta
    assert a == pytest.approx(b, abs=1e-12)


# -- external protocol -----------------------------------------------------

def external(*args, timeout=20.0):
    return ExternalProcessEvaluator(ECHO + list(args), timeout_s=timeout)


def test_echo_loopback():
    with external() as ev:
        assert ev.request({"x": 1}) == EvalResult(0.5, 1.0)
        assert ev.request({"x": 2}) == EvalResult(0.5, 1.0)


def test_echo_via_binding_and_spec():
    meta = motif_meta()
    s = meta.subsample()
    binding = EvaluatorBinding("external_process", {"command": ECHO + ["--accuracy", "0.7"],
                                                    "timeout_s": 20, "proxy_size": 500})
    assert evaluate(binding, spec_for(meta, s), s) == EvalResult(0.7, 1.0)


@pytest.mark.parametrize("fault,error", [
    ("wrong-id", IdMismatch),
    ("malformed", MalformedReply),
    ("crash", EvaluatorCrashed),
    ("bad-protocol", ProtocolVersionError),
])
def test_fault_injection(fault, error):
    ev = external("--fault", fault, "--fault-after", "2")
    try:
        assert ev.request({}) == EvalResult(0.5, 1.0)
        with pytest.raises(error) as exc:
            ev.request({})
        assert exc.value.request_id == 2
        assert ev._proc is None  # session torn down
    finally:
        ev.close()


def test_timeout():
    ev = external("--fault", "timeout", "--hang", "30", timeout=0.5)
    try:
        with pytest.raises(EvaluatorTimeout) as exc:
            ev.request({})
        assert exc.value.request_id == 1
        assert ev._proc is None
    finally:
        ev.close()


def test_crash_exit_code():
    ev = external("--fault", "crash")
    with pytest.raises(EvaluatorCrashed) as exc:
        ev.request({})
    assert exc.value.returncode == 7


def test_session_respawns_after_error():
    ev = external("--fault", "wrong-id", "--fault-after", "1")
    try:
        with pytest.raises(IdMismatch):
            ev.request({})
        # fresh child, fresh fault counter: fails again, but it was respawned
        with pytest.raises(IdMismatch):
            ev.request({})
    finally:
        ev.close()


def test_spawn_failure():
    ev = ExternalProcessEvaluator(["/nonexistent/evaluator-binary"])
    with pytest.raises(EvaluatorSpawnError):
        ev.request({})


def test_make_evaluator_kinds():
    assert isinstance(make_evaluator(EvaluatorBinding("synthetic_motif", {"motif": MOTIF})),
                      SyntheticMotifEvaluator)
    assert isinstance(make_evaluator(EvaluatorBinding("external_process", {"command": ECHO})),
                      ExternalProcessEvaluator)
