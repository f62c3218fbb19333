import json
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_meta
from gram import architecture as arch
from gram.architecture import DagSubgraph, TensorShape
from gram.errors import ShapeError, StateError
from gram.meta_graph import MetaGraphConfig, init_meta_graph
from gram.ops import NodeOp
from gram.profiler import count_macs

C1_32, C1_64, C1_128 = NodeOp("conv1x1", 32), NodeOp("conv1x1", 64), NodeOp("conv1x1", 128)
C3_32, C3_64 = NodeOp("conv3x3", 32), NodeOp("conv3x3", 64)


def three_node_meta(weights):
    meta = init_meta_graph(MetaGraphConfig(h=1, m=1, n=3))
    meta.dags[0].set_weights(weights)
    return meta


# -- prune -----------------------------------------------------------------

def test_prune_fresh_meta_keeps_all():
    meta = init_meta_graph(MetaGraphConfig(h=2, m=2, n=5))
    for sg in arch.prune(meta, 0.65):
        assert len(sg.edges) == 10


def test_prune_threshold():
    # edge order (0,1), (0,2), (1,2)
    meta = three_node_meta([1.0, 0.6, 0.3])
    assert arch.prune(meta, 0.5)[0].edges == ((0, 1), (0, 2))


def test_prune_inclusive_boundary():
    meta = three_node_meta([1.0, 0.999, 0.5])
    assert arch.prune(meta, 1.0)[0].edges == ((0, 1),)


@pytest.mark.parametrize("level", [-0.01, 1.01])
def test_prune_range(level):
    with pytest.raises(ValueError):
        arch.prune(three_node_meta([1.0, 1.0, 1.0]), level)


# -- up-scaling ------------------------------------------------------------

def test_upscale_1_5():
    sg = DagSubgraph((C1_32, C1_64, C1_128), ((0, 1), (1, 2)))
    out = arch.upscale_channels([sg], 1.5)[0]
    assert [op.filters for op in out.node_ops] == [48, 96, 192]
    assert out.edges == sg.edges


def test_upscale_identity_and_1_25():
    sg = DagSubgraph((C3_32,), ())
    assert arch.upscale_channels([sg], 1.0) == [sg]
    assert arch.upscale_channels([sg], 1.25)[0].node_ops[0].filters == 40


def test_upscale_rejects_downscale():
    with pytest.raises(ValueError):
        arch.upscale_channels([], 0.9)


def test_upscale_spec_clears_shapes():
    meta = random_meta(3, h=1, m=1, n=4)
    spec = arch.infer_shapes(arch.assemble(arch.prune(meta, 0.0), "cifar", TensorShape(8, 8, 3), 10, m=1))
    up = arch.upscale_channels(spec, 1.5)
    assert up.shapes is None and up.upscale_factor == 1.5


# -- DAG wiring ------------------------------------------------------------

def test_active_nodes_reachable_from_entry():
    ops = (C1_32,) * 6
    sg = DagSubgraph(ops, ((0, 2), (2, 4), (1, 3), (3, 5)))
    assert sg.active_nodes == (0, 2, 4)
    assert sg.live_edges == ((0, 2), (2, 4))
    assert sg.sources == (0,) and sg.sinks == (4,)
    assert DagSubgraph(ops, ((1, 2),)).is_identity


def test_rejects_backward_edge():
    with pytest.raises(ValueError):
        DagSubgraph((C1_32, C1_32), ((1, 0),))


# -- assemble / infer_shapes -----------------------------------------------

def identity_groups(h, m, n=3):
    return [[DagSubgraph((C1_32,) * n, ())] * m for _ in range(h)]


def test_imagenet_shape_chain():
    meta = random_meta(1, h=3, m=3, n=6)
    spec = arch.infer_shapes(arch.assemble(arch.prune(meta, 0.3), "imagenet", TensorShape(96, 96, 3),
                                           1000, m=3))
    s = spec.shapes
    assert s["stem.conv1"] == (48, 48, 64)
    assert s["stem.conv2"] == (24, 24, 64)
    assert s["h2.pool"][:2] == (3, 3)
    k = s["h2.pool"][2]
    assert k == 64 + sum(s[f"h{a}.d{b}.out"][2] for a in range(3) for b in range(3)
                         if f"h{a}.d{b}.out" in s)
    assert s["head.conv_head"] == (3, 3, 1000)
    assert s["head.gap"] == (1, 1, 1000)
    assert s["head.flatten"] == (1, 1, 1000)


def test_cifar_prehead_spatial():
    spec = arch.infer_shapes(arch.assemble(identity_groups(3, 2), "cifar", TensorShape(32, 32, 3), 10))
    assert spec.shapes["h2.pool"] == (4, 4, 3)
    assert spec.shapes["head.fc"] == (1, 1, 10)


def test_all_identity_imagenet_is_valid():
    spec = arch.infer_shapes(arch.assemble(identity_groups(3, 3), "imagenet", TensorShape(96, 96, 3), 1000))
    assert spec.shapes["h0.d0.identity"] == (24, 24, 64)
    assert spec.shapes["h2.pool"] == (3, 3, 64)
    assert count_macs(spec) > 0


def test_single_node_same_padding():
    sg = DagSubgraph((C3_32, C1_32), ((0, 1),))
    spec = arch.infer_shapes(arch.assemble([[sg]], "cifar", TensorShape(24, 24, 64), 10))
    assert spec.shapes["h0.d0.n0"] == (24, 24, 32)


def test_two_sinks_concat_channels():
    sg = DagSubgraph((C1_64, C3_32, C1_128), ((0, 1), (0, 2)))
    assert sg.sinks == (1, 2)
    assert sum(sg.node_ops[v].filters for v in sg.sinks) == 160
    spec = arch.infer_shapes(arch.assemble([[sg]], "cifar", TensorShape(8, 8, 16), 10))
    assert spec.shapes["h0.d0.out"][2] == 64 + 160
    assert spec.shapes["h0.concat"][2] == 16 + 64 + 160


@pytest.mark.parametrize("size,layer", [(90, "stem.conv2"), (95, "stem.conv1"), (80, "h2.pool")])
def test_indivisible_input_names_layer(size, layer):
    with pytest.raises(ShapeError) as err:
        arch.assemble(identity_groups(3, 1), "imagenet", TensorShape(size, size, 3), 1000)
    assert err.value.layer == layer


def test_assemble_grouping():
    flat = [DagSubgraph((C1_32,) * 3, ())] * 6
    spec = arch.assemble(flat, "cifar", TensorShape(16, 16, 3), 10, m=2)
    assert (spec.h, spec.m) == (3, 2)
    with pytest.raises(ValueError):
        arch.assemble(flat, "cifar", TensorShape(16, 16, 3), 10, m=4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.0, 0.2, 0.5, 0.8]), st.integers(1, 3))
def test_shape_conservation_and_determinism(seed, level, h):
    meta = random_meta(seed, h=h, m=2, n=5)
    size = 8 * 2 ** h
    build = lambda: arch.infer_shapes(arch.assemble(arch.prune(meta, level), "imagenet",
                                                    TensorShape(size, size, 3), 10, m=2))
    a, b = build(), build()
    assert a == b
    assert a.shapes[f"h{h - 1}.pool"][:2] == (size // 2 ** (h + 2),) * 2


# -- export ----------------------------------------------------------------

def annotated(seed=2, h=3, m=3, level=0.4):
    meta = random_meta(seed, h=h, m=m, n=6)
    return arch.infer_shapes(arch.assemble(arch.prune(meta, level), "imagenet", TensorShape(96, 96, 3),
                                           1000, m=m))


def test_json_roundtrip():
    spec = annotated()
    doc = json.loads(arch.export(spec, "json"))
    assert set(doc) >= {"version", "template", "upscale_factor", "stem", "hierarchies", "head", "shapes"}
    assert arch.load_spec(arch.export(spec, "json")) == spec


def test_dot_cluster_structure():
    spec = annotated(h=3, m=3)
    dot = arch.export(spec, "dot")
    assert len(re.findall(r"subgraph cluster_h\d+ \{", dot)) == 3
    for a in range(3):
        assert len(re.findall(rf"subgraph cluster_h{a}_d\d+ \{{", dot)) == 3


def test_dot_identity_cluster():
    spec = arch.infer_shapes(arch.assemble(identity_groups(1, 2), "cifar", TensorShape(8, 8, 3), 10))
    dot = arch.export(spec, "dot")
    block = dot.split("subgraph cluster_h0_d0 {")[1].split("}")[0]
    assert block.count("[label=") == 1 and "identity/" in block


def test_dot_node_labels():
    dot = arch.export(annotated(), "dot")
    assert re.search(r'"h0\.d\d\.n0" \[label="conv(1x1|3x3)/\d+/24x24x\d+"\]', dot)


def test_export_requires_shapes():
    spec = arch.assemble(identity_groups(1, 1), "cifar", TensorShape(8, 8, 3), 10)
    with pytest.raises(StateError):
        arch.export(spec, "json")
