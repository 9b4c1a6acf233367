import json
import random

import numpy as np
import pytest
from graphgen import random_graph

from transablate import ir, zoo
from transablate import tensor as T
from transablate.errors import ParseError, ShapeError, UsageError, ValidationError
from transablate.ir import GraphBuilder, build_graph, count_params, deserialize, execute, infer_shapes, serialize


def minimal_spec():
    return {
        "name": "mini",
        "dim": 2,
        "nodes": [
            {"id": "x", "kind": "Input", "hyper": {"channels": 1}},
            {"id": "c", "kind": "Conv", "hyper": {"out": 4}},
            {"id": "h", "kind": "SegHead", "hyper": {"out": 2}},
            {"id": "y", "kind": "Output", "hyper": {}},
        ],
        "edges": [["x", "c", 0], ["c", "h", 0], ["h", "y", 0]],
    }


# ---------------------------------------------------------------- build_graph


def test_minimal_graph():
    g = build_graph(minimal_spec())
    assert len(g.nodes) == 4 and g.topo_order == ("x", "c", "h", "y")
    assert g.mode == "standard" and g.input_id == "x" and g.output_id == "y"


def test_cycle_names_back_edge():
    spec = minimal_spec()
    spec["nodes"].insert(2, {"id": "f", "kind": "Fusion", "hyper": {"out": 4}})
    spec["edges"] = [["x", "f", 0], ["f", "c", 0], ["c", "f", 1], ["c", "h", 0], ["h", "y", 0]]
    with pytest.raises(ValidationError, match="cycle") as exc:
        build_graph(spec)
    assert exc.value.ids == ["c->f"]


def test_dangling_edge_duplicate_and_unknown_kind():
    spec = minimal_spec()
    spec["edges"].append(["ghost", "h", 1])
    with pytest.raises(ValidationError) as exc:
        build_graph(spec)
    assert exc.value.ids == ["ghost"]

    spec = minimal_spec()
    spec["nodes"].append({"id": "c", "kind": "Conv", "hyper": {"out": 2}})
    with pytest.raises(ValidationError, match="duplicate") as exc:
        build_graph(spec)
    assert exc.value.ids == ["c"]

    spec = minimal_spec()
    spec["nodes"][1]["kind"] = "Deformable"
    with pytest.raises(ValidationError, match="Deformable"):
        build_graph(spec)


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda s: s["nodes"].append({"id": "x2", "kind": "Input", "hyper": {"channels": 1}}), "exactly one Input"),
        (lambda s: s["nodes"][1]["hyper"].update(out=0), "positive"),
        (lambda s: s["nodes"][1]["hyper"].update(out=2.5), "integer"),
        (lambda s: s["nodes"][1]["hyper"].update(size=3), "unknown hyperparameter"),
        (lambda s: s["nodes"][1]["hyper"].pop("out"), "missing hyperparameter"),
        (lambda s: s.update(dim=4), "dim"),
        (lambda s: s["edges"].append(["x", "h", 0]), "ports"),
        (lambda s: s.pop("edges"), "edges"),
    ],
)
def test_validation_errors(mutate, match):
    spec = minimal_spec()
    mutate(spec)
    with pytest.raises(ValidationError, match=match):
        build_graph(spec)


def test_unreachable_node_rejected():
    spec = minimal_spec()
    spec["nodes"].append({"id": "z", "kind": "Conv", "hyper": {"out": 2}})
    spec["edges"].append(["x", "z", 0])
    with pytest.raises(ValidationError) as exc:
        build_graph(spec)
    assert exc.value.ids == ["z"]


def test_tap_only_on_vit_within_depth():
    b = GraphBuilder("t", 2, (4, 4, 4))
    b.add("x", "Input", channels=4)
    b.add("v", "ViTEncoder", ["x"], depth=2, heads=2)
    b.add("f", "Fusion", ["v:3", "v"], out=2)
    b.add("y", "Output", ["f"])
    with pytest.raises(ValidationError, match="taps"):
        b.build()


@pytest.mark.parametrize("model", sorted(zoo.TEMPLATES))
@pytest.mark.parametrize("scale", zoo.SCALES)
def test_every_zoo_spec_builds(model, scale):
    g = zoo.build(model, scale)
    g2 = build_graph(json.loads(json.dumps(g.to_spec())))
    assert g2 == g
    infer_shapes(g2, zoo.canonical_input(model, scale))


# ---------------------------------------------------------------- shapes


def test_unetr_toy_token_count():
    g = zoo.build("unetr", "toy")
    ann = infer_shapes(g, (1, 32, 32, 32))
    tok = next(n for n in g.nodes if n.kind == "ViTTokenizer")
    out = ann.outputs[tok.id]
    assert out.spatial == (4, 4, 4) and int(np.prod(out.spatial)) == 64


def test_patch_merging_chain():
    b = GraphBuilder("pm", 3, (48, 32, 32, 32))
    b.add("x", "Input", channels=48)
    b.add("m1", "PatchMerging", ["x"])
    b.add("m2", "PatchMerging", ["m1"])
    b.add("y", "Output", ["m2"])
    ann = infer_shapes(b.build())
    assert ann.output_shape.as_tuple() == (192, 8, 8, 8)
    assert ann.downsample_in["m2"] == (2, 2, 2)


def test_bottleneck_downsample_factor():
    g = zoo.build("transbts", "paper")
    ann = infer_shapes(g)
    enc = next(n.id for n in g.nodes if n.kind == "ViTEncoder")
    assert ann.downsample_in[enc] == (8, 8, 8)


def test_shape_errors_carry_node_id():
    b = GraphBuilder("bad", 2, (1, 12, 12))
    b.add("x", "Input", channels=1)
    b.add("tok", "ViTTokenizer", ["x"], patch=8, dim=4)
    b.add("y", "Output", ["tok"])
    with pytest.raises(ShapeError) as exc:
        infer_shapes(b.build())
    assert exc.value.node_id == "tok"

    g = build_graph(minimal_spec())
    with pytest.raises(ShapeError):
        infer_shapes(g, (1, 8, 8, 8))
    with pytest.raises(UsageError):
        infer_shapes(g)


def test_skip_mismatch_is_shape_error():
    b = GraphBuilder("skip", 2, (1, 8, 8))
    b.add("x", "Input", channels=1)
    b.add("d", "Conv", ["x"], out=2, stride=2)
    b.add("d2", "Conv", ["d"], out=2, stride=2)
    b.add("dec", "DecoderConv", ["d2", "x"], out=2)
    b.add("y", "Output", ["dec"])
    with pytest.raises(ShapeError) as exc:
        infer_shapes(b.build())
    assert exc.value.node_id == "dec"


# ---------------------------------------------------------------- params


def test_passthrough_has_zero_params():
    b = GraphBuilder("id", 2, (3, 4, 4))
    b.add("x", "Input", channels=3)
    b.add("y", "Output", ["x"])
    assert count_params(b.build()).total == 0


def test_single_transformer_block_graph_count():
    b = GraphBuilder("vit", 2, (768, 2, 2))
    b.add("x", "Input", channels=768)
    b.add("v", "ViTEncoder", ["x"], depth=1, heads=12, mlp_ratio=4.0)
    b.add("y", "Output", ["v"])
    pc = count_params(b.build())
    assert pc.total == 7_087_872 == pc.per_node["v"]


def test_unetr_paper_total():
    assert count_params(zoo.build("unetr", "paper")).total == pytest.approx(93.0e6, rel=0.15)


def test_count_invariant_under_spec_reordering():
    rnd = random.Random(0)
    for model in sorted(zoo.TEMPLATES):
        g = zoo.build(model, "toy")
        spec = g.to_spec()
        rnd.shuffle(spec["nodes"])
        rnd.shuffle(spec["edges"])
        g2 = build_graph(spec)
        assert g2 == g
        assert count_params(g2).total == count_params(g).total


def test_params_match_instantiated_tensors():
    g = zoo.build("swinunetr", "toy")
    params = ir.init_params(g, np.random.default_rng(0), dtype=np.float32)
    assert sum(t.size for t in ir.parameters(params)) == count_params(g).total


# ---------------------------------------------------------------- execute


def test_identity_graph_returns_input():
    b = GraphBuilder("id", 2, (3, 4, 4))
    b.add("x", "Input", channels=3)
    b.add("y", "Output", ["x"])
    x = T.tensor(np.random.default_rng(0).normal(size=(3, 4, 4)))
    np.testing.assert_array_equal(execute(b.build(), x, {}).data, x.data)


def test_execute_rejects_bad_params():
    g = build_graph({**minimal_spec(), "input_shape": [1, 8, 8]})
    params = ir.init_params(g, np.random.default_rng(0))
    params["c"].tensors["conv1_w"] = T.tensor(np.zeros((4, 2, 3, 3)))
    with pytest.raises(ShapeError, match=r"\[c\].*conv1_w"):
        execute(g, T.tensor(np.zeros((1, 8, 8))), params)
    del params["c"]
    with pytest.raises(ShapeError, match="missing"):
        execute(g, T.tensor(np.zeros((1, 8, 8))), params)


def test_execute_batched_and_unbatched_agree():
    g = zoo.build("utnet", "toy")
    rng = np.random.default_rng(1)
    params = ir.init_params(g, rng)
    x = rng.normal(size=(2, 1, 64, 64))
    yb = execute(g, T.tensor(x), params).data
    y0 = execute(g, T.tensor(x[0]), params).data
    np.testing.assert_allclose(yb[0], y0, atol=1e-10)


def test_end_to_end_grad_check_on_smallest_graph():
    sizes = {m: count_params(zoo.build(m, "toy")).total for m in zoo.TEMPLATES}
    smallest = min(sizes, key=sizes.get)
    g = zoo.build(smallest, "toy")
    rng = np.random.default_rng(2)
    params = ir.init_params(g, rng)
    x = T.tensor(rng.normal(size=g.input_shape), requires_grad=True)
    w = rng.normal(size=infer_shapes(g).output_shape.as_tuple())
    probes = [params[n].parameters()[0] for n in list(params)[:3]]
    err = T.grad_check(lambda x, *ps: T.tsum(execute(g, x, params) * w), [x] + probes, max_coords=4)
    assert err < 1e-4


def test_random_graphs_execute_to_inferred_shape():
    rng = np.random.default_rng(1234)
    for i in range(1000):
        g, shape = random_graph(rng, f"r{i}")
        ann = infer_shapes(g)
        params = ir.init_params(g, rng)
        y = execute(g, T.tensor(rng.normal(size=shape)), params)
        assert y.shape == ann.output_shape.as_tuple(), g.name
        assert all(v == 1 or (v & (v - 1)) == 0 for f in ann.downsample_in.values() for v in f)


# ---------------------------------------------------------------- serialization


@pytest.mark.parametrize("model", sorted(zoo.TEMPLATES))
def test_round_trip(model):
    for scale in zoo.SCALES:
        g = zoo.build(model, scale)
        text = serialize(g)
        g2 = deserialize(text)
        assert g2 == g and g2.to_spec() == g.to_spec()
        assert serialize(g2) == text


def test_parse_errors():
    with pytest.raises(ParseError) as exc:
        deserialize("")
    assert (exc.value.line, exc.value.column) == (1, 1)
    with pytest.raises(ParseError) as exc:
        deserialize('{\n  "name": "x",\n  "dim": ,\n}')
    assert exc.value.line == 3
    spec = minimal_spec()
    spec["nodes"][1]["kind"] = "Mamba"
    with pytest.raises(ValidationError, match="Mamba"):
        deserialize(json.dumps(spec))


def test_graph_is_immutable_and_hashable():
    g = build_graph(minimal_spec())
    with pytest.raises(AttributeError):
        g.name = "other"
    assert hash(g) == hash(build_graph(minimal_spec()))


# ---------------------------------------------------------------- lint


def test_bottleneck_lint():
    flagged = {m for m in zoo.TEMPLATES if ir.bottleneck_lint(zoo.build(m, "paper"))}
    assert {"transbts", "transunet"} <= flagged
    assert "unetr" not in flagged and "conv_baseline" not in flagged


def test_describe_mentions_every_node():
    g = zoo.build("transbts", "toy")
    text = ir.describe(g)
    assert all(n.id in text for n in g.nodes)
    assert "total params" in text
