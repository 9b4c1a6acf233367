"""Typed block-graph IR: validation, shape inference, parameter counting,
serialization and an interpreter.

A graph is a DAG of :class:`BlockNode` joined by :class:`Edge` triples
``(src, dst, port)``. ``src`` is a node id, optionally suffixed ``:k`` to tap
the output after block ``k`` of a ``ViTEncoder``. Every edge carries a
channel-first feature map; token sequences travel as maps over their grid.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import blocks as B
from .errors import ParseError, ShapeError, UsageError, ValidationError
from .tensor import Tensor

TRANSFORMER_KINDS = ("ViTEncoder", "SwinStage")

# kind -> (arity, {hyper: default or None when required})
KINDS: dict[str, tuple[int | None, dict[str, Any]]] = {
    "Input": (0, {"channels": None}),
    "Output": (1, {}),
    "Conv": (1, {"out": None, "stride": 1, "kernel": 3}),
    "DecoderConv": (2, {"out": None}),
    "ViTTokenizer": (1, {"patch": None, "dim": None, "pos_embed": 1}),
    "ViTEncoder": (1, {"depth": None, "heads": None, "mlp_ratio": 4.0}),
    "SwinStage": (1, {"depth": None, "window": None, "heads": None, "mlp_ratio": 4.0}),
    "PatchMerging": (1, {}),
    "LinearProjection": (1, {"out": None, "patch": 1}),
    "Upsample": (1, {"out": None}),
    "Fusion": (None, {"out": None, "kernel": 1}),
    "SegHead": (1, {"out": None}),
}

# hyper values allowed to be zero
_NONNEG = {("ViTTokenizer", "pos_embed")}


class Edge(NamedTuple):
    src: str
    dst: str
    port: int = 0

    @property
    def src_node(self) -> str:
        return split_src(self.src)[0]


def split_src(src: str) -> tuple[str, int | None]:
    node, sep, tap = src.partition(":")
    if not sep:
        return node, None
    try:
        return node, int(tap)
    except ValueError:
        raise ValidationError("malformed tap reference", [src]) from None


@dataclass(frozen=True)
class BlockNode:
    id: str
    kind: str
    hyper: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"id": self.id, "kind": self.kind, "hyper": dict(self.hyper)}


@dataclass(frozen=True, eq=False)
class ArchGraph:
    name: str
    dim: int
    nodes: tuple[BlockNode, ...]
    edges: tuple[Edge, ...]
    mode: str = "standard"
    input_shape: tuple[int, ...] | None = None

    @cached_property
    def by_id(self) -> dict[str, BlockNode]:
        return {n.id: n for n in self.nodes}

    def node(self, node_id: str) -> BlockNode:
        return self.by_id[node_id]

    def canonical(self) -> tuple:
        nodes = tuple(sorted((n.id, n.kind, tuple(sorted(n.hyper.items()))) for n in self.nodes))
        return (self.name, self.dim, self.mode, self.input_shape, nodes, tuple(sorted(self.edges)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ArchGraph):
            return NotImplemented
        return self.canonical() == other.canonical()

    def __hash__(self) -> int:
        return hash(self.canonical())

    def in_edges(self, node_id: str) -> list[Edge]:
        return sorted((e for e in self.edges if e.dst == node_id), key=lambda e: e.port)

    def out_edges(self, node_id: str) -> list[Edge]:
        return [e for e in self.edges if e.src_node == node_id]

    @cached_property
    def topo_order(self) -> tuple[str, ...]:
        return tuple(_topo_sort(self.nodes, self.edges))

    @property
    def input_id(self) -> str:
        return next(n.id for n in self.nodes if n.kind == "Input")

    @property
    def output_id(self) -> str:
        return next(n.id for n in self.nodes if n.kind == "Output")

    def to_spec(self) -> dict:
        spec = {"name": self.name, "dim": self.dim, "mode": self.mode}
        if self.input_shape is not None:
            spec["input_shape"] = list(self.input_shape)
        spec["nodes"] = [n.to_json() for n in self.nodes]
        spec["edges"] = [[e.src, e.dst, e.port] for e in self.edges]
        return spec


# ---------------------------------------------------------------- construction


def _topo_sort(nodes: Sequence[BlockNode], edges: Sequence[Edge]) -> list[str]:
    rank = {n.id: i for i, n in enumerate(nodes)}
    indeg = {n.id: 0 for n in nodes}
    succ: dict[str, list[str]] = {n.id: [] for n in nodes}
    for e in edges:
        indeg[e.dst] += 1
        succ[e.src_node].append(e.dst)
    ready = sorted((i for i, d in indeg.items() if d == 0), key=rank.get)
    order = []
    while ready:
        nid = ready.pop(0)
        order.append(nid)
        for d in succ[nid]:
            indeg[d] -= 1
            if indeg[d] == 0:
                ready.append(d)
                ready.sort(key=rank.get)
    return order


def _find_back_edge(nodes: Sequence[BlockNode], edges: Sequence[Edge]) -> Edge | None:
    succ: dict[str, list[Edge]] = {n.id: [] for n in nodes}
    for e in edges:
        succ[e.src_node].append(e)
    state: dict[str, int] = {}
    for root in (n.id for n in nodes):
        if root in state:
            continue
        stack = [(root, iter(succ[root]))]
        state[root] = 1
        while stack:
            nid, it = stack[-1]
            e = next(it, None)
            if e is None:
                state[nid] = 2
                stack.pop()
                continue
            s = state.get(e.dst, 0)
            if s == 1:
                return e
            if s == 0:
                state[e.dst] = 1
                stack.append((e.dst, iter(succ[e.dst])))
    return None


def _check_hyper(nid: str, kind: str, hyper: Mapping[str, Any]) -> dict[str, Any]:
    _, schema = KINDS[kind]
    unknown = sorted(set(hyper) - set(schema))
    if unknown:
        raise ValidationError(f"unknown hyperparameter(s) {unknown} for {kind}", [nid])
    out = {}
    for key, default in schema.items():
        if key in hyper:
            val = hyper[key]
        elif default is None:
            raise ValidationError(f"missing hyperparameter {key!r} for {kind}", [nid])
        else:
            val = default
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ValidationError(f"hyperparameter {key!r} must be numeric", [nid])
        if key != "mlp_ratio":
            if val != int(val):
                raise ValidationError(f"hyperparameter {key!r} must be an integer", [nid])
            val = int(val)
        else:
            val = float(val)
        if val < 0 or (val == 0 and (kind, key) not in _NONNEG):
            raise ValidationError(f"hyperparameter {key!r} must be positive", [nid])
        out[key] = val
    return out


def build_graph(spec: Mapping[str, Any]) -> ArchGraph:
    """Validate a GraphSpec mapping and return an :class:`ArchGraph`."""
    if not isinstance(spec, Mapping):
        raise ValidationError("graph spec must be an object")
    for key in ("name", "dim", "nodes", "edges"):
        if key not in spec:
            raise ValidationError(f"graph spec missing field {key!r}")
    dim = spec["dim"]
    if dim not in (2, 3):
        raise ValidationError(f"dim must be 2 or 3, got {dim!r}")
    mode = spec.get("mode", "standard")
    if mode not in ("standard", "ablated"):
        raise ValidationError(f"mode must be 'standard' or 'ablated', got {mode!r}")

    nodes: list[BlockNode] = []
    seen: set[str] = set()
    dups = []
    for raw in spec["nodes"]:
        nid = raw.get("id")
        kind = raw.get("kind")
        if not isinstance(nid, str) or not nid or ":" in nid:
            raise ValidationError("node ids must be non-empty strings without ':'", [str(nid)])
        if kind not in KINDS:
            raise ValidationError(f"unknown block kind {kind!r}", [nid])
        if nid in seen:
            dups.append(nid)
        seen.add(nid)
        nodes.append(BlockNode(nid, kind, _check_hyper(nid, kind, raw.get("hyper", {}))))
    if dups:
        raise ValidationError("duplicate node ids", dups)
    by_id = {n.id: n for n in nodes}

    edges: list[Edge] = []
    dangling = []
    for raw in spec["edges"]:
        if not isinstance(raw, (list, tuple)) or len(raw) not in (2, 3):
            raise ValidationError(f"edge must be [src, dst, port], got {raw!r}")
        src, dst = str(raw[0]), str(raw[1])
        port = int(raw[2]) if len(raw) == 3 else 0
        src_node, tap = split_src(src)
        if src_node not in by_id or dst not in by_id:
            dangling.extend(i for i in (src_node, dst) if i not in by_id)
            continue
        if tap is not None:
            n = by_id[src_node]
            if n.kind != "ViTEncoder" or not 1 <= tap <= n.hyper["depth"]:
                raise ValidationError("taps are only valid on ViTEncoder within its depth", [src])
        edges.append(Edge(src, dst, port))
    if dangling:
        raise ValidationError("edges reference unknown nodes", sorted(set(dangling)))

    for kind in ("Input", "Output"):
        found = [n.id for n in nodes if n.kind == kind]
        if len(found) != 1:
            raise ValidationError(f"graph needs exactly one {kind} node, found {len(found)}", found)
    for n in nodes:
        if n.kind == "Output" and any(e.src_node == n.id for e in edges):
            raise ValidationError("Output node cannot feed other nodes", [n.id])

    bad_ports = []
    for n in nodes:
        ports = sorted(e.port for e in edges if e.dst == n.id)
        arity = KINDS[n.kind][0]
        if arity is None:
            ok = len(ports) >= 2 and ports == list(range(len(ports)))
        else:
            ok = ports == list(range(arity))
        if not ok:
            bad_ports.append(n.id)
    if bad_ports:
        raise ValidationError("input ports not fed by exactly one edge each", bad_ports)

    back = _find_back_edge(nodes, edges)
    if back is not None:
        raise ValidationError("cycle detected at back edge", [f"{back.src}->{back.dst}"])

    inp = next(n.id for n in nodes if n.kind == "Input")
    out = next(n.id for n in nodes if n.kind == "Output")
    fwd = _reach(inp, {n.id: [e.dst for e in edges if e.src_node == n.id] for n in nodes})
    bwd = _reach(out, {n.id: [e.src_node for e in edges if e.dst == n.id] for n in nodes})
    stray = [n.id for n in nodes if n.id not in fwd or n.id not in bwd]
    if stray:
        raise ValidationError("nodes not on an Input->Output path", stray)

    input_shape = spec.get("input_shape")
    if input_shape is not None:
        input_shape = tuple(int(v) for v in input_shape)
        if len(input_shape) != dim + 1 or min(input_shape) < 1:
            raise ValidationError(f"input_shape {input_shape} does not match dim {dim}")
    return ArchGraph(str(spec["name"]), int(dim), tuple(nodes), tuple(edges), mode, input_shape)


def _reach(start: str, adj: Mapping[str, list[str]]) -> set[str]:
    seen = {start}
    todo = deque([start])
    while todo:
        for m in adj[todo.popleft()]:
            if m not in seen:
                seen.add(m)
                todo.append(m)
    return seen


class GraphBuilder:
    """Imperative helper for writing templates: ``b.add(id, kind, inputs, **hyper)``."""

    def __init__(self, name: str, dim: int, input_shape: Sequence[int] | None = None):
        self.name = name
        self.dim = dim
        self.input_shape = list(input_shape) if input_shape is not None else None
        self.nodes: list[dict] = []
        self.edges: list[list] = []

    def add(self, nid: str, kind: str, inputs: Sequence[str] = (), **hyper) -> str:
        self.nodes.append({"id": nid, "kind": kind, "hyper": hyper})
        for port, src in enumerate(inputs):
            self.edges.append([src, nid, port])
        return nid

    def spec(self) -> dict:
        spec = {"name": self.name, "dim": self.dim, "mode": "standard", "nodes": self.nodes, "edges": self.edges}
        if self.input_shape is not None:
            spec["input_shape"] = self.input_shape
        return spec

    def build(self) -> ArchGraph:
        return build_graph(self.spec())


# ---------------------------------------------------------------- shapes


class Shape(NamedTuple):
    channels: int
    spatial: tuple[int, ...]

    def as_tuple(self) -> tuple[int, ...]:
        return (self.channels,) + tuple(self.spatial)

    def __str__(self) -> str:
        return "x".join(str(v) for v in self.as_tuple())


@dataclass(frozen=True)
class ShapeAnnotation:
    input_shape: Shape
    outputs: dict[str, Shape]  # src key (node id or "id:tap") -> shape
    edges: dict[Edge, Shape]
    inputs: dict[str, tuple[Shape, ...]]  # node id -> shapes by port
    downsample_in: dict[str, tuple[int, ...]]
    output_id: str

    @property
    def output_shape(self) -> Shape:
        return self.outputs[self.output_id]


def _is_pow2(v: int) -> bool:
    return v >= 1 and (v & (v - 1)) == 0


def _divide(node: BlockNode, spatial: tuple[int, ...], factor: Sequence[int], what: str) -> tuple[int, ...]:
    if any(f < 1 or s % f for s, f in zip(spatial, factor)):
        raise ShapeError(f"{what}: extent {spatial} not divisible by {tuple(factor)}", node.id)
    return tuple(s // f for s, f in zip(spatial, factor))


def node_output_shape(node: BlockNode, ins: Sequence[Shape], dim: int) -> Shape:
    """Shape rule of one node given its input shapes by port."""
    h = node.hyper
    k = node.kind
    if k == "Output":
        return ins[0]
    x = ins[0] if ins else None
    if k == "Conv":
        return Shape(h["out"], _divide(node, x.spatial, (h["stride"],) * dim, "conv stride"))
    if k == "DecoderConv":
        up = tuple(2 * s for s in x.spatial)
        skip = ins[1]
        if skip.spatial != up:
            raise ShapeError(f"skip {skip} does not match upsampled {Shape(h['out'], up)}", node.id)
        return Shape(h["out"], up)
    if k == "ViTTokenizer":
        return Shape(h["dim"], _divide(node, x.spatial, (h["patch"],) * dim, "patching"))
    if k == "LinearProjection":
        return Shape(h["out"], _divide(node, x.spatial, (h["patch"],) * dim, "patching"))
    if k == "ViTEncoder":
        if x.channels % h["heads"]:
            raise ShapeError(f"width {x.channels} not divisible by {h['heads']} heads", node.id)
        return x
    if k == "SwinStage":
        if x.channels % h["heads"]:
            raise ShapeError(f"width {x.channels} not divisible by {h['heads']} heads", node.id)
        w, _ = B.effective_window(x.spatial, h["window"], 0)
        _divide(node, x.spatial, w, "windowing")
        return x
    if k == "PatchMerging":
        return Shape(2 * x.channels, _divide(node, x.spatial, (2,) * dim, "patch merging"))
    if k == "Upsample":
        return Shape(h["out"], tuple(2 * s for s in x.spatial))
    if k == "Fusion":
        for other in ins[1:]:
            if other.spatial != x.spatial:
                raise ShapeError(f"fusion operands {x} and {other} differ spatially", node.id)
        return Shape(h["out"], x.spatial)
    if k == "SegHead":
        return Shape(h["out"], x.spatial)
    raise ShapeError(f"no shape rule for kind {k}", node.id)


def infer_shapes(g: ArchGraph, input_shape: Sequence[int] | None = None) -> ShapeAnnotation:
    """Annotate every edge; raises ShapeError at the first inconsistent node."""
    if input_shape is None:
        input_shape = g.input_shape
    if input_shape is None:
        raise UsageError(f"graph {g.name!r} has no canonical input_shape; pass one")
    input_shape = tuple(int(v) for v in input_shape)
    if len(input_shape) != g.dim + 1:
        raise ShapeError(f"input shape {input_shape} has rank {len(input_shape)}, graph is {g.dim}D (expects C + {g.dim} extents)")
    src_shape = Shape(input_shape[0], input_shape[1:])
    outputs: dict[str, Shape] = {}
    inputs: dict[str, tuple[Shape, ...]] = {}
    edge_shapes: dict[Edge, Shape] = {}
    down: dict[str, tuple[int, ...]] = {}
    for nid in g.topo_order:
        node = g.node(nid)
        in_edges = g.in_edges(nid)
        ins = tuple(outputs[e.src] for e in in_edges)
        for e, s in zip(in_edges, ins):
            edge_shapes[e] = s
        inputs[nid] = ins
        ref = src_shape if node.kind == "Input" else ins[0]
        factors = []
        for full, cur in zip(src_shape.spatial, ref.spatial):
            if full % cur or not _is_pow2(full // cur):
                raise ShapeError(f"feature extent {ref.spatial} is not a dyadic reduction of input {src_shape.spatial}", nid)
            factors.append(full // cur)
        down[nid] = tuple(factors)
        if node.kind == "Input":
            if node.hyper["channels"] != src_shape.channels:
                raise ShapeError(f"input has {src_shape.channels} channels, node expects {node.hyper['channels']}", nid)
            out = src_shape
        else:
            out = node_output_shape(node, ins, g.dim)
        outputs[nid] = out
        if node.kind == "ViTEncoder":
            for t in range(1, node.hyper["depth"] + 1):
                outputs[f"{nid}:{t}"] = out
    return ShapeAnnotation(src_shape, outputs, edge_shapes, inputs, down, g.output_id)


# ---------------------------------------------------------------- parameters


def node_param_shapes(node: BlockNode, ins: Sequence[Shape], dim: int) -> B.Shapes:
    h = node.hyper
    k = node.kind
    cin = ins[0].channels if ins else 0
    if k in ("Input", "Output"):
        return {}
    if k == "Conv":
        return B.conv_block_shapes(cin, h["out"], dim, h["kernel"])
    if k == "DecoderConv":
        return B.decoder_block_shapes(cin, ins[1].channels, h["out"], dim)
    if k == "ViTTokenizer":
        patch = (h["patch"],) * dim
        n = int(np.prod([s // h["patch"] for s in ins[0].spatial])) if h["pos_embed"] else None
        return B.patch_embed_shapes(cin, h["dim"], patch, n)
    if k == "LinearProjection":
        return B.linear_projection_shapes(cin, h["out"], (h["patch"],) * dim)
    if k == "ViTEncoder":
        return B.vit_encoder_shapes(cin, h["depth"], h["mlp_ratio"])
    if k == "SwinStage":
        return B.swin_stage_shapes(cin, h["depth"], h["mlp_ratio"])
    if k == "PatchMerging":
        return B.patch_merging_shapes(cin, dim)
    if k == "Upsample":
        return B.upsample_shapes(cin, h["out"], dim)
    if k == "Fusion":
        return B.fusion_shapes([s.channels for s in ins], h["out"], dim, h["kernel"])
    if k == "SegHead":
        return B.seg_head_shapes(cin, h["out"], dim)
    raise ShapeError(f"no parameter rule for kind {k}", node.id)


@dataclass(frozen=True)
class ParamCount:
    per_node: dict[str, int]
    total: int

    def millions(self) -> float:
        return self.total / 1e6


def count_params(g: ArchGraph, input_shape: Sequence[int] | None = None, ann: ShapeAnnotation | None = None) -> ParamCount:
    """Static parameter count from shape rules; no tensors are allocated."""
    if ann is None:
        ann = infer_shapes(g, input_shape)
    per = {n.id: B.param_count(node_param_shapes(n, ann.inputs[n.id], g.dim)) for n in g.nodes}
    return ParamCount(per, sum(per.values()))


def init_params(
    g: ArchGraph,
    rng: np.random.Generator,
    input_shape: Sequence[int] | None = None,
    dtype=np.float64,
) -> dict[str, B.BlockParams]:
    ann = infer_shapes(g, input_shape)
    params = {}
    for nid in g.topo_order:
        node = g.node(nid)
        shapes = node_param_shapes(node, ann.inputs[nid], g.dim)
        if shapes:
            params[nid] = B.BlockParams.init(node.kind, shapes, rng, dtype)
    return params


def parameters(params: Mapping[str, B.BlockParams]) -> list[Tensor]:
    return [t for nid in params for t in params[nid].parameters()]


# ---------------------------------------------------------------- interpreter


def execute(
    g: ArchGraph,
    x: Tensor,
    params: Mapping[str, B.BlockParams],
    ann: ShapeAnnotation | None = None,
) -> Tensor:
    """Evaluate ``g`` on ``x`` (``[C, S...]`` or ``[B, C, S...]``) in topological order."""
    batched = x.ndim == g.dim + 2
    if not batched and x.ndim != g.dim + 1:
        raise ShapeError(f"input of shape {x.shape} does not match a {g.dim}D graph")
    if ann is None:
        ann = infer_shapes(g, x.shape[-(g.dim + 1):])
    xb = x if batched else x.reshape((1,) + x.shape)
    dim = g.dim
    values: dict[str, Tensor] = {}
    for nid in g.topo_order:
        node = g.node(nid)
        h = node.hyper
        expected = node_param_shapes(node, ann.inputs[nid], dim)
        p = params.get(nid)
        if expected:
            if p is None:
                raise ShapeError("missing parameters", nid)
            p.check(expected, nid)
        ins = [values[e.src] for e in g.in_edges(nid)]
        k = node.kind
        if k == "Input":
            out = xb
        elif k == "Output":
            out = ins[0]
        elif k == "Conv":
            out = B.conv_block(ins[0], h["out"], p, stride=h["stride"])
        elif k == "DecoderConv":
            out = B.decoder_block(ins[0], ins[1], p)
        elif k == "ViTTokenizer":
            tg = B.patch_embed(ins[0], h["patch"], h["dim"], p, dim=dim)
            out = B.from_tokens(tg.tokens, tg.grid)
        elif k == "LinearProjection":
            out = B.linear_projection(ins[0], h["patch"], p, dim=dim)
        elif k == "ViTEncoder":
            taps = B.vit_encoder(ins[0], h["depth"], h["heads"], h["mlp_ratio"], p, dim=dim)
            for t, v in enumerate(taps, start=1):
                values[f"{nid}:{t}"] = v
            out = taps[-1]
        elif k == "SwinStage":
            out = B.swin_stage(ins[0], h["depth"], h["window"], h["heads"], p, dim=dim)
        elif k == "PatchMerging":
            out = B.patch_merging(ins[0], p, dim=dim)
        elif k == "Upsample":
            out = B.upsample(ins[0], p)
        elif k == "Fusion":
            out = B.fusion(ins, p)
        elif k == "SegHead":
            out = B.seg_head(ins[0], p)
        else:  # pragma: no cover - build_graph rejects unknown kinds
            raise ShapeError(f"cannot execute kind {k}", nid)
        values[nid] = out
    result = values[g.output_id]
    want = ann.outputs[g.output_id].as_tuple()
    if tuple(result.shape[1:]) != want:
        raise ShapeError(f"runtime output {result.shape[1:]} != annotated {want}", g.output_id)
    return result if batched else result.reshape(result.shape[1:])


# ---------------------------------------------------------------- lint


@dataclass(frozen=True)
class LintWarning:
    node_id: str
    factor: tuple[int, ...]
    message: str


def bottleneck_lint(g: ArchGraph, ann: ShapeAnnotation | None = None, threshold: int = 8) -> list[LintWarning]:
    """Flag ViT encoders whose feature maps were downsampled >= ``threshold``x before tokenization.

    The factor is taken at the tokenizer feeding the Transformer (patching
    itself is not counted) or at the Transformer when it reads a feature map
    directly.
    """
    if ann is None:
        ann = infer_shapes(g)
    warnings = []
    for n in g.nodes:
        if n.kind != "ViTEncoder":
            continue
        cur = n
        while True:
            src = g.node(g.in_edges(cur.id)[0].src_node)
            if src.kind == "ViTEncoder":
                cur = src
                continue
            break
        site = src if src.kind in ("ViTTokenizer", "LinearProjection") else n
        factor = ann.downsample_in[site.id]
        if min(factor) >= threshold:
            warnings.append(
                LintWarning(n.id, factor, f"{n.kind} {n.id} reads only {'x'.join(map(str, factor))}-downsampled features")
            )
    return warnings


# ---------------------------------------------------------------- serialization


def serialize(g: ArchGraph) -> str:
    """Canonical GraphSpec JSON text (one node / edge per line)."""
    spec = g.to_spec()
    head = {k: v for k, v in spec.items() if k not in ("nodes", "edges")}
    lines = ["{"]
    for k, v in head.items():
        lines.append(f"  {json.dumps(k)}: {json.dumps(v)},")
    lines.append('  "nodes": [')
    nodes = [f"    {json.dumps(n, sort_keys=False)}" for n in spec["nodes"]]
    lines.append(",\n".join(nodes))
    lines.append("  ],")
    lines.append('  "edges": [')
    lines.append(",\n".join(f"    {json.dumps(e)}" for e in spec["edges"]))
    lines.append("  ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def deserialize(text: str) -> ArchGraph:
    if not text.strip():
        raise ParseError("empty document", 1, 1)
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from None
    return build_graph(spec)


def describe(g: ArchGraph, ann: ShapeAnnotation | None = None) -> str:
    """Human-readable listing of nodes with input/output shapes and reduction factors."""
    if ann is None:
        ann = infer_shapes(g)
    counts = count_params(g, ann=ann)
    rows = [f"{g.name} ({g.dim}D, {g.mode}), input {ann.input_shape}"]
    for nid in g.topo_order:
        n = g.node(nid)
        ins = ", ".join(str(s) for s in ann.inputs[nid]) or "-"
        hyper = " ".join(f"{k}={v}" for k, v in n.hyper.items())
        down = "x".join(map(str, ann.downsample_in[nid]))
        rows.append(
            f"  {nid:<14} {n.kind:<16} in [{ins}] -> {ann.outputs[nid]}  down {down}  params {counts.per_node[nid]:,}  {hyper}"
        )
    rows.append(f"  total params {counts.total:,} ({counts.total / 1e6:.2f} M)")
    for w in bottleneck_lint(g, ann):
        rows.append(f"  warning: {w.message}")
    return "\n".join(rows)


def iter_transformer_nodes(g: ArchGraph) -> Iterable[BlockNode]:
    for nid in g.topo_order:
        n = g.node(nid)
        if n.kind in TRANSFORMER_KINDS:
            yield n
