"""Transformer ablation as a graph rewrite.

ViT encoders are deleted outright: every consumer of the encoder (including
intermediate-depth taps) is re-routed to the encoder's input, and the
tokenizer feeding it becomes a plain per-patch linear projection without
positional embedding. Swin stages become a per-position linear projection of
the same width; PatchMerging nodes around them are left in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .errors import CompatError, ShapeError, UsageError
from .ir import (
    TRANSFORMER_KINDS,
    ArchGraph,
    BlockNode,
    Shape,
    build_graph,
    count_params,
    infer_shapes,
)

REPLACEMENT = {
    "ViTEncoder": "LinearProjectionTokenizer",
    "SwinStage": "LinearProjection+PatchMerging",
}


@dataclass(frozen=True)
class AblationRewrite:
    target_kind: str
    matched_nodes: tuple[str, ...]

    @property
    def replacement(self) -> str:
        return REPLACEMENT[self.target_kind]


def find_transformer_nodes(g: ArchGraph) -> list[str]:
    return [nid for nid in g.topo_order if g.node(nid).kind in TRANSFORMER_KINDS]


def plan(g: ArchGraph) -> list[AblationRewrite]:
    found = find_transformer_nodes(g)
    return [
        AblationRewrite(kind, tuple(n for n in found if g.node(n).kind == kind))
        for kind in TRANSFORMER_KINDS
        if any(g.node(n).kind == kind for n in found)
    ]


def infer_channels(g: ArchGraph) -> dict[str, int]:
    """Output channel count per node, without spatial information."""
    ch: dict[str, int] = {}
    for nid in g.topo_order:
        n = g.node(nid)
        h = n.hyper
        ins = [ch[e.src_node] for e in g.in_edges(nid)]
        if n.kind == "Input":
            ch[nid] = h["channels"]
        elif n.kind in ("Output", "ViTEncoder", "SwinStage"):
            ch[nid] = ins[0]
        elif n.kind == "PatchMerging":
            ch[nid] = 2 * ins[0]
        elif n.kind == "ViTTokenizer":
            ch[nid] = h["dim"]
        else:
            ch[nid] = h["out"]
    return ch


def ablate(g: ArchGraph, input_shape: Sequence[int] | None = None) -> ArchGraph:
    """Return a new graph with every Transformer replaced by its compensatory operator.

    ``g`` is never modified. A graph without Transformer nodes is returned as is.
    """
    targets = find_transformer_nodes(g)
    if not targets:
        return g
    channels = infer_channels(g)

    redirect: dict[str, str] = {}
    removed: set[str] = set()
    tokenizers: set[str] = set()

    def resolve(src: str) -> str:
        while src in redirect:
            src = redirect[src]
        return src

    replaced: dict[str, BlockNode] = {}
    for nid in targets:
        node = g.node(nid)
        if node.kind == "ViTEncoder":
            upstream = resolve(g.in_edges(nid)[0].src)
            redirect[nid] = upstream
            for t in range(1, node.hyper["depth"] + 1):
                redirect[f"{nid}:{t}"] = upstream
            removed.add(nid)
            up_node = g.node(upstream.partition(":")[0])
            if up_node.kind == "ViTTokenizer":
                tokenizers.add(up_node.id)
        else:
            replaced[nid] = BlockNode(nid, "LinearProjection", {"out": channels[g.in_edges(nid)[0].src_node], "patch": 1})

    for tid in tokenizers:
        h = g.node(tid).hyper
        replaced[tid] = BlockNode(tid, "LinearProjection", {"out": h["dim"], "patch": h["patch"]})

    nodes = [replaced.get(n.id, n).to_json() for n in g.nodes if n.id not in removed]
    edges = []
    for e in g.edges:
        if e.dst in removed:
            continue
        edges.append([resolve(e.src), e.dst, e.port])
    spec = {"name": g.name, "dim": g.dim, "mode": "ablated", "nodes": nodes, "edges": edges}
    if g.input_shape is not None:
        spec["input_shape"] = list(g.input_shape)
    out = build_graph(spec)

    shape = input_shape if input_shape is not None else g.input_shape
    if shape is not None:
        try:
            infer_shapes(out, shape)
        except ShapeError as exc:
            raise CompatError(f"ablated graph {g.name!r} fails shape inference: {exc}") from exc
    return out


@dataclass
class CompatReport:
    sites: list[str]
    pairs: list[tuple[str, Shape | None, Shape | None]] = field(default_factory=list)
    error: str | None = None

    @property
    def mismatches(self) -> list[tuple[str, Shape | None, Shape | None]]:
        return [p for p in self.pairs if p[1] != p[2]]

    @property
    def ok(self) -> bool:
        return self.error is None and not self.mismatches

    def render(self) -> str:
        lines = [f"compat: {'ok' if self.ok else 'FAILED'}; rewrite sites: {', '.join(self.sites) or '-'}"]
        if self.error:
            lines.append(f"  error: {self.error}")
        for label, a, b in self.pairs:
            mark = "  " if a == b else "!!"
            lines.append(f"  {mark} {label:<28} {a} -> {b}")
        return "\n".join(lines)


def _descendants(g: ArchGraph, roots: Sequence[str]) -> set[str]:
    out: set[str] = set()
    todo = list(roots)
    while todo:
        nid = todo.pop()
        for e in g.out_edges(nid):
            if e.dst not in out:
                out.add(e.dst)
                todo.append(e.dst)
    return out


def verify_compat(original: ArchGraph, ablated: ArchGraph, input_shape: Sequence[int] | None = None) -> CompatReport:
    """Compare every consumer port downstream of a rewrite site in both graphs."""
    sites = find_transformer_nodes(original)
    report = CompatReport(sites)
    try:
        ann_o = infer_shapes(original, input_shape)
        ann_a = infer_shapes(ablated, input_shape)
    except ShapeError as exc:
        report.error = str(exc)
        return report
    down = _descendants(original, sites)
    for nid in ablated.topo_order:
        if nid not in down or nid not in original.by_id:
            continue
        ins_o = ann_o.inputs[nid]
        ins_a = ann_a.inputs[nid]
        for port in range(max(len(ins_o), len(ins_a))):
            a = ins_o[port] if port < len(ins_o) else None
            b = ins_a[port] if port < len(ins_a) else None
            report.pairs.append((f"{nid}[{port}]", a, b))
    report.pairs.append(("output", ann_o.output_shape, ann_a.output_shape))
    return report


def param_ratio(original: ArchGraph, ablated: ArchGraph, input_shape: Sequence[int] | None = None) -> float:
    """``#params(ablated) / #params(original)``."""
    n_orig = count_params(original, input_shape).total
    if n_orig == 0:
        raise UsageError(f"graph {original.name!r} has no parameters; ratio undefined")
    return count_params(ablated, input_shape).total / n_orig
