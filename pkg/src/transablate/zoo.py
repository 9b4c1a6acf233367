"""Graph templates for the surveyed segmentation networks.

Each template is written once and instantiated at two scales. ``paper`` uses
each network's default published configuration (for static parameter
accounting); ``toy`` divides channel widths by 4 and depths by 2 so the
graph can be executed and trained on a laptop CPU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

from .errors import UsageError
from .ir import ArchGraph, GraphBuilder

SCALES = ("paper", "toy")
DEFAULT_CLASSES = 3  # foreground structures; the head adds background


@dataclass(frozen=True)
class ModelTemplate:
    model_id: str
    dim: int
    topology: str
    builder: Callable[["_Scale", int], ArchGraph]

    def build(self, scale: str = "paper", n_classes: int = DEFAULT_CLASSES) -> ArchGraph:
        if scale not in SCALES:
            raise UsageError(f"scale must be one of {SCALES}, got {scale!r}")
        return self.builder(_Scale(scale, self.dim), n_classes)


class _Scale:
    def __init__(self, name: str, dim: int):
        self.name = name
        self.dim = dim
        self.toy = name == "toy"

    def ch(self, c: int) -> int:
        return max(1, c // 4) if self.toy else c

    def depth(self, d: int) -> int:
        return max(1, d // 2) if self.toy else d

    @staticmethod
    def heads(width: int, heads: int) -> int:
        while width % heads:
            heads -= 1
        return heads

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.dim == 3:
            return (1,) + ((32,) * 3 if self.toy else (128,) * 3)
        return (1,) + ((64,) * 2 if self.toy else (512,) * 2)

    def builder(self, name: str) -> GraphBuilder:
        b = GraphBuilder(name, self.dim, self.input_shape)
        b.add("input", "Input", channels=self.input_shape[0])
        return b


def _finish(b: GraphBuilder, last: str, n_classes: int) -> ArchGraph:
    b.add("head", "SegHead", [last], out=n_classes + 1)
    b.add("output", "Output", ["head"])
    return b.build()


# ---------------------------------------------------------------- templates


def _unetr(s: _Scale, n_classes: int) -> ArchGraph:
    b = s.builder("unetr")
    d = s.ch(768)
    depth = s.depth(12)
    patch = 8 if s.toy else 16
    fs = s.ch(16)
    levels = int(math.log2(patch))
    b.add("tok", "ViTTokenizer", ["input"], patch=patch, dim=d)
    b.add("vit", "ViTEncoder", ["tok"], depth=depth, heads=s.heads(d, 12))
    b.add("enc1", "Conv", ["input"], out=fs)
    skips = {0: "enc1"}
    for i in range(1, levels):
        src = f"vit:{depth * i // levels}"
        for j in range(levels - i):
            src = b.add(f"enc{i + 1}_up{j + 1}", "Upsample", [src], out=fs * 2**i)
        skips[i] = src
    cur = "vit"
    for i in range(levels - 1, -1, -1):
        cur = b.add(f"dec{i + 1}", "DecoderConv", [cur, skips[i]], out=fs * 2**i)
    return _finish(b, cur, n_classes)


def _swinunetr(s: _Scale, n_classes: int) -> ArchGraph:
    b = s.builder("swinunetr")
    fs = s.ch(24)
    depths = [s.depth(2)] * 4
    heads = (3, 6, 12, 24)
    window = 4
    b.add("embed", "LinearProjection", ["input"], out=fs, patch=2)
    cur = "embed"
    merged = []
    for i in range(4):
        c = fs * 2**i
        b.add(f"stage{i + 1}", "SwinStage", [cur], depth=depths[i], window=window, heads=s.heads(c, heads[i]))
        cur = b.add(f"merge{i + 1}", "PatchMerging", [f"stage{i + 1}"])
        merged.append(cur)
    b.add("enc1", "Conv", ["input"], out=fs)
    b.add("enc2", "Conv", ["embed"], out=fs)
    b.add("enc3", "Conv", [merged[0]], out=2 * fs)
    b.add("enc4", "Conv", [merged[1]], out=4 * fs)
    b.add("enc10", "Conv", [merged[3]], out=16 * fs)
    b.add("dec5", "DecoderConv", ["enc10", merged[2]], out=8 * fs)
    b.add("dec4", "DecoderConv", ["dec5", "enc4"], out=4 * fs)
    b.add("dec3", "DecoderConv", ["dec4", "enc3"], out=2 * fs)
    b.add("dec2", "DecoderConv", ["dec3", "enc2"], out=fs)
    b.add("dec1", "DecoderConv", ["dec2", "enc1"], out=fs)
    return _finish(b, "dec1", n_classes)


def _cnn_encoder(b: GraphBuilder, s: _Scale, widths, first_stride: int = 1) -> list[str]:
    names = []
    cur = "input"
    for i, w in enumerate(widths):
        stride = first_stride if i == 0 else 2
        cur = b.add(f"c{i + 1}", "Conv", [cur], out=s.ch(w), stride=stride)
        names.append(cur)
    return names


def _transbts(s: _Scale, n_classes: int) -> ArchGraph:
    b = s.builder("transbts")
    widths = (32, 64, 128, 256)
    c = _cnn_encoder(b, s, widths)
    d = s.ch(512)
    b.add("tok", "ViTTokenizer", [c[3]], patch=1, dim=d)
    b.add("vit", "ViTEncoder", ["tok"], depth=s.depth(4), heads=s.heads(d, 8), mlp_ratio=8.0)
    b.add("post", "Conv", ["vit"], out=s.ch(256))
    b.add("dec3", "DecoderConv", ["post", c[2]], out=s.ch(128))
    b.add("dec2", "DecoderConv", ["dec3", c[1]], out=s.ch(64))
    b.add("dec1", "DecoderConv", ["dec2", c[0]], out=s.ch(32))
    return _finish(b, "dec1", n_classes)


def _transunet(s: _Scale, n_classes: int) -> ArchGraph:
    b = s.builder("transunet")
    widths = (64, 128, 256, 512)
    c = _cnn_encoder(b, s, widths)
    d = s.ch(768)
    b.add("tok", "ViTTokenizer", [c[3]], patch=2, dim=d)
    b.add("vit", "ViTEncoder", ["tok"], depth=s.depth(12), heads=s.heads(d, 12))
    b.add("dec4", "DecoderConv", ["vit", c[3]], out=s.ch(256))
    b.add("dec3", "DecoderConv", ["dec4", c[2]], out=s.ch(128))
    b.add("dec2", "DecoderConv", ["dec3", c[1]], out=s.ch(64))
    b.add("dec1", "DecoderConv", ["dec2", c[0]], out=s.ch(16))
    return _finish(b, "dec1", n_classes)


def _cotr(s: _Scale, n_classes: int) -> ArchGraph:
    b = s.builder("cotr")
    widths = (64, 192, 384, 384)
    c = _cnn_encoder(b, s, widths, first_stride=2)
    d = s.ch(384)
    b.add("tok", "ViTTokenizer", [c[3]], patch=1, dim=d)
    b.add("vit", "ViTEncoder", ["tok"], depth=s.depth(6), heads=s.heads(d, 6))
    b.add("bridge", "Fusion", [c[3], "vit"], out=s.ch(384), kernel=1)
    b.add("dec3", "DecoderConv", ["bridge", c[2]], out=s.ch(384))
    b.add("dec2", "DecoderConv", ["dec3", c[1]], out=s.ch(192))
    b.add("dec1", "DecoderConv", ["dec2", c[0]], out=s.ch(64))
    b.add("up", "Upsample", ["dec1"], out=s.ch(32))
    return _finish(b, "up", n_classes)


def _nnformer(s: _Scale, n_classes: int) -> ArchGraph:
    b = s.builder("nnformer")
    C = s.ch(96)
    depth = s.depth(2)
    heads = (3, 6, 12, 24)
    window = 4
    b.add("embed", "LinearProjection", ["input"], out=C, patch=4)
    cur = "embed"
    enc = []
    for i in range(3):
        c = C * 2**i
        enc.append(b.add(f"enc{i + 1}", "SwinStage", [cur], depth=depth, window=window, heads=s.heads(c, heads[i])))
        cur = b.add(f"merge{i + 1}", "PatchMerging", [enc[-1]])
    cur = b.add("bottleneck", "SwinStage", [cur], depth=depth, window=window, heads=s.heads(8 * C, heads[3]))
    for i in range(2, -1, -1):
        c = C * 2**i
        b.add(f"up{i + 1}", "Upsample", [cur], out=c)
        b.add(f"skip{i + 1}", "Fusion", [f"up{i + 1}", enc[i]], out=c, kernel=1)
        cur = b.add(f"dec{i + 1}", "SwinStage", [f"skip{i + 1}"], depth=depth, window=window, heads=s.heads(c, heads[i]))
    b.add("expand1", "Upsample", [cur], out=s.ch(48))
    b.add("expand2", "Upsample", ["expand1"], out=s.ch(24))
    return _finish(b, "expand2", n_classes)


def _transfuse(s: _Scale, n_classes: int) -> ArchGraph:
    b = s.builder("transfuse")
    d = s.ch(384)
    b.add("tok", "ViTTokenizer", ["input"], patch=16, dim=d)
    b.add("vit", "ViTEncoder", ["tok"], depth=s.depth(8), heads=s.heads(d, 6))
    c = _cnn_encoder(b, s, (64, 128, 256, 512), first_stride=2)
    b.add("fuse", "Fusion", ["vit", c[3]], out=s.ch(256), kernel=3)
    b.add("dec3", "DecoderConv", ["fuse", c[2]], out=s.ch(128))
    b.add("dec2", "DecoderConv", ["dec3", c[1]], out=s.ch(64))
    b.add("dec1", "DecoderConv", ["dec2", c[0]], out=s.ch(32))
    b.add("up", "Upsample", ["dec1"], out=s.ch(16))
    return _finish(b, "up", n_classes)


def _utnet(s: _Scale, n_classes: int) -> ArchGraph:
    b = s.builder("utnet")
    depth = s.depth(1)

    def attend(src: str, name: str, width: int) -> str:
        b.add(f"{name}_tok", "ViTTokenizer", [src], patch=1, dim=width, pos_embed=0)
        return b.add(f"{name}_att", "ViTEncoder", [f"{name}_tok"], depth=depth, heads=s.heads(width, 4))

    b.add("c1", "Conv", ["input"], out=s.ch(32))
    b.add("c2", "Conv", ["c1"], out=s.ch(64), stride=2)
    b.add("c3", "Conv", ["c2"], out=s.ch(128), stride=2)
    a3 = attend("c3", "e3", s.ch(128))
    b.add("c4", "Conv", [a3], out=s.ch(256), stride=2)
    a4 = attend("c4", "e4", s.ch(256))
    b.add("c5", "Conv", [a4], out=s.ch(512), stride=2)
    b.add("dec4", "DecoderConv", ["c5", a4], out=s.ch(256))
    ad4 = attend("dec4", "d4", s.ch(256))
    b.add("dec3", "DecoderConv", [ad4, a3], out=s.ch(128))
    ad3 = attend("dec3", "d3", s.ch(128))
    b.add("dec2", "DecoderConv", [ad3, "c2"], out=s.ch(64))
    b.add("dec1", "DecoderConv", ["dec2", "c1"], out=s.ch(32))
    return _finish(b, "dec1", n_classes)


def _conv_baseline(s: _Scale, n_classes: int) -> ArchGraph:
    b = s.builder("conv_baseline")
    widths = (32, 64, 128, 256, 320)
    c = _cnn_encoder(b, s, widths)
    cur = c[-1]
    for i in range(len(widths) - 2, -1, -1):
        cur = b.add(f"dec{i + 1}", "DecoderConv", [cur, c[i]], out=s.ch(widths[i]))
    return _finish(b, cur, n_classes)


TEMPLATES: dict[str, ModelTemplate] = {
    t.model_id: t
    for t in (
        ModelTemplate("unetr", 3, "encoder_replacement", _unetr),
        ModelTemplate("swinunetr", 3, "encoder_replacement", _swinunetr),
        ModelTemplate("transbts", 3, "bottleneck", _transbts),
        ModelTemplate("transunet", 2, "bottleneck", _transunet),
        ModelTemplate("transfuse", 2, "dual_branch", _transfuse),
        ModelTemplate("cotr", 3, "dual_branch", _cotr),
        ModelTemplate("nnformer", 3, "pure_transformer", _nnformer),
        ModelTemplate("utnet", 2, "interleaved", _utnet),
        ModelTemplate("conv_baseline", 3, "convolutional", _conv_baseline),
    )
}


def list_models() -> list[tuple[str, int, str]]:
    return [(t.model_id, t.dim, t.topology) for t in TEMPLATES.values()]


def get_template(model_id: str) -> ModelTemplate:
    try:
        return TEMPLATES[model_id]
    except KeyError:
        raise UsageError(f"unknown model {model_id!r}; choose from {', '.join(TEMPLATES)}") from None


def build(model_id: str, scale: str = "paper", n_classes: int = DEFAULT_CLASSES) -> ArchGraph:
    return get_template(model_id).build(scale, n_classes)


def canonical_input(model_id: str, scale: str = "paper") -> tuple[int, ...]:
    return _Scale(scale, get_template(model_id).dim).input_shape
