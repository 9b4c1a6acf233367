"""Synthetic data, k-fold training and Table-2 style reporting.

Every random draw comes from an ``RngStream`` keyed by a stable hash of what
it is for (a data case, a fold split, a model/mode/fold training run), so a
seed and a config fix every byte of the emitted report.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Callable, Mapping, NamedTuple, Sequence

import numpy as np

from . import ir, zoo
from . import tensor as T
from .ablation import ablate, find_transformer_nodes, param_ratio, verify_compat
from .errors import ConfigError, GenerationError, NonFiniteError, TrainingDivergence, UsageError
from .metrics import LabelVolume, MetricResult, aggregate_folds, evaluate
from .tensor import RngStream, Tensor, stable_hash

MODES = ("S", "Abl")


def _tuple(v, cast=int) -> tuple:
    return tuple(cast(x) for x in v)


# ---------------------------------------------------------------- synthetic data


@dataclass
class SyntheticDatasetConfig:
    """Ellipsoid phantoms: class ``k`` has mean intensity ``k * intensity_offset``."""

    n_cases: int = 10
    grid: tuple[int, ...] = (32, 32, 32)
    spacing: tuple[float, ...] = (1.0, 1.0, 1.0)
    classes: int = 3
    shapes_per_class: tuple[int, int] = (1, 1)
    radius: tuple[float, float] = (4.0, 7.0)
    intensity_offset: float = 1.0
    noise_sd: float = 0.2
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        self.grid = _tuple(self.grid)
        self.spacing = _tuple(self.spacing, float)
        self.shapes_per_class = _tuple(self.shapes_per_class)
        self.radius = _tuple(self.radius, float)
        if self.n_cases < 1 or self.classes < 1:
            raise ConfigError("n_cases and classes must be >= 1")
        if len(self.spacing) != len(self.grid) or len(self.grid) not in (2, 3):
            raise ConfigError(f"grid {self.grid} and spacing {self.spacing} must both be 2D or 3D")
        lo, hi = self.shapes_per_class
        if not 1 <= lo <= hi:
            raise ConfigError(f"shapes_per_class must satisfy 1 <= lo <= hi, got {self.shapes_per_class}")
        rlo, rhi = self.radius
        if not 1.0 <= rlo <= rhi or 2 * rhi + 1 > min(self.grid):
            raise ConfigError(f"radius range {self.radius} does not fit grid {self.grid}")
        if self.noise_sd < 0 or self.intensity_offset <= 0:
            raise ConfigError("noise_sd must be >= 0 and intensity_offset > 0")

    @property
    def class_means(self) -> np.ndarray:
        return np.arange(self.classes + 1) * self.intensity_offset


class Case(NamedTuple):
    image: np.ndarray  # [1, *grid] float32
    label: LabelVolume


def _ellipsoid(grid: tuple[int, ...], center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    axes = np.ogrid[tuple(slice(0, n) for n in grid)]
    r2 = sum(((a - c) / r) ** 2 for a, c, r in zip(axes, center, radii))
    return r2 <= 1.0


def gen_case(cfg: SyntheticDatasetConfig, index: int) -> Case:
    rng = RngStream(cfg.seed, stable_hash("case", index)).generator()
    grid = cfg.grid
    labels = np.zeros(grid, dtype=np.int64)
    for k in range(1, cfg.classes + 1):
        count = int(rng.integers(cfg.shapes_per_class[0], cfg.shapes_per_class[1] + 1))
        for _ in range(count):
            for _attempt in range(cfg.max_retries):
                radii = rng.uniform(*cfg.radius, size=len(grid))
                center = np.array([rng.uniform(r, n - 1 - r) for r, n in zip(radii, grid)])
                blob = _ellipsoid(grid, center, radii)
                if not (labels[blob] != 0).any():
                    labels[blob] = k
                    break
            else:
                raise GenerationError(f"case {index}: could not place class {k} without overlap after {cfg.max_retries} tries")
    image = cfg.class_means[labels] + rng.normal(0.0, cfg.noise_sd, size=grid)
    return Case(image[None].astype(np.float32), LabelVolume(labels, cfg.spacing, cfg.classes))


def gen_dataset(cfg: SyntheticDatasetConfig) -> list[Case]:
    return [gen_case(cfg, i) for i in range(cfg.n_cases)]


class Fold(NamedTuple):
    train: list[int]
    val: list[int]


def kfold_split(n: int, k: int, seed: int = 0) -> list[Fold]:
    """Shuffle ``range(n)`` once and cut it into ``k`` near-equal validation sets."""
    if k < 2:
        raise UsageError(f"k must be >= 2, got {k}")
    if k > n:
        raise UsageError(f"cannot split {n} cases into {k} folds")
    order = RngStream(seed, stable_hash("kfold", n, k)).generator().permutation(n)
    parts = np.array_split(order, k)
    folds = []
    for i, val in enumerate(parts):
        train = np.concatenate([p for j, p in enumerate(parts) if j != i])
        folds.append(Fold(sorted(int(v) for v in train), sorted(int(v) for v in val)))
    return folds


# ---------------------------------------------------------------- optimisation


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 1
    lr: float = 1e-2
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_frac: float = 0.05
    patch_size: tuple[int, ...] | None = None  # None trains on the full grid
    tolerance_mm: float = 1.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.betas = _tuple(self.betas, float)
        if self.patch_size is not None:
            self.patch_size = _tuple(self.patch_size)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not (self.lr > 0 and 0 <= self.warmup_frac <= 1 and self.weight_decay >= 0):
            raise ConfigError("need lr > 0, weight_decay >= 0, 0 <= warmup_frac <= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


def lr_at(step: int, total_steps: int, base: float, warmup_frac: float) -> float:
    """Linear warmup over ``warmup_frac`` of all steps, then constant."""
    warm = math.ceil(warmup_frac * total_steps)
    if warm and step < warm:
        return base * (step + 1) / warm
    return base


class AdamW:
    """Adam with decoupled weight decay, applied to weight matrices and kernels only."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        T.zero_grad(self.params)

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= 1 - lr * self.weight_decay
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def one_hot(labels: np.ndarray, n: int, dtype) -> np.ndarray:
    """``[B, S...]`` integer labels to ``[B, n, S...]``."""
    return np.moveaxis(np.eye(n, dtype=dtype)[labels], -1, 1)


def dice_ce_loss(logits: Tensor, target: np.ndarray, smooth: float = 1e-5) -> Tensor:
    """Cross-entropy plus ``1 - soft Dice`` averaged over foreground channels.

    Dice sums run over the batch and all voxels (batch Dice).
    """
    log_p = T.log_softmax(logits, axis=1)
    ce = -T.mean(T.tsum(log_p * target, axis=1))
    probs = T.exp(log_p)
    axes = (0,) + tuple(range(2, logits.ndim))
    inter = T.tsum(probs * target, axis=axes)
    denom = T.tsum(probs, axis=axes) + target.sum(axis=axes)
    soft = (2.0 * inter + smooth) / (denom + smooth)
    return ce + (1.0 - T.mean(soft[1:]))


@dataclass
class FoldResult:
    fold: int
    metrics: MetricResult
    losses: list[float]
    params: dict = field(repr=False, default_factory=dict)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def _crop(rng: np.random.Generator, image: np.ndarray, labels: np.ndarray, patch: tuple[int, ...] | None):
    if patch is None or tuple(patch) == labels.shape:
        return image, labels
    start = [int(rng.integers(0, n - p + 1)) for n, p in zip(labels.shape, patch)]
    sl = tuple(slice(s, s + p) for s, p in zip(start, patch))
    return image[(slice(None),) + sl], labels[sl]


def predict(g: ir.ArchGraph, params, image: np.ndarray, ann: ir.ShapeAnnotation | None = None) -> np.ndarray:
    x = T.tensor(image[None].astype(_param_dtype(params)))
    logits = ir.execute(g, x, params, ann)
    return np.argmax(logits.data[0], axis=0)


def _param_dtype(params) -> np.dtype:
    for bp in params.values():
        for t in bp.parameters():
            return t.data.dtype
    return np.dtype(np.float64)


def _mean_metrics(results: Sequence[MetricResult]) -> MetricResult:
    out = MetricResult()
    for c in results[0].dsc:
        out.dsc[c] = float(np.mean([r.dsc[c] for r in results]))
        out.sdc[c] = float(np.mean([r.sdc[c] for r in results]))
    return out


def train_fold(
    g: ir.ArchGraph,
    data: Sequence[Case],
    fold: Fold,
    fold_index: int,
    tc: TrainConfig,
    log: Callable[[str], None] | None = None,
) -> FoldResult:
    if not fold.val:
        raise UsageError("fold has no validation cases")
    overlap = set(fold.train) & set(fold.val)
    if overlap:
        raise UsageError(f"validation cases {sorted(overlap)} also appear in training")
    dtype = np.dtype(tc.dtype)
    grid = data[0].label.shape
    n_classes = data[0].label.classes + 1
    full_shape = (data[0].image.shape[0],) + tuple(grid)
    ann_full = ir.infer_shapes(g, full_shape)
    if ann_full.output_shape.channels != n_classes:
        raise UsageError(f"model emits {ann_full.output_shape.channels} channels, data has {n_classes} labels")
    patch = tc.patch_size or tuple(grid)
    ann_train = ir.infer_shapes(g, (full_shape[0],) + tuple(patch))

    rng = RngStream(tc.seed, stable_hash(g.name, g.mode, fold_index)).generator()
    params = ir.init_params(g, rng, full_shape, dtype)
    opt = AdamW(ir.parameters(params), tc.lr, tc.betas, tc.eps, tc.weight_decay)
    per_epoch = math.ceil(len(fold.train) / tc.batch_size)
    total = tc.epochs * per_epoch

    losses: list[float] = []
    step = 0
    for epoch in range(tc.epochs):
        order = rng.permutation(fold.train)
        running = []
        for b in range(per_epoch):
            ids = order[b * tc.batch_size:(b + 1) * tc.batch_size]
            pairs = [_crop(rng, data[i].image, data[i].label.labels, tc.patch_size) for i in ids]
            x = T.tensor(np.stack([p[0] for p in pairs]).astype(dtype))
            y = one_hot(np.stack([p[1] for p in pairs]), n_classes, dtype)
            opt.zero_grad()
            try:
                loss = dice_ce_loss(ir.execute(g, x, params, ann_train), y)
                if not math.isfinite(loss.item()):
                    raise NonFiniteError("loss is not finite")
                T.backward(loss)
            except NonFiniteError as exc:
                raise TrainingDivergence(f"{g.name}/{g.mode}: {exc}", epoch, fold_index) from exc
            opt.step(lr_at(step, total, tc.lr, tc.warmup_frac))
            step += 1
            running.append(loss.item())
        losses.append(float(np.mean(running)))
        if log:
            log(f"{g.name}/{g.mode} fold {fold_index} epoch {epoch + 1}/{tc.epochs} loss {losses[-1]:.4f}")

    per_case = []
    for i in fold.val:
        pred = predict(g, params, data[i].image, ann_full)
        gt = data[i].label
        per_case.append(evaluate(LabelVolume(pred, gt.spacing, gt.classes), gt, tc.tolerance_mm))
    return FoldResult(fold_index, _mean_metrics(per_case), losses, params)


def train(
    g: ir.ArchGraph,
    data: Sequence[Case],
    folds: Sequence[Fold],
    tc: TrainConfig,
    log: Callable[[str], None] | None = None,
) -> list[FoldResult]:
    """Train one fresh network per fold and validate it on the held-out cases."""
    return [train_fold(g, data, f, i, tc, log) for i, f in enumerate(folds)]


# ---------------------------------------------------------------- experiments


@dataclass
class ModeResult:
    mode: str
    params: int
    dsc: list[float]  # per-fold foreground-mean, in [0, 1]
    sdc: list[float]
    final_loss: list[float] = field(default_factory=list)

    @classmethod
    def from_folds(cls, mode: str, params: int, folds: Sequence[FoldResult]) -> ModeResult:
        return cls(
            mode,
            params,
            [f.metrics.mean_dsc for f in folds],
            [f.metrics.mean_sdc for f in folds],
            [f.final_loss for f in folds],
        )

    def dsc_stats(self) -> tuple[float, float]:
        return aggregate_folds(self.dsc)

    def sdc_stats(self) -> tuple[float, float]:
        return aggregate_folds(self.sdc)


@dataclass
class ModelRow:
    model: str
    standard: ModeResult | None = None
    ablated: ModeResult | None = None
    ratio: float | None = None
    error: str | None = None

    def diff(self) -> tuple[float, float] | None:
        """Difference of fold means ``S - Abl`` for DSC and SDC."""
        if self.standard is None or self.ablated is None:
            return None
        return (
            self.standard.dsc_stats()[0] - self.ablated.dsc_stats()[0],
            self.standard.sdc_stats()[0] - self.ablated.sdc_stats()[0],
        )


@dataclass
class ExperimentReport:
    rows: list[ModelRow] = field(default_factory=list)

    def row(self, model: str) -> ModelRow:
        for r in self.rows:
            if r.model == model:
                return r
        raise KeyError(model)

    def to_json(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> ExperimentReport:
        rows = []
        for r in obj.get("rows", []):
            r = dict(r)
            for key in ("standard", "ablated"):
                if r.get(key) is not None:
                    r[key] = ModeResult(**r[key])
            rows.append(ModelRow(**r))
        return cls(rows)


def graph_for(model: str, mode: str, n_classes: int, input_shape: Sequence[int]) -> ir.ArchGraph:
    g = zoo.build(model, "toy", n_classes)
    if mode == "S":
        return g
    if mode != "Abl":
        raise UsageError(f"mode must be one of {MODES}, got {mode!r}")
    return ablate(g, input_shape)


def run_experiment(
    models: Sequence[str],
    modes: Sequence[str] = MODES,
    dataset: SyntheticDatasetConfig | None = None,
    tc: TrainConfig | None = None,
    k: int = 5,
    log: Callable[[str], None] | None = None,
) -> ExperimentReport:
    """Train each model in each requested mode over ``k`` folds and collect a report.

    Models without Transformer blocks get no ablated counterpart. A model whose
    ablated graph fails the compatibility check gets an error row instead.
    """
    dataset = dataset or SyntheticDatasetConfig()
    tc = tc or TrainConfig()
    for m in modes:
        if m not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got {m!r}")
    data = gen_dataset(dataset)
    folds = kfold_split(len(data), k, dataset.seed)
    shape = (1,) + dataset.grid
    report = ExperimentReport()
    for model in models:
        g = zoo.build(model, "toy", dataset.classes)
        if g.dim != len(dataset.grid):
            raise UsageError(f"{model} is {g.dim}D but the dataset grid is {len(dataset.grid)}D")
        row = ModelRow(model)
        report.rows.append(row)
        a = None
        if find_transformer_nodes(g):
            a = ablate(g, shape)
            compat = verify_compat(g, a, shape)
            if not compat.ok:
                row.error = compat.render()
                continue
            row.ratio = param_ratio(g, a, shape)
        if "S" in modes:
            row.standard = ModeResult.from_folds("S", ir.count_params(g, shape).total, train(g, data, folds, tc, log))
        if "Abl" in modes and a is not None:
            row.ablated = ModeResult.from_folds("Abl", ir.count_params(a, shape).total, train(a, data, folds, tc, log))
    return report


# ---------------------------------------------------------------- rendering


def round_half_away(x: float, places: int = 1) -> str:
    """Round via the shortest decimal repr, ties away from zero."""
    if not math.isfinite(x):
        return "-"
    q = Decimal(1).scaleb(-places)
    out = Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP)
    if out == 0:
        out = abs(out)
    return f"{out:.{places}f}"


def fmt_mean_sd(mean: float, sd: float) -> str:
    if not math.isfinite(sd):
        return round_half_away(mean)
    return f"{round_half_away(mean)} ± {round_half_away(sd)}"


TEXT_HEADER = ("Model", "DSC", "SDC", "Pars(Mi)")
CSV_FIELDS = ("model", "mode", "dsc_mean", "dsc_sd", "sdc_mean", "sdc_sd", "params_m", "ratio", "error")


def _text_rows(r: ExperimentReport) -> list[tuple[str, str, str, str]]:
    out = []
    for row in r.rows:
        if row.error:
            out.append((row.model, "error", "error", "-"))
            continue
        for label, res in ((row.model, row.standard), ("  Abl.", row.ablated)):
            if res is None:
                continue
            dm, ds = res.dsc_stats()
            sm, ss = res.sdc_stats()
            out.append((label, fmt_mean_sd(100 * dm, 100 * ds), fmt_mean_sd(100 * sm, 100 * ss), round_half_away(res.params / 1e6, 2)))
        diff = row.diff()
        if diff is not None or row.ratio is not None:
            d, s = (("-", "-") if diff is None else (round_half_away(100 * diff[0]), round_half_away(100 * diff[1])))
            ratio = "-" if row.ratio is None else round_half_away(row.ratio, 2)
            out.append(("  Diff. mu or Ratio", d, s, ratio))
    return out


def _emit_text(r: ExperimentReport) -> str:
    rows = [TEXT_HEADER] + _text_rows(r)
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = []
    for j, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if j == 0:
            lines.append("-" * len(lines[0]))
    for row in r.rows:
        if row.error:
            lines.append(f"# {row.model}: {row.error.splitlines()[0]}")
    return "\n".join(lines) + "\n"


def _csv_record(model: str, mode: str, res: ModeResult | None = None, **extra) -> dict:
    rec = {f: "" for f in CSV_FIELDS}
    rec.update(model=model, mode=mode)
    if res is not None:
        dm, ds = res.dsc_stats()
        sm, ss = res.sdc_stats()
        rec.update(dsc_mean=repr(dm), dsc_sd=repr(ds), sdc_mean=repr(sm), sdc_sd=repr(ss), params_m=repr(res.params / 1e6))
    rec.update({k: v for k, v in extra.items() if v is not None})
    return rec


def _emit_csv(r: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in r.rows:
        if row.error:
            w.writerow(_csv_record(row.model, "error", error=row.error))
            continue
        if row.standard is not None:
            w.writerow(_csv_record(row.model, "S", row.standard))
        if row.ablated is not None:
            w.writerow(_csv_record(row.model, "Abl", row.ablated))
        diff = row.diff()
        if diff is not None:
            w.writerow(_csv_record(row.model, "Diff", dsc_mean=repr(diff[0]), sdc_mean=repr(diff[1])))
        if row.ratio is not None:
            w.writerow(_csv_record(row.model, "Ratio", ratio=repr(row.ratio)))
    return buf.getvalue()


def emit_report(r: ExperimentReport, format: str = "text") -> str:
    if format == "text":
        return _emit_text(r)
    if format == "csv":
        return _emit_csv(r)
    raise UsageError(f"format must be text or csv, got {format!r}")


# ---------------------------------------------------------------- config files


def _from_mapping(cls, obj: Mapping[str, Any] | None):
    obj = dict(obj or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    try:
        return cls(**obj)
    except TypeError as exc:
        raise ConfigError(f"bad {cls.__name__}: {exc}") from exc


def load_config(text: str | None) -> tuple[SyntheticDatasetConfig, TrainConfig]:
    """Parse ``{"dataset": {...}, "train": {...}}``; missing sections take defaults."""
    if not text:
        return SyntheticDatasetConfig(), TrainConfig()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict) or set(obj) - {"dataset", "train"}:
        raise ConfigError('config must be an object with optional "dataset" and "train" keys')
    return _from_mapping(SyntheticDatasetConfig, obj.get("dataset")), _from_mapping(TrainConfig, obj.get("train"))


def dump_config(ds: SyntheticDatasetConfig, tc: TrainConfig) -> str:
    return json.dumps({"dataset": asdict(ds), "train": asdict(tc)}, indent=2, sort_keys=True)
