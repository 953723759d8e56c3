"""Synthetic data, SGD training loop, evaluation and sweeps."""

from __future__ import annotations

import colorsys
import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, NumericError
from .hierarchy import EmotionHierarchy, hierarchical_confusion, leaves_to_paths, violation_counts
from .model import MdanConfig, MdanModel, fuse_predictions

logger = logging.getLogger(__name__)

PATTERNS = ("stripes", "checker", "dots", "gradient", "noise", "rings")


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a procedurally generated hierarchical image set.

    Level-1 classes get a hue band (the first class warm, the next cool,
    and so on around the colour wheel).  Level-2 classes get a texture from
    :data:`PATTERNS`; with more than six classes the pattern repeats at a
    higher frequency.  Level-3 classes vary the texture's orientation and
    scale.  Either ``samples_per_class`` or ``n_samples`` (spread over the
    leaves round-robin) sets the size.
    """

    image_size: int = 64
    samples_per_class: int | None = 10
    n_samples: int | None = None
    seed: int = 0
    noise: float = 0.04


@dataclass
class SyntheticDataset:
    images: np.ndarray  # N × 3 × H × W, uint8
    paths: np.ndarray  # N × depth label paths
    hierarchy: EmotionHierarchy

    @property
    def leaves(self) -> np.ndarray:
        return self.paths[:, -1]

    def __len__(self):
        return len(self.paths)

    def split(self, n_first: int) -> tuple["SyntheticDataset", "SyntheticDataset"]:
        return (SyntheticDataset(self.images[:n_first], self.paths[:n_first], self.hierarchy),
                SyntheticDataset(self.images[n_first:], self.paths[n_first:], self.hierarchy))


def _pattern(kind: int, size: int, rng: np.random.Generator, freq: float, angle: float | None) -> np.ndarray:
    # Patterns differ in spatial scale and local contrast so they stay apart after global pooling.
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    unit = size / 64.0 / freq
    theta = rng.uniform(-0.3, 0.3) if angle is None else angle + rng.uniform(-0.1, 0.1)
    phase = rng.uniform(0, 2 * np.pi)
    along = xx * np.cos(theta) + yy * np.sin(theta)
    across = -xx * np.sin(theta) + yy * np.cos(theta)
    name = PATTERNS[kind]
    if name == "stripes":
        return 0.5 + 0.5 * np.sin(2 * np.pi * along / (4.0 * unit) + phase)
    if name == "checker":
        p = 24.0 * unit
        return (np.sin(2 * np.pi * along / p + phase) * np.sin(2 * np.pi * across / p + phase) > 0).astype(float)
    if name == "dots":
        p = 12.0 * unit
        ox, oy = rng.uniform(0, p, size=2)
        dx = (xx + ox) % p - p / 2
        dy = (yy + oy) % p - p / 2
        return (np.hypot(dx, dy) < 2.5 * unit).astype(float)
    if name == "gradient":
        ramp = along - along.min()
        ramp = ramp / ramp.max()
        return ramp if rng.random() < 0.5 else 1.0 - ramp
    if name == "noise":
        return rng.random((size, size))
    cx, cy = rng.uniform(0.3 * size, 0.7 * size, size=2)
    return 0.5 + 0.5 * np.sin(2 * np.pi * np.hypot(xx - cx, yy - cy) / (10.0 * unit) + phase)


def render_sample(path, hierarchy: EmotionHierarchy, size: int, rng: np.random.Generator,
                  noise: float = 0.04) -> np.ndarray:
    """Draw one 3 × size × size uint8 image for a label path."""
    k1 = hierarchy.level_sizes[0]
    hue = (0.03 + path[0] / k1 + rng.uniform(-0.25, 0.25) / k1) % 1.0
    sat = rng.uniform(0.65, 0.9)
    if hierarchy.depth >= 2:
        k2 = int(path[1])
        kind, freq = k2 % len(PATTERNS), 1.0 + 0.5 * (k2 // len(PATTERNS))
    else:
        kind, freq = int(rng.integers(len(PATTERNS))), 1.0
    angle = None
    if hierarchy.depth >= 3:
        sib = hierarchy.children_of(3, int(path[1])).index(int(path[2]))
        angle = sib * np.pi / 8
        freq *= 1.0 + 0.12 * sib
    val = 0.3 + 0.65 * _pattern(kind, size, rng, freq, angle)
    rgb = np.asarray(colorsys.hsv_to_rgb(hue, sat, 1.0))
    img = rgb[:, None, None] * val[None] + rng.normal(0.0, noise, size=(3, size, size))
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def generate_dataset(spec: SyntheticSpec, hierarchy: EmotionHierarchy) -> SyntheticDataset:
    """Balanced, seed-deterministic synthetic dataset; every label path is hierarchy-consistent."""
    if hierarchy.depth > 3:
        raise ConfigError(f"synthetic rules cover depth ≤ 3, got {hierarchy.depth}")
    n_leaves = hierarchy.level_sizes[-1]
    if spec.n_samples is not None:
        n = spec.n_samples
    elif spec.samples_per_class is not None:
        n = spec.samples_per_class * n_leaves
    else:
        raise ConfigError("set samples_per_class or n_samples")
    rng = np.random.default_rng(spec.seed)
    leaves = rng.permutation(np.arange(n) % n_leaves)
    paths = leaves_to_paths(hierarchy, leaves)
    images = np.stack([render_sample(p, hierarchy, spec.image_size, rng, spec.noise) for p in paths]) \
        if n else np.zeros((0, 3, spec.image_size, spec.image_size), dtype=np.uint8)
    return SyntheticDataset(images, paths, hierarchy)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation of uint8 images scaled to [0, 1]."""
    x = images.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    """uint8 N × 3 × H × W → zero-mean unit-variance float64 per channel."""
    mean = np.asarray(mean, dtype=np.float64)[:, None, None]
    std = np.asarray(std, dtype=np.float64)[:, None, None]
    return (images.astype(np.float64) / 255.0 - mean) / np.where(std > 0, std, 1.0)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings; ``lr`` applies to newly defined layers, ``backbone_lr`` to the backbone.

    The learning rates are multiplied by ``lr_decay`` every ``lr_decay_every``
    epochs.  ``seed`` drives mini-batch shuffling only.
    """

    epochs: int = 20
    batch_size: int = 16
    lr: float = 0.01
    backbone_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.001
    lr_decay: float = 0.1
    lr_decay_every: int = 10
    seed: int = 0

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr_decay_every < 1:
            raise ConfigError(f"bad epochs / batch size / decay interval in {self}")
        if min(self.lr, self.backbone_lr, self.momentum, self.weight_decay, self.lr_decay) < 0:
            raise ConfigError(f"learning rates, momentum, weight decay and decay factor must be ≥ 0: {self}")


@dataclass
class TrainResult:
    loss_curve: list[tuple[int, int, float]] = field(default_factory=list)
    held_out: list[float] = field(default_factory=list)

    def epoch_means(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for e, _, v in self.loss_curve:
            by_epoch.setdefault(e, []).append(v)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "step", "loss"])
        for e, s, v in self.loss_curve:
            w.writerow([e, s, repr(v)])
        return buf.getvalue()


def batch_loss(model: MdanModel, images, paths) -> float:
    with T.no_grad():
        return model.loss(images, paths).item()


def train(model: MdanModel, images: np.ndarray, paths: np.ndarray, cfg: TrainConfig,
          held_out: tuple[np.ndarray, np.ndarray] | None = None) -> TrainResult:
    """Shuffled mini-batch SGD on the joint loss.

    ``images`` are already normalised floats.  With ``held_out`` the loss on
    that fixed batch is recorded once before training and after every epoch.
    """
    cfg.validate()
    paths = np.asarray(paths, dtype=np.int64)
    n = len(paths)
    rng = np.random.default_rng(cfg.seed)
    opt = T.SGD(
        [{"params": model.backbone_params(), "lr": cfg.backbone_lr},
         {"params": model.head_params(), "lr": cfg.lr}],
        momentum=cfg.momentum, weight_decay=cfg.weight_decay,
    )
    result = TrainResult()
    if held_out is not None:
        result.held_out.append(batch_loss(model, *held_out))
    for epoch in range(cfg.epochs):
        lr_scale = cfg.lr_decay ** (epoch // cfg.lr_decay_every)
        order = rng.permutation(n)
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss = model.loss(images[idx], paths[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, step {step} "
                                   f"(batch sample indices {idx.tolist()})")
            T.backward(loss)
            opt.step(lr_scale)
            result.loss_curve.append((epoch, step, value))
        if held_out is not None:
            result.held_out.append(batch_loss(model, *held_out))
        logger.info("epoch %d: mean loss %.4f", epoch, result.epoch_means()[-1] if n else float("nan"))
    return result


# --------------------------------------------------------------------------
# evaluation


@dataclass
class Outputs:
    """Per-level P_L and P_G arrays for a whole dataset."""

    local: list[np.ndarray]
    global_: list[np.ndarray]


def predict_outputs(model: MdanModel, images: np.ndarray, batch_size: int = 64, n_jobs: int = 1) -> Outputs:
    """Forward the data in batches without recording a graph.

    With ``n_jobs > 1`` disjoint shards are evaluated on worker threads
    against the same frozen parameters.
    """
    starts = list(range(0, len(images), batch_size))

    def run(start):
        with T.no_grad():
            preds, _ = model.forward(images[start:start + batch_size])
        return preds.arrays("L"), preds.arrays("G")

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    depth = model.hierarchy.depth
    if not parts:
        sizes = model.hierarchy.level_sizes
        empty = [np.zeros((0, k)) for k in sizes]
        return Outputs(empty, list(empty))
    local = [np.concatenate([p[0][i] for p in parts]) for i in range(depth)]
    glob = [np.concatenate([p[1][i] for p in parts]) for i in range(depth)]
    return Outputs(local, glob)


@dataclass
class EvalReport:
    """Accuracy, violation rate and confusion matrices per prediction head (L, G, O)."""

    alpha: float
    accuracy: dict[str, list[float]]
    violation_rate: dict[str, float]
    confusion: dict[str, list[np.ndarray]]
    cross_parent_error: dict[str, list[float]]
    level_names: list[list[str]]
    loss_curve: list[tuple[int, int, float]] = field(default_factory=list)

    def records(self) -> list[dict]:
        out = []
        for head in ("L", "G", "O"):
            for lv, acc in enumerate(self.accuracy[head], start=1):
                out.append({
                    "level": lv,
                    "head": head,
                    "alpha": self.alpha,
                    "accuracy": acc,
                    "violation_rate": self.violation_rate[head],
                    "cross_parent_error": self.cross_parent_error[head][lv - 1],
                    "classes": self.level_names[lv - 1],
                    "confusion": self.confusion[head][lv - 1].tolist(),
                })
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "head", "alpha", "accuracy", "violation_rate", "cross_parent_error"])
        for r in self.records():
            w.writerow([r["level"], r["head"], repr(r["alpha"]), repr(r["accuracy"]),
                        repr(r["violation_rate"]), repr(r["cross_parent_error"])])
        return buf.getvalue()


def report_from_outputs(hierarchy: EmotionHierarchy, outputs: Outputs, paths: np.ndarray,
                        alpha: float) -> EvalReport:
    paths = np.asarray(paths, dtype=np.int64)
    heads = {
        "L": outputs.local,
        "G": outputs.global_,
        "O": fuse_predictions(outputs.local, outputs.global_, alpha),
    }
    acc, viol, conf, cross = {}, {}, {}, {}
    n = len(paths)
    for head, probs in heads.items():
        pred = np.stack([p.argmax(axis=1) for p in probs], axis=1) if n else np.zeros((0, hierarchy.depth), int)
        acc[head] = [float(np.mean(pred[:, i] == paths[:, i])) if n else 0.0 for i in range(hierarchy.depth)]
        viol[head] = float(np.mean(violation_counts(hierarchy, pred) > 0)) if n else 0.0
        conf[head], cross[head] = [], []
        for lv in range(1, hierarchy.depth + 1):
            cm, frac = hierarchical_confusion(hierarchy, paths[:, lv - 1], pred[:, lv - 1], lv)
            conf[head].append(cm)
            cross[head].append(frac)
    names = [hierarchy.names(lv) for lv in range(1, hierarchy.depth + 1)]
    return EvalReport(alpha, acc, viol, conf, cross, names)


def evaluate(model: MdanModel, images: np.ndarray, paths: np.ndarray, alpha: float | None = None,
             batch_size: int = 64, n_jobs: int = 1) -> EvalReport:
    """Argmax-per-level metrics for P_L, P_G and P_O (fused at ``alpha``, default the model's)."""
    alpha = model.config.alpha if alpha is None else alpha
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    outputs = predict_outputs(model, images, batch_size, n_jobs)
    return report_from_outputs(model.hierarchy, outputs, paths, alpha)


def alpha_sweep(model: MdanModel, images: np.ndarray, paths: np.ndarray, grid=None,
                batch_size: int = 64) -> list[EvalReport]:
    """Re-fuse one set of forward outputs at each α in ``grid`` (no retraining)."""
    grid = np.round(np.linspace(0.0, 1.0, 11), 10) if grid is None else grid
    outputs = predict_outputs(model, images, batch_size)
    return [report_from_outputs(model.hierarchy, outputs, paths, float(a)) for a in grid]


def sweep_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "level", "accuracy_L", "accuracy_G", "accuracy_O"])
    for r in reports:
        for lv in range(len(r.accuracy["O"])):
            w.writerow([repr(r.alpha), lv + 1, repr(r.accuracy["L"][lv]), repr(r.accuracy["G"][lv]),
                        repr(r.accuracy["O"][lv])])
    return buf.getvalue()


@dataclass
class MappingRun:
    name: str
    config: MdanConfig
    report: EvalReport
    train_result: TrainResult


def mapping_experiment(configs: dict[str, MdanConfig], hierarchy: EmotionHierarchy,
                       train_data: tuple[np.ndarray, np.ndarray], test_data: tuple[np.ndarray, np.ndarray],
                       train_cfg: TrainConfig, seed: int = 0) -> list[MappingRun]:
    """Train a fresh model per mapping config (same init seed) and evaluate each on the test data."""
    runs = []
    for name, cfg in configs.items():
        model = MdanModel(cfg, hierarchy, seed=seed)
        res = train(model, *train_data, train_cfg)
        report = evaluate(model, *test_data)
        report.loss_curve = res.loss_curve
        runs.append(MappingRun(name, cfg, report, res))
        logger.info("mapping %s: level accuracies (O) %s", name, report.accuracy["O"])
    return runs


def mapping_configs(base: MdanConfig, specs: list[str]) -> dict[str, MdanConfig]:
    """Build mapping configs from ``e``, ``f`` or ``"1:4,2:3[;nofusion]"`` strings.

    Without fusion there is no upper map to attend from, so MHCCA is switched off.
    """
    out = {}
    for spec in specs:
        table, _, opt = spec.partition(";")
        out[spec] = with_mapping(base, table.strip(), opt.strip() != "nofusion")
    return out


def with_mapping(base: MdanConfig, mapping, fusion: bool) -> MdanConfig:
    if fusion:
        return replace(base, mapping=mapping, fusion=True)
    return replace(base, mapping=mapping, fusion=False, mhcca_on=False, kv_projections_on=False)


def mapping_csv(runs: list[MappingRun]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mapping", "fusion", "level", "accuracy_L", "accuracy_G", "accuracy_O"])
    for run in runs:
        for lv in range(len(run.report.accuracy["O"])):
            w.writerow([run.name, int(run.config.fusion), lv + 1, repr(run.report.accuracy["L"][lv]),
                        repr(run.report.accuracy["G"][lv]), repr(run.report.accuracy["O"][lv])])
    return buf.getvalue()
