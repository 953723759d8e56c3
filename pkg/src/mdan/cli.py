"""``mdan`` command line: data generation, training, evaluation and inspection.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ContractError, DataError, HierarchyParseError, NumericError, ShapeError
from .gradcheck import format_table, run_suite
from .hierarchy import SHIPPED, EmotionHierarchy, load_hierarchy, violation_count
from .imageio import DatasetIndex, atomic_write, read_index, read_ppm, to_gray8, write_pgm, write_ppm
from .model import MAPPING_PRESETS, MdanConfig, MdanModel, apply_ablation, lcam_fuse, parse_mapping
from .training import (SyntheticSpec, TrainConfig, alpha_sweep, channel_stats, evaluate, generate_dataset,
                       mapping_configs, mapping_csv, mapping_experiment, normalize, sweep_csv, train,
                       with_mapping)

logger = logging.getLogger("mdan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# argument helpers


def _hierarchy(source: str) -> EmotionHierarchy:
    if source in SHIPPED and not Path(source).exists():
        return load_hierarchy(source)
    path = Path(source)
    if not path.is_file():
        raise DataError(f"hierarchy file not found: {path}")
    return load_hierarchy(path)


def _mapping(value: str) -> tuple[str | dict, bool]:
    """``e`` / ``f`` / ``1:4,2:3`` / ``file:PATH`` → (mapping, fusion)."""
    if value in MAPPING_PRESETS:
        return value, True
    if not value.startswith("file:"):
        return parse_mapping(value), True
    path = Path(value[5:])
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read mapping file {path}: {exc.strerror}") from exc
    table, fusion = {}, True
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.replace(" ", "") in ("fusion=0", "nofusion"):
            fusion = False
            continue
        if line.replace(" ", "") == "fusion=1":
            continue
        parts = line.replace(":", " ").split()
        try:
            la, ls = (int(p) for p in parts)
        except ValueError:
            raise DataError(f"{path} line {lineno}: expected 'la ls' or 'la:ls', got {raw!r}") from None
        table[la] = ls
    return table, fusion


def _model_config(args, input_size: int, mapping="e", fusion: bool = True) -> MdanConfig:
    kwargs = dict(input_size=input_size, mapping=mapping, fusion=fusion,
                  alpha=args.alpha if args.alpha is not None else 0.7)
    if args.heads:
        kwargs["heads"] = parse_mapping(args.heads)
    if args.widths:
        try:
            kwargs["widths"] = tuple(int(v) for v in args.widths.split(","))
        except ValueError:
            raise ConfigError(f"--widths must be a comma list of integers, got {args.widths!r}") from None
    if args.pyramid_width:
        kwargs["pyramid_width"] = args.pyramid_width
    return apply_ablation(MdanConfig(**kwargs), args.ablate)


def _train_config(args) -> TrainConfig:
    d = TrainConfig()
    backbone_lr = args.backbone_lr if args.backbone_lr is not None else args.lr / 10.0
    return TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, backbone_lr=backbone_lr,
                       momentum=d.momentum, weight_decay=d.weight_decay, lr_decay=d.lr_decay,
                       lr_decay_every=d.lr_decay_every, seed=args.seed)


def _load_dataset(path: str, h: EmotionHierarchy) -> tuple[np.ndarray, np.ndarray, DatasetIndex]:
    index = read_index(path)
    images, paths = index.load(h)
    if not len(images):
        raise DataError(f"{path}: the index lists no images")
    return normalize(images, index.mean, index.std), paths, index


def _load_checkpoint(path: str, h: EmotionHierarchy) -> MdanModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return MdanModel.from_bytes(data, h)


def _load_image(path: str, model: MdanModel) -> np.ndarray:
    try:
        img = read_ppm(path)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc.strerror}") from exc
    size = model.config.input_size
    if img.shape[1:] != (size, size):
        raise DataError(f"{path}: image is {img.shape[2]}×{img.shape[1]}, the model expects {size}×{size}")
    if model.normalization is None:
        return img[None].astype(np.float64) / 255.0
    return normalize(img[None], *model.normalization)


def _write_report(out: Path, report) -> None:
    atomic_write(out / "report.jsonl", report.to_jsonl())
    atomic_write(out / "report.csv", report.to_csv())


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    h = _hierarchy(args.hierarchy)
    spec = SyntheticSpec(image_size=args.size, samples_per_class=args.per_class, n_samples=args.n, seed=args.seed,
                         noise=args.noise)
    ds = generate_dataset(spec, h)
    out = Path(args.out)
    names = h.names(h.depth)
    entries = []
    for i, (img, leaf) in enumerate(zip(ds.images, ds.leaves)):
        rel = f"images/{i:06d}.ppm"
        write_ppm(out / rel, img)
        entries.append((rel, names[leaf]))
    n_train = len(entries) - args.holdout
    if not 0 < n_train <= len(entries):
        raise ConfigError(f"--holdout {args.holdout} leaves no training images out of {len(entries)}")
    mean, std = channel_stats(ds.images[:n_train])
    std = np.where(std > 0, std, 1.0)
    if args.holdout:
        atomic_write(out / "train.tsv", DatasetIndex(mean, std, entries[:n_train], out).to_text())
        atomic_write(out / "test.tsv", DatasetIndex(mean, std, entries[n_train:], out).to_text())
        print(out / "train.tsv")
        print(out / "test.tsv")
    else:
        atomic_write(out / "index.tsv", DatasetIndex(mean, std, entries, out).to_text())
        print(out / "index.tsv")
    return EXIT_OK


def cmd_train(args) -> int:
    h = _hierarchy(args.hierarchy)
    x, paths, index = _load_dataset(args.data, h)
    mapping, fusion = _mapping(args.mapping)
    config = _model_config(args, x.shape[-1], mapping, fusion and not args.no_fusion)
    tc = _train_config(args)
    model = MdanModel(config, h, seed=args.seed, normalization=(tuple(index.mean), tuple(index.std)))
    result = train(model, x, paths, tc)
    if args.test:
        x_eval, p_eval, _ = _load_dataset(args.test, h)
    else:
        x_eval, p_eval = x, paths
    report = evaluate(model, x_eval, p_eval)
    out = Path(args.out)
    atomic_write(out / "model.mdan", model.to_bytes())
    atomic_write(out / "loss.csv", result.curve_csv())
    _write_report(out, report)
    for lv, acc in enumerate(report.accuracy["O"], start=1):
        logger.info("level %d accuracy (P_O): %.4f", lv, acc)
    print(out / "model.mdan")
    return EXIT_OK


def cmd_eval(args) -> int:
    h = _hierarchy(args.hierarchy)
    model = _load_checkpoint(args.checkpoint, h)
    x, paths, _ = _load_dataset(args.data, h)
    report = evaluate(model, x, paths, alpha=args.alpha)
    if args.out:
        _write_report(Path(args.out), report)
    else:
        sys.stdout.write(report.to_jsonl())
    return EXIT_OK


def cmd_predict(args) -> int:
    h = _hierarchy(args.hierarchy)
    model = _load_checkpoint(args.checkpoint, h)
    alpha = model.config.alpha if args.alpha is None else args.alpha
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    x = _load_image(args.image, model)
    with T.no_grad():
        preds, _ = model.forward(x)
    heads = {"L": preds.arrays("L"), "G": preds.arrays("G")}
    heads["O"] = [alpha * pl + (1.0 - alpha) * pg for pl, pg in zip(heads["L"], heads["G"])]
    levels, argmax = [], {k: [] for k in heads}
    for lv in range(1, h.depth + 1):
        names = h.names(lv)
        entry = {"level": lv, "classes": names}
        for k, probs in heads.items():
            p = probs[lv - 1][0]
            entry[f"P_{k}"] = [float(v) for v in p]
            argmax[k].append(int(p.argmax()))
        entry["argmax"] = {k: names[argmax[k][-1]] for k in heads}
        levels.append(entry)
    result = {
        "image": str(args.image),
        "alpha": alpha,
        "levels": levels,
        "violations": {k: violation_count(h, np.array(v)) > 0 for k, v in argmax.items()},
    }
    print(json.dumps(result, indent=2))
    return EXIT_OK


def _upscale(m: np.ndarray, size: int) -> np.ndarray:
    t = T.Tensor(m[None, None])
    while t.shape[-1] < size:
        t = T.upsample_bilinear_2x(t)
    return t.data[0, 0]


def cmd_export_cam(args) -> int:
    h = _hierarchy(args.hierarchy)
    model = _load_checkpoint(args.checkpoint, h)
    if not 1 <= args.level <= h.depth:
        raise ConfigError(f"--level must lie in 1..{h.depth}")
    x = _load_image(args.image, model)
    with T.no_grad():
        _, art = model.forward(x)
    la = args.level
    cams = art.cams[la][0]
    mask = art.children[la][0]
    if la in art.fused:
        fused = art.fused[la][0]
    else:
        cfg = model.config
        use_mean, use_max = (cfg.lcam_mean_on, cfg.lcam_max_on) if cfg.lcam_on else (True, True)
        fused = lcam_fuse(T.Tensor(cams[None]), mask[None], use_mean, use_max).data[0, 0]
    size = model.config.input_size
    out = Path(args.out)
    written = [out / f"level{la}_fused.pgm"]
    write_pgm(written[0], to_gray8(_upscale(fused, size)))
    names = h.names(la)
    for k in np.flatnonzero(mask):
        path = out / f"level{la}_cam_{names[k]}.pgm"
        write_pgm(path, to_gray8(_upscale(cams[k], size)))
        written.append(path)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    rows, seconds = run_suite(seed=args.seed, hierarchy=_hierarchy(args.hierarchy))
    print(format_table(rows))
    failed = [r.name for r in rows if not r.ok]
    print(f"{len(rows) - len(failed)}/{len(rows)} passed in {seconds:.1f}s")
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _grid(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--grid must be a comma list of numbers, got {text!r}") from None
    if not vals or any(not 0.0 <= v <= 1.0 for v in vals):
        raise ConfigError("--grid values must lie in [0, 1]")
    return vals


def cmd_sweep_alpha(args) -> int:
    h = _hierarchy(args.hierarchy)
    model = _load_checkpoint(args.checkpoint, h)
    x, paths, _ = _load_dataset(args.data, h)
    grid = _grid(args.grid) if args.grid else None
    text = sweep_csv(alpha_sweep(model, x, paths, grid))
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep_mapping(args) -> int:
    h = _hierarchy(args.hierarchy)
    x, paths, _ = _load_dataset(args.data, h)
    x_test, p_test, _ = _load_dataset(args.test, h) if args.test else (x, paths, None)
    base = _model_config(args, x.shape[-1])
    configs = {}
    for spec in args.mappings or ["e", "f"]:
        if spec.startswith("file:"):
            table, fusion = _mapping(spec)
            configs[spec] = with_mapping(base, table, fusion)
        else:
            configs.update(mapping_configs(base, [spec]))
    runs = mapping_experiment(configs, h, (x, paths), (x_test, p_test), _train_config(args), seed=args.seed)
    text = mapping_csv(runs)
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_model_flags(p, mapping=True):
    p.add_argument("--alpha", type=float, help="weight of the local prediction in P_O (default 0.7)")
    if mapping:
        p.add_argument("--mapping", default="e",
                       help="affective-to-pyramid mapping: e, f, an inline table like 1:4,2:3, or file:PATH")
        p.add_argument("--no-fusion", action="store_true", help="disable top-down feature fusion")
    p.add_argument("--widths", help="backbone widths c2,c3,c4,c5 (default 8,16,32,64)")
    p.add_argument("--pyramid-width", type=int, help="pyramid channel width d_F (default 32)")
    p.add_argument("--heads", help="attention heads per pyramid level, e.g. 4:2,3:2,2:4")
    p.add_argument("--ablate", help="ablation row name or comma list of flags to switch off (flag=1 switches on)")


def _add_train_flags(p):
    d = TrainConfig()
    p.add_argument("--seed", type=int, default=0, help="seed for initialisation and shuffling (default 0)")
    p.add_argument("--epochs", type=int, default=d.epochs, help=f"training epochs (default {d.epochs})")
    p.add_argument("--batch", type=int, default=d.batch_size, help=f"mini-batch size (default {d.batch_size})")
    p.add_argument("--lr", type=float, default=d.lr, help=f"learning rate of the new layers (default {d.lr})")
    p.add_argument("--backbone-lr", type=float, help="backbone learning rate (default lr / 10)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mdan", description="Hierarchical emotion classification with a two-branch network.")
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic PPM dataset and its index")
    p.add_argument("--hierarchy", default="ekman", help="shipped hierarchy name or hierarchy file (default ekman)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, help="total number of images (spread over the leaves)")
    p.add_argument("--per-class", type=int, default=10, help="images per leaf class when --n is not given")
    p.add_argument("--size", type=int, default=64, help="image side in pixels (default 64)")
    p.add_argument("--noise", type=float, default=0.04, help="pixel noise standard deviation (default 0.04)")
    p.add_argument("--holdout", type=int, default=0, help="put the last N images in test.tsv, the rest in train.tsv")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model and write checkpoint, loss curve and reports")
    p.add_argument("--hierarchy", default="ekman", help="shipped hierarchy name or hierarchy file (default ekman)")
    p.add_argument("--data", required=True, help="training index file")
    p.add_argument("--test", help="index evaluated for the report (default: the training data)")
    p.add_argument("--out", required=True, help="output directory")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on an index")
    p.add_argument("--hierarchy", default="ekman", help="shipped hierarchy name or hierarchy file (default ekman)")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="index file")
    p.add_argument("--alpha", type=float, help="fusion weight (default: the checkpoint's)")
    p.add_argument("--out", help="directory for report.jsonl and report.csv (default: JSON lines on stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="print per-level distributions for one image as JSON")
    p.add_argument("--hierarchy", default="ekman", help="shipped hierarchy name or hierarchy file (default ekman)")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--image", required=True, help="P6 image at the model's input size")
    p.add_argument("--alpha", type=float, help="fusion weight (default: the checkpoint's)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-cam", parents=[common], help="write the fused L-CAM map and child CAMs of one level as PGM files")
    p.add_argument("--hierarchy", default="ekman", help="shipped hierarchy name or hierarchy file (default ekman)")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--image", required=True, help="P6 image at the model's input size")
    p.add_argument("--level", type=int, required=True, help="affective level")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export_cam)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of every op and the joint loss")
    p.add_argument("--hierarchy", default="ekman", help="hierarchy for the end-to-end check (default ekman)")
    p.add_argument("--seed", type=int, default=0, help="seed for the random probes (default 0)")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("sweep-alpha", parents=[common], help="accuracy of P_L, P_G and P_O across fusion weights")
    p.add_argument("--hierarchy", default="ekman", help="shipped hierarchy name or hierarchy file (default ekman)")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="index file")
    p.add_argument("--grid", help="comma list of alpha values (default 0, 0.1, ..., 1)")
    p.add_argument("--out", help="CSV output file (default stdout)")
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("sweep-mapping", parents=[common], help="train one model per mapping and compare accuracies")
    p.add_argument("--hierarchy", default="ekman", help="shipped hierarchy name or hierarchy file (default ekman)")
    p.add_argument("--data", required=True, help="training index file")
    p.add_argument("--test", help="evaluation index (default: the training data)")
    p.add_argument("--mappings", nargs="+",
                   help="mappings to compare: e, f, 1:4,2:3, 1:4,2:3;nofusion or file:PATH (default e f)")
    p.add_argument("--out", help="CSV output file (default stdout)")
    _add_model_flags(p, mapping=False)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep_mapping)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"mdan: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, HierarchyParseError, ShapeError, ContractError) as exc:
        print(f"mdan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"mdan: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
