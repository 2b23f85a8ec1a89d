"""Command-line entry point: ``staininv <command> ...``.

Exit codes: 0 success, 1 I/O or parse error, 2 stain-domain error
(insufficient tissue, degenerate colour), 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .augmentation import augment_with_draws, normalize_to_target
from .color_optics import load_png, save_png
from .config import ConfigError, RunConfig
from .consistency_trainer import (
    StainAugmenter,
    downsample,
    gradient_check,
    preprocess,
    save_checkpoint,
    train,
    write_log,
)
from .errors import StainError
from .evaluation import LabelMap, confusion, format_report, metrics_row, remap_labels, run_crossdomain_experiment
from .stain_estimation import StainMatrix, angular_distance, estimate, reference_stain_matrix, stain_angular_errors
from .synthetic import ClassPrototype, SyntheticDomainSpec, prototype_from_dict, render_synthetic, write_class_folders

logger = logging.getLogger("staininvariant")

EXIT_OK, EXIT_IO, EXIT_DOMAIN, EXIT_VERIFY = 0, 1, 2, 3
IMAGE_SUFFIXES = {".png"}
GRAD_TOL = 1e-4


class UsageError(Exception):
    """Bad input paths or file contents (exit code 1)."""


def _image_inputs(path: str | Path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        files = sorted(f for f in p.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise UsageError(f"no PNG images in {p}")
        return files
    if not p.is_file():
        raise UsageError(f"input not found: {p}")
    return [p]


def _load(path: Path) -> np.ndarray:
    try:
        return load_png(path)
    except OSError as exc:
        raise UsageError(f"cannot read image {path}: {exc}") from exc


def _load_stains(path: str | Path) -> StainMatrix:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"stain matrix file not found: {p}")
    try:
        return StainMatrix.from_json(p.read_text())
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise UsageError(f"invalid stain matrix file {p}: {exc}") from exc


def _config(args) -> RunConfig:
    if getattr(args, "config", None) and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    cfg = RunConfig.load(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _fmt_vec(v) -> str:
    return "(" + ", ".join(f"{x:.4f}" for x in v) + ")"


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_estimate(args) -> int:
    cfg = _config(args).with_snmf(sparsity_lambda=args.lam, max_iters=args.max_iters)
    src = Path(args.input)
    if not src.is_file():
        raise UsageError(f"input not found: {src}")
    img = _load(src)
    stains = estimate(img, args.method, cfg.snmf)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(stains.to_json() + "\n")

    ref = reference_stain_matrix()
    dh, de = stain_angular_errors(stains, ref)
    print(f"method: {stains.method}")
    print(f"hematoxylin: {_fmt_vec(stains.hematoxylin)}")
    print(f"eosin:       {_fmt_vec(stains.eosin)}")
    print(f"angle between stains: {angular_distance(stains.hematoxylin, stains.eosin):.2f} deg")
    print(f"angle to reference H/E: {dh:.2f} / {de:.2f} deg")
    if stains.n_iter is not None:
        print(f"iterations: {stains.n_iter}")
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = _config(args).with_perturb(n_augment=args.n, sigma1=args.sigma1, sigma2=args.sigma2)
    inputs = _image_inputs(args.input)
    fixed = _load_stains(args.stains) if args.stains else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for index, path in enumerate(inputs):
        img = _load(path)
        stains = fixed or estimate(img, "vahadane", cfg.snmf)
        outputs, draws = augment_with_draws(img, stains, cfg.perturb, index)
        for k, (aug, draw) in enumerate(zip(outputs, draws), start=1):
            name = f"{path.stem}_aug{k}.png"
            save_png(aug, out_dir / name)
            rows.append([path.name, name, repr(draw.alpha[0]), repr(draw.alpha[1]),
                         repr(draw.beta[0]), repr(draw.beta[1])])
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["source", "output", "alphaH", "alphaE", "betaH", "betaE"])
        writer.writerows(rows)
    print(f"wrote {len(rows)} images for {len(inputs)} input(s) to {out_dir}")
    return EXIT_OK


def cmd_normalize(args) -> int:
    cfg = _config(args)
    target = _load_stains(args.target)
    inputs = _image_inputs(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in inputs:
        img = _load(path)
        src = estimate(img, args.method, cfg.snmf)
        save_png(normalize_to_target(img, src, target), out / f"{path.stem}.png")
    print(f"normalised {len(inputs)} image(s) into {out}")
    return EXIT_OK


def _load_class_folders(root: Path, label_map: LabelMap | None, side: int):
    if not root.is_dir():
        raise UsageError(f"data directory not found: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise UsageError(f"no class folders in {root}")
    pairs = []
    for d in class_dirs:
        for f in sorted(d.iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES:
                pairs.append((f, d.name))
    if not pairs:
        raise UsageError(f"no PNG images under {root}")
    if label_map is None:
        names = [d.name for d in class_dirs]
        label_map = LabelMap({n: n for n in names}, classes=tuple(names))
    remapped = remap_labels(pairs, label_map)
    images = np.stack([downsample(_load(p), side) for p in remapped.items])
    return images, remapped.labels, list(label_map.classes)


def cmd_train_toy(args) -> int:
    cfg = _config(args)
    cfg = cfg.with_train(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size)
    cfg = cfg.with_perturb(n_augment=args.n, sigma1=args.sigma1, sigma2=args.sigma2)
    if args.no_consistency:
        cfg = cfg.with_train(use_consistency=False)
    tcfg = cfg.train
    label_map = LabelMap.load(args.label_map) if args.label_map else None
    images, labels, classes = _load_class_folders(Path(args.data), label_map, args.side)
    k = len(classes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_name(out.stem + "_log.csv")

    augmenter = StainAugmenter(images, tcfg.perturb, snmf=cfg.snmf) if tcfg.use_consistency else None
    if args.check_grads:
        from .consistency_trainer import ModelParams

        m = min(len(images), 8)
        x = preprocess(images[:m])
        params = ModelParams.init(x.shape[1], k, tcfg.seed)
        x_aug = None
        if tcfg.use_consistency:
            two = replace(tcfg.perturb, n_augment=2)
            x_aug = preprocess(StainAugmenter(images[:m], two, augmenter.stains[:m]).views(
                np.arange(m), tcfg.seed, 0))
        err = gradient_check(params, x, labels[:m], x_aug, seed=tcfg.seed)
        print(f"gradient check: max relative error {err:.3e}")
        if not err < GRAD_TOL:
            print(f"gradient check failed (tolerance {GRAD_TOL:g})", file=sys.stderr)
            return EXIT_VERIFY

    result = train(images, labels, tcfg, k, augmenter)
    save_checkpoint(result.params, out, tcfg.seed, tcfg.epochs)
    write_log(result.log, log_path)
    final = result.final
    if final is not None:
        print(f"final loss: l_c={final.l_c:.6f} l_s={final.l_s:.6f} l_total={final.l_total:.6f}")
    print(f"checkpoint: {out}\nlog: {log_path}")
    return EXIT_OK


def _load_experiment_spec(spec_arg: str) -> dict:
    if spec_arg == "default":
        text = resources.files("staininvariant.data").joinpath("default_experiment.json").read_text()
        src = "default_experiment.json"
    else:
        p = Path(spec_arg)
        if not p.is_file():
            raise UsageError(f"spec file not found: {p}")
        text, src = p.read_text(), str(p)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(
            f"{src}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc


EXPERIMENT_KEYS = {"prototypes", "source_stains", "target_stains", "n_per_class", "side",
                   "source_seed", "target_seed", "repeats", "train"}


def experiment_from_dict(d: dict):
    """Parse an experiment spec into (source, target, TrainConfig, repeats)."""
    from .consistency_trainer import TrainConfig

    unknown = set(d) - EXPERIMENT_KEYS
    if unknown:
        raise UsageError(f"unknown experiment spec keys: {sorted(unknown)}")
    try:
        protos = tuple(prototype_from_dict(p) for p in d["prototypes"])
        src_w = StainMatrix.from_dict({"stains": d["source_stains"], "method": "reference"})
        tgt_w = StainMatrix.from_dict({"stains": d["target_stains"], "method": "reference"})
        n = int(d.get("n_per_class", 200))
        side = int(d.get("side", 32))
        source = SyntheticDomainSpec(src_w, protos, n, side, int(d.get("source_seed", 0)))
        target = SyntheticDomainSpec(tgt_w, protos, n, side, int(d.get("target_seed", 1)))
        tcfg = TrainConfig.from_dict(d.get("train", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid experiment spec: {exc}") from exc
    return source, target, tcfg, int(d.get("repeats", 5))


def cmd_synth(args) -> int:
    source, target, tcfg, repeats = experiment_from_dict(_load_experiment_spec(args.spec))
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.repeats is not None:
        repeats = args.repeats
    if args.n_per_class is not None:
        source = replace(source, n_per_class=args.n_per_class)
        target = replace(target, n_per_class=args.n_per_class)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not args.no_images:
        write_class_folders(render_synthetic(source), out / "source")
        write_class_folders(render_synthetic(target), out / "target")
    if args.no_experiment:
        print(f"rendered synthetic domains into {out}")
        return EXIT_OK
    report = run_crossdomain_experiment(source, target, tcfg, repeats, args.averaging)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report_per_seed.csv").write_text(report.per_seed_csv())
    sys.stdout.write(report.to_csv())
    print(f"consistency arm ahead in {report.consistency_wins()} of {repeats} seeds")
    return EXIT_OK


def _read_label_column(path: str | Path) -> list[str]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"label file not found: {p}")
    with open(p, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and rows[0][-1].strip().lower() in {"label", "pred", "prediction", "truth", "y"}:
        rows = rows[1:]
    return [r[-1].strip() for r in rows]


def cmd_eval(args) -> int:
    preds = _read_label_column(args.pred)
    truths = _read_label_column(args.truth)
    if len(preds) != len(truths):
        raise UsageError(f"{len(preds)} predictions vs {len(truths)} labels")
    if not truths:
        raise UsageError("no labels to evaluate")
    names = sorted(set(preds) | set(truths), key=lambda s: (not s.isdigit(), int(s) if s.isdigit() else 0, s))
    index = {n: i for i, n in enumerate(names)}
    cm = confusion([index[p] for p in preds], [index[t] for t in truths], len(names))
    row = metrics_row(args.method, args.training_dataset, cm, args.averaging)
    text = format_report([row])
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; that code is reserved for stain errors.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_IO, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="staininv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="estimate an H&E stain matrix from one image")
    p.add_argument("--input", required=True)
    p.add_argument("--method", choices=("macenko", "vahadane"), default="vahadane")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("augment", help="write N stain-augmented copies per image")
    p.add_argument("--input", required=True, help="PNG file or directory of PNGs")
    p.add_argument("--n", type=int)
    p.add_argument("--sigma1", type=float)
    p.add_argument("--sigma2", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--stains", help="stain matrix JSON used for every image")
    p.add_argument("--config")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("normalize", help="normalise images to a target stain matrix")
    p.add_argument("--input", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("macenko", "vahadane"), default="vahadane")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("train-toy", help="train the small consistency-regularised classifier")
    p.add_argument("--data", required=True, help="class-per-folder PNG dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="checkpoint path (JSON)")
    p.add_argument("--log", help="training log CSV (default: <out>_log.csv)")
    p.add_argument("--no-consistency", action="store_true")
    p.add_argument("--check-grads", action="store_true")
    p.add_argument("--label-map", help="LabelMap JSON applied to folder names")
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--sigma1", type=float)
    p.add_argument("--sigma2", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("synth", help="render synthetic domains and run the cross-domain experiment")
    p.add_argument("--spec", default="default", help="experiment spec JSON, or 'default'")
    p.add_argument("--out", required=True)
    p.add_argument("--no-experiment", action="store_true")
    p.add_argument("--no-images", action="store_true")
    p.add_argument("--repeats", type=int)
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--averaging", choices=("weighted", "macro"), default="weighted")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="metrics from prediction / truth label CSVs")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--method", default="model")
    p.add_argument("--training-dataset", default="-")
    p.add_argument("--averaging", choices=("weighted", "macro"), default="weighted")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (UsageError, ConfigError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
