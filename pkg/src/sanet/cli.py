"""``sanet`` command-line entry point.

Exit status: 0 on success, 1 on validation or format errors, 2 when an
internal invariant fails (a gradient check, a map that does not validate,
a diverged training run).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import ConfigurationError, FormatError, TrainingDivergedError

log = logging.getLogger("sanet")


class InvariantFailure(RuntimeError):
    """An internal consistency check failed (exit status 2)."""


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        text = action.help or ""
        if "%(default)" in text or action.default is argparse.SUPPRESS:
            return text
        if action.option_strings and action.nargs != 0:
            shown = getattr(action, "shown_default", action.default)
            if shown is None and action.required:
                return text + " (required)"
            return text + f" (default: {shown})"
        return text


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are validation errors: status 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _float_list(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _add_config_flags(parser, cls):
    """One ``--key`` flag per config field; unset flags defer to the file."""
    group = parser.add_argument_group(f"{cls.__name__} keys (override the config file)")
    for name, default in cfgmod.field_defaults(cls).items():
        if isinstance(default, tuple):
            shown = ",".join(f"{v:g}" for v in default)
        elif isinstance(default, bool):
            shown = "true" if default else "false"
        else:
            shown = default
        action = group.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", default=None,
                                    metavar=type(default).__name__.upper(), help=f"config key {name}")
        action.shown_default = shown


def _config_from(args, cls):
    defaults = cfgmod.field_defaults(cls)
    overrides = {}
    for name, default in defaults.items():
        raw = getattr(args, f"cfg_{name}")
        if raw is not None:
            overrides[name] = cfgmod.coerce(raw, default, name)
    return cfgmod.load(cls, getattr(args, "config", None), overrides)


def _write_rows(path, header, rows):
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_slic(args):
    from .data import load_ppm
    from .superpixel import save_map, slic_segment, validate_map

    image = load_ppm(args.image)
    spmap = slic_segment(image, args.regions, args.compactness, args.iters)
    problems = validate_map(spmap, check_connectivity=True)
    if problems:
        raise InvariantFailure("SLIC produced an invalid map: " + "; ".join(problems[:5]))
    save_map(args.out, spmap)
    print(f"{args.out}: {spmap.region_count} regions")


def cmd_shuffle(args):
    from .data import load_ppm, save_ppm
    from .rsm import make_shuffle_plan, shuffle_arrays

    image = load_ppm(args.image)
    h, w = image.shape[:2]
    plan = make_shuffle_plan(args.grid, args.neighborhood, args.seed)
    out, _, _ = shuffle_arrays(image, np.zeros((0, h, w), np.uint8), np.zeros((h, w), np.int64), plan)
    save_ppm(args.out, out)
    moved = int(np.count_nonzero(plan.source != np.arange(plan.grid ** 2).reshape(plan.grid, -1)))
    print(f"{args.out}: {moved} of {plan.grid ** 2} blocks moved")


def cmd_synth(args):
    from .data import SynthConfig, synth_generate

    config = _config_from(args, SynthConfig)
    samples = synth_generate(config, args.out)
    Path(args.out, "synth_config.txt").write_text(cfgmod.dump(config))
    print(f"{args.out}: {len(samples)} samples")


def cmd_train(args):
    from .data import load_dataset
    from .model import load_checkpoint
    from .plotting import plot_metrics, plot_training
    from .trainer import TrainConfig, evaluate, new_model, train

    config = _config_from(args, TrainConfig)
    samples = load_dataset(args.data)
    if not samples:
        raise ConfigurationError(f"{args.data}: dataset is empty")
    val = load_dataset(args.val) if args.val else None
    h, w = samples[0].image.shape[:2]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfgmod.dump(config))
    model = new_model(config, h, w)

    def progress(row):
        log.info("epoch %d iter %d lr %.3g loss %.4f", row["epoch"], row["iter"], row["lr"], row["loss"])

    result = train(model, samples, config, val, out, progress)
    plot_training(result.rows, out / "train_log.png", result.val_rows)
    print(f"{out}: {result.step} iterations, loss {result.initial_loss:.4f} -> "
          f"{result.final_loss:.4f} (last-epoch mean)")
    if val:
        load_checkpoint(out / "best.sanc", model)
        report = evaluate(model, val, config.batch_size, config.threshold, config.empty_convention)
        report.write_csv(out / "metrics.csv")
        plot_metrics(report, out / "metrics.png")
        print(f"best validation challenge JA {100 * report.challenge_jaccard:.2f} "
              f"(micro {100 * report.micro_jaccard:.2f})")


def cmd_predict(args):
    from .data import load_dataset, save_pgm
    from .model import load_checkpoint
    from .trainer import TrainConfig, new_model, predict_masks

    ckpt = Path(args.checkpoint)
    if args.config is None and (ckpt.parent / "config.txt").exists():
        args.config = ckpt.parent / "config.txt"
    config = _config_from(args, TrainConfig)
    samples = load_dataset(args.data)
    if not samples:
        raise ConfigurationError(f"{args.data}: dataset is empty")
    h, w = samples[0].image.shape[:2]
    model = new_model(config, h, w)
    load_checkpoint(ckpt, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preds = predict_masks(model, samples, config.batch_size, config.threshold)
    for s, masks in zip(samples, preds):
        for k, m in enumerate(masks):
            save_pgm(out / f"{s.id}.attr{k}.pgm", m)
    (out / "manifest.txt").write_text("".join(f"{s.id}\n" for s in samples))
    print(f"{out}: {len(samples)} predictions")


def cmd_eval(args):
    from .data import load_masks, read_manifest
    from .metrics import CLASS_NAMES, aggregate, image_counts
    from .plotting import figure_path, plot_metrics

    ids = read_manifest(args.gt)
    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise ConfigurationError(f"prediction directory {pred_dir} does not exist")
    missing = [i for i in ids
               if not all((pred_dir / f"{i}.attr{k}.pgm").exists() for k in range(len(CLASS_NAMES)))]
    if missing:
        shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
        raise ConfigurationError(f"{len(missing)} ground-truth id(s) have no prediction: {shown}")
    if (pred_dir / "manifest.txt").exists():
        extra = sorted(set(read_manifest(pred_dir)) - set(ids))
        if extra:
            raise ConfigurationError(f"prediction id(s) absent from ground truth: {', '.join(extra[:20])}")
    counts = []
    for i in ids:
        gt = load_masks(args.gt, i)
        pred = load_masks(pred_dir, i)
        if gt.shape != pred.shape:
            raise ConfigurationError(f"{i}: prediction extents {pred.shape[1:]} != ground truth {gt.shape[1:]}")
        counts.append(image_counts(pred, gt))
    empty = 1.0 if args.empty_convention == "one" else 0.0
    report = aggregate(np.stack(counts), empty)
    report.write_csv(args.out)
    plot_metrics(report, figure_path(args.out))
    for name, ja, di in report.rows():
        print(f"{name:18s} JA {100 * ja:6.2f}  Dice {100 * di:6.2f}")


def cmd_losscurve(args):
    from .losses import loss_curve
    from .plotting import figure_path, plot_loss_curves

    for t in args.theta:
        if not 0 <= t < 1:
            raise ConfigurationError(f"theta {t} outside [0, 1)")
    if any(g < 0 for g in args.gamma):
        raise ConfigurationError("gamma must be >= 0")
    if args.points < 2:
        raise ConfigurationError("--points must be >= 2")
    pts = np.linspace(args.pmin, 1.0, args.points)
    series = {}
    rows = []
    for gamma in args.gamma:
        for theta in args.theta:
            loss, grad = loss_curve(gamma, theta, pts)
            series[(gamma, theta)] = (pts, loss, grad)
            rows.extend((f"{gamma:g}", f"{theta:g}", f"{p:.6f}", f"{v:.9g}", f"{d:.9g}")
                        for p, v, d in zip(pts, loss, grad))
    _write_rows(args.out, ["gamma", "theta", "p_t", "loss", "dloss_dpt"], rows)
    plot_loss_curves(series, figure_path(args.out))
    print(f"{args.out}: {len(series)} series x {args.points} points")


def cmd_gradcheck(args):
    from .checks import run_suite

    ops = args.op or None
    reports = run_suite(ops, args.trials, args.precision, args.seed,
                        progress=lambda r: print(r.lines(), flush=True))
    failed = [r.op for r in reports if not r.passed]
    if failed:
        raise InvariantFailure(f"gradient check failed for: {', '.join(failed)}")
    print(f"all {len(reports)} checks under tolerance")


# ---------------------------------------------------------------------------


def build_parser():
    from .checks import OP_NAMES
    from .data import SynthConfig
    from .trainer import TrainConfig

    parser = _Parser(prog="sanet", formatter_class=_HelpFormatter,
                                     description="Superpixel-attention segmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_HelpFormatter)
        p.set_defaults(func=func)
        return p

    p = add("slic", cmd_slic, "Segment a PPM image into SLIC superpixels (.spx).")
    p.add_argument("--image", required=True, help="input PPM (P6) image")
    p.add_argument("--regions", type=int, default=196, help="target superpixel count")
    p.add_argument("--compactness", type=float, default=10.0, help="color/space trade-off m")
    p.add_argument("--iters", type=int, default=10, help="k-means iterations")
    p.add_argument("--out", required=True, help="output .spx path")

    p = add("shuffle", cmd_shuffle, "Apply a random neighborhood-constrained block shuffle to a PPM image.")
    p.add_argument("--image", required=True, help="input PPM (P6) image")
    p.add_argument("--grid", type=int, default=7, help="blocks per side")
    p.add_argument("--neighborhood", type=int, default=2, help="displacement scale k")
    p.add_argument("--seed", type=int, default=0, help="plan seed")
    p.add_argument("--out", required=True, help="output PPM path")

    p = add("synth", cmd_synth, "Generate a synthetic five-attribute dataset.")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p, SynthConfig)

    p = add("train", cmd_train, "Train the toy network; writes logs, checkpoints and figures.")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--val", default=None, help="validation dataset directory")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p, TrainConfig)

    p = add("predict", cmd_predict, "Write thresholded attribute masks from a checkpoint.")
    p.add_argument("--checkpoint", required=True, help=".sanc checkpoint")
    p.add_argument("--data", required=True, help="dataset directory to segment")
    p.add_argument("--config", default=None,
                   help="training config (default: config.txt beside the checkpoint)")
    p.add_argument("--out", required=True, help="output directory for predicted masks")
    _add_config_flags(p, TrainConfig)

    p = add("eval", cmd_eval, "Score predicted masks against ground truth (CSV + bar chart).")
    p.add_argument("--pred", required=True, help="directory of predicted <id>.attr<k>.pgm masks")
    p.add_argument("--gt", required=True, help="ground-truth dataset directory")
    p.add_argument("--empty-convention", choices=("one", "zero"), default="one",
                   help="score for a class with empty union")
    p.add_argument("--out", required=True, help="output metrics CSV")

    p = add("losscurve", cmd_losscurve, "Tabulate the truncated focal loss and its derivative.")
    p.add_argument("--gamma", type=_float_list, default=[0.0, 0.5, 1.0, 2.0], help="comma-separated gammas")
    p.add_argument("--theta", type=_float_list, default=[0.0, 0.2], help="comma-separated thetas")
    p.add_argument("--points", type=int, default=1000, help="grid points in p_t")
    p.add_argument("--pmin", type=float, default=0.001, help="smallest p_t on the grid")
    p.add_argument("--out", required=True, help="output CSV")

    p = add("gradcheck", cmd_gradcheck, "Finite-difference gradient checks for every differentiable op.")
    p.add_argument("--precision", choices=("f64", "f32"), default="f64", help="floating-point precision")
    p.add_argument("--op", action="append", choices=OP_NAMES, default=None,
                   help="check only this op (repeatable)")
    p.add_argument("--trials", type=int, default=100, help="randomized trials per op")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (ConfigurationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc.strerror}: {exc.filename}", file=sys.stderr)
        return 1
    except (InvariantFailure, TrainingDivergedError) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
