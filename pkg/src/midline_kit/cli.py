"""Command-line interface: synth-gen, train, predict, evaluate, plot.

Machine-readable summaries go to stdout; diagnostics go to stderr.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("midline_kit")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _fraction(text):
    v = float(text)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return v


def _open_fraction(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text}")
    return v


def _slice_arg(text):
    if text == "auto":
        return text
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("slice index must be non-negative")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="midline-kit", description="Brain midline estimation and midline shift toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth-gen", help="generate synthetic phantom studies")
    p.add_argument("--n", type=_positive_int, required=True, help="number of studies")
    p.add_argument("--slices", type=_positive_int, default=4, help="slices per study")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--positive-frac", type=_fraction, default=0.5, help="target fraction of studies with MLS >= 5 mm")
    p.add_argument("--size", type=_positive_int, default=160, help="slice height and width in px")

    p = sub.add_parser("train", help="train a model on annotated studies")
    p.add_argument("--config", type=Path, help="TOML file with [train], [model], [loss] tables")
    p.add_argument("--data", type=Path, required=True, help="directory of annotated study directories")
    p.add_argument("--val-frac", type=_fraction, default=0.1)
    p.add_argument("--out", type=Path, required=True, help="run directory for model.ckpt and history.csv")
    p.add_argument("--seed", type=int, help="overrides the train and model seeds of the config")

    p = sub.add_parser("predict", help="predict midlines and MLS for one study")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--study", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--coverage", type=_open_fraction, default=0.95)
    p.add_argument("--limits-threshold", type=float, default=0.5)
    p.add_argument("--mls-threshold-mm", type=float, default=5.0)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred-dir", type=Path, required=True)
    p.add_argument("--gt-dir", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mls-threshold-mm", type=float, default=5.0)

    p = sub.add_parser("plot", help="overlay ground-truth and predicted midlines on a slice")
    p.add_argument("--study", type=Path, required=True)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--slice", type=_slice_arg, default="auto", help="slice index, or 'auto' for the MLS slice")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def cmd_synth_gen(args) -> int:
    from .data_model import save_annotations, save_study
    from .synth import gen_dataset

    data = gen_dataset(args.n, args.slices, args.positive_frac, args.seed, size=(args.size, args.size))
    args.out.mkdir(parents=True, exist_ok=True)
    n_pos = 0
    for study, ann in data:
        d = args.out / study.id
        save_study(d, study)
        save_annotations(d / "annotation.json", ann)
        n_pos += ann.gt_mls_mm is not None and ann.gt_mls_mm >= 5.0
    _emit({"out": str(args.out), "n_studies": len(data), "positive_fraction": n_pos / len(data)})
    return 0


def cmd_train(args) -> int:
    from . import network, pipeline
    from .training import LossWeights, ModelConfig, TrainConfig, load_config, train, write_history

    if args.config is not None:
        tcfg, mcfg, weights = load_config(args.config)
    else:
        tcfg, mcfg, weights = TrainConfig(), ModelConfig(), LossWeights()
    if args.seed is not None:
        tcfg, mcfg = replace(tcfg, seed=args.seed), replace(mcfg, seed=args.seed)

    studies = pipeline.load_labelled(args.data)
    if not studies:
        raise ValueError(f"no annotated studies under {args.data}")
    order = np.random.default_rng(tcfg.seed).permutation(len(studies))
    n_val = int(round(args.val_frac * len(studies)))
    if n_val >= len(studies):
        raise ValueError("validation split leaves no training studies")
    val_ids, train_ids = order[:n_val], order[n_val:]

    def samples(ids):
        out = []
        for i in ids:
            out.extend(pipeline.pad_samples(pipeline.training_samples(*studies[i]), mcfg.input_size))
        return out

    log.info("training on %d studies, validating on %d", len(train_ids), len(val_ids))
    result = train(samples(train_ids), tcfg, mcfg, weights, val_dataset=samples(val_ids) or None)
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt = args.out / "model.ckpt"
    network.save_checkpoint(ckpt, result.model, extra={"best_iteration": result.best_iteration,
                                                       "best_val_rmses": result.best_val_rmses})
    write_history(args.out / "history.csv", result.history)
    _emit({"checkpoint": str(ckpt), "history": str(args.out / "history.csv"),
           "best_iteration": result.best_iteration, "best_val_rmses": result.best_val_rmses,
           "final_total": result.history[-1]["total"] if result.history else None})
    return 0


def cmd_predict(args) -> int:
    from .data_model import load_study, save_predictions
    from .network import load_checkpoint
    from .pipeline import predict_study

    if not 0 <= args.limits_threshold < 1:
        raise ValueError("--limits-threshold must lie in [0, 1)")
    if args.mls_threshold_mm < 0:
        raise ValueError("--mls-threshold-mm must be non-negative")
    model, _ = load_checkpoint(args.model)
    study = load_study(args.study)
    pred = predict_study(model, study, args.coverage, args.limits_threshold, args.mls_threshold_mm)
    if args.out.parent != Path(""):
        args.out.parent.mkdir(parents=True, exist_ok=True)
    save_predictions(args.out, pred)
    _emit({"id": pred.id, "mls_mm": pred.mls_mm, "argmax_slice": pred.argmax_slice, "significant": pred.significant})
    return 0


def cmd_evaluate(args) -> int:
    from .data_model import load_predictions, write_json
    from .pipeline import evaluate, load_labelled

    if not args.pred_dir.is_dir():
        raise FileNotFoundError(f"prediction directory {args.pred_dir} not found")
    preds = {}
    for f in sorted(args.pred_dir.rglob("*.json")):
        try:
            p = load_predictions(f)
        except (ValueError, KeyError) as exc:
            log.warning("skipping %s: %s", f, exc)
            continue
        preds[p.id] = p
    triples = [(s, a, preds[s.id]) for s, a in load_labelled(args.gt_dir) if s.id in preds]
    if not triples:
        raise ValueError("no studies with both a prediction and ground truth")
    report = evaluate(triples, args.mls_threshold_mm)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_json(args.out, report)
    _emit(report)
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .data_model import ANNOTATION_NAME, load_annotations, load_predictions, load_study
    from .preprocess import Transform, preprocess_slice, resample_annotation

    study = load_study(args.study)
    pred = load_predictions(args.pred)
    if len(pred.slices) != study.volume.shape[0]:
        raise ValueError("prediction and study disagree in slice count")
    k = args.slice
    if k == "auto":
        k = pred.argmax_slice if pred.argmax_slice is not None else 0
    if k >= len(pred.slices):
        raise ValueError(f"slice {k} out of range")
    s = pred.slices[k]
    pre = preprocess_slice(study.volume[k], study.spacing_mm[1:])

    fig, ax = plt.subplots(figsize=(5, 5), dpi=120)
    ax.imshow(pre.image, cmap="gray")
    if (args.study / ANNOTATION_NAME).is_file():
        gt = resample_annotation(load_annotations(args.study, study).slices[k], pre.transform, pre.image.shape[0])
        if gt.interval is not None:
            ax.plot(gt.xs, gt.rows, "-", color="red", lw=1.2, label="ground truth")
    if s.interval is not None:
        rows = np.arange(s.interval[0], s.interval[1] + 1)
        ax.fill_betweenx(rows, s.lower[rows], s.upper[rows], color="gold", alpha=0.35, lw=0,
                         label=f"{int(round(pred.coverage * 100))}% band")
        ax.plot(s.curve[rows], rows, "--", color="gold", lw=1.2, label="prediction")
    title = f"{study.id} slice {k}"
    if s.slice_mls_mm is not None:
        title += f": MLS {s.slice_mls_mm:.1f} mm"
    ax.set_title(title, fontsize=9)
    ax.set_axis_off()
    ax.legend(loc="lower right", fontsize=7)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    _emit({"out": str(args.out), "slice": k})
    return 0


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
}


def run(args: argparse.Namespace) -> int:
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"midline-kit {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
