"""Command-line entry points.

Subcommands: synth, train, sample, eval, gradcheck, pair, stats.
Exit codes: 0 ok, 1 usage, 2 config, 3 runtime/NaN, 4 I/O.

Heavy modules are imported inside the command handlers so that
--device-threads can cap the BLAS thread pool before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import ConfigError, DataError, TrainingDiverged, UsageError

DATA_DIR_ENV = "LRGAN_DATA_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="lrgan", description=__doc__)
    parser.add_argument("--device-threads", type=int, default=0, metavar="N",
                        help="cap BLAS/OpenMP threads (set before numpy loads)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="build a synthetic digit dataset cache")
    p.add_argument("--dataset", choices=("mnist_one", "mnist_two"), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output cache file (.lrds)")
    p.add_argument("--digits", default=None,
                   help="IDX digit directory, or 'synthetic' (default: "
                        f"${DATA_DIR_ENV} if set, else synthetic)")
    p.add_argument("--png", default=None, help="optional contact-sheet PNG")

    p = sub.add_parser("train", help="adversarial training run")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--variant", default=None,
                   choices=("full", "no_transform", "no_mask", "conditional"))

    p = sub.add_parser("sample", help="emit intermediate-output grids from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default="8x8", metavar="RxC")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="compute evaluation metrics")
    p.add_argument("--cache", required=True, help="labeled real dataset cache")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None, help="generator to score")
    p.add_argument("--gen-cache", default=None,
                   help="labeled generated dataset (per-category protocol)")
    p.add_argument("--judges", default=None, help="judge-label CSV to aggregate")
    p.add_argument("--splits", type=int, default=10)
    p.add_argument("--epochs", type=int, default=6, help="classifier training epochs")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="run the 64-bit finite-difference suite")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("pair", help="minimum-cost perfect matching of two image sets")
    p.add_argument("--a", required=True, help="cache file or PNG folder")
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True, help="assignment CSV")
    p.add_argument("--size", type=int, default=32, help="resize for PNG folders")

    p = sub.add_parser("stats", help="transform histograms and mask binariness")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _resolve_data_path(path_str: str) -> Path:
    path = Path(path_str)
    if path.exists():
        return path
    root = os.environ.get(DATA_DIR_ENV)
    if root and (Path(root) / path).exists():
        return Path(root) / path
    return path


def _load_image_set(path_str: str, size: int):
    from . import datasynth, io_utils

    path = _resolve_data_path(path_str)
    if path.is_dir():
        return io_utils.load_png_folder(path, size)
    samples = datasynth.read_cache(path)
    return datasynth.stack_images(samples)


# ---------------------------------------------------------------------------
# command handlers
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from . import datasynth, io_utils

    digits_arg = args.digits
    if digits_arg is None:
        digits_arg = os.environ.get(DATA_DIR_ENV, "synthetic")
    if digits_arg != "synthetic":
        digits_arg = str(_resolve_data_path(digits_arg))
    digits, labels = datasynth.load_digit_source(digits_arg)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = io_utils.RunManifest(out.parent)
    manifest.append("config", command="synth", dataset=args.dataset, n=args.n,
                    seed=args.seed, digits=str(digits_arg))
    synth = datasynth.synth_mnist_one if args.dataset == "mnist_one" else datasynth.synth_mnist_two
    samples = synth(digits, labels, args.n, args.seed)
    datasynth.write_cache(out, samples)
    manifest.record_artifact(out)
    if args.png:
        images = datasynth.stack_images(samples[:64])
        io_utils.write_png_grid(images, cols=8, path=args.png)
        manifest.record_artifact(args.png)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def _dataset_for_training(model_config, train_config, data_kv) -> "object":
    from . import datasynth

    if "cache" in data_kv:
        samples = datasynth.read_cache(_resolve_data_path(data_kv["cache"]))
        return datasynth.stack_images(samples)
    digits_arg = data_kv.get("digits", os.environ.get(DATA_DIR_ENV, "synthetic"))
    if digits_arg != "synthetic":
        digits_arg = str(_resolve_data_path(digits_arg))
    digits, labels = datasynth.load_digit_source(digits_arg)
    n = train_config.sample_count or 5000
    synth = (datasynth.synth_mnist_one if model_config.dataset == "mnist_one"
             else datasynth.synth_mnist_two)
    return datasynth.stack_images(synth(digits, labels, n, train_config.seed))


def cmd_train(args) -> int:
    from . import io_utils, training
    from .io_utils import RunManifest

    model_config, train_config, data_kv = io_utils.load_config(args.config)
    if args.seed is not None:
        train_config.seed = args.seed
    if args.variant is not None:
        train_config.variant = args.variant
        model_config = model_config.with_variant(args.variant)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out)
    manifest.record_config(train_config, extra={"command": "train",
                                                "resume": args.resume or ""})
    images = _dataset_for_training(model_config, train_config, data_kv)

    def on_epoch(run):
        records = run.sample_records(64, tag=run.epoch)
        final = records[-1].composite.data
        grid_path = out / f"samples_epoch{run.epoch:03d}.png"
        io_utils.write_png_grid(final, cols=8, path=grid_path)
        manifest.record_artifact(grid_path)
        manifest.record_params(training._model_state(run.gen, run.disc), run.global_step)
        manifest.append("epoch", epoch=run.epoch, global_step=run.global_step)

    summary = training.train(images, train_config, out, model_config,
                             resume=args.resume, on_epoch=on_epoch)
    manifest.record_artifact(summary["checkpoint"])
    print(f"finished: {summary}")
    return 0


def _restore_models(checkpoint_path):
    """Rebuild generator/discriminator exactly as checkpointed."""
    from . import training

    kv, model_arrays, _, _ = training.load_checkpoint(checkpoint_path)
    train_config = training.TrainConfig.from_kv(
        {k[6:]: v for k, v in kv.items() if k.startswith("train.")})
    model_config = train_config.model_config()
    gen, disc = training.build_models(model_config, train_config.seed)
    training._load_model_state(gen, disc, model_arrays)
    return gen, disc, train_config, model_config


def cmd_sample(args) -> int:
    import numpy as np

    from . import diffcore as dc
    from . import io_utils

    try:
        rows, cols = (int(v) for v in args.grid.lower().split("x"))
    except ValueError:
        raise UsageError(f"--grid expects RxC, got {args.grid!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = io_utils.RunManifest(out)
    manifest.append("config", command="sample", checkpoint=str(args.checkpoint),
                    grid=args.grid, seed=args.seed)

    gen, _, _, model_config = _restore_models(args.checkpoint)
    n = rows * cols
    rng = np.random.default_rng(args.seed)
    gen.eval()
    with dc.no_grad():
        records = gen.generate(gen.sample_z(rng, n))
    dc.reset_graph()

    def emit(name, tensor):
        path = out / f"{name}.png"
        io_utils.write_png_grid(tensor, cols=cols, path=path)
        manifest.record_artifact(path)

    emit("background", records[0].composite.data)
    for t, rec in enumerate(records[1:], start=1):
        suffix = f"_t{t}" if len(records) > 2 else ""
        emit(f"appearance{suffix}", rec.appearance.data)
        if rec.mask is not None:
            emit(f"mask{suffix}", rec.mask.data * 2.0 - 1.0)
            emit(f"carved{suffix}", rec.mask.data * rec.appearance.data)
        emit(f"transformed{suffix}", rec.appearance_warped.data
             * (rec.mask_warped.data if rec.mask_warped is not None else 1.0))
        emit(f"composite{suffix}", rec.composite.data)
    print(f"wrote grids to {out}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from . import datasynth, io_utils, metrics

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = io_utils.RunManifest(out)
    manifest.append("config", command="eval", cache=str(args.cache),
                    checkpoint=str(args.checkpoint or ""), judges=str(args.judges or ""),
                    kl_direction="KL(real || generated), nats")
    lines = ["metric,value"]

    real = datasynth.read_cache(_resolve_data_path(args.cache))
    images = datasynth.stack_images(real)
    labels = datasynth.stack_labels(real)
    half = len(real) // 2
    clf_cfg = metrics.ClassifierConfig(epochs=args.epochs, seed=args.seed,
                                       batch_size=min(64, max(2, half)))
    clf_real = metrics.train_classifier(images[:half], labels[:half],
                                        _disc_arch_for(images), clf_cfg)
    acc_val = metrics.accuracy(clf_real, images[half:], labels[half:])
    lines.append(f"classifier_val_accuracy,{acc_val:.4f}")

    if args.gen_cache:
        gen_set = datasynth.read_cache(_resolve_data_path(args.gen_cache))
        gen_images = datasynth.stack_images(gen_set)
        gen_labels = datasynth.stack_labels(gen_set)
        clf_gen = metrics.train_classifier(gen_images, gen_labels,
                                           _disc_arch_for(images), clf_cfg)
        acc_r, acc_g = metrics.adversarial_accuracy(clf_real, clf_gen,
                                                    images[half:], labels[half:])
        div = metrics.adversarial_divergence(clf_real, clf_gen, images[half:])
        lines.append(f"adversarial_accuracy_real,{acc_r:.4f}")
        lines.append(f"adversarial_accuracy_generated,{acc_g:.4f}")
        lines.append(f"adversarial_divergence_nats,{div:.4f}")

    if args.checkpoint:
        import lrgan.diffcore as dc

        gen, disc, train_config, model_config = _restore_models(args.checkpoint)
        rng = np.random.default_rng(args.seed)
        gen.eval()
        with dc.no_grad():
            records = gen.generate(gen.sample_z(rng, 256))
        dc.reset_graph()
        fake_images = records[-1].composite.data
        score_mean, score_std = metrics.classifier_score(clf_real, fake_images, args.splits)
        lines.append(f"classifier_score_mean,{score_mean:.4f}")
        lines.append(f"classifier_score_std,{score_std:.4f}")
        if records[-1].mask is not None:
            lines.append(f"mask_binariness,{metrics.mask_binariness(records[-1].mask.data):.4f}")
        nn_acc = metrics.nn_feature_eval(disc, images[:half], labels[:half],
                                         images[half:], labels[half:])
        lines.append(f"nn_feature_accuracy,{nn_acc:.4f}")

    if args.judges:
        rows = metrics.aggregate_judge_file(_resolve_data_path(args.judges))
        judge_csv = out / "quality_levels.csv"
        with judge_csv.open("w") as f:
            f.write("image_id,majority_label,level\n")
            for image_id, majority, level in rows:
                f.write(f"{image_id},{'NR' if majority is None else majority},{level}\n")
        manifest.record_artifact(judge_csv)
        levels = [lvl for _, _, lvl in rows]
        lines.append(f"judged_images,{len(rows)}")
        lines.append(f"mean_quality_level,{np.mean(levels):.4f}")

    report = out / "report.csv"
    report.write_text("\n".join(lines) + "\n")
    manifest.record_artifact(report)
    print("\n".join(lines))
    return 0


def _disc_arch_for(images) -> str:
    from .generator import preset

    size = images.shape[-1]
    return preset("mnist_one" if size == 32 else "mnist_two").disc_arch


def cmd_gradcheck(args) -> int:
    from .verification import run_gradient_suite

    reports = run_gradient_suite(seeds=args.seeds, tolerance=args.tolerance)
    worst = 0.0
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:24s} max_rel_err={r.max_rel_error:.3e}")
        worst = max(worst, r.max_rel_error)
    ok = all(r.passed for r in reports)
    print(f"{'OK' if ok else 'FAILED'}: {len(reports)} ops, worst {worst:.3e}, "
          f"tolerance {args.tolerance:g}")
    return 0 if ok else 3


def cmd_pair(args) -> int:
    from . import io_utils, metrics

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = io_utils.RunManifest(out.parent)
    manifest.append("config", command="pair", a=str(args.a), b=str(args.b))
    set_a = _load_image_set(args.a, args.size)
    set_b = _load_image_set(args.b, args.size)
    assignment, total = metrics.hungarian_pair(set_a, set_b)
    with out.open("w") as f:
        f.write("index_a,index_b\n")
        for i, j in enumerate(assignment):
            f.write(f"{i},{j}\n")
    manifest.record_artifact(out)
    print(f"matched {len(assignment)} pairs, total L2 cost {total:.4f}")
    return 0


def cmd_stats(args) -> int:
    import numpy as np

    from . import diffcore as dc
    from . import io_utils, metrics

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = io_utils.RunManifest(out)
    manifest.append("config", command="stats", checkpoint=str(args.checkpoint), n=args.n)

    gen, _, _, model_config = _restore_models(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    gen.eval()
    poses, masks = [], []
    with dc.no_grad():
        for lo in range(0, args.n, 64):
            records = gen.generate(gen.sample_z(rng, min(64, args.n - lo)))
            for rec in records[1:]:
                if rec.pose is not None:
                    poses.append(rec.pose.data)
                if rec.mask is not None:
                    masks.append(rec.mask.data)
    dc.reset_graph()

    lines = []
    if masks:
        binariness = metrics.mask_binariness(np.concatenate(masks))
        lines.append(f"mask_binariness,{binariness:.4f}")
    if poses:
        hist = metrics.transform_histograms(np.concatenate(poses))
        csv_path = out / "transform_histograms.csv"
        metrics.write_histogram_csv(hist, csv_path)
        manifest.record_artifact(csv_path)
        png_path = out / "transform_histograms.png"
        metrics.plot_histograms(hist, png_path)
        manifest.record_artifact(png_path)
        for name, (counts, _) in hist.items():
            spread = int((counts > 0).sum())
            lines.append(f"occupied_bins_{name},{spread}")
    report = out / "stats.csv"
    report.write_text("metric,value\n" + "\n".join(lines) + "\n")
    manifest.record_artifact(report)
    print("\n".join(lines))
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "pair": cmd_pair,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if args.device_threads > 0:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.device_threads)
    try:
        return _HANDLERS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"runtime error: {e} (diagnostics: {e.diagnostics})", file=sys.stderr)
        return 3
    except DataError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4
    except RuntimeError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
