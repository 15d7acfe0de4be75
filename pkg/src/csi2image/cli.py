"""Command-line entry point.

Subcommands: ingest, synth, train, search, eval, ablate, video.
Exit codes: 0 success, 1 fatal input error, 2 training aborted,
3 partial ablation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .dataset import WindowedDataset, write_dataset_dir
from .harness import AblationPlan, export_video, run_ablation
from .ingest import (
    DEFAULT_SUBCARRIER_INDICES,
    N_SUBCARRIERS,
    DataError,
    amplitude_matrix,
    load_frames,
    pair_nearest,
    parse_csi_log,
    split_contiguous,
    trim_sequence,
)
from .metrics import MetricsReport, create_extractor, evaluate_variant
from .networks import (
    VARIANTS,
    ModelConfig,
    TrainedModel,
    apply_variant,
    default_conv_channels,
)
from .synthetic import SyntheticSpec, make_synthetic
from .training import (
    TrainConfig,
    TrainingAborted,
    grid_search,
    set_deterministic,
    train_protocol,
)

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_TRAINING_ABORTED = 2
EXIT_PARTIAL_ABLATION = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are fatal input errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT_ERROR, f"{self.prog}: error: {message}\n")


def _subcarrier_indices(spec: str) -> list[int]:
    if spec == "default":
        return list(DEFAULT_SUBCARRIER_INDICES)
    if spec == "identity":
        return list(range(N_SUBCARRIERS))
    text = Path(spec).read_text(encoding="utf-8")
    return [int(tok) for tok in text.replace(",", " ").split()]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",")]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


def _load_train_config(args) -> TrainConfig:
    if args.config:
        config = TrainConfig.from_file(args.config)
    else:
        config = TrainConfig()
    overrides = {}
    for key in ("runs", "epochs", "batch_size", "beta", "lr"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        config = replace(config, **overrides)

    model_overrides = {}
    if getattr(args, "window_len", None) is not None:
        model_overrides["window_len"] = args.window_len
    if getattr(args, "image_size", None) is not None:
        size = args.image_size
        model_overrides["image_size"] = size
        try:
            ModelConfig(image_size=size, conv_channels=config.model.conv_channels)
        except ValueError:
            model_overrides["conv_channels"] = default_conv_channels(size)
    if model_overrides:
        config = replace(config, model=replace(config.model, **model_overrides))
    return config


def cmd_ingest(args) -> int:
    indices = _subcarrier_indices(args.subcarriers)
    packets = parse_csi_log(args.csi, indices)
    frames = load_frames(args.images)
    if (args.trim_start is None) != (args.trim_end is None):
        raise DataError("--trim-start and --trim-end must be given together")
    if args.trim_start is not None:
        packets, frames = trim_sequence(packets, frames, args.trim_start, args.trim_end)
    if not packets or not frames:
        raise DataError("no packets or frames to ingest")
    pairs = pair_nearest(packets, frames)
    assignment = split_contiguous(pairs)
    out = write_dataset_dir(
        args.out, amplitude_matrix(packets), pairs, assignment, frames
    )
    counts = assignment.counts()
    print(
        f"ingested {len(packets)} packets / {len(frames)} frames -> {out} "
        f"(train={counts['train']} val={counts['val']} test={counts['test']})"
    )
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_packets=args.packets,
        image_size=args.image_size,
        packet_hz=args.packet_hz,
        frame_hz=args.frame_hz,
        motion_cycles=args.cycles,
        noise_level=args.noise,
    )
    out = make_synthetic(spec, args.seed if args.seed is not None else 0, args.out)
    print(f"synthetic dataset written to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_train_config(args)
    config = replace(config, model=apply_variant(config.model, args.variant))
    dataset = WindowedDataset(args.data)
    best, records = train_protocol(config, dataset, out_dir=Path(args.out))
    n_ok = sum(not r.aborted for r in records)
    print(
        f"{n_ok}/{len(records)} runs finished; best run {best.run_id} "
        f"(val {best.best_val:.4f} at epoch {best.best_epoch}) -> {best.checkpoint_path}"
    )
    return EXIT_OK


def cmd_search(args) -> int:
    base = _load_train_config(args)
    dataset = WindowedDataset(args.data)
    best_config, trials = grid_search(
        dataset,
        grid_b=args.grid_b,
        grid_len=args.grid_L,
        grid_beta=args.grid_beta,
        base=base,
        search_epochs=args.search_epochs,
        search_runs=args.search_runs,
        mode=args.mode,
    )
    for params, loss in trials:
        print(f"b={params['b']:<4} L={params['L']:<4} beta={params['beta']:<4g} "
              f"val={loss:.4f}")
    print(
        f"best: b={best_config.batch_size} L={best_config.model.window_len} "
        f"beta={best_config.beta}"
    )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(best_config.to_dict(), fh, indent=2)
            fh.write("\n")
        print(f"config written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    runs_dir = Path(args.runs_dir)
    checkpoints = sorted(runs_dir.glob("run*/best.pt"))
    if not checkpoints:
        raise DataError(f"no run checkpoints under {runs_dir}")
    dataset = WindowedDataset(args.data)
    extractor = create_extractor(args.fid_extractor)
    row = evaluate_variant(checkpoints, dataset, args.variant, extractor)
    report = MetricsReport(rows=[row])
    report.write_csv(args.out)
    print(
        f"{row.variant}: psnr={row.psnr_mean:.2f}+-{row.psnr_std:.2f} "
        f"ssim={row.ssim_mean:.4f}+-{row.ssim_std:.4f} "
        f"rmse={row.rmse_mean:.2f}+-{row.rmse_std:.2f} "
        f"fid={row.fid_mean:.2f}+-{row.fid_std:.2f} (n={row.n_runs})"
    )
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_train_config(args)
    plan = AblationPlan(
        variants=tuple(args.variants.split(",")),
        config=config,
        out_dir=Path(args.out),
        fid_extractor=args.fid_extractor,
    )
    dataset = WindowedDataset(args.data)
    report = run_ablation(plan, dataset, parallel=args.parallel_variants)
    print(f"report written to {plan.out_dir / 'report.csv'}")
    if any(r.failed for r in report.rows):
        failed = [r.variant for r in report.rows if r.failed]
        print(f"variants failed: {','.join(failed)}", file=sys.stderr)
        return EXIT_PARTIAL_ABLATION
    return EXIT_OK


def cmd_video(args) -> int:
    trained = TrainedModel.load(args.model)
    dataset = WindowedDataset(args.data)
    n, csv_path = export_video(
        trained, dataset, args.out,
        split=args.split, fps=args.fps, start=args.start, count=args.count,
    )
    print(f"{n} frames -> {args.out}; 1-SSIM curve -> {csv_path}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="csi2image",
                     description="Image synthesis from WiFi CSI spectrograms")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded deterministic execution")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a CSI log + image manifest into a dataset")
    p.add_argument("--csi", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trim-start", type=int, default=None, metavar="US")
    p.add_argument("--trim-end", type=int, default=None, metavar="US")
    p.add_argument("--subcarriers", default="default",
                   help="'default' (64-slot L-LTF layout), 'identity', or an index file")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--packets", type=int, default=2000)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--packet-hz", type=float, default=100.0)
    p.add_argument("--frame-hz", type=float, default=30.0)
    p.add_argument("--cycles", type=float, default=3.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_synth)

    def add_train_options(p, with_variant=True):
        p.add_argument("--data", required=True)
        if with_variant:
            p.add_argument("--variant", choices=VARIANTS, default="ct")
        p.add_argument("--config", default=None, help="TrainConfig JSON file")
        p.add_argument("--runs", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
        p.add_argument("--beta", type=float, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--window-len", type=int, default=None, dest="window_len")
        p.add_argument("--image-size", type=int, default=None, dest="image_size")

    p = sub.add_parser("train", help="run the multi-run training protocol")
    add_train_options(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="hyperparameter search on the validation split")
    add_train_options(p, with_variant=False)
    p.add_argument("--grid-b", type=_int_list, default=[16, 32, 64, 128, 256, 512])
    p.add_argument("--grid-L", type=_int_list, default=[51, 101, 151, 201, 251, 301])
    p.add_argument("--grid-beta", type=_float_list, default=[1.0, 2.0, 4.0, 6.0])
    p.add_argument("--mode", choices=("coord", "full"), default="coord")
    p.add_argument("--search-epochs", type=int, default=5)
    p.add_argument("--search-runs", type=int, default=1)
    p.add_argument("--out", default=None, help="write the winning config JSON here")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="evaluate trained runs on the test split")
    p.add_argument("--runs-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=VARIANTS, required=True)
    p.add_argument("--fid-extractor", default="tiny-random-conv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train + evaluate all aggregation variants")
    add_train_options(p, with_variant=False)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--fid-extractor", default="tiny-random-conv")
    p.add_argument("--parallel-variants", action="store_true",
                   help="train variants in separate processes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("video", help="export a ground-truth/reconstruction video")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_video)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.deterministic:
        set_deterministic()
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING_ABORTED


if __name__ == "__main__":
    sys.exit(main())
