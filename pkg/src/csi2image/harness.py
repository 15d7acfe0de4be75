"""Top-level orchestration: the aggregation-variant ablation, reconstruction
grids, and side-by-side video export with a per-frame 1-SSIM trace.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
from PIL import Image

from .dataset import WindowedDataset, to_pixel_range
from .metrics import MetricsReport, VariantMetrics, create_extractor, evaluate_variant, ssim
from .networks import TrainedModel, VARIANTS, apply_variant
from .training import TrainConfig, TrainingAborted, train_protocol

log = logging.getLogger(__name__)

VIDEO_FOURCC = "FFV1"  # lossless intra-coded; MJPG fallback if unavailable


@dataclass
class AblationPlan:
    variants: tuple[str, ...] = VARIANTS
    config: TrainConfig = field(default_factory=TrainConfig)
    out_dir: Path = Path("ablation")
    fid_extractor: str = "tiny-random-conv"

    def __post_init__(self):
        self.variants = tuple(self.variants)
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variants: {unknown}")
        self.out_dir = Path(self.out_dir)


def _train_variant_worker(
    variant: str, config_dict: dict, dataset_root: str, runs_dir: str
) -> tuple[str, Optional[str], list[str]]:
    """Process-pool entry: train one variant, return (variant, best, checkpoints)."""
    config = TrainConfig.from_dict(config_dict)
    config = replace(config, model=apply_variant(config.model, variant))
    dataset = WindowedDataset(dataset_root)
    try:
        best, records = train_protocol(config, dataset, out_dir=Path(runs_dir))
    except TrainingAborted:
        return variant, None, []
    checkpoints = [str(r.checkpoint_path) for r in records if not r.aborted]
    return variant, str(best.checkpoint_path), checkpoints


def run_ablation(
    plan: AblationPlan, dataset: WindowedDataset, parallel: bool = False
) -> MetricsReport:
    """Train and evaluate every variant under identical data, seeds and config.

    The only configuration bits that differ between rows are the aggregation
    mode and the temporal-encoding flag. A variant whose runs all abort is
    reported as failed while the others proceed. With `parallel`, variants
    train in separate processes, each writing to its own subdirectory.
    """
    plan.out_dir.mkdir(parents=True, exist_ok=True)
    dataset.ensure_stats(plan.config.model.image_size)
    extractor = create_extractor(plan.fid_extractor)
    report = MetricsReport()
    best_models: dict[str, TrainedModel] = {}
    trained: dict[str, tuple[Optional[str], list[str]]] = {}

    if parallel:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=len(plan.variants)) as pool:
            futures = [
                pool.submit(
                    _train_variant_worker, variant, plan.config.to_dict(),
                    str(dataset.root), str(plan.out_dir / variant),
                )
                for variant in plan.variants
            ]
            for fut in futures:
                variant, best_path, checkpoints = fut.result()
                trained[variant] = (best_path, checkpoints)
    else:
        for variant in plan.variants:
            log.info("=== variant %s ===", variant)
            _, best_path, checkpoints = _train_variant_worker(
                variant, plan.config.to_dict(), str(dataset.root),
                str(plan.out_dir / variant),
            )
            trained[variant] = (best_path, checkpoints)

    for variant in plan.variants:
        best_path, checkpoints = trained[variant]
        if best_path is None:
            log.error("variant %s failed: all runs aborted", variant)
            report.rows.append(VariantMetrics(variant=variant, failed=True))
            continue
        row = evaluate_variant(checkpoints, dataset, variant, extractor)
        report.rows.append(row)
        best_models[variant] = TrainedModel.load(best_path)

    report.write_csv(plan.out_dir / "report.csv")
    if best_models:
        write_sample_grids(best_models, dataset, plan.out_dir)
    return report


def write_sample_grids(
    models: dict[str, TrainedModel],
    dataset: WindowedDataset,
    out_dir: Path,
) -> list[Path]:
    """Ground truth next to each variant's reconstruction, for three test samples."""
    any_model = next(iter(models.values()))
    window_len = any_model.config.window_len
    image_size = any_model.config.image_size
    stats = dataset.ensure_stats(image_size)
    centers = dataset.eligible_centers("test", window_len)
    if len(centers) == 0:
        return []
    picks = {
        "first": int(centers[0]),
        "median": int(centers[len(centers) // 2]),
        "last": int(centers[-1]),
    }
    pad = 2
    paths = []
    for name, center in picks.items():
        sample = dataset.sample(center, window_len, image_size)
        tiles = [to_pixel_range(sample.image, stats).astype(np.uint8)]
        for variant in models:
            recon = models[variant].infer(sample.window.values, sample.window.t)
            tiles.append(recon.astype(np.uint8))
        h, w = tiles[0].shape[:2]
        canvas = np.full((h, len(tiles) * (w + pad) - pad, 3), 255, dtype=np.uint8)
        for i, tile in enumerate(tiles):
            canvas[:, i * (w + pad): i * (w + pad) + w] = tile
        path = Path(out_dir) / f"samples_{name}.png"
        Image.fromarray(canvas).save(path)
        paths.append(path)
    return paths


def export_video(
    trained: TrainedModel,
    dataset: WindowedDataset,
    out_path: str | Path,
    split: str = "test",
    fps: float = 30.0,
    start: int = 0,
    count: Optional[int] = None,
) -> tuple[int, Path]:
    """Side-by-side ground-truth/reconstruction video plus a 1-SSIM curve CSV.

    Frames cover a contiguous range of the split's eligible centers. Returns
    the frame count and the CSV path (columns: frame, center, one_minus_ssim).
    """
    out_path = Path(out_path)
    window_len = trained.config.window_len
    image_size = trained.config.image_size
    stats = dataset.ensure_stats(image_size)
    centers = dataset.eligible_centers(split, window_len)[start:]
    if count is not None:
        centers = centers[:count]
    if len(centers) == 0:
        raise ValueError("no eligible samples in the requested range")

    writer = cv2.VideoWriter(
        str(out_path), cv2.VideoWriter_fourcc(*VIDEO_FOURCC), fps,
        (2 * image_size, image_size),
    )
    if not writer.isOpened():
        writer = cv2.VideoWriter(
            str(out_path), cv2.VideoWriter_fourcc(*"MJPG"), fps,
            (2 * image_size, image_size),
        )
        log.warning("FFV1 encoder unavailable; falling back to MJPG")
    if not writer.isOpened():
        raise RuntimeError(f"cannot open a video writer for {out_path}")

    csv_path = out_path.with_suffix(".ssim.csv")
    rows = []
    for i, c in enumerate(centers):
        sample = dataset.sample(int(c), window_len, image_size)
        truth = to_pixel_range(sample.image, stats)
        recon = trained.infer(sample.window.values, sample.window.t)
        rows.append((i, int(c), 1.0 - ssim(recon, truth)))
        frame = np.concatenate(
            [truth.astype(np.uint8), recon.astype(np.uint8)], axis=1
        )
        writer.write(cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))
    writer.release()

    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "center", "one_minus_ssim"])
        for row in rows:
            w.writerow([row[0], row[1], repr(row[2])])
    return len(rows), csv_path
