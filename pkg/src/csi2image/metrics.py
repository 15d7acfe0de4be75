"""Reconstruction fidelity metrics and their report aggregation.

All pixel metrics operate on [0, 255]-scale float arrays at the model's
native resolution. SSIM works on the ITU-R 601 luma channel with 8x8
sliding windows and population (ddof=0) window statistics. FID fits
Gaussians to feature embeddings; values are only comparable between
feature sets produced by the same extractor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import torch
from torch import nn

log = logging.getLogger(__name__)

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 8
SSIM_C1 = (0.01 * 255.0) ** 2
SSIM_C2 = (0.03 * 255.0) ** 2

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    """Root mean squared error over all channels and pixels."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 dB for identical images."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(20.0 * np.log10(max_val) - 10.0 * np.log10(mse), PSNR_CAP_DB)


def luma(image: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma of an HxWx3 image; 2-D input passes through."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image @ LUMA_WEIGHTS


def _box_sums(x: np.ndarray, w: int) -> np.ndarray:
    """Sums over every w x w window (valid positions only), via integral image."""
    c = np.zeros((x.shape[0] + 1, x.shape[1] + 1), dtype=np.float64)
    c[1:, 1:] = x.cumsum(axis=0).cumsum(axis=1)
    return c[w:, w:] - c[:-w, w:] - c[w:, :-w] + c[:-w, :-w]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM over 8x8 sliding windows of the luma channel."""
    ya, yb = luma(a), luma(b)
    if ya.shape != yb.shape:
        raise ValueError(f"shape mismatch: {ya.shape} vs {yb.shape}")
    w = SSIM_WINDOW
    if ya.shape[0] < w or ya.shape[1] < w:
        raise ValueError(f"image {ya.shape} smaller than the {w}x{w} SSIM window")
    n = w * w
    mu_a = _box_sums(ya, w) / n
    mu_b = _box_sums(yb, w) / n
    var_a = _box_sums(ya * ya, w) / n - mu_a**2
    var_b = _box_sums(yb * yb, w) / n - mu_b**2
    cov = _box_sums(ya * yb, w) / n - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    )
    return float(ssim_map.mean())


@dataclass
class FeatureSet:
    """Feature embeddings of an image set under one fixed extractor."""

    features: np.ndarray  # (N, K)
    extractor_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D (N, K) matrix")
        n, k = self.features.shape
        if n < k + 1:
            log.warning(
                "FeatureSet %s: %d samples for %d feature dims; "
                "covariance is ill-conditioned, FID may be unstable",
                self.extractor_id, n, k,
            )


def fid(real: FeatureSet, fake: FeatureSet, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ||mu_r - mu_f||^2 + Tr(S_r + S_f - 2 (S_r S_f)^(1/2)), with a small
    diagonal offset retried when the matrix square root degenerates.
    """
    if real.extractor_id != fake.extractor_id:
        raise ValueError(
            f"feature sets from different extractors: "
            f"{real.extractor_id!r} vs {fake.extractor_id!r}"
        )
    if real.features.shape[1] != fake.features.shape[1]:
        raise ValueError("feature dimensionality mismatch")

    mu_r, mu_f = real.features.mean(axis=0), fake.features.mean(axis=0)
    sigma_r = np.cov(real.features, rowvar=False)
    sigma_f = np.cov(fake.features, rowvar=False)
    sigma_r = np.atleast_2d(sigma_r)
    sigma_f = np.atleast_2d(sigma_f)

    diff = mu_r - mu_f
    covmean, _ = scipy.linalg.sqrtm(sigma_r @ sigma_f, disp=False)
    if not np.isfinite(covmean).all():
        offset = np.eye(sigma_r.shape[0]) * eps
        covmean, _ = scipy.linalg.sqrtm((sigma_r + offset) @ (sigma_f + offset), disp=False)
        if not np.isfinite(covmean).all():
            cond = np.linalg.cond(sigma_r @ sigma_f)
            raise FloatingPointError(
                f"matrix square root failed even with regularization "
                f"(condition number {cond:.3e})"
            )
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    value = diff @ diff + np.trace(sigma_r) + np.trace(sigma_f) - 2.0 * np.trace(covmean)
    return float(max(value, 0.0))


# --- feature extractors -------------------------------------------------------

class TinyRandomConv(nn.Module):
    """Fixed-seed random convolutional features for desk-scale FID checks.

    Not a perceptual metric: a frozen random projection that makes FID
    computable and comparable in tests without pretrained weights.
    """

    EXTRACTOR_ID = "tiny-random-conv"
    INPUT_SIZE = 64
    FEATURE_DIM = 32

    def __init__(self, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(16, 32, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(32, self.FEATURE_DIM, 4, stride=2, padding=1),
            nn.AdaptiveAvgPool2d(1),
        )
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.2)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def extract(self, images: Sequence[np.ndarray]) -> FeatureSet:
        """Embed HxWx3 [0,255] images; returns an (N, 32) feature set."""
        feats = []
        for img in images:
            x = torch.as_tensor(np.asarray(img, dtype=np.float32) / 255.0)
            x = x.permute(2, 0, 1).unsqueeze(0)
            x = torch.nn.functional.interpolate(
                x, size=(self.INPUT_SIZE, self.INPUT_SIZE),
                mode="bilinear", align_corners=False,
            )
            feats.append(self.net(x).flatten().numpy())
        return FeatureSet(features=np.stack(feats), extractor_id=self.EXTRACTOR_ID)


class InceptionV3Features:
    """Inception-v3 pool3 features (2048-d) from a user-supplied weights file.

    Weights are never downloaded; pass the path to a torchvision-format
    state dict. FID values from this extractor follow the common
    inception-based convention (299x299 bilinear input, [-1, 1] scaling).
    """

    EXTRACTOR_ID = "inception-v3-pool3"
    INPUT_SIZE = 299

    def __init__(self, weights_path: Optional[str | Path] = None):
        try:
            from torchvision.models import inception_v3
        except ImportError as exc:
            raise ImportError(
                "torchvision is required for the inception FID extractor"
            ) from exc
        self.model = inception_v3(weights=None, aux_logits=True, init_weights=False)
        if weights_path is not None:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            self.model.load_state_dict(state)
        else:
            log.warning(
                "inception extractor constructed without weights: features are "
                "untrained and FID values are not comparable to published numbers"
            )
        self.model.fc = nn.Identity()
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def extract(self, images: Sequence[np.ndarray]) -> FeatureSet:
        feats = []
        for img in images:
            x = torch.as_tensor(np.asarray(img, dtype=np.float32) / 255.0)
            x = x.permute(2, 0, 1).unsqueeze(0)
            x = torch.nn.functional.interpolate(
                x, size=(self.INPUT_SIZE, self.INPUT_SIZE),
                mode="bilinear", align_corners=False,
            )
            feats.append(self.model(x * 2.0 - 1.0).flatten().numpy())
        return FeatureSet(features=np.stack(feats), extractor_id=self.EXTRACTOR_ID)


def create_extractor(spec: str):
    """Build a feature extractor from an id or 'inception-v3-pool3:<weights>'."""
    if spec == TinyRandomConv.EXTRACTOR_ID:
        return TinyRandomConv()
    if spec == InceptionV3Features.EXTRACTOR_ID:
        return InceptionV3Features()
    if spec.startswith(InceptionV3Features.EXTRACTOR_ID + ":"):
        return InceptionV3Features(spec.split(":", 1)[1])
    raise ValueError(f"unknown FID extractor {spec!r}")


# --- per-variant evaluation ---------------------------------------------------

@dataclass
class VariantMetrics:
    variant: str
    psnr_mean: float = float("nan")
    psnr_std: float = float("nan")
    ssim_mean: float = float("nan")
    ssim_std: float = float("nan")
    rmse_mean: float = float("nan")
    rmse_std: float = float("nan")
    fid_mean: float = float("nan")
    fid_std: float = float("nan")
    n_runs: int = 0
    single_run_std: bool = False
    failed: bool = False


@dataclass
class MetricsReport:
    rows: list[VariantMetrics] = field(default_factory=list)

    CSV_COLUMNS = (
        "variant", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std",
        "rmse_mean", "rmse_std", "fid_mean", "fid_std",
    )

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(self.CSV_COLUMNS) + "\n")
            for r in self.rows:
                if r.failed:
                    fh.write(f"{r.variant},failed,,,,,,,\n")
                    continue
                vals = [
                    f"{getattr(r, c):.6f}" for c in self.CSV_COLUMNS[1:]
                ]
                fh.write(",".join([r.variant] + vals) + "\n")


def _mean_std(values: list[float]) -> tuple[float, float, bool]:
    if len(values) == 1:
        return values[0], 0.0, True
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)), False


def evaluate_variant(
    models: Sequence,
    dataset,
    variant: str,
    extractor=None,
) -> VariantMetrics:
    """Reconstruct every eligible test sample per run and aggregate metrics.

    `models` holds one TrainedModel (or checkpoint path) per training run;
    metrics are averaged per run and reported as mean +- sample std across
    runs. FID compares each run's reconstructions with the ground-truth set.
    """
    from .dataset import to_pixel_range
    from .networks import TrainedModel

    if not models:
        raise ValueError("evaluate_variant needs at least one model")
    loaded = [m if hasattr(m, "infer") else TrainedModel.load(m) for m in models]
    if extractor is None:
        extractor = TinyRandomConv()

    window_len = loaded[0].config.window_len
    image_size = loaded[0].config.image_size
    stats = dataset.ensure_stats(image_size)
    centers = dataset.eligible_centers("test", window_len)
    if len(centers) == 0:
        raise ValueError("test split has no eligible windows at this window length")

    truths = []
    for c in centers:
        sample = dataset.sample(int(c), window_len, image_size)
        truths.append(to_pixel_range(sample.image, stats))
    real_features = extractor.extract(truths)

    psnrs, ssims, rmses, fids = [], [], [], []
    for run_idx, tm in enumerate(loaded):
        per_img = np.empty((len(centers), 3), dtype=np.float64)
        recons = []
        for i, c in enumerate(centers):
            sample = dataset.sample(int(c), window_len, image_size)
            recon = tm.infer(sample.window.values, sample.window.t)
            per_img[i] = (psnr(recon, truths[i]), ssim(recon, truths[i]),
                          rmse(recon, truths[i]))
            recons.append(recon)
        fake_features = extractor.extract(recons)
        psnrs.append(float(per_img[:, 0].mean()))
        ssims.append(float(per_img[:, 1].mean()))
        rmses.append(float(per_img[:, 2].mean()))
        fids.append(fid(real_features, fake_features))
        log.info(
            "run %d: psnr=%.3f ssim=%.4f rmse=%.3f fid=%.3f",
            run_idx, psnrs[-1], ssims[-1], rmses[-1], fids[-1],
        )

    pm, ps, flag = _mean_std(psnrs)
    sm, ss, _ = _mean_std(ssims)
    rm, rs, _ = _mean_std(rmses)
    fm, fs, _ = _mean_std(fids)
    if flag:
        log.warning("variant %s evaluated from a single run: std reported as 0", variant)
    return VariantMetrics(
        variant=variant,
        psnr_mean=pm, psnr_std=ps,
        ssim_mean=sm, ssim_std=ss,
        rmse_mean=rm, rmse_std=rs,
        fid_mean=fm, fid_std=fs,
        n_runs=len(loaded), single_run_std=flag,
    )
