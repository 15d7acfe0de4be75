"""Encoder/decoder networks mapping images and CSI windows to a shared latent.

Image path: stride-2 conv blocks (batch norm + leaky ReLU) halve the spatial
size per block while channels grow along `conv_channels`; a two-layer MLP maps
the flattened features to posterior parameters. The decoder mirrors this with
transpose convolutions and a linear output layer.

CSI path: a per-packet MLP embeds each 52-amplitude column, an aggregation
step (uniform weighing / Gaussian weighing / concatenation) collapses or
flattens the time axis, and a second MLP produces posterior parameters.
An optional sinusoidal encoding of the window's temporal index is
concatenated to both paths' pre-head features.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .dataset import NormStats, to_pixel_range
from .ingest import N_SUBCARRIERS, DataError
from .latent import GaussianPosterior

AGGREGATIONS = ("uw", "gw", "c")
VARIANTS = ("uw", "gw", "c", "ct")

CONV_KERNEL = 4  # stride 2, padding 1: exact spatial halving per block


@dataclass
class ModelConfig:
    latent_dim: int = 64
    embed_dim: int = 64
    window_len: int = 151
    freq_count: int = 6
    aggregation: str = "c"
    temporal: bool = False
    conv_channels: tuple[int, ...] = (16, 32, 64, 128, 256, 512)
    image_size: int = 128
    head_hidden: int = 256
    leaky_slope: float = 0.2

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        self.validate()

    def validate(self) -> None:
        if self.latent_dim < 1 or self.embed_dim < 1:
            raise ValueError("latent_dim and embed_dim must be positive")
        if self.window_len < 1 or self.window_len % 2 == 0:
            raise ValueError(f"window_len must be odd and positive, got {self.window_len}")
        if self.freq_count < 0:
            raise ValueError("freq_count must be non-negative")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if not self.conv_channels or any(
            b <= a for a, b in zip(self.conv_channels, self.conv_channels[1:])
        ):
            raise ValueError("conv_channels must be strictly increasing")
        n = len(self.conv_channels)
        if self.image_size % (1 << n) != 0 or self.image_size // (1 << n) < 2:
            raise ValueError(
                f"image_size {self.image_size} must be divisible by 2^{n} "
                f"with at least 2 pixels left"
            )

    @property
    def encoded_spatial(self) -> int:
        return self.image_size // (1 << len(self.conv_channels))

    @property
    def temporal_width(self) -> int:
        return 2 * self.freq_count if self.temporal else 0


def default_conv_channels(image_size: int) -> tuple[int, ...]:
    """Deepest prefix of the standard channel ladder that fits an image size."""
    full = (16, 32, 64, 128, 256, 512)
    for n in range(len(full), 0, -1):
        if image_size % (1 << n) == 0 and image_size // (1 << n) >= 2:
            return full[:n]
    raise ValueError(f"no conv stack fits image size {image_size}")


def apply_variant(config: ModelConfig, variant: str) -> ModelConfig:
    """Return a copy of config with aggregation/temporal set for a variant name."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    d = asdict(config)
    d["aggregation"] = "c" if variant == "ct" else variant
    d["temporal"] = variant == "ct"
    return ModelConfig(**d)


def temporal_encode(t, freq_count: int, window_len: int) -> torch.Tensor:
    """Sinusoidal encoding [sin(2^k pi t / 3L), cos(2^k pi t / 3L)]_{k<F}.

    The index t is scaled by three times the window length, so the lowest
    frequency spans context beyond the window itself. Accepts a scalar or a
    batch tensor of t values; output has a trailing dimension of 2F.
    """
    t = torch.as_tensor(t)
    if not torch.is_floating_point(t):
        t = t.to(torch.get_default_dtype())
    if freq_count == 0:
        return t.new_zeros(t.shape + (0,))
    scales = torch.pow(
        2.0, torch.arange(freq_count, dtype=t.dtype)
    ) * math.pi / (3.0 * window_len)
    angles = t.unsqueeze(-1) * scales
    enc = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return enc.flatten(start_dim=-2)


def gaussian_weights(window_len: int, dtype=torch.float32) -> torch.Tensor:
    """Normalized Gaussian window weights with mu = sigma = L/2 over i in 0..L-1."""
    i = torch.arange(window_len, dtype=dtype)
    center = window_len / 2.0
    w = torch.exp(-((i - center) ** 2) / (2.0 * center**2))
    return w / w.sum()


def aggregate(features: torch.Tensor, mode: str) -> torch.Tensor:
    """Collapse (..., L, H) packet features to (..., H) or flatten to (..., L*H).

    uw: plain mean over packets. gw: Gaussian-weighted sum emphasizing the
    window center. c: row-major flatten, keeping full packet order.
    """
    if mode == "uw":
        return features.mean(dim=-2)
    if mode == "gw":
        w = gaussian_weights(features.shape[-2], dtype=features.dtype)
        return (features * w.unsqueeze(-1)).sum(dim=-2)
    if mode == "c":
        return features.flatten(start_dim=-2)
    raise ValueError(f"unknown aggregation mode {mode!r}")


def _mlp(sizes: list[int], slope: float, final_activation: bool) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        layers.append(nn.Linear(a, b))
        if final_activation or i < len(sizes) - 2:
            layers.append(nn.LeakyReLU(slope))
    return nn.Sequential(*layers)


class ImageEncoder(nn.Module):
    """Conv blocks (stride 2, batch norm, leaky ReLU) then an MLP posterior head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        blocks: list[nn.Module] = []
        in_ch = 3
        for ch in config.conv_channels:
            blocks += [
                nn.Conv2d(in_ch, ch, CONV_KERNEL, stride=2, padding=1),
                nn.BatchNorm2d(ch),
                nn.LeakyReLU(config.leaky_slope),
            ]
            in_ch = ch
        self.conv = nn.Sequential(*blocks)
        flat = config.conv_channels[-1] * config.encoded_spatial**2
        self.head = _mlp(
            [flat + config.temporal_width, config.head_hidden, 2 * config.latent_dim],
            config.leaky_slope,
            final_activation=False,
        )

    def forward(
        self, images: torch.Tensor, t_enc: Optional[torch.Tensor] = None
    ) -> GaussianPosterior:
        h = self.conv(images).flatten(start_dim=1)
        if self.config.temporal:
            if t_enc is None:
                raise ValueError("temporal model requires a temporal encoding")
            h = torch.cat([h, t_enc], dim=-1)
        mu, log_var = self.head(h).chunk(2, dim=-1)
        return GaussianPosterior(mu=mu, log_var=log_var)


class ImageDecoder(nn.Module):
    """MLP to the smallest feature map, then mirrored transpose-conv blocks.

    The final transpose convolution outputs normalized-pixel space directly
    (no activation); denormalization restores display range.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rev = tuple(reversed(config.conv_channels))
        s0 = config.encoded_spatial
        self.fc = _mlp(
            [config.latent_dim, config.head_hidden, rev[0] * s0 * s0],
            config.leaky_slope,
            final_activation=True,
        )
        blocks: list[nn.Module] = []
        for a, b in zip(rev, rev[1:]):
            blocks += [
                nn.ConvTranspose2d(a, b, CONV_KERNEL, stride=2, padding=1),
                nn.BatchNorm2d(b),
                nn.LeakyReLU(config.leaky_slope),
            ]
        blocks.append(nn.ConvTranspose2d(rev[-1], 3, CONV_KERNEL, stride=2, padding=1))
        self.deconv = nn.Sequential(*blocks)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        s0 = self.config.encoded_spatial
        h = self.fc(z).reshape(z.shape[0], self.config.conv_channels[-1], s0, s0)
        return self.deconv(h)


class CsiEncoder(nn.Module):
    """Per-packet embedding MLP, aggregation, then an MLP posterior head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.embed = _mlp(
            [N_SUBCARRIERS, config.embed_dim, config.embed_dim],
            config.leaky_slope,
            final_activation=True,
        )
        if config.aggregation == "c":
            agg_width = config.window_len * config.embed_dim
        else:
            agg_width = config.embed_dim
        self.head = _mlp(
            [agg_width + config.temporal_width, config.head_hidden, 2 * config.latent_dim],
            config.leaky_slope,
            final_activation=False,
        )

    def embed_features(self, windows: torch.Tensor) -> torch.Tensor:
        """(B, 52, L) amplitude windows -> (B, L, H) per-packet features."""
        return self.embed(windows.transpose(-1, -2))

    def forward(
        self, windows: torch.Tensor, t_enc: Optional[torch.Tensor] = None
    ) -> GaussianPosterior:
        h = aggregate(self.embed_features(windows), self.config.aggregation)
        if self.config.temporal:
            if t_enc is None:
                raise ValueError("temporal model requires a temporal encoding")
            h = torch.cat([h, t_enc], dim=-1)
        mu, log_var = self.head(h).chunk(2, dim=-1)
        return GaussianPosterior(mu=mu, log_var=log_var)


class MultimodalVae(nn.Module):
    """The full model: both unimodal encoders plus the image decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.image_encoder = ImageEncoder(config)
        self.image_decoder = ImageDecoder(config)
        self.csi_encoder = CsiEncoder(config)

    def temporal_encoding(self, ts: torch.Tensor) -> Optional[torch.Tensor]:
        if not self.config.temporal:
            return None
        return temporal_encode(ts, self.config.freq_count, self.config.window_len)

    def posteriors(
        self, images: torch.Tensor, windows: torch.Tensor, ts: torch.Tensor
    ) -> dict[str, GaussianPosterior]:
        t_enc = self.temporal_encoding(ts)
        return {
            "image": self.image_encoder(images, t_enc),
            "csi": self.csi_encoder(windows, t_enc),
        }

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.image_decoder(z)


@dataclass
class TrainedModel:
    """A trained model plus everything needed to reproduce its outputs."""

    model: MultimodalVae
    config: ModelConfig
    norm_stats: NormStats
    seed: int = 0

    def infer(self, window: np.ndarray, t: float) -> np.ndarray:
        """Reconstruct one image from a CSI window alone (posterior mean).

        Deterministic: no sampling is involved. Returns (S, S, 3) float32
        pixels clipped to [0, 255].
        """
        self.model.eval()
        with torch.no_grad():
            w = torch.as_tensor(np.asarray(window), dtype=torch.float32).unsqueeze(0)
            ts = torch.tensor([float(t)], dtype=torch.float32)
            t_enc = self.model.temporal_encoding(ts)
            q = self.model.csi_encoder(w, t_enc)
            decoded = self.model.decode(q.mu)[0].numpy()
        return to_pixel_range(decoded, self.norm_stats)

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "format_version": 1,
                "config": asdict(self.config),
                "norm_stats": self.norm_stats.to_json(),
                "seed": self.seed,
                "model_state": self.model.state_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "TrainedModel":
        try:
            blob = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as exc:
            raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
        if blob.get("format_version") != 1:
            raise DataError(f"{path}: unsupported checkpoint format")
        cfg_dict = dict(blob["config"])
        cfg_dict["conv_channels"] = tuple(cfg_dict["conv_channels"])
        config = ModelConfig(**cfg_dict)
        model = MultimodalVae(config)
        try:
            model.load_state_dict(blob["model_state"], strict=True)
        except RuntimeError as exc:
            raise DataError(f"{path}: checkpoint does not match its config: {exc}") from exc
        model.eval()
        return cls(
            model=model,
            config=config,
            norm_stats=NormStats.from_json(blob["norm_stats"]),
            seed=int(blob["seed"]),
        )


def infer_image(window: np.ndarray, t: float, trained: TrainedModel) -> np.ndarray:
    """Mode-based inference: decode the CSI posterior mean and denormalize."""
    return trained.infer(window, t)
