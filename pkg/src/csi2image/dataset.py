"""Model-ready samples: normalized images and centered spectrogram windows.

A dataset directory (written by `ingest` or `synth`) holds:

    pairs.csv       packet_index,frame_index,split
    frames.csv      frame_index,filename,timestamp_us
    amplitudes.bin  flat binary (n_packets x 52) float64 with a small header
    norm_stats.json per-channel mean/std, or a stub until first training use

Windows are 52 x L amplitude slices centered on a packet; centers too close
to the sequence ends are skipped, never padded. The temporal coordinate t of
a window is the global packet index of its center.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .ingest import (
    N_SUBCARRIERS,
    SPLITS,
    DataError,
    ImageFrame,
    PacketImagePair,
    SplitAssignment,
)

log = logging.getLogger(__name__)

_CACHE_MAGIC = b"AMPCACHE"
_CACHE_VERSION = 1


class SkipSample(Exception):
    """Raised when a window center is too close to the sequence bounds."""


@dataclass
class NormStats:
    """Per-channel mean/std of training images in [0,1] scale (population std)."""

    mean: np.ndarray  # (3,)
    std: np.ndarray   # (3,) strictly positive

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(mean=np.asarray(d["mean"], dtype=np.float64),
                   std=np.asarray(d["std"], dtype=np.float64))


@dataclass
class SpectrogramWindow:
    values: np.ndarray  # (52, L) float64 amplitudes
    center_index: int
    t: float


@dataclass
class PairedSample:
    window: SpectrogramWindow
    image: np.ndarray  # (3, S, S) float32, normalized
    split: str


def resize_image(pixels: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an HxWx3 uint8 image to size x size (uint8)."""
    im = Image.fromarray(pixels)
    return np.asarray(im.resize((size, size), Image.BILINEAR))


def compute_norm_stats(images: Sequence[np.ndarray] | Iterator[np.ndarray]) -> NormStats:
    """Per-channel mean/std over all pixels of all images, scaled to [0,1].

    Accepts HxWx3 uint8 arrays. A zero-variance channel is fatal.
    """
    n = 0
    s = np.zeros(3, dtype=np.float64)
    s2 = np.zeros(3, dtype=np.float64)
    for img in images:
        x = img.astype(np.float64) / 255.0
        n += x.shape[0] * x.shape[1]
        s += x.sum(axis=(0, 1))
        s2 += (x * x).sum(axis=(0, 1))
    if n == 0:
        raise DataError("cannot compute normalization stats from an empty split")
    mean = s / n
    var = s2 / n - mean**2
    var = np.maximum(var, 0.0)
    if np.any(var < 1e-12):
        raise DataError(f"zero-variance channel in training images (var={var})")
    return NormStats(mean=mean, std=np.sqrt(var))


def preprocess_image(pixels: np.ndarray, stats: NormStats, size: int) -> np.ndarray:
    """Resize, scale to [0,1] and standardize; returns (3, size, size) float32."""
    x = resize_image(pixels, size).astype(np.float32) / 255.0
    x = (x - stats.mean.astype(np.float32)) / stats.std.astype(np.float32)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def denormalize_image(image: np.ndarray, stats: NormStats) -> np.ndarray:
    """Invert preprocess_image back to [0,1]: (3,S,S) -> (S,S,3) float32."""
    x = np.asarray(image, dtype=np.float32).transpose(1, 2, 0)
    return x * stats.std.astype(np.float32) + stats.mean.astype(np.float32)


def to_pixel_range(image: np.ndarray, stats: NormStats) -> np.ndarray:
    """Denormalize a (3,S,S) network image to (S,S,3) float32 in [0,255]."""
    return np.clip(denormalize_image(image, stats) * 255.0, 0.0, 255.0)


def sample_window(amplitudes: np.ndarray, center: int, window_len: int) -> SpectrogramWindow:
    """Cut a 52 x L window of packet amplitudes centered on one packet.

    Raises SkipSample when the window would exceed the sequence bounds.
    """
    if window_len % 2 != 1 or window_len < 1:
        raise ValueError(f"window length must be odd and positive, got {window_len}")
    half = (window_len - 1) // 2
    n = amplitudes.shape[0]
    if center < half or center > n - 1 - half:
        raise SkipSample(f"center {center} with L={window_len} out of bounds for {n} packets")
    values = amplitudes[center - half: center + half + 1].T.copy()
    return SpectrogramWindow(values=values, center_index=center, t=float(center))


# --- amplitude cache ---------------------------------------------------------

def write_amplitude_cache(path: str | Path, amplitudes: np.ndarray) -> None:
    arr = np.ascontiguousarray(amplitudes, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("amplitude cache expects a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<IQQ", _CACHE_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_amplitude_cache(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _CACHE_MAGIC:
            raise DataError(f"{path}: not an amplitude cache")
        version, rows, cols = struct.unpack("<IQQ", fh.read(20))
        if version != _CACHE_VERSION:
            raise DataError(f"{path}: unsupported cache version {version}")
        data = np.fromfile(fh, dtype=np.float64, count=rows * cols)
    if data.size != rows * cols:
        raise DataError(f"{path}: truncated amplitude cache")
    return data.reshape(rows, cols)


# --- dataset directory -------------------------------------------------------

def write_dataset_dir(
    out_dir: str | Path,
    amplitudes: np.ndarray,
    pairs: Sequence[PacketImagePair],
    assignment: SplitAssignment,
    frames: Sequence[ImageFrame],
    stats: Optional[NormStats] = None,
) -> Path:
    """Write the dataset directory layout shared by `ingest` and `synth`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    write_amplitude_cache(out / "amplitudes.bin", amplitudes)

    with open(out / "pairs.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["packet_index", "frame_index", "split"])
        for pair, label in zip(pairs, assignment.labels):
            writer.writerow([pair.packet_index, pair.frame_index, label])

    with open(out / "frames.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "filename", "timestamp_us"])
        for i, frame in enumerate(frames):
            p = Path(frame.path).resolve()
            try:
                name = p.relative_to(out.resolve()).as_posix()
            except ValueError:
                name = str(p)
            writer.writerow([i, name, frame.timestamp_us])

    stats_json = stats.to_json() if stats is not None else {"mean": None, "std": None}
    with open(out / "norm_stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats_json, fh, indent=2)
        fh.write("\n")
    return out


class WindowedDataset:
    """Paired spectrogram windows and normalized images from a dataset directory.

    Amplitudes are fed to the model raw by default; `standardize_windows`
    switches on per-subcarrier standardization (mean/std over the train
    split), kept as an experimentation knob. Window centers always belong to
    their own split, but window columns near a boundary may reach into the
    neighbouring split (known mild leakage, accepted by design).
    """

    def __init__(self, root: str | Path, standardize_windows: bool = False):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DataError(f"dataset directory not found: {self.root}")
        self.amplitudes = read_amplitude_cache(self.root / "amplitudes.bin")
        if self.amplitudes.shape[1] != N_SUBCARRIERS:
            raise DataError(
                f"amplitude cache has {self.amplitudes.shape[1]} subcarriers, "
                f"expected {N_SUBCARRIERS}"
            )
        self.standardize_windows = standardize_windows
        self._subcarrier_stats: Optional[tuple[np.ndarray, np.ndarray]] = None

        n = self.amplitudes.shape[0]
        self.frame_of_packet = np.full(n, -1, dtype=np.int64)
        self.labels = np.empty(n, dtype="<U5")
        with open(self.root / "pairs.csv", "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            next(reader)  # header
            for row in reader:
                idx, frame_idx, label = int(row[0]), int(row[1]), row[2]
                self.frame_of_packet[idx] = frame_idx
                self.labels[idx] = label
        if np.any(self.frame_of_packet < 0):
            raise DataError("pairs.csv does not cover every packet in the cache")

        self.frames: list[ImageFrame] = []
        with open(self.root / "frames.csv", "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                path = Path(row[1])
                if not path.is_absolute():
                    path = self.root / path
                self.frames.append(ImageFrame(timestamp_us=int(row[2]), path=path))

        self.stats: Optional[NormStats] = None
        stats_path = self.root / "norm_stats.json"
        if stats_path.is_file():
            with open(stats_path, "r", encoding="utf-8") as fh:
                d = json.load(fh)
            if d.get("mean") is not None:
                self.stats = NormStats.from_json(d)

        self._image_cache: dict[int, np.ndarray] = {}
        self._cache_size: Optional[int] = None

    @property
    def n_packets(self) -> int:
        return self.amplitudes.shape[0]

    def ensure_stats(self, image_size: int) -> NormStats:
        """Return normalization stats, computing them from the train split if absent.

        Stats are taken over the resized training images and persisted back to
        norm_stats.json so later runs (and the val/test splits) reuse them.
        """
        if self.stats is not None:
            return self.stats
        train_frames = sorted(set(
            int(self.frame_of_packet[i]) for i in np.flatnonzero(self.labels == "train")
        ))
        if not train_frames:
            raise DataError("dataset has no train split to compute stats from")
        log.info("computing normalization stats over %d training frames", len(train_frames))
        self.stats = compute_norm_stats(
            resize_image(self.frames[fi].pixels, image_size) for fi in train_frames
        )
        with open(self.root / "norm_stats.json", "w", encoding="utf-8") as fh:
            json.dump(self.stats.to_json(), fh, indent=2)
            fh.write("\n")
        return self.stats

    def eligible_centers(self, split: str, window_len: int) -> np.ndarray:
        """Packet indices of `split` whose window fits inside the sequence."""
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        half = (window_len - 1) // 2
        idx = np.flatnonzero(self.labels == split)
        return idx[(idx >= half) & (idx <= self.n_packets - 1 - half)]

    def preprocessed_image(self, frame_index: int, image_size: int) -> np.ndarray:
        if self.stats is None:
            raise DataError("normalization stats missing; call ensure_stats first")
        if self._cache_size != image_size:
            self._image_cache.clear()
            self._cache_size = image_size
        cached = self._image_cache.get(frame_index)
        if cached is None:
            cached = preprocess_image(self.frames[frame_index].pixels, self.stats, image_size)
            self._image_cache[frame_index] = cached
        return cached

    def _subcarrier_standardizer(self) -> tuple[np.ndarray, np.ndarray]:
        if self._subcarrier_stats is None:
            train = self.amplitudes[self.labels == "train"]
            if train.shape[0] == 0:
                raise DataError("cannot standardize windows without a train split")
            mean = train.mean(axis=0)
            std = train.std(axis=0)
            if np.any(std < 1e-12):
                raise DataError("zero-variance subcarrier in training amplitudes")
            self._subcarrier_stats = (mean, std)
        return self._subcarrier_stats

    def sample(self, center: int, window_len: int, image_size: int) -> PairedSample:
        window = sample_window(self.amplitudes, center, window_len)
        if self.standardize_windows:
            mean, std = self._subcarrier_standardizer()
            window.values = (window.values - mean[:, None]) / std[:, None]
        image = self.preprocessed_image(int(self.frame_of_packet[center]), image_size)
        return PairedSample(window=window, image=image, split=str(self.labels[center]))

    def iter_split(
        self,
        split: str,
        window_len: int,
        image_size: int,
        shuffle: bool = False,
        seed: int = 0,
    ) -> Iterator[PairedSample]:
        """Yield every in-bounds sample of the split once, optionally shuffled."""
        centers = self.eligible_centers(split, window_len)
        if shuffle:
            centers = np.random.default_rng(seed).permutation(centers)
        for c in centers:
            yield self.sample(int(c), window_len, image_size)
