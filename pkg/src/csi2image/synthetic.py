"""Desk-scale synthetic capture: a moving square filmed by a fake camera
while fake subcarrier amplitudes encode the same 1-D position.

Subcarrier k at time t has amplitude 1 + 0.5*sin(2*pi*k/52 + alpha_k*p(t))
plus seeded Gaussian noise, with fixed per-subcarrier sensitivities alpha_k.
At zero noise the amplitude vector determines p(t) exactly, which makes the
generated data a controlled stand-in for a real recording: a model that
learns anything must have extracted p from the window.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import write_dataset_dir
from .ingest import (
    N_SUBCARRIERS,
    CsiPacket,
    ImageFrame,
    pair_nearest,
    serialize_csi_log,
    split_contiguous,
)

ALPHA = np.pi * (1.0 + 2.0 * np.arange(N_SUBCARRIERS) / N_SUBCARRIERS)
PHASE = 2.0 * np.pi * np.arange(N_SUBCARRIERS) / N_SUBCARRIERS

SQUARE_COLOR = np.array([235, 64, 52], dtype=np.uint8)


@dataclass
class SyntheticSpec:
    n_packets: int = 2000
    image_size: int = 32
    packet_hz: float = 100.0
    frame_hz: float = 30.0
    motion_cycles: float = 3.0  # full back-and-forth sweeps over the capture
    noise_level: float = 0.05


def position_signal(seconds: np.ndarray, duration: float, cycles: float) -> np.ndarray:
    """Smooth 1-D position in [0, 1] as a function of capture time."""
    return 0.5 + 0.4 * np.sin(2.0 * np.pi * cycles * np.asarray(seconds) / duration)


def csi_amplitudes(positions: np.ndarray, noise_level: float, rng) -> np.ndarray:
    """(n, 52) subcarrier amplitudes for a position trajectory."""
    p = np.asarray(positions)[:, None]
    clean = 1.0 + 0.5 * np.sin(PHASE[None, :] + ALPHA[None, :] * p)
    if noise_level <= 0:
        return clean
    return clean + rng.normal(0.0, noise_level, clean.shape)


def render_frame(position: float, image_size: int) -> np.ndarray:
    """Square at horizontal position `position` on a fixed gradient background."""
    h = w = image_size
    rows = np.linspace(40, 150, h).astype(np.uint8)
    pixels = np.empty((h, w, 3), dtype=np.uint8)
    pixels[..., 0] = rows[:, None]
    pixels[..., 1] = rows[:, None] // 2 + 30
    pixels[..., 2] = 170 - rows[:, None] // 2
    side = max(4, image_size // 4)
    x0 = int(round(position * (w - side)))
    y0 = (h - side) // 2
    pixels[y0:y0 + side, x0:x0 + side] = SQUARE_COLOR
    return pixels


def _timelines(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, float]:
    duration = spec.n_packets / spec.packet_hz
    packet_s = np.arange(spec.n_packets) / spec.packet_hz
    n_frames = int(np.floor(duration * spec.frame_hz)) + 1
    frame_s = np.arange(n_frames) / spec.frame_hz
    return packet_s, frame_s, duration


def synthetic_packets_and_frames(
    spec: SyntheticSpec, seed: int, image_dir: Path
) -> tuple[list[CsiPacket], list[ImageFrame], np.ndarray]:
    """Generate the packet/frame series and render frame images to disk."""
    rng = np.random.default_rng(seed)
    packet_s, frame_s, duration = _timelines(spec)
    amps = csi_amplitudes(
        position_signal(packet_s, duration, spec.motion_cycles), spec.noise_level, rng
    )
    # zero-phase CSI: the complex vector's magnitudes are exactly the amplitudes
    packets = [
        CsiPacket(
            timestamp_us=int(round(s * 1e6)),
            csi=amps[i].astype(np.complex128),
            seq_no=i,
        )
        for i, s in enumerate(packet_s)
    ]

    image_dir.mkdir(parents=True, exist_ok=True)
    frames = []
    frame_p = position_signal(frame_s, duration, spec.motion_cycles)
    for j, s in enumerate(frame_s):
        path = image_dir / f"frame{j:06d}.png"
        Image.fromarray(render_frame(float(frame_p[j]), spec.image_size)).save(path)
        frames.append(ImageFrame(timestamp_us=int(round(s * 1e6)), path=path))
    return packets, frames, amps


def make_synthetic(spec: SyntheticSpec, seed: int, out_dir: str | Path) -> Path:
    """Emit a ready-to-train dataset directory (same layout as `ingest`)."""
    out = Path(out_dir)
    packets, frames, amps = synthetic_packets_and_frames(spec, seed, out / "images")
    pairs = pair_nearest(packets, frames)
    assignment = split_contiguous(pairs)
    return write_dataset_dir(out, amps, pairs, assignment, frames)


def write_raw_capture(spec: SyntheticSpec, seed: int, out_dir: str | Path) -> tuple[Path, Path]:
    """Emit a raw CSI log + image manifest pair, as a recording rig would."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    packets, frames, _ = synthetic_packets_and_frames(spec, seed, out / "images")
    log_path = out / "csi_log.csv"
    serialize_csi_log(packets, log_path)
    manifest_path = out / "manifest.csv"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for f in frames:
            rel = Path(f.path).relative_to(out).as_posix()
            fh.write(f"{rel},{f.timestamp_us}\n")
    return log_path, manifest_path
