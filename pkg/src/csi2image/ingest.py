"""Raw data ingestion: CSI packet logs, image manifests, alignment and splits.

The canonical CSI log is one packet per line, comma separated:

    seq_no,timestamp_us,rssi,"[i0,r0,i1,r1,...]"

where the bracketed list holds interleaved (imag, real) signed values for
each raw subcarrier slot. A configurable index list selects the 52 L-LTF
subcarriers out of the raw slots; the default matches the usual 64-slot
ESP32 layout (guard bands and DC removed).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

N_SUBCARRIERS = 52

# 64-slot L-LTF layout: slots 0-5 and 59-63 are guard bands, 32 is DC.
DEFAULT_SUBCARRIER_INDICES = tuple(range(6, 32)) + tuple(range(33, 59))

SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Fatal problem with input data (unreadable, empty, inconsistent)."""


@dataclass
class CsiPacket:
    """One received WiFi packet with its selected complex CSI vector."""

    timestamp_us: int
    csi: np.ndarray  # complex, length 52
    seq_no: Optional[int] = None
    rssi: Optional[int] = None


@dataclass
class ImageFrame:
    """One camera frame, referenced by path; pixels decoded on demand."""

    timestamp_us: int
    path: Path
    _pixels: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def pixels(self) -> np.ndarray:
        """H x W x 3 uint8 RGB array, cached after first decode."""
        if self._pixels is None:
            with Image.open(self.path) as im:
                self._pixels = np.asarray(im.convert("RGB"))
        return self._pixels


@dataclass(frozen=True)
class PacketImagePair:
    packet_index: int
    frame_index: int
    abs_dt_us: int


@dataclass
class SplitAssignment:
    """Per-pair split label, contiguous in time, in ratios[0]:ratios[1]:ratios[2]."""

    labels: np.ndarray  # dtype <U5, one of SPLITS per pair
    ratios: tuple[int, int, int] = (8, 1, 1)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.labels == split)

    def counts(self) -> dict[str, int]:
        return {s: int(np.sum(self.labels == s)) for s in SPLITS}


def parse_csi_log(
    path: str | Path,
    subcarrier_indices: Sequence[int] = DEFAULT_SUBCARRIER_INDICES,
) -> list[CsiPacket]:
    """Parse a CSI log into packets, selecting 52 subcarriers per record.

    Malformed lines are skipped with a warning; non-monotone timestamps are
    kept but warned about (packet order may carry information, so no sort).
    """
    indices = list(subcarrier_indices)
    if len(indices) != N_SUBCARRIERS:
        raise ValueError(
            f"subcarrier_indices must have length {N_SUBCARRIERS}, got {len(indices)}"
        )
    needed = 2 * (max(indices) + 1)

    path = Path(path)
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot read CSI log {path}: {exc}") from exc

    packets: list[CsiPacket] = []
    n_skipped = 0
    prev_ts = None
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            parsed = _parse_record(row, indices, needed)
            if parsed is None:
                n_skipped += 1
                log.warning("%s:%d: malformed record skipped", path, lineno)
                continue
            if prev_ts is not None and parsed.timestamp_us < prev_ts:
                log.warning(
                    "%s:%d: non-monotone timestamp %d after %d (kept)",
                    path, lineno, parsed.timestamp_us, prev_ts,
                )
            prev_ts = parsed.timestamp_us
            packets.append(parsed)
    if n_skipped:
        log.warning("%s: skipped %d malformed records", path, n_skipped)
    return packets


def _parse_record(
    row: list[str], indices: list[int], needed: int
) -> Optional[CsiPacket]:
    if len(row) != 4:
        return None
    seq_s, ts_s, rssi_s, csi_s = row
    try:
        timestamp_us = int(ts_s)
        seq_no = int(seq_s) if seq_s.strip() else None
        rssi = int(rssi_s) if rssi_s.strip() else None
        values = [float(v) for v in csi_s.strip().strip("[]").split(",")]
    except ValueError:
        return None
    if len(values) < needed:
        return None
    # interleaved (imag, real): entry k occupies values[2k], values[2k+1]
    csi = np.empty(len(indices), dtype=np.complex128)
    for out, k in enumerate(indices):
        csi[out] = complex(values[2 * k + 1], values[2 * k])
    return CsiPacket(timestamp_us=timestamp_us, csi=csi, seq_no=seq_no, rssi=rssi)


def serialize_csi_log(packets: Sequence[CsiPacket], path: str | Path) -> None:
    """Write packets back to the canonical log format (all 52 slots kept)."""

    def fmt(x: float) -> str:
        return str(int(x)) if float(x).is_integer() else repr(float(x))

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        for p in packets:
            inter: list[str] = []
            for z in p.csi:
                inter.append(fmt(z.imag))
                inter.append(fmt(z.real))
            writer.writerow([
                "" if p.seq_no is None else p.seq_no,
                p.timestamp_us,
                "" if p.rssi is None else p.rssi,
                "[" + ",".join(inter) + "]",
            ])


def amplitude(csi: np.ndarray) -> np.ndarray:
    """Per-subcarrier magnitude sqrt(re^2 + im^2)."""
    return np.abs(csi)


def amplitude_matrix(packets: Sequence[CsiPacket]) -> np.ndarray:
    """Stack packet amplitudes into an (n_packets, 52) float64 matrix."""
    return np.stack([amplitude(p.csi) for p in packets]).astype(np.float64)


def load_frames(manifest_path: str | Path) -> list[ImageFrame]:
    """Load an image manifest (CSV: filename,timestamp_us), sorted by timestamp.

    Every referenced file must exist and be decodable; failures are fatal.
    """
    manifest_path = Path(manifest_path)
    try:
        fh = open(manifest_path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc

    frames: list[ImageFrame] = []
    base = manifest_path.parent
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and row[0].strip().lower() == "filename"):
                continue
            if len(row) != 2:
                raise DataError(f"{manifest_path}:{lineno}: expected filename,timestamp_us")
            name, ts_s = row
            img_path = base / name.strip()
            if not img_path.is_file():
                raise DataError(f"missing image file: {img_path}")
            try:
                with Image.open(img_path) as im:
                    im.verify()
            except Exception as exc:
                raise DataError(f"undecodable image {img_path}: {exc}") from exc
            frames.append(ImageFrame(timestamp_us=int(ts_s), path=img_path))
    frames.sort(key=lambda f: f.timestamp_us)
    return frames


def trim_sequence(
    packets: Sequence[CsiPacket],
    frames: Sequence[ImageFrame],
    start_us: int,
    end_us: int,
) -> tuple[list[CsiPacket], list[ImageFrame]]:
    """Restrict both series to the closed interval [start_us, end_us]."""
    if start_us >= end_us:
        raise ValueError(f"start_us ({start_us}) must be < end_us ({end_us})")
    kept_p = [p for p in packets if start_us <= p.timestamp_us <= end_us]
    kept_f = [f for f in frames if start_us <= f.timestamp_us <= end_us]
    if not kept_p or not kept_f:
        raise DataError(
            f"trim to [{start_us}, {end_us}] left {len(kept_p)} packets / "
            f"{len(kept_f)} frames: nothing to train on"
        )
    return kept_p, kept_f


def pair_nearest(
    packets: Sequence[CsiPacket], frames: Sequence[ImageFrame]
) -> list[PacketImagePair]:
    """Pair every packet with the frame of nearest timestamp (ties -> earlier)."""
    if not packets or not frames:
        raise DataError("cannot pair empty packet or frame sequence")
    frame_ts = np.array([f.timestamp_us for f in frames], dtype=np.int64)
    if np.any(np.diff(frame_ts) < 0):
        raise ValueError("frames must be timestamp-sorted")

    pairs: list[PacketImagePair] = []
    for i, p in enumerate(packets):
        j = int(np.searchsorted(frame_ts, p.timestamp_us))
        # candidates: last frame at-or-before insertion point and frame at it
        best = None
        for cand in (j - 1, j):
            if 0 <= cand < len(frame_ts):
                dt = abs(int(frame_ts[cand]) - p.timestamp_us)
                if best is None or dt < best[1]:  # strict: tie keeps earlier
                    best = (cand, dt)
        assert best is not None
        pairs.append(PacketImagePair(packet_index=i, frame_index=best[0], abs_dt_us=best[1]))
    return pairs


def split_contiguous(
    pairs: Sequence[PacketImagePair], ratios: tuple[int, int, int] = (8, 1, 1)
) -> SplitAssignment:
    """Assign contiguous train/val/test blocks in the given ratios.

    Counts use floor arithmetic on train and val; the remainder goes to test.
    """
    n = len(pairs)
    if n < 10:
        raise DataError(f"need at least 10 pairs to split, got {n}")
    total = sum(ratios)
    n_train = n * ratios[0] // total
    n_val = n * ratios[1] // total
    labels = np.empty(n, dtype="<U5")
    labels[:n_train] = "train"
    labels[n_train:n_train + n_val] = "val"
    labels[n_train + n_val:] = "test"
    return SplitAssignment(labels=labels, ratios=ratios)
