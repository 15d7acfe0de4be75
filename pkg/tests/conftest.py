import numpy as np
import pytest
from PIL import Image

from csi2image.dataset import write_dataset_dir
from csi2image.ingest import (
    N_SUBCARRIERS,
    CsiPacket,
    ImageFrame,
    pair_nearest,
    split_contiguous,
)


def make_packet(timestamp_us, rng=None, seq_no=None, rssi=None):
    if rng is None:
        rng = np.random.default_rng(0)
    re = rng.integers(-128, 128, N_SUBCARRIERS).astype(np.float64)
    im = rng.integers(-128, 128, N_SUBCARRIERS).astype(np.float64)
    return CsiPacket(timestamp_us=int(timestamp_us), csi=re + 1j * im,
                     seq_no=seq_no, rssi=rssi)


def write_png(path, rng, size=16):
    pixels = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
    Image.fromarray(pixels).save(path)
    return pixels


@pytest.fixture
def tiny_dataset_dir(tmp_path):
    """A small on-disk dataset: 300 packets at 100 Hz, 90 frames at 30 Hz."""
    rng = np.random.default_rng(42)
    n_packets, n_frames = 300, 90
    packets = [make_packet(i * 10_000, rng) for i in range(n_packets)]

    img_dir = tmp_path / "imgs"
    img_dir.mkdir()
    frames = []
    for j in range(n_frames):
        p = img_dir / f"f{j:04d}.png"
        write_png(p, rng, size=16)
        frames.append(ImageFrame(timestamp_us=j * 33_333, path=p))

    pairs = pair_nearest(packets, frames)
    assignment = split_contiguous(pairs)
    amplitudes = np.stack([np.abs(p.csi) for p in packets])
    out = tmp_path / "dataset"
    write_dataset_dir(out, amplitudes, pairs, assignment, frames)
    return out
