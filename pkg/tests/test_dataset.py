import numpy as np
import pytest

from csi2image.dataset import (
    NormStats,
    SkipSample,
    WindowedDataset,
    compute_norm_stats,
    denormalize_image,
    preprocess_image,
    read_amplitude_cache,
    resize_image,
    sample_window,
    to_pixel_range,
    write_amplitude_cache,
)
from csi2image.ingest import DataError


class TestComputeNormStats:
    def test_all_black_is_fatal(self):
        imgs = [np.zeros((8, 8, 3), dtype=np.uint8) for _ in range(3)]
        with pytest.raises(DataError):
            compute_norm_stats(imgs)

    def test_matches_two_pass_oracle(self):
        img = np.full((8, 8, 3), 128, dtype=np.uint8)
        img[3, 4] = (10, 200, 77)
        stats = compute_norm_stats([img])
        # independent two-pass mean/std
        x = img.astype(np.float64) / 255.0
        for c in range(3):
            vals = x[:, :, c].ravel()
            mean = sum(vals) / len(vals)
            var = sum((v - mean) ** 2 for v in vals) / len(vals)
            assert stats.mean[c] == pytest.approx(mean, abs=1e-12)
            assert stats.std[c] == pytest.approx(np.sqrt(var), abs=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        imgs = [rng.integers(0, 256, (8, 8, 3), dtype=np.uint8) for _ in range(4)]
        s1 = compute_norm_stats(imgs)
        s2 = compute_norm_stats(imgs)
        np.testing.assert_array_equal(s1.mean, s2.mean)
        np.testing.assert_array_equal(s1.std, s2.std)

    def test_empty_is_fatal(self):
        with pytest.raises(DataError):
            compute_norm_stats([])


class TestPreprocessImage:
    def test_constant_at_mean_gives_zeros(self):
        stats = NormStats(mean=np.array([0.2, 0.5, 0.8]), std=np.array([0.1, 0.2, 0.3]))
        img = np.empty((32, 32, 3), dtype=np.uint8)
        img[..., 0], img[..., 1], img[..., 2] = 51, 127, 204  # 0.2, ~0.498, 0.8
        out = preprocess_image(img, stats, 16)
        np.testing.assert_allclose(out[0], 0.0, atol=1e-6)
        np.testing.assert_allclose(out[2], 0.0, atol=1e-6)

    def test_shape_contract_from_640x480(self):
        img = np.indices((480, 640)).sum(axis=0) % 2 * 255
        img = np.stack([img] * 3, axis=-1).astype(np.uint8)
        stats = NormStats(mean=np.full(3, 0.5), std=np.full(3, 0.25))
        out = preprocess_image(img, stats, 128)
        assert out.shape == (3, 128, 128)
        assert out.dtype == np.float32

    def test_denormalize_round_trip(self):
        rng = np.random.default_rng(9)
        img = rng.integers(0, 256, (40, 40, 3), dtype=np.uint8)
        stats = NormStats(mean=np.array([0.3, 0.4, 0.5]), std=np.array([0.2, 0.3, 0.1]))
        out = preprocess_image(img, stats, 16)
        resized = resize_image(img, 16).astype(np.float32) / 255.0
        back = denormalize_image(out, stats)
        np.testing.assert_allclose(back, resized, atol=1e-6)

    def test_to_pixel_range_clips(self):
        stats = NormStats(mean=np.full(3, 0.5), std=np.full(3, 0.25))
        wild = np.full((3, 8, 8), 50.0, dtype=np.float32)
        out = to_pixel_range(wild, stats)
        assert out.shape == (8, 8, 3)
        assert out.max() <= 255.0 and out.min() >= 0.0


class TestSampleWindow:
    def test_full_span_window(self):
        amps = np.arange(151 * 52, dtype=np.float64).reshape(151, 52)
        w = sample_window(amps, center=75, window_len=151)
        assert w.values.shape == (52, 151)
        np.testing.assert_array_equal(w.values, amps.T)
        assert w.t == 75.0

    def test_out_of_bounds_skips(self):
        amps = np.zeros((151, 52))
        with pytest.raises(SkipSample):
            sample_window(amps, center=74, window_len=151)
        with pytest.raises(SkipSample):
            sample_window(amps, center=76, window_len=151)

    def test_minimal_window(self):
        amps = np.array([[1.0] * 52, [2.0] * 52, [3.0] * 52])
        w = sample_window(amps, center=1, window_len=3)
        np.testing.assert_array_equal(w.values[0], [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(w.values[:, 1], amps[1])

    def test_even_length_rejected(self):
        with pytest.raises(ValueError):
            sample_window(np.zeros((10, 52)), 5, 4)


class TestAmplitudeCache:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        arr = rng.random((37, 52))
        path = tmp_path / "amps.bin"
        write_amplitude_cache(path, arr)
        np.testing.assert_array_equal(read_amplitude_cache(path), arr)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"garbage!" + b"\x00" * 64)
        with pytest.raises(DataError):
            read_amplitude_cache(path)


class TestWindowedDataset:
    def test_loads_and_centers_windows(self, tiny_dataset_dir):
        ds = WindowedDataset(tiny_dataset_dir)
        assert ds.n_packets == 300
        ds.ensure_stats(image_size=16)
        for sample in ds.iter_split("val", window_len=5, image_size=16):
            c = sample.window.center_index
            np.testing.assert_array_equal(
                sample.window.values[:, 2], ds.amplitudes[c]
            )
            assert sample.image.shape == (3, 16, 16)
            assert sample.split == "val"

    def test_stats_persisted_and_shared_across_splits(self, tiny_dataset_dir):
        ds = WindowedDataset(tiny_dataset_dir)
        stats = ds.ensure_stats(image_size=16)
        # same object reused by every split iterator
        for split in ("train", "val", "test"):
            next(ds.iter_split(split, 5, 16))
            assert ds.stats is stats
        # a reloaded dataset reads them back instead of recomputing
        ds2 = WindowedDataset(tiny_dataset_dir)
        assert ds2.stats is not None
        np.testing.assert_allclose(ds2.stats.mean, stats.mean)

    def test_val_iteration_deterministic(self, tiny_dataset_dir):
        ds = WindowedDataset(tiny_dataset_dir)
        ds.ensure_stats(16)
        a = [s.window.center_index for s in ds.iter_split("val", 5, 16)]
        b = [s.window.center_index for s in ds.iter_split("val", 5, 16)]
        assert a == b

    def test_seeded_shuffle_contract(self, tiny_dataset_dir):
        ds = WindowedDataset(tiny_dataset_dir)
        ds.ensure_stats(16)
        a = [s.window.center_index for s in ds.iter_split("train", 5, 16, shuffle=True, seed=3)]
        b = [s.window.center_index for s in ds.iter_split("train", 5, 16, shuffle=True, seed=3)]
        c = [s.window.center_index for s in ds.iter_split("train", 5, 16, shuffle=True, seed=4)]
        assert a == b
        assert a != c
        assert sorted(a) == sorted(c)

    def test_epoch_coverage_equals_eligible_centers(self, tiny_dataset_dir):
        ds = WindowedDataset(tiny_dataset_dir)
        ds.ensure_stats(16)
        for split in ("train", "val", "test"):
            centers = sorted(
                s.window.center_index for s in ds.iter_split(split, 7, 16, shuffle=True, seed=0)
            )
            assert centers == ds.eligible_centers(split, 7).tolist()

    def test_boundary_skip_count(self, tiny_dataset_dir):
        # train split starts at index 0: windows with centers < (L-1)/2 are skipped
        ds = WindowedDataset(tiny_dataset_dir)
        L = 51
        half = (L - 1) // 2
        n_train = int(np.sum(ds.labels == "train"))
        eligible = ds.eligible_centers("train", L)
        # brute-force bounds check
        expected = [
            c for c in np.flatnonzero(ds.labels == "train")
            if c - half >= 0 and c + half <= ds.n_packets - 1
        ]
        assert eligible.tolist() == expected
        assert len(eligible) == n_train - half

    def test_centers_stay_in_their_split(self, tiny_dataset_dir):
        ds = WindowedDataset(tiny_dataset_dir)
        for split in ("train", "val", "test"):
            for c in ds.eligible_centers(split, 9):
                assert ds.labels[c] == split

    def test_optional_window_standardization(self, tiny_dataset_dir):
        raw = WindowedDataset(tiny_dataset_dir)
        std = WindowedDataset(tiny_dataset_dir, standardize_windows=True)
        raw.ensure_stats(16)
        std.ensure_stats(16)
        c = int(raw.eligible_centers("val", 5)[0])
        raw_sample = raw.sample(c, 5, 16)
        std_sample = std.sample(c, 5, 16)
        # default path feeds amplitudes untouched
        assert raw_sample.window.values.min() >= 0.0
        train_amps = raw.amplitudes[raw.labels == "train"]
        mean, sd = train_amps.mean(axis=0), train_amps.std(axis=0)
        np.testing.assert_allclose(
            std_sample.window.values,
            (raw_sample.window.values - mean[:, None]) / sd[:, None],
            atol=1e-12,
        )
