"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
report lines. Criterion 6 (full-scale reproduction) needs a real capture
and is skipped unless CSI2IMAGE_DATA points at an ingested dataset directory.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from csi2image.dataset import WindowedDataset, to_pixel_range
from csi2image.ingest import (
    amplitude_matrix,
    load_frames,
    pair_nearest,
    parse_csi_log,
    split_contiguous,
)
from csi2image.latent import (
    GaussianPosterior,
    kl_standard_normal,
    mopoe_loss,
    poe_combine,
    powerset_posteriors,
    reparameterize,
)
from csi2image.metrics import (
    SSIM_C1,
    SSIM_C2,
    SSIM_WINDOW,
    FeatureSet,
    fid,
    luma,
    psnr,
    rmse,
    ssim,
)
from csi2image.networks import ModelConfig, TrainedModel, temporal_encode
from csi2image.synthetic import SyntheticSpec, make_synthetic, write_raw_capture
from csi2image.training import TrainConfig, set_deterministic, train_one_run


def report(criterion: int, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"\n[acceptance] criterion {criterion}: {status} {detail}")
    assert ok, f"criterion {criterion} failed: {detail}"


def gp64(mu, log_var):
    return GaussianPosterior(
        torch.as_tensor(mu, dtype=torch.float64),
        torch.as_tensor(log_var, dtype=torch.float64),
    )


# --- criterion 1: closed-form math suite --------------------------------------

def test_criterion_1_closed_form_math():
    t0 = time.monotonic()
    tol = 1e-6

    # kl_standard_normal
    assert abs(float(kl_standard_normal(gp64([0.0] * 5, [0.0] * 5)))) <= tol
    assert abs(float(kl_standard_normal(gp64([1.0], [0.0]))) - 0.5) <= tol
    closed = float(kl_standard_normal(gp64([0.0], [math.log(2.0)])))
    rng = np.random.default_rng(2024)
    x = rng.normal(0.0, math.sqrt(2.0), size=1_000_000)
    mc = float(np.mean(
        (-0.5 * np.log(4 * np.pi) - x**2 / 4) - (-0.5 * np.log(2 * np.pi) - x**2 / 2)
    ))
    assert abs(closed - mc) <= 1e-2

    # reparameterize
    q = gp64([1.5, -2.0], [0.3, -0.7])
    assert torch.allclose(reparameterize(q, torch.zeros(2, dtype=torch.float64)).z, q.mu)
    z = reparameterize(gp64([0.0], [math.log(4.0)]), torch.tensor([1.5], dtype=torch.float64)).z
    assert abs(float(z) - 3.0) <= tol
    g = torch.Generator().manual_seed(9)
    eps = torch.randn(100_000, 1, generator=g, dtype=torch.float64)
    zs = reparameterize(gp64([0.7], [math.log(1.69)]), eps).z.numpy()
    assert abs(zs.mean() - 0.7) < 3 * 1.3 / math.sqrt(100_000)
    assert abs(zs.var(ddof=1) - 1.69) < 3 * 1.69 * math.sqrt(2 / (100_000 - 1))

    # poe_combine against a quadrature oracle
    def product_moments(params):
        grid = np.linspace(-12, 12, 48001)
        dens = np.ones_like(grid)
        for m, v in params:
            dens *= np.exp(-((grid - m) ** 2) / (2 * v)) / np.sqrt(2 * np.pi * v)
        dens /= np.trapezoid(dens, grid)
        mean = np.trapezoid(grid * dens, grid)
        return mean, np.trapezoid((grid - mean) ** 2 * dens, grid)

    single = gp64([0.3], [0.2])
    assert poe_combine([single]) is single
    for params in ([(0.0, 1.0), (0.0, 1.0)], [(1.0, 1.0), (-1.0, 1.0)]):
        combined = poe_combine([gp64([m], [math.log(v)]) for m, v in params])
        mean, var = product_moments(params)
        assert abs(float(combined.mu) - mean) <= tol
        assert abs(float(torch.exp(combined.log_var)) - var) <= tol
        assert abs(float(torch.exp(combined.log_var)) - 0.5) <= tol

    # temporal_encode
    enc = temporal_encode(torch.tensor(0.0, dtype=torch.float64), 3, 7)
    assert torch.allclose(enc, torch.tensor([0.0, 1.0] * 3, dtype=torch.float64), atol=tol)
    enc = temporal_encode(torch.tensor(3.0 * 11, dtype=torch.float64), 1, 11)
    assert abs(float(enc[0]) - 0.0) <= tol and abs(float(enc[1]) + 1.0) <= tol
    enc = temporal_encode(torch.tensor(1.5 * 9, dtype=torch.float64), 2, 9)
    expected = torch.tensor([1.0, 0.0, 0.0, -1.0], dtype=torch.float64)
    assert torch.allclose(enc, expected, atol=tol)

    elapsed = time.monotonic() - t0
    report(1, elapsed < 10.0, f"(closed-form suite, {elapsed:.1f}s < 10s)")


# --- criterion 2: metric oracle equivalence ------------------------------------

def naive_rmse(a, b):
    total, count = 0.0, 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            for c in range(a.shape[2]):
                total += (float(a[i, j, c]) - float(b[i, j, c])) ** 2
                count += 1
    return math.sqrt(total / count)


def naive_psnr(a, b, max_val=255.0):
    mse = naive_rmse(a, b) ** 2
    if mse == 0.0:
        return 99.0
    return min(20 * math.log10(max_val) - 10 * math.log10(mse), 99.0)


def naive_ssim(a, b):
    ya, yb = luma(a), luma(b)
    w = SSIM_WINDOW
    vals = []
    for i in range(ya.shape[0] - w + 1):
        for j in range(ya.shape[1] - w + 1):
            pa, pb = ya[i:i + w, j:j + w], yb[i:i + w, j:j + w]
            mu_a, mu_b = pa.mean(), pb.mean()
            cov = ((pa - mu_a) * (pb - mu_b)).mean()
            vals.append(
                ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2))
                / ((mu_a**2 + mu_b**2 + SSIM_C1) * (pa.var() + pb.var() + SSIM_C2))
            )
    return float(np.mean(vals))


def exact_moment_features(mu, sigmas, n, rng):
    k = len(mu)
    m = rng.normal(size=(n, k))
    m -= m.mean(axis=0)
    q, _ = np.linalg.qr(m)
    return mu + q[:, :k] * (np.asarray(sigmas) * math.sqrt(n - 1))


def test_criterion_2_metric_oracles():
    t0 = time.monotonic()
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(50):
        a = rng.uniform(0, 255, (16, 16, 3))
        b = rng.uniform(0, 255, (16, 16, 3))
        worst = max(
            worst,
            abs(rmse(a, b) - naive_rmse(a, b)),
            abs(psnr(a, b) - naive_psnr(a, b)),
            abs(ssim(a, b) - naive_ssim(a, b)),
        )
    assert worst <= 1e-6, f"metric deviation {worst:.2e}"

    mu_r, mu_f = np.array([0.5, -1.0, 2.0, 0.1]), np.array([0.0, 1.0, 1.0, -0.2])
    sig_r, sig_f = np.array([1.0, 2.0, 0.5, 1.2]), np.array([1.5, 1.0, 1.0, 0.8])
    real = FeatureSet(exact_moment_features(mu_r, sig_r, 300, rng), "oracle")
    fake = FeatureSet(exact_moment_features(mu_f, sig_f, 300, rng), "oracle")
    expected = float(np.sum((sig_r - sig_f) ** 2) + np.sum((mu_r - mu_f) ** 2))
    assert abs(fid(real, fake) - expected) <= 1e-4
    same = FeatureSet(rng.normal(size=(100, 6)), "oracle")
    assert fid(same, FeatureSet(same.features.copy(), "oracle")) <= 1e-6

    elapsed = time.monotonic() - t0
    report(2, elapsed < 30.0,
           f"(50 image pairs + FID oracles, worst dev {worst:.1e}, {elapsed:.1f}s < 30s)")


# --- criterion 3: gradient check -----------------------------------------------

def test_criterion_3_gradient_check():
    t0 = time.monotonic()
    d = 8
    rng = np.random.default_rng(303)
    gen = torch.Generator().manual_seed(303)
    w1 = torch.randn(d, 32, generator=gen, dtype=torch.float64) * 0.4
    w2 = torch.randn(32, 3 * 8 * 8, generator=gen, dtype=torch.float64) * 0.4

    def decode(z):
        return (torch.tanh(z @ w1) @ w2).reshape(3, 8, 8)

    h = 1e-4
    worst_rel = 0.0
    for _ in range(10):
        target = torch.as_tensor(rng.normal(size=(3, 8, 8)))
        mu0 = rng.normal(size=(2, d))
        lv0 = rng.normal(size=(2, d)) * 0.5
        eps_list = [torch.as_tensor(rng.normal(size=d)) for _ in range(3)]
        beta = float(rng.uniform(0.5, 2.0))

        def loss_at(mu_np, lv_np, requires_grad=False):
            mu = torch.as_tensor(mu_np, dtype=torch.float64).requires_grad_(requires_grad)
            lv = torch.as_tensor(lv_np, dtype=torch.float64).requires_grad_(requires_grad)
            uni = {
                "image": GaussianPosterior(mu[0], lv[0]),
                "csi": GaussianPosterior(mu[1], lv[1]),
            }
            eps = iter(eps_list)
            out = mopoe_loss(powerset_posteriors(uni), decode, target, beta,
                             eps_source=lambda s: next(eps))
            return out.total, mu, lv

        total, mu, lv = loss_at(mu0, lv0, requires_grad=True)
        total.backward()
        for which, (arr, grad) in enumerate(((mu0, mu.grad), (lv0, lv.grad))):
            for i in range(2):
                for j in range(d):
                    up, down = arr.copy(), arr.copy()
                    up[i, j] += h
                    down[i, j] -= h
                    if which == 0:
                        f_up = float(loss_at(up, lv0)[0])
                        f_dn = float(loss_at(down, lv0)[0])
                    else:
                        f_up = float(loss_at(mu0, up)[0])
                        f_dn = float(loss_at(mu0, down)[0])
                    fd = (f_up - f_dn) / (2 * h)
                    a = float(grad[i, j])
                    rel = abs(a - fd) / max(1.0, abs(a), abs(fd))
                    worst_rel = max(worst_rel, rel)
        assert worst_rel <= 1e-4, f"gradient mismatch: rel err {worst_rel:.2e}"

    elapsed = time.monotonic() - t0
    report(3, elapsed < 60.0,
           f"(10 instances, worst rel err {worst_rel:.1e} <= 1e-4, {elapsed:.1f}s < 60s)")


# --- criteria 4 + 5: synthetic end-to-end and determinism ----------------------

C4_MODEL = ModelConfig(
    latent_dim=16, embed_dim=32, window_len=31, freq_count=6,
    aggregation="c", temporal=True, conv_channels=(16, 32, 64, 128),
    image_size=32, head_hidden=256,
)
C4_CONFIG = TrainConfig(batch_size=32, beta=1.0, lr=1e-3, epochs=30, runs=1,
                        seed=0, model=C4_MODEL)


@pytest.fixture(scope="module")
def c4_run(tmp_path_factory):
    """Dataset, mean-image baseline, and one deterministic training run."""
    old_threads = torch.get_num_threads()
    set_deterministic()
    t0 = time.monotonic()
    root = tmp_path_factory.mktemp("c4")
    spec = SyntheticSpec(n_packets=2000, image_size=32, noise_level=0.05)
    data_dir = make_synthetic(spec, seed=11, out_dir=root / "data")
    ds = WindowedDataset(data_dir)
    stats = ds.ensure_stats(32)
    L = C4_MODEL.window_len

    def truth(c):
        return to_pixel_range(ds.sample(int(c), L, 32).image, stats)

    # baseline oracle, run before training: the mean training image
    train_centers = ds.eligible_centers("train", L)
    test_centers = ds.eligible_centers("test", L)
    acc = np.zeros((32, 32, 3), dtype=np.float64)
    for c in train_centers:
        acc += truth(c)
    mean_img = acc / len(train_centers)
    baseline = float(np.mean([psnr(mean_img, truth(c)) for c in test_centers]))

    record = train_one_run(C4_CONFIG, ds, run_seed=C4_CONFIG.seed,
                           out_dir=root / "run")
    trained = TrainedModel.load(record.checkpoint_path)
    model_psnr = float(np.mean([
        psnr(trained.infer(
            ds.sample(int(c), L, 32).window.values, float(c)
        ), truth(c))
        for c in test_centers
    ]))
    elapsed = time.monotonic() - t0
    yield {
        "dataset": ds,
        "baseline": baseline,
        "model_psnr": model_psnr,
        "record": record,
        "elapsed": elapsed,
    }
    torch.set_num_threads(old_threads)


def test_criterion_4_synthetic_end_to_end(c4_run):
    margin = c4_run["model_psnr"] - c4_run["baseline"]
    ok = margin >= 2.0 and c4_run["elapsed"] < 600.0
    report(4, ok,
           f"(model {c4_run['model_psnr']:.2f} dB vs baseline "
           f"{c4_run['baseline']:.2f} dB, margin {margin:+.2f} >= +2 dB, "
           f"{c4_run['elapsed']:.0f}s < 600s)")


def test_criterion_5_bitwise_determinism(c4_run):
    repeat = train_one_run(C4_CONFIG, c4_run["dataset"],
                           run_seed=C4_CONFIG.seed, out_dir=None)
    first = c4_run["record"]
    same_train = repeat.train_losses == first.train_losses
    same_val = repeat.val_losses == first.val_losses
    report(5, same_train and same_val,
           f"(per-epoch losses of the repeated run identical over "
           f"{len(first.train_losses)} epochs)")


# --- criterion 6: full-scale reproduction (conditional) ------------------------

@pytest.mark.skipif(
    "CSI2IMAGE_DATA" not in os.environ,
    reason="full-scale gate: set CSI2IMAGE_DATA to an ingested dataset directory "
           "(requires a real through-wall capture; an accelerator is strongly advised)",
)
def test_criterion_6_full_scale_reproduction():
    data_dir = os.environ["CSI2IMAGE_DATA"]
    ds = WindowedDataset(data_dir)
    config = TrainConfig(
        batch_size=32, beta=1.0, lr=1e-3, epochs=50, runs=1, seed=0,
        model=ModelConfig(aggregation="c", temporal=True, window_len=151),
    )
    record = train_one_run(config, ds, run_seed=config.seed,
                           out_dir=Path(data_dir) / "acceptance_run")
    trained = TrainedModel.load(record.checkpoint_path)
    stats = ds.ensure_stats(config.model.image_size)
    L = config.model.window_len
    psnrs, ssims = [], []
    for c in ds.eligible_centers("test", L):
        sample = ds.sample(int(c), L, config.model.image_size)
        truth = to_pixel_range(sample.image, stats)
        recon = trained.infer(sample.window.values, sample.window.t)
        psnrs.append(psnr(recon, truth))
        ssims.append(ssim(recon, truth))
    mean_psnr, mean_ssim = float(np.mean(psnrs)), float(np.mean(ssims))
    report(6, mean_psnr >= 19.5 and mean_ssim >= 0.70,
           f"(single C+T run: psnr {mean_psnr:.2f} >= 19.5, "
           f"ssim {mean_ssim:.3f} >= 0.70)")


# --- criterion 7: pipeline integrity -------------------------------------------

def test_criterion_7_pipeline_integrity(tmp_path):
    t0 = time.monotonic()
    spec = SyntheticSpec(n_packets=1000, image_size=16, noise_level=0.02)
    log_path, manifest_path = write_raw_capture(spec, seed=7, out_dir=tmp_path / "raw")

    packets = parse_csi_log(log_path, list(range(52)))
    frames = load_frames(manifest_path)
    assert len(packets) == 1000 and len(frames) == 301

    pairs = pair_nearest(packets, frames)
    frame_ts = [f.timestamp_us for f in frames]
    for p in pairs:
        t = packets[p.packet_index].timestamp_us
        dts = [abs(ft - t) for ft in frame_ts]
        best = min(range(len(frame_ts)), key=lambda j: (dts[j], j))
        assert p.frame_index == best and p.abs_dt_us == dts[best]

    assignment = split_contiguous(pairs)
    counts = assignment.counts()
    n = len(pairs)
    assert abs(counts["train"] - 0.8 * n) <= 1
    assert abs(counts["val"] - 0.1 * n) <= 1
    assert abs(counts["test"] - 0.1 * n) <= 1

    from csi2image.dataset import write_dataset_dir

    out = write_dataset_dir(tmp_path / "ds", amplitude_matrix(packets), pairs,
                            assignment, frames)
    ds = WindowedDataset(out)
    ds.ensure_stats(16)
    L = 31
    emitted = 0
    for split in ("train", "val", "test"):
        for sample in ds.iter_split(split, L, 16):
            c = sample.window.center_index
            np.testing.assert_array_equal(
                sample.window.values[:, (L - 1) // 2], ds.amplitudes[c]
            )
            assert sample.window.t == float(c)
            emitted += 1
    assert emitted == sum(len(ds.eligible_centers(s, L)) for s in ("train", "val", "test"))

    elapsed = time.monotonic() - t0
    report(7, elapsed < 10.0,
           f"(pairings match brute force, splits within +-1, "
           f"{emitted} windows centered, {elapsed:.1f}s < 10s)")
