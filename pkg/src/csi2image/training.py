"""Training protocol: Adam on the multi-subset objective, repeated runs,
lowest-validation-loss model selection, and the hyperparameter search.

Validation uses the same objective as training but draws its reconstruction
noise from a fixed-seed source recreated on every pass, so per-epoch
validation losses are comparable and the selected checkpoint reproducible.
"""

from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .dataset import WindowedDataset
from .latent import LossBreakdown, mopoe_loss, powerset_posteriors, seeded_noise
from .networks import ModelConfig, MultimodalVae, TrainedModel, apply_variant

log = logging.getLogger(__name__)


class TrainingAborted(Exception):
    """Raised when optimization produced a non-finite loss (with diagnostics)."""

    def __init__(self, message: str, epoch: int = -1, batch_index: int = -1,
                 per_subset: Optional[dict] = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index
        self.per_subset = per_subset or {}


@dataclass
class TrainConfig:
    batch_size: int = 32
    beta: float = 1.0
    lr: float = 1e-3
    epochs: int = 50
    runs: int = 10
    seed: int = 0
    grad_clip: float = 0.0  # 0 disables clipping
    model: ModelConfig = field(default_factory=ModelConfig)

    @property
    def window_len(self) -> int:
        return self.model.window_len

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["conv_channels"] = list(d["model"]["conv_channels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = d.pop("model", {})
        if "conv_channels" in model:
            model["conv_channels"] = tuple(model["conv_channels"])
        return cls(model=ModelConfig(**model), **d)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RunRecord:
    run_id: int
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    components: list[dict[str, float]] = field(default_factory=list)  # per epoch
    best_epoch: int = -1
    checkpoint_path: Optional[Path] = None
    aborted: bool = False
    abort_reason: str = ""

    @property
    def best_val(self) -> float:
        if self.aborted or self.best_epoch < 0:
            return math.inf
        return self.val_losses[self.best_epoch]


def subset_label(subset: frozenset[str]) -> str:
    return "+".join(sorted(subset))


def set_deterministic() -> None:
    """Single-threaded, fixed-order execution for reproducible runs."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _assemble_batch(
    ds: WindowedDataset, centers: np.ndarray, window_len: int, image_size: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    samples = [ds.sample(int(c), window_len, image_size) for c in centers]
    windows = torch.from_numpy(
        np.stack([s.window.values for s in samples]).astype(np.float32)
    )
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    ts = torch.tensor([s.window.t for s in samples], dtype=torch.float32)
    return windows, images, ts


def _batched(centers: np.ndarray, batch_size: int) -> Iterable[np.ndarray]:
    for start in range(0, len(centers), batch_size):
        yield centers[start:start + batch_size]


class _EpochAccumulator:
    """Sample-weighted means of the total and per-subset terms."""

    def __init__(self):
        self.n = 0
        self.total = 0.0
        self.comps: dict[str, float] = {}

    def add(self, out: LossBreakdown, batch_size: int) -> None:
        self.n += batch_size
        self.total += float(out.total.detach()) * batch_size
        for subset, (recon, kl) in out.per_subset.items():
            label = subset_label(subset)
            self.comps[f"recon_{label}"] = self.comps.get(f"recon_{label}", 0.0) + recon * batch_size
            self.comps[f"kl_{label}"] = self.comps.get(f"kl_{label}", 0.0) + kl * batch_size

    def means(self) -> tuple[float, dict[str, float]]:
        return self.total / self.n, {k: v / self.n for k, v in self.comps.items()}


def _split_loss(
    model: MultimodalVae,
    ds: WindowedDataset,
    split: str,
    config: TrainConfig,
    noise_seed: int,
) -> tuple[float, dict[str, float]]:
    """Objective over a whole split with deterministic, fixed-seed noise."""
    model.eval()
    noise = seeded_noise(noise_seed)
    acc = _EpochAccumulator()
    centers = ds.eligible_centers(split, config.window_len)
    with torch.no_grad():
        for batch in _batched(centers, config.batch_size):
            windows, images, ts = _assemble_batch(
                ds, batch, config.window_len, config.model.image_size
            )
            subsets = powerset_posteriors(model.posteriors(images, windows, ts))
            out = mopoe_loss(subsets, model.decode, images, config.beta, noise)
            acc.add(out, len(batch))
    return acc.means()


def train_one_run(
    config: TrainConfig,
    dataset: WindowedDataset,
    run_seed: int,
    run_id: int = 0,
    out_dir: Optional[Path] = None,
) -> RunRecord:
    """One seeded training run; keeps the lowest-validation-loss checkpoint."""
    stats = dataset.ensure_stats(config.model.image_size)
    train_centers = dataset.eligible_centers("train", config.window_len)
    val_centers = dataset.eligible_centers("val", config.window_len)
    if len(train_centers) == 0 or len(val_centers) == 0:
        raise TrainingAborted("train or val split has no eligible windows")

    torch.manual_seed(run_seed)
    model = MultimodalVae(config.model)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    train_noise = seeded_noise(run_seed)
    shuffle_rng = np.random.default_rng(run_seed)

    record = RunRecord(run_id=run_id)
    best_val = math.inf
    best_state: Optional[dict] = None

    for epoch in range(config.epochs):
        model.train()
        acc = _EpochAccumulator()
        perm = shuffle_rng.permutation(train_centers)
        for batch_index, batch in enumerate(_batched(perm, config.batch_size)):
            windows, images, ts = _assemble_batch(
                dataset, batch, config.window_len, config.model.image_size
            )
            subsets = powerset_posteriors(model.posteriors(images, windows, ts))
            out = mopoe_loss(subsets, model.decode, images, config.beta, train_noise)
            if not math.isfinite(float(out.total.detach())):
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch}, batch {batch_index}: "
                    f"{ {subset_label(k): v for k, v in out.per_subset.items()} }",
                    epoch=epoch, batch_index=batch_index, per_subset=out.per_subset,
                )
            optimizer.zero_grad()
            out.total.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            acc.add(out, len(batch))

        train_loss, comps = acc.means()
        val_loss, val_comps = _split_loss(model, dataset, "val", config, config.seed)
        record.train_losses.append(train_loss)
        record.val_losses.append(val_loss)
        comps.update({f"val_{k}": v for k, v in val_comps.items()})
        record.components.append(comps)
        if val_loss < best_val:
            best_val = val_loss
            record.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        log.info(
            "run %d epoch %d/%d: train=%.4f val=%.4f%s",
            run_id, epoch + 1, config.epochs, train_loss, val_loss,
            " *" if record.best_epoch == epoch else "",
        )

    assert best_state is not None
    model.load_state_dict(best_state)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        record.checkpoint_path = out_dir / "best.pt"
        TrainedModel(model=model, config=config.model, norm_stats=stats,
                     seed=run_seed).save(record.checkpoint_path)
        _write_metrics_csv(out_dir / "metrics.csv", record)
    return record


def _write_metrics_csv(path: Path, record: RunRecord) -> None:
    comp_keys = sorted(record.components[0].keys()) if record.components else []
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", *comp_keys])
        for epoch, (tr, va, comps) in enumerate(
            zip(record.train_losses, record.val_losses, record.components)
        ):
            writer.writerow([epoch, repr(tr), repr(va),
                             *(repr(comps[k]) for k in comp_keys)])


def select_best(records: Sequence[RunRecord]) -> RunRecord:
    """Lowest best-validation-loss run; ties break toward the lower run id."""
    usable = [r for r in records if not r.aborted]
    if not usable:
        raise TrainingAborted("all training runs aborted")
    best = usable[0]
    for r in usable[1:]:
        if r.best_val < best.best_val:
            best = r
    return best


def train_protocol(
    config: TrainConfig,
    dataset: WindowedDataset,
    out_dir: Optional[Path] = None,
) -> tuple[RunRecord, list[RunRecord]]:
    """`runs` independent seeded runs; the global best is kept for evaluation."""
    if config.runs < 1:
        raise ValueError("need at least one run")
    records: list[RunRecord] = []
    for r in range(config.runs):
        run_dir = None if out_dir is None else Path(out_dir) / f"run{r:02d}"
        try:
            records.append(
                train_one_run(config, dataset, run_seed=config.seed + r,
                              run_id=r, out_dir=run_dir)
            )
        except TrainingAborted as exc:
            log.error("run %d aborted: %s", r, exc)
            records.append(RunRecord(run_id=r, aborted=True, abort_reason=str(exc)))
    best = select_best(records)
    log.info("best run: %d (val %.4f at epoch %d)",
             best.run_id, best.best_val, best.best_epoch)
    return best, records


# --- hyperparameter search ----------------------------------------------------

GRID_B = (16, 32, 64, 128, 256, 512)
GRID_L = (51, 101, 151, 201, 251, 301)
GRID_BETA = (1.0, 2.0, 4.0, 6.0)


def _search_config(base: TrainConfig, b: int, window_len: int, beta: float,
                   epochs: int, runs: int) -> TrainConfig:
    model = apply_variant(base.model, "ct")
    model = replace(model, window_len=window_len)
    return replace(base, batch_size=b, beta=beta, epochs=epochs, runs=runs, model=model)


def grid_search(
    dataset: WindowedDataset,
    grid_b: Sequence[int] = GRID_B,
    grid_len: Sequence[int] = GRID_L,
    grid_beta: Sequence[float] = GRID_BETA,
    base: Optional[TrainConfig] = None,
    search_epochs: int = 5,
    search_runs: int = 1,
    mode: str = "coord",
    evaluate: Optional[Callable[[TrainConfig], float]] = None,
) -> tuple[TrainConfig, list[tuple[dict, float]]]:
    """Search batch size, window length and beta by validation loss (C+T).

    `coord` mode scans one axis at a time with the other axes at the base
    defaults; `full` mode evaluates the cartesian product. Singleton axes are
    taken as-is without spending any training runs. Returns the winning
    config (with the base epoch/run budget restored) and the trial log.
    """
    if mode not in ("coord", "full"):
        raise ValueError("mode must be 'coord' or 'full'")
    base = base or TrainConfig()

    if evaluate is None:
        def evaluate(cfg: TrainConfig) -> float:
            best, _ = train_protocol(cfg, dataset)
            return best.best_val

    trials: list[tuple[dict, float]] = []

    def run_trial(b: int, window_len: int, beta: float) -> float:
        cfg = _search_config(base, b, window_len, beta, search_epochs, search_runs)
        loss = evaluate(cfg)
        trials.append(({"b": b, "L": window_len, "beta": beta}, loss))
        log.info("search trial b=%d L=%d beta=%g: val %.4f", b, window_len, beta, loss)
        return loss

    defaults = (base.batch_size, base.model.window_len, base.beta)
    if mode == "full":
        best_combo, best_loss = None, math.inf
        for b, window_len, beta in itertools.product(grid_b, grid_len, grid_beta):
            loss = run_trial(b, window_len, beta)
            if loss < best_loss:
                best_combo, best_loss = (b, window_len, beta), loss
        assert best_combo is not None
        winners = best_combo
    else:
        winners = list(defaults)
        for axis, grid in enumerate((grid_b, grid_len, grid_beta)):
            grid = list(grid)
            if not grid:
                raise ValueError("grids must be non-empty")
            if len(grid) == 1:
                winners[axis] = grid[0]
                continue
            losses = []
            for value in grid:
                combo = list(defaults)
                combo[axis] = value
                losses.append(run_trial(*combo))
            winners[axis] = grid[int(np.argmin(losses))]
        winners = tuple(winners)

    final = _search_config(base, winners[0], winners[1], winners[2],
                           base.epochs, base.runs)
    return final, trials
