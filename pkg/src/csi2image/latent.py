"""Distribution algebra for the multimodal objective.

Diagonal-Gaussian posteriors over a shared latent, reparametrized sampling,
closed-form KL to the standard-normal prior, precision-weighted product of
experts for modality subsets, and the beta-weighted multi-subset bound that
averages one reconstruction+KL term per non-empty modality subset. Only the
image modality is ever decoded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Iterable, Mapping, Optional, Sequence

import torch

LOG_VAR_CLAMP = (-10.0, 10.0)

NoiseSource = Callable[[torch.Size], torch.Tensor]


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian q(z) with parameters mu and log sigma^2.

    Network-predicted log-variances are clamped to LOG_VAR_CLAMP at
    construction for numerical safety; pass clamp=None for already-valid
    parameters (e.g. outputs of expert products), which must stay exact.
    """

    mu: torch.Tensor
    log_var: torch.Tensor
    clamp: Optional[tuple[float, float]] = LOG_VAR_CLAMP

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ValueError("mu and log_var shapes differ")
        if self.clamp is not None:
            self.log_var = self.log_var.clamp(*self.clamp)

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    def detach(self) -> "GaussianPosterior":
        return GaussianPosterior(self.mu.detach(), self.log_var.detach(), clamp=None)


@dataclass
class LatentSample:
    z: torch.Tensor
    eps: torch.Tensor


@dataclass(frozen=True)
class SubsetPosterior:
    subset: frozenset[str]
    posterior: GaussianPosterior

    def __post_init__(self):
        if not self.subset:
            raise ValueError("modality subset must be non-empty")


@dataclass
class LossBreakdown:
    """Per-subset reconstruction and KL terms plus the averaged objective."""

    per_subset: dict[frozenset[str], tuple[float, float]]
    total: torch.Tensor  # float64 scalar; mean over subsets of recon + beta*kl
    beta: float = field(default=1.0)


def kl_standard_normal(q: GaussianPosterior) -> torch.Tensor:
    """KL(q || N(0, I)) = 1/2 sum_d (mu_d^2 + sigma_d^2 - log sigma_d^2 - 1).

    Sums over the last (latent) dimension; keeps any leading batch dims.
    """
    kl = 0.5 * (q.mu**2 + torch.exp(q.log_var) - q.log_var - 1.0).sum(dim=-1)
    return kl.clamp_min(0.0)


def reparameterize(q: GaussianPosterior, eps: torch.Tensor) -> LatentSample:
    """z = mu + exp(log_var / 2) * eps, deterministic given eps."""
    eps = eps.to(dtype=q.mu.dtype)
    z = q.mu + torch.exp(0.5 * q.log_var) * eps
    return LatentSample(z=z, eps=eps)


def poe_combine(experts: Sequence[GaussianPosterior]) -> GaussianPosterior:
    """Precision-weighted product of diagonal Gaussians.

    1/sigma^2 = sum_k 1/sigma_k^2 and mu = sigma^2 * sum_k mu_k / sigma_k^2.
    No prior expert enters the product; a single expert passes through.
    """
    if not experts:
        raise ValueError("poe_combine needs at least one expert")
    if len(experts) == 1:
        return experts[0]
    precisions = [torch.exp(-e.log_var) for e in experts]
    total_prec = torch.stack(precisions).sum(dim=0)
    mu = torch.stack([e.mu * p for e, p in zip(experts, precisions)]).sum(dim=0) / total_prec
    return GaussianPosterior(mu=mu, log_var=-torch.log(total_prec), clamp=None)


def powerset_posteriors(
    unimodal: Mapping[str, GaussianPosterior],
    present: Optional[Iterable[str]] = None,
) -> list[SubsetPosterior]:
    """One posterior per non-empty subset of the present modalities.

    Singletons pass through unchanged; larger subsets are expert products.
    Order is deterministic: by subset size, then by sorted modality tags.
    """
    tags = sorted(unimodal.keys()) if present is None else sorted(present)
    if not tags:
        raise ValueError("at least one modality must be present")
    unknown = [t for t in tags if t not in unimodal]
    if unknown:
        raise ValueError(f"unknown modalities: {unknown}")

    out: list[SubsetPosterior] = []
    for size in range(1, len(tags) + 1):
        for combo in combinations(tags, size):
            posterior = poe_combine([unimodal[t] for t in combo])
            out.append(SubsetPosterior(subset=frozenset(combo), posterior=posterior))
    return out


def recon_nll(decoded: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Negative Gaussian log-likelihood with unit variance, constants dropped.

    1/2 sum (x - x_hat)^2 over pixels. Rank-4 input is treated as a batch
    (per-sample sums); anything of rank <= 3 is a single sample.
    """
    if decoded.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(decoded.shape)} vs {tuple(target.shape)}")
    sq = (decoded - target) ** 2
    if decoded.ndim == 4:
        return 0.5 * sq.flatten(start_dim=1).sum(dim=-1)
    return 0.5 * sq.sum()


def seeded_noise(seed: int) -> NoiseSource:
    """Standard-normal noise source with its own generator state."""
    gen = torch.Generator().manual_seed(seed)

    def source(shape: torch.Size) -> torch.Tensor:
        return torch.randn(shape, generator=gen)

    return source


def mopoe_loss(
    subsets: Sequence[SubsetPosterior],
    decode: Callable[[torch.Tensor], torch.Tensor],
    target: torch.Tensor,
    beta: float,
    eps_source: Optional[NoiseSource] = None,
) -> LossBreakdown:
    """Mean over modality subsets of image reconstruction + beta * KL.

    One reparametrized latent is drawn per subset; the decoder maps every
    subset's latent to image space (no other modality is reconstructed).
    Per-subset terms are batch means when inputs are batched. The combined
    total is accumulated in float64 so it equals the mean of the reported
    per-subset components exactly.
    """
    if not subsets:
        raise ValueError("mopoe_loss needs at least one subset posterior")
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    if eps_source is None:
        eps_source = torch.randn

    per_subset: dict[frozenset[str], tuple[float, float]] = {}
    terms: list[torch.Tensor] = []
    for sp in subsets:
        q = sp.posterior
        eps = eps_source(q.mu.shape)
        z = reparameterize(q, eps).z
        recon = recon_nll(decode(z), target)
        kl = kl_standard_normal(q)
        if recon.ndim > 0:
            recon = recon.mean()
        if kl.ndim > 0:
            kl = kl.mean()
        per_subset[sp.subset] = (float(recon.detach()), float(kl.detach()))
        terms.append(recon.double() + beta * kl.double())
    total = torch.stack(terms).mean()
    return LossBreakdown(per_subset=per_subset, total=total, beta=beta)
