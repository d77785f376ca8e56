"""Closed-form probabilistic primitives shared by the model, losses and metrics.

Everything here is a pure function of its arguments: randomness enters only
through explicit noise tensors, so all operations are safe to call from
concurrent workers.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch
from torch import Tensor
import torch.nn.functional as F

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# softplus(t) is t to double precision once t exceeds this
_SOFTPLUS_SATURATION = 30.0


@dataclass
class DiagGaussian:
    """Mean / log-standard-deviation pair of a diagonal Gaussian over a tensor."""

    mean: Tensor
    log_std: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_std.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != log_std shape {tuple(self.log_std.shape)}"
            )

    @property
    def std(self) -> Tensor:
        return torch.exp(self.log_std)

    def shift(self, mean_offset: Tensor, log_std_offset: Tensor, scale: float = 1.0) -> "DiagGaussian":
        """Offset both parameters by `scale` times the given residuals."""
        return DiagGaussian(self.mean + scale * mean_offset, self.log_std + scale * log_std_offset)


def kl_elements(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Per-element KL(q || p) between diagonal Gaussians."""
    if q.mean.shape != p.mean.shape:
        raise ValueError(
            f"distribution shapes differ: {tuple(q.mean.shape)} vs {tuple(p.mean.shape)}"
        )
    var_ratio = torch.exp(2.0 * (q.log_std - p.log_std))
    scaled_sq_diff = (q.mean - p.mean) ** 2 * torch.exp(-2.0 * p.log_std)
    return (p.log_std - q.log_std) + 0.5 * (var_ratio + scaled_sq_diff) - 0.5


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Total KL(q || p), summed over every element. Always >= 0."""
    return kl_elements(q, p).sum()


def smoothed_free_bits(kl: Union[float, Tensor], fb: float) -> Union[float, Tensor]:
    """Softplus-smoothed free-bits floor: softplus(kl - fb) + fb.

    Strictly above fb, monotone in kl, and equal to kl (to double precision)
    once kl - fb is large.
    """
    if fb < 0:
        raise ValueError(f"free-bits threshold must be >= 0, got {fb}")
    if isinstance(kl, Tensor):
        return fb + F.softplus(kl - fb)
    gap = kl - fb
    if gap > _SOFTPLUS_SATURATION:
        return float(kl)
    return fb + math.log1p(math.exp(gap))


def reparam_sample(d: DiagGaussian, noise: Tensor, temperature: float = 1.0) -> Tensor:
    """Reparameterized draw mean + temperature * std * noise.

    `noise` is expected to be standard normal; passing zeros gives the mean.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if noise.shape != d.mean.shape:
        raise ValueError(
            f"noise shape {tuple(noise.shape)} != distribution shape {tuple(d.mean.shape)}"
        )
    return d.mean + temperature * torch.exp(d.log_std) * noise


@dataclass
class PixelVarianceTracker:
    """Running per-pixel variance of the reconstruction error.

    The variance enters the likelihood as a constant (it is never part of the
    autodiff graph) and is floored so the likelihood cannot diverge on pixels
    that are reconstructed perfectly.
    """

    variance: Tensor
    momentum: float = 0.9
    floor: float = 1e-4

    def __post_init__(self):
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.floor <= 0:
            raise ValueError(f"floor must be > 0, got {self.floor}")
        self.variance = self.variance.detach().clamp_min(self.floor)

    @classmethod
    def initial(cls, shape, momentum: float = 0.9, floor: float = 1e-4,
                init: float = 1.0, dtype=torch.float32) -> "PixelVarianceTracker":
        return cls(torch.full(tuple(shape), init, dtype=dtype), momentum, floor)


def update_pixel_variance(tracker: PixelVarianceTracker, batch_sq_errors: Tensor) -> PixelVarianceTracker:
    """EMA update from a batch of squared errors (batch leading dim), floored.

    Returns a new tracker; the input is left untouched.
    """
    if batch_sq_errors.ndim != tracker.variance.ndim + 1 or batch_sq_errors.shape[0] == 0:
        raise ValueError(
            f"expected nonempty batch of shape (B, {tuple(tracker.variance.shape)}), "
            f"got {tuple(batch_sq_errors.shape)}"
        )
    batch_mean = batch_sq_errors.detach().mean(dim=0)
    new_var = tracker.momentum * tracker.variance + (1.0 - tracker.momentum) * batch_mean
    return PixelVarianceTracker(new_var, tracker.momentum, tracker.floor)


def gaussian_nll(x: Tensor, recon: Tensor, tracker: PixelVarianceTracker) -> Tensor:
    """Negative Gaussian log-likelihood with tracked per-pixel variance.

    Sums (x - recon)^2 / (2 var) + log std + 0.5 log 2pi over the pixel
    dimensions. Inputs may carry one extra leading batch dimension, in which
    case a per-sample vector is returned.
    """
    if x.shape != recon.shape:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs recon {tuple(recon.shape)}")
    var = tracker.variance
    if x.shape[-var.ndim:] != var.shape or x.ndim > var.ndim + 1:
        raise ValueError(
            f"inputs of shape {tuple(x.shape)} do not match tracked shape {tuple(var.shape)}"
        )
    terms = (x - recon) ** 2 / (2.0 * var) + 0.5 * torch.log(var) + HALF_LOG_2PI
    return terms.sum(dim=tuple(range(x.ndim - var.ndim, x.ndim)))


def recenter_probability(p, times: int = 1):
    """Pull probabilities away from the extremes: 0.5 * (sqrt(p) - sqrt(1-p) + 1).

    Fixes 0, 0.5 and 1, and is strictly monotone on [0, 1]. Accepts scalars or
    numpy arrays; applied `times` times in sequence.
    """
    if times < 1:
        raise ValueError(f"times must be >= 1, got {times}")
    arr = np.asarray(p, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    for _ in range(times):
        arr = 0.5 * (np.sqrt(arr) - np.sqrt(1.0 - arr) + 1.0)
    arr = np.clip(arr, 0.0, 1.0)
    if np.isscalar(p) or np.ndim(p) == 0:
        return float(arr)
    return arr


@dataclass
class FeatureStats:
    """Gaussian fit (mean, covariance, sample count) to a set of feature vectors."""

    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        if self.count < 2:
            raise ValueError(f"need at least 2 samples, got {self.count}")
        if self.covariance.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match feature dimension")
        asym = np.abs(self.covariance - self.covariance.T).max()
        if asym > 1e-6:
            raise ValueError(f"covariance asymmetry {asym:.3g} exceeds tolerance")

    @classmethod
    def from_features(cls, features: np.ndarray, shrinkage: float = 0.0) -> "FeatureStats":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 2:
            raise ValueError(f"expected (n >= 2, dim) feature matrix, got {features.shape}")
        n, dim = features.shape
        if n < dim + 1:
            warnings.warn(
                f"{n} samples for {dim}-dim features: covariance is rank deficient, "
                "applying 1e-6 shrinkage", RuntimeWarning)
            shrinkage = max(shrinkage, 1e-6)
        cov = np.cov(features, rowvar=False)
        cov = 0.5 * (cov + cov.T) + shrinkage * np.eye(dim)
        return cls(features.mean(axis=0), cov, n)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between the two Gaussian fits.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the matrix
    square root taken through the symmetric product sqrt(S_a) S_b sqrt(S_a)
    and eigenvalues clamped at zero for near-singular covariances.
    """
    if a.mean.size != b.mean.size:
        raise ValueError(f"feature dims differ: {a.mean.size} vs {b.mean.size}")
    sqrt_a = _psd_sqrt(a.covariance)
    inner = sqrt_a @ b.covariance @ sqrt_a
    inner = 0.5 * (inner + inner.T)
    vals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    tr_sqrt = np.sqrt(vals).sum()
    diff = a.mean - b.mean
    dist = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * tr_sqrt)
    return max(dist, 0.0)
