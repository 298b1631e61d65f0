"""NMSE and Frechet distance between feature distributions."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import linalg

from .errors import DimensionError, InsufficientDataError, NumericInstabilityError, UndefinedMetricError

logger = logging.getLogger(__name__)

IMAG_TOL = 1e-6
CLAMP_TOL = 1e-6
RIDGE = 1e-6


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def nmse(x, ref) -> float:
    """``||x - ref||^2 / ||ref||^2`` over complex values."""
    x, ref = _np(x), _np(ref)
    if x.shape != ref.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {ref.shape}")
    x = x.astype(np.complex128)
    ref = ref.astype(np.complex128)
    denom = np.sum(np.abs(ref) ** 2)
    if denom == 0:
        raise UndefinedMetricError("NMSE undefined for an all-zero reference")
    return float(np.sum(np.abs(x - ref) ** 2) / denom)


def mean_nmse(xs, refs) -> float:
    """Average per-image NMSE over a batch of shape ``(B, H, W)``."""
    xs, refs = _np(xs), _np(refs)
    return float(np.mean([nmse(a, b) for a, b in zip(xs, refs)]))


@dataclass(frozen=True)
class FIDStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @property
    def dim(self) -> int:
        return int(self.mu.shape[0])


def fit_stats(features) -> FIDStats:
    """Sample mean and unbiased covariance of an ``(n, d)`` feature array."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    n = feats.shape[0]
    if n < 2:
        raise InsufficientDataError(f"need at least 2 feature vectors, got {n}")
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / (n - 1)
    return FIDStats(mu=mu, sigma=(sigma + sigma.T) / 2, n=n)


def _sqrtm_trace(product: np.ndarray) -> float | None:
    """Trace of the principal square root of ``product = S_a S_b``.

    The product is similar to a symmetric PSD matrix, so its eigenvalues are
    real and nonnegative up to rounding and ``Tr sqrt(P) = sum(sqrt(eig(P)))``.
    Returns ``None`` when the eigenvalues are not finite.
    """
    ev = linalg.eigvals(product)
    if not np.all(np.isfinite(ev)):
        return None
    scale = max(np.max(np.abs(ev)), np.finfo(float).tiny)
    leak = np.max(np.abs(ev.imag))
    if leak / scale > IMAG_TOL:
        raise NumericInstabilityError(f"covariance product has complex eigenvalues (|imag| {leak:.3g})")
    ev = ev.real
    if np.min(ev) < -IMAG_TOL * scale:
        raise NumericInstabilityError(f"covariance product has negative eigenvalue {np.min(ev):.3g}")
    # eigenvalues at rounding level are zero; sqrt would blow their noise up to ~1e-8
    floor = ev.size * np.finfo(float).eps * scale
    ev = np.where(ev > floor, ev, 0.0)
    return float(np.sum(np.sqrt(ev)))


def fid(a: FIDStats, b: FIDStats) -> float:
    """Frechet distance between two Gaussians.

    ``||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 sqrt(S_a S_b))``. The trace of the
    square root comes from the eigenvalues of the (non-symmetric) product; if
    they are not finite a small ridge is added to both covariances.
    """
    if a.dim != b.dim:
        raise DimensionError(f"feature dims differ: {a.dim} vs {b.dim}")
    diff = a.mu - b.mu
    tr = _sqrtm_trace(a.sigma @ b.sigma)
    if tr is None:
        logger.warning("singular covariance product; adding %.1e ridge", RIDGE)
        eye = np.eye(a.dim) * RIDGE
        tr = _sqrtm_trace((a.sigma + eye) @ (b.sigma + eye))
        if tr is None:
            raise NumericInstabilityError("matrix square root is not finite")
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr)
    if value < 0:
        if value < -CLAMP_TOL:
            raise NumericInstabilityError(f"negative Frechet distance {value:.3g}")
        value = 0.0
    return value


class FeatureExtractor(Protocol):
    dim: int

    def __call__(self, images: np.ndarray) -> np.ndarray:
        """Map ``(n, H, W)`` magnitude images to ``(n, dim)`` features."""


def normalize_magnitudes(images) -> np.ndarray:
    """Per-image min-max scaling of magnitudes to ``[0, 1]``."""
    mags = np.abs(_np(images)).astype(np.float64)
    lo = mags.min(axis=(-2, -1), keepdims=True)
    hi = mags.max(axis=(-2, -1), keepdims=True)
    return (mags - lo) / np.where(hi > lo, hi - lo, 1.0)


class DeskExtractor:
    """Fixed random-weight conv features: 3 strided convs + global average pool."""

    dim = 64

    def __init__(self, seed: int = 0):
        gen = torch.Generator().manual_seed(seed)
        widths = (1, 16, 32, self.dim)
        self.weights = []
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            w = torch.randn(c_out, c_in, 3, 3, generator=gen, dtype=torch.float64)
            self.weights.append(w * np.sqrt(2.0 / (c_in * 9)))

    @torch.no_grad()
    def __call__(self, images) -> np.ndarray:
        x = torch.from_numpy(normalize_magnitudes(images)).unsqueeze(1)
        for w in self.weights:
            x = F.leaky_relu(F.conv2d(x, w, stride=2, padding=1), 0.2)
        return x.mean(dim=(-2, -1)).numpy()


class InceptionExtractor:
    """Pool-3 activations of torchvision's pretrained Inception-v3 (2048-d).

    Weights are fetched by torchvision on first use; this fails offline unless
    they are already cached.
    """

    dim = 2048

    def __init__(self):
        from torchvision.models import Inception_V3_Weights, inception_v3

        model = inception_v3(weights=Inception_V3_Weights.DEFAULT, aux_logits=True)
        model.fc = nn.Identity()
        self.model = model.eval()

    @torch.no_grad()
    def __call__(self, images) -> np.ndarray:
        x = torch.from_numpy(normalize_magnitudes(images)).float().unsqueeze(1)
        x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        x = x.repeat(1, 3, 1, 1)
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        return self.model((x - mean) / std).double().numpy()


def get_extractor(name: str = "desk") -> FeatureExtractor:
    if name == "desk":
        return DeskExtractor()
    if name == "pretrained":
        return InceptionExtractor()
    raise ValueError(f"unknown feature extractor '{name}'")


def fid_between_image_sets(A: Sequence, B: Sequence, extractor: FeatureExtractor | None = None) -> float:
    extractor = extractor or DeskExtractor()
    A, B = _np(A), _np(B)
    a, b = fit_stats(extractor(A)), fit_stats(extractor(B))
    if min(len(A), len(B)) < extractor.dim + 1:
        warnings.warn(
            f"FID on {len(A)}/{len(B)} images with {extractor.dim}-d features: "
            f"covariance is rank deficient, adding {RIDGE:.0e} ridge",
            stacklevel=2,
        )
        logger.info("FID ridge %.1e applied (n=%d/%d, d=%d)", RIDGE, len(A), len(B), extractor.dim)
        eye = np.eye(extractor.dim) * RIDGE
        a = FIDStats(a.mu, a.sigma + eye, a.n)
        b = FIDStats(b.mu, b.sigma + eye, b.n)
    return fid(a, b)
