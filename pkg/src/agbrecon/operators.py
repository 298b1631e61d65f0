"""Multi-coil Cartesian MRI operators and undersampling masks.

Conventions
-----------
* images are complex tensors of shape ``(..., H, W)``
* coil stacks (sensitivity maps, coil images, k-space) are ``(..., C, H, W)``
* masks are 1D column patterns of length ``W`` along the phase-encode axis,
  broadcast over coils and rows

The FFT is centered (DC at index ``(H // 2, W // 2)``) and unitary, so the
forward model and the masked coil-combination are exact adjoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DimensionError

__all__ = [
    "SamplingMask",
    "adjoint_model",
    "adjoint_recon",
    "apply_mask",
    "as_complex_image",
    "check_normalized",
    "coil_expand",
    "fft2c",
    "forward_model",
    "ifft2c",
    "make_mask",
    "mask_tensor",
    "normalize_maps",
    "zero_fill",
]


@dataclass(frozen=True)
class SamplingMask:
    """Binary phase-encode pattern.

    ``columns`` is a uint8 vector of length ``W``; 1 marks an acquired line.
    """

    columns: np.ndarray
    R: float
    n_center: int
    seed: int | None = None

    def __post_init__(self):
        cols = np.asarray(self.columns)
        if cols.ndim != 1:
            raise DimensionError(f"mask columns must be 1D, got shape {cols.shape}")
        if not np.isin(cols, (0, 1)).all():
            raise ConfigError("mask columns must be binary")
        object.__setattr__(self, "columns", cols.astype(np.uint8))

    @property
    def width(self) -> int:
        return int(self.columns.shape[0])

    @property
    def n_sampled(self) -> int:
        return int(self.columns.sum())

    def center_slice(self) -> slice:
        start = self.width // 2 - self.n_center // 2
        return slice(start, start + self.n_center)

    def as_matrix(self, height: int) -> np.ndarray:
        """Broadcast to a ``height x W`` binary matrix (constant along rows)."""
        return np.broadcast_to(self.columns, (height, self.width)).copy()

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.columns, dtype=dtype)


def mask_tensor(mask, dtype=torch.float32, device=None) -> torch.Tensor:
    """Return mask columns as a real tensor of shape ``(..., W)``."""
    if isinstance(mask, SamplingMask):
        return torch.as_tensor(mask.columns, dtype=dtype, device=device)
    if isinstance(mask, np.ndarray):
        return torch.as_tensor(mask, dtype=dtype, device=device)
    return mask.to(dtype=dtype, device=device)


def _real_dtype(x: torch.Tensor) -> torch.dtype:
    return x.real.dtype if x.is_complex() else x.dtype


def fft2c(x: torch.Tensor) -> torch.Tensor:
    """Centered, unitary 2D FFT over the last two axes."""
    x = torch.fft.ifftshift(x, dim=(-2, -1))
    x = torch.fft.fft2(x, norm="ortho")
    return torch.fft.fftshift(x, dim=(-2, -1))


def ifft2c(k: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`fft2c`."""
    k = torch.fft.ifftshift(k, dim=(-2, -1))
    k = torch.fft.ifft2(k, norm="ortho")
    return torch.fft.fftshift(k, dim=(-2, -1))


def _check_image_maps(m: torch.Tensor, maps: torch.Tensor) -> None:
    if maps.ndim < 3:
        raise DimensionError(f"sensitivity maps need a coil axis, got shape {tuple(maps.shape)}")
    if m.shape[-2:] != maps.shape[-2:]:
        raise DimensionError(
            f"image {tuple(m.shape[-2:])} and maps {tuple(maps.shape[-2:])} differ in H, W"
        )
    if m.shape[:-2] != maps.shape[:-3]:
        try:
            torch.broadcast_shapes(m.shape[:-2], maps.shape[:-3])
        except RuntimeError as exc:
            raise DimensionError(
                f"batch shapes {tuple(m.shape[:-2])} and {tuple(maps.shape[:-3])} do not broadcast"
            ) from exc


def _check_coils_maps(k: torch.Tensor, maps: torch.Tensor) -> None:
    if k.ndim < 3 or maps.ndim < 3:
        raise DimensionError("coil stacks must have shape (..., C, H, W)")
    if k.shape[-3:] != maps.shape[-3:]:
        raise DimensionError(
            f"coil data {tuple(k.shape[-3:])} and maps {tuple(maps.shape[-3:])} disagree"
        )


def _check_mask(k: torch.Tensor, cols: torch.Tensor) -> None:
    if cols.shape[-1] != k.shape[-1]:
        raise DimensionError(f"mask width {cols.shape[-1]} != data width {k.shape[-1]}")


def coil_expand(m: torch.Tensor, maps: torch.Tensor) -> torch.Tensor:
    """Weight an image by every coil's sensitivity: ``out[..., i, :, :] = s_i * m``."""
    _check_image_maps(m, maps)
    return maps * m.unsqueeze(-3)


def apply_mask(k: torch.Tensor, mask) -> torch.Tensor:
    """Zero the k-space columns that were not acquired."""
    cols = mask_tensor(mask, dtype=_real_dtype(k), device=k.device)
    _check_mask(k, cols)
    # (..., W) -> (..., 1, 1, W) to broadcast over coils and rows
    return k * cols.unsqueeze(-2).unsqueeze(-2)


def forward_model(m: torch.Tensor, maps: torch.Tensor, mask) -> torch.Tensor:
    """Undersampled multi-coil k-space ``M * F(s_i * m)``."""
    return apply_mask(fft2c(coil_expand(m, maps)), mask)


def adjoint_recon(k: torch.Tensor, maps: torch.Tensor) -> torch.Tensor:
    """Coil-combined image ``sum_i conj(s_i) * F^-1(k_i)``."""
    _check_coils_maps(k, maps)
    return (maps.conj() * ifft2c(k)).sum(dim=-3)


def zero_fill(k_u: torch.Tensor, maps: torch.Tensor) -> torch.Tensor:
    """Zero-filled reconstruction of already-masked k-space."""
    return adjoint_recon(k_u, maps)


def adjoint_model(k: torch.Tensor, maps: torch.Tensor, mask) -> torch.Tensor:
    """Adjoint of :func:`forward_model` (mask, then coil-combine)."""
    return adjoint_recon(apply_mask(k, mask), maps)


def normalize_maps(maps, eps: float = 1e-12):
    """Rescale maps pixelwise so that ``sum_i |s_i|^2 == 1``."""
    if isinstance(maps, np.ndarray):
        return maps / np.sqrt(np.maximum((np.abs(maps) ** 2).sum(axis=-3, keepdims=True), eps))
    power = (maps.abs() ** 2).sum(dim=-3, keepdim=True)
    return maps / torch.sqrt(torch.clamp(power, min=eps))


def check_normalized(maps, atol: float = 1e-6) -> bool:
    power = (np.abs(np.asarray(maps)) ** 2).sum(axis=-3)
    return bool(np.all(np.abs(power - 1.0) <= atol))


def as_complex_image(data) -> np.ndarray:
    """Validate a 2D complex image: finite, with even H, W >= 8."""
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise DimensionError(f"image must be 2D, got shape {arr.shape}")
    h, w = arr.shape
    if h < 8 or w < 8 or h % 2 or w % 2:
        raise DimensionError(f"image dims must be even and >= 8, got {h}x{w}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("image contains non-finite values")
    return arr.astype(np.complex128 if arr.dtype != np.complex64 else np.complex64)


def make_mask(
    W: int,
    R: float,
    n_center: int = 12,
    density_exponent: float = 3.0,
    seed: int = 0,
) -> SamplingMask:
    """Variable-density 1D Cartesian mask with a fully sampled center block.

    Exactly ``round(W / R)`` lines are set, including the ``n_center`` central
    lines. The remaining lines are drawn without replacement with probability
    proportional to ``(1 - |x|) ** density_exponent``, where ``x`` is the
    distance from the k-space center normalized so the outermost column keeps
    a small nonzero weight.
    """
    if W < 1:
        raise ConfigError(f"W must be positive, got {W}")
    if R < 1:
        raise ConfigError(f"acceleration R must be >= 1, got {R}")
    if not 0 <= n_center <= W:
        raise ConfigError(f"n_center must be in [0, W], got {n_center}")
    budget = int(np.floor(W / R + 0.5))
    if budget < n_center:
        raise ConfigError(
            f"line budget round(W/R) = {budget} is smaller than n_center = {n_center}"
        )

    cols = np.zeros(W, dtype=np.uint8)
    start = W // 2 - n_center // 2
    cols[start : start + n_center] = 1

    remaining = budget - n_center
    if remaining > 0:
        candidates = np.flatnonzero(cols == 0)
        dist = np.abs(candidates - W // 2) / (W // 2 + 1)
        weights = (1.0 - dist) ** density_exponent
        rng = np.random.default_rng(seed)
        picked = rng.choice(candidates, size=remaining, replace=False, p=weights / weights.sum())
        cols[picked] = 1
    return SamplingMask(columns=cols, R=float(R), n_center=int(n_center), seed=seed)
