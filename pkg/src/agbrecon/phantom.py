"""Synthetic phantoms and coil sensitivity maps."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .operators import normalize_maps


def _grid(H: int, W: int):
    y = np.linspace(-1.0, 1.0, H, endpoint=False) + 1.0 / H
    x = np.linspace(-1.0, 1.0, W, endpoint=False) + 1.0 / W
    return np.meshgrid(y, x, indexing="ij")


def _ellipse(yy, xx, cy, cx, ay, ax, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def gen_phantom(H: int, W: int, seed: int) -> np.ndarray:
    """Random piecewise-smooth complex phantom with magnitude in ``[0, 1]``.

    A head-like outer ellipse holds 5-15 random inner ellipses with distinct
    intensities, plus 2-5 thin line segments that carry high-frequency
    content. The magnitude is modulated by a gentle smooth field and the
    image carries a low-order polynomial phase.
    """
    if H < 32 or W < 32 or H % 2 or W % 2:
        raise ConfigError(f"phantom size must be even and >= 32, got {H}x{W}")
    rng = np.random.default_rng(seed)
    yy, xx = _grid(H, W)

    mag = np.zeros((H, W))
    outer_y, outer_x = rng.uniform(0.75, 0.9), rng.uniform(0.6, 0.8)
    mag[_ellipse(yy, xx, 0.0, 0.0, outer_y, outer_x, rng.uniform(-0.2, 0.2))] = rng.uniform(0.3, 0.5)

    n_ellipses = int(rng.integers(5, 16))
    intensities = rng.permutation(np.linspace(-0.25, 0.6, n_ellipses))
    intensities = intensities + rng.uniform(-0.02, 0.02, n_ellipses)
    for level in intensities:
        cy, cx = rng.uniform(-0.5, 0.5, 2)
        ay, ax = rng.uniform(0.05, 0.35, 2)
        inside = _ellipse(yy, xx, cy, cx, ay, ax, rng.uniform(0, np.pi))
        mag[inside] += level

    n_lines = int(rng.integers(2, 6))
    for _ in range(n_lines):
        p0 = rng.uniform(-0.6, 0.6, 2)
        angle = rng.uniform(0, np.pi)
        length = rng.uniform(0.2, 0.8)
        direction = np.array([np.sin(angle), np.cos(angle)])
        # distance from each pixel to the segment, thickness about one pixel
        rel_y, rel_x = yy - p0[0], xx - p0[1]
        t = np.clip(rel_y * direction[0] + rel_x * direction[1], 0.0, length)
        dist = np.hypot(rel_y - t * direction[0], rel_x - t * direction[1])
        mag[dist < 1.0 / max(H, W)] += rng.uniform(0.3, 0.6)

    mag = np.clip(mag, 0.0, None)
    a = rng.normal(0, 0.15, 3)
    mag *= 1.0 + a[0] * yy + a[1] * xx + a[2] * xx * yy

    coeffs = rng.normal(0, 0.5, 6)
    phase = (
        coeffs[0]
        + coeffs[1] * yy
        + coeffs[2] * xx
        + coeffs[3] * yy * xx
        + coeffs[4] * yy**2
        + coeffs[5] * xx**2
    )
    mag = np.clip(mag, 0.0, None)
    peak = mag.max()
    if peak <= 0:
        raise ConfigError("degenerate phantom")
    return (mag / peak) * np.exp(1j * phase)


def gen_sensitivity_maps(H: int, W: int, n_coils: int, seed: int) -> np.ndarray:
    """Smooth Gaussian-lobe coil profiles, normalized so ``sum_i |s_i|^2 = 1``.

    Coil centers sit on a ring just outside the field of view, evenly spaced
    with a small random jitter; each coil carries a smooth linear phase.
    """
    if n_coils < 1:
        raise ConfigError(f"n_coils must be >= 1, got {n_coils}")
    if H < 1 or W < 1:
        raise ConfigError(f"invalid map size {H}x{W}")
    rng = np.random.default_rng(seed)
    yy, xx = _grid(H, W)
    offset = rng.uniform(0, 2 * np.pi)
    maps = np.empty((n_coils, H, W), dtype=np.complex128)
    for i in range(n_coils):
        angle = offset + 2 * np.pi * i / n_coils + rng.uniform(-0.1, 0.1)
        radius = rng.uniform(1.1, 1.3)
        cy, cx = radius * np.sin(angle), radius * np.cos(angle)
        width = rng.uniform(0.7, 1.0)
        lobe = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        ph = rng.uniform(-np.pi, np.pi) + rng.normal(0, 0.5) * yy + rng.normal(0, 0.5) * xx
        maps[i] = lobe * np.exp(1j * ph)
    return normalize_maps(maps)
