"""Procedural paired-contrast phantoms.

Each pair shares one randomly composed geometry (background ellipse, blob
shapes, thin lines, isolated dots) painted with per-contrast intensities, so
the two images have identical anatomical support but different tissue
appearance. Intensities live in [0.1, 1], keeping the support threshold of
0.02 unambiguous, and per-region draws are rejected until the two contrasts
differ by at least 0.08 there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUPPORT_THRESHOLD = 0.02
_MIN_REGION_CONTRAST = 0.08
_SUPPORTED_SIZES = (16, 32, 64)


@dataclass(frozen=True)
class PhantomPair:
    """Two real-valued contrasts of one anatomy, as (2,H,W) grids (imag = 0)."""

    target: np.ndarray
    reference: np.ndarray

    @property
    def size(self) -> int:
        return self.target.shape[1]

    def support(self) -> np.ndarray:
        return np.hypot(self.target[0], self.target[1]) > SUPPORT_THRESHOLD

    def mean_contrast_difference(self) -> float:
        sup = self.support()
        return float(np.abs(self.target[0][sup] - self.reference[0][sup]).mean())


def _rotated_coords(yy, xx, cy, cx, theta):
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return u, v


def _ellipse_mask(yy, xx, cy, cx, ry, rx, theta):
    u, v = _rotated_coords(yy, xx, cy, cx, theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _region_intensities(rng) -> tuple[float, float]:
    a = rng.uniform(0.1, 1.0)
    b = rng.uniform(0.1, 1.0)
    while abs(a - b) < _MIN_REGION_CONTRAST:
        b = rng.uniform(0.1, 1.0)
    return a, b


def gen_phantom_pair(size: int, seed: int) -> PhantomPair:
    """Deterministic paired-contrast phantom at ``size`` in {16, 32, 64}."""
    if size not in _SUPPORTED_SIZES:
        raise ValueError(f"unsupported phantom size {size}, expected one of {_SUPPORTED_SIZES}")
    rng = np.random.Generator(np.random.PCG64(seed))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img_a = np.zeros((size, size))
    img_b = np.zeros((size, size))

    def paint(mask: np.ndarray):
        if not mask.any():
            return
        a, b = _region_intensities(rng)
        img_a[mask] = a
        img_b[mask] = b

    # Background ellipse; everything else is confined to it.
    cy = size / 2 + rng.uniform(-0.02, 0.02) * size
    cx = size / 2 + rng.uniform(-0.02, 0.02) * size
    ry = rng.uniform(0.38, 0.45) * size
    rx = rng.uniform(0.38, 0.45) * size
    background = _ellipse_mask(yy, xx, cy, cx, ry, rx, rng.uniform(0, np.pi))
    paint(background)

    def interior_point():
        r = rng.uniform(0, 0.55)
        phi = rng.uniform(0, 2 * np.pi)
        return cy + r * ry * np.sin(phi), cx + r * rx * np.cos(phi)

    for _ in range(rng.integers(3, 9)):
        py, px = interior_point()
        if rng.uniform() < 0.5:
            sry = rng.uniform(0.06, 0.22) * size
            srx = rng.uniform(0.06, 0.22) * size
            shape = _ellipse_mask(yy, xx, py, px, sry, srx, rng.uniform(0, np.pi))
        else:
            hy = rng.uniform(0.05, 0.18) * size
            hx = rng.uniform(0.05, 0.18) * size
            shape = (np.abs(yy - py) <= hy) & (np.abs(xx - px) <= hx)
        paint(shape & background)

    # Thin lines (<= 2 px) echo elongated structures.
    for _ in range(rng.integers(1, 4)):
        py, px = interior_point()
        theta = rng.uniform(0, np.pi)
        half_len = rng.uniform(0.15, 0.4) * size
        thickness = float(rng.integers(1, 3))
        u, v = _rotated_coords(yy, xx, py, px, theta)
        line = (np.abs(v) <= thickness / 2) & (np.abs(u) <= half_len)
        paint(line & background)

    # Isolated single-pixel dots, preferring spots whose 3x3 patch is uniform.
    for _ in range(rng.integers(1, 4)):
        for attempt in range(20):
            py, px = interior_point()
            iy, ix = int(round(py)), int(round(px))
            if not (1 <= iy < size - 1 and 1 <= ix < size - 1) or not background[iy, ix]:
                continue
            patch = img_a[iy - 1 : iy + 2, ix - 1 : ix + 2]
            if np.all(patch == patch[1, 1]) or attempt == 19:
                dot = np.zeros_like(background)
                dot[iy, ix] = True
                paint(dot)
                break

    zeros = np.zeros_like(img_a)
    return PhantomPair(
        target=np.stack([img_a, zeros]),
        reference=np.stack([img_b, zeros]),
    )
