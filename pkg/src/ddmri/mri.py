"""K-space physics: centered orthonormal FFTs, Cartesian masks, undersampling,
and hard data consistency.

Complex grids are represented as 2-channel real arrays of shape (2, H, W):
channel 0 real, channel 1 imaginary. Array-level functions operate on plain
ndarrays for simulation and metrics; the ``*_t`` variants are differentiable
ops over ``Tensor`` for use inside the networks. Both FFTs are unitary, so
each one's gradient rule is simply the inverse transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ShapeError, Tensor, record

__all__ = [
    "to_complex",
    "from_complex",
    "fft2c",
    "ifft2c",
    "fft2c_t",
    "ifft2c_t",
    "SamplingMask",
    "make_cartesian_mask",
    "undersample",
    "data_consistency",
    "data_consistency_t",
    "degrade_reference",
    "magnitude",
]


def to_complex(x: np.ndarray) -> np.ndarray:
    if x.shape[0] != 2 or x.ndim != 3:
        raise ShapeError(f"expected (2,H,W) two-channel grid, got {x.shape}")
    return x[0] + 1j * x[1]


def from_complex(z: np.ndarray, dtype=np.float64) -> np.ndarray:
    return np.stack([z.real, z.imag]).astype(dtype, copy=False)


def magnitude(x: np.ndarray) -> np.ndarray:
    """|.| of a 2-channel grid, shape (H, W)."""
    if x.shape[0] != 2 or x.ndim != 3:
        raise ShapeError(f"expected (2,H,W) two-channel grid, got {x.shape}")
    return np.hypot(x[0], x[1])


def _fft2c_complex(z: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(z), norm="ortho"))


def _ifft2c_complex(z: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(z), norm="ortho"))


def fft2c(x: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2-D FFT of a (2,H,W) grid (DC lands at H//2, W//2)."""
    return from_complex(_fft2c_complex(to_complex(x)), dtype=x.dtype)


def ifft2c(x: np.ndarray) -> np.ndarray:
    return from_complex(_ifft2c_complex(to_complex(x)), dtype=x.dtype)


def fft2c_t(x: Tensor) -> Tensor:
    out = fft2c(x.data)
    return record("fft2c", out, (x,), lambda g: (ifft2c(g),))


def ifft2c_t(x: Tensor) -> Tensor:
    out = ifft2c(x.data)
    return record("ifft2c", out, (x,), lambda g: (fft2c(g),))


@dataclass(frozen=True)
class SamplingMask:
    """1-D Cartesian column mask: value at (r, c) is ``columns[c]``."""

    columns: np.ndarray  # (W,) bool
    height: int

    def __post_init__(self):
        object.__setattr__(self, "columns", np.asarray(self.columns, dtype=bool))

    @property
    def width(self) -> int:
        return self.columns.size

    @property
    def n_sampled(self) -> int:
        return int(self.columns.sum())

    def to_array(self) -> np.ndarray:
        return np.broadcast_to(self.columns[None, :], (self.height, self.width)).copy()

    def to_float(self, dtype=np.float64) -> np.ndarray:
        return self.to_array().astype(dtype)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def acs_columns(width: int, acs_frac: float) -> tuple[int, int]:
    """Start (inclusive) and stop (exclusive) of the centered ACS block."""
    n_acs = int(np.ceil(acs_frac * width))
    start = (width - n_acs) // 2
    return start, start + n_acs


def make_cartesian_mask(
    width: int, height: int, accel: float, acs_frac: float = 0.125, seed: int = 0
) -> SamplingMask:
    """Centered ACS block plus uniformly drawn extra columns, ``round(W/accel)`` total."""
    if accel < 1:
        raise ValueError(f"acceleration must be >= 1, got {accel}")
    if not 0 < acs_frac <= 1:
        raise ValueError(f"acs_frac must be in (0, 1], got {acs_frac}")
    n_total = _round_half_up(width / accel)
    start, stop = acs_columns(width, acs_frac)
    n_acs = stop - start
    if n_total < n_acs:
        raise ValueError(
            f"infeasible budget: round({width}/{accel})={n_total} columns < {n_acs} ACS columns"
        )
    columns = np.zeros(width, dtype=bool)
    columns[start:stop] = True
    n_extra = n_total - n_acs
    if n_extra > 0:
        rng = np.random.Generator(np.random.PCG64(seed))
        candidates = np.flatnonzero(~columns)
        chosen = rng.choice(candidates, size=n_extra, replace=False)
        columns[chosen] = True
    return SamplingMask(columns=columns, height=height)


def _check_grid_mask(x_shape, mask: SamplingMask):
    if x_shape != (2, mask.height, mask.width):
        raise ShapeError(f"grid shape {x_shape} does not match mask (2,{mask.height},{mask.width})")


def undersample(kspace: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """Zero out unsampled k-space columns (both channels)."""
    _check_grid_mask(kspace.shape, mask)
    return np.where(mask.columns[None, None, :], kspace, 0.0).astype(kspace.dtype)


def data_consistency(k_pred: np.ndarray, k_meas: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """Hard replacement: measured values on sampled columns, prediction elsewhere."""
    _check_grid_mask(k_pred.shape, mask)
    if k_meas.shape != k_pred.shape:
        raise ShapeError(f"k_meas shape {k_meas.shape} != k_pred shape {k_pred.shape}")
    return np.where(mask.columns[None, None, :], k_meas, k_pred).astype(k_pred.dtype)


def data_consistency_t(k_pred: Tensor, k_meas: np.ndarray, mask: SamplingMask) -> Tensor:
    """Differentiable hard DC: the gradient passes only through unsampled entries."""
    _check_grid_mask(k_pred.shape, mask)
    if k_meas.shape != k_pred.shape:
        raise ShapeError(f"k_meas shape {k_meas.shape} != k_pred shape {k_pred.shape}")
    m = mask.columns[None, None, :]
    out = np.where(m, k_meas.astype(k_pred.data.dtype, copy=False), k_pred.data)

    def vjp(g):
        return (np.where(m, 0.0, g).astype(g.dtype, copy=False),)

    return record("data_consistency", out, (k_pred,), vjp)


def degrade_reference(ref: np.ndarray, quality: str, seed: int = 0) -> tuple[np.ndarray, int]:
    """Produce the reference grid actually fed to the model, plus its AC flag.

    HQ passes the reference through; LQ is the zero-filled reconstruction of a
    2x undersampling; absent is the all-zero (black) grid with AC = 0.
    """
    if quality == "HQ":
        return ref.copy(), 1
    if quality == "LQ":
        mask = make_cartesian_mask(ref.shape[2], ref.shape[1], accel=2.0, acs_frac=0.125, seed=seed)
        return ifft2c(undersample(fft2c(ref), mask)), 1
    if quality == "absent":
        return np.zeros_like(ref), 0
    raise ValueError(f"unknown reference quality {quality!r} (expected HQ, LQ, or absent)")
