"""Volume downsampling to model resolution and 8-bit quantization.

The resampler is a separable cubic B-spline interpolator. A recursive
prefilter converts samples into B-spline coefficients so the interpolant
passes through the original voxels; evaluation then maps each output
coordinate back into the source grid with the align-corners convention

    x_in = x_out * (N_in - 1) / (N_out - 1)

and takes the 4-tap cubic kernel (2-tap linear for order 1). Boundaries use
mirror reflection about the edge samples. All arithmetic is float64
internally; results are cast to float32, which makes the constant-volume
case reproduce exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .volume_io import Volume

# Single pole of the cubic B-spline prefilter and its normalization
# gain (1 - z)(1 - 1/z).
_POLE = math.sqrt(3.0) - 2.0
_GAIN = 6.0
# |pole|^k < 1e-15 beyond this many terms, so the truncated causal-init
# series is exact to double precision.
_INIT_HORIZON = int(math.ceil(math.log(1e-15) / math.log(abs(_POLE))))


@dataclass(frozen=True)
class PreprocessConfig:
    target_dims: tuple[int, int, int] = (50, 64, 64)
    spline_order: int = 3

    def __post_init__(self):
        if len(self.target_dims) != 3 or any(d < 2 for d in self.target_dims):
            raise ConfigError(f"target_dims must be three extents >= 2, got {self.target_dims}")
        if self.spline_order not in (1, 3):
            raise ConfigError(f"spline_order must be 1 or 3, got {self.spline_order}")


def _bspline3(t: np.ndarray) -> np.ndarray:
    """Cubic B-spline kernel, support (-2, 2)."""
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t < 1.0
    far = (t >= 1.0) & (t < 2.0)
    out[near] = 2.0 / 3.0 - t[near] ** 2 * (2.0 - t[near]) / 2.0
    out[far] = (2.0 - t[far]) ** 3 / 6.0
    return out


def _mirror(idx: np.ndarray, n: int) -> np.ndarray:
    """Fold out-of-range indices by reflection about the edge samples."""
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def _prefilter_axis(arr: np.ndarray, axis: int) -> np.ndarray:
    """In-place-style causal/anticausal IIR pass producing spline coefficients."""
    moved = np.moveaxis(arr, axis, 0)
    n = moved.shape[0]
    x = moved.reshape(n, -1) * _GAIN
    z = _POLE

    if _INIT_HORIZON < n:
        w = z ** np.arange(_INIT_HORIZON)
        c0 = w @ x[:_INIT_HORIZON]
    else:
        # short signal: sum the mirror-periodic series in closed form
        w = np.empty(n)
        w[0] = 1.0
        w[n - 1] = z ** (n - 1)
        k = np.arange(1, n - 1)
        w[1:n - 1] = z ** k + z ** (2 * (n - 1) - k)
        c0 = (w @ x) / (1.0 - z ** (2 * n - 2))

    c = np.empty_like(x)
    c[0] = c0
    for i in range(1, n):
        c[i] = x[i] + z * c[i - 1]

    out = np.empty_like(x)
    out[n - 1] = (z / (z * z - 1.0)) * (c[n - 1] + z * c[n - 2])
    for i in range(n - 2, -1, -1):
        out[i] = z * (out[i + 1] - c[i])
    return np.moveaxis(out.reshape(moved.shape), 0, axis)


def _resample_matrix(n_in: int, n_out: int, order: int) -> np.ndarray:
    """Dense [n_out, n_in] evaluation weights for one axis."""
    positions = np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))
    base = np.floor(positions).astype(np.int64)
    taps = (0, 1) if order == 1 else (-1, 0, 1, 2)
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for tap in taps:
        idx = base + tap
        if order == 1:
            weights = 1.0 - np.abs(positions - idx)
            weights = np.clip(weights, 0.0, None)
        else:
            weights = _bspline3(positions - idx)
        mat[rows, _mirror(idx, n_in)] += weights
    return mat


def _apply_axis(vol: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(vol, axis, 0)
    flat = moved.reshape(moved.shape[0], -1)
    out = (mat @ flat).reshape((mat.shape[0],) + moved.shape[1:])
    return np.moveaxis(out, 0, axis)


def spline_downsample(v: Volume, target_dims, order: int = 3) -> Volume:
    """Resample a volume down to ``target_dims``; returns float32.

    Order 3 applies the interpolating prefilter; order 1 is plain trilinear
    for cross-checking. Upsampling is refused.
    """
    if order not in (1, 3):
        raise ConfigError(f"spline_order must be 1 or 3, got {order}")
    target = tuple(int(d) for d in target_dims)
    if len(target) != 3 or any(d < 2 for d in target):
        raise ConfigError(f"target_dims must be three extents >= 2, got {target_dims}")
    for axis, (src, dst) in enumerate(zip(v.dims, target)):
        if src < 2:
            raise ConfigError(f"source extent {src} on axis {axis} is below the minimum of 2")
        if dst > src:
            raise ConfigError(f"target extent {dst} exceeds source extent {src} on axis {axis}; "
                              "this resampler only downsamples")

    data = v.data.astype(np.float64)
    if order == 3:
        for axis in range(3):
            data = _prefilter_axis(data, axis)
    for axis in range(3):
        data = _apply_axis(data, _resample_matrix(v.dims[axis], target[axis], order), axis)
    return Volume(data.astype(np.float32))


def quantize_u8(v: Volume) -> Volume:
    """Min-max rescale to [0, 255] with round-half-away-from-zero.

    A constant volume (max == min) maps to all zeros.
    """
    data = v.data.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise ConfigError("quantize_u8 requires finite voxel values")
    lo = data.min()
    hi = data.max()
    if hi == lo:
        return Volume(np.zeros(v.dims, dtype=np.uint8))
    scaled = (data - lo) / (hi - lo) * 255.0
    # scaled >= 0, so floor(x + 0.5) is round-half-away-from-zero
    return Volume(np.clip(np.floor(scaled + 0.5), 0.0, 255.0).astype(np.uint8))


def preprocess_volume(v: Volume, cfg: PreprocessConfig) -> Volume:
    """Downsample then quantize; byte-deterministic for identical inputs."""
    return quantize_u8(spline_downsample(v, cfg.target_dims, cfg.spline_order))
