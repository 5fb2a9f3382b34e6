"""Ground-truth-to-LR degradation (BD and BI protocols) and paired
training-time augmentation.

These run outside the autodiff substrate: plain float arrays in, float32 out.
Internally everything is computed in float64 so constant inputs survive the
normalized filters bit-exactly after the final float32 cast.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

CUBIC_A = -0.5  # Catmull-Rom style cubic parameter


@dataclass(frozen=True)
class DegradeSpec:
    """Degradation protocol: Gaussian-blur-then-subsample or bicubic."""

    mode: str = "bd"
    sigma: float = 1.6
    kernel_size: int = 13
    scale: int = 4

    def __post_init__(self):
        if self.mode not in ("bd", "bi"):
            raise ValueError(f"mode must be 'bd' or 'bi', got {self.mode!r}")
        if self.kernel_size % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {self.kernel_size}")
        if self.scale != 4:
            raise ShapeError("the degradation scale is fixed at 4")


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    """Isotropic Gaussian sampled at integer offsets, normalized to sum 1."""
    if size % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {size}")
    ax = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def degrade_bd(hr: np.ndarray, spec: DegradeSpec | None = None) -> np.ndarray:
    """Gaussian low-pass (reflect padding) then keep every 4th pixel.

    The subsample phase starts at index 0 on both axes.
    """
    spec = spec or DegradeSpec()
    hr = np.asarray(hr)
    if hr.ndim != 3:
        raise ShapeError(f"expected (C,H,W), got shape {hr.shape}")
    c, h, w = hr.shape
    s = spec.scale
    if h % s or w % s:
        raise ShapeError(f"HR dims {h}x{w} must divide by {s}")
    k = gaussian_kernel(spec.sigma, spec.kernel_size)
    pad = spec.kernel_size // 2
    x = np.pad(hr.astype(np.float64), ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    hl, wl = h // s, w // s
    out = np.zeros((c, hl, wl), dtype=np.float64)
    for i in range(spec.kernel_size):
        for j in range(spec.kernel_size):
            out += k[i, j] * x[:, i:i + h:s, j:j + w:s]
    return out.astype(np.float32)


def _cubic(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    a = CUBIC_A
    inner = (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0
    outer = a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a
    return np.where(ax <= 1.0, inner, np.where(ax < 2.0, outer, 0.0))


def _cubic_axis_weights(n_in: int, n_out: int, antialias: bool):
    scale = n_in / n_out
    support = 2.0 * max(scale, 1.0) if antialias else 2.0
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    left = np.floor(centers - support).astype(np.int64) + 1
    taps = int(np.ceil(2.0 * support)) + 1
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = centers[:, None] - idx
    if antialias and scale > 1.0:
        wts = _cubic(dist / scale) / scale
    else:
        wts = _cubic(dist)
    wts /= wts.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, n_in - 1)  # edge replication
    return idx, wts


def _resize_axis_cubic(x: np.ndarray, axis: int, n_out: int, antialias: bool) -> np.ndarray:
    n_in = x.shape[axis]
    idx, wts = _cubic_axis_weights(n_in, n_out, antialias)
    moved = np.moveaxis(x, axis, -1)
    gathered = moved[..., idx]                       # (..., n_out, taps)
    out = np.einsum("...ot,ot->...o", gathered, wts)
    return np.moveaxis(out, -1, axis)


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int,
                   antialias: bool = True) -> np.ndarray:
    """Separable cubic resize (a = -0.5), antialiased when shrinking."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError(f"expected (C,H,W), got shape {img.shape}")
    out = _resize_axis_cubic(img, 1, out_h, antialias)
    out = _resize_axis_cubic(out, 2, out_w, antialias)
    return out.astype(np.float32)


def degrade_bi(hr: np.ndarray, spec: DegradeSpec | None = None) -> np.ndarray:
    """Antialiased bicubic x4 downsampling (kernel support widened by the
    scale factor). Meant as a self-consistent stand-in for external bicubic
    resizers, not a bit-exact clone of any one of them."""
    spec = spec or DegradeSpec(mode="bi")
    hr = np.asarray(hr)
    if hr.ndim != 3:
        raise ShapeError(f"expected (C,H,W), got shape {hr.shape}")
    c, h, w = hr.shape
    s = spec.scale
    if h % s or w % s:
        raise ShapeError(f"HR dims {h}x{w} must divide by {s}")
    return bicubic_resize(hr, h // s, w // s, antialias=True)


def bicubic_upsample(lr: np.ndarray, scale: int = 4) -> np.ndarray:
    """Plain (non-antialiased) bicubic upsampling, the no-model baseline."""
    lr = np.asarray(lr)
    c, h, w = lr.shape
    return bicubic_resize(lr, h * scale, w * scale, antialias=False)


def degrade(hr: np.ndarray, spec: DegradeSpec) -> np.ndarray:
    return degrade_bd(hr, spec) if spec.mode == "bd" else degrade_bi(hr, spec)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def augment_pair(hr_frames, lr_frames, scale: int, crop_hr: int,
                 rng: np.random.Generator):
    """Seeded augmentation of one HR/LR sequence pair.

    Draws a stride-aligned uniform HR crop plus horizontal/vertical flips, a
    90-degree-multiple rotation (square crops only) and optional temporal
    inversion; the identical transform is applied to every frame of the pair.
    """
    if len(hr_frames) != len(lr_frames):
        raise ShapeError("HR/LR frame counts disagree")
    _, hh, hw = hr_frames[0].shape
    if crop_hr > hh or crop_hr > hw:
        raise ShapeError(f"crop {crop_hr} larger than frame {hh}x{hw}")
    if crop_hr % scale:
        raise ShapeError(f"crop size {crop_hr} must divide by the scale {scale}")

    max_y = (hh - crop_hr) // scale
    max_x = (hw - crop_hr) // scale
    y0 = int(rng.integers(0, max_y + 1)) * scale
    x0 = int(rng.integers(0, max_x + 1)) * scale
    hflip = bool(rng.integers(0, 2))
    vflip = bool(rng.integers(0, 2))
    rot = int(rng.integers(0, 4))
    reverse_time = bool(rng.integers(0, 2))

    def xform(frame, off_y, off_x, size):
        out = frame[:, off_y:off_y + size, off_x:off_x + size]
        if hflip:
            out = out[:, :, ::-1]
        if vflip:
            out = out[:, ::-1, :]
        if rot:
            out = np.rot90(out, k=rot, axes=(1, 2))
        return np.ascontiguousarray(out)

    hr_out = [xform(f, y0, x0, crop_hr) for f in hr_frames]
    lr_out = [xform(f, y0 // scale, x0 // scale, crop_hr // scale) for f in lr_frames]
    if reverse_time:
        hr_out.reverse()
        lr_out.reverse()
    return hr_out, lr_out
