"""Quality metrics (PSNR/SSIM, RGB and luma), the closed-form complexity
analyzer, and the wall-clock profiler.

The analyzer enumerates every counted operation of one recurrent step from
the configuration alone; its total must agree *exactly* with the runtime
instrumentation counters (`tensor.OpCounters`) on any input size. Counting
conventions: conv MACs are ``Cin*Cout*kh*kw*H*W``, a bilinear tap is 4 MACs
per channel, attention counts the query/key dots plus the weighted value sum;
FLOPs are ``2*MACs`` plus softmax exp/div and activation elements at cost 1.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import cell as cell_mod
from . import tensor as T
from .errors import ShapeError

PSNR_INF = float("inf")


# ---------------------------------------------------------------------------
# PSNR / SSIM
# ---------------------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images; +inf when equal."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0.0:
        return PSNR_INF
    return float(10.0 * np.log10(1.0 / mse))


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of an RGB image in [0,1], rescaled back to [0,1]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected (3,H,W), got {img.shape}")
    r, g, b = img.astype(np.float64)
    y = (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0
    return y[None].astype(np.float32)


def ssim_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    kh, kw = win.shape
    h, w = img.shape
    out = np.zeros((h - kh + 1, w - kw + 1), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out += win[i, j] * img[i:i + out.shape[0], j:j + out.shape[1]]
    return out


def ssim(a: np.ndarray, b: np.ndarray, window: np.ndarray | None = None,
         k1: float = 0.01, k2: float = 0.03, dynamic_range: float = 1.0) -> float:
    """Mean structural similarity over valid local Gaussian windows.

    Multi-channel inputs are scored per channel and averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    win = ssim_window() if window is None else np.asarray(window, dtype=np.float64)
    kh, kw = win.shape
    if a.shape[1] < kh or a.shape[2] < kw:
        raise ShapeError(f"frames {a.shape[1:]} smaller than the {kh}x{kw} window")
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    scores = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mu_x = _filter_valid(x, win)
        mu_y = _filter_valid(y, win)
        var_x = _filter_valid(x * x, win) - mu_x ** 2
        var_y = _filter_valid(y * y, win) - mu_y ** 2
        cov = _filter_valid(x * y, win) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


@dataclass
class MetricReport:
    """Per-frame and mean PSNR/SSIM for one sequence."""

    color_space: str
    crop_border: int
    psnr_per_frame: list = field(default_factory=list)
    ssim_per_frame: list = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        finite = [p for p in self.psnr_per_frame if math.isfinite(p)]
        if not finite:
            return PSNR_INF if self.psnr_per_frame else 0.0
        return float(np.mean(finite)) if len(finite) == len(self.psnr_per_frame) else PSNR_INF

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_per_frame)) if self.ssim_per_frame else 0.0

    def to_dict(self) -> dict:
        render = lambda v: "inf" if math.isinf(v) else v
        return {
            "schema_version": cell_mod.SCHEMA_VERSION,
            "color_space": self.color_space,
            "crop_border": self.crop_border,
            "psnr": [render(p) for p in self.psnr_per_frame],
            "ssim": self.ssim_per_frame,
            "mean_psnr": render(self.mean_psnr),
            "mean_ssim": self.mean_ssim,
        }


def sequence_metrics(gt_frames, pred_frames, color_space: str = "rgb",
                     crop_border: int = 0) -> MetricReport:
    """Score aligned GT/prediction frame lists in RGB or on the Y channel."""
    if len(gt_frames) != len(pred_frames):
        raise ShapeError(f"frame counts disagree: {len(gt_frames)} vs {len(pred_frames)}")
    if color_space not in ("rgb", "y"):
        raise ValueError(f"color space must be 'rgb' or 'y', got {color_space!r}")
    report = MetricReport(color_space=color_space, crop_border=crop_border)
    for gt, pred in zip(gt_frames, pred_frames):
        g = np.asarray(gt, dtype=np.float64)
        p = np.asarray(pred, dtype=np.float64)
        if crop_border:
            cb = crop_border
            g = g[:, cb:-cb, cb:-cb]
            p = p[:, cb:-cb, cb:-cb]
        if color_space == "y":
            g = rgb_to_y(g)
            p = rgb_to_y(p)
        report.psnr_per_frame.append(psnr(g, p))
        report.ssim_per_frame.append(ssim(g, p))
    return report


# ---------------------------------------------------------------------------
# Complexity analyzer
# ---------------------------------------------------------------------------

@dataclass
class LayerCost:
    name: str
    kind: str
    macs: int
    softmax_flops: int = 0
    nonlin_flops: int = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs + self.softmax_flops + self.nonlin_flops


@dataclass
class ComplexityReport:
    config: dict
    input_dims: tuple
    layers: list

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def total_softmax_flops(self) -> int:
        return sum(l.softmax_flops for l in self.layers)

    @property
    def total_nonlin_flops(self) -> int:
        return sum(l.nonlin_flops for l in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(l.flops for l in self.layers)

    def to_dict(self) -> dict:
        return {
            "schema_version": cell_mod.SCHEMA_VERSION,
            "config": self.config,
            "input_dims": list(self.input_dims),
            "layers": [{
                "name": l.name, "kind": l.kind, "macs": l.macs,
                "softmax_flops": l.softmax_flops, "nonlin_flops": l.nonlin_flops,
                "flops": l.flops,
            } for l in self.layers],
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
            "total_gmacs": self.total_macs / 1e9,
            "total_gflops": self.total_flops / 1e9,
        }


def _level_dims(h: int, w: int, levels: int):
    dims = [(h, w)]
    for _ in range(levels):
        dims.append((dims[-1][0] // 2, dims[-1][1] // 2))
    return dims


def analyze_complexity(cfg: cell_mod.ModelConfig, h: int, w: int) -> ComplexityReport:
    """Closed-form per-layer MAC/FLOP counts for one recurrent step.

    Enumerates exactly the operations `cell.step` executes for ``cfg`` so the
    totals match the instrumented counters bit-for-bit.
    """
    d, n, k, L, g = cfg.d, cfg.n, cfg.k, cfg.levels, cfg.groups
    dims = _level_dims(h, w, L)
    rows: list[LayerCost] = []
    add = rows.append

    def conv(name, cin, cout, ksz, px):
        add(LayerCost(name, "conv", cin * cout * ksz * ksz * px))

    def leaky(name, elems):
        add(LayerCost(name, "leaky_relu", 0, nonlin_flops=elems))

    def resample(name, channels, px_out):
        add(LayerCost(name, "bilinear", 4 * channels * px_out))

    def attention(prefix, cv, px):
        add(LayerCost(f"{prefix}.scores", "attention", k * d * px))
        add(LayerCost(f"{prefix}.softmax", "softmax", 0, softmax_flops=2 * g * k * px))
        add(LayerCost(f"{prefix}.mix", "attention", k * cv * px))

    enc_levels = list(range(L + 1)) if (cfg.offsets_enabled and cfg.pyramid_enabled) else [0]
    chains = []
    if cfg.offsets_enabled or cfg.attention_enabled:
        chains.append("t")
    if cfg.offsets_enabled and cfg.pyramid_enabled:
        chains.append("prev")
    for chain in chains:
        for l in enc_levels:
            hh, ww = dims[max(l - 1, 0)]
            px = hh * ww
            for i in range(4):
                cin = 3 if (l == 0 and i == 0) else d
                conv(f"encoder.{chain}.l{l}.conv{i}", cin, d, 3, px)
                if i < 3:
                    leaky(f"encoder.{chain}.l{l}.act{i}", d * px)
            if l > 0:
                resample(f"encoder.{chain}.l{l}.down", d, dims[l][0] * dims[l][1])

    def offset_block(level, base):
        from .dap import OFFSET_PLAN, OFFSET_PLAN_BASE
        plan = OFFSET_PLAN_BASE if base else OFFSET_PLAN
        px = dims[level][0] * dims[level][1]
        for i, (cin, cout) in enumerate(plan):
            conv(f"dap.l{level}.offset.conv{i}", cin, cout, 7, px)
            if i < len(plan) - 1:
                leaky(f"dap.l{level}.offset.act{i}", cout * px)

    if cfg.offsets_enabled and cfg.pyramid_enabled:
        offset_block(L, base=True)
        for l in range(L - 1, -1, -1):
            px = dims[l][0] * dims[l][1]
            resample(f"dap.l{l}.up_offsets", 2 * k, px)
            if cfg.attention_enabled:
                conv(f"dap.l{l}.q", d, d, 1, px)
                add(LayerCost(f"dap.l{l}.sample_kv", "sampling", 4 * d * k * px))
                conv(f"dap.l{l}.k", d, d, 1, k * px)
                conv(f"dap.l{l}.v", d, d, 1, k * px)
                attention(f"dap.l{l}.attn", d, px)
            else:
                add(LayerCost(f"dap.l{l}.sample_kv", "sampling", 4 * d * k * px))
                conv(f"dap.l{l}.fuse", k * d, d, 3, px)
            offset_block(l, base=False)
    elif cfg.offsets_enabled:
        offset_block(0, base=True)

    px0 = h * w
    if cfg.attention_enabled:
        if not (cfg.offsets_enabled and cfg.pyramid_enabled):
            conv("dap.l0.q", d, d, 1, px0)
        add(LayerCost("dap.hidden.sample_kv", "sampling", 4 * n * k * px0))
        conv("dap.hidden.key", n // g, 2, 1, g * k * px0)
        conv("dap.hidden.value", n // g, n // g, 1, g * k * px0)
        attention("dap.hidden.attn", n, px0)
    elif cfg.offsets_enabled:
        add(LayerCost("dap.hidden.sample_kv", "sampling", 4 * n * k * px0))
        conv("dap.hidden.fuse", k * n, n, 3, px0)

    conv("cell.agg", n + 3, n, 3, px0)
    leaky("cell.agg.act", n * px0)
    for b in range(cell_mod.IMDN_BLOCKS):
        conv(f"cell.imdn{b}.conv0", n, n, 3, px0)
        leaky(f"cell.imdn{b}.act0", n * px0)
        conv(f"cell.imdn{b}.conv1", 3 * n // 4, n, 3, px0)
        leaky(f"cell.imdn{b}.act1", n * px0)
        conv(f"cell.imdn{b}.conv2", 3 * n // 4, n, 3, px0)
        leaky(f"cell.imdn{b}.act2", n * px0)
        conv(f"cell.imdn{b}.conv3", 3 * n // 4, n // 4, 3, px0)
        conv(f"cell.imdn{b}.fuse", n, n, 1, px0)
    conv("cell.out", n, cell_mod.LR_OUT_CHANNELS + n, 3, px0)

    return ComplexityReport(config=cfg.to_dict(), input_dims=(3, h, w), layers=rows)


def measure_step_counters(cfg: cell_mod.ModelConfig, weights, h: int, w: int,
                          seed: int = 0) -> T.OpCounters:
    """Run one instrumented step on random data; pairs with `analyze_complexity`."""
    rng = np.random.default_rng(seed)
    x_t = T.tensor(rng.random((3, h, w), dtype=np.float64).astype(np.float32))
    x_prev = T.tensor(rng.random((3, h, w), dtype=np.float64).astype(np.float32))
    hidden = cell_mod.HiddenState.initial(cfg.n, h, w)
    counters = T.OpCounters()
    with T.no_grad(), T.counting(counters):
        cell_mod.step(x_t, x_prev, hidden, weights, cfg)
    return counters


# ---------------------------------------------------------------------------
# Runtime profiling
# ---------------------------------------------------------------------------

def profile_runtime(cfg: cell_mod.ModelConfig, weights, frames,
                    warmup: int = 2, iters: int = 10, hw_note: str = "") -> dict:
    """Median wall-clock per recurrent step after warmup discards.

    Cycles over ``frames`` (at least one), keeping the recurrence warm.
    """
    frames = [np.asarray(f, dtype=np.float32) for f in frames]
    if not frames:
        raise ValueError("profiling needs at least one frame")
    _, h, w = frames[0].shape
    hidden = cell_mod.HiddenState.initial(cfg.n, h, w)
    x_prev = T.tensor(frames[0])
    times = []
    with T.no_grad():
        for i in range(warmup + iters):
            x = T.tensor(frames[i % len(frames)])
            t0 = time.perf_counter()
            _, hidden = cell_mod.step(x, x_prev, hidden, weights, cfg)
            dt = (time.perf_counter() - t0) * 1000.0
            x_prev = x
            if i >= warmup:
                times.append(dt)
    ms = float(np.median(times))
    return {
        "schema_version": cell_mod.SCHEMA_VERSION,
        "ms_per_frame": ms,
        "fps": 1000.0 / ms if ms > 0 else PSNR_INF,
        "warmup": warmup,
        "iters": iters,
        "per_frame_ms": times,
        "input_dims": [3, h, w],
        "threads": "single",
        "hw_note": hw_note,
    }
