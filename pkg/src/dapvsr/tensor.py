"""Dense tensor kernels with recorded-tape reverse-mode differentiation.

Every compute-heavy operation in the engine bottoms out here: same-padded
cross-correlation, bilinear resampling, sub-pixel shuffling, softmax and the
grouped attention contractions. Tensors are rank <= 4 arrays (float32 by
default, float64 for high-precision check runs). Forward calls record a tape;
``backward`` replays it in reverse topological order.

Conventions that the rest of the package (and the complexity analyzer) relies
on:

* channel-first layout ``(C, H, W)`` for images and feature maps,
* sample coordinates are ``(row, col)`` pairs, clamped to the border before
  interpolation,
* offset channels come in ``(dx, dy)`` pairs with ``dx`` along the width axis,
* MAC accounting: convolutions count ``Cin*Cout*kh*kw*H*W``, every bilinear
  tap counts ``4*C``, attention counts the query/key dots plus the weighted
  value sum; elementwise arithmetic and data movement are free. Softmax
  exp/div and leaky-ReLU elements are tracked separately as non-MAC FLOPs.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError, StateError, WeightsFormatError

DEFAULT_DTYPE = np.float32

# Test-only switches; flipping one must make the gradient self-checks fail.
_fault_injection: set[str] = set()


# ---------------------------------------------------------------------------
# Instrumentation
# ---------------------------------------------------------------------------

@dataclass
class OpCounters:
    """Runtime operation counters used to cross-check the static analyzer."""

    macs: int = 0
    softmax_flops: int = 0
    nonlin_flops: int = 0
    samples: dict = field(default_factory=dict)
    calls: dict = field(default_factory=dict)

    @property
    def flops(self) -> int:
        return 2 * self.macs + self.softmax_flops + self.nonlin_flops

    def add_call(self, op_name: str) -> None:
        label = _scope_label(op_name)
        self.calls[label] = self.calls.get(label, 0) + 1

    def add_samples(self, n: int) -> None:
        label = _scope_label()
        self.samples[label] = self.samples.get(label, 0) + n


_active_counters: OpCounters | None = None
_scope_stack: list[str] = []


def _scope_label(suffix: str = "") -> str:
    parts = list(_scope_stack)
    if suffix:
        parts.append(suffix)
    return ".".join(parts) if parts else "root"


@contextmanager
def counting(counters: OpCounters):
    """Route op costs into ``counters`` for the duration of the block."""
    global _active_counters
    prev = _active_counters
    _active_counters = counters
    try:
        yield counters
    finally:
        _active_counters = prev


@contextmanager
def scope(label: str):
    """Attach ``label`` to instrumentation emitted inside the block."""
    _scope_stack.append(label)
    try:
        yield
    finally:
        _scope_stack.pop()


def _count(op_name: str, macs: int = 0, softmax_flops: int = 0, nonlin_flops: int = 0,
           samples: int = 0) -> None:
    c = _active_counters
    if c is None:
        return
    c.macs += macs
    c.softmax_flops += softmax_flops
    c.nonlin_flops += nonlin_flops
    c.add_call(op_name)
    if samples:
        c.add_samples(samples)


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording (inference mode; intermediates are freed)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Rank <= 4 dense array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=None):
        data = np.asarray(data)
        if data.ndim > 4:
            raise ShapeError(f"rank {data.ndim} exceeds the supported maximum of 4")
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._backward = backward_fn

    @property
    def dims(self):
        return self.data.shape

    shape = dims

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(dims={tuple(self.dims)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, dtype=None, requires_grad=False, name=None) -> Tensor:
    """Boundary constructor: copies, casts and rejects non-finite values."""
    arr = np.array(data, dtype=dtype or DEFAULT_DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite values rejected at module boundary")
    return Tensor(arr, requires_grad=requires_grad, name=name)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _result(data, parents, backward_fn, op_name):
    """Wrap an op result, recording the tape edge only when it is needed."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn)
    return Tensor(data)


def backward(out: Tensor, cotangent=None) -> None:
    """Reverse-mode sweep from ``out``; accumulates into ``.grad`` buffers."""
    if not out._parents:
        raise StateError("backward requested without a recorded forward")
    if cotangent is None:
        cotangent = np.ones_like(out.data)
    else:
        cotangent = np.asarray(cotangent, dtype=out.data.dtype)
        if cotangent.shape != out.data.shape:
            raise ShapeError("cotangent dims must match the output dims")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    out._accumulate(cotangent)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def identity(x: Tensor) -> Tensor:
    def bwd(g):
        x._accumulate(g)
    _count("identity")
    return _result(x.data.copy(), [x], bwd, "identity")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.dims != b.dims:
        raise ShapeError(f"add dims mismatch: {a.dims} vs {b.dims}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)
    _count("add")
    return _result(a.data + b.data, [a, b], bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.dims != b.dims:
        raise ShapeError(f"sub dims mismatch: {a.dims} vs {b.dims}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)
    _count("sub")
    return _result(a.data - b.data, [a, b], bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.dims != b.dims:
        raise ShapeError(f"mul dims mismatch: {a.dims} vs {b.dims}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)
    _count("mul")
    return _result(a.data * b.data, [a, b], bwd, "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        x._accumulate(g * s)
    _count("scale")
    return _result(x.data * np.asarray(s, dtype=x.data.dtype), [x], bwd, "scale")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.dims[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])
    _count("concat")
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd, "concat")


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    if not (0 <= lo < hi <= x.dims[0]):
        raise ShapeError(f"channel slice [{lo}:{hi}] out of range for {x.dims}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[lo:hi] = g
        x._accumulate(gx)
    _count("slice")
    return _result(x.data[lo:hi].copy(), [x], bwd, "slice")


def slice_axis0(x: Tensor, i: int) -> Tensor:
    """Drop the leading axis at index ``i`` (e.g. pick one sampled map)."""
    if not (0 <= i < x.dims[0]):
        raise ShapeError(f"index {i} out of range for axis 0 of {x.dims}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        x._accumulate(gx)
    _count("slice")
    return _result(x.data[i].copy(), [x], bwd, "slice")


def stack(tensors) -> Tensor:
    tensors = list(tensors)

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(g[i])
    _count("stack")
    return _result(np.stack([t.data for t in tensors], axis=0), tensors, bwd, "stack")


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        x._accumulate(np.full_like(x.data, g))
    _count("sum")
    return _result(x.data.sum(), [x], bwd, "sum")


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    """Elementwise ``max(x, slope*x)`` for slope in (0, 1)."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    pos = x.data >= 0
    out = np.where(pos, x.data, x.data * np.asarray(slope, dtype=x.data.dtype))

    def bwd(g):
        x._accumulate(np.where(pos, g, g * np.asarray(slope, dtype=g.dtype)))
    _count("leaky_relu", nonlin_flops=x.data.size)
    return _result(out, [x], bwd, "leaky_relu")


def smooth_l1(pred: Tensor, target: Tensor, beta: float) -> Tensor:
    """Mean Huber-style loss: quadratic inside ``|e| < beta``, linear outside."""
    if pred.dims != target.dims:
        raise ShapeError(f"smooth_l1 dims mismatch: {pred.dims} vs {target.dims}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    e = pred.data.astype(np.float64) - target.data.astype(np.float64)
    quad = np.abs(e) < beta
    per = np.where(quad, 0.5 * e * e / beta, np.abs(e) - 0.5 * beta)
    n = e.size
    out = np.asarray(per.mean(), dtype=pred.data.dtype)

    def bwd(g):
        d = np.where(quad, e / beta, np.sign(e)) * (float(g) / n)
        if pred.requires_grad:
            pred._accumulate(d.astype(pred.data.dtype))
        if target.requires_grad:
            target._accumulate((-d).astype(target.data.dtype))
    _count("smooth_l1")
    return _result(out, [pred, target], bwd, "smooth_l1")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """Shape contract for a same-padded 2-D cross-correlation layer."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    has_bias: bool = True
    activation: str = "none"  # "none" | "leaky_relu"

    def __post_init__(self):
        if self.kernel_h % 2 == 0 or self.kernel_w % 2 == 0:
            raise ShapeError("kernel extents must be odd for same padding")
        if self.activation not in ("none", "leaky_relu"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class ConvLayer:
    """A weight/bias pair for one convolution layer."""

    weight: Tensor
    bias: Tensor


def _im2col(xp: np.ndarray, kh: int, kw: int, h: int, w: int) -> np.ndarray:
    cin = xp.shape[0]
    cols = np.empty((cin, kh, kw, h, w), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + h, j:j + w]
    return cols.reshape(cin * kh * kw, h * w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           spec: ConvSpec | None = None) -> Tensor:
    """Same-padded cross-correlation: ``(Cin,H,W) -> (Cout,H,W)``.

    Zero padding of width ``k // 2`` on each side; optional bias and a fused
    leaky-ReLU when ``spec.activation`` requests one.
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) input and (Co,Ci,kh,kw) weight, "
                         f"got {x.dims} and {weight.dims}")
    cout, cin, kh, kw = weight.dims
    if x.dims[0] != cin:
        raise ShapeError(f"conv2d input channels {x.dims[0]} != weight in-channels {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d kernel extents must be odd")
    if spec is not None:
        if (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w) != (cin, cout, kh, kw):
            raise ShapeError("conv2d weight dims inconsistent with spec")
        if spec.has_bias != (bias is not None):
            raise ShapeError("conv2d bias presence inconsistent with spec")
    if bias is not None and bias.dims != (cout,):
        raise ShapeError(f"conv2d bias dims {bias.dims} != ({cout},)")

    _, h, w = x.dims
    if kh == 1 and kw == 1:
        x2d = x.data.reshape(cin, h * w)
        w2d = weight.data.reshape(cout, cin)
        out = w2d @ x2d
        if bias is not None:
            out = out + bias.data[:, None]
        out = out.reshape(cout, h, w)

        def bwd(g):
            g2d = g.reshape(cout, h * w)
            if weight.requires_grad:
                dw = (g2d @ x2d.T).reshape(weight.dims)
                if "conv2d_weight_grad_sign" in _fault_injection:
                    dw = -dw
                weight._accumulate(dw)
            if bias is not None and bias.requires_grad:
                bias._accumulate(g2d.sum(axis=1))
            if x.requires_grad:
                x._accumulate((w2d.T @ g2d).reshape(x.data.shape))
    else:
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
        cols = _im2col(xp, kh, kw, h, w)
        w2d = weight.data.reshape(cout, cin * kh * kw)
        out = w2d @ cols
        if bias is not None:
            out += bias.data[:, None]
        out = out.reshape(cout, h, w)

        def bwd(g):
            g2d = g.reshape(cout, h * w)
            if weight.requires_grad:
                dw = (g2d @ cols.T).reshape(weight.dims)
                if "conv2d_weight_grad_sign" in _fault_injection:
                    dw = -dw
                weight._accumulate(dw)
            if bias is not None and bias.requires_grad:
                bias._accumulate(g2d.sum(axis=1))
            if x.requires_grad:
                # input gradient = same-padded correlation with the flipped,
                # channel-swapped kernel
                gp = np.pad(g.reshape(cout, h, w), ((0, 0), (ph, ph), (pw, pw)))
                gcols = _im2col(gp, kh, kw, h, w)
                wf = weight.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
                wf2d = np.ascontiguousarray(wf).reshape(cin, cout * kh * kw)
                x._accumulate((wf2d @ gcols).reshape(x.data.shape))

    _count("conv2d", macs=cin * cout * kh * kw * h * w)
    parents = [x, weight] if bias is None else [x, weight, bias]
    result = _result(out, parents, bwd, "conv2d")
    if spec is not None and spec.activation == "leaky_relu":
        result = leaky_relu(result, 0.1)
    return result


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _axis_lerp_weights(n_in: int, n_out: int):
    # align-corners-false source grid
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), max(n_in - 2, 0))
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    return i0, i1, f


def bilinear_resize(x: Tensor, factor: float) -> Tensor:
    """Bilinear x2 resampling: ``factor=2`` doubles, ``factor=0.5`` halves."""
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_resize expects (C,H,W), got {x.dims}")
    c, h, w = x.dims
    if factor == 2:
        ho, wo = h * 2, w * 2
    elif factor == 0.5:
        if h % 2 or w % 2:
            raise ShapeError(f"downsampling requires even spatial dims, got {h}x{w}")
        ho, wo = h // 2, w // 2
    else:
        raise ValueError(f"factor must be 2 or 0.5, got {factor}")

    r0, r1, fr = _axis_lerp_weights(h, ho)
    c0, c1, fc = _axis_lerp_weights(w, wo)
    frd = fr.astype(x.data.dtype)[None, :, None]
    fcd = fc.astype(x.data.dtype)[None, None, :]

    mid = x.data[:, r0, :] * (1 - frd) + x.data[:, r1, :] * frd
    out = mid[:, :, c0] * (1 - fcd) + mid[:, :, c1] * fcd

    def bwd(g):
        gmid = np.zeros((c, ho, w), dtype=g.dtype)
        np.add.at(gmid, (slice(None), slice(None), c0), g * (1 - fcd))
        np.add.at(gmid, (slice(None), slice(None), c1), g * fcd)
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), r0, slice(None)), gmid * (1 - frd))
        np.add.at(gx, (slice(None), r1, slice(None)), gmid * frd)
        x._accumulate(gx)

    _count("bilinear_resize", macs=4 * c * ho * wo)
    return _result(out, [x], bwd, "bilinear_resize")


def _bilerp_prepare(h: int, w: int, rows: np.ndarray, cols: np.ndarray):
    rcl = np.clip(rows, 0.0, h - 1.0)
    ccl = np.clip(cols, 0.0, w - 1.0)
    r0 = np.minimum(np.floor(rcl).astype(np.int64), max(h - 2, 0))
    c0 = np.minimum(np.floor(ccl).astype(np.int64), max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = rcl - r0
    fc = ccl - c0
    # clamped coordinates carry no gradient
    mr = ((rows > 0.0) & (rows < h - 1.0)).astype(np.float64)
    mc = ((cols > 0.0) & (cols < w - 1.0)).astype(np.float64)
    return r0, r1, c0, c1, fr, fc, mr, mc


def _bilerp_gather(data: np.ndarray, prep):
    r0, r1, c0, c1, fr, fc, _, _ = prep
    fr = fr.astype(data.dtype)
    fc = fc.astype(data.dtype)
    v00 = data[:, r0, c0]
    v01 = data[:, r0, c1]
    v10 = data[:, r1, c0]
    v11 = data[:, r1, c1]
    top = v00 * (1 - fc) + v01 * fc
    bot = v10 * (1 - fc) + v11 * fc
    return top * (1 - fr) + bot * fr


def _bilerp_backward(data_shape, dtype, prep, g):
    """Gradients of a bilinear gather w.r.t. the source map and coordinates."""
    r0, r1, c0, c1, fr, fc, mr, mc = prep
    c = data_shape[0]
    fr = fr[None, :]
    fc = fc[None, :]
    gmap = np.zeros(data_shape, dtype=dtype)
    ch = np.arange(c)[:, None]
    np.add.at(gmap, (ch, r0[None, :], c0[None, :]), g * (1 - fr) * (1 - fc))
    np.add.at(gmap, (ch, r0[None, :], c1[None, :]), g * (1 - fr) * fc)
    np.add.at(gmap, (ch, r1[None, :], c0[None, :]), g * fr * (1 - fc))
    np.add.at(gmap, (ch, r1[None, :], c1[None, :]), g * fr * fc)
    return gmap


def _bilerp_coord_grads(data: np.ndarray, prep, g):
    r0, r1, c0, c1, fr, fc, mr, mc = prep
    v00 = data[:, r0, c0].astype(np.float64)
    v01 = data[:, r0, c1].astype(np.float64)
    v10 = data[:, r1, c0].astype(np.float64)
    v11 = data[:, r1, c1].astype(np.float64)
    g64 = g.astype(np.float64)
    # d/drow and d/dcol of the bilinear form, summed over channels
    drow = ((v10 - v00) * (1 - fc[None, :]) + (v11 - v01) * fc[None, :]) * g64
    dcol = ((v01 - v00) * (1 - fr[None, :]) + (v11 - v10) * fr[None, :]) * g64
    return drow.sum(axis=0) * mr, dcol.sum(axis=0) * mc


def bilinear_sample(x: Tensor, points) -> Tensor:
    """Sample all channels of ``x`` at real ``(row, col)`` points: ``-> (C, N)``.

    Coordinates are clamped to the image rectangle before interpolation, so
    the op is total; clamped coordinates receive zero gradient.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_sample expects (C,H,W), got {x.dims}")
    pts = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=np.float64))
    if pts.data.ndim != 2 or pts.dims[1] != 2:
        raise ShapeError(f"points must have dims (N,2), got {pts.dims}")
    c, h, w = x.dims
    n = pts.dims[0]
    rows = pts.data[:, 0].astype(np.float64)
    cols = pts.data[:, 1].astype(np.float64)
    prep = _bilerp_prepare(h, w, rows, cols)
    out = _bilerp_gather(x.data, prep)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(_bilerp_backward(x.data.shape, x.data.dtype, prep, g))
        if pts.requires_grad:
            drow, dcol = _bilerp_coord_grads(x.data, prep, g)
            pts._accumulate(np.stack([drow, dcol], axis=1).astype(pts.data.dtype))

    _count("bilinear_sample", macs=4 * c * n, samples=n)
    return _result(out, [x, pts], bwd, "bilinear_sample")


def sample_at_offsets(features: Tensor, offsets: Tensor) -> Tensor:
    """Per-pixel deformable gather: ``(C,H,W) x (2k,H,W) -> (k,C,H,W)``.

    Offset channels ``[2i, 2i+1]`` hold the i-th displacement ``(dx, dy)``
    relative to the query pixel, in pixels of this map's own grid.
    """
    if features.data.ndim != 3 or offsets.data.ndim != 3:
        raise ShapeError("sample_at_offsets expects (C,H,W) features and (2k,H,W) offsets")
    c, h, w = features.dims
    if offsets.dims[1] != h or offsets.dims[2] != w:
        raise ShapeError(f"offsets resolution {offsets.dims[1:]} != features {features.dims[1:]}")
    if offsets.dims[0] % 2:
        raise ShapeError("offset channel count must be even (dx,dy pairs)")
    k = offsets.dims[0] // 2
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    off = offsets.data.astype(np.float64)
    rows = (yy[None] + off[1::2]).reshape(k * h * w)
    cols = (xx[None] + off[0::2]).reshape(k * h * w)
    prep = _bilerp_prepare(h, w, rows, cols)
    out = _bilerp_gather(features.data, prep)          # (C, k*H*W)
    out = out.reshape(c, k, h, w).transpose(1, 0, 2, 3).copy()

    def bwd(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(c, k * h * w)
        if features.requires_grad:
            features._accumulate(_bilerp_backward(features.data.shape, features.data.dtype, prep, g2))
        if offsets.requires_grad:
            drow, dcol = _bilerp_coord_grads(features.data, prep, g2)
            goff = np.empty_like(offsets.data)
            goff[0::2] = dcol.reshape(k, h, w).astype(offsets.data.dtype)
            goff[1::2] = drow.reshape(k, h, w).astype(offsets.data.dtype)
            offsets._accumulate(goff)

    _count("sample_kv", macs=4 * c * k * h * w, samples=k * h * w)
    return _result(out, [features, offsets], bwd, "sample_kv")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Sub-pixel rearrangement ``(C*r^2, H, W) -> (C, rH, rW)``."""
    if x.data.ndim != 3:
        raise ShapeError(f"pixel_shuffle expects (C,H,W), got {x.dims}")
    cr, h, w = x.dims
    if cr % (r * r):
        raise ShapeError(f"channels {cr} not divisible by r^2 = {r * r}")
    c = cr // (r * r)
    out = x.data.reshape(c, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c, h * r, w * r)

    def bwd(g):
        gx = g.reshape(c, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(cr, h, w)
        x._accumulate(np.ascontiguousarray(gx))
    _count("pixel_shuffle")
    return _result(np.ascontiguousarray(out), [x], bwd, "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`: ``(C, rH, rW) -> (C*r^2, H, W)``."""
    if x.data.ndim != 3:
        raise ShapeError(f"pixel_unshuffle expects (C,H,W), got {x.dims}")
    c, hr, wr = x.dims
    if hr % r or wr % r:
        raise ShapeError(f"spatial dims {hr}x{wr} not divisible by r = {r}")
    h, w = hr // r, wr // r
    out = x.data.reshape(c, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(c * r * r, h, w)

    def bwd(g):
        gx = g.reshape(c, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c, hr, wr)
        x._accumulate(np.ascontiguousarray(gx))
    _count("pixel_unshuffle")
    return _result(np.ascontiguousarray(out), [x], bwd, "pixel_unshuffle")


def nearest_upsample(x: Tensor, r: int) -> Tensor:
    """Pixel replication ``(C,H,W) -> (C, rH, rW)``."""
    if x.data.ndim != 3:
        raise ShapeError(f"nearest_upsample expects (C,H,W), got {x.dims}")
    c, h, w = x.dims
    out = np.repeat(np.repeat(x.data, r, axis=1), r, axis=2)

    def bwd(g):
        x._accumulate(g.reshape(c, h, r, w, r).sum(axis=(2, 4)))
    _count("nearest_upsample")
    return _result(out, [x], bwd, "nearest_upsample")


# ---------------------------------------------------------------------------
# Softmax and grouped attention contractions
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = 0, scale_factor: float = 1.0) -> Tensor:
    """Scaled, shift-stabilized softmax along ``axis``; weights sum to 1."""
    z = x.data.astype(np.float64) * scale_factor
    z -= z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = (e / e.sum(axis=axis, keepdims=True)).astype(x.data.dtype)

    def bwd(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        x._accumulate((s * (g - inner) * np.asarray(scale_factor, dtype=g.dtype)))

    _count("softmax", softmax_flops=2 * x.data.size)
    return _result(s, [x], bwd, "softmax")


def grouped_scores(q: Tensor, k: Tensor, groups: int, scale_factor: float) -> Tensor:
    """Per-pixel, per-group query/key dot products over k sampled points.

    ``q``: (Cq,H,W), ``k``: (kpts,Cq,H,W) -> logits (groups, kpts, H, W).
    """
    if q.data.ndim != 3 or k.data.ndim != 4:
        raise ShapeError("grouped_scores expects (Cq,H,W) query and (k,Cq,H,W) keys")
    cq, h, w = q.dims
    kpts = k.dims[0]
    if k.dims[1:] != (cq, h, w):
        raise ShapeError(f"key dims {k.dims} inconsistent with query {q.dims}")
    if cq % groups:
        raise ShapeError(f"query channels {cq} not divisible by {groups} groups")
    cg = cq // groups
    qr = q.data.reshape(groups, cg, h * w)
    kr = k.data.reshape(kpts, groups, cg, h * w)
    z = np.einsum("gcp,igcp->gip", qr, kr) * np.asarray(scale_factor, dtype=q.data.dtype)

    def bwd(g):
        gr = g.reshape(groups, kpts, h * w) * np.asarray(scale_factor, dtype=g.dtype)
        if q.requires_grad:
            q._accumulate(np.einsum("gip,igcp->gcp", gr, kr).reshape(q.dims))
        if k.requires_grad:
            k._accumulate(np.einsum("gip,gcp->igcp", gr, qr).reshape(k.dims))

    _count("attention_scores", macs=kpts * cq * h * w)
    return _result(z.reshape(groups, kpts, h, w), [q, k], bwd, "attention_scores")


def grouped_mix(weights: Tensor, v: Tensor) -> Tensor:
    """Convex per-pixel mix of sampled values: (G,k,H,W) x (k,Cv,H,W) -> (Cv,H,W)."""
    if weights.data.ndim != 4 or v.data.ndim != 4:
        raise ShapeError("grouped_mix expects (G,k,H,W) weights and (k,Cv,H,W) values")
    groups, kpts, h, w = weights.dims
    if v.dims[0] != kpts or v.dims[2:] != (h, w):
        raise ShapeError(f"value dims {v.dims} inconsistent with weights {weights.dims}")
    cv = v.dims[1]
    if cv % groups:
        raise ShapeError(f"value channels {cv} not divisible by {groups} groups")
    cg = cv // groups
    wr = weights.data.reshape(groups, kpts, h * w)
    vr = v.data.reshape(kpts, groups, cg, h * w)
    out = np.einsum("gip,igcp->gcp", wr, vr).reshape(cv, h, w)

    def bwd(g):
        gr = g.reshape(groups, cg, h * w)
        if weights.requires_grad:
            weights._accumulate(np.einsum("gcp,igcp->gip", gr, vr).reshape(weights.dims))
        if v.requires_grad:
            v._accumulate(np.einsum("gip,gcp->igcp", wr, gr).reshape(v.dims))

    _count("attention_mix", macs=kpts * cv * h * w)
    return _result(out, [weights, v], bwd, "attention_mix")


# ---------------------------------------------------------------------------
# Raw tensor container (.rten)
# ---------------------------------------------------------------------------

RTEN_MAGIC = b"RTEN"
RTEN_VERSION = 1


def write_rten(path, array) -> None:
    """Write a float32 tensor: magic, u8 version, u8 rank, u32 LE dims, payload."""
    arr = array.data if isinstance(array, Tensor) else np.asarray(array)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim > 4:
        raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of 4")
    with open(path, "wb") as f:
        f.write(RTEN_MAGIC)
        f.write(struct.pack("<BB", RTEN_VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_rten(path) -> np.ndarray:
    with open(path, "rb") as f:
        payload = f.read()
    if payload[:4] != RTEN_MAGIC:
        raise WeightsFormatError(f"{path}: bad magic {payload[:4]!r}")
    if len(payload) < 6:
        raise WeightsFormatError(f"{path}: truncated header")
    version, rank = struct.unpack_from("<BB", payload, 4)
    if version != RTEN_VERSION:
        raise WeightsFormatError(f"{path}: unsupported version {version}")
    if rank > 4:
        raise WeightsFormatError(f"{path}: rank {rank} exceeds the supported maximum of 4")
    dims = struct.unpack_from(f"<{rank}I", payload, 6)
    start = 6 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(payload) - start != 4 * count:
        raise WeightsFormatError(f"{path}: payload size mismatch for dims {dims}")
    arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(dims)
    arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{path}: non-finite values rejected at module boundary")
    return arr


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    op_id: str
    trials: int
    tolerance: float
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _loss_value(fn, inputs, cot) -> float:
    with no_grad():
        out = fn(*inputs)
    return float(np.sum(out.data.astype(np.float64) * cot))


def numeric_gradients(fn, inputs, cot, eps):
    """Central finite differences of ``sum(cot * fn(inputs))`` per input coord."""
    grads = []
    for t in inputs:
        if not t.requires_grad:
            grads.append(None)
            continue
        g = np.zeros(t.data.shape, dtype=np.float64)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = _loss_value(fn, inputs, cot)
            flat[i] = orig - eps
            lm = _loss_value(fn, inputs, cot)
            flat[i] = orig
            gflat[i] = (lp - lm) / (2 * eps)
        grads.append(g)
    return grads


def compare_gradients(fn, inputs, rng, eps) -> float:
    """Max relative deviation of analytic vs finite-difference gradients."""
    with no_grad():
        probe = fn(*inputs)
    # dyadic cotangents keep linear ops' central differences exactly cancellable
    cot = np.round(rng.uniform(-1.0, 1.0, size=probe.data.shape) * 256.0) / 256.0
    out = fn(*inputs)
    for t in inputs:
        t.zero_grad()
    backward(out, cot.astype(out.data.dtype))
    numeric = numeric_gradients(fn, inputs, cot, eps)
    worst = 0.0
    for t, n in zip(inputs, numeric):
        if n is None:
            continue
        a = np.zeros_like(n) if t.grad is None else t.grad.astype(np.float64)
        den = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n)) / den))
    return worst


def _away_from(vals, centers, margin, rng, lo, hi):
    """Resample entries that fall within ``margin`` of any kink center."""
    vals = vals.copy()
    for _ in range(64):
        bad = np.zeros(vals.shape, dtype=bool)
        for c in np.atleast_1d(centers):
            bad |= np.abs(vals - c) < margin
        if not bad.any():
            break
        vals[bad] = rng.uniform(lo, hi, size=int(bad.sum()))
    return vals


def _case_identity(rng, dtype):
    # dyadic values keep the central difference exact, so the error is 0.0
    data = rng.integers(-256, 257, size=4).astype(np.float64) / 256.0
    x = Tensor(data.astype(dtype), requires_grad=True)
    return [x], identity


def _case_add(rng, dtype):
    a = Tensor(rng.standard_normal((3, 4, 4)).astype(dtype), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4, 4)).astype(dtype), requires_grad=True)
    return [a, b], add


def _case_mul(rng, dtype):
    a = Tensor(rng.standard_normal((3, 4, 4)).astype(dtype), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4, 4)).astype(dtype), requires_grad=True)
    return [a, b], mul


def _case_scale(rng, dtype):
    x = Tensor(rng.standard_normal((2, 3, 3)).astype(dtype), requires_grad=True)
    s = float(rng.uniform(0.5, 2.0))
    return [x], lambda t: scale(t, s)


def _case_concat(rng, dtype):
    a = Tensor(rng.standard_normal((2, 3, 3)).astype(dtype), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 3, 3)).astype(dtype), requires_grad=True)
    return [a, b], lambda u, v: concat([u, v], axis=0)


def _case_slice(rng, dtype):
    x = Tensor(rng.standard_normal((6, 3, 3)).astype(dtype), requires_grad=True)
    return [x], lambda t: slice_channels(t, 1, 4)


def _case_stack(rng, dtype):
    a = Tensor(rng.standard_normal((2, 3, 3)).astype(dtype), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3, 3)).astype(dtype), requires_grad=True)
    return [a, b], lambda u, v: stack([u, v])


def _case_sum(rng, dtype):
    x = Tensor(rng.standard_normal((2, 4, 4)).astype(dtype), requires_grad=True)
    return [x], sum_all


def _conv_case(kh, kw, cin=2, cout=3, h=4, w=4):
    def build(rng, dtype):
        x = Tensor(rng.standard_normal((cin, h, w)).astype(dtype), requires_grad=True)
        wt = Tensor((rng.standard_normal((cout, cin, kh, kw)) * 0.5).astype(dtype),
                    requires_grad=True)
        b = Tensor(rng.standard_normal(cout).astype(dtype), requires_grad=True)
        return [x, wt, b], conv2d
    return build


def _case_leaky(rng, dtype):
    data = _away_from(rng.uniform(-2.0, 2.0, size=(3, 4, 4)), [0.0], 0.05, rng, -2.0, 2.0)
    x = Tensor(data.astype(dtype), requires_grad=True)
    return [x], lambda t: leaky_relu(t, 0.1)


def _case_resize_up(rng, dtype):
    x = Tensor(rng.standard_normal((2, 3, 4)).astype(dtype), requires_grad=True)
    return [x], lambda t: bilinear_resize(t, 2)


def _case_resize_down(rng, dtype):
    x = Tensor(rng.standard_normal((2, 4, 6)).astype(dtype), requires_grad=True)
    return [x], lambda t: bilinear_resize(t, 0.5)


def _case_bilinear_sample(rng, dtype):
    h, w = 5, 6
    x = Tensor(rng.standard_normal((3, h, w)).astype(dtype), requires_grad=True)
    rows = _away_from(rng.uniform(0.15, h - 1.15, size=8), np.arange(h), 0.05, rng, 0.15, h - 1.15)
    cols = _away_from(rng.uniform(0.15, w - 1.15, size=8), np.arange(w), 0.05, rng, 0.15, w - 1.15)
    pts = Tensor(np.stack([rows, cols], axis=1).astype(np.float64), requires_grad=True)
    return [x, pts], bilinear_sample


def _case_sample_at_offsets(rng, dtype):
    h, w, k = 4, 4, 2
    x = Tensor(rng.standard_normal((3, h, w)).astype(dtype), requires_grad=True)
    off = _away_from(rng.uniform(-1.2, 1.2, size=(2 * k, h, w)),
                     np.arange(-2, 3), 0.05, rng, -1.2, 1.2)
    # keep every sampled coordinate strictly interior so the clamp is inactive
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    off[0::2] = np.clip(off[0::2], 0.15 - xx, w - 1.15 - xx)
    off[1::2] = np.clip(off[1::2], 0.15 - yy, h - 1.15 - yy)
    offs = Tensor(off.astype(dtype), requires_grad=True)
    return [x, offs], sample_at_offsets


def _case_pixel_shuffle(rng, dtype):
    x = Tensor(rng.standard_normal((8, 3, 3)).astype(dtype), requires_grad=True)
    return [x], lambda t: pixel_shuffle(t, 2)


def _case_pixel_unshuffle(rng, dtype):
    x = Tensor(rng.standard_normal((2, 4, 6)).astype(dtype), requires_grad=True)
    return [x], lambda t: pixel_unshuffle(t, 2)


def _case_nearest(rng, dtype):
    x = Tensor(rng.standard_normal((2, 3, 3)).astype(dtype), requires_grad=True)
    return [x], lambda t: nearest_upsample(t, 2)


def _case_softmax(rng, dtype):
    x = Tensor(rng.standard_normal((4, 8)).astype(dtype), requires_grad=True)
    return [x], lambda t: softmax(t, axis=1, scale_factor=1.0 / np.sqrt(8.0))


def _case_grouped_scores(rng, dtype):
    q = Tensor(rng.standard_normal((8, 3, 3)).astype(dtype), requires_grad=True)
    k = Tensor(rng.standard_normal((4, 8, 3, 3)).astype(dtype), requires_grad=True)
    return [q, k], lambda a, b: grouped_scores(a, b, 4, 1.0 / np.sqrt(8.0))


def _case_grouped_mix(rng, dtype):
    w = Tensor(rng.uniform(0.0, 1.0, size=(4, 4, 3, 3)).astype(dtype), requires_grad=True)
    v = Tensor(rng.standard_normal((4, 8, 3, 3)).astype(dtype), requires_grad=True)
    return [w, v], grouped_mix


def _case_smooth_l1(rng, dtype):
    beta = 0.01
    e = _away_from(rng.uniform(-0.05, 0.05, size=(3, 4, 4)), [-beta, beta, 0.0],
                   0.002, rng, -0.05, 0.05)
    t = rng.standard_normal((3, 4, 4))
    pred = Tensor((t + e).astype(dtype), requires_grad=True)
    target = Tensor(t.astype(dtype), requires_grad=True)
    return [pred, target], lambda p, q: smooth_l1(p, q, beta)


GRADCHECK_CASES = {
    "identity": _case_identity,
    "add": _case_add,
    "mul": _case_mul,
    "scale": _case_scale,
    "concat": _case_concat,
    "slice_channels": _case_slice,
    "stack": _case_stack,
    "sum_all": _case_sum,
    "conv2d_1x1": _conv_case(1, 1),
    "conv2d_3x3": _conv_case(3, 3),
    "conv2d_7x7": _conv_case(7, 7, cin=2, cout=2),
    "leaky_relu": _case_leaky,
    "bilinear_resize_up": _case_resize_up,
    "bilinear_resize_down": _case_resize_down,
    "bilinear_sample": _case_bilinear_sample,
    "sample_at_offsets": _case_sample_at_offsets,
    "pixel_shuffle": _case_pixel_shuffle,
    "pixel_unshuffle": _case_pixel_unshuffle,
    "nearest_upsample": _case_nearest,
    "softmax": _case_softmax,
    "grouped_scores": _case_grouped_scores,
    "grouped_mix": _case_grouped_mix,
    "smooth_l1": _case_smooth_l1,
}


def gradcheck(op_id: str, trials: int = 100, tolerance: float = 1e-4,
              seed: int = 0, eps: float | None = None) -> GradcheckReport:
    """Compare analytic gradients with central finite differences.

    Runs ``trials`` random instances of the registered op in float64 (the
    check build) and reports the worst relative deviation.
    """
    if op_id not in GRADCHECK_CASES:
        raise KeyError(f"unknown op id {op_id!r}; known: {sorted(GRADCHECK_CASES)}")
    if eps is None:
        eps = 2.0 ** -12 if op_id == "identity" else 1e-5
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        inputs, fn = GRADCHECK_CASES[op_id](rng, np.float64)
        worst = max(worst, compare_gradients(fn, inputs, rng, eps))
    return GradcheckReport(op_id=op_id, trials=trials, tolerance=tolerance, max_rel_err=worst)


def gradcheck_all(trials: int = 20, tolerance: float = 1e-4, seed: int = 0):
    """Run gradcheck over the whole registry; returns the report list."""
    return [gradcheck(op_id, trials=trials, tolerance=tolerance, seed=seed + i)
            for i, op_id in enumerate(GRADCHECK_CASES)]
