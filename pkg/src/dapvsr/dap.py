"""Deformable attention pyramid: offset-guided cross-attention between the
current frame, the previous frame and the recurrent hidden state.

Offsets are predicted coarse-to-fine. At every level a field of k = 4
displacement pairs per pixel selects where keys/values are sampled in the
previous frame's features; scaled dot-product attention with 4 channel groups
aggregates them. The final full-resolution field drives the hidden-state
fusion, whose values keep their native channel width.

Offset fields are stored in their own level's pixel units. Upsampling a field
to the next finer level doubles both the grid resolution and the stored
values, so a displacement keeps pointing at the same physical location.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T
from .errors import ShapeError
from .tensor import ConvLayer

K_POINTS = 4
GROUPS = 4
EMBED_CHANNELS = 8
ATTN_SCALE = 1.0 / math.sqrt(float(EMBED_CHANNELS))

# offset-prediction stack: (in, out) per 7x7 layer; the finest levels see
# features + attended values + upsampled offsets = 8 + 8 + 2k input channels
OFFSET_PLAN = ((24, 32), (32, 64), (64, 32), (32, 16), (16, 8))
OFFSET_PLAN_BASE = ((8, 32), (32, 64), (64, 32), (32, 16), (16, 8))


@dataclass
class OffsetField:
    """Per-pixel sampling displacements at one pyramid level.

    ``grid`` has dims (2k, h, w); channels ``[2i, 2i+1]`` hold point i's
    ``(dx, dy)`` with dx along the width axis, in this level's pixel units.
    """

    level: int
    grid: T.Tensor

    def __post_init__(self):
        if self.grid.data.ndim != 3 or self.grid.dims[0] % 2:
            raise ShapeError(f"offset grid must be (2k,h,w), got {self.grid.dims}")

    @property
    def k(self) -> int:
        return self.grid.dims[0] // 2


@dataclass
class LevelAttention:
    """Per-level query/key/value embeddings (1x1 convs, 8 -> 8)."""

    q: ConvLayer
    k: ConvLayer
    v: ConvLayer


@dataclass
class HiddenFusion:
    """Grouped hidden-state embeddings: keys n/G -> 2, values n/G -> n/G."""

    keys: list
    values: list


def zero_offsets(level: int, h: int, w: int, k: int = K_POINTS,
                 dtype=T.DEFAULT_DTYPE) -> OffsetField:
    return OffsetField(level, T.zeros((2 * k, h, w), dtype=dtype))


def upsample_offsets(field: OffsetField) -> OffsetField:
    """Move a field one level finer: bilinear x2 grid, displacement values x2."""
    return OffsetField(field.level - 1, T.scale(T.bilinear_resize(field.grid, 2), 2.0))


def sample_kv(features: T.Tensor, offsets: OffsetField) -> T.Tensor:
    """Gather k displaced feature vectors per pixel: ``-> (k, C, h, w)``."""
    if features.dims[1:] != offsets.grid.dims[1:]:
        raise ShapeError(f"offsets at {offsets.grid.dims[1:]} do not match "
                         f"features at {features.dims[1:]}")
    return T.sample_at_offsets(features, offsets.grid)


def _embed_stack(stack: T.Tensor, layer: ConvLayer) -> T.Tensor:
    """Apply one 1x1 embedding to each of the k sampled maps."""
    k = stack.dims[0]
    return T.stack([T.conv2d(T.slice_axis0(stack, i), layer.weight, layer.bias)
                    for i in range(k)])


def _embed_stack_grouped(stack: T.Tensor, layers) -> T.Tensor:
    """Group-local 1x1 embeddings of each sampled map (block-diagonal map)."""
    k, c = stack.dims[0], stack.dims[1]
    g = len(layers)
    cg = c // g
    maps = []
    for i in range(k):
        full = T.slice_axis0(stack, i)
        parts = [T.conv2d(T.slice_channels(full, j * cg, (j + 1) * cg),
                          layers[j].weight, layers[j].bias) for j in range(g)]
        maps.append(T.concat(parts, axis=0))
    return T.stack(maps)


def attention_weights(q: T.Tensor, keys: T.Tensor, groups: int = GROUPS,
                      scale_factor: float = ATTN_SCALE) -> T.Tensor:
    """Softmax attention weights over the k sampled points: ``(G, k, h, w)``."""
    scores = T.grouped_scores(q, keys, groups, scale_factor)
    return T.softmax(scores, axis=1)


def _attend(f_t: T.Tensor, f_prev: T.Tensor, offsets: OffsetField,
            w: LevelAttention):
    """Cross-attention from f_t queries into offset-sampled f_prev features."""
    q = T.conv2d(f_t, w.q.weight, w.q.bias)
    sampled = sample_kv(f_prev, offsets)
    keys = _embed_stack(sampled, w.k)
    values = _embed_stack(sampled, w.v)
    wts = attention_weights(q, keys)
    return T.grouped_mix(wts, values), q


def attend_level(f_t: T.Tensor, f_prev: T.Tensor, offsets: OffsetField,
                 w: LevelAttention) -> T.Tensor:
    """Per-level deformable cross-attention: ``(8,h,w) -> (8,h,w)``."""
    if f_t.dims != f_prev.dims:
        raise ShapeError(f"frame features disagree: {f_t.dims} vs {f_prev.dims}")
    v, _ = _attend(f_t, f_prev, offsets, w)
    return v


def conv_fuse_level(f_prev: T.Tensor, offsets: OffsetField, fuse: ConvLayer) -> T.Tensor:
    """Attention-free variant: concat the k sampled maps, fuse with a 3x3 conv."""
    sampled = sample_kv(f_prev, offsets)
    flat = T.concat([T.slice_axis0(sampled, i) for i in range(sampled.dims[0])], axis=0)
    return T.conv2d(flat, fuse.weight, fuse.bias)


def _refine_from_upsampled(f_t: T.Tensor, v_l: T.Tensor, up: OffsetField,
                           block, slope: float) -> OffsetField:
    from .encoder import conv_block
    inp = T.concat([f_t, v_l, up.grid], axis=0)
    residual = conv_block(inp, block, slope)
    return OffsetField(up.level, T.add(residual, up.grid))


def refine_offsets(f_t: T.Tensor, v_l: T.Tensor | None, coarse: OffsetField | None,
                   block, slope: float = 0.1, level: int | None = None) -> OffsetField:
    """One coarse-to-fine refinement step.

    At the base (coarsest) level both ``v_l`` and ``coarse`` are absent and
    the field is predicted from the features alone. Everywhere else the
    coarse field is upsampled, used as-is for the residual prediction input,
    and added back to the predicted residual.
    """
    from .encoder import conv_block
    if coarse is None:
        if v_l is not None:
            raise ShapeError("base-level refinement takes no attended values")
        if level is None:
            raise ShapeError("base-level refinement needs an explicit level index")
        return OffsetField(level, conv_block(f_t, block, slope))
    if v_l is None:
        raise ShapeError("refinement below the base level needs attended values")
    return _refine_from_upsampled(f_t, v_l, upsample_offsets(coarse), block, slope)


@dataclass
class PyramidResult:
    offsets: OffsetField       # s0, full LR resolution
    query0: T.Tensor | None    # cached level-0 query embedding


def pyramid(f_t, f_prev, offset_blocks, level_attn, level_fuse=None,
            slope: float = 0.1) -> PyramidResult:
    """Run the full coarse-to-fine loop and return the level-0 offsets.

    ``offset_blocks[l]`` predicts at level l; ``level_attn[l]`` (or
    ``level_fuse[l]`` for the attention-free variant) aggregates previous-
    frame features for every level below the coarsest.
    """
    top = len(offset_blocks) - 1
    q0 = None
    with T.scope(f"dap.l{top}"):
        field = refine_offsets(f_t[top], None, None, offset_blocks[top],
                               slope, level=top)
    for l in range(top - 1, -1, -1):
        with T.scope(f"dap.l{l}"):
            up = upsample_offsets(field)
            if level_attn is not None:
                v, q = _attend(f_t[l], f_prev[l], up, level_attn[l])
                if l == 0:
                    q0 = q
            else:
                v = conv_fuse_level(f_prev[l], up, level_fuse[l])
            field = _refine_from_upsampled(f_t[l], v, up, offset_blocks[l], slope)
    return PyramidResult(offsets=field, query0=q0)


def fuse_hidden(q0: T.Tensor, h_prev: T.Tensor, s0: OffsetField,
                w: HiddenFusion) -> T.Tensor:
    """Aggregate the hidden state at the s0 sampling points: ``-> (n, H, W)``.

    Query/key matching happens in the 8-channel embedding space; values are
    embedded group-locally at their native width, so the output keeps the
    hidden state's channel count.
    """
    if h_prev.dims[1:] != s0.grid.dims[1:]:
        raise ShapeError(f"hidden state at {h_prev.dims[1:]} does not match "
                         f"offsets at {s0.grid.dims[1:]}")
    with T.scope("dap.hidden"):
        sampled = sample_kv(h_prev, s0)
        keys = _embed_stack_grouped(sampled, w.keys)
        values = _embed_stack_grouped(sampled, w.values)
        wts = attention_weights(q0, keys)
        return T.grouped_mix(wts, values)


def conv_fuse_hidden(h_prev: T.Tensor, s0: OffsetField, fuse: ConvLayer) -> T.Tensor:
    """Attention-free hidden aggregation: concat k sampled maps, 3x3 conv."""
    with T.scope("dap.hidden"):
        return conv_fuse_level(h_prev, s0, fuse)
