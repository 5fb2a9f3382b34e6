"""Multi-level feature encoder.

Each input frame is embedded into an 8-channel feature pyramid: a block of
four 3x3 convolutions per level, with bilinear x2 downsampling between
blocks. Level 0 stays at the input resolution; level ``l`` lives at
``(H / 2^l, W / 2^l)``. The current-frame and previous-frame chains use
separate weights, so the caller passes the block list explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ShapeError

FEATURE_CHANNELS = 8
CONVS_PER_BLOCK = 4


@dataclass
class PyramidFeatures:
    """Per-level feature maps ``f0..fL`` for one frame."""

    levels: list

    def __post_init__(self):
        if not self.levels:
            raise ShapeError("a feature pyramid needs at least one level")
        d, h, w = self.levels[0].dims
        for l, f in enumerate(self.levels):
            if f.dims != (d, h >> l, w >> l):
                raise ShapeError(f"level {l} dims {f.dims} break the halving ladder "
                                 f"started at {(d, h, w)}")

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, l):
        return self.levels[l]


def conv_block(x: T.Tensor, layers, slope: float) -> T.Tensor:
    """Run a stack of same-padded convs; activation after all but the last."""
    out = x
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        out = T.conv2d(out, layer.weight, layer.bias)
        if i != last:
            out = T.leaky_relu(out, slope)
    return out


def encode(frame: T.Tensor, blocks, slope: float = 0.1) -> PyramidFeatures:
    """Encode one frame into ``len(blocks)`` pyramid levels.

    ``blocks[0]`` maps 3 -> 8 channels at full resolution; every later block
    refines 8 -> 8 and is followed by a bilinear x2 downsample. The frame's
    spatial dims must divide by ``2 ** (len(blocks) - 1)``.
    """
    if frame.data.ndim != 3 or frame.dims[0] != 3:
        raise ShapeError(f"expected an RGB frame (3,H,W), got {frame.dims}")
    n_levels = len(blocks)
    _, h, w = frame.dims
    ladder = 1 << (n_levels - 1)
    if h % ladder or w % ladder:
        raise ShapeError(f"frame dims {h}x{w} must divide by {ladder} "
                         f"for {n_levels} pyramid levels")

    levels = [conv_block(frame, blocks[0], slope)]
    for block in blocks[1:]:
        refined = conv_block(levels[-1], block, slope)
        levels.append(T.bilinear_resize(refined, 0.5))
    return PyramidFeatures(levels)
