"""Recurrent super-resolution cell.

One step takes the current and previous LR frames plus the hidden state,
runs the encoder and the deformable attention pyramid, aggregates everything
through five information multi-distillation blocks, and emits the x4 frame
(sub-pixel shuffle plus a nearest-neighbor residual) together with the next
hidden state.

Also owns the model configuration, the named-weights container and its
``.dapw`` serialization format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import dap, encoder
from . import tensor as T
from .errors import NumericError, ShapeError, WeightsFormatError
from .tensor import ConvLayer

IMDN_BLOCKS = 5
LR_OUT_CHANNELS = 48  # 3 * r^2 sub-pixel channels ahead of the shuffle

DAPW_MAGIC = b"DAPW"
DAPW_VERSION = 1
SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    """One model variant: width, pyramid depth and the three ablation flags."""

    n: int = 128
    k: int = 4
    d: int = 8
    levels: int = 3
    r: int = 4
    groups: int = 4
    offsets_enabled: bool = True
    pyramid_enabled: bool = True
    attention_enabled: bool = True
    leaky_slope: float = 0.1

    def __post_init__(self):
        if self.r != 4:
            raise ShapeError("the upscaling factor is fixed at 4")
        if self.k != 4 or self.groups != 4 or self.d != 8:
            raise ShapeError("k, groups and the embedding width are fixed at 4/4/8")
        if self.n % 4:
            raise ShapeError(f"feature width {self.n} must divide by 4")
        if self.levels < 1:
            raise ShapeError("at least one pyramid level is required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = {k: v for k, v in d.items() if k != "schema_version"}
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump({"schema_version": SCHEMA_VERSION, **self.to_dict()}, f, indent=2)


PRESETS = {
    "dap64": dict(n=64),
    "dap128": dict(n=128),
    "ablation1": dict(n=64, offsets_enabled=False, pyramid_enabled=False,
                      attention_enabled=False),
    "ablation2": dict(n=64, offsets_enabled=False, pyramid_enabled=False,
                      attention_enabled=True),
    "ablation3": dict(n=64, offsets_enabled=True, pyramid_enabled=False,
                      attention_enabled=False),
    "ablation4": dict(n=64, offsets_enabled=True, pyramid_enabled=True,
                      attention_enabled=False),
    "ablation5": dict(n=64),
    "ablation6": dict(n=128),
    "toy": dict(n=16, levels=2),
}


def preset(name: str) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    return ModelConfig(**PRESETS[name])


# ---------------------------------------------------------------------------
# Hidden state
# ---------------------------------------------------------------------------

@dataclass
class HiddenState:
    """Dense recurrent memory plus the frame count since (re)initialization."""

    map: T.Tensor
    step_index: int = 0

    @classmethod
    def initial(cls, n: int, h: int, w: int, dtype=T.DEFAULT_DTYPE) -> "HiddenState":
        return cls(T.zeros((n, h, w), dtype=dtype), step_index=0)


# ---------------------------------------------------------------------------
# Weight layout
# ---------------------------------------------------------------------------

def _encoder_levels(cfg: ModelConfig):
    full = cfg.offsets_enabled and cfg.pyramid_enabled
    return list(range(cfg.levels + 1)) if full else [0]


def weight_layout(cfg: ModelConfig):
    """Ordered ``(name, weight_shape)`` pairs for every layer of ``cfg``.

    This is the single source of truth for allocation, serialization checks
    and the parameter naming convention (dotted paths, ``.weight``/``.bias``).
    """
    d, n, k, L = cfg.d, cfg.n, cfg.k, cfg.levels
    out = []

    chains = []
    if cfg.offsets_enabled or cfg.attention_enabled:
        chains.append("t")
    if cfg.offsets_enabled and cfg.pyramid_enabled:
        chains.append("prev")
    for chain in chains:
        for l in _encoder_levels(cfg):
            for i in range(encoder.CONVS_PER_BLOCK):
                cin = 3 if (l == 0 and i == 0) else d
                out.append((f"encoder.{chain}.l{l}.conv{i}", (d, cin, 3, 3)))

    if cfg.offsets_enabled:
        levels = range(L + 1) if cfg.pyramid_enabled else [0]
        for l in levels:
            base = (not cfg.pyramid_enabled) or l == L
            plan = dap.OFFSET_PLAN_BASE if base else dap.OFFSET_PLAN
            for i, (cin, cout) in enumerate(plan):
                out.append((f"dap.l{l}.offset.conv{i}", (cout, cin, 7, 7)))

    if cfg.offsets_enabled and cfg.pyramid_enabled:
        for l in range(L):
            if cfg.attention_enabled:
                for part in ("q", "k", "v"):
                    out.append((f"dap.l{l}.{part}", (d, d, 1, 1)))
            else:
                out.append((f"dap.l{l}.fuse", (d, k * d, 3, 3)))

    if cfg.attention_enabled:
        if not (cfg.offsets_enabled and cfg.pyramid_enabled):
            out.append(("dap.l0.q", (d, d, 1, 1)))  # query path for hidden fusion
        for g in range(cfg.groups):
            out.append((f"hidden.key.g{g}", (2, n // cfg.groups, 1, 1)))
            out.append((f"hidden.value.g{g}", (n // cfg.groups, n // cfg.groups, 1, 1)))
    elif cfg.offsets_enabled:
        out.append(("hidden.fuse", (n, k * n, 3, 3)))

    out.append(("cell.agg", (n, n + 3, 3, 3)))
    for b in range(IMDN_BLOCKS):
        out.append((f"cell.imdn{b}.conv0", (n, n, 3, 3)))
        out.append((f"cell.imdn{b}.conv1", (n, 3 * n // 4, 3, 3)))
        out.append((f"cell.imdn{b}.conv2", (n, 3 * n // 4, 3, 3)))
        out.append((f"cell.imdn{b}.conv3", (n // 4, 3 * n // 4, 3, 3)))
        out.append((f"cell.imdn{b}.fuse", (n, n, 1, 1)))
    out.append(("cell.out", (LR_OUT_CHANNELS + n, n, 3, 3)))
    return out


@dataclass
class IMDNBlock:
    convs: list
    fuse: ConvLayer


class ModelWeights:
    """Named tensor container plus structured views over one configuration."""

    def __init__(self, cfg: ModelConfig, tensors: dict):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> T.Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def parameters(self):
        return self.tensors.values()

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def layer(self, prefix: str) -> ConvLayer:
        return ConvLayer(self.tensors[f"{prefix}.weight"], self.tensors[f"{prefix}.bias"])

    def encoder_blocks(self, chain: str):
        return [[self.layer(f"encoder.{chain}.l{l}.conv{i}")
                 for i in range(encoder.CONVS_PER_BLOCK)]
                for l in _encoder_levels(self.cfg)]

    def offset_block(self, level: int):
        base = (not self.cfg.pyramid_enabled) or level == self.cfg.levels
        plan = dap.OFFSET_PLAN_BASE if base else dap.OFFSET_PLAN
        return [self.layer(f"dap.l{level}.offset.conv{i}") for i in range(len(plan))]

    def offset_blocks(self):
        return [self.offset_block(l) for l in range(self.cfg.levels + 1)]

    def level_attention(self):
        return [dap.LevelAttention(q=self.layer(f"dap.l{l}.q"),
                                   k=self.layer(f"dap.l{l}.k"),
                                   v=self.layer(f"dap.l{l}.v"))
                for l in range(self.cfg.levels)]

    def level_fuse(self):
        return [self.layer(f"dap.l{l}.fuse") for l in range(self.cfg.levels)]

    def query0(self) -> ConvLayer:
        return self.layer("dap.l0.q")

    def hidden_fusion(self) -> dap.HiddenFusion:
        g = self.cfg.groups
        return dap.HiddenFusion(keys=[self.layer(f"hidden.key.g{i}") for i in range(g)],
                                values=[self.layer(f"hidden.value.g{i}") for i in range(g)])

    def hidden_fuse(self) -> ConvLayer:
        return self.layer("hidden.fuse")

    def imdn(self, b: int) -> IMDNBlock:
        return IMDNBlock(convs=[self.layer(f"cell.imdn{b}.conv{i}") for i in range(4)],
                         fuse=self.layer(f"cell.imdn{b}.fuse"))


def init_weights(cfg: ModelConfig, seed: int = 0, dtype=T.DEFAULT_DTYPE) -> ModelWeights:
    """Fan-in-scaled uniform init; offset-predicting final layers start at zero
    so the untrained attention samples locally."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, T.Tensor] = {}
    last_offset_conv = f"conv{len(dap.OFFSET_PLAN) - 1}"
    for name, shape in weight_layout(cfg):
        fan_in = int(np.prod(shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=shape).astype(dtype)
        if ".offset." in name and name.endswith(last_offset_conv):
            w[:] = 0.0
        tensors[f"{name}.weight"] = T.Tensor(w, name=f"{name}.weight")
        tensors[f"{name}.bias"] = T.Tensor(np.zeros(shape[0], dtype=dtype),
                                           name=f"{name}.bias")
    return ModelWeights(cfg, tensors)


def zero_weights(cfg: ModelConfig, dtype=T.DEFAULT_DTYPE) -> ModelWeights:
    tensors = {}
    for name, shape in weight_layout(cfg):
        tensors[f"{name}.weight"] = T.Tensor(np.zeros(shape, dtype=dtype), name=f"{name}.weight")
        tensors[f"{name}.bias"] = T.Tensor(np.zeros(shape[0], dtype=dtype), name=f"{name}.bias")
    return ModelWeights(cfg, tensors)


# ---------------------------------------------------------------------------
# Serialization (.dapw)
# ---------------------------------------------------------------------------

def save_weights(w: ModelWeights, path) -> None:
    """Write the named-tensor container and its JSON config sidecar."""
    path = str(path)
    with open(path, "wb") as f:
        f.write(DAPW_MAGIC)
        f.write(struct.pack("<HI", DAPW_VERSION, len(w.tensors)))
        for name, t in w.tensors.items():
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
    w.cfg.save_json(path + ".json")


def load_weights(path, cfg: ModelConfig | None = None) -> ModelWeights:
    """Read a ``.dapw`` container, validating every tensor against ``cfg``."""
    path = str(path)
    if cfg is None:
        cfg = ModelConfig.from_json(path + ".json")
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != DAPW_MAGIC:
        raise WeightsFormatError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, count = struct.unpack_from("<HI", blob, 4)
    except struct.error as e:
        raise WeightsFormatError(f"{path}: truncated header") from e
    if version != DAPW_VERSION:
        raise WeightsFormatError(f"{path}: unsupported version {version}")
    tensors: dict[str, T.Tensor] = {}
    off = 10
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            cnt = int(np.prod(dims)) if rank else 1
            end = off + 4 * cnt
            if end > len(blob):
                raise WeightsFormatError(f"{path}: truncated payload for tensor '{name}'")
            arr = np.frombuffer(blob, dtype="<f4", count=cnt, offset=off).reshape(dims)
            off = end
            tensors[name] = T.Tensor(arr.astype(np.float32), name=name)
    except struct.error as e:
        raise WeightsFormatError(f"{path}: truncated container") from e

    expected = {}
    for name, shape in weight_layout(cfg):
        expected[f"{name}.weight"] = shape
        expected[f"{name}.bias"] = (shape[0],)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise WeightsFormatError(f"{path}: missing tensor '{missing[0]}'")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise WeightsFormatError(f"{path}: unexpected tensor '{extra[0]}'")
    for name, shape in expected.items():
        if tensors[name].dims != shape:
            raise WeightsFormatError(
                f"{path}: tensor '{name}' has dims {tuple(tensors[name].dims)}, "
                f"expected {tuple(shape)}")
    for name, t in tensors.items():
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"{path}: tensor '{name}' holds non-finite values")
    ordered = {name: tensors[name] for name in expected}
    return ModelWeights(cfg, ordered)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def imdn_block(x: T.Tensor, block: IMDNBlock, slope: float = 0.1) -> T.Tensor:
    """Progressive channel distillation with a residual connection.

    Three activated 3x3 convs each split off n/4 distilled channels (the
    leading slice) and pass 3n/4 on; a final 3x3 conv contributes the fourth
    n/4 slice. The concatenated distillates go through a 1x1 fuse conv and
    are added back onto the block input.
    """
    n = x.dims[0]
    if n % 4:
        raise ShapeError(f"distillation needs a channel count divisible by 4, got {n}")
    quarter = n // 4
    distilled = []
    rest = x
    for i in range(3):
        full = T.leaky_relu(T.conv2d(rest, block.convs[i].weight, block.convs[i].bias), slope)
        distilled.append(T.slice_channels(full, 0, quarter))
        rest = T.slice_channels(full, quarter, n)
    distilled.append(T.conv2d(rest, block.convs[3].weight, block.convs[3].bias))
    fused = T.conv2d(T.concat(distilled, axis=0), block.fuse.weight, block.fuse.bias)
    return T.add(fused, x)


def _validate_frame(x: T.Tensor, what: str) -> None:
    if x.data.ndim != 3 or x.dims[0] != 3:
        raise ShapeError(f"{what} must be an RGB frame (3,H,W), got {x.dims}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"{what} holds non-finite values")
    lo, hi = float(x.data.min()), float(x.data.max())
    if lo < 0.0 or hi > 1.0:
        raise NumericError(f"{what} values must lie in [0,1], got [{lo}, {hi}]")


def _frame_offsets(x_t: T.Tensor, x_prev: T.Tensor, w: ModelWeights, cfg: ModelConfig):
    """Encoder + offset pyramid for one frame pair: ``-> (s0, q0)``.

    ``s0`` is the full-resolution offset field (zeros when offsets are
    disabled but the fusion still samples, ``None`` otherwise); ``q0`` is the
    cached level-0 query embedding when attention is enabled.
    """
    slope = cfg.leaky_slope
    _, h, wid = x_t.dims
    f_t = f_prev = None
    if cfg.offsets_enabled or cfg.attention_enabled:
        with T.scope("encoder.t"):
            f_t = encoder.encode(x_t, w.encoder_blocks("t"), slope)
    if cfg.offsets_enabled and cfg.pyramid_enabled:
        with T.scope("encoder.prev"):
            f_prev = encoder.encode(x_prev, w.encoder_blocks("prev"), slope)

    q0 = None
    if cfg.offsets_enabled:
        if cfg.pyramid_enabled:
            res = dap.pyramid(f_t, f_prev, w.offset_blocks(),
                              w.level_attention() if cfg.attention_enabled else None,
                              None if cfg.attention_enabled else w.level_fuse(),
                              slope)
            s0, q0 = res.offsets, res.query0
        else:
            with T.scope("dap.l0"):
                s0 = dap.refine_offsets(f_t[0], None, None, w.offset_block(0),
                                        slope, level=0)
    elif cfg.attention_enabled:
        s0 = dap.zero_offsets(0, h, wid, cfg.k, dtype=x_t.data.dtype)
    else:
        s0 = None

    if cfg.attention_enabled and q0 is None:
        with T.scope("dap.l0"):
            ql = w.query0()
            q0 = T.conv2d(f_t[0], ql.weight, ql.bias)
    return s0, q0


def compute_offsets(x_t, x_prev, w: ModelWeights, cfg: ModelConfig) -> dap.OffsetField:
    """Just the full-resolution offset field for one frame pair (no grads)."""
    if not cfg.offsets_enabled:
        raise ShapeError("this configuration predicts no offsets")
    x_t = x_t if isinstance(x_t, T.Tensor) else T.tensor(x_t)
    x_prev = x_prev if isinstance(x_prev, T.Tensor) else T.tensor(x_prev)
    _validate_frame(x_t, "x_t")
    _validate_frame(x_prev, "x_prev")
    with T.no_grad():
        s0, _ = _frame_offsets(x_t, x_prev, w, cfg)
    return s0


def step(x_t: T.Tensor, x_prev: T.Tensor, h_prev: HiddenState,
         w: ModelWeights, cfg: ModelConfig, probe: dict | None = None):
    """One recurrent step: ``-> (y_t (3, rH, rW), h_t (n, H, W))``.

    The network output rides on a nearest-neighbor x4 residual, so an
    all-zero network reproduces that upsample exactly. Outputs stay
    unclamped; clamping to [0,1] happens at file export only. When ``probe``
    is given, the level-0 offset field is stashed under ``probe["offsets"]``.
    """
    _validate_frame(x_t, "x_t")
    _validate_frame(x_prev, "x_prev")
    if x_t.dims != x_prev.dims:
        raise ShapeError(f"frame dims disagree: {x_t.dims} vs {x_prev.dims}")
    _, h, wid = x_t.dims
    if h_prev.map.dims != (cfg.n, h, wid):
        raise ShapeError(f"hidden state dims {h_prev.map.dims} != ({cfg.n}, {h}, {wid})")

    s0, q0 = _frame_offsets(x_t, x_prev, w, cfg)
    if probe is not None:
        probe["offsets"] = s0

    slope = cfg.leaky_slope
    if cfg.attention_enabled:
        v_h = dap.fuse_hidden(q0, h_prev.map, s0, w.hidden_fusion())
    elif cfg.offsets_enabled:
        v_h = dap.conv_fuse_hidden(h_prev.map, s0, w.hidden_fuse())
    else:
        v_h = h_prev.map

    with T.scope("cell"):
        agg = w.layer("cell.agg")
        a = T.leaky_relu(T.conv2d(T.concat([x_t, v_h], axis=0), agg.weight, agg.bias), slope)
        for b in range(IMDN_BLOCKS):
            a = imdn_block(a, w.imdn(b), slope)
        out_layer = w.layer("cell.out")
        out = T.conv2d(a, out_layer.weight, out_layer.bias)
        y_lr = T.slice_channels(out, 0, LR_OUT_CHANNELS)
        h_new = T.slice_channels(out, LR_OUT_CHANNELS, LR_OUT_CHANNELS + cfg.n)
        y = T.add(T.pixel_shuffle(y_lr, cfg.r), T.nearest_upsample(x_t, cfg.r))
    return y, HiddenState(h_new, h_prev.step_index + 1)


def run_sequence(frames, w: ModelWeights, cfg: ModelConfig, mode: str = "forward",
                 reinit_every: int | None = None, with_state: bool = False,
                 offset_sink=None):
    """Stream a frame source through the cell; yields outputs in source order.

    Forward mode is strictly causal: each output is yielded before the next
    frame is pulled from the source. Reverse mode materializes the sequence,
    processes it back-to-front and re-reverses the outputs. With
    ``reinit_every=N`` the hidden state is re-zeroed (and the previous frame
    re-paired) every N frames. ``offset_sink(frame_index, grid)`` receives the
    level-0 offsets per frame, indexed in the original order.
    """
    if mode not in ("forward", "reverse"):
        raise ValueError(f"mode must be 'forward' or 'reverse', got {mode!r}")
    if reinit_every is not None and reinit_every < 1:
        raise ValueError("reinit_every must be a positive frame count")

    if mode == "reverse":
        ordered = list(frames)
        if not ordered:
            raise ValueError("empty frame source")
        total = len(ordered)
        sink = None
        if offset_sink is not None:
            sink = lambda t, grid: offset_sink(total - 1 - t, grid)
        outs = list(run_sequence(reversed(ordered), w, cfg, "forward",
                                 reinit_every, with_state, sink))
        def emit_reversed():
            yield from reversed(outs)
        return emit_reversed()

    def emit_forward():
        hidden = None
        x_prev = None
        t = 0
        for frame in frames:
            x = frame if isinstance(frame, T.Tensor) else T.tensor(frame)
            if hidden is None or (reinit_every and t % reinit_every == 0):
                _, fh, fw = x.dims
                hidden = HiddenState.initial(cfg.n, fh, fw, dtype=x.data.dtype)
                x_prev = x
            probe = {} if offset_sink is not None else None
            with T.no_grad():
                y, hidden = step(x, x_prev, hidden, w, cfg, probe=probe)
            if offset_sink is not None:
                field = probe.get("offsets")
                offset_sink(t, None if field is None else field.grid.data)
            x_prev = x
            t += 1
            yield (y, hidden) if with_state else y
        if t == 0:
            raise ValueError("empty frame source")

    return emit_forward()
