"""8-bit RGB PNG frame I/O.

Frames travel through the engine as float32 ``(3, H, W)`` arrays in [0,1].
Quantization happens exactly once, at write time: clamp to [0,1], then round
half away from zero to 8 bits, so metrics computed on written files match the
artifacts on disk.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeError


@dataclass
class FrameSequence:
    """An ordered, uniformly-sized list of decoded frames."""

    frames: list
    names: list
    seq_id: str = ""

    def __post_init__(self):
        if not self.frames:
            raise ShapeError(f"sequence {self.seq_id!r} is empty")
        dims = self.frames[0].shape
        for name, f in zip(self.names, self.frames):
            if f.shape != dims:
                raise ShapeError(f"frame {name} dims {f.shape} != {dims}")

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)


def quantize(frame: np.ndarray) -> np.ndarray:
    """Clamp to [0,1] and round half away from zero to uint8."""
    clipped = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    return np.floor(clipped * 255.0 + 0.5).astype(np.uint8)


def load_frame(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(np.float32) / np.float32(255.0)


def save_frame(path, frame: np.ndarray) -> None:
    q = quantize(frame)
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_sequence(directory, seq_id: str | None = None) -> FrameSequence:
    """Decode every PNG in ``directory``, ordered lexicographically by name."""
    directory = Path(directory)
    names = sorted(p.name for p in directory.glob("*.png"))
    if not names:
        raise FileNotFoundError(f"no PNG frames in {directory}")
    frames = [load_frame(directory / n) for n in names]
    return FrameSequence(frames=frames, names=names,
                         seq_id=seq_id if seq_id is not None else directory.name)


def save_sequence(directory, frames, names) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for frame, name in zip(frames, names):
        path = directory / name
        save_frame(path, frame)
        written.append(path)
    return written


def output_name(input_name: str, suffix: str = "_sr") -> str:
    stem = Path(input_name).stem
    return f"{stem}{suffix}.png"
