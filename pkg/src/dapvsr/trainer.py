"""Desk-scale optimization: smooth-L1 objective over a recurrent unroll,
gradient-clipped Adam, plateau-driven learning-rate schedule, checkpoints.

Dataset layout: ``root/<sequence>/hr/*.png`` paired with
``root/<sequence>/lr/*.png`` (same frame count, LR dims = HR dims / 4).
Training is reproducible: with a fixed seed and single-threaded execution,
(seed, config, data) determine the checkpoint bytes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import cell as cell_mod
from . import dap
from . import degrade as degrade_mod
from . import frames as frames_mod
from . import tensor as T
from .errors import NumericError, ShapeError


def smooth_l1(pred, target, beta: float):
    """Mean smooth-L1: quadratic within ``|e| < beta``, linear outside."""
    return T.smooth_l1(pred, target, beta)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def initial(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()},
                   t=0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              lr_scales: dict | None = None) -> None:
    """One first/second-moment update with bias correction, in place.

    ``lr_scales`` maps tensor names to per-tensor learning-rate multipliers.
    A non-finite gradient aborts with the offending tensor's name.
    """
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for tensor '{name}'")
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = state.m[name] / (1.0 - beta1 ** t)
        v_hat = state.v[name] / (1.0 - beta2 ** t)
        eff_lr = lr * (lr_scales.get(name, 1.0) if lr_scales else 1.0)
        p.data -= (eff_lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


def clip_gradients(grads: dict, max_norm: float):
    """Global-L2 gradient clipping; returns (grads, pre-clip norm)."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        factor = max_norm / norm
        for name, g in grads.items():
            if g is not None:
                grads[name] = g * np.asarray(factor, dtype=g.dtype)
    return grads, norm


# ---------------------------------------------------------------------------
# Config and data
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    unroll: int = 5
    batch: int = 1
    lr_schedule: tuple = (1e-4, 5e-5, 1e-5)
    beta: float = 1e-2
    clip_norm: float = 1.0
    seed: int = 0
    max_steps: int = 500
    crop_hr: int = 256
    eval_every: int = 50
    plateau_patience: int = 20
    plateau_min_delta: float = 1e-4
    checkpoint_every: int = 500
    stop_loss_ratio: float | None = None  # optional early stop vs the step-0 loss
    min_steps: int = 0
    augment: bool = True  # flips/rotations/inversion + crop jitter
    # offset-predicting stacks learn on a reduced rate after an optional
    # freeze; keeps sampling locations in range while the rest of the net is
    # still settling. The final (zero-initialized) layer of each stack sets
    # the offsets directly and linearly, so it gets its own rate.
    offset_lr_scale: float = 0.05
    offset_head_lr_scale: float = 0.5
    offset_warmup_steps: int = 0

    def __post_init__(self):
        if self.unroll < 2:
            raise ValueError("the unroll length must be at least 2")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        self.lr_schedule = tuple(self.lr_schedule)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as f:
            d = json.load(f)
        d.pop("schema_version", None)
        return cls(**d)

    def save_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump({"schema_version": cell_mod.SCHEMA_VERSION, **asdict(self)}, f, indent=2)


class SequenceDataset:
    """Paired LR/HR sequences under ``root/<seq>/{lr,hr}/*.png``."""

    def __init__(self, root):
        self.root = Path(root)
        self.sequences = []
        for seq_dir in sorted(p for p in self.root.iterdir() if p.is_dir()):
            lr = frames_mod.load_sequence(seq_dir / "lr", seq_id=seq_dir.name)
            hr = frames_mod.load_sequence(seq_dir / "hr", seq_id=seq_dir.name)
            if len(lr) != len(hr):
                raise ShapeError(f"{seq_dir.name}: {len(lr)} LR vs {len(hr)} HR frames")
            lh, lw = lr.frames[0].shape[1:]
            hh, hw = hr.frames[0].shape[1:]
            if (hh, hw) != (4 * lh, 4 * lw):
                raise ShapeError(f"{seq_dir.name}: HR {hh}x{hw} is not 4x the LR {lh}x{lw}")
            self.sequences.append((lr, hr))
        if not self.sequences:
            raise FileNotFoundError(f"no sequences under {self.root}")

    def window(self, seq_idx: int, start: int, length: int):
        lr, hr = self.sequences[seq_idx]
        return lr.frames[start:start + length], hr.frames[start:start + length]

    def sample_window(self, rng: np.random.Generator, length: int):
        seq_idx = int(rng.integers(0, len(self.sequences)))
        total = len(self.sequences[seq_idx][0])
        if total < length:
            raise ShapeError(f"sequence {seq_idx} shorter than the unroll length {length}")
        start = int(rng.integers(0, total - length + 1))
        return self.window(seq_idx, start, length)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    weights: cell_mod.ModelWeights
    log: list                      # (step, loss, lr) triples
    final_eval_loss: float
    checkpoints: list = field(default_factory=list)


def unrolled_loss(lr_frames, hr_frames, w: cell_mod.ModelWeights,
                  cfg: cell_mod.ModelConfig, beta: float):
    """Smooth-L1 summed over a full unroll, backprop-ready.

    The first step self-pairs (x_prev = x_0) and starts from a zero hidden
    state; gradients flow through the entire unroll.
    """
    hidden = cell_mod.HiddenState.initial(cfg.n, *lr_frames[0].dims[1:],
                                          dtype=lr_frames[0].data.dtype)
    x_prev = lr_frames[0]
    total = None
    for x, target in zip(lr_frames, hr_frames):
        y, hidden = cell_mod.step(x, x_prev, hidden, w, cfg)
        term = smooth_l1(y, target, beta)
        total = term if total is None else T.add(total, term)
        x_prev = x
    return total


def evaluate(windows, w: cell_mod.ModelWeights, cfg: cell_mod.ModelConfig,
             beta: float) -> float:
    """Mean unrolled loss over fixed evaluation windows (no gradients)."""
    with T.no_grad():
        losses = []
        for lr_frames, hr_frames in windows:
            lt = [T.tensor(f) for f in lr_frames]
            ht = [T.tensor(f) for f in hr_frames]
            losses.append(float(unrolled_loss(lt, ht, w, cfg, beta).data))
    return float(np.mean(losses))


def train(data_dir, model_cfg: cell_mod.ModelConfig, train_cfg: TrainConfig,
          out_dir, warm_start=None, on_step=None) -> TrainResult:
    """Optimize a model on a paired dataset; writes checkpoints and a loss log.

    ``on_step(step_idx, weights)`` runs after each optimizer step (diagnostics).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = SequenceDataset(data_dir)
    rng = np.random.default_rng(train_cfg.seed)

    if warm_start is not None:
        weights = cell_mod.load_weights(warm_start, model_cfg)
    else:
        weights = cell_mod.init_weights(model_cfg, seed=train_cfg.seed)
    weights.set_requires_grad(True)
    params = dict(weights.items())
    adam = AdamState.initial(params)
    head = f"offset.conv{len(dap.OFFSET_PLAN) - 1}"
    offset_scales = {name: (train_cfg.offset_head_lr_scale if head in name
                            else train_cfg.offset_lr_scale)
                     for name in params if ".offset." in name}

    # fixed eval batch: the leading window of up to 4 sequences
    eval_windows = [dataset.window(i, 0, train_cfg.unroll)
                    for i in range(min(4, len(dataset.sequences)))]

    schedule = list(train_cfg.lr_schedule)
    lr_idx = 0
    best_eval = None
    stale_evals = 0
    log = []
    checkpoints = []
    first_loss = None
    last_good = out / "last_good.dapw"

    for step_idx in range(train_cfg.max_steps):
        lr = schedule[lr_idx]
        weights.zero_grads()
        batch_loss = 0.0
        for _ in range(train_cfg.batch):
            lr_np, hr_np = dataset.sample_window(rng, train_cfg.unroll)
            if train_cfg.augment:
                hr_np, lr_np = degrade_mod.augment_pair(hr_np, lr_np, model_cfg.r,
                                                        train_cfg.crop_hr, rng)
            lt = [T.tensor(f) for f in lr_np]
            ht = [T.tensor(f) for f in hr_np]
            loss = unrolled_loss(lt, ht, weights, model_cfg, train_cfg.beta)
            batch_loss += float(loss.data)
            T.backward(loss, np.asarray(1.0 / train_cfg.batch, dtype=loss.data.dtype))
        batch_loss /= train_cfg.batch

        if not np.isfinite(batch_loss):
            cell_mod.save_weights(weights, last_good)
            raise NumericError(f"non-finite loss at step {step_idx}; "
                               f"last-good checkpoint at {last_good}")
        if first_loss is None:
            first_loss = batch_loss

        grads = {name: p.grad for name, p in params.items()}
        clip_gradients(grads, train_cfg.clip_norm)
        frozen = step_idx < train_cfg.offset_warmup_steps
        scales = ({name: 0.0 for name in offset_scales} if frozen else offset_scales)
        adam_step(params, grads, adam, lr, lr_scales=scales)
        log.append((step_idx, batch_loss, lr))
        if on_step is not None:
            on_step(step_idx, weights)

        if train_cfg.checkpoint_every and (step_idx + 1) % train_cfg.checkpoint_every == 0:
            path = out / f"ckpt_{step_idx + 1}.dapw"
            cell_mod.save_weights(weights, path)
            checkpoints.append(path)

        if train_cfg.eval_every and (step_idx + 1) % train_cfg.eval_every == 0:
            eval_loss = evaluate(eval_windows, weights, model_cfg, train_cfg.beta)
            if best_eval is None or eval_loss < best_eval - train_cfg.plateau_min_delta:
                best_eval = eval_loss
                stale_evals = 0
            else:
                stale_evals += 1
                if stale_evals >= train_cfg.plateau_patience and lr_idx < len(schedule) - 1:
                    lr_idx += 1
                    stale_evals = 0

        if (train_cfg.stop_loss_ratio is not None and first_loss > 0
                and step_idx + 1 >= train_cfg.min_steps
                and batch_loss <= train_cfg.stop_loss_ratio * first_loss):
            break

    final = out / "final.dapw"
    cell_mod.save_weights(weights, final)
    checkpoints.append(final)
    with open(out / "loss_log.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss", "lr"])
        writer.writerows(log)
    final_eval = evaluate(eval_windows, weights, model_cfg, train_cfg.beta)
    return TrainResult(weights=weights, log=log, final_eval_loss=final_eval,
                       checkpoints=checkpoints)
