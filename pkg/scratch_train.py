"""Scratch calibration for toy training (not part of the package)."""
import sys
import time
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, "src")
from dapvsr import cell, degrade, frames, metrics, trainer, analysis


def shaded_checkerboard(rng, h, w, cell_px):
    cy, cx = h // cell_px + 2, w // cell_px + 2
    shades = rng.uniform(0.15, 0.95, size=(3, cy, cx)).astype(np.float64)
    parity = ((np.arange(cy)[:, None] + np.arange(cx)[None, :]) % 2).astype(np.float64)
    cells = shades * (0.55 + 0.45 * parity[None])
    pattern = np.repeat(np.repeat(cells, cell_px, axis=1), cell_px, axis=2)
    return pattern[:, :h, :w].astype(np.float32)


def translating_sequence(rng, hr_size, n_frames, v_hr, cell_px=16, pattern=None):
    """frame_t(p) = pattern(p + t * v_hr), v_hr in HR pixels per frame;
    matching offsets come out at +v_hr/4 LR pixels."""
    vhx, vhy = v_hr
    pad_x = abs(vhx) * (n_frames - 1)
    pad_y = abs(vhy) * (n_frames - 1)
    if pattern is None:
        pattern = shaded_checkerboard(rng, hr_size + pad_y, hr_size + pad_x, cell_px)
    big = pattern
    ox = pad_x if vhx < 0 else 0
    oy = pad_y if vhy < 0 else 0
    out = []
    for t in range(n_frames):
        y0 = oy + t * vhy
        x0 = ox + t * vhx
        out.append(np.ascontiguousarray(big[:, y0:y0 + hr_size, x0:x0 + hr_size]))
    return out


def make_dataset(root, rng, n_seq=4, hr=64, n_frames=8, cell_px=16):
    root = Path(root)
    # rightward pan around 8 HR px/frame; sub-pixel LR phases make aligned
    # temporal fusion genuinely informative
    vels = [(9, 0), (7, 0), (9, 1), (8, 0)]
    pad = 9 * (n_frames - 1)
    pattern = shaded_checkerboard(rng, hr + pad, hr + pad, cell_px)
    for s in range(n_seq):
        v = vels[s % len(vels)]
        hr_frames = translating_sequence(rng, hr, n_frames, v, pattern=pattern)
        lr_frames = [degrade.degrade_bd(f) for f in hr_frames]
        names = [f"{t:03d}.png" for t in range(n_frames)]
        frames.save_sequence(root / f"seq{s}" / "hr", hr_frames, names)
        frames.save_sequence(root / f"seq{s}" / "lr", lr_frames, names)


def main():
    tmp = Path(tempfile.mkdtemp())
    rng = np.random.default_rng(7)
    print("dataset ->", tmp)
    make_dataset(tmp / "train", rng, n_seq=6)

    cfg = cell.preset("toy")
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
    lr0 = float(sys.argv[2]) if len(sys.argv) > 2 else 2e-4
    scale = float(sys.argv[3]) if len(sys.argv) > 3 else 0.3
    warmup = int(sys.argv[4]) if len(sys.argv) > 4 else 0
    tcfg = trainer.TrainConfig(unroll=3, batch=1, lr_schedule=(lr0, lr0 / 2, lr0 / 10),
                               max_steps=steps, crop_hr=64, seed=1,
                               eval_every=100, checkpoint_every=0,
                               offset_lr_scale=scale, offset_warmup_steps=warmup)
    t0 = time.perf_counter()
    res = trainer.train(tmp / "train", cfg, tcfg, tmp / "run")
    dt = time.perf_counter() - t0
    log = res.log
    print(f"{len(log)} steps in {dt:.1f}s -> {dt / len(log) * 1000:.0f} ms/step")
    print("loss[0] =", log[0][1])
    losses = [l for _, l, _ in log]
    w = 25
    smooth = [float(np.mean(losses[max(0, i - w):i + 1])) for i in range(len(losses))]
    for i in range(0, len(log), max(1, len(log) // 12)):
        print(f"  step {log[i][0]:4d} loss {log[i][1]:.5f} smooth {smooth[i]:.5f}")
    print(f"  final loss {losses[-1]:.5f} smooth {smooth[-1]:.5f} "
          f"ratio {min(losses) / losses[0]:.3f}")

    # held-out eval: model vs bicubic ((8,0) HR px/frame == (2,0) LR px/frame)
    hold = translating_sequence(np.random.default_rng(99), 64, 8, (8, 0), 16)
    lr_hold = [degrade.degrade_bd(f) for f in hold]
    outs = list(cell.run_sequence(lr_hold, res.weights, cfg))
    ps_model = [metrics.psnr(g, np.clip(y.data, 0, 1)) for g, y in zip(hold, outs)]
    ps_bic = [metrics.psnr(g, np.clip(degrade.bicubic_upsample(l), 0, 1))
              for g, l in zip(hold, lr_hold)]
    print(f"model PSNR {np.mean(ps_model):.2f} vs bicubic {np.mean(ps_bic):.2f} "
          f"(+{np.mean(ps_model) - np.mean(ps_bic):.2f} dB)")

    # offsets on a (2,0) translation
    gridlist = []
    sink = lambda t, g: gridlist.append(g)
    list(cell.run_sequence(lr_hold, res.weights, cfg, offset_sink=sink))
    hist = analysis.offset_histograms(gridlist[1:], scale_to_hr=4)  # skip self-paired t=0
    print("offset 2D mode:", hist.mode_2d, "(want ~(8,0))")
    mags = np.concatenate([analysis.offset_magnitudes(g, 4) for g in gridlist[1:]])
    print("median |offset| HR:", np.median(mags))


if __name__ == "__main__":
    main()
