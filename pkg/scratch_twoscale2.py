"""Calibration: two-scale texture + LR observation noise."""
import sys
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, "src")
sys.path.insert(0, "tests")
from dapvsr import analysis, cell, degrade, metrics, trainer
from synth import noisy_lr, save_pair, shaded_checkerboard, translating_sequence


def make_pattern(rng, size):
    return shaded_checkerboard(rng, size, size, cell_px=24, smooth_sigma=1.5,
                               fine_cell_px=6, fine_amp=0.12)


def make_data(root, rng, vels, n_frames=8, noise=0.03):
    pad = 9 * (n_frames - 1)
    for s, v in enumerate(vels):
        pattern = make_pattern(rng, 64 + pad)
        hr = translating_sequence(rng, 64, n_frames, v, pattern=pattern)
        save_pair(root, f"seq{s}", hr, lr_noise=noise, rng=rng)


def offset_health(weights, cfg, seq):
    grids = []
    sink = lambda t, g: grids.append(g)
    list(cell.run_sequence(seq, weights, cfg, offset_sink=sink))
    mags = np.concatenate([analysis.offset_magnitudes(g, 4.0) for g in grids[1:]])
    hist = analysis.offset_histograms(grids[1:], scale_to_hr=4.0)
    return float(np.median(mags)), hist.mode_2d


def main():
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1600
    noise = float(sys.argv[2]) if len(sys.argv) > 2 else 0.03
    mid = float(sys.argv[3]) if len(sys.argv) > 3 else 0.1
    head = float(sys.argv[4]) if len(sys.argv) > 4 else 2.0
    tmp = Path(tempfile.mkdtemp())
    rng = np.random.default_rng(11)
    vels = [(8, 0), (8, 0), (9, 0), (7, 0), (8, 1), (8, 0), (8, 0), (9, 0)]
    make_data(tmp / "train", rng, vels, noise=noise)
    print(f"two-scale noise {noise} mid {mid} head {head}")

    erng = np.random.default_rng(99)
    eval_gt = translating_sequence(erng, 64, 8, (8, 0),
                                   pattern=make_pattern(erng, 64 + 72))
    eval_lr = noisy_lr(eval_gt, erng, noise)
    cfg = cell.preset("toy")

    def diag(step, weights):
        if (step + 1) % 200 == 0:
            med, mode = offset_health(weights, cfg, eval_lr)
            print(f"  step {step + 1:5d} |off| median {med:8.3f} HR px, "
                  f"mode ({mode[0]:+.2f}, {mode[1]:+.2f})")

    tcfg = trainer.TrainConfig(unroll=3, batch=1,
                               lr_schedule=(1e-3, 5e-4, 1e-4),
                               max_steps=steps, crop_hr=64, seed=2,
                               eval_every=100, plateau_patience=4,
                               checkpoint_every=0, offset_lr_scale=mid,
                               offset_head_lr_scale=head, augment=False)
    result = trainer.train(tmp / "train", cfg, tcfg, tmp / "run", on_step=diag)

    losses = [l for _, l, _ in result.log]
    print("loss0", losses[0], "min", min(losses), "RATIO", min(losses) / losses[0])
    outs = [np.clip(y.data, 0, 1) for y in cell.run_sequence(eval_lr, result.weights, cfg)]
    ps = np.mean([metrics.psnr(g, o) for g, o in zip(eval_gt, outs)])
    bic = np.mean([metrics.psnr(g, np.clip(degrade.bicubic_upsample(l), 0, 1))
                   for g, l in zip(eval_gt, eval_lr)])
    print(f"model {ps:.2f} vs bicubic {bic:.2f} ({ps - bic:+.2f} dB)")
    med, mode = offset_health(result.weights, cfg, eval_lr)
    print("final offsets: median", med, "mode", mode)


if __name__ == "__main__":
    main()
