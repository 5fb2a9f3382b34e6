"""Calibration: noisy-LR / clean-HR translating checkerboard."""
import sys
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, "src")
sys.path.insert(0, "tests")
from dapvsr import analysis, cell, degrade, metrics, trainer
from synth import build_dataset, noisy_lr, translating_sequence


def offset_health(weights, cfg, seq):
    grids = []
    sink = lambda t, g: grids.append(g)
    list(cell.run_sequence(seq, weights, cfg, offset_sink=sink))
    mags = np.concatenate([analysis.offset_magnitudes(g, 4.0) for g in grids[1:]])
    hist = analysis.offset_histograms(grids[1:], scale_to_hr=4.0)
    return float(np.median(mags)), hist.mode_2d


def main():
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1200
    noise = float(sys.argv[2]) if len(sys.argv) > 2 else 0.03
    smooth = float(sys.argv[3]) if len(sys.argv) > 3 else 1.0
    head_scale = float(sys.argv[4]) if len(sys.argv) > 4 else 2.0
    augment = bool(int(sys.argv[5])) if len(sys.argv) > 5 else False
    tmp = Path(tempfile.mkdtemp())
    rng = np.random.default_rng(7)
    vels = ((8, 0), (8, 0), (9, 0), (7, 0), (2, 0), (1, 0))
    build_dataset(tmp / "train", rng, n_seq=8, velocities=vels, cell_px=10,
                  smooth_sigma=smooth, lr_noise=noise)
    print(f"noise {noise} smooth {smooth} head {head_scale} augment {augment}")

    erng = np.random.default_rng(99)
    eval_gt = translating_sequence(erng, 64, 8, (8, 0), cell_px=10,
                                   smooth_sigma=smooth)
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
                               eval_every=100, plateau_patience=5,
                               checkpoint_every=0, offset_lr_scale=0.1,
                               offset_head_lr_scale=head_scale, augment=augment)
    result = trainer.train(tmp / "train", cfg, tcfg, tmp / "run", on_step=diag)

    losses = [l for _, l, _ in result.log]
    smoo = [float(np.mean(losses[max(0, i - 25):i + 1])) for i in range(len(losses))]
    for i in range(0, len(losses), max(1, len(losses) // 8)):
        print(f"step {i:5d} loss {losses[i]:.5f} smooth {smoo[i]:.5f}")
    print("loss0", losses[0], "min", min(losses), "RATIO", min(losses) / losses[0])

    outs = [np.clip(y.data, 0, 1) for y in cell.run_sequence(eval_lr, result.weights, cfg)]
    ps = np.mean([metrics.psnr(g, o) for g, o in zip(eval_gt, outs)])
    bic = np.mean([metrics.psnr(g, np.clip(degrade.bicubic_upsample(l), 0, 1))
                   for g, l in zip(eval_gt, eval_lr)])
    print(f"model {ps:.2f} vs bicubic {bic:.2f} ({ps - bic:+.2f} dB)")
    med, mode = offset_health(result.weights, cfg, eval_lr)
    print("final offsets: median", med, "mode", mode)
    # offsets on a clean translation sequence too
    clean_gt = translating_sequence(np.random.default_rng(55), 64, 8, (8, 0),
                                    cell_px=10, smooth_sigma=smooth)
    clean_lr = [degrade.degrade_bd(f) for f in clean_gt]
    med2, mode2 = offset_health(result.weights, cfg, clean_lr)
    print("clean-seq offsets: median", med2, "mode", mode2)


if __name__ == "__main__":
    main()
