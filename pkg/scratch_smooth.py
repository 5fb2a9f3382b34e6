"""Calibration of the smooth-texture convergence dataset (loss-ratio track)."""
import sys
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, "src")
sys.path.insert(0, "tests")
from dapvsr import cell, degrade, metrics, trainer
from synth import build_dataset, translating_sequence


def main():
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 700
    sigma = float(sys.argv[2]) if len(sys.argv) > 2 else 2.0
    tmp = Path(tempfile.mkdtemp())
    rng = np.random.default_rng(7)
    vels = ((8, 0), (9, 0), (7, 0))
    build_dataset(tmp / "train", rng, n_seq=3, velocities=vels, cell_px=16,
                  smooth_sigma=sigma)
    cfg = cell.preset("toy")
    tcfg = trainer.TrainConfig(unroll=3, batch=1, lr_schedule=(1e-3, 5e-4, 1e-4),
                               max_steps=steps, crop_hr=64, seed=1,
                               eval_every=100, plateau_patience=3,
                               checkpoint_every=0)
    res = trainer.train(tmp / "train", cfg, tcfg, tmp / "run")
    losses = [l for _, l, _ in res.log]
    for i in range(0, len(losses), max(1, len(losses) // 10)):
        print(f"step {i:5d} loss {losses[i]:.5f}")
    print("loss0", losses[0], "min", min(losses), "RATIO", min(losses) / losses[0])

    gains = []
    for seed, v in ((901, (8, 0)), (902, (9, 0))):
        gt = translating_sequence(np.random.default_rng(seed), 64, 8, v,
                                  smooth_sigma=sigma)
        lr = [degrade.degrade_bd(f) for f in gt]
        outs = [np.clip(y.data, 0, 1) for y in cell.run_sequence(lr, res.weights, cfg)]
        ps = np.mean([metrics.psnr(g, o) for g, o in zip(gt, outs)])
        bic = np.mean([metrics.psnr(g, np.clip(degrade.bicubic_upsample(l), 0, 1))
                       for g, l in zip(gt, lr)])
        gains.append(ps - bic)
        print(f"holdout {v}: model {ps:.2f} vs bicubic {bic:.2f} ({ps - bic:+.2f} dB)")
    print("mean gain", np.mean(gains))


if __name__ == "__main__":
    main()
