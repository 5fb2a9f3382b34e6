"""Probe the loss gradient w.r.t. the level-0 offset grid directly."""
import sys
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, "src")
sys.path.insert(0, "tests")
from dapvsr import cell, degrade, trainer, tensor as T
from synth import build_dataset, translating_sequence


def probe_grid_gradient(weights, cfg, lr_frames, hr_frames, beta=0.01):
    """Gradient of the unrolled loss w.r.t. an injected level-0 offset grid."""
    # monkey-patch via probe: easier to just call the internals
    h = cell.HiddenState.initial(cfg.n, *lr_frames[0].dims[1:])
    x_prev = lr_frames[0]
    total = None
    grids = []
    for x, target in zip(lr_frames, hr_frames):
        s0, q0 = cell._frame_offsets(x, x_prev, weights, cfg)
        # replace predicted offsets by a leaf grid initialized at the预测 value
        leaf = T.Tensor(s0.grid.data.copy(), requires_grad=True)
        grids.append(leaf)
        s0 = cell.dap.OffsetField(0, leaf)
        from dapvsr import dap
        v_h = dap.fuse_hidden(q0, h.map, s0, weights.hidden_fusion())
        slope = cfg.leaky_slope
        agg = weights.layer("cell.agg")
        a = T.leaky_relu(T.conv2d(T.concat([x, v_h], axis=0), agg.weight, agg.bias), slope)
        for b in range(cell.IMDN_BLOCKS):
            a = cell.imdn_block(a, weights.imdn(b), slope)
        out_layer = weights.layer("cell.out")
        out = T.conv2d(a, out_layer.weight, out_layer.bias)
        y = T.add(T.pixel_shuffle(T.slice_channels(out, 0, 48), 4),
                  T.nearest_upsample(x, 4))
        h = cell.HiddenState(T.slice_channels(out, 48, 48 + cfg.n))
        term = T.smooth_l1(y, target, beta)
        total = term if total is None else T.add(total, term)
        x_prev = x
    T.backward(total)
    return [g.grad for g in grids], float(total.data)


def main():
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 400
    tmp = Path(tempfile.mkdtemp())
    rng = np.random.default_rng(7)
    build_dataset(tmp / "train", rng)
    cfg = cell.preset("toy")
    tcfg = trainer.TrainConfig(unroll=3, batch=1, lr_schedule=(1e-3, 5e-4, 1e-4),
                               max_steps=steps, crop_hr=64, seed=1,
                               eval_every=100, checkpoint_every=0,
                               offset_lr_scale=0.0)   # offsets frozen at zero
    res = trainer.train(tmp / "train", cfg, tcfg, tmp / "run")
    print("loss", res.log[0][1], "->", res.log[-1][1])

    # probe on several windows of the (9,0)-ish data: true offsets ~(2.25, 0)
    w = res.weights
    w.set_requires_grad(True)
    dx_means, dy_means, dx_stds = [], [], []
    for seed in range(6):
        prng = np.random.default_rng(100 + seed)
        gt = translating_sequence(prng, 64, 3, (9, 0))
        lr = [degrade.degrade_bd(f) for f in gt]
        lt = [T.tensor(f) for f in lr]
        ht = [T.tensor(f) for f in gt]
        grads, loss = probe_grid_gradient(w, cfg, lt, ht)
        for t, g in enumerate(grads):
            if g is None or t == 0:
                continue
            dx = g[0::2]
            dy = g[1::2]
            dx_means.append(dx.mean())
            dy_means.append(dy.mean())
            dx_stds.append(dx.std())
    print(f"d loss/d dx: mean {np.mean(dx_means):+.3e}  (per-window means: "
          f"{[f'{v:+.1e}' for v in dx_means[:6]]})")
    print(f"d loss/d dy: mean {np.mean(dy_means):+.3e}")
    print(f"per-pixel std {np.mean(dx_stds):.3e}; want mean dx < 0 (pull toward +x)")


if __name__ == "__main__":
    main()
