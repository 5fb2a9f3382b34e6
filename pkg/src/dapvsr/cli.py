"""Unified command-line surface.

Subcommands: ``sr``, ``degrade``, ``metrics``, ``profile``, ``train-toy``,
``analyze-offsets``, ``propagate``, ``gradcheck``, ``selftest``. Exit codes:
2 bad arguments, 3 I/O failure, 4 shape/config mismatch, 5 numeric failure.
``DAP_THREADS`` caps internal parallelism (0 = deterministic single-threaded).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis as analysis_mod
from . import cell as cell_mod
from . import degrade as degrade_mod
from . import frames as frames_mod
from . import metrics as metrics_mod
from . import tensor as T
from . import trainer as trainer_mod
from .errors import NumericError, ShapeError, WeightsFormatError

EXIT_BAD_ARGS = 2
EXIT_IO = 3
EXIT_SHAPE = 4
EXIT_NUMERIC = 5


def thread_count() -> int:
    try:
        return max(0, int(os.environ.get("DAP_THREADS", "0") or 0))
    except ValueError:
        return 0


def _load_model(args):
    cfg = cell_mod.ModelConfig.from_json(args.config) if args.config else None
    weights = cell_mod.load_weights(args.weights, cfg)
    return weights.cfg, weights


# ---------------------------------------------------------------------------
# sr
# ---------------------------------------------------------------------------

def cmd_sr(args) -> int:
    cfg, weights = _load_model(args)
    in_dir = Path(args.in_dir)
    names = sorted(p.name for p in in_dir.glob("*.png"))
    if not names:
        raise FileNotFoundError(f"no PNG frames in {in_dir}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    dump_dir = None
    if args.dump_offsets:
        dump_dir = Path(args.dump_offsets)
        dump_dir.mkdir(parents=True, exist_ok=True)

    def offset_sink(t, grid):
        if grid is None:
            return
        stem = Path(names[t]).stem
        path = dump_dir / f"{stem}_offsets.rten"
        T.write_rten(path, grid)
        with open(f"{path}.json", "w") as f:
            json.dump({"schema_version": cell_mod.SCHEMA_VERSION, "frame_index": t,
                       "level": 0, "units": "lr_pixels", "scale_to_hr": cfg.r}, f)

    source = (frames_mod.load_frame(in_dir / n) for n in names)
    outputs = cell_mod.run_sequence(
        source, weights, cfg, mode=args.mode, reinit_every=args.reinit_every,
        offset_sink=offset_sink if dump_dir is not None else None)

    count = 0
    t_start = time.perf_counter()
    while True:
        t0 = time.perf_counter()
        try:
            y = next(outputs)
        except StopIteration:
            break
        ms = (time.perf_counter() - t0) * 1000.0
        frames_mod.save_frame(out_dir / frames_mod.output_name(names[count]), y.data)
        print(f"frame {count}: {ms:.1f} ms")
        count += 1
    total_s = time.perf_counter() - t_start
    print(f"{count} frames in {total_s:.2f} s -> {count / total_s:.2f} fps")
    return 0


# ---------------------------------------------------------------------------
# degrade
# ---------------------------------------------------------------------------

def cmd_degrade(args) -> int:
    spec = degrade_mod.DegradeSpec(mode=args.mode, sigma=args.sigma,
                                   kernel_size=args.ksize, scale=args.scale)
    seq = frames_mod.load_sequence(args.in_dir)
    workers = thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            lr = list(pool.map(lambda f: degrade_mod.degrade(f, spec), seq.frames))
    else:
        lr = [degrade_mod.degrade(f, spec) for f in seq.frames]
    frames_mod.save_sequence(args.out_dir, lr, seq.names)
    print(f"degraded {len(lr)} frames ({args.mode}) -> {args.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def cmd_metrics(args) -> int:
    gt = frames_mod.load_sequence(args.gt)
    pred = frames_mod.load_sequence(args.pred)
    report = metrics_mod.sequence_metrics(gt.frames, pred.frames,
                                          color_space=args.space,
                                          crop_border=args.crop_border)
    payload = report.to_dict()
    print(json.dumps(payload, indent=2))
    if args.out_json:
        with open(args.out_json, "w") as f:
            json.dump(payload, f, indent=2)
    if args.out_csv:
        with open(args.out_csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["frame", "psnr", "ssim"])
            for i, (p, s) in enumerate(zip(payload["psnr"], payload["ssim"])):
                writer.writerow([i, p, s])
    return 0


# ---------------------------------------------------------------------------
# profile
# ---------------------------------------------------------------------------

def cmd_profile(args) -> int:
    cfg, weights = _load_model(args)
    rng = np.random.default_rng(0)
    frame_list = [rng.random((3, args.height, args.width)).astype(np.float32)
                  for _ in range(2)]
    runtime = metrics_mod.profile_runtime(cfg, weights, frame_list,
                                          warmup=args.warmup, iters=args.iters,
                                          hw_note=args.hw_note)
    complexity = metrics_mod.analyze_complexity(cfg, args.height, args.width)
    print(json.dumps({"schema_version": cell_mod.SCHEMA_VERSION,
                      "runtime": runtime,
                      "complexity": complexity.to_dict()}, indent=2))
    return 0


# ---------------------------------------------------------------------------
# train-toy
# ---------------------------------------------------------------------------

def cmd_train_toy(args) -> int:
    model_cfg = (cell_mod.ModelConfig.from_json(args.model_config)
                 if args.model_config else cell_mod.preset("toy"))
    train_cfg = (trainer_mod.TrainConfig.from_json(args.train_config)
                 if args.train_config else trainer_mod.TrainConfig(unroll=3, max_steps=50,
                                                                   crop_hr=64))
    result = trainer_mod.train(args.data, model_cfg, train_cfg, args.out,
                               warm_start=args.warm_start)
    last_step, last_loss, last_lr = result.log[-1]
    print(f"trained {last_step + 1} steps; final loss {last_loss:.6f} @ lr {last_lr}")
    print(f"final eval loss {result.final_eval_loss:.6f}")
    print(f"checkpoints: {[str(p) for p in result.checkpoints]}")
    return 0


# ---------------------------------------------------------------------------
# analyze-offsets / propagate
# ---------------------------------------------------------------------------

def cmd_analyze_offsets(args) -> int:
    dump_dir = Path(args.dumps)
    paths = sorted(dump_dir.glob("*.rten"))
    if not paths:
        raise FileNotFoundError(f"no offset dumps in {dump_dir}")
    scale = None
    grids = []
    for p in paths:
        sidecar = Path(f"{p}.json")
        if not sidecar.exists():
            raise ShapeError(f"{p.name}: missing scale metadata sidecar")
        with open(sidecar) as f:
            meta = json.load(f)
        if "scale_to_hr" not in meta:
            raise ShapeError(f"{p.name}: sidecar lacks scale_to_hr")
        if scale is None:
            scale = float(meta["scale_to_hr"])
        elif scale != float(meta["scale_to_hr"]):
            raise ShapeError(f"{p.name}: inconsistent scale_to_hr")
        grids.append(T.read_rten(p))
    hist = analysis_mod.offset_histograms(grids, scale_to_hr=scale)
    with open(args.out, "w") as f:
        json.dump(hist.to_dict(), f)
    print(f"{hist.total} samples over {len(grids)} dumps -> {args.out}; "
          f"2D mode at {hist.mode_2d} HR px")
    return 0


def cmd_propagate(args) -> int:
    cfg, weights = _load_model(args)
    lr = frames_mod.load_sequence(args.seq)
    gt = frames_mod.load_sequence(args.gt)
    rows = analysis_mod.propagation_study(lr.frames, gt.frames, weights, cfg,
                                          interval=args.interval)
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["start", "frame", "psnr"])
        writer.writerows(rows)
    print(f"{len(rows)} curve points -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck / selftest
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    failed = False
    for op_id in sorted(T.GRADCHECK_CASES):
        report = T.gradcheck(op_id, trials=args.trials, tolerance=args.tolerance)
        status = "PASS" if report.passed else "FAIL"
        print(f"{status} {op_id}: max rel err {report.max_rel_err:.3e} "
              f"(tol {report.tolerance:.0e}, {report.trials} trials)")
        failed |= not report.passed
    return 1 if failed else 0


def _selftest_checks():
    rng = np.random.default_rng(0)

    def gradcheck_suite():
        worst = 0.0
        for i, op_id in enumerate(sorted(T.GRADCHECK_CASES)):
            worst = max(worst, T.gradcheck(op_id, trials=5, seed=i).max_rel_err)
        return worst, worst < 1e-4

    def attention_normalization():
        from . import dap
        worst = 0.0
        for _ in range(50):
            q = T.tensor(rng.standard_normal((8, 4, 4)).astype(np.float32))
            k = T.tensor(rng.standard_normal((4, 8, 4, 4)).astype(np.float32))
            with T.no_grad():
                wts = dap.attention_weights(q, k).data
            worst = max(worst, float(np.abs(wts.sum(axis=1) - 1.0).max()))
            worst = max(worst, float(max(0.0 - wts.min(), wts.max() - 1.0, 0.0)))
        return worst, worst < 1e-6

    def shuffle_roundtrip():
        worst = 0.0
        for _ in range(20):
            x = T.tensor(rng.standard_normal((48, 3, 5)).astype(np.float32))
            with T.no_grad():
                back = T.pixel_unshuffle(T.pixel_shuffle(x, 4), 4).data
            worst = max(worst, float(np.abs(back - x.data).max()))
        return worst, worst == 0.0

    def analyzer_parity():
        worst = 0
        for name in ("ablation1", "ablation2", "ablation3", "ablation4",
                     "dap64", "dap128"):
            cfg = cell_mod.preset(name)
            weights = cell_mod.init_weights(cfg, seed=0)
            counters = metrics_mod.measure_step_counters(cfg, weights, 8, 8)
            report = metrics_mod.analyze_complexity(cfg, 8, 8)
            worst = max(worst, abs(report.total_macs - counters.macs),
                        abs(report.total_flops - counters.flops))
        return float(worst), worst == 0

    return [("gradcheck_suite", gradcheck_suite),
            ("attention_normalization", attention_normalization),
            ("pixel_shuffle_roundtrip", shuffle_roundtrip),
            ("analyzer_parity", analyzer_parity)]


def cmd_selftest(args) -> int:
    failed = False
    for name, check in _selftest_checks():
        err, ok = check()
        print(f"{'PASS' if ok else 'FAIL'} {name}: max error {err:.3e}")
        failed |= not ok
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dapvsr",
                                     description="Streaming causal x4 video super-resolution")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sr", help="super-resolve a directory of LR frames")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--config", default=None, help="model config JSON (default: weights sidecar)")
    p.add_argument("--mode", choices=("forward", "reverse"), default="forward")
    p.add_argument("--reinit-every", type=int, default=None)
    p.add_argument("--dump-offsets", default=None)
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("degrade", help="produce LR frames from HR ground truth")
    p.add_argument("--mode", choices=("bd", "bi"), default="bd")
    p.add_argument("--sigma", type=float, default=1.6)
    p.add_argument("--ksize", type=int, default=13)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two frame directories")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--space", choices=("rgb", "y"), default="rgb")
    p.add_argument("--crop-border", type=int, default=0)
    p.add_argument("--out-json", default=None)
    p.add_argument("--out-csv", default=None)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("profile", help="runtime and complexity for one config")
    p.add_argument("--weights", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--hw-note", default="")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("train-toy", help="desk-scale training run")
    p.add_argument("--data", required=True)
    p.add_argument("--model-config", default=None)
    p.add_argument("--train-config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--warm-start", default=None)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("analyze-offsets", help="histogram dumped offset fields")
    p.add_argument("--dumps", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_offsets)

    p = sub.add_parser("propagate", help="cold-start PSNR curves")
    p.add_argument("--seq", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--interval", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="release-gate numerical checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_BAD_ARGS
    try:
        return args.func(args)
    except (ShapeError, WeightsFormatError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SHAPE
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"invalid arguments: {e}", file=sys.stderr)
        return EXIT_BAD_ARGS
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
