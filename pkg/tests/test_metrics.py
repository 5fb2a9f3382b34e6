"""PSNR/SSIM, luma conversion, complexity analysis, runtime profiling."""

import math

import numpy as np
import pytest

from dapvsr import cell, metrics
from dapvsr import tensor as T
from dapvsr.errors import ShapeError

from oracles import max_rel_err, ssim_loops


@pytest.fixture
def rng():
    return np.random.default_rng(60)


class TestPSNR:
    def test_identical_is_infinite(self, rng):
        a = rng.random((3, 8, 8)).astype(np.float32)
        assert metrics.psnr(a, a.copy()) == math.inf

    def test_uniform_one_over_255_error(self, rng):
        a = rng.random((3, 16, 16)).astype(np.float64) * 0.9
        b = a + 1.0 / 255.0
        got = metrics.psnr(a, b)
        want = 20.0 * np.log10(255.0)
        assert abs(got - want) < 1e-6
        assert abs(want - 48.1308) < 1e-3

    def test_matches_direct_formula(self, rng):
        a = rng.random((3, 8, 8))
        b = rng.random((3, 8, 8))
        mse = np.mean((a - b) ** 2)
        assert abs(metrics.psnr(a, b) - 10 * np.log10(1 / mse)) < 1e-9

    def test_symmetry_and_intensity_shift(self, rng):
        a = rng.random((3, 8, 8)) * 0.5
        b = rng.random((3, 8, 8)) * 0.5
        assert metrics.psnr(a, b) == metrics.psnr(b, a)
        assert abs(metrics.psnr(a, b) - metrics.psnr(a + 0.2, b + 0.2)) < 1e-9

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            metrics.psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


class TestRgbToY:
    def test_white(self):
        img = np.ones((3, 2, 2), dtype=np.float32)
        np.testing.assert_allclose(metrics.rgb_to_y(img), 235.0 / 255.0, atol=1e-5)

    def test_black(self):
        img = np.zeros((3, 2, 2), dtype=np.float32)
        np.testing.assert_allclose(metrics.rgb_to_y(img), 16.0 / 255.0, atol=1e-6)

    def test_gray_is_affine(self):
        vals = [0.0, 0.25, 0.5, 0.75, 1.0]
        ys = [float(metrics.rgb_to_y(np.full((3, 1, 1), v, dtype=np.float32))[0, 0, 0])
              for v in vals]
        diffs = np.diff(ys)
        np.testing.assert_allclose(diffs, diffs[0], rtol=1e-4)


class TestSSIM:
    def test_identical_is_one(self, rng):
        a = rng.random((3, 16, 16)).astype(np.float32)
        assert metrics.ssim(a, a.copy()) == 1.0

    def test_inverted_below_one(self, rng):
        a = rng.random((1, 16, 16)).astype(np.float32)
        assert metrics.ssim(a, 1.0 - a) < 1.0

    def test_matches_loop_oracle(self, rng):
        win = metrics.ssim_window()
        a = rng.random((1, 13, 13))
        b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
        got = metrics.ssim(a, b)
        want = ssim_loops(a, b, win)
        assert abs(got - want) < 1e-6

    def test_small_frames_rejected(self, rng):
        a = rng.random((1, 8, 8))
        with pytest.raises(ShapeError):
            metrics.ssim(a, a)

    def test_window_normalized(self):
        win = metrics.ssim_window()
        assert win.shape == (11, 11)
        assert abs(win.sum() - 1.0) < 1e-12


class TestSequenceMetrics:
    def test_report_fields_and_inf_rendering(self, rng):
        gt = [rng.random((3, 16, 16)).astype(np.float32) for _ in range(2)]
        report = metrics.sequence_metrics(gt, [g.copy() for g in gt], "rgb", 0)
        d = report.to_dict()
        assert d["psnr"] == ["inf", "inf"]
        assert d["mean_psnr"] == "inf"
        assert d["schema_version"] == 1
        np.testing.assert_allclose(d["ssim"], 1.0)

    def test_crop_border(self, rng):
        gt = [rng.random((3, 20, 20)).astype(np.float32)]
        pred = [gt[0].copy()]
        pred[0][:, 0, :] = 0.0  # damage the border only
        full = metrics.sequence_metrics(gt, pred, "rgb", 0)
        cropped = metrics.sequence_metrics(gt, pred, "rgb", 2)
        assert math.isfinite(full.psnr_per_frame[0])
        assert cropped.psnr_per_frame[0] == math.inf


class TestComplexity:
    def test_single_conv_closed_form(self):
        rep = metrics.analyze_complexity(cell.preset("dap64"), 16, 16)
        row = next(l for l in rep.layers if l.name == "dap.l0.q")
        assert row.macs == 8 * 8 * 1 * 256
        enc0 = next(l for l in rep.layers if l.name == "encoder.t.l0.conv1")
        assert enc0.macs == 8 * 8 * 9 * 256  # the spec's 147,456 example

    def test_totals_equal_sum_of_parts(self):
        rep = metrics.analyze_complexity(cell.preset("dap128"), 8, 8)
        assert rep.total_macs == sum(l.macs for l in rep.layers)
        assert rep.total_flops == sum(l.flops for l in rep.layers)

    @pytest.mark.parametrize("preset_name", ["ablation1", "ablation2", "ablation3",
                                             "ablation4", "dap64", "dap128"])
    def test_analyzer_matches_instrumentation_exactly(self, preset_name):
        cfg = cell.preset(preset_name)
        w = cell.init_weights(cfg, seed=0)
        counters = metrics.measure_step_counters(cfg, w, 8, 8)
        rep = metrics.analyze_complexity(cfg, 8, 8)
        assert rep.total_macs == counters.macs
        assert rep.total_softmax_flops == counters.softmax_flops
        assert rep.total_nonlin_flops == counters.nonlin_flops
        assert rep.total_flops == counters.flops

    def test_counts_invariant_to_content(self, rng):
        cfg = cell.preset("dap64")
        w = cell.init_weights(cfg, seed=0)
        c1 = metrics.measure_step_counters(cfg, w, 8, 8, seed=1)
        c2 = metrics.measure_step_counters(cfg, w, 8, 8, seed=2)
        assert c1.macs == c2.macs and c1.flops == c2.flops

    def test_dap128_table_parity(self):
        rep = metrics.analyze_complexity(cell.preset("dap128"), 180, 320)
        gmacs = rep.total_macs / 1e9
        assert abs(gmacs - 164.8) / 164.8 < 0.25

    def test_report_dict_schema(self):
        d = metrics.analyze_complexity(cell.preset("dap64"), 8, 8).to_dict()
        assert d["schema_version"] == 1
        assert d["total_macs"] == sum(l["macs"] for l in d["layers"])


class TestProfile:
    def test_fps_times_ms_is_1000(self, rng):
        cfg = cell.preset("toy")
        w = cell.init_weights(cfg, seed=0)
        frames = [rng.random((3, 16, 16)).astype(np.float32) for _ in range(2)]
        rep = metrics.profile_runtime(cfg, w, frames, warmup=1, iters=4)
        assert abs(rep["fps"] * rep["ms_per_frame"] - 1000.0) < 1e-6
        assert len(rep["per_frame_ms"]) == 4
        assert rep["schema_version"] == 1

    def test_larger_inputs_take_longer(self, rng):
        cfg = cell.preset("toy")
        w = cell.init_weights(cfg, seed=0)
        medians = []
        for size in (8, 16, 32):
            frames = [rng.random((3, size, size)).astype(np.float32)]
            rep = metrics.profile_runtime(cfg, w, frames, warmup=1, iters=5)
            medians.append(rep["ms_per_frame"])
        assert medians[0] < medians[2]
