"""Command-line surface: pipelines, exit codes, file formats."""

import json
import math

import numpy as np
import pytest
from PIL import Image

from dapvsr import cell, frames
from dapvsr import tensor as T
from dapvsr.cli import main

from synth import translating_sequence


@pytest.fixture
def rng():
    return np.random.default_rng(404)


@pytest.fixture
def small_setup(rng, tmp_path):
    """HR frames on disk plus saved toy weights."""
    hr_dir = tmp_path / "hr"
    seq = translating_sequence(rng, 64, 5, (8, 0))
    frames.save_sequence(hr_dir, seq, [f"{t:03d}.png" for t in range(5)])
    cfg = cell.preset("toy")
    weights = cell.init_weights(cfg, seed=0)
    wpath = tmp_path / "toy.dapw"
    cell.save_weights(weights, wpath)
    return tmp_path, hr_dir, wpath


class TestDegradeCommand:
    def test_bd_pipeline(self, small_setup):
        tmp, hr_dir, _ = small_setup
        rc = main(["degrade", "--mode", "bd", "--in", str(hr_dir),
                   "--out", str(tmp / "lr")])
        assert rc == 0
        outs = sorted((tmp / "lr").glob("*.png"))
        assert len(outs) == 5
        with Image.open(outs[0]) as im:
            assert im.size == (16, 16)

    def test_missing_input_dir_is_io_error(self, tmp_path):
        rc = main(["degrade", "--in", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "o")])
        assert rc == 3

    def test_bad_args_exit_2(self):
        assert main(["degrade", "--mode", "xx", "--in", "a", "--out", "b"]) == 2


class TestSrCommand:
    def test_outputs_and_dims(self, small_setup):
        tmp, hr_dir, wpath = small_setup
        main(["degrade", "--in", str(hr_dir), "--out", str(tmp / "lr")])
        rc = main(["sr", "--in", str(tmp / "lr"), "--out", str(tmp / "sr"),
                   "--weights", str(wpath)])
        assert rc == 0
        outs = sorted((tmp / "sr").glob("*.png"))
        assert len(outs) == 5
        with Image.open(outs[0]) as im:
            assert im.size == (64, 64)

    def test_dump_offsets_one_per_frame(self, small_setup):
        tmp, hr_dir, wpath = small_setup
        main(["degrade", "--in", str(hr_dir), "--out", str(tmp / "lr")])
        rc = main(["sr", "--in", str(tmp / "lr"), "--out", str(tmp / "sr"),
                   "--weights", str(wpath), "--dump-offsets", str(tmp / "offs")])
        assert rc == 0
        dumps = sorted((tmp / "offs").glob("*.rten"))
        assert len(dumps) == 5
        with open(f"{dumps[0]}.json") as f:
            meta = json.load(f)
        assert meta["units"] == "lr_pixels" and meta["scale_to_hr"] == 4
        assert meta["level"] == 0
        assert T.read_rten(dumps[0]).shape == (8, 16, 16)

    def test_reverse_mode_matches_manual_reversal(self, small_setup):
        tmp, hr_dir, wpath = small_setup
        main(["degrade", "--in", str(hr_dir), "--out", str(tmp / "lr")])
        main(["sr", "--in", str(tmp / "lr"), "--out", str(tmp / "rev"),
              "--weights", str(wpath), "--mode", "reverse"])
        # manually reverse the inputs, run forward, re-reverse the outputs
        lr = frames.load_sequence(tmp / "lr")
        weights = cell.load_weights(wpath)
        ref = [y.data for y in cell.run_sequence(lr.frames[::-1], weights,
                                                 weights.cfg, "forward")][::-1]
        outs = frames.load_sequence(tmp / "rev")
        for got, want in zip(outs.frames, ref):
            np.testing.assert_array_equal(frames.quantize(got),
                                          frames.quantize(np.clip(want, 0, 1)))

    def test_missing_weights_is_io_error(self, small_setup):
        tmp, hr_dir, _ = small_setup
        rc = main(["sr", "--in", str(hr_dir), "--out", str(tmp / "x"),
                   "--weights", str(tmp / "missing.dapw")])
        assert rc == 3

    def test_wrong_dims_is_shape_error(self, small_setup, rng):
        tmp, _, wpath = small_setup
        odd = tmp / "odd"
        frames.save_sequence(odd, [rng.random((3, 15, 15)).astype(np.float32)],
                             ["000.png"])
        rc = main(["sr", "--in", str(odd), "--out", str(tmp / "x"),
                   "--weights", str(wpath)])
        assert rc == 4

    def test_corrupt_weights_is_shape_error(self, small_setup):
        tmp, hr_dir, wpath = small_setup
        blob = wpath.read_bytes()
        wpath.write_bytes(blob[: len(blob) // 3])
        rc = main(["sr", "--in", str(hr_dir), "--out", str(tmp / "x"),
                   "--weights", str(wpath)])
        assert rc == 4


class TestMetricsCommand:
    def test_json_and_csv(self, small_setup, capsys):
        tmp, hr_dir, _ = small_setup
        rc = main(["metrics", "--gt", str(hr_dir), "--pred", str(hr_dir),
                   "--space", "y", "--out-json", str(tmp / "m.json"),
                   "--out-csv", str(tmp / "m.csv")])
        assert rc == 0
        payload = json.loads((tmp / "m.json").read_text())
        assert payload["psnr"] == ["inf"] * 5
        assert payload["schema_version"] == 1
        lines = (tmp / "m.csv").read_text().strip().splitlines()
        assert lines[0] == "frame,psnr,ssim"
        assert len(lines) == 6

    def test_crop_border_flag(self, small_setup):
        tmp, hr_dir, _ = small_setup
        assert main(["metrics", "--gt", str(hr_dir), "--pred", str(hr_dir),
                     "--crop-border", "4"]) == 0


class TestProfileCommand:
    def test_profile_json(self, small_setup, capsys):
        tmp, _, wpath = small_setup
        rc = main(["profile", "--weights", str(wpath), "--height", "16",
                   "--width", "16", "--iters", "3", "--warmup", "1",
                   "--hw-note", "test-box"])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["runtime"]["hw_note"] == "test-box"
        assert payload["complexity"]["total_macs"] > 0
        assert abs(payload["runtime"]["fps"] * payload["runtime"]["ms_per_frame"]
                   - 1000.0) < 1e-6


class TestAnalyzeOffsetsCommand:
    def test_histogram_output(self, small_setup):
        tmp, hr_dir, wpath = small_setup
        main(["degrade", "--in", str(hr_dir), "--out", str(tmp / "lr")])
        main(["sr", "--in", str(tmp / "lr"), "--out", str(tmp / "sr"),
              "--weights", str(wpath), "--dump-offsets", str(tmp / "offs")])
        rc = main(["analyze-offsets", "--dumps", str(tmp / "offs"),
                   "--out", str(tmp / "hist.json")])
        assert rc == 0
        payload = json.loads((tmp / "hist.json").read_text())
        assert payload["total"] == 5 * 4 * 16 * 16

    def test_missing_sidecar_is_shape_error(self, small_setup, rng):
        tmp, _, _ = small_setup
        dumps = tmp / "baredumps"
        dumps.mkdir()
        T.write_rten(dumps / "a.rten", rng.random((8, 4, 4)).astype(np.float32))
        rc = main(["analyze-offsets", "--dumps", str(dumps),
                   "--out", str(tmp / "h.json")])
        assert rc == 4


class TestPropagateCommand:
    def test_curves_csv(self, small_setup):
        tmp, hr_dir, wpath = small_setup
        main(["degrade", "--in", str(hr_dir), "--out", str(tmp / "lr")])
        rc = main(["propagate", "--seq", str(tmp / "lr"), "--gt", str(hr_dir),
                   "--weights", str(wpath), "--interval", "2",
                   "--out", str(tmp / "curves.csv")])
        assert rc == 0
        lines = (tmp / "curves.csv").read_text().strip().splitlines()
        assert lines[0] == "start,frame,psnr"
        assert len(lines) - 1 == 5 + 3 + 1


class TestSelftestCommand:
    def test_selftest_passes_on_fresh_build(self, capsys):
        assert main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 4

    def test_selftest_catches_injected_fault(self, capsys):
        T._fault_injection.add("conv2d_weight_grad_sign")
        try:
            assert main(["selftest"]) == 1
            assert "FAIL gradcheck_suite" in capsys.readouterr().out
        finally:
            T._fault_injection.discard("conv2d_weight_grad_sign")


class TestGradcheckCommand:
    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck", "--trials", "3"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out


class TestPngRoundTrip:
    def test_decode_encode_bit_exact(self, rng, tmp_path):
        arr = rng.random((3, 9, 7)).astype(np.float32)
        p1 = tmp_path / "a.png"
        frames.save_frame(p1, arr)
        decoded = frames.load_frame(p1)
        p2 = tmp_path / "b.png"
        frames.save_frame(p2, decoded)
        with Image.open(p1) as a, Image.open(p2) as b:
            assert np.array_equal(np.asarray(a), np.asarray(b))

    def test_quantization_rounds_half_away_from_zero(self):
        arr = np.array([[[0.5 / 255.0]], [[1.49 / 255.0]], [[1.5 / 255.0]]])
        q = frames.quantize(arr)
        assert q.ravel().tolist() == [1, 1, 2]

    def test_clamp_happens_at_write(self):
        arr = np.array([[[-0.4]], [[1.7]], [[0.25]]])
        q = frames.quantize(arr)
        assert q.ravel().tolist() == [0, 255, 64]
