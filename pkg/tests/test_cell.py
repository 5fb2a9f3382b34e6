"""Recurrent cell: IMDN blocks, single steps, sequence runs, serialization."""

import numpy as np
import pytest

from dapvsr import cell, dap
from dapvsr import tensor as T
from dapvsr.errors import NumericError, ShapeError, WeightsFormatError

from oracles import imdn_block_loops, max_rel_err


@pytest.fixture
def rng():
    return np.random.default_rng(9)


def toy_cfg():
    return cell.preset("toy")


def rand_frame(rng, h=16, w=16):
    return T.tensor(rng.random((3, h, w)).astype(np.float32))


class TestIMDNBlock:
    def rand_block(self, rng, n):
        def layer(cout, cin, k):
            return T.ConvLayer(
                T.Tensor((rng.standard_normal((cout, cin, k, k)) * 0.1).astype(np.float32)),
                T.Tensor((rng.standard_normal(cout) * 0.05).astype(np.float32)))
        return cell.IMDNBlock(
            convs=[layer(n, n, 3), layer(n, 3 * n // 4, 3),
                   layer(n, 3 * n // 4, 3), layer(n // 4, 3 * n // 4, 3)],
            fuse=layer(n, n, 1))

    def test_zero_input_zero_bias_gives_zero(self, rng):
        n = 8
        block = self.rand_block(rng, n)
        for layer in block.convs + [block.fuse]:
            layer.bias.data[:] = 0.0
        out = cell.imdn_block(T.tensor(np.zeros((n, 4, 4), dtype=np.float32)), block)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_zero_fuse_conv_is_pure_residual(self, rng):
        n = 8
        block = self.rand_block(rng, n)
        block.fuse.weight.data[:] = 0.0
        block.fuse.bias.data[:] = 0.0
        x = T.tensor(rng.random((n, 4, 4)).astype(np.float32))
        out = cell.imdn_block(x, block)
        np.testing.assert_array_equal(out.data, x.data)

    def test_matches_loop_oracle(self, rng):
        n = 8
        for _ in range(3):
            block = self.rand_block(rng, n)
            x = rng.standard_normal((n, 4, 4)).astype(np.float32)
            got = cell.imdn_block(T.tensor(x), block).data
            want = imdn_block_loops(
                x, [l.weight.data for l in block.convs],
                [l.bias.data for l in block.convs],
                block.fuse.weight.data, block.fuse.bias.data)
            assert max_rel_err(got, want) < 1e-5

    def test_indivisible_channels_rejected(self, rng):
        block = self.rand_block(rng, 8)
        with pytest.raises(ShapeError):
            cell.imdn_block(T.tensor(np.zeros((6, 4, 4), dtype=np.float32)), block)


class TestStep:
    def test_zero_weights_reduce_to_nearest_upsample(self, rng):
        cfg = toy_cfg()
        w = cell.zero_weights(cfg)
        x = rand_frame(rng)
        h = cell.HiddenState.initial(cfg.n, 16, 16)
        with T.no_grad():
            y, h_new = cell.step(x, x, h, w, cfg)
        ref = np.repeat(np.repeat(x.data, 4, axis=1), 4, axis=2)
        np.testing.assert_array_equal(y.data, ref)
        np.testing.assert_array_equal(h_new.map.data, 0.0)

    def test_first_frame_self_pairing_runs(self, rng):
        cfg = toy_cfg()
        w = cell.init_weights(cfg, seed=0)
        x = rand_frame(rng)
        h = cell.HiddenState.initial(cfg.n, 16, 16)
        with T.no_grad():
            y, h_new = cell.step(x, x, h, w, cfg)
        assert np.all(np.isfinite(y.data))
        assert h_new.step_index == 1

    def test_output_dims_dap64(self, rng):
        cfg = cell.preset("dap64")
        w = cell.init_weights(cfg, seed=0)
        x = rand_frame(rng)
        h = cell.HiddenState.initial(64, 16, 16)
        with T.no_grad():
            y, h_new = cell.step(x, x, h, w, cfg)
        assert y.dims == (3, 64, 64)
        assert h_new.map.dims == (64, 16, 16)

    def test_hidden_state_matters(self, rng):
        """The recurrence is non-degenerate: different h_prev, different output."""
        cfg = toy_cfg()
        w = cell.init_weights(cfg, seed=0)
        x = rand_frame(rng)
        h_zero = cell.HiddenState.initial(cfg.n, 16, 16)
        h_rand = cell.HiddenState(T.tensor(rng.standard_normal((cfg.n, 16, 16))
                                           .astype(np.float32)))
        with T.no_grad():
            y0, _ = cell.step(x, x, h_zero, w, cfg)
            y1, _ = cell.step(x, x, h_rand, w, cfg)
        assert float(np.abs(y0.data - y1.data).max()) > 0.0

    def test_out_of_range_values_rejected(self, rng):
        cfg = toy_cfg()
        w = cell.init_weights(cfg, seed=0)
        h = cell.HiddenState.initial(cfg.n, 16, 16)
        bad = T.Tensor(np.full((3, 16, 16), 1.5, dtype=np.float32))
        with pytest.raises(NumericError):
            cell.step(bad, bad, h, w, cfg)

    def test_hidden_dims_checked(self, rng):
        cfg = toy_cfg()
        w = cell.init_weights(cfg, seed=0)
        x = rand_frame(rng)
        with pytest.raises(ShapeError):
            cell.step(x, x, cell.HiddenState.initial(cfg.n, 8, 8), w, cfg)

    def test_ablation1_never_touches_dap(self, rng):
        cfg = cell.preset("ablation1")
        w = cell.init_weights(cfg, seed=0)
        x = rand_frame(rng, 8, 8)
        h = cell.HiddenState.initial(cfg.n, 8, 8)
        counters = T.OpCounters()
        with T.no_grad(), T.counting(counters):
            cell.step(x, x, h, w, cfg)
        assert not any(k.startswith("dap") for k in counters.calls)
        assert not any(k.startswith("encoder") for k in counters.calls)

    def test_ablation_flags_change_weight_layout(self):
        names = {name for name, _ in cell.weight_layout(cell.preset("ablation2"))}
        assert "dap.l0.q" in names
        assert not any(".offset." in n for n in names)
        names3 = {name for name, _ in cell.weight_layout(cell.preset("ablation3"))}
        assert "dap.l0.offset.conv0" in names3
        assert "hidden.fuse" in names3
        assert not any(".k" == n[-2:] for n in names3)
        names4 = {name for name, _ in cell.weight_layout(cell.preset("ablation4"))}
        assert "dap.l0.fuse" in names4 and "dap.l3.offset.conv0" in names4

    def test_ablation_variants_run(self, rng):
        x = rand_frame(rng, 8, 8)
        for name in ("ablation1", "ablation2", "ablation3", "ablation4"):
            cfg = cell.preset(name)
            w = cell.init_weights(cfg, seed=0)
            h = cell.HiddenState.initial(cfg.n, 8, 8)
            with T.no_grad():
                y, h_new = cell.step(x, x, h, w, cfg)
            assert y.dims == (3, 32, 32)
            assert np.all(np.isfinite(y.data))


class TestRunSequence:
    def make_frames(self, rng, n, h=16, w=16):
        return [rng.random((3, h, w)).astype(np.float32) for _ in range(n)]

    def test_single_frame_forward_equals_reverse(self, rng):
        cfg = toy_cfg()
        w = cell.init_weights(cfg, seed=0)
        fr = self.make_frames(rng, 1)
        fwd = [y.data for y in cell.run_sequence(fr, w, cfg, "forward")]
        rev = [y.data for y in cell.run_sequence(fr, w, cfg, "reverse")]
        assert len(fwd) == len(rev) == 1
        np.testing.assert_array_equal(fwd[0], rev[0])

    def test_reverse_equals_forward_on_reversed(self, rng):
        cfg = toy_cfg()
        w = cell.init_weights(cfg, seed=0)
        fr = self.make_frames(rng, 5)
        rev = [y.data for y in cell.run_sequence(fr, w, cfg, "reverse")]
        ref = [y.data for y in cell.run_sequence(fr[::-1], w, cfg, "forward")][::-1]
        for a, b in zip(rev, ref):
            np.testing.assert_array_equal(a, b)

    def test_reinit_resets_step_index(self, rng):
        cfg = toy_cfg()
        w = cell.init_weights(cfg, seed=0)
        fr = self.make_frames(rng, 30)
        indices = [h.step_index
                   for _, h in cell.run_sequence(fr, w, cfg, reinit_every=10,
                                                 with_state=True)]
        # step_index restarts at frames 10 and 20
        assert indices[9] == 10 and indices[10] == 1
        assert indices[19] == 10 and indices[20] == 1
        assert indices[29] == 10

    def test_causality_emits_before_next_read(self, rng):
        """Forward mode must emit output t before frame t+1 is pulled."""
        cfg = toy_cfg()
        w = cell.init_weights(cfg, seed=0)
        events = []
        raw = self.make_frames(rng, 6)

        def source():
            for t, f in enumerate(raw):
                events.append(("read", t))
                yield f

        for t, _ in enumerate(cell.run_sequence(source(), w, cfg, "forward")):
            events.append(("emit", t))
        for t in range(1, len(raw)):
            assert events.index(("emit", t - 1)) < events.index(("read", t))

    def test_strict_causality_prefix_invariance(self, rng):
        """Outputs for frames 0..t are bit-identical whether or not later
        frames exist in the source."""
        cfg = toy_cfg()
        w = cell.init_weights(cfg, seed=0)
        fr = self.make_frames(rng, 6)
        full = [y.data for y in cell.run_sequence(fr, w, cfg, "forward")]
        short = [y.data for y in cell.run_sequence(fr[:3], w, cfg, "forward")]
        for a, b in zip(short, full[:3]):
            np.testing.assert_array_equal(a, b)

    def test_empty_source_rejected(self, rng):
        cfg = toy_cfg()
        w = cell.init_weights(cfg, seed=0)
        with pytest.raises(ValueError):
            list(cell.run_sequence([], w, cfg, "forward"))
        with pytest.raises(ValueError):
            list(cell.run_sequence(iter(()), w, cfg, "forward"))


class TestWeightsSerialization:
    def test_roundtrip_bit_identical(self, rng, tmp_path):
        cfg = toy_cfg()
        w = cell.init_weights(cfg, seed=123)
        path = tmp_path / "model.dapw"
        cell.save_weights(w, path)
        w2 = cell.load_weights(path)
        assert w2.cfg == cfg
        assert list(w.tensors) == list(w2.tensors)
        for name, t in w.items():
            np.testing.assert_array_equal(t.data, w2[name].data)

    def test_truncated_file_rejected(self, rng, tmp_path):
        cfg = toy_cfg()
        path = tmp_path / "model.dapw"
        cell.save_weights(cell.init_weights(cfg, seed=0), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(WeightsFormatError):
            cell.load_weights(path, cfg)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "model.dapw"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(WeightsFormatError):
            cell.load_weights(path, toy_cfg())

    def test_wrong_dims_named_in_error(self, rng, tmp_path):
        cfg = toy_cfg()
        w = cell.init_weights(cfg, seed=0)
        w.tensors["cell.agg.bias"] = T.Tensor(
            np.zeros(cfg.n + 1, dtype=np.float32), name="cell.agg.bias")
        path = tmp_path / "model.dapw"
        cell.save_weights(w, path)
        with pytest.raises(WeightsFormatError, match="cell.agg.bias"):
            cell.load_weights(path, cfg)

    def test_missing_tensor_named(self, rng, tmp_path):
        cfg = toy_cfg()
        w = cell.init_weights(cfg, seed=0)
        del w.tensors["cell.out.bias"]
        path = tmp_path / "model.dapw"
        cell.save_weights(w, path)
        with pytest.raises(WeightsFormatError, match="cell.out.bias"):
            cell.load_weights(path, cfg)

    def test_config_json_roundtrip(self, tmp_path):
        cfg = cell.preset("dap128")
        path = tmp_path / "cfg.json"
        cfg.save_json(path)
        assert cell.ModelConfig.from_json(path) == cfg


class TestModelConfig:
    def test_fixed_constants_validated(self):
        with pytest.raises(ShapeError):
            cell.ModelConfig(r=2)
        with pytest.raises(ShapeError):
            cell.ModelConfig(k=8)
        with pytest.raises(ShapeError):
            cell.ModelConfig(n=30)

    def test_presets_match_ablation_table(self):
        rows = {
            "ablation1": (False, False, False, 64),
            "ablation2": (False, False, True, 64),
            "ablation3": (True, False, False, 64),
            "ablation4": (True, True, False, 64),
            "ablation5": (True, True, True, 64),
            "ablation6": (True, True, True, 128),
        }
        for name, (off, pyr, attn, n) in rows.items():
            cfg = cell.preset(name)
            assert (cfg.offsets_enabled, cfg.pyramid_enabled,
                    cfg.attention_enabled, cfg.n) == (off, pyr, attn, n)

    def test_unknown_preset(self):
        with pytest.raises(KeyError):
            cell.preset("nope")
