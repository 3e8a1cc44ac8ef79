import io

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from depa import formats
from depa.losses import embed_loss
from depa.pretrain import (Checkpoint, DecoderConfig, EncoderConfig, EncoderDecoder, PretrainConfig,
                           PretrainDiverged, decoder_forward, encoder_forward, load_checkpoint, pretrain,
                           random_checkpoint, save_checkpoint, write_loss_csv)
from depa.slicing import SliceConfig, TrainingSample

TINY_ENC = EncoderConfig(embed_dim=16, channels=(2, 3, 4))
TINY_DEC = DecoderConfig(channels=(4, 3, 2))
TINY_SLICE = SliceConfig(k=1, T=8, alpha=0.0, F=8)


def tiny_archive(n=10, seed=0):
    rng = np.random.default_rng(seed)
    return [TrainingSample(rng.normal(size=(16, 8)).astype(np.float32),
                           rng.normal(size=(8, 8)).astype(np.float32), "c", i) for i in range(n)]


class TestEmbedLoss:
    def test_identity_is_zero(self):
        m = np.random.default_rng(0).normal(size=(4, 5))
        assert float(embed_loss(m, m)) == 0.0

    def test_constant_offset(self):
        m = np.random.default_rng(0).normal(size=(96, 128))
        assert float(embed_loss(m, m + 2)) == pytest.approx(4.0, abs=1e-12)

    def test_worked_example(self):
        assert float(embed_loss([[0.0, 0.0]], [[3.0, 4.0]])) == pytest.approx(12.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            embed_loss(np.zeros((2, 2)), np.zeros((2, 3)))

    @given(st.lists(st.floats(-100, 100), min_size=4, max_size=4), st.lists(st.floats(-100, 100), min_size=4, max_size=4))
    def test_non_negative(self, a, b):
        assert float(embed_loss(np.reshape(a, (2, 2)), np.reshape(b, (2, 2)))) >= 0


@pytest.fixture(scope="module")
def full_model():
    return EncoderDecoder(EncoderConfig(), DecoderConfig(), 96, 128, seed=1).eval()


class TestArchitecture:
    def test_context_embeds_to_256(self, full_model):
        v = encoder_forward(full_model, np.random.default_rng(0).normal(size=(576, 128)))
        assert v.shape == (256,) and np.all(np.isfinite(v))

    def test_long_segment_same_dimension(self, full_model):
        assert encoder_forward(full_model, np.random.default_rng(0).normal(size=(1200, 128))).shape == (256,)

    def test_encoder_deterministic(self, full_model):
        x = np.random.default_rng(3).normal(size=(100, 128))
        assert encoder_forward(full_model, x).tobytes() == encoder_forward(full_model, x).tobytes()

    def test_decoder_output_shape(self, full_model):
        out = decoder_forward(full_model, np.random.default_rng(0).normal(size=256))
        assert out.shape == (96, 128) and np.all(np.isfinite(out))

    def test_decoder_shape_independent_of_values(self, full_model):
        for scale in (0.0, 1.0, 1e3):
            assert decoder_forward(full_model, np.full(256, scale)).shape == (96, 128)

    def test_decoder_rejects_wrong_width(self, full_model):
        with pytest.raises(ValueError):
            decoder_forward(full_model, np.zeros(255))

    def test_zero_parameters_give_zero_output(self):
        model = EncoderDecoder(TINY_ENC, TINY_DEC, 8, 8)
        with torch.no_grad():
            for p in model.decoder.parameters():
                p.zero_()
        out = decoder_forward(model, np.random.default_rng(0).normal(size=16))
        np.testing.assert_array_equal(out, 0.0)

    def test_three_blocks_each(self):
        model = EncoderDecoder(EncoderConfig(), DecoderConfig(), 96, 128)
        assert sum(isinstance(m, torch.nn.Conv2d) for m in model.encoder.blocks) == 3
        assert sum(isinstance(m, torch.nn.AvgPool2d) for m in model.encoder.blocks) == 3
        assert sum(isinstance(m, torch.nn.ConvTranspose2d) for m in model.decoder.blocks) == 3

    def test_too_short_segment(self):
        model = EncoderDecoder(TINY_ENC, TINY_DEC, 8, 8)
        with pytest.raises(ValueError, match="segment too short"):
            encoder_forward(model, np.zeros((7, 8)))

    @settings(max_examples=15, deadline=None)
    @given(st.integers(8, 2048))
    def test_embedding_width_constant_over_lengths(self, length):
        model = EncoderDecoder(EncoderConfig(embed_dim=256, channels=(2, 3, 4)), TINY_DEC, 8, 16)
        x = np.random.default_rng(length).normal(size=(length, 16))
        assert encoder_forward(model, x).shape == (256,)

    def test_non_multiple_of_eight_target(self):
        model = EncoderDecoder(TINY_ENC, TINY_DEC, 10, 12)
        assert decoder_forward(model, np.zeros(16)).shape == (10, 12)


class TestGradients:
    def test_matches_finite_differences(self, fd_check):
        torch.manual_seed(0)
        model = EncoderDecoder(TINY_ENC, TINY_DEC, 8, 8, seed=3).double().train()
        rng = np.random.default_rng(0)
        ctx = torch.as_tensor(rng.normal(size=(4, 16, 8)))
        ctr = torch.as_tensor(rng.normal(size=(4, 8, 8)))
        errors, skipped = fd_check(lambda: embed_loss(ctr, model(ctx)), model, 120, rng)
        assert len(errors) >= 100
        assert skipped < len(errors)
        assert errors.max() < 1e-3

    def test_small_step_decreases_batch_loss(self):
        rng = np.random.default_rng(1)
        for seed in range(20):
            model = EncoderDecoder(TINY_ENC, TINY_DEC, 8, 8, seed=seed).double().train()
            ctx = torch.as_tensor(rng.normal(size=(6, 16, 8)))
            ctr = torch.as_tensor(rng.normal(size=(6, 8, 8)))
            loss = embed_loss(ctr, model(ctx))
            model.zero_grad()
            loss.backward()
            with torch.no_grad():
                for p in model.parameters():
                    p -= 1e-4 * p.grad
            assert embed_loss(ctr, model(ctx)).item() < loss.item()


class TestTraining:
    def test_loss_trace_reproducible(self):
        cfg = PretrainConfig(epochs=5, batch_size=4, seed=7)
        a = pretrain(tiny_archive(), cfg, TINY_ENC, TINY_DEC, TINY_SLICE)
        b = pretrain(tiny_archive(), cfg, TINY_ENC, TINY_DEC, TINY_SLICE)
        assert a.loss_trace == b.loss_trace
        assert len(a.loss_trace) == 5 and a.epoch == 5
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_loss_decreases(self):
        ckpt = pretrain(tiny_archive(), PretrainConfig(epochs=40, batch_size=5), TINY_ENC, TINY_DEC, TINY_SLICE)
        assert ckpt.loss_trace[-1] < ckpt.loss_trace[0]

    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError):
            PretrainConfig(epochs=0)

    def test_empty_archive(self):
        with pytest.raises(ValueError):
            pretrain([], PretrainConfig(epochs=1), TINY_ENC, TINY_DEC, TINY_SLICE)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            pretrain(tiny_archive(), PretrainConfig(epochs=1), TINY_ENC, TINY_DEC, SliceConfig(k=2, T=8, F=8))

    def test_divergence_aborts_with_last_good_checkpoint(self):
        samples = tiny_archive(4)
        samples[2].center[0, 0] = np.inf
        with pytest.raises(PretrainDiverged, match="diverged") as info:
            pretrain(samples, PretrainConfig(epochs=3, batch_size=4), TINY_ENC, TINY_DEC, TINY_SLICE)
        assert info.value.checkpoint.epoch == 0
        assert all(np.all(np.isfinite(v)) for v in info.value.checkpoint.params.values())

    def test_loss_csv(self, tmp_path):
        write_loss_csv(tmp_path / "l.csv", [2.0, 1.5])
        assert (tmp_path / "l.csv").read_text().splitlines() == ["epoch,mean_loss", "1,2.0", "2,1.5"]


class TestCheckpoint:
    @pytest.fixture
    def ckpt(self):
        return pretrain(tiny_archive(), PretrainConfig(epochs=2, batch_size=4), TINY_ENC, TINY_DEC, TINY_SLICE)

    def test_round_trip_bit_exact(self, ckpt, tmp_path):
        save_checkpoint(ckpt, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert set(back.params) == set(ckpt.params)
        for k, v in ckpt.params.items():
            assert back.params[k].dtype == v.dtype
            assert back.params[k].tobytes() == v.tobytes()
        assert back.config == ckpt.config
        assert back.epoch == 2 and back.final_loss == ckpt.final_loss

    def test_forward_equivalence(self, ckpt, tmp_path):
        save_checkpoint(ckpt, tmp_path / "m.ckpt")
        x = np.random.default_rng(9).normal(size=(37, 8))
        a = encoder_forward(ckpt, x)
        b = encoder_forward(load_checkpoint(tmp_path / "m.ckpt"), x)
        assert a.tobytes() == b.tobytes()

    def test_bad_magic(self, ckpt, tmp_path):
        save_checkpoint(ckpt, tmp_path / "m.ckpt")
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        raw[:4] = b"XXXX"
        (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
        with pytest.raises(formats.FormatError, match="bad checkpoint"):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_truncated(self, ckpt, tmp_path):
        save_checkpoint(ckpt, tmp_path / "m.ckpt")
        (tmp_path / "t.ckpt").write_bytes((tmp_path / "m.ckpt").read_bytes()[:200])
        with pytest.raises(formats.FormatError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_version_mismatch(self, ckpt, tmp_path):
        buf = io.BytesIO()
        formats.write_container(buf, b"PRTN", {"config": ckpt.config, "epoch": 0, "final_loss": 0.0}, ckpt.params)
        raw = bytearray(buf.getvalue())
        raw[4:8] = (99).to_bytes(4, "little")
        (tmp_path / "v.ckpt").write_bytes(bytes(raw))
        with pytest.raises(formats.FormatError, match="version"):
            load_checkpoint(tmp_path / "v.ckpt")

    def test_header_layout(self, ckpt, tmp_path):
        save_checkpoint(ckpt, tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[:4] == b"DEPA" and raw[8:12] == b"PRTN"

    def test_random_checkpoint_is_untrained(self):
        c = random_checkpoint(TINY_SLICE, TINY_ENC, TINY_DEC, seed=5)
        assert c.epoch == 0 and c.embed_dim == 16
