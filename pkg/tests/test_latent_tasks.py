import dataclasses

import numpy as np
import pytest
import torch

from clmt.errors import DataError, FreezeViolationError
from clmt.latent_tasks import (
    MaeModel,
    TranslatorModel,
    infer_sr,
    infer_translate,
    load_mae,
    load_translator,
    mae_complete,
    mae_expand,
    train_sr,
    train_translator,
    translate_latent,
)
from clmt.rvq import rvq_decode
from clmt.synthgen import Modality, StaticAttrs, downsample
from clmt.tokenizer import LatentSequence, PromptVector, TokenizerModel, decode, encode

from conftest import make_tiny_model_config


def _latents(n=12, d=8, seed=0, rate=16.0):
    g = torch.Generator().manual_seed(seed)
    return LatentSequence(torch.randn(n, d, generator=g), rate, Modality.PPG, conditioned=True)


class TestTranslator:
    def test_length_and_width_contract(self):
        model = TranslatorModel(make_tiny_model_config())
        z = _latents(17)
        out = translate_latent(z, PromptVector(torch.zeros(8)), model)
        assert out.shape == (17, 8)

    def test_deterministic_at_eval(self):
        model = TranslatorModel(make_tiny_model_config())
        z = _latents()
        p = PromptVector(torch.randn(8, generator=torch.Generator().manual_seed(1)))
        assert torch.equal(translate_latent(z, p, model), translate_latent(z, p, model))

    def test_zeroed_residual_branches_pass_input_through(self):
        model = TranslatorModel(make_tiny_model_config(tf_layers=2))
        with torch.no_grad():
            for block in model.blocks:
                block.attn.out_proj.weight.zero_()
                block.attn.out_proj.bias.zero_()
                block.ff[2].weight.zero_()
                block.ff[2].bias.zero_()
            model.head.weight.copy_(torch.eye(8))
            model.head.bias.zero_()
        z = _latents(9, seed=3)
        out = translate_latent(z, PromptVector(torch.randn(8)), model)
        assert torch.allclose(out, z.values, atol=1e-6)

    def test_width_mismatch_rejected(self):
        model = TranslatorModel(make_tiny_model_config())
        with pytest.raises(DataError):
            model(torch.zeros(1, 4, 16), torch.zeros(1, 16))


class TestMaeExpand:
    def test_factor_one_is_identity(self):
        model = MaeModel(make_tiny_model_config(sr_factor=1), high_fs_hz=64.0)
        z = _latents(10)
        out, mask = mae_expand(z, 1, model)
        assert torch.equal(out, z.values)
        assert int(mask.sum()) == 0

    def test_mask_counting(self):
        model = MaeModel(make_tiny_model_config(sr_factor=4), high_fs_hz=64.0)
        z = _latents(50, rate=4.0)
        out, mask = mae_expand(z, 4, model)
        assert out.shape == (200, 8)
        assert int(mask.sum()) == 150

    def test_observed_positions_pass_through_unchanged(self):
        model = MaeModel(make_tiny_model_config(sr_factor=4), high_fs_hz=64.0)
        z = _latents(13, seed=5)
        out, mask = mae_expand(z, 4, model)
        assert torch.equal(out[~mask], z.values)
        # masked slots differ across positions through the positional code
        assert not torch.equal(out[mask][0], out[mask][1])

    def test_bad_factor_rejected(self):
        model = MaeModel(make_tiny_model_config(sr_factor=4), high_fs_hz=64.0)
        with pytest.raises(DataError):
            mae_expand(_latents(), 0, model)
        with pytest.raises(DataError):
            mae_expand(_latents(), 2, model)


class TestMaeComplete:
    def test_output_shape(self):
        model = MaeModel(make_tiny_model_config(sr_factor=4), high_fs_hz=64.0)
        out = mae_complete(_latents(16), model)
        assert out.shape == (64, 8)

    def test_deterministic(self):
        model = MaeModel(make_tiny_model_config(sr_factor=4), high_fs_hz=64.0)
        z = _latents(8)
        assert torch.equal(mae_complete(z, model), mae_complete(z, model))


class TestStage2Training:
    def test_translator_training(self, tiny_config, tiny_dataset, tiny_tokenizer, tmp_path):
        res = train_translator(tiny_config, tiny_dataset, tiny_tokenizer.model, tmp_path)
        assert res.tokenizer_digest_before == res.tokenizer_digest_after
        assert min(h["val_loss"] for h in res.history) <= res.history[0]["val_loss"]
        assert all(set(h["terms"]) == {"mse"} for h in res.history)
        model, ckpt = load_translator(res.checkpoint_path)
        assert ckpt.meta["loss_terms"] == ["mse"]
        assert ckpt.meta["tokenizer_digest"] == tiny_tokenizer.model.digest()

    def test_sr_training(self, tiny_config, tiny_dataset, tiny_tokenizer, tmp_path):
        res = train_sr(tiny_config, tiny_dataset, tiny_tokenizer.model, tmp_path)
        assert res.tokenizer_digest_before == res.tokenizer_digest_after
        assert min(h["val_loss"] for h in res.history) <= res.history[0]["val_loss"]
        model, ckpt = load_mae(res.checkpoint_path)
        assert model.expansion_factor == 4
        assert ckpt.meta["loss_terms"] == ["mse"]

    def test_unfrozen_tokenizer_refused(self, tiny_config, tiny_dataset):
        torch.manual_seed(0)
        fresh = TokenizerModel(tiny_config.model)
        with pytest.raises(FreezeViolationError):
            train_translator(tiny_config, tiny_dataset, fresh, "/tmp/unused")
        with pytest.raises(FreezeViolationError):
            train_sr(tiny_config, tiny_dataset, fresh, "/tmp/unused")


class TestInference:
    def test_translate_contract_and_decodability(self, tiny_config, tiny_dataset, tiny_tokenizer):
        tok = tiny_tokenizer.model
        torch.manual_seed(1)
        translator = TranslatorModel(tiny_config.model)
        pair = tiny_dataset.pairs_for("test")[0]
        out, tokens = infer_translate(pair.ppg, pair.static, translator, tok, return_tokens=True)
        assert out.modality == Modality.ECG
        assert out.n_samples == pair.ecg.n_samples
        assert out.fs_hz == pair.ecg.fs_hz
        # the decoder input is exactly the decode of the snapped token grid
        z_hat = rvq_decode(tokens, tok.codebook)
        redecoded = decode(
            LatentSequence(z_hat, out.fs_hz / tok.stride, Modality.ECG, conditioned=True), Modality.ECG, tok
        )
        assert np.array_equal(redecoded.samples, out.samples)

    def test_translate_rejects_ecg_input(self, tiny_config, tiny_dataset, tiny_tokenizer):
        translator = TranslatorModel(tiny_config.model)
        pair = tiny_dataset.pairs_for("test")[0]
        with pytest.raises(DataError):
            infer_translate(pair.ecg, pair.static, translator, tiny_tokenizer.model)

    def test_zero_prompt_outputs_ignore_static(self, tiny_config, tiny_dataset, tiny_tokenizer):
        tok = tiny_tokenizer.model
        torch.manual_seed(2)
        translator = TranslatorModel(tiny_config.model, zero_prompt=True)
        pair = tiny_dataset.pairs_for("test")[0]
        s1 = StaticAttrs(np.array([0.9, 1.0, -0.9, 0.2], dtype=np.float32))
        s2 = StaticAttrs(np.array([-0.8, -1.0, 0.7, -0.5], dtype=np.float32))
        a = infer_translate(pair.ppg, s1, translator, tok)
        b = infer_translate(pair.ppg, s2, translator, tok)
        assert np.array_equal(a.samples, b.samples)

    def test_sr_shape_and_rate(self, tiny_config, tiny_dataset, tiny_tokenizer):
        tok = tiny_tokenizer.model
        torch.manual_seed(3)
        mae = MaeModel(tiny_config.model, high_fs_hz=64.0)
        pair = tiny_dataset.pairs_for("test")[0]
        low = downsample(pair.ecg, 4)
        out = infer_sr(low, pair.static, mae, tok)
        assert out.fs_hz == 64.0
        assert out.n_samples == pair.ecg.n_samples
        assert out.modality == Modality.ECG

    def test_sr_wrong_rate_rejected(self, tiny_config, tiny_dataset, tiny_tokenizer):
        mae = MaeModel(tiny_config.model, high_fs_hz=64.0)
        pair = tiny_dataset.pairs_for("test")[0]
        with pytest.raises(DataError):
            infer_sr(pair.ecg, pair.static, mae, tiny_tokenizer.model)

    def test_inference_requires_frozen_tokenizer(self, tiny_config, tiny_dataset):
        torch.manual_seed(0)
        fresh = TokenizerModel(tiny_config.model)
        translator = TranslatorModel(tiny_config.model)
        pair = tiny_dataset.pairs_for("test")[0]
        with pytest.raises(FreezeViolationError):
            infer_translate(pair.ppg, pair.static, translator, fresh)
