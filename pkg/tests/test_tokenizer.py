import dataclasses

import numpy as np
import pytest
import torch
from scipy.special import erf

from clmt.config import LossConfig, ModelConfig, OptimizerConfig, TrainConfig
from clmt.errors import DataError
from clmt.rvq import RvqCodebook
from clmt.synthgen import Modality, SignalWindow, StaticAttrs, build_dataset
from clmt.tokenizer import (
    TokenizerModel,
    condition,
    decode,
    encode,
    encode_prompt,
    load_tokenizer,
    recon_loss,
    stage1_loss,
    time_positional_encoding,
    train_stage1,
)


def tiny_model_config(**overrides):
    base = dict(
        latent_dim=8,
        codebook_entries=8,
        codebook_stages=2,
        stride=4,
        enc_channels=(4, 6),
        kernel_size=3,
        n_blocks=2,
        static_dim=4,
        tf_layers=1,
        tf_heads=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def _window(x, modality=Modality.ECG, fs=100.0, static=None):
    if static is None:
        static = StaticAttrs(np.array([0.1, 1.0, -0.2, 0.3], dtype=np.float32))
    return SignalWindow(modality, np.asarray(x, dtype=np.float32), fs, "s0", static)


class TestEncode:
    def test_shape_chain(self):
        model = TokenizerModel(ModelConfig())
        w = _window(np.random.default_rng(0).normal(size=800))
        z = encode(w, model)
        assert z.values.shape == (200, 64)
        assert z.frame_rate_hz == 25.0
        assert not z.conditioned
        out = decode(z, Modality.ECG, model)
        assert out.n_samples == 800 and out.fs_hz == 100.0

    def test_low_rate_window_shape(self):
        model = TokenizerModel(ModelConfig())
        w = _window(np.random.default_rng(1).normal(size=200), fs=25.0)
        z = encode(w, model)
        assert z.values.shape == (50, 64)
        assert z.frame_rate_hz == 6.25

    def test_deterministic(self):
        model = TokenizerModel(ModelConfig())
        w = _window(np.random.default_rng(2).normal(size=800))
        assert torch.equal(encode(w, model).values, encode(w, model).values)

    def test_indivisible_length_rejected(self):
        model = TokenizerModel(tiny_model_config())
        with pytest.raises(DataError):
            encode(_window(np.zeros(801)), model)

    def test_positional_encoding_commensurable_across_rates(self):
        # frame i of a 25 Hz window sits at the same physical time as frame
        # 4i of a 100 Hz window, so their positional codes must be identical
        pe_high = time_positional_encoding(200, 4 / 100.0, 16, 0.1, 50.0)
        pe_low = time_positional_encoding(50, 4 / 25.0, 16, 0.1, 50.0)
        assert torch.allclose(pe_low, pe_high[::4], atol=1e-6)

    def test_zero_input_equals_positional_encoding_plus_bias(self):
        # layer-by-layer numpy oracle of the conv stack on a zero window
        torch.manual_seed(3)
        cfg = tiny_model_config()
        model = TokenizerModel(cfg)
        # randomize batchnorm running stats so the eval formula is exercised
        gen = torch.Generator().manual_seed(9)
        for mod in model.encoder.modules():
            if isinstance(mod, torch.nn.BatchNorm1d):
                with torch.no_grad():
                    mod.running_mean.uniform_(-0.5, 0.5, generator=gen)
                    mod.running_var.uniform_(0.5, 1.5, generator=gen)
                    mod.weight.uniform_(0.5, 1.5, generator=gen)
                    mod.bias.uniform_(-0.3, 0.3, generator=gen)
        t_len = 32
        w = _window(np.zeros(t_len))
        z = encode(w, model).values.numpy()

        def conv1d(x, weight, bias, stride=1, pad=0):
            c_out, c_in, k = weight.shape
            xp = np.pad(x, ((0, 0), (pad, pad)))
            n_out = (xp.shape[1] - k) // stride + 1
            out = np.zeros((c_out, n_out))
            for o in range(c_out):
                for t in range(n_out):
                    out[o, t] = (weight[o] * xp[:, t * stride : t * stride + k]).sum() + bias[o]
            return out

        def bn(x, mod):
            mean = mod.running_mean.numpy()[:, None]
            var = mod.running_var.numpy()[:, None]
            return (x - mean) / np.sqrt(var + mod.eps) * mod.weight.detach().numpy()[:, None] + mod.bias.detach().numpy()[:, None]

        def gelu(x):
            return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))

        enc = model.encoder
        pad = cfg.kernel_size // 2
        h = conv1d(np.zeros((1, t_len)), enc.stem.weight.detach().numpy(), enc.stem.bias.detach().numpy(), pad=pad)
        for block in enc.blocks:
            inner = conv1d(h, block.conv1.weight.detach().numpy(), block.conv1.bias.detach().numpy(), stride=block.conv1.stride[0], pad=pad)
            inner = gelu(bn(inner, block.bn1))
            inner = conv1d(inner, block.conv2.weight.detach().numpy(), block.conv2.bias.detach().numpy(), pad=pad)
            inner = bn(inner, block.bn2)
            skip = conv1d(h, block.skip.weight.detach().numpy(), block.skip.bias.detach().numpy(), stride=block.skip.stride[0])
            h = gelu(inner + skip)
        h = conv1d(h, enc.proj.weight.detach().numpy(), enc.proj.bias.detach().numpy())
        pe = time_positional_encoding(h.shape[1], cfg.stride / 100.0, cfg.latent_dim, cfg.pe_fmin_hz, cfg.pe_fmax_hz).numpy()
        expected = h.T + pe
        assert np.allclose(z, expected, atol=1e-5)


class TestPrompt:
    def test_deterministic(self):
        model = TokenizerModel(tiny_model_config())
        s = StaticAttrs(np.array([0.5, -1.0, 0.25, 0.0], dtype=np.float32))
        assert torch.equal(encode_prompt(s, model).values, encode_prompt(s, model).values)

    def test_zero_weights_give_zero_vector(self):
        model = TokenizerModel(tiny_model_config())
        with torch.no_grad():
            for p in model.prompt_mlp.parameters():
                p.zero_()
        s = StaticAttrs(np.array([0.5, -1.0, 0.25, 0.0], dtype=np.float32))
        assert torch.equal(encode_prompt(s, model).values, torch.zeros(8))

    def test_wrong_static_dim_rejected(self):
        model = TokenizerModel(tiny_model_config())
        with pytest.raises(DataError):
            model.prompt_batch(torch.zeros(1, 3))

    def test_jacobian_matches_finite_differences(self):
        torch.manual_seed(1)
        model = TokenizerModel(tiny_model_config()).double()
        s0 = torch.tensor([0.3, -0.5, 0.8, 0.1], dtype=torch.float64)
        jac = torch.autograd.functional.jacobian(lambda s: model.prompt_mlp(s), s0)
        eps = 1e-6
        for j in range(4):
            sp, sm = s0.clone(), s0.clone()
            sp[j] += eps
            sm[j] -= eps
            num = (model.prompt_mlp(sp) - model.prompt_mlp(sm)) / (2 * eps)
            denom = jac[:, j].abs().clamp_min(1e-8)
            assert float(((jac[:, j] - num).abs() / denom).max()) < 1e-4


class TestCondition:
    def _z(self, model):
        return encode(_window(np.random.default_rng(3).normal(size=64)), model)

    def test_zero_prompt_is_identity(self):
        model = TokenizerModel(tiny_model_config())
        z = self._z(model)
        from clmt.tokenizer import PromptVector

        zc = condition(z, PromptVector(torch.zeros(8)))
        assert torch.equal(zc.values, z.values)
        assert zc.conditioned

    def test_broadcast_difference_constant(self):
        model = TokenizerModel(tiny_model_config())
        z = self._z(model)
        p = encode_prompt(_window(np.zeros(64)).static, model)
        zc = condition(z, p)
        # conditioning is exactly the broadcast add, bit for bit
        assert torch.equal(zc.values, z.values + p.values[None, :])
        diff = zc.values - z.values
        assert torch.allclose(diff, p.values.expand_as(diff), atol=1e-6)

    def test_double_conditioning_rejected(self):
        model = TokenizerModel(tiny_model_config())
        z = self._z(model)
        p = encode_prompt(_window(np.zeros(64)).static, model)
        zc = condition(z, p)
        with pytest.raises(DataError):
            condition(zc, p)

    def test_conditioning_is_additive(self):
        model = TokenizerModel(tiny_model_config())
        from clmt.tokenizer import PromptVector

        z = self._z(model)
        p1 = PromptVector(torch.randn(8, generator=torch.Generator().manual_seed(0)))
        p2 = PromptVector(torch.randn(8, generator=torch.Generator().manual_seed(1)))
        joint = condition(z, PromptVector(p1.values + p2.values))
        seq = condition(z, p1)
        seq = dataclasses.replace(seq, conditioned=False)
        seq = condition(seq, p2)
        assert torch.allclose(joint.values, seq.values, atol=0)


class TestDecode:
    def test_modality_decoders_are_distinct(self):
        torch.manual_seed(0)
        model = TokenizerModel(tiny_model_config())
        z = encode(_window(np.random.default_rng(5).normal(size=64)), model)
        a = decode(z, Modality.ECG, model)
        b = decode(z, Modality.PPG, model)
        assert np.abs(a.x - b.x).max() > 0

    def test_unknown_modality_rejected(self):
        model = TokenizerModel(tiny_model_config())
        with pytest.raises(DataError):
            model.decode_batch(torch.zeros(1, 16, 8), "EEG")

    def test_modality_coverage(self):
        model = TokenizerModel(tiny_model_config())
        assert set(model.decoders.keys()) == {"ECG", "PPG"}


class TestReconLoss:
    def test_zero_for_identical(self):
        x = np.random.default_rng(0).normal(size=128)
        assert recon_loss(x, x) <= 1e-12

    def test_zero_window_pair(self):
        assert recon_loss(np.zeros(16), np.zeros(16)) == 0.0

    def test_hand_computed_double(self):
        # x_hat = 2x with x = [0,1,0,-1]: l1 term 0.5, cosine term 0,
        # gradient term 0.5 * mean(|[2,-2,-2] - [1,-1,-1]|) = 0.5
        x = np.array([0.0, 1.0, 0.0, -1.0])
        assert recon_loss(2 * x, x, alpha=0.5, beta=0.5) == pytest.approx(1.0, abs=1e-12)

    def test_nonnegative_and_discriminating(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a, b = rng.normal(size=64), rng.normal(size=64)
            assert recon_loss(a, b) > 0
            assert recon_loss(a, a) <= 1e-12

    def test_gradient_matches_finite_differences(self):
        from clmt.tokenizer import _recon_terms

        rng = np.random.default_rng(8)
        x = torch.tensor(rng.normal(size=(1, 32)))
        xh = torch.tensor(rng.normal(size=(1, 32)), requires_grad=True)
        loss = sum(_recon_terms(xh, x, 0.5, 0.5))
        loss.backward()
        eps = 1e-7
        for j in range(32):
            hp, hm = xh.detach().clone(), xh.detach().clone()
            hp[0, j] += eps
            hm[0, j] -= eps
            lp = float(sum(_recon_terms(hp, x, 0.5, 0.5)))
            lm = float(sum(_recon_terms(hm, x, 0.5, 0.5)))
            num = (lp - lm) / (2 * eps)
            grad = float(xh.grad[0, j])
            assert abs(grad - num) <= 1e-4 * max(1.0, abs(grad))


class _IdentityTokenizer:
    """Duck-typed stand-in whose full pipeline reproduces inputs exactly."""

    def __init__(self, values):
        self.codebook = RvqCodebook(1, len(values) + 1, 1)
        with torch.no_grad():
            self.codebook.stages[0].entries[1:] = torch.tensor(values)[:, None]

    def encode_batch(self, x, fs):
        return x.transpose(1, 2)

    def prompt_batch(self, s):
        return torch.zeros(s.shape[0], 1)

    def decode_batch(self, z, modality):
        return z.transpose(1, 2)

    def eval(self):
        return self


class TestStage1Loss:
    def _batch(self):
        rng = np.random.default_rng(0)
        return [
            _window(rng.normal(size=32), Modality.ECG),
            _window(rng.normal(size=32), Modality.PPG),
        ]

    def test_breakdown_sums_to_total(self):
        model = TokenizerModel(tiny_model_config(stride=4))
        total, terms = stage1_loss(self._batch(), model, LossConfig())
        assert total == pytest.approx(terms["recon"] + terms["vq"], abs=1e-9)
        assert terms["recon"] == pytest.approx(
            terms["recon_l1"] + terms["recon_cos"] + terms["recon_grad"], abs=1e-9
        )

    def test_zero_lambda_reduces_to_recon(self):
        model = TokenizerModel(tiny_model_config())
        total, terms = stage1_loss(self._batch(), model, LossConfig(lambda_vq=0.0))
        assert terms["vq"] == 0.0
        assert total == pytest.approx(terms["recon"], abs=1e-9)

    def test_perfect_autoencoder_fixture_gives_zero(self):
        values = [-1.0, 0.5, 2.0]
        model = _IdentityTokenizer(values)
        rng = np.random.default_rng(1)
        xs = np.array(values, dtype=np.float32)[rng.integers(0, 3, size=16)]
        batch = [_window(xs, Modality.ECG), _window(xs, Modality.PPG)]
        total, terms = stage1_loss(batch, model, LossConfig(lambda_vq=0.25))
        assert total == pytest.approx(0.0, abs=1e-10)


def small_train_setup(tmp_path, seed=0, max_epochs=3):
    config = TrainConfig(
        optimizer=OptimizerConfig(batch_size=8, max_epochs=max_epochs, early_stop_patience=5),
        model=tiny_model_config(),
        loss=LossConfig(),
        seed=seed,
    )
    dataset = build_dataset(6, 2, 4.0, 64.0, seed=seed, ratios=(0.5, 0.25, 0.25))
    return config, dataset


class TestTrainStage1:
    def test_training_improves_validation_loss(self, tmp_path):
        config, dataset = small_train_setup(tmp_path, max_epochs=4)
        result = train_stage1(config, dataset, tmp_path / "run")
        assert min(h["val_loss"] for h in result.history) < result.history[0]["val_loss"] * 1.001
        assert result.checkpoint_path.exists()
        assert result.log_path.exists()
        model, ckpt = load_tokenizer(result.checkpoint_path, require_frozen=True)
        assert model.codebook.is_frozen
        assert ckpt.meta["finalized"]

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        config, dataset = small_train_setup(tmp_path, max_epochs=2)
        full = train_stage1(config, dataset, tmp_path / "a")

        short_cfg = dataclasses.replace(config, optimizer=dataclasses.replace(config.optimizer, max_epochs=1))
        train_stage1(short_cfg, dataset, tmp_path / "b")
        resumed = train_stage1(config, dataset, tmp_path / "b", resume_from=tmp_path / "b" / "tokenizer_state.ckpt")

        assert resumed.history[0]["epoch"] == 1
        assert resumed.history[0]["train_loss"] == full.history[1]["train_loss"]
        assert resumed.history[0]["val_loss"] == full.history[1]["val_loss"]
        assert (tmp_path / "a" / "tokenizer.ckpt").read_bytes() == (tmp_path / "b" / "tokenizer.ckpt").read_bytes()

    def test_checkpoint_round_trip_bytes(self, tmp_path):
        config, dataset = small_train_setup(tmp_path, max_epochs=1)
        result = train_stage1(config, dataset, tmp_path / "run")
        model, _ = load_tokenizer(result.checkpoint_path)
        from clmt.tokenizer import save_tokenizer

        save_tokenizer(model, tmp_path / "again.ckpt", config, meta_extra={
            "dataset_digest": dataset.digest(),
            "epochs_trained": len(result.history),
            "best_val": min(h["val_loss"] for h in result.history),
        })
        assert (tmp_path / "again.ckpt").read_bytes() == result.checkpoint_path.read_bytes()
