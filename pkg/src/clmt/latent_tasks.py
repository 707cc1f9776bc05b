"""Frozen-tokenizer downstream heads.

Two heads share one transformer backbone style: a sequence translator that
maps PPG latents (with a prepended subject-prompt token) onto the paired ECG
latent sequence, and a completion head that expands a low-rate latent
sequence to the high-rate frame grid by interleaving a learned mask
embedding, then filling the masked slots. Both regress the frozen encoder's
continuous latents under pure MSE; at inference their continuous predictions
are snapped through the frozen codebook before decoding.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import rvq
from .checkpoint import Checkpoint, load_checkpoint, load_state_into, save_checkpoint, state_dict_tensors
from .config import ModelConfig, TrainConfig
from .errors import CheckpointError, DataError, FreezeViolationError
from .synthgen import Modality, SignalDataset, SignalWindow, StaticAttrs, downsample
from .tokenizer import (
    LatentSequence,
    PromptVector,
    TokenizerModel,
    condition,
    decode,
    encode,
    encode_prompt,
    time_positional_encoding,
)
from .trainloop import FitResult, fit_mse

TRANSLATOR_KIND = "translator"
MAE_KIND = "mae_sr"


class PreNormBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ff_mult: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.ff(self.norm2(x))


class TranslatorModel(nn.Module):
    """Cross-modal latent translator: prompt token + source latents in,
    target-latent sequence out through a linear head."""

    def __init__(self, cfg: ModelConfig, condition_sources: bool = True, zero_prompt: bool = False):
        super().__init__()
        self.cfg = cfg
        self.condition_sources = condition_sources
        self.zero_prompt = zero_prompt
        self.blocks = nn.ModuleList(
            PreNormBlock(cfg.latent_dim, cfg.tf_heads, cfg.tf_ff_mult) for _ in range(cfg.tf_layers)
        )
        self.head = nn.Linear(cfg.latent_dim, cfg.latent_dim)

    def forward(self, z_source: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        # z_source: (B, N, d), prompt: (B, d) -> (B, N, d)
        if z_source.shape[-1] != self.cfg.latent_dim or prompt.shape[-1] != self.cfg.latent_dim:
            raise DataError("latent width does not match the translator")
        x = torch.cat([prompt[:, None, :], z_source], dim=1)
        for block in self.blocks:
            x = block(x)
        return self.head(x[:, 1:, :])


class MaeModel(nn.Module):
    """Latent completion head for cross-frequency super-resolution."""

    def __init__(self, cfg: ModelConfig, use_prompt_token: bool = True, high_fs_hz: float = 100.0):
        super().__init__()
        if cfg.sr_factor < 1:
            raise DataError("expansion factor must be >= 1")
        self.cfg = cfg
        self.use_prompt_token = use_prompt_token
        self.expansion_factor = cfg.sr_factor
        self.mask_embedding = nn.Parameter(0.02 * torch.randn(cfg.latent_dim))
        self.blocks = nn.ModuleList(
            PreNormBlock(cfg.latent_dim, cfg.tf_heads, cfg.tf_ff_mult) for _ in range(cfg.tf_layers)
        )
        self.head = nn.Linear(cfg.latent_dim, cfg.latent_dim)
        self.register_buffer("high_fs", torch.tensor(float(high_fs_hz)))

    def expand(self, z_low: torch.Tensor, low_frame_rate_hz: float) -> tuple[torch.Tensor, torch.Tensor]:
        """Interleave mask embeddings between observed frames; observed
        positions carry the input latents unchanged. (B, N, d) -> (B, N*f, d)."""
        f = self.expansion_factor
        b, n_low, d = z_low.shape
        n_high = n_low * f
        out = torch.empty(b, n_high, d, dtype=z_low.dtype)
        mask = torch.ones(n_high, dtype=torch.bool)
        mask[::f] = False
        period_high = 1.0 / (low_frame_rate_hz * f)
        pe = time_positional_encoding(n_high, period_high, d, self.cfg.pe_fmin_hz, self.cfg.pe_fmax_hz).to(z_low.dtype)
        out[:, mask, :] = self.mask_embedding.to(z_low.dtype) + pe[mask]
        out[:, ~mask, :] = z_low
        return out, mask

    def forward(self, z_low: torch.Tensor, prompt: torch.Tensor, low_frame_rate_hz: float) -> torch.Tensor:
        x, _ = self.expand(z_low, low_frame_rate_hz)
        if self.use_prompt_token:
            x = torch.cat([prompt[:, None, :].to(x.dtype), x], dim=1)
        for block in self.blocks:
            x = block(x)
        if self.use_prompt_token:
            x = x[:, 1:, :]
        return self.head(x)


# ---------------------------------------------------------------------------
# Window-level operations
# ---------------------------------------------------------------------------


def translate_latent(z_source: LatentSequence, p: PromptVector, model: TranslatorModel) -> torch.Tensor:
    model.eval()
    with torch.no_grad():
        return model(z_source.values[None], p.values[None])[0]


def mae_expand(z_low: LatentSequence, factor: int, model: MaeModel) -> tuple[torch.Tensor, torch.Tensor]:
    if factor < 1:
        raise DataError("expansion factor must be >= 1")
    if factor != model.expansion_factor:
        raise DataError(f"model expands by {model.expansion_factor}, requested {factor}")
    with torch.no_grad():
        out, mask = model.expand(z_low.values[None], z_low.frame_rate_hz)
    return out[0], mask


def mae_complete(z_low: LatentSequence, model: MaeModel, p: PromptVector | None = None) -> torch.Tensor:
    model.eval()
    prompt = p.values[None] if p is not None else torch.zeros(1, model.cfg.latent_dim)
    with torch.no_grad():
        return model(z_low.values[None], prompt, z_low.frame_rate_hz)[0]


def _prompt_for(tok: TokenizerModel, static: StaticAttrs | None, zero_prompt: bool) -> PromptVector:
    if zero_prompt or static is None:
        return PromptVector(torch.zeros(tok.cfg.latent_dim))
    return encode_prompt(static, tok)


def _maybe_condition(z: LatentSequence, p: PromptVector, apply: bool) -> LatentSequence:
    return condition(z, p) if apply else z


def infer_translate(
    ppg: SignalWindow,
    s: StaticAttrs,
    translator: TranslatorModel,
    frozen_tokenizer: TokenizerModel,
    return_tokens: bool = False,
):
    """PPG window to synthesized ECG window through the frozen codebook."""
    if not frozen_tokenizer.codebook.is_frozen:
        raise FreezeViolationError("inference requires a frozen tokenizer")
    if ppg.modality != Modality.PPG:
        raise DataError("translator input must be a PPG window")
    p = _prompt_for(frozen_tokenizer, s, translator.zero_prompt)
    z = encode(ppg, frozen_tokenizer)
    z = _maybe_condition(z, p, translator.condition_sources)
    pred = translate_latent(z, p, translator)
    tokens, z_hat = rvq.snap(pred, frozen_tokenizer.codebook)
    out = decode(
        LatentSequence(z_hat, z.frame_rate_hz, Modality.ECG, conditioned=True),
        Modality.ECG,
        frozen_tokenizer,
    )
    out = dataclasses.replace(out, subject_id=ppg.subject_id, static=s)
    return (out, tokens) if return_tokens else out


def infer_sr(
    low: SignalWindow,
    s: StaticAttrs,
    mae: MaeModel,
    frozen_tokenizer: TokenizerModel,
    condition_sources: bool = True,
    zero_prompt: bool = False,
    return_tokens: bool = False,
):
    """Low-rate window to the high-rate grid through latent completion."""
    if not frozen_tokenizer.codebook.is_frozen:
        raise FreezeViolationError("inference requires a frozen tokenizer")
    expected_low = float(mae.high_fs) / mae.expansion_factor
    if abs(low.fs_hz - expected_low) > 1e-6:
        raise DataError(f"expected a {expected_low} Hz input, got {low.fs_hz} Hz")
    p = _prompt_for(frozen_tokenizer, s, zero_prompt)
    z = encode(low, frozen_tokenizer)
    z = _maybe_condition(z, p, condition_sources)
    pred = mae_complete(z, mae, p)
    tokens, z_hat = rvq.snap(pred, frozen_tokenizer.codebook)
    out = decode(
        LatentSequence(z_hat, z.frame_rate_hz * mae.expansion_factor, low.modality, conditioned=True),
        low.modality,
        frozen_tokenizer,
    )
    out = dataclasses.replace(out, subject_id=low.subject_id, static=s)
    return (out, tokens) if return_tokens else out


# ---------------------------------------------------------------------------
# Stage-2 training
# ---------------------------------------------------------------------------


def require_frozen(tok: TokenizerModel) -> str:
    if not tok.codebook.is_frozen:
        raise FreezeViolationError("stage-2 training requires a frozen tokenizer")
    tok.eval()
    for p in tok.parameters():
        p.requires_grad_(False)
    return tok.digest()


def encode_windows(
    tok: TokenizerModel,
    windows: list[SignalWindow],
    conditioned: bool,
    zero_prompt: bool,
    chunk: int = 64,
) -> torch.Tensor:
    """Batched frozen-encoder latents for same-shape windows, optionally
    prompt-conditioned; returns (n, N, d)."""
    tok.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(windows), chunk):
            ws = windows[i : i + chunk]
            x = torch.from_numpy(np.stack([w.x for w in ws]).astype(np.float32))[:, None, :]
            z = tok.encode_batch(x, ws[0].fs_hz)
            if conditioned and not zero_prompt:
                s = torch.from_numpy(np.stack([w.static.values for w in ws]).astype(np.float32))
                z = z + tok.prompt_batch(s)[:, None, :]
            outs.append(z)
    return torch.cat(outs)


def _prompt_tensor(tok: TokenizerModel, windows: list[SignalWindow], zero_prompt: bool) -> torch.Tensor:
    if zero_prompt:
        return torch.zeros(len(windows), tok.cfg.latent_dim)
    with torch.no_grad():
        s = torch.from_numpy(np.stack([w.static.values for w in windows]).astype(np.float32))
        return tok.prompt_batch(s)


@dataclass
class Stage2Result:
    model: nn.Module
    checkpoint_path: Path
    history: list[dict]
    tokenizer_digest_before: str
    tokenizer_digest_after: str


def _save_stage2(path, kind, model, config: TrainConfig, meta_extra: dict) -> str:
    meta = {
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "model_config": dataclasses.asdict(config.model),
        "loss_terms": ["mse"],
    }
    meta["model_config"]["enc_channels"] = list(meta["model_config"]["enc_channels"])
    meta.update(meta_extra)
    return save_checkpoint(path, kind, state_dict_tensors(model, "model."), meta)


def train_translator(
    config: TrainConfig,
    dataset: SignalDataset,
    frozen_tokenizer: TokenizerModel,
    out_dir: str | Path,
    zero_prompt: bool = False,
) -> Stage2Result:
    """Regress frozen ECG latents from frozen PPG latents plus the prompt."""
    digest_before = require_frozen(frozen_tokenizer)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cond = config.stage2_condition_sources
    splits = {}
    for split in ("train", "val"):
        pairs = dataset.pairs_for(split)
        if not pairs:
            raise DataError(f"dataset has no pairs in the {split} split")
        src = encode_windows(frozen_tokenizer, [p.ppg for p in pairs], cond, zero_prompt)
        tgt = encode_windows(frozen_tokenizer, [p.ecg for p in pairs], cond, zero_prompt)
        prompts = _prompt_tensor(frozen_tokenizer, [p.ppg for p in pairs], zero_prompt)
        splits[split] = (src, prompts, tgt)

    torch.manual_seed(config.seed)
    model = TranslatorModel(config.model, condition_sources=cond, zero_prompt=zero_prompt)
    fit = fit_mse(
        model,
        lambda m, inputs: m(inputs[0], inputs[1]),
        (splits["train"][0], splits["train"][1]),
        splits["train"][2],
        (splits["val"][0], splits["val"][1]),
        splits["val"][2],
        config.optimizer,
        config.seed,
    )
    digest_after = frozen_tokenizer.digest()
    if digest_after != digest_before:
        raise FreezeViolationError("tokenizer state changed during translator training")
    name = "translator_no_static.ckpt" if zero_prompt else "translator.ckpt"
    path = out / name
    _save_stage2(
        path,
        TRANSLATOR_KIND,
        model,
        config,
        {
            "tokenizer_digest": digest_before,
            "condition_sources": cond,
            "zero_prompt": zero_prompt,
            "dataset_digest": dataset.digest(),
            "best_val": fit.best_val,
            "epochs_trained": len(fit.history),
        },
    )
    (out / ("train_log_" + name.replace(".ckpt", "") + ".jsonl")).write_text(
        "".join(json.dumps(h, sort_keys=True) + "\n" for h in fit.history)
    )
    return Stage2Result(model, path, fit.history, digest_before, digest_after)


def train_sr(
    config: TrainConfig,
    dataset: SignalDataset,
    frozen_tokenizer: TokenizerModel,
    out_dir: str | Path,
    zero_prompt: bool = False,
) -> Stage2Result:
    """Regress high-rate frozen latents from subsampled-window latents."""
    digest_before = require_frozen(frozen_tokenizer)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cond = config.stage2_condition_sources
    factor = config.model.sr_factor
    splits = {}
    for split in ("train", "val"):
        pairs = dataset.pairs_for(split)
        if not pairs:
            raise DataError(f"dataset has no pairs in the {split} split")
        windows = [p.ecg for p in pairs] + [p.ppg for p in pairs]
        lows = [downsample(w, factor) for w in windows]
        z_low = encode_windows(frozen_tokenizer, lows, cond, zero_prompt)
        z_high = encode_windows(frozen_tokenizer, windows, cond, zero_prompt)
        prompts = _prompt_tensor(frozen_tokenizer, windows, zero_prompt)
        splits[split] = (z_low, prompts, z_high, lows[0].fs_hz / frozen_tokenizer.stride)

    torch.manual_seed(config.seed)
    model = MaeModel(config.model, use_prompt_token=config.sr_prompt_token, high_fs_hz=dataset.fs_hz)
    low_rate = splits["train"][3]
    fit = fit_mse(
        model,
        lambda m, inputs: m(inputs[0], inputs[1], low_rate),
        (splits["train"][0], splits["train"][1]),
        splits["train"][2],
        (splits["val"][0], splits["val"][1]),
        splits["val"][2],
        config.optimizer,
        config.seed,
    )
    digest_after = frozen_tokenizer.digest()
    if digest_after != digest_before:
        raise FreezeViolationError("tokenizer state changed during SR training")
    path = out / "mae_sr.ckpt"
    _save_stage2(
        path,
        MAE_KIND,
        model,
        config,
        {
            "tokenizer_digest": digest_before,
            "condition_sources": cond,
            "zero_prompt": zero_prompt,
            "use_prompt_token": config.sr_prompt_token,
            "high_fs_hz": dataset.fs_hz,
            "dataset_digest": dataset.digest(),
            "best_val": fit.best_val,
            "epochs_trained": len(fit.history),
        },
    )
    (out / "train_log_mae_sr.jsonl").write_text(
        "".join(json.dumps(h, sort_keys=True) + "\n" for h in fit.history)
    )
    return Stage2Result(model, path, fit.history, digest_before, digest_after)


def load_translator(path: str | Path) -> tuple[TranslatorModel, Checkpoint]:
    ckpt = load_checkpoint(path, expect_kind=TRANSLATOR_KIND)
    mc = dict(ckpt.meta["model_config"])
    mc["enc_channels"] = tuple(mc["enc_channels"])
    model = TranslatorModel(
        ModelConfig(**mc),
        condition_sources=ckpt.meta["condition_sources"],
        zero_prompt=ckpt.meta["zero_prompt"],
    )
    load_state_into(model, ckpt, "model.")
    model.eval()
    return model, ckpt


def load_mae(path: str | Path) -> tuple[MaeModel, Checkpoint]:
    ckpt = load_checkpoint(path, expect_kind=MAE_KIND)
    mc = dict(ckpt.meta["model_config"])
    mc["enc_channels"] = tuple(mc["enc_channels"])
    model = MaeModel(
        ModelConfig(**mc),
        use_prompt_token=ckpt.meta["use_prompt_token"],
        high_fs_hz=ckpt.meta["high_fs_hz"],
    )
    load_state_into(model, ckpt, "model.")
    model.eval()
    return model, ckpt


def check_tokenizer_match(ckpt: Checkpoint, frozen_tokenizer: TokenizerModel) -> None:
    if ckpt.meta.get("tokenizer_digest") != frozen_tokenizer.digest():
        raise CheckpointError("stage-2 checkpoint was trained against a different tokenizer")
