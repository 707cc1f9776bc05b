"""Stage-1 tokenizer: shared conv encoder, subject-prompt conditioning, the
RVQ bottleneck, and one upsampling decoder per modality.

The encoder downsamples waveforms by a fixed stride and tags each latent
frame with a sinusoidal encoding of its physical time in seconds, so windows
recorded at different rates land on commensurable positions. A two-layer MLP
embeds the static subject vector; the embedding is broadcast-added to every
frame before quantization. Reconstruction optimizes pointwise amplitude,
global shape (cosine), and local gradient agreement jointly, plus the
commitment pull toward the codebook.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import rvq
from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    load_optimizer_tensors,
    load_state_into,
    module_digest,
    optimizer_tensors,
    save_checkpoint,
    state_dict_tensors,
)
from .config import ModelConfig, TrainConfig
from .errors import CheckpointError, ConfigError, DataError, FreezeViolationError, NumericError
from .synthgen import Modality, SignalDataset, SignalWindow, StaticAttrs

CKPT_KIND = "tokenizer"


@dataclass
class LatentSequence:
    """Continuous latent matrix for one window, one row per frame."""

    values: torch.Tensor  # (N, d) float32
    frame_rate_hz: float
    modality: Modality | None
    conditioned: bool = False

    def __post_init__(self):
        v = torch.as_tensor(self.values, dtype=torch.float32)
        if v.ndim != 2:
            raise DataError(f"latents must be (frames, dim), got {tuple(v.shape)}")
        if not torch.isfinite(v).all():
            raise DataError("latents contain non-finite values")
        self.values = v

    @property
    def n_frames(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])


@dataclass
class PromptVector:
    values: torch.Tensor  # (d,)

    def __post_init__(self):
        v = torch.as_tensor(self.values, dtype=torch.float32)
        if v.ndim != 1 or not torch.isfinite(v).all():
            raise DataError("prompt must be a finite vector")
        self.values = v


def time_positional_encoding(
    n_frames: int, frame_period_s: float, dim: int, fmin_hz: float, fmax_hz: float
) -> torch.Tensor:
    """Sinusoids over physical time with geometrically spaced frequencies."""
    t = torch.arange(n_frames, dtype=torch.float64) * frame_period_s
    freqs = torch.logspace(math.log10(fmin_hz), math.log10(fmax_hz), dim // 2, dtype=torch.float64)
    ang = 2.0 * math.pi * t[:, None] * freqs[None, :]
    pe = torch.empty(n_frames, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(ang)
    pe[:, 1::2] = torch.cos(ang)
    return pe.float()


def _block_strides(total: int, n_blocks: int) -> list[int]:
    strides = []
    r = total
    for _ in range(n_blocks):
        if r > 1:
            strides.append(2)
            r //= 2
        else:
            strides.append(1)
    return strides


class ResBlock1d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv1d(c_in, c_out, kernel, stride=stride, padding=pad)
        self.bn1 = nn.BatchNorm1d(c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, kernel, padding=pad)
        self.bn2 = nn.BatchNorm1d(c_out)
        self.act = nn.GELU()
        if stride != 1 or c_in != c_out:
            self.skip = nn.Conv1d(c_in, c_out, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        h = self.act(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return self.act(h + self.skip(x))


class UpBlock1d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, up: int = 1):
        super().__init__()
        if up == 1:
            self.up = nn.Identity()
        else:
            self.up = nn.ConvTranspose1d(c_in, c_in, 2 * up, stride=up, padding=up // 2)
        self.block = ResBlock1d(c_in, c_out, kernel)

    def forward(self, x):
        return self.block(self.up(x))


class ConvEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c_lo, c_hi = cfg.enc_channels
        strides = _block_strides(cfg.stride, cfg.n_blocks)
        chans = [c_lo if i < cfg.n_blocks // 2 else c_hi for i in range(cfg.n_blocks)]
        self.stem = nn.Conv1d(1, c_lo, cfg.kernel_size, padding=cfg.kernel_size // 2)
        blocks = []
        prev = c_lo
        for c, s in zip(chans, strides):
            blocks.append(ResBlock1d(prev, c, cfg.kernel_size, stride=s))
            prev = c
        self.blocks = nn.Sequential(*blocks)
        self.proj = nn.Conv1d(prev, cfg.latent_dim, 1)

    def forward(self, x):  # (B, 1, T) -> (B, N, d)
        h = self.proj(self.blocks(self.stem(x)))
        return h.transpose(1, 2)


class ConvDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c_lo, c_hi = cfg.enc_channels
        strides = _block_strides(cfg.stride, cfg.n_blocks)
        chans = [c_lo if i < cfg.n_blocks // 2 else c_hi for i in range(cfg.n_blocks)]
        self.proj = nn.Conv1d(cfg.latent_dim, chans[-1], 1)
        blocks = []
        prev = chans[-1]
        for c, s in zip(reversed(chans), reversed(strides)):
            blocks.append(UpBlock1d(prev, c, cfg.kernel_size, up=s))
            prev = c
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Conv1d(prev, 1, cfg.kernel_size, padding=cfg.kernel_size // 2)

    def forward(self, z):  # (B, N, d) -> (B, 1, T)
        return self.head(self.blocks(self.proj(z.transpose(1, 2))))


class TokenizerModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ConvEncoder(cfg)
        self.prompt_mlp = nn.Sequential(
            nn.Linear(cfg.static_dim, cfg.latent_dim),
            nn.GELU(),
            nn.Linear(cfg.latent_dim, cfg.latent_dim),
        )
        self.codebook = rvq.RvqCodebook(cfg.codebook_stages, cfg.codebook_entries, cfg.latent_dim)
        self.decoders = nn.ModuleDict({m.value: ConvDecoder(cfg) for m in (Modality.ECG, Modality.PPG)})

    @property
    def stride(self) -> int:
        return self.cfg.stride

    def encode_batch(self, x: torch.Tensor, fs_hz: float) -> torch.Tensor:
        if x.shape[-1] % self.cfg.stride:
            raise DataError(f"window length {x.shape[-1]} not divisible by stride {self.cfg.stride}")
        z = self.encoder(x)
        pe = time_positional_encoding(
            z.shape[1], self.cfg.stride / fs_hz, self.cfg.latent_dim, self.cfg.pe_fmin_hz, self.cfg.pe_fmax_hz
        )
        return z + pe[None, :, :].to(z.dtype)

    def prompt_batch(self, static: torch.Tensor) -> torch.Tensor:
        if static.shape[-1] != self.cfg.static_dim:
            raise DataError(f"expected {self.cfg.static_dim} static attrs, got {static.shape[-1]}")
        return self.prompt_mlp(static)

    def decode_batch(self, z_q: torch.Tensor, modality: Modality) -> torch.Tensor:
        key = modality.value if isinstance(modality, Modality) else str(modality)
        if key not in self.decoders:
            raise DataError(f"no decoder for modality {key}")
        return self.decoders[key](z_q)

    def digest(self) -> str:
        return module_digest(self)


# ---------------------------------------------------------------------------
# Public window-level operations (eval mode)
# ---------------------------------------------------------------------------


def encode(w: SignalWindow, model: TokenizerModel) -> LatentSequence:
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(w.samples.astype(np.float32))[None]
        z = model.encode_batch(x, w.fs_hz)[0]
    return LatentSequence(z, w.fs_hz / model.stride, w.modality, conditioned=False)


def encode_prompt(s: StaticAttrs, model: TokenizerModel) -> PromptVector:
    model.eval()
    with torch.no_grad():
        p = model.prompt_batch(torch.from_numpy(s.values.astype(np.float32))[None])[0]
    return PromptVector(p)


def condition(z: LatentSequence, p: PromptVector) -> LatentSequence:
    if z.conditioned:
        raise DataError("latent sequence is already conditioned")
    if p.values.shape[0] != z.dim:
        raise DataError("prompt dimension does not match latent dimension")
    return LatentSequence(z.values + p.values[None, :], z.frame_rate_hz, z.modality, conditioned=True)


def decode(z_hat: LatentSequence, modality: Modality, model: TokenizerModel) -> SignalWindow:
    model.eval()
    with torch.no_grad():
        x = model.decode_batch(z_hat.values[None], modality)[0]
    return SignalWindow(
        modality,
        x.numpy().astype(np.float32),
        z_hat.frame_rate_hz * model.stride,
        subject_id="",
        static=None,
    )


def _recon_terms(x_hat: torch.Tensor, x: torch.Tensor, alpha: float, beta: float):
    """Per-window reconstruction terms averaged over the batch.

    x_hat, x: (B, T). The cosine term is defined as zero when either window
    has zero norm, which keeps the loss exactly zero for a perfect match of
    all-zero windows.
    """
    if x_hat.shape != x.shape:
        raise DataError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    l1 = (x_hat - x).abs().mean(dim=1)
    norm_h = x_hat.norm(dim=1)
    norm_x = x.norm(dim=1)
    dot = (x_hat * x).sum(dim=1)
    ok = (norm_h > 0) & (norm_x > 0)
    cos = torch.where(ok, dot / (norm_h * norm_x).clamp_min(1e-30), torch.ones_like(dot))
    cos_term = alpha * (1.0 - cos).clamp_min(0.0)
    grad_term = beta * (torch.diff(x_hat, dim=1) - torch.diff(x, dim=1)).abs().mean(dim=1)
    return l1.mean(), cos_term.mean(), grad_term.mean()


def recon_loss(x_hat, x, alpha: float = 0.5, beta: float = 0.5) -> float:
    """Shape-aware reconstruction loss between two windows (or 1-D arrays)."""
    xh = x_hat.x if isinstance(x_hat, SignalWindow) else np.asarray(x_hat)
    xx = x.x if isinstance(x, SignalWindow) else np.asarray(x)
    th = torch.from_numpy(np.asarray(xh, dtype=np.float64))[None]
    tx = torch.from_numpy(np.asarray(xx, dtype=np.float64))[None]
    l1, cos_t, grad_t = _recon_terms(th, tx, alpha, beta)
    return float(l1 + cos_t + grad_t)


def _group_windows(batch: list[SignalWindow]):
    groups: dict[Modality, list[SignalWindow]] = {}
    for w in batch:
        groups.setdefault(w.modality, []).append(w)
    out = {}
    for m, ws in groups.items():
        x = torch.from_numpy(np.stack([w.x for w in ws]).astype(np.float32))
        s = torch.from_numpy(np.stack([w.static.values for w in ws]).astype(np.float32))
        out[m] = (x, s, ws[0].fs_hz)
    return out


def _stage1_forward(model: TokenizerModel, groups, loss_cfg, collect_assignments: bool = False):
    """Full forward over modality groups; returns (total, terms, assignments)."""
    terms = {"recon_l1": 0.0, "recon_cos": 0.0, "recon_grad": 0.0, "recon": 0.0, "vq": 0.0}
    total = None
    n_total = sum(x.shape[0] for x, _, _ in groups.values())
    assignments = None
    latent_rows = []
    for modality, (x, s, fs) in groups.items():
        z = model.encode_batch(x[:, None, :], fs)
        p = model.prompt_batch(s)
        z_tilde = z + p[:, None, :]
        rows = z_tilde.reshape(-1, z_tilde.shape[-1])
        enc = rvq.rvq_encode(rows, model.codebook)
        commit = rvq.commitment_loss(rows, enc.z_hat, loss_cfg.lambda_vq)
        z_q = z_tilde + (enc.z_hat.reshape(z_tilde.shape) - z_tilde).detach()
        x_hat = model.decode_batch(z_q, modality)[:, 0, :]
        l1, cos_t, grad_t = _recon_terms(x_hat, x, loss_cfg.alpha, loss_cfg.beta)
        weight = x.shape[0] / n_total
        group_loss = (l1 + cos_t + grad_t + commit) * weight
        total = group_loss if total is None else total + group_loss
        terms["recon_l1"] += float(l1.detach()) * weight
        terms["recon_cos"] += float(cos_t.detach()) * weight
        terms["recon_grad"] += float(grad_t.detach()) * weight
        terms["vq"] += float(commit.detach()) * weight
        if collect_assignments:
            latent_rows.append(rows.detach())
            if assignments is None:
                assignments = [(c, r) for c, r in zip(enc.tokens.codes, enc.stage_inputs)]
            else:
                assignments = [
                    (torch.cat([pc, c]), torch.cat([pr, r]))
                    for (pc, pr), (c, r) in zip(assignments, zip(enc.tokens.codes, enc.stage_inputs))
                ]
    terms["recon"] = terms["recon_l1"] + terms["recon_cos"] + terms["recon_grad"]
    terms["total"] = terms["recon"] + terms["vq"]
    donor = torch.cat(latent_rows) if latent_rows else None
    return total, terms, assignments, donor


def stage1_loss(batch: list[SignalWindow], model: TokenizerModel, loss_cfg) -> tuple[float, dict]:
    """Loss of one mixed-modality batch under the current model (eval mode)."""
    if not batch:
        raise DataError("empty batch")
    model.eval()
    with torch.no_grad():
        _, terms, _, _ = _stage1_forward(model, _group_windows(batch), loss_cfg)
    return terms["total"], terms


# ---------------------------------------------------------------------------
# Stage-1 training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: TokenizerModel
    checkpoint_path: Path
    log_path: Path | None
    history: list[dict]


def _epoch_perm(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence((seed, 0xE0C, epoch))).permutation(n)


def _split_windows(dataset: SignalDataset, split: str) -> list[SignalWindow]:
    out = []
    for pair in dataset.pairs_for(split):
        out.extend([pair.ecg, pair.ppg])
    return out


def _window_tensors(windows: list[SignalWindow]):
    by_mod: dict[Modality, list[SignalWindow]] = {}
    for w in windows:
        by_mod.setdefault(w.modality, []).append(w)
    return {
        m: (
            torch.from_numpy(np.stack([w.x for w in ws]).astype(np.float32)),
            torch.from_numpy(np.stack([w.static.values for w in ws]).astype(np.float32)),
            ws[0].fs_hz,
        )
        for m, ws in by_mod.items()
    }


class _Stage1Trainer:
    def __init__(self, config: TrainConfig, dataset: SignalDataset):
        self.cfg = config
        self.dataset = dataset
        torch.manual_seed(config.seed)
        self.model = TokenizerModel(config.model)
        self.opt = torch.optim.AdamW(
            self._trainable_params(),
            lr=config.optimizer.lr,
            weight_decay=config.optimizer.weight_decay,
        )
        self.epoch = 0
        self.best_val = float("inf")
        self.epochs_since_best = 0
        self.best_state: dict | None = None
        self.kmeans_done = False
        self.train_windows = _split_windows(dataset, "train")
        self.val_windows = _split_windows(dataset, "val")
        if not self.train_windows or not self.val_windows:
            raise DataError("dataset must provide non-empty train and val splits")
        self.history: list[dict] = []

    def _trainable_params(self):
        return [p for n, p in self.model.named_parameters() if not n.startswith("codebook.")]

    def _batches(self, windows, perm):
        bs = self.cfg.optimizer.batch_size
        for i in range(0, len(perm), bs):
            yield [windows[j] for j in perm[i : i + bs]]

    def _val_loss(self) -> tuple[float, dict]:
        self.model.eval()
        total, terms_acc, n = 0.0, None, 0
        with torch.no_grad():
            for i in range(0, len(self.val_windows), self.cfg.optimizer.batch_size):
                batch = self.val_windows[i : i + self.cfg.optimizer.batch_size]
                _, terms, _, _ = _stage1_forward(self.model, _group_windows(batch), self.cfg.loss)
                total += terms["total"] * len(batch)
                n += len(batch)
                if terms_acc is None:
                    terms_acc = {k: v * len(batch) for k, v in terms.items()}
                else:
                    for k in terms_acc:
                        terms_acc[k] += terms[k] * len(batch)
        return total / n, {k: v / n for k, v in terms_acc.items()}

    def train_one_epoch(self) -> dict:
        cfg = self.cfg
        self.model.train()
        perm = _epoch_perm(cfg.seed, self.epoch, len(self.train_windows))
        epoch_loss, n_batches = 0.0, 0
        donor = None
        for batch in self._batches(self.train_windows, perm):
            groups = _group_windows(batch)
            if not self.kmeans_done:
                with torch.no_grad():
                    rows = []
                    for modality, (x, s, fs) in groups.items():
                        z = self.model.encode_batch(x[:, None, :], fs)
                        p = self.model.prompt_batch(s)
                        rows.append((z + p[:, None, :]).reshape(-1, z.shape[-1]))
                    rvq.init_codebooks_kmeans(
                        self.model.codebook, torch.cat(rows), iters=cfg.loss.kmeans_iters, seed=cfg.seed
                    )
                self.kmeans_done = True
            loss, terms, assignments, donor = _stage1_forward(
                self.model, groups, cfg.loss, collect_assignments=True
            )
            if not math.isfinite(float(loss)):
                raise NumericError(
                    f"non-finite stage-1 loss at epoch {self.epoch}: terms={terms}"
                )
            self.opt.zero_grad()
            loss.backward()
            self.opt.step()
            rvq.update_codebooks_ema(self.model.codebook, assignments, cfg.loss.ema_decay)
            epoch_loss += float(loss)
            n_batches += 1
        if donor is not None:
            rvq.reinit_dead_codes(
                self.model.codebook,
                cfg.loss.dead_code_threshold,
                donor,
                seed=int(np.random.SeedSequence((cfg.seed, 0xDEAD, self.epoch)).generate_state(1)[0]),
            )
        val_loss, val_terms = self._val_loss()
        usage = [int((c >= 1.0).sum()) for c in self.model.codebook.usage_counts()]
        record = {
            "epoch": self.epoch,
            "train_loss": epoch_loss / max(n_batches, 1),
            "val_loss": val_loss,
            "val_terms": val_terms,
            "codebook_active_entries": usage,
        }
        if val_loss < self.best_val:
            self.best_val = val_loss
            self.epochs_since_best = 0
            self.best_state = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
        else:
            self.epochs_since_best += 1
        self.epoch += 1
        self.history.append(record)
        return record

    def should_stop(self) -> bool:
        return (
            self.epoch >= self.cfg.optimizer.max_epochs
            or self.epochs_since_best > self.cfg.optimizer.early_stop_patience
        )

    # -- resume support -----------------------------------------------------
    def state_tensors(self) -> dict:
        tensors = state_dict_tensors(self.model, "model.")
        tensors.update(optimizer_tensors(self.opt, list(self.model.named_parameters())))
        if self.best_state is not None:
            tensors.update({f"best.{k}": v for k, v in self.best_state.items()})
        return tensors

    def meta(self) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "config_digest": self.cfg.digest(),
            "dataset_digest": self.dataset.digest(),
            "epoch": self.epoch,
            "best_val": self.best_val,
            "epochs_since_best": self.epochs_since_best,
            "kmeans_done": self.kmeans_done,
            "finalized": False,
        }

    def restore(self, ckpt: Checkpoint) -> None:
        load_state_into(self.model, ckpt, "model.")
        load_optimizer_tensors(self.opt, ckpt, list(self.model.named_parameters()))
        self.epoch = int(ckpt.meta["epoch"])
        self.best_val = float(ckpt.meta["best_val"])
        self.epochs_since_best = int(ckpt.meta["epochs_since_best"])
        self.kmeans_done = bool(ckpt.meta["kmeans_done"])
        best_keys = [k for k in ckpt.tensors if k.startswith("best.")]
        if best_keys:
            ref = self.model.state_dict()
            self.best_state = {
                k[len("best.") :]: torch.from_numpy(ckpt.tensor(k).copy())
                .to(ref[k[len("best.") :]].dtype)
                .reshape(ref[k[len("best.") :]].shape)
                for k in best_keys
            }


def save_tokenizer(model: TokenizerModel, path: str | Path, config: TrainConfig, meta_extra: dict | None = None) -> str:
    meta = {
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "model_config": dataclasses.asdict(config.model),
        "frozen": model.codebook.is_frozen,
        "model_digest": model.digest(),
        "finalized": model.codebook.is_frozen,
    }
    meta["model_config"]["enc_channels"] = list(meta["model_config"]["enc_channels"])
    if meta_extra:
        meta.update(meta_extra)
    return save_checkpoint(path, CKPT_KIND, state_dict_tensors(model, "model."), meta)


def load_tokenizer(path: str | Path, require_frozen: bool = False) -> tuple[TokenizerModel, Checkpoint]:
    ckpt = load_checkpoint(path, expect_kind=CKPT_KIND)
    mc = dict(ckpt.meta["model_config"])
    mc["enc_channels"] = tuple(mc["enc_channels"])
    model = TokenizerModel(ModelConfig(**mc))
    load_state_into(model, ckpt, "model.")
    if ckpt.meta.get("model_digest") and model.digest() != ckpt.meta["model_digest"]:
        raise CheckpointError("tokenizer state does not match its recorded digest")
    if require_frozen and not (ckpt.meta.get("finalized") and model.codebook.is_frozen):
        raise FreezeViolationError("a finalized (frozen) tokenizer checkpoint is required")
    model.eval()
    return model, ckpt


def train_stage1(
    config: TrainConfig,
    dataset: SignalDataset,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Train the tokenizer jointly on both modalities with early stopping;
    the finalized checkpoint carries frozen codebooks."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = _Stage1Trainer(config, dataset)
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expect_kind=CKPT_KIND)
        if ckpt.meta.get("finalized"):
            raise CheckpointError("cannot resume from a finalized checkpoint")
        trainer.restore(ckpt)
    log_path = out / "train_log_tokenizer.jsonl"
    mode = "a" if resume_from is not None else "w"
    with open(log_path, mode) as log:
        while not trainer.should_stop():
            record = trainer.train_one_epoch()
            log.write(json.dumps(record, sort_keys=True) + "\n")
            save_checkpoint(out / "tokenizer_state.ckpt", CKPT_KIND, trainer.state_tensors(), trainer.meta())
    if trainer.best_state is not None:
        trainer.model.load_state_dict(trainer.best_state)
    trainer.model.codebook.freeze()
    final = out / "tokenizer.ckpt"
    save_tokenizer(
        trainer.model,
        final,
        config,
        meta_extra={
            "dataset_digest": dataset.digest(),
            "epochs_trained": trainer.epoch,
            "best_val": trainer.best_val,
        },
    )
    return TrainResult(trainer.model, final, log_path, trainer.history)
