"""Hierarchical residual vector quantization.

A stack of L codebooks quantizes a latent sequence greedily: stage l snaps
the running residual to its nearest codeword and passes the remainder on.
Entry 0 of every stage is pinned to the zero vector and excluded from EMA
updates and dead-code revival; because "apply no correction" is always an
available choice, the per-stage residual energy can never increase, which
downstream property checks rely on.

Codebooks learn by exponential moving averages of their assigned vectors
(no gradient); the encoder trains through the bottleneck with a
straight-through estimator applied by the caller.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DataError, FreezeViolationError

EMA_EPS = 1e-5


@dataclass
class TokenGrid:
    """Discrete code indices, one row per quantizer stage."""

    codes: torch.Tensor  # (L, N) long

    def __post_init__(self):
        c = torch.as_tensor(self.codes, dtype=torch.long)
        if c.ndim != 2:
            raise DataError(f"token grid must be (stages, frames), got {tuple(c.shape)}")
        if c.numel() and int(c.min()) < 0:
            raise DataError("token indices must be non-negative")
        self.codes = c

    @property
    def n_stages(self) -> int:
        return int(self.codes.shape[0])

    @property
    def n_frames(self) -> int:
        return int(self.codes.shape[1])


class CodebookStage(nn.Module):
    """One quantizer stage: K codewords plus their EMA statistics."""

    def __init__(self, n_entries: int, dim: int):
        super().__init__()
        if n_entries < 2:
            raise DataError("a stage needs at least 2 entries (one is the pinned zero)")
        entries = 0.01 * torch.randn(n_entries, dim)
        entries[0].zero_()
        self.register_buffer("entries", entries)
        self.register_buffer("ema_counts", torch.ones(n_entries))
        self.register_buffer("ema_sums", entries.clone())
        self.register_buffer("frozen", torch.zeros((), dtype=torch.uint8))

    @property
    def n_entries(self) -> int:
        return int(self.entries.shape[0])

    @property
    def dim(self) -> int:
        return int(self.entries.shape[1])

    @property
    def is_frozen(self) -> bool:
        return bool(self.frozen.item())


class RvqCodebook(nn.Module):
    def __init__(self, n_stages: int, n_entries: int, dim: int):
        super().__init__()
        if n_stages < 1:
            raise DataError("need at least one quantizer stage")
        self.stages = nn.ModuleList(CodebookStage(n_entries, dim) for _ in range(n_stages))

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def dim(self) -> int:
        return self.stages[0].dim

    @property
    def is_frozen(self) -> bool:
        return all(st.is_frozen for st in self.stages)

    def freeze(self) -> None:
        for st in self.stages:
            st.frozen.fill_(1)

    def digest(self) -> str:
        h = hashlib.sha256()
        for st in self.stages:
            for buf in (st.entries, st.ema_counts, st.ema_sums, st.frozen):
                h.update(buf.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def usage_counts(self) -> list[np.ndarray]:
        return [st.ema_counts.detach().cpu().numpy().copy() for st in self.stages]


def _sq_dists(x: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    e = entries.to(x.dtype)
    d = (x * x).sum(1, keepdim=True) + (e * e).sum(1)[None, :] - 2.0 * (x @ e.t())
    return d.clamp_min_(0.0)


def quantize_stage(residual: torch.Tensor, stage: CodebookStage) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest-codeword lookup; ties go to the lowest index."""
    if residual.ndim != 2 or residual.shape[1] != stage.dim:
        raise DataError(f"residual shape {tuple(residual.shape)} does not match dim {stage.dim}")
    if not torch.isfinite(residual).all():
        raise DataError("residual contains non-finite values")
    codes = torch.argmin(_sq_dists(residual, stage.entries), dim=1)
    quantized = stage.entries.to(residual.dtype)[codes]
    return codes, quantized


@dataclass
class RvqEncoding:
    tokens: TokenGrid
    z_hat: torch.Tensor
    residual_norms: torch.Tensor  # (L,) mean per-frame L2 norm after each stage
    stage_inputs: list[torch.Tensor]  # residual fed into each stage


def rvq_encode(z: torch.Tensor, cb: RvqCodebook) -> RvqEncoding:
    """Greedy multi-stage quantization of a latent sequence (frames, dim)."""
    with torch.no_grad():
        residual = z.detach()
        z_hat = torch.zeros_like(residual)
        codes_per_stage = []
        norms = []
        stage_inputs = []
        for stage in cb.stages:
            stage_inputs.append(residual)
            codes, quantized = quantize_stage(residual, stage)
            z_hat = z_hat + quantized
            residual = residual - quantized
            codes_per_stage.append(codes)
            norms.append(residual.norm(dim=1).mean())
        return RvqEncoding(
            tokens=TokenGrid(torch.stack(codes_per_stage)),
            z_hat=z_hat,
            residual_norms=torch.stack(norms),
            stage_inputs=stage_inputs,
        )


def rvq_decode(tokens: TokenGrid, cb: RvqCodebook, dtype: torch.dtype | None = None) -> torch.Tensor:
    """Sum the per-stage codeword embeddings; pure lookup, no search."""
    if tokens.n_stages != cb.n_stages:
        raise DataError(f"token grid has {tokens.n_stages} stages, codebook has {cb.n_stages}")
    dtype = dtype or cb.stages[0].entries.dtype
    out = torch.zeros(tokens.n_frames, cb.dim, dtype=dtype)
    for stage, row in zip(cb.stages, tokens.codes):
        if row.numel() and int(row.max()) >= stage.n_entries:
            raise DataError(f"token index {int(row.max())} out of range for K={stage.n_entries}")
        out = out + stage.entries.to(dtype)[row]
    return out


def snap(z_cont: torch.Tensor, cb: RvqCodebook) -> tuple[TokenGrid, torch.Tensor]:
    """Project a continuous latent onto the frozen codebook's decodable set."""
    if not cb.is_frozen:
        raise FreezeViolationError("snap requires a fully frozen codebook")
    enc = rvq_encode(z_cont, cb)
    return enc.tokens, enc.z_hat


def commitment_loss(z_tilde: torch.Tensor, z_hat: torch.Tensor, lambda_vq: float = 1.0) -> torch.Tensor:
    """Mean squared pull of the encoder output toward its (stop-gradient)
    quantized counterpart."""
    if z_tilde.shape != z_hat.shape:
        raise DataError(f"shape mismatch {tuple(z_tilde.shape)} vs {tuple(z_hat.shape)}")
    return lambda_vq * torch.mean((z_tilde - z_hat.detach()) ** 2)


def update_codebooks_ema(
    cb: RvqCodebook,
    assignments: list[tuple[torch.Tensor, torch.Tensor]],
    decay: float,
) -> None:
    """Classic EMA codebook update from one batch of per-stage assignments.

    `assignments[l]` is (codes, vectors) for stage l. The pinned zero entry
    is skipped. An empty batch is a no-op.
    """
    if cb.is_frozen or any(st.is_frozen for st in cb.stages):
        raise FreezeViolationError("cannot update a frozen codebook")
    if not 0.0 <= decay < 1.0:
        raise DataError(f"decay must be in [0, 1), got {decay}")
    if len(assignments) != cb.n_stages:
        raise DataError("one assignment batch per stage required")
    with torch.no_grad():
        for stage, (codes, vectors) in zip(cb.stages, assignments):
            if codes.numel() == 0:
                continue
            k = stage.n_entries
            batch_counts = torch.bincount(codes, minlength=k).to(stage.ema_counts.dtype)
            batch_sums = torch.zeros_like(stage.ema_sums)
            batch_sums.index_add_(0, codes, vectors.to(stage.ema_sums.dtype))
            stage.ema_counts.mul_(decay).add_(batch_counts, alpha=1.0 - decay)
            stage.ema_sums.mul_(decay).add_(batch_sums, alpha=1.0 - decay)
            denom = stage.ema_counts[1:].clamp_min(EMA_EPS)[:, None]
            stage.entries[1:] = stage.ema_sums[1:] / denom


def reinit_dead_codes(cb: RvqCodebook, threshold: float, donor: torch.Tensor, seed: int) -> int:
    """Reset rarely used codewords to random vectors from the donor batch."""
    if cb.is_frozen or any(st.is_frozen for st in cb.stages):
        raise FreezeViolationError("cannot reinit a frozen codebook")
    if donor.ndim != 2 or donor.shape[1] != cb.dim:
        raise DataError("donor batch must be (rows, dim)")
    rng = np.random.default_rng(seed)
    revived = 0
    with torch.no_grad():
        for stage in cb.stages:
            dead = (stage.ema_counts < threshold).nonzero(as_tuple=True)[0]
            dead = dead[dead != 0]  # never touch the pinned zero entry
            if dead.numel() == 0:
                continue
            pick = rng.integers(0, donor.shape[0], size=int(dead.numel()))
            fresh = donor[torch.as_tensor(pick, dtype=torch.long)].to(stage.entries.dtype)
            stage.entries[dead] = fresh
            stage.ema_counts[dead] = 1.0
            stage.ema_sums[dead] = fresh
            revived += int(dead.numel())
    return revived


def _kmeans_pp_seeds(data: torch.Tensor, k: int, rng: np.random.Generator) -> torch.Tensor:
    m = data.shape[0]
    first = int(rng.integers(0, m))
    centers = [data[first]]
    d2 = _sq_dists(data, data[first][None]).squeeze(1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0:
            centers.append(data[int(rng.integers(0, m))])
            continue
        probs = (d2 / total).cpu().numpy()
        nxt = int(rng.choice(m, p=probs / probs.sum()))
        centers.append(data[nxt])
        d2 = torch.minimum(d2, _sq_dists(data, data[nxt][None]).squeeze(1))
    return torch.stack(centers)


def _kmeans(data: torch.Tensor, k: int, iters: int, rng: np.random.Generator) -> torch.Tensor:
    if data.shape[0] < k:
        pick = rng.integers(0, data.shape[0], size=k)
        centers = data[torch.as_tensor(pick, dtype=torch.long)].clone()
    else:
        centers = _kmeans_pp_seeds(data, k, rng).clone()
    for _ in range(iters):
        codes = torch.argmin(_sq_dists(data, centers), dim=1)
        for j in range(k):
            mask = codes == j
            if mask.any():
                centers[j] = data[mask].mean(0)
    return centers


def init_codebooks_kmeans(cb: RvqCodebook, latents: torch.Tensor, iters: int = 10, seed: int = 0) -> None:
    """Seed each stage with k-means centroids of that stage's residuals."""
    if cb.is_frozen:
        raise FreezeViolationError("cannot initialize a frozen codebook")
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        residual = latents.detach().clone()
        for stage in cb.stages:
            centers = _kmeans(residual, stage.n_entries - 1, iters, rng)
            stage.entries[1:] = centers.to(stage.entries.dtype)
            stage.entries[0].zero_()
            stage.ema_counts.fill_(1.0)
            stage.ema_sums.copy_(stage.entries)
            _, quantized = quantize_stage(residual, stage)
            residual = residual - quantized
