"""Shared MSE regression loop for every downstream head and baseline.

All of them train the same way: AdamW with the standard defaults, seeded
epoch shuffles, early stopping on validation loss, and a single-term loss
breakdown (strictly mean squared error).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .config import OptimizerConfig
from .errors import DataError, NumericError


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence((seed, 0xE0C, epoch))).permutation(n)


@dataclass
class FitResult:
    history: list[dict]
    best_val: float
    best_epoch: int


def fit_mse(
    model: torch.nn.Module,
    forward: Callable[[torch.nn.Module, tuple[torch.Tensor, ...]], torch.Tensor],
    train_inputs: tuple[torch.Tensor, ...],
    train_targets: torch.Tensor,
    val_inputs: tuple[torch.Tensor, ...],
    val_targets: torch.Tensor,
    opt_cfg: OptimizerConfig,
    seed: int,
) -> FitResult:
    """Train `model` to regress targets under pure MSE; restores best state."""
    n = train_targets.shape[0]
    if n == 0 or val_targets.shape[0] == 0:
        raise DataError("empty train or validation set")
    opt = torch.optim.AdamW(model.parameters(), lr=opt_cfg.lr, weight_decay=opt_cfg.weight_decay)
    history: list[dict] = []
    best_val = float("inf")
    best_epoch = -1
    best_state: dict | None = None
    since_best = 0
    bs = opt_cfg.batch_size

    def val_loss() -> float:
        model.eval()
        total, m = 0.0, 0
        with torch.no_grad():
            for i in range(0, val_targets.shape[0], bs):
                pred = forward(model, tuple(t[i : i + bs] for t in val_inputs))
                total += float(((pred - val_targets[i : i + bs]) ** 2).mean()) * (
                    min(i + bs, val_targets.shape[0]) - i
                )
                m += min(i + bs, val_targets.shape[0]) - i
        return total / m

    for epoch in range(opt_cfg.max_epochs):
        model.train()
        perm = epoch_permutation(seed, epoch, n)
        epoch_loss, n_batches = 0.0, 0
        for i in range(0, n, bs):
            idx = torch.as_tensor(perm[i : i + bs], dtype=torch.long)
            pred = forward(model, tuple(t[idx] for t in train_inputs))
            loss = ((pred - train_targets[idx]) ** 2).mean()
            if not math.isfinite(float(loss)):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss)
            n_batches += 1
        vl = val_loss()
        history.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / max(n_batches, 1),
                "val_loss": vl,
                "terms": {"mse": vl},
            }
        )
        if vl < best_val:
            best_val, best_epoch, since_best = vl, epoch, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            since_best += 1
            if since_best > opt_cfg.early_stop_patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return FitResult(history, best_val, best_epoch)
