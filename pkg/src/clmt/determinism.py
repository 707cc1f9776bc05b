"""Deterministic-execution helpers.

All commands seed every RNG in use and, under the deterministic flag
(default on), pin torch to deterministic kernels and a single thread so
repeated runs produce byte-identical checkpoints and reports.
"""

from __future__ import annotations

import random

import numpy as np
import torch


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def enable_determinism() -> None:
    # Single-threaded execution keeps reduction orders stable across runs.
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def setup_run(seed: int, deterministic: bool = True) -> None:
    if deterministic:
        enable_determinism()
    seed_everything(seed)
