"""Evaluation stack: pointwise errors, correlation, R-peak F1, Gaussian
feature-space distance, spectral error, and latent-space diagnostics.

The feature-space distance follows the FID recipe: fit a Gaussian to
mean-pooled frozen-encoder latents per window on each side and compare the
two Gaussians in closed form. The feature extractor choice is this
artifact's own convention and is noted in every report header; absolute
values are not comparable across feature extractors, only orderings are.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .errors import DataError
from .synthgen import Modality, SignalDataset, SignalWindow
from .tokenizer import TokenizerModel

FD_FEATURE_NOTE = (
    "feature-space distance uses mean-pooled unconditioned frozen-encoder "
    "latents per window; absolute values depend on this extractor choice"
)

REPORT_SCHEMA_VERSION = 1


def _vec(x) -> np.ndarray:
    if isinstance(x, SignalWindow):
        return x.x.astype(np.float64)
    return np.asarray(x, dtype=np.float64).reshape(-1)


def rmse(pred, truth) -> float:
    a, b = _vec(pred), _vec(truth)
    if a.shape != b.shape:
        raise DataError("length mismatch")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def mae(pred, truth) -> float:
    a, b = _vec(pred), _vec(truth)
    if a.shape != b.shape:
        raise DataError("length mismatch")
    return float(np.mean(np.abs(a - b)))


def pcc(pred, truth) -> float:
    a, b = _vec(pred), _vec(truth)
    if a.shape != b.shape:
        raise DataError("length mismatch")
    sa, sb = a.std(), b.std()
    if sa <= 0 or sb <= 0:
        raise DataError("correlation undefined for zero-variance input")
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


# ---------------------------------------------------------------------------
# R-peak detection and matching
# ---------------------------------------------------------------------------

REFRACTORY_S = 0.25


def _moving_average(x: np.ndarray, win: int) -> np.ndarray:
    win = max(int(win), 1)
    kernel = np.ones(win) / win
    return np.convolve(x, kernel, mode="same")


def detect_r_peaks(ecg: SignalWindow) -> list[int]:
    """Derivative-emphasis local-maximum detector with an adaptive threshold
    at half the rolling envelope maximum and a 250 ms refractory window."""
    if ecg.fs_hz < 50:
        raise DataError(f"detector needs fs >= 50 Hz, got {ecg.fs_hz}")
    fs = ecg.fs_hz
    x = ecg.x.astype(np.float64)
    if x.size / fs < REFRACTORY_S:
        raise DataError("window shorter than the refractory period")
    detr = x - _moving_average(x, int(0.6 * fs))
    grad = np.diff(detr, prepend=detr[0])
    env = _moving_average(grad**2, int(0.06 * fs))
    # rolling max over a window long enough to always contain one beat,
    # including at the window edges (slowest supported rate is 40 bpm)
    half = max(int(1.6 * fs), 1)
    thr = np.empty_like(env)
    for i in range(env.size):
        lo, hi = max(0, i - half), min(env.size, i + half + 1)
        thr[i] = env[lo:hi].max()
    thr *= 0.5

    candidates = []
    for i in range(1, env.size - 1):
        if env[i] > env[i - 1] and env[i] >= env[i + 1] and env[i] >= thr[i] and env[i] > 0:
            candidates.append(i)

    refractory = int(REFRACTORY_S * fs)
    kept: list[int] = []
    for c in candidates:
        if kept and c - kept[-1] < refractory:
            if env[c] > env[kept[-1]]:
                kept[-1] = c
        else:
            kept.append(c)

    refine = max(int(0.06 * fs), 1)
    peaks = []
    for c in kept:
        lo, hi = max(0, c - refine), min(x.size, c + refine + 1)
        peaks.append(lo + int(np.argmax(detr[lo:hi])))
    peaks = sorted(set(peaks))
    out = [peaks[0]] if peaks else []
    for p in peaks[1:]:
        if p - out[-1] >= refractory:
            out.append(p)
        elif detr[p] > detr[out[-1]]:
            out[-1] = p
    return out


@dataclass
class PeakMatchResult:
    tp: int
    fp: int
    fn: int
    tolerance_ms: float

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise DataError("match counts must be non-negative")


def match_peaks(detected, truth, tolerance: int) -> tuple[int, int, int]:
    """Greedy chronological one-to-one matching within a sample tolerance."""
    i = j = tp = fp = fn = 0
    d, t = list(detected), list(truth)
    while i < len(d) and j < len(t):
        if abs(d[i] - t[j]) <= tolerance:
            tp += 1
            i += 1
            j += 1
        elif d[i] < t[j]:
            fp += 1
            i += 1
        else:
            fn += 1
            j += 1
    fp += len(d) - i
    fn += len(t) - j
    return tp, fp, fn


def r_peak_f1(pred_ecg: SignalWindow, true_peaks, tolerance_ms: float = 50.0) -> tuple[float, PeakMatchResult]:
    if pred_ecg.modality != Modality.ECG:
        raise DataError("R-peak scoring applies to ECG windows only")
    detected = detect_r_peaks(pred_ecg)
    truth = list(true_peaks or [])
    tol = int(round(tolerance_ms / 1000.0 * pred_ecg.fs_hz))
    tp, fp, fn = match_peaks(detected, truth, tol)
    result = PeakMatchResult(tp, fp, fn, tolerance_ms)
    if tp + fp + fn == 0:
        return 1.0, result
    return 2.0 * tp / (2.0 * tp + fp + fn), result


# ---------------------------------------------------------------------------
# Gaussian feature-space distance
# ---------------------------------------------------------------------------


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_from_features(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    fa = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    fb = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise DataError("feature sets must be (n, d) with matching d")
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise DataError("need at least 2 feature rows per side")
    mu_a, mu_b = fa.mean(0), fb.mean(0)
    cov_a = np.atleast_2d(np.cov(fa, rowvar=False))
    cov_b = np.atleast_2d(np.cov(fb, rowvar=False))
    root_a = _sqrtm_psd(cov_a)
    inner = _sqrtm_psd(root_a @ cov_b @ root_a)
    fd = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2.0 * inner))
    return max(fd, 0.0)


def latent_features(windows: list[SignalWindow], frozen_tokenizer: TokenizerModel) -> np.ndarray:
    """Mean-pooled unconditioned frozen-encoder latents, one row per window."""
    from .latent_tasks import encode_windows

    z = encode_windows(frozen_tokenizer, windows, conditioned=False, zero_prompt=True)
    return z.mean(dim=1).numpy().astype(np.float64)


def frechet_distance(windows_a, windows_b, frozen_tokenizer: TokenizerModel) -> float:
    if len(windows_a) < 2 or len(windows_b) < 2:
        raise DataError("need at least 2 windows per side")
    return frechet_from_features(
        latent_features(windows_a, frozen_tokenizer), latent_features(windows_b, frozen_tokenizer)
    )


# ---------------------------------------------------------------------------
# Spectral error
# ---------------------------------------------------------------------------

WELCH_SEGMENT_S = 2.0


def _welch_norm(x: np.ndarray, fs: float) -> tuple[np.ndarray, np.ndarray]:
    nper = int(WELCH_SEGMENT_S * fs)
    if x.size < nper:
        raise DataError(f"window shorter than one {WELCH_SEGMENT_S}s spectral segment")
    f, p = sps.welch(x, fs=fs, window="hann", nperseg=nper, noverlap=nper // 2)
    total = p.sum()
    if total <= 0:
        raise DataError("zero-power window has no spectrum to normalize")
    return f, p / total


def psd_rmse(pred, truth, fs: float) -> float:
    """RMSE between unit-total-power spectral densities, all bins to Nyquist."""
    a, b = _vec(pred), _vec(truth)
    if a.shape != b.shape:
        raise DataError("length mismatch")
    _, pa = _welch_norm(a, fs)
    _, pb = _welch_norm(b, fs)
    return float(np.sqrt(np.mean((pa - pb) ** 2)))


def psd_band_rmse(pred, truth, fs: float, split_hz: float = 20.0) -> tuple[float, float]:
    """Spectral RMSE split into bands at and below vs above `split_hz`."""
    a, b = _vec(pred), _vec(truth)
    f, pa = _welch_norm(a, fs)
    _, pb = _welch_norm(b, fs)
    low = f <= split_hz
    high = ~low
    lo = float(np.sqrt(np.mean((pa[low] - pb[low]) ** 2)))
    hi = float(np.sqrt(np.mean((pa[high] - pb[high]) ** 2))) if high.any() else 0.0
    return lo, hi


# ---------------------------------------------------------------------------
# Latent-space diagnostics
# ---------------------------------------------------------------------------


def _cardiac_phase(times_s: np.ndarray, peak_times_s: np.ndarray) -> np.ndarray:
    if peak_times_s.size < 2:
        return np.zeros_like(times_s)
    rr = float(np.mean(np.diff(peak_times_s)))
    phase = np.empty_like(times_s)
    for k, t in enumerate(times_s):
        j = np.searchsorted(peak_times_s, t, side="right") - 1
        if j < 0:
            phase[k] = ((t - peak_times_s[0]) / rr) % 1.0
        elif j >= peak_times_s.size - 1:
            phase[k] = ((t - peak_times_s[-1]) / rr) % 1.0
        else:
            span = peak_times_s[j + 1] - peak_times_s[j]
            phase[k] = (t - peak_times_s[j]) / span
    return np.clip(phase, 0.0, 1.0 - 1e-9)


def export_embeddings(dataset: SignalDataset, frozen_tokenizer: TokenizerModel, out: str | Path) -> Path:
    """Flat table of per-frame base-layer codeword vectors with modality,
    cardiac-phase, and split labels, for external projection tools."""
    import torch

    from . import rvq
    from .latent_tasks import encode_windows

    tok = frozen_tokenizer
    d = tok.cfg.latent_dim
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    header = ["window_id", "subject_id", "split", "modality", "frame_idx", "cardiac_phase"] + [
        f"e{i}" for i in range(d)
    ]
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for pair in dataset.pairs:
            peaks = np.asarray(pair.ecg.r_peak_idx or [], dtype=np.float64) / pair.ecg.fs_hz
            split = dataset.split_of[pair.subject_id]
            for w in (pair.ecg, pair.ppg):
                z = encode_windows(tok, [w], conditioned=True, zero_prompt=False)[0]
                enc = rvq.rvq_encode(z, tok.codebook)
                base_codes = enc.tokens.codes[0]
                vectors = tok.codebook.stages[0].entries[base_codes].numpy()
                times = np.arange(z.shape[0]) * tok.stride / w.fs_hz
                phases = _cardiac_phase(times, peaks)
                wid = f"{pair.pair_id}_{w.modality.value}"
                for i in range(z.shape[0]):
                    writer.writerow(
                        [wid, pair.subject_id, split, w.modality.value, i, f"{phases[i]:.6f}"]
                        + [f"{v:.7g}" for v in vectors[i]]
                    )
    return out_path


def load_embeddings(path: str | Path):
    rows = []
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = len([h for h in header if h.startswith("e")])
        for rec in reader:
            rows.append(rec)
    feats = np.array([[float(v) for v in rec[6 : 6 + d]] for rec in rows])
    labels = np.array([1.0 if rec[3] == Modality.ECG.value else 0.0 for rec in rows])
    splits = np.array([rec[2] for rec in rows])
    phases = np.array([float(rec[5]) for rec in rows])
    return feats, labels, splits, phases


def probe_from_arrays(
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_test: np.ndarray,
    y_test: np.ndarray,
    seed: int = 0,
    steps: int = 100,
    lr: float = 0.5,
) -> float:
    """Logistic probe: fixed-step full-batch gradient descent, then held-out
    accuracy."""
    if len(set(y_train.tolist())) < 2:
        raise DataError("probe needs both classes in the training labels")
    mu, sd = x_train.mean(0), x_train.std(0) + 1e-8
    xt = (x_train - mu) / sd
    xe = (x_test - mu) / sd
    rng = np.random.default_rng(seed)
    w = 0.01 * rng.standard_normal(xt.shape[1])
    b = 0.0
    for _ in range(steps):
        logits = xt @ w + b
        p = 1.0 / (1.0 + np.exp(-logits))
        grad_w = xt.T @ (p - y_train) / len(y_train)
        grad_b = float(np.mean(p - y_train))
        w -= lr * grad_w
        b -= lr * grad_b
    pred = (xe @ w + b) > 0
    return float(np.mean(pred == (y_test > 0.5)))


def modality_probe(embeddings_path: str | Path, seed: int = 0, shuffle_labels: bool = False) -> float:
    """Train the linear probe on train+val rows, report test-split accuracy."""
    feats, labels, splits, _ = load_embeddings(embeddings_path)
    if shuffle_labels:
        labels = np.random.default_rng(seed).permutation(labels)
    train_mask = splits != "test"
    test_mask = ~train_mask
    if not test_mask.any():
        raise DataError("no test-split rows in the embedding export")
    return probe_from_arrays(feats[train_mask], labels[train_mask], feats[test_mask], labels[test_mask], seed)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

SCALAR_KEYS = ("rmse", "mae", "pcc", "f1", "fd", "psd_rmse")


@dataclass
class MetricsReport:
    run_id: str
    model_kind: str
    scalars: dict
    per_window: list[dict]
    config_digest: str
    dataset_digest: str
    tags: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=lambda: [FD_FEATURE_NOTE])
    schema_version: int = REPORT_SCHEMA_VERSION

    def validate(self) -> None:
        s = self.scalars
        if s.get("rmse") is not None and s.get("mae") is not None:
            if not (s["rmse"] >= s["mae"] >= 0):
                raise DataError(f"rmse >= mae >= 0 violated: {s}")
        if s.get("pcc") is not None and not -1.0 <= s["pcc"] <= 1.0:
            raise DataError("pcc out of [-1, 1]")
        if s.get("f1") is not None and not 0.0 <= s["f1"] <= 1.0:
            raise DataError("f1 out of [0, 1]")
        for key in ("fd", "psd_rmse"):
            if s.get(key) is not None and s[key] < 0:
                raise DataError(f"{key} must be non-negative")
        for key in ("rmse", "mae", "pcc", "f1", "psd_rmse"):
            vals = [r[key] for r in self.per_window if r.get(key) is not None]
            if vals and s.get(key) is not None:
                if abs(float(np.mean(vals)) - s[key]) > 1e-9:
                    raise DataError(f"scalar {key} is not the macro mean of the per-window table")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()
