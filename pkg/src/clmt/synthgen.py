"""Synthetic paired ECG/PPG generation, windowing, and dataset handling.

Each subject is a deterministic function of (seed, static attributes): the
static vector [age, sex, bmi, hr] causally shapes heart rate, pulse arrival
delay, and per-wave morphology, so conditioning ablations have a real signal
to lose. ECG windows are sums of per-beat Gaussian bumps (P, Q, R, S, T) on
a slow respiratory wander; PPG windows are smooth systolic + dicrotic pulse
trains delayed by the subject's pulse transit time relative to each R-peak.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

STATIC_DIM = 4  # [age, sex, bmi, resting-hr], all normalized to [-1, 1]

HR_BASE_BPM = 80.0
HR_SPAN_BPM = 36.0
PTT_BASE_MS = 200.0
PTT_AGE_MS = 68.0
PTT_BMI_MS = -22.0


class Modality(str, Enum):
    ECG = "ECG"
    PPG = "PPG"


@dataclass(frozen=True)
class StaticAttrs:
    """Subject-level attribute vector conditioning every pipeline stage."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 1:
            raise DataError(f"static attrs must be a vector, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError("static attrs contain non-finite entries")
        if np.any(np.abs(v) > 1.0 + 1e-6):
            raise DataError("static attrs must lie in [-1, 1]")
        object.__setattr__(self, "values", v)

    @property
    def k(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class WaveShape:
    """One Gaussian bump: offset from its anchor time, amplitude, width."""

    offset_s: float
    amp: float
    sigma_s: float


@dataclass(frozen=True)
class SubjectProfile:
    static: StaticAttrs
    heart_rate_bpm: float
    ptt_ms: float
    ecg_waves: tuple[WaveShape, ...]  # P, Q, R, S, T
    ppg_waves: tuple[WaveShape, ...]  # systolic, dicrotic (offsets from beat + ptt)
    wander_ecg: WaveShape  # offset_s reused as frequency in Hz
    wander_ppg: WaveShape
    noise_std: float

    def __post_init__(self):
        if not 40.0 <= self.heart_rate_bpm <= 120.0:
            raise DataError(f"heart rate {self.heart_rate_bpm} outside [40, 120] bpm")
        if not 100.0 <= self.ptt_ms <= 300.0:
            raise DataError(f"ptt {self.ptt_ms} outside [100, 300] ms")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")
        for w in self.ecg_waves + self.ppg_waves:
            if abs(w.amp) > 3.0 or w.sigma_s <= 0:
                raise DataError("morphology parameters out of range")


@dataclass
class SignalWindow:
    """One fixed-duration single-channel window with its annotations."""

    modality: Modality
    samples: np.ndarray  # (1, T) float32
    fs_hz: float
    subject_id: str
    static: StaticAttrs | None
    r_peak_idx: list[int] | None = None
    norm_mean: float | None = None
    norm_std: float | None = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float32)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2 or s.shape[0] != 1:
            raise DataError(f"samples must be (1, T), got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise DataError("window contains non-finite samples")
        self.samples = s
        if self.r_peak_idx is not None:
            idx = [int(i) for i in self.r_peak_idx]
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise DataError("r_peak_idx must be strictly increasing")
            if idx and (idx[0] < 0 or idx[-1] >= self.n_samples):
                raise DataError("r_peak_idx out of window bounds")
            self.r_peak_idx = idx

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[1])

    @property
    def x(self) -> np.ndarray:
        return self.samples[0]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.fs_hz


def _u(rng: np.random.Generator) -> float:
    return float(rng.uniform(-1.0, 1.0))


def profile_from_static(static: StaticAttrs, seed: int) -> SubjectProfile:
    """Derive the full morphology deterministically from (seed, static).

    Global amplitude scale rides on the BMI entry and heart rate on the HR
    entry, so the static vector is genuinely informative downstream.
    """
    if static.k != STATIC_DIM:
        raise DataError(f"expected {STATIC_DIM} static attrs, got {static.k}")
    age, sex, bmi, hr = (float(v) for v in static.values)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed) & 0xFFFFFFFF, 0x5EED)))

    heart_rate = HR_BASE_BPM + HR_SPAN_BPM * hr + 2.0 * _u(rng)
    ptt = PTT_BASE_MS + PTT_AGE_MS * age + PTT_BMI_MS * bmi + 6.0 * _u(rng)

    s = 1.0 + 0.35 * bmi
    ecg_waves = (
        WaveShape(-0.17 + 0.010 * _u(rng), (0.15 + 0.020 * _u(rng)) * s, 0.030 + 0.003 * _u(rng)),
        WaveShape(-0.035, -(0.20 + 0.030 * _u(rng)) * s, 0.011 + 0.0015 * _u(rng)),
        WaveShape(0.0, (0.75 + 0.035 * _u(rng)) * s, 0.012 + 0.0020 * _u(rng)),
        WaveShape(0.034 + 0.004 * _u(rng), -(0.22 + 0.030 * _u(rng)) * s, 0.012 + 0.0015 * _u(rng)),
        WaveShape(0.26 + 0.020 * _u(rng), (0.66 + 0.050 * _u(rng) + 0.030 * sex) * s, 0.100 + 0.010 * _u(rng)),
    )
    ps = 1.0 + 0.25 * bmi
    ppg_waves = (
        WaveShape(0.0, (1.00 + 0.080 * _u(rng)) * ps, 0.105 + 0.010 * _u(rng)),
        WaveShape(0.24 + 0.020 * _u(rng), (0.34 + 0.040 * _u(rng)) * ps, 0.090 + 0.008 * _u(rng)),
    )
    # Respiratory baseline wander; amplitude grows with the beat period so the
    # window-level variance (hence the z-scored peak height) stays flat in HR.
    rr = 60.0 / heart_rate
    wander_ecg = WaveShape(rng.uniform(0.15, 0.30), (0.62 + 0.05 * _u(rng)) * s * np.sqrt(rr), 0.0)
    wander_ppg = WaveShape(rng.uniform(0.15, 0.30), (0.45 + 0.05 * _u(rng)) * ps * np.sqrt(rr), 0.0)
    noise_std = float(rng.uniform(0.012, 0.030)) * s

    return SubjectProfile(
        static=static,
        heart_rate_bpm=float(heart_rate),
        ptt_ms=float(ptt),
        ecg_waves=ecg_waves,
        ppg_waves=ppg_waves,
        wander_ecg=wander_ecg,
        wander_ppg=wander_ppg,
        noise_std=noise_std,
    )


def gen_subject(seed: int) -> SubjectProfile:
    """Draw static attrs from the seed, then derive the morphology."""
    rng = np.random.default_rng(np.random.SeedSequence((int(seed) & 0xFFFFFFFF, 0xA77)))
    static = StaticAttrs(
        np.array(
            [
                rng.uniform(-1, 1),
                float(rng.choice([-1.0, 1.0])),
                rng.uniform(-1, 1),
                rng.uniform(-1, 1),
            ],
            dtype=np.float32,
        )
    )
    return profile_from_static(static, seed)


def _bump_train(t: np.ndarray, centers: np.ndarray, waves: tuple[WaveShape, ...]) -> np.ndarray:
    out = np.zeros_like(t)
    for w in waves:
        c = centers + w.offset_s
        out += w.amp * np.exp(-0.5 * ((t[None, :] - c[:, None]) / w.sigma_s) ** 2).sum(axis=0)
    return out


def _check_grid(duration_s: float, fs_hz: float) -> int:
    n = duration_s * fs_hz
    if abs(n - round(n)) > 1e-9:
        raise DataError(f"duration {duration_s}s not divisible at {fs_hz} Hz")
    return int(round(n))


def gen_paired_window(
    profile: SubjectProfile,
    duration_s: float,
    fs_ecg: float,
    fs_ppg: float,
    seed: int,
    subject_id: str = "",
) -> tuple[SignalWindow, SignalWindow]:
    """Generate one simultaneous (ECG, PPG) pair for the subject.

    PPG pulses trail each R-peak by the profile's pulse transit time; the
    analytic R-peak sample positions are recorded on the ECG window.
    """
    t_ecg = _check_grid(duration_s, fs_ecg)
    t_ppg = _check_grid(duration_s, fs_ppg)
    rr = 60.0 / profile.heart_rate_bpm
    if duration_s < 2.0 * rr:
        raise DataError(f"window of {duration_s}s holds fewer than two beats at {profile.heart_rate_bpm} bpm")

    rng = np.random.default_rng(np.random.SeedSequence((int(seed) & 0xFFFFFFFF, 0xB0B)))
    t0 = float(rng.uniform(0.0, rr))
    phase_e = float(rng.uniform(0, 2 * np.pi))
    phase_p = float(rng.uniform(0, 2 * np.pi))

    n_beats = int(np.ceil((duration_s + 2.0) / rr)) + 2
    beats = t0 + rr * np.arange(-2, n_beats)

    tt_e = np.arange(t_ecg) / fs_ecg
    ecg = _bump_train(tt_e, beats, profile.ecg_waves)
    ecg += profile.wander_ecg.amp * np.sin(2 * np.pi * profile.wander_ecg.offset_s * tt_e + phase_e)
    if profile.noise_std > 0:
        ecg += profile.noise_std * rng.standard_normal(t_ecg)

    tt_p = np.arange(t_ppg) / fs_ppg
    pulses = beats + profile.ptt_ms / 1000.0
    ppg = _bump_train(tt_p, pulses, profile.ppg_waves)
    ppg += profile.wander_ppg.amp * np.sin(2 * np.pi * profile.wander_ppg.offset_s * tt_p + phase_p)
    if profile.noise_std > 0:
        ppg += 0.5 * profile.noise_std * rng.standard_normal(t_ppg)

    r_idx = [int(round(tb * fs_ecg)) for tb in beats]
    r_idx = [i for i in r_idx if 0 <= i < t_ecg]

    ecg_w = SignalWindow(Modality.ECG, ecg.astype(np.float32), fs_ecg, subject_id, profile.static, r_peak_idx=r_idx)
    ppg_w = SignalWindow(Modality.PPG, ppg.astype(np.float32), fs_ppg, subject_id, profile.static)
    return ecg_w, ppg_w


def normalize(w: SignalWindow) -> SignalWindow:
    """Per-window z-score (population std); stores the undo statistics."""
    x = w.samples.astype(np.float64)
    mean = float(x.mean())
    std = float(x.std())
    if std <= 1e-12:
        raise DataError("cannot normalize a zero-variance window")
    z = ((x - mean) / std).astype(np.float32)
    return dataclasses.replace(w, samples=z, norm_mean=mean, norm_std=std)


def downsample(w: SignalWindow, factor: int) -> SignalWindow:
    """Keep every factor-th sample starting at index 0; annotations drop."""
    factor = int(factor)
    if factor < 1:
        raise DataError(f"downsample factor must be >= 1, got {factor}")
    if w.n_samples % factor != 0:
        raise DataError(f"length {w.n_samples} not divisible by factor {factor}")
    return dataclasses.replace(
        w,
        samples=np.ascontiguousarray(w.samples[:, ::factor]),
        fs_hz=w.fs_hz / factor,
        r_peak_idx=None,
    )


def split_dataset(windows, ratios, seed: int):
    """Partition by subject_id: no subject appears in two splits."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    subjects = sorted({w.subject_id for w in windows})
    if len(subjects) < len(ratios):
        raise DataError(f"{len(subjects)} subjects cannot fill {len(ratios)} splits")
    order = list(np.random.default_rng(seed).permutation(len(subjects)))
    shuffled = [subjects[i] for i in order]
    n = len(shuffled)
    bounds = [0]
    acc = 0.0
    for r in ratios:
        acc += r
        bounds.append(int(acc * n + 0.5))
    bounds[-1] = n
    assign: dict[str, int] = {}
    for si, (lo, hi) in enumerate(zip(bounds, bounds[1:])):
        for subj in shuffled[lo:hi]:
            assign[subj] = si
    out = [[] for _ in ratios]
    for w in windows:
        out[assign[w.subject_id]].append(w)
    return tuple(out)


# ---------------------------------------------------------------------------
# Dataset container and archive format
# ---------------------------------------------------------------------------

MANIFEST_SCHEMA_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")

FIELD_ORDER_DOC = (
    "window files are raw little-endian float32, row-major (channels, samples) "
    "with channels=1; window records list: id, pair_id, subject_id, modality, "
    "fs_hz, n_channels, n_samples, file, sha256, norm_mean, norm_std, "
    "r_peak_idx, seed"
)


@dataclass
class WindowPair:
    pair_id: str
    subject_id: str
    static: StaticAttrs
    ecg: SignalWindow
    ppg: SignalWindow
    seed: int


@dataclass
class SignalDataset:
    fs_hz: float
    duration_s: float
    seed: int
    pairs: list[WindowPair]
    split_of: dict[str, str]  # subject_id -> split name
    subject_meta: dict[str, dict] = field(default_factory=dict)
    profiles: dict[str, SubjectProfile] = field(default_factory=dict)

    def pairs_for(self, split: str) -> list[WindowPair]:
        return [p for p in self.pairs if self.split_of[p.subject_id] == split]

    def windows(self) -> list[SignalWindow]:
        out = []
        for p in self.pairs:
            out.extend([p.ecg, p.ppg])
        return out

    def manifest(self) -> dict:
        subjects = []
        for sid in sorted({p.subject_id for p in self.pairs}):
            rec = {"id": sid, "split": self.split_of[sid]}
            rec.update(self.subject_meta.get(sid, {}))
            subjects.append(rec)
        windows = []
        for p in self.pairs:
            for w in (p.ecg, p.ppg):
                wid = f"{p.pair_id}_{w.modality.value}"
                windows.append(
                    {
                        "id": wid,
                        "pair_id": p.pair_id,
                        "subject_id": p.subject_id,
                        "modality": w.modality.value,
                        "fs_hz": w.fs_hz,
                        "n_channels": 1,
                        "n_samples": w.n_samples,
                        "file": f"windows/{wid}.f32",
                        "sha256": hashlib.sha256(w.samples.astype("<f4").tobytes()).hexdigest(),
                        "norm_mean": w.norm_mean,
                        "norm_std": w.norm_std,
                        "r_peak_idx": w.r_peak_idx,
                        "static": [float(v) for v in w.static.values] if w.static is not None else None,
                        "seed": p.seed,
                    }
                )
        return {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "field_order": FIELD_ORDER_DOC,
            "fs_hz": self.fs_hz,
            "duration_s": self.duration_s,
            "seed": self.seed,
            "static_dim": STATIC_DIM,
            "subjects": subjects,
            "windows": windows,
            "splits": {
                name: sorted(s for s, sp in self.split_of.items() if sp == name) for name in SPLIT_NAMES
            },
        }

    def digest(self) -> str:
        blob = json.dumps(self.manifest(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def build_dataset(
    n_subjects: int,
    windows_per_subject: int,
    duration_s: float,
    fs_hz: float,
    seed: int,
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15),
) -> SignalDataset:
    """Generate, normalize, and split a full paired dataset."""
    if n_subjects < 1 or windows_per_subject < 1:
        raise DataError("need at least one subject and one window per subject")
    pairs: list[WindowPair] = []
    profiles: dict[str, SubjectProfile] = {}
    subject_meta: dict[str, dict] = {}
    reps: list[SignalWindow] = []
    for si in range(n_subjects):
        sid = f"s{si:04d}"
        subj_seed = int(np.random.SeedSequence((seed, si)).generate_state(1)[0])
        prof = gen_subject(subj_seed)
        profiles[sid] = prof
        subject_meta[sid] = {
            "static": [float(v) for v in prof.static.values],
            "heart_rate_bpm": prof.heart_rate_bpm,
            "ptt_ms": prof.ptt_ms,
        }
        for wi in range(windows_per_subject):
            w_seed = int(np.random.SeedSequence((seed, si, wi)).generate_state(1)[0])
            ecg, ppg = gen_paired_window(prof, duration_s, fs_hz, fs_hz, w_seed, subject_id=sid)
            pairs.append(
                WindowPair(
                    pair_id=f"{sid}_w{wi:03d}",
                    subject_id=sid,
                    static=prof.static,
                    ecg=normalize(ecg),
                    ppg=normalize(ppg),
                    seed=w_seed,
                )
            )
        reps.append(pairs[-1].ecg)
    split_lists = split_dataset(reps, ratios, seed)
    split_of: dict[str, str] = {}
    for name, ws in zip(SPLIT_NAMES, split_lists):
        for w in ws:
            split_of[w.subject_id] = name
    return SignalDataset(fs_hz, duration_s, seed, pairs, split_of, subject_meta, profiles)


def save_dataset(ds: SignalDataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "windows").mkdir(parents=True, exist_ok=True)
    manifest = ds.manifest()
    for p in ds.pairs:
        for w in (p.ecg, p.ppg):
            wid = f"{p.pair_id}_{w.modality.value}"
            (out / "windows" / f"{wid}.f32").write_bytes(w.samples.astype("<f4").tobytes())
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return out


def load_dataset(in_dir: str | Path) -> SignalDataset:
    root = Path(in_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DataError(f"no manifest.json under {root}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise DataError(f"unsupported dataset schema {manifest.get('schema_version')}")
    split_of: dict[str, str] = {}
    subject_meta: dict[str, dict] = {}
    for rec in manifest["subjects"]:
        split_of[rec["id"]] = rec["split"]
        subject_meta[rec["id"]] = {k: v for k, v in rec.items() if k not in ("id", "split")}

    by_pair: dict[str, dict] = {}
    for rec in manifest["windows"]:
        raw = (root / rec["file"]).read_bytes()
        x = np.frombuffer(raw, dtype="<f4").reshape(rec["n_channels"], rec["n_samples"])
        if hashlib.sha256(raw).hexdigest() != rec["sha256"]:
            raise DataError(f"window {rec['id']} failed its content hash")
        static = StaticAttrs(np.array(rec["static"], dtype=np.float32)) if rec["static"] else None
        w = SignalWindow(
            Modality(rec["modality"]),
            x.copy(),
            rec["fs_hz"],
            rec["subject_id"],
            static,
            r_peak_idx=rec["r_peak_idx"],
            norm_mean=rec["norm_mean"],
            norm_std=rec["norm_std"],
        )
        slot = by_pair.setdefault(
            rec["pair_id"], {"subject_id": rec["subject_id"], "static": static, "seed": rec["seed"]}
        )
        slot[rec["modality"]] = w
    pairs = [
        WindowPair(pid, slot["subject_id"], slot["static"], slot["ECG"], slot["PPG"], slot["seed"])
        for pid, slot in sorted(by_pair.items())
    ]
    return SignalDataset(manifest["fs_hz"], manifest["duration_s"], manifest["seed"], pairs, split_of, subject_meta)
