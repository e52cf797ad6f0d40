"""Fixed-segment acoustic features.

Every recording is cut into exactly ``S`` frames of ``F`` samples whatever its
length; the hop between frame starts is real-valued and the starts are
rounded. Each frame yields ``D`` spectral values (MFCCs or linearly spaced
log filterbank energies); velocity and acceleration rows are stacked below,
then one zero-crossing-rate row and one kurtosis row, for a ``(3D + 2, S)``
matrix.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audio_io import AudioClip

LOG_FLOOR = 1e-10

MFCC_GRID = (13, 26, 39, 52, 65)
FBANK_GRID = tuple(range(40, 201, 20))
FRAME_GRID = (512, 1024, 2048, 4096)
SEGMENT_GRID = (70, 100, 120, 150, 200)


class FeatureKind(str, enum.Enum):
    MFCC = "mfcc"
    LINEAR_FBANK = "linear_fbank"


@dataclass(frozen=True)
class FeatureConfig:
    kind: FeatureKind = FeatureKind.MFCC
    M: int = 39
    B: int = 60
    F: int = 1024
    S: int = 150
    sample_rate: int = 16000
    allow_off_grid: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", FeatureKind(self.kind))
        for name in ("M", "B", "F", "S", "sample_rate"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.allow_off_grid:
            checks = [("F", self.F, FRAME_GRID), ("S", self.S, SEGMENT_GRID)]
            if self.kind is FeatureKind.MFCC:
                checks.append(("M", self.M, MFCC_GRID))
            else:
                checks.append(("B", self.B, FBANK_GRID))
            for name, value, grid in checks:
                if value not in grid:
                    raise ValueError(f"{name}={value} is not in the grid {grid}; "
                                     "set allow_off_grid to override")

    @property
    def n_static(self) -> int:
        return self.M if self.kind is FeatureKind.MFCC else self.B

    @property
    def rows(self) -> int:
        return 3 * self.n_static + 2

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.S)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(**d)

    def key(self) -> str:
        if self.kind is FeatureKind.MFCC:
            return f"mfcc-M{self.M}-F{self.F}-S{self.S}"
        return f"fbank-B{self.B}-F{self.F}-S{self.S}"


def primary_feature_grid(kinds=(FeatureKind.MFCC, FeatureKind.LINEAR_FBANK)):
    """Every (kind, M|B, F, S) combination of the primary-feature grid."""
    out = []
    for kind in kinds:
        sizes = MFCC_GRID if FeatureKind(kind) is FeatureKind.MFCC else FBANK_GRID
        for n in sizes:
            for F in FRAME_GRID:
                for S in SEGMENT_GRID:
                    if FeatureKind(kind) is FeatureKind.MFCC:
                        out.append(FeatureConfig(kind=kind, M=n, F=F, S=S))
                    else:
                        out.append(FeatureConfig(kind=kind, B=n, F=F, S=S))
    return out


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    config: FeatureConfig
    subject_id: str = ""
    label: object = None
    metadata: dict = field(default_factory=dict, compare=False)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class FramePlan:
    starts: np.ndarray
    F: int
    delta: float
    padded_length: int
    original_length: int

    @property
    def padded(self) -> bool:
        return self.padded_length != self.original_length


def plan_frames(L: int, F: int, S: int) -> FramePlan:
    """Place exactly ``S`` frames of length ``F`` over ``L`` samples.

    Signals shorter than one frame are zero-padded to ``F``. The frame overlap
    ``delta = F - step`` may be negative, in which case frames leave gaps.
    """
    if F < 1 or S < 1:
        raise ValueError("F and S must be positive")
    Lp = max(L, F)
    if S == 1:
        return FramePlan(np.zeros(1, dtype=np.int64), F, float(F), Lp, L)
    step = (Lp - F) / (S - 1)
    # round half away from zero, not numpy's banker's rounding
    starts = np.floor(np.arange(S) * step + 0.5).astype(np.int64)
    return FramePlan(starts, F, F - step, Lp, L)


def frame_signal(x: np.ndarray, plan: FramePlan) -> np.ndarray:
    """(S, F) array of frames described by ``plan``."""
    if len(x) < plan.padded_length:
        x = np.concatenate([x, np.zeros(plan.padded_length - len(x))])
    idx = plan.starts[:, None] + np.arange(plan.F)[None, :]
    return x[idx]


# --------------------------------------------------------------------------
# Filterbanks

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _triangles(edges_hz: np.ndarray, F: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on the rfft bins; ``edges_hz`` holds n+2 points."""
    freqs = np.arange(F // 2 + 1) * sample_rate / F
    lo, mid, hi = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


@lru_cache(maxsize=64)
def mel_filterbank(n_filters: int, F: int, sample_rate: int) -> np.ndarray:
    """(n_filters, F//2+1) HTK-mel triangular filters spanning 0 .. sr/2."""
    mels = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_filters + 2)
    fb = _triangles(mel_to_hz(mels), F, sample_rate)
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=64)
def linear_filterbank(n_filters: int, F: int, sample_rate: int) -> np.ndarray:
    """(n_filters, F//2+1) triangles with centres k*sr/(2(n+1)), k=1..n."""
    edges = np.linspace(0.0, sample_rate / 2.0, n_filters + 2)
    fb = _triangles(edges, F, sample_rate)
    fb.setflags(write=False)
    return fb


def linear_filter_centres(n_filters: int, sample_rate: int) -> np.ndarray:
    return np.linspace(0.0, sample_rate / 2.0, n_filters + 2)[1:-1]


@lru_cache(maxsize=64)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; ``dct_matrix(n) @ v`` transforms ``v``."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    D = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    D[0] /= np.sqrt(2.0)
    D.setflags(write=False)
    return D


@lru_cache(maxsize=16)
def _hamming(F: int) -> np.ndarray:
    w = np.hamming(F)
    w.setflags(write=False)
    return w


def power_spectrum(frames: np.ndarray) -> np.ndarray:
    """Hamming-windowed |rfft|^2 of each row of ``frames``."""
    F = frames.shape[-1]
    return np.abs(np.fft.rfft(frames * _hamming(F), n=F, axis=-1)) ** 2


def _log_energies(frames: np.ndarray, fb: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(power_spectrum(frames) @ fb.T, LOG_FLOOR))


def mfcc_frame(frame, M: int, sample_rate: int) -> np.ndarray:
    """First ``M`` cepstral coefficients of one frame (M mel filters)."""
    frame = np.asarray(frame, dtype=np.float64)
    logmel = _log_energies(frame[None, :], mel_filterbank(M, len(frame), sample_rate))
    return (logmel @ dct_matrix(M).T)[0]


def linear_logenergy_frame(frame, B: int, sample_rate: int) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    return _log_energies(frame[None, :], linear_filterbank(B, len(frame), sample_rate))[0]


def append_deltas(static: np.ndarray, width: int = 2) -> np.ndarray:
    """Stack ``[static; velocity; acceleration]`` along the feature axis.

    Velocity is the regression delta over +-``width`` frames with the edge
    columns replicated; acceleration is the delta of velocity.
    """
    static = np.asarray(static, dtype=np.float64)
    vel = _delta(static, width)
    acc = _delta(vel, width)
    return np.vstack([static, vel, acc])


def _delta(x: np.ndarray, width: int) -> np.ndarray:
    S = x.shape[1]
    padded = np.pad(x, ((0, 0), (width, width)), mode="edge")
    num = np.zeros_like(x)
    for n in range(1, width + 1):
        num += n * (padded[:, width + n:width + n + S] - padded[:, width - n:width - n + S])
    return num / (2.0 * sum(n * n for n in range(1, width + 1)))


def zcr_frame(frame) -> float:
    frame = np.asarray(frame)
    if len(frame) < 2:
        raise ValueError("frame needs at least two samples")
    return float(_zcr(frame[None, :])[0])


def _zcr(frames: np.ndarray) -> np.ndarray:
    positive = frames >= 0  # zero counts as positive
    return (positive[:, 1:] != positive[:, :-1]).sum(axis=1) / (frames.shape[1] - 1)


def kurtosis_frame(frame) -> float:
    frame = np.asarray(frame, dtype=np.float64)
    if len(frame) < 2:
        raise ValueError("frame needs at least two samples")
    return float(_kurtosis(frame[None, :])[0])


def _kurtosis(frames: np.ndarray) -> np.ndarray:
    d = frames - frames.mean(axis=1, keepdims=True)
    m2 = (d ** 2).mean(axis=1)
    m4 = (d ** 4).mean(axis=1)
    safe = np.where(m2 < 1e-12, 1.0, m2)
    return np.where(m2 < 1e-12, 0.0, m4 / safe ** 2)


def extract_features(clip: AudioClip, cfg: FeatureConfig) -> FeatureMatrix:
    """Compute the ``(3D + 2, S)`` primary-feature matrix of a clip."""
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(f"clip is {clip.sample_rate} Hz but the config expects "
                         f"{cfg.sample_rate} Hz; resample first")
    plan = plan_frames(len(clip.samples), cfg.F, cfg.S)
    frames = frame_signal(np.asarray(clip.samples, dtype=np.float64), plan)
    if cfg.kind is FeatureKind.MFCC:
        logmel = _log_energies(frames, mel_filterbank(cfg.M, cfg.F, cfg.sample_rate))
        static = dct_matrix(cfg.M) @ logmel.T
    else:
        static = _log_energies(frames, linear_filterbank(cfg.B, cfg.F, cfg.sample_rate)).T
    values = np.vstack([append_deltas(static), _zcr(frames)[None, :], _kurtosis(frames)[None, :]])
    return FeatureMatrix(values=values, config=cfg, subject_id=clip.subject_id, label=clip.label,
                         metadata={"source_path": clip.source_path, "padded": plan.padded})


# --------------------------------------------------------------------------
# Feature files

_FEATURE_MAGIC = b"VSFM"


def save_feature_file(path, fm: FeatureMatrix) -> None:
    """Binary layout: magic, u32 rows, u32 cols, u32 header length, JSON
    config echo, then rows*cols little-endian float32 in row-major order."""
    header = json.dumps({"config": fm.config.to_dict(), "subject_id": fm.subject_id,
                         "source_path": fm.metadata.get("source_path", "")},
                        sort_keys=True).encode()
    rows, cols = fm.values.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_MAGIC + struct.pack("<III", rows, cols, len(header)) + header)
        fh.write(np.ascontiguousarray(fm.values, dtype="<f4").tobytes())


def load_feature_file(path) -> FeatureMatrix:
    blob = Path(path).read_bytes()
    if blob[:4] != _FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    rows, cols, hlen = struct.unpack("<III", blob[4:16])
    header = json.loads(blob[16:16 + hlen])
    values = np.frombuffer(blob[16 + hlen:], dtype="<f4").reshape(rows, cols).astype(np.float64)
    return FeatureMatrix(values=values, config=FeatureConfig.from_dict(header["config"]),
                         subject_id=header["subject_id"],
                         metadata={"source_path": header["source_path"]})


def save_feature_csv(path, fm: FeatureMatrix) -> None:
    np.savetxt(path, fm.values, delimiter=",", fmt="%.8g")
