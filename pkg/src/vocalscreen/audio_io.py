"""Audio loading, resampling, silence trimming and manifest parsing."""

from __future__ import annotations

import csv
import enum
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class AudioFormatError(ValueError):
    """The file is not a well-formed RIFF/WAVE file."""


class UnsupportedAudioError(ValueError):
    """The WAVE file uses a codec or sample width we do not decode."""


class EmptyAudioError(ValueError):
    """The WAVE data chunk holds no samples."""


class ManifestError(ValueError):
    """A manifest row failed validation."""


class PretrainClass(enum.Enum):
    COUGH = "cough"
    SNEEZE = "sneeze"
    SPEECH = "speech"
    NOISE = "noise"


class CovidClass(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


ClassLabel = PretrainClass | CovidClass


class AudioType(enum.Enum):
    COUGH = "cough"
    BREATH = "breath"
    SPEECH = "speech"


_LABEL_ALIASES: dict[str, ClassLabel] = {
    "cough": PretrainClass.COUGH,
    "sneeze": PretrainClass.SNEEZE,
    "speech": PretrainClass.SPEECH,
    "noise": PretrainClass.NOISE,
    "positive": CovidClass.POSITIVE,
    "covid_positive": CovidClass.POSITIVE,
    "negative": CovidClass.NEGATIVE,
    "covid_negative": CovidClass.NEGATIVE,
}


def parse_label(text: str) -> ClassLabel:
    try:
        return _LABEL_ALIASES[text.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown label {text!r}") from None


def label_name(label: ClassLabel) -> str:
    if isinstance(label, CovidClass):
        return "covid_" + label.value
    return label.value


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    subject_id: str = ""
    label: ClassLabel | None = None
    audio_type: AudioType = AudioType.COUGH
    source_path: str = ""
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


# --------------------------------------------------------------------------
# WAV I/O

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def _decode_pcm(data: bytes, bits: int) -> np.ndarray:
    if bits == 8:
        # 8-bit WAV is unsigned with a 128 offset
        return (np.frombuffer(data, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    if bits == 16:
        return np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    if bits == 24:
        raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        return ints.astype(np.float64) / float(1 << 23)
    if bits == 32:
        return np.frombuffer(data, dtype="<i4").astype(np.float64) / float(1 << 31)
    raise UnsupportedAudioError(f"unsupported PCM sample width: {bits} bits")


def load_wav(path, subject_id: str = "", label: ClassLabel | None = None,
             audio_type: AudioType = AudioType.COUGH) -> AudioClip:
    """Read a RIFF/WAVE file into a mono clip with samples scaled to [-1, 1]."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        chunk_id = blob[pos:pos + 4]
        (size,) = struct.unpack("<I", blob[pos + 4:pos + 8])
        body = blob[pos + 8:pos + 8 + size]
        if len(body) < size and chunk_id != b"data":
            raise AudioFormatError(f"{path}: truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            if size < 16:
                raise AudioFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _WAVE_FORMAT_EXTENSIBLE and size >= 26:
                # the real codec sits in the first two bytes of the sub-format GUID
                (sub,) = struct.unpack("<H", body[24:26])
                fmt = (sub,) + fmt[1:]
        elif chunk_id == b"data":
            data = body
        pos += 8 + size + (size & 1)

    if fmt is None or data is None:
        raise AudioFormatError(f"{path}: missing fmt or data chunk")
    codec, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise AudioFormatError(f"{path}: invalid channel count or sample rate")
    if block_align != channels * ((bits + 7) // 8):
        raise AudioFormatError(f"{path}: inconsistent block alignment")
    usable = len(data) - len(data) % block_align
    data = data[:usable]
    if usable == 0:
        raise EmptyAudioError(f"{path}: no audio samples")

    if codec == _WAVE_FORMAT_PCM:
        samples = _decode_pcm(data, bits)
    elif codec == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    elif codec == _WAVE_FORMAT_IEEE_FLOAT and bits == 64:
        samples = np.frombuffer(data, dtype="<f8").copy()
    else:
        raise UnsupportedAudioError(f"{path}: unsupported codec {codec:#06x} / {bits} bits")

    samples = samples.reshape(-1, channels).mean(axis=1)
    if not np.all(np.isfinite(samples)):
        raise AudioFormatError(f"{path}: non-finite samples")
    return AudioClip(samples=samples, sample_rate=int(rate), subject_id=subject_id,
                     label=label, audio_type=audio_type, source_path=str(path))


def write_wav(path, samples, sample_rate: int) -> None:
    """Write 16-bit little-endian PCM. ``samples`` is (n,) or (n, channels)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    ints = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    data = ints.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, _WAVE_FORMAT_PCM, channels, sample_rate,
                                    sample_rate * channels * 2, channels * 2, 16)
    header += b"data" + struct.pack("<I", len(data))
    Path(path).write_bytes(header + data + (b"\x00" if len(data) & 1 else b""))


# --------------------------------------------------------------------------
# Resampling

def resample(clip: AudioClip, target_rate: int, zero_crossings: int = 16) -> AudioClip:
    """Band-limited resampling by windowed-sinc interpolation.

    The low-pass cutoff is ``0.45 * min(source, target)`` Hz and the kernel
    spans ``zero_crossings`` lobes either side, Blackman-windowed. Taps are
    renormalised to unit sum so constant signals are preserved exactly.
    """
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    src = clip.sample_rate
    if target_rate == src:
        return clip
    x = clip.samples
    n_out = int(round(len(x) * target_rate / src))
    cutoff = 0.45 * min(src, target_rate) / src  # cycles per input sample
    half_width = zero_crossings / (2.0 * cutoff)  # input samples
    taps = int(np.ceil(half_width))

    t = np.arange(n_out) * (src / target_rate)
    base = np.floor(t).astype(np.int64)
    offsets = np.arange(-taps, taps + 2)
    out = np.empty(n_out)
    # chunk the output so the (n_out, taps) work matrix stays small
    chunk = max(1, 2_000_000 // len(offsets))
    for lo in range(0, n_out, chunk):
        hi = min(n_out, lo + chunk)
        idx = base[lo:hi, None] + offsets[None, :]
        dist = t[lo:hi, None] - idx
        inside = (idx >= 0) & (idx < len(x)) & (np.abs(dist) <= half_width)
        w = 2 * cutoff * np.sinc(2 * cutoff * dist)
        w *= 0.42 + 0.5 * np.cos(np.pi * dist / half_width) + 0.08 * np.cos(2 * np.pi * dist / half_width)
        w = np.where(inside, w, 0.0)
        vals = x[np.clip(idx, 0, len(x) - 1)]
        out[lo:hi] = (w * vals).sum(axis=1) / w.sum(axis=1)
    return replace(clip, samples=out, sample_rate=int(target_rate))


# --------------------------------------------------------------------------
# Silence trimming

def trim_silence(clip: AudioClip, margin_ms: float = 50.0, frame_ms: float = 10.0,
                 threshold_ratio: float = 0.1) -> AudioClip:
    """Remove silent stretches with a short-time energy detector.

    Frames whose mean energy is below ``threshold_ratio`` times the median
    frame energy are silent. Every kept region is widened by ``margin_ms`` on
    both sides. An all-silent clip keeps its loudest frame plus margins and
    gets ``metadata["all_silent"] = True``.
    """
    x = clip.samples
    n = len(x)
    if n == 0:
        raise EmptyAudioError("cannot trim an empty clip")
    frame = max(1, int(round(frame_ms * clip.sample_rate / 1000.0)))
    margin = int(round(margin_ms * clip.sample_rate / 1000.0))
    n_frames = -(-n // frame)
    padded = np.zeros(n_frames * frame)
    padded[:n] = x
    energy = (padded.reshape(n_frames, frame) ** 2).sum(axis=1)
    # the final partial frame is averaged over its real length only
    lengths = np.full(n_frames, frame, dtype=np.float64)
    lengths[-1] = n - (n_frames - 1) * frame
    energy /= lengths

    threshold = threshold_ratio * np.median(energy)
    # a zero median would mark digital silence as voiced
    voiced = energy >= threshold if threshold > 0 else energy > 0
    all_silent = not voiced.any()
    if all_silent:
        voiced = np.zeros(n_frames, dtype=bool)
        voiced[int(np.argmax(energy))] = True

    keep = np.zeros(n, dtype=bool)
    for f in np.flatnonzero(voiced):
        keep[f * frame:min(n, (f + 1) * frame)] = True
    if margin > 0:
        # dilate kept samples by the margin on both sides
        edges = np.diff(np.concatenate(([0], keep.view(np.int8), [0])))
        starts = np.flatnonzero(edges == 1)
        stops = np.flatnonzero(edges == -1)
        for a, b in zip(starts, stops):
            keep[max(0, a - margin):min(n, b + margin)] = True

    meta = dict(clip.metadata)
    meta["all_silent"] = bool(all_silent)
    return replace(clip, samples=x[keep].copy(), metadata=meta)


# --------------------------------------------------------------------------
# Manifest

@dataclass(frozen=True)
class ManifestEntry:
    source_path: str
    subject_id: str
    label: ClassLabel
    audio_type: AudioType
    dataset_name: str


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...]
    root: str = ""

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.source_path)
        return p if p.is_absolute() or not self.root else Path(self.root) / p

    def subjects(self) -> list[str]:
        return sorted({e.subject_id for e in self.entries})


MANIFEST_HEADER = ["path", "subject_id", "label", "audio_type", "dataset"]


def parse_manifest_rows(rows, root: str = "") -> Manifest:
    entries = []
    seen: dict[str, int] = {}
    dupes = []
    for lineno, row in rows:
        missing = [k for k in MANIFEST_HEADER if not (row.get(k) or "").strip()]
        if missing:
            raise ManifestError(f"row {lineno}: empty field(s) {', '.join(missing)}")
        path = row["path"].strip()
        try:
            label = parse_label(row["label"])
        except ValueError:
            raise ManifestError(f"row {lineno}: unknown label {row['label']!r}") from None
        try:
            audio_type = AudioType(row["audio_type"].strip().lower())
        except ValueError:
            raise ManifestError(f"row {lineno}: unknown audio_type {row['audio_type']!r}") from None
        if path in seen:
            dupes.append(path)
        seen[path] = lineno
        entries.append(ManifestEntry(path, row["subject_id"].strip(), label, audio_type,
                                     row["dataset"].strip()))
    if dupes:
        raise ManifestError(f"duplicate path(s): {', '.join(sorted(set(dupes)))}")
    return Manifest(tuple(entries), root=root)


def load_manifest(path) -> Manifest:
    """Parse a ``path,subject_id,label,audio_type,dataset`` CSV manifest.

    Relative audio paths resolve against the manifest's directory.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        rows = list(enumerate(reader, start=2))
    return parse_manifest_rows(rows, root=str(path.parent))


def write_manifest(path, entries) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in entries:
            w.writerow([e.source_path, e.subject_id, label_name(e.label), e.audio_type.value,
                        e.dataset_name])
