"""Synthetic benchmark corpus: four pre-training classes and two screening classes.

Pre-training classes: cough = band-passed noise bursts, sneeze = chirps,
speech = harmonic tone bursts, noise = click trains. Screening classes are
noise bursts whose centre band depends on the class and on a per-subject
"voice" factor shared by all of that subject's recordings. Bursts sit at
random times over a faint noise floor, with leading and trailing digital
silence so the trimming stage has something to do.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import butter, chirp, sosfilt

from .audio_io import AudioType, CovidClass, ManifestEntry, PretrainClass, write_manifest, write_wav

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    clips_per_class: int = 40
    n_positive: int = 60
    n_negative: int = 60
    clips_per_subject: int = 3
    sample_rate: int = SAMPLE_RATE
    negative_hz: float = 1000.0
    positive_hz: float = 1700.0
    voice_spread: float = 0.15
    burst_bandwidth: float = 0.35   # relative to the centre frequency
    min_duration: float = 1.0
    max_duration: float = 2.0
    floor_db: tuple = (-60.0, -35.0)  # background level range, dB re full scale
    distractor_prob: float = 0.0      # chance of an unrelated sound in a clip
    peak_db: tuple = (-25.0, -3.0)    # clip peak level range, dB re full scale
    cue: str = "pair"                 # "pair" co-occurrence or "band" shift
    low_hz: float = 700.0             # bands of the "pair" cue
    high_hz: float = 2200.0


def _floor(rng, n, cfg):
    """Gaussian background, randomly tilted towards low or high frequencies."""
    level = 10 ** (rng.uniform(*cfg.floor_db) / 20)
    x = rng.standard_normal(n + 1)
    tilt = rng.uniform(-0.9, 0.9)
    x = x[1:] + tilt * x[:-1]
    return level * x / np.sqrt(1 + tilt ** 2)


def _band_noise(rng, n, centre, rel_bw, sr):
    lo = max(centre * (1 - rel_bw / 2), 20.0)
    hi = min(centre * (1 + rel_bw / 2), 0.45 * sr)
    sos = butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
    return sosfilt(sos, rng.standard_normal(n + 256))[256:]


def _burst_envelope(n, rng):
    t = np.arange(n) / n
    attack = np.minimum(t / 0.08, 1.0)
    return attack * np.exp(-t * rng.uniform(2.0, 4.0))


def _place(signal, burst, rng, taken):
    """Add ``burst`` at a random offset that does not overlap earlier bursts."""
    n, m = len(signal), len(burst)
    for _ in range(50):
        start = int(rng.integers(0, n - m))
        if all(start + m <= a or start >= b for a, b in taken):
            break
    signal[start:start + m] += burst
    taken.append((start, start + m))


def _normalise(x, rng, cfg):
    peak = np.max(np.abs(x))
    return x * (10 ** (rng.uniform(*cfg.peak_db) / 20) / peak) if peak > 0 else x


def _pad_silence(x, rng, sr):
    lead = np.zeros(int(rng.uniform(0.0, 0.15) * sr))
    tail = np.zeros(int(rng.uniform(0.0, 0.15) * sr))
    return np.concatenate([lead, x, tail])


def _duration(rng, cfg):
    return int(rng.uniform(cfg.min_duration, cfg.max_duration) * cfg.sample_rate)


def _distractor(x, rng, taken, cfg):
    """A speech-like tone burst or a short click cluster, unrelated to the label."""
    sr = cfg.sample_rate
    if rng.random() < 0.5:
        m = int(rng.uniform(0.1, 0.2) * sr)
        t = np.arange(m) / sr
        f0 = rng.uniform(100, 250)
        burst = sum(np.sin(2 * np.pi * k * f0 * t) / k for k in range(1, 6)) * np.hanning(m)
    else:
        m = int(0.15 * sr)
        burst = np.zeros(m)
        ring = np.exp(-np.arange(32) / 4.0) * np.sin(2 * np.pi * 3000 / sr * np.arange(32))
        for i in rng.integers(0, m - 32, size=int(rng.integers(3, 8))):
            burst[i:i + 32] += ring
    level = rng.uniform(0.3, 1.0) * np.max(np.abs(x)) / np.max(np.abs(burst))
    _place(x, level * burst, rng, taken)


def pretrain_clip(cls: PretrainClass, rng, cfg: SynthConfig = SynthConfig()) -> np.ndarray:
    sr = cfg.sample_rate
    n = _duration(rng, cfg)
    x = _floor(rng, n, cfg)
    taken: list = []
    if cls is PretrainClass.COUGH:
        for _ in range(int(rng.integers(2, 4))):
            m = int(rng.uniform(0.08, 0.15) * sr)
            burst = _band_noise(rng, m, rng.uniform(500, 3000), 0.35, sr)
            _place(x, burst * _burst_envelope(m, rng), rng, taken)
    elif cls is PretrainClass.SNEEZE:
        for _ in range(int(rng.integers(1, 3))):
            m = int(rng.uniform(0.2, 0.35) * sr)
            t = np.arange(m) / sr
            sweep = chirp(t, rng.uniform(300, 800), t[-1], rng.uniform(2000, 5000))
            _place(x, sweep * np.hanning(m), rng, taken)
    elif cls is PretrainClass.SPEECH:
        f0 = rng.uniform(100, 250)
        for _ in range(int(rng.integers(3, 5))):
            m = int(rng.uniform(0.1, 0.18) * sr)
            t = np.arange(m) / sr
            f = f0 * rng.uniform(0.9, 1.1)
            tone = sum(np.sin(2 * np.pi * k * f * t) / k for k in range(1, 6))
            _place(x, tone * np.hanning(m), rng, taken)
    elif cls is PretrainClass.NOISE:
        rate = rng.uniform(20, 80)
        ring = np.exp(-np.arange(32) / 4.0) * np.sin(2 * np.pi * 3000 / sr * np.arange(32))
        for pos in np.arange(rng.uniform(0, 1 / rate), n / sr, 1 / rate):
            i = int(pos * sr)
            seg = x[i:i + len(ring)]
            seg += rng.uniform(0.5, 1.0) * ring[:len(seg)]
    else:
        raise ValueError(f"unknown class {cls}")
    return _pad_silence(_normalise(x, rng, cfg), rng, sr)


def covid_clip(positive: bool, voice: float, cfg: SynthConfig, rng) -> np.ndarray:
    """One screening recording.

    ``band`` cue: bursts centred near the class band times the subject's
    voice factor. ``pair`` cue: both classes carry the same low- and
    high-band energy, but positives sound the two bands together within
    each burst while negatives sound them in separate bursts, so the
    class-mean spectrum is the same and only the burst structure differs.
    """
    sr = cfg.sample_rate
    n = _duration(rng, cfg)
    x = _floor(rng, n, cfg)
    taken: list = []
    n_bursts = int(rng.integers(2, 4))

    def burst(centres):
        m = int(rng.uniform(0.08, 0.13) * sr)
        b = sum(_band_noise(rng, m, c * voice * rng.uniform(0.95, 1.05), cfg.burst_bandwidth, sr)
                for c in centres)
        _place(x, b * _burst_envelope(m, rng), rng, taken)

    if cfg.cue == "band":
        for _ in range(n_bursts):
            burst([cfg.positive_hz if positive else cfg.negative_hz])
    elif cfg.cue == "pair":
        for _ in range(n_bursts):
            if positive:
                burst([cfg.low_hz, cfg.high_hz])
            else:
                burst([cfg.low_hz])
                burst([cfg.high_hz])
    else:
        raise ValueError(f"unknown cue {cfg.cue!r}")
    if rng.random() < cfg.distractor_prob:
        _distractor(x, rng, taken, cfg)
    return _pad_silence(_normalise(x, rng, cfg), rng, sr)


def generate(out_dir, cfg: SynthConfig = SynthConfig()) -> tuple[Path, Path]:
    """Write WAVs plus ``pretrain.csv`` and ``covid.csv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "pretrain").mkdir(parents=True, exist_ok=True)
    (out / "covid").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    pre_entries = []
    for cls in PretrainClass:
        for i in range(cfg.clips_per_class):
            rel = f"pretrain/{cls.value}_{i:03d}.wav"
            write_wav(out / rel, pretrain_clip(cls, rng, cfg), cfg.sample_rate)
            pre_entries.append(ManifestEntry(rel, f"pt-{cls.value}-{i:03d}", cls,
                                             AudioType.COUGH, "synth"))

    covid_entries = []
    subjects = [(f"neg{i:03d}", False) for i in range(cfg.n_negative)]
    subjects += [(f"pos{i:03d}", True) for i in range(cfg.n_positive)]
    for sid, positive in subjects:
        voice = rng.uniform(1 - cfg.voice_spread, 1 + cfg.voice_spread)
        label = CovidClass.POSITIVE if positive else CovidClass.NEGATIVE
        for j in range(cfg.clips_per_subject):
            rel = f"covid/{sid}_{j}.wav"
            write_wav(out / rel, covid_clip(positive, voice, cfg, rng), cfg.sample_rate)
            covid_entries.append(ManifestEntry(rel, sid, label, AudioType.COUGH, "synth"))

    pre_path, covid_path = out / "pretrain.csv", out / "covid.csv"
    write_manifest(pre_path, pre_entries)
    write_manifest(covid_path, covid_entries)
    return pre_path, covid_path
