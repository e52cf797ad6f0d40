import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.signal import resample_poly

from vocalscreen.audio_io import (
    AudioClip,
    AudioFormatError,
    AudioType,
    CovidClass,
    EmptyAudioError,
    ManifestEntry,
    ManifestError,
    PretrainClass,
    UnsupportedAudioError,
    load_manifest,
    load_wav,
    resample,
    trim_silence,
    write_manifest,
    write_wav,
)


def _wav_bytes(payload: bytes, fmt=1, channels=1, rate=16000, bits=16):
    block = channels * bits // 8
    fmt_chunk = struct.pack("<HHIIHH", fmt, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt_chunk
    body += b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_int16_scaling(tmp_path):
    p = tmp_path / "a.wav"
    p.write_bytes(_wav_bytes(struct.pack("<3h", 0, 16384, -32768)))
    clip = load_wav(p)
    assert clip.sample_rate == 16000
    np.testing.assert_array_equal(clip.samples, [0.0, 0.5, -1.0])


def test_stereo_is_averaged(tmp_path):
    p = tmp_path / "s.wav"
    write_wav(p, np.column_stack([np.full(10, 0.5), np.zeros(10)]), 8000)
    np.testing.assert_allclose(load_wav(p).samples, 0.25, atol=1 / 32768)


def test_rate_read_from_header(tmp_path):
    p = tmp_path / "h.wav"
    x = np.linspace(-0.5, 0.5, 441)
    write_wav(p, x, 44100)
    clip = load_wav(p)
    assert clip.sample_rate == 44100
    assert len(clip) == 441


@pytest.mark.parametrize("bits,fmt,code,scale", [
    (8, 1, "B", None), (24, 1, None, None), (32, 1, "i", 2 ** 31), (32, 3, "f", 1.0)])
def test_other_sample_widths(tmp_path, bits, fmt, code, scale):
    vals = [0.0, 0.5, -0.25]
    if bits == 8:
        payload = bytes([128, 192, 96])
    elif bits == 24:
        payload = b"".join(int(v * 2 ** 23).to_bytes(3, "little", signed=True) for v in vals)
    elif fmt == 3:
        payload = struct.pack("<3f", *vals)
    else:
        payload = struct.pack("<3i", *(int(v * scale) for v in vals))
    p = tmp_path / "w.wav"
    p.write_bytes(_wav_bytes(payload, fmt=fmt, bits=bits))
    np.testing.assert_allclose(load_wav(p).samples, vals, atol=1e-6)


def test_wav_errors(tmp_path):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not a wave file at all")
    with pytest.raises(AudioFormatError):
        load_wav(bad)
    alaw = tmp_path / "alaw.wav"
    alaw.write_bytes(_wav_bytes(b"\x00\x01", fmt=6, bits=8))
    with pytest.raises(UnsupportedAudioError):
        load_wav(alaw)
    empty = tmp_path / "empty.wav"
    empty.write_bytes(_wav_bytes(b""))
    with pytest.raises(EmptyAudioError):
        load_wav(empty)


@given(st.lists(st.integers(-32768, 32767), min_size=1, max_size=300))
def test_int16_round_trip_is_exact(tmp_path_factory, ints):
    p = tmp_path_factory.mktemp("rt") / "x.wav"
    x = np.array(ints) / 32768.0
    write_wav(p, x, 16000)
    np.testing.assert_array_equal(load_wav(p).samples, x)


def _clip(x, sr=16000):
    return AudioClip(np.asarray(x, dtype=np.float64), sr)


def test_resample_identity():
    c = _clip(np.random.default_rng(0).standard_normal(100))
    assert resample(c, 16000) is c


def test_resample_preserves_dc():
    out = resample(_clip(np.full(44100, 0.7), 44100), 16000)
    np.testing.assert_allclose(out.samples[200:-200], 0.7, atol=1e-3)


@pytest.mark.parametrize("n", [44100, 44099, 12345])
def test_resample_length_matches_polyphase_reference(n):
    ref = len(resample_poly(np.zeros(n), 160, 441))
    out = resample(_clip(np.zeros(n), 44100), 16000)
    assert abs(len(out) - ref) <= 1
    assert out.sample_rate == 16000
    if n == 44100:
        assert abs(len(out) - 16000) <= 1


@given(st.floats(-1, 1), st.sampled_from([8000, 22050, 44100, 48000]))
def test_resample_round_trip_constant(value, rate):
    c = _clip(np.full(2000, value))
    back = resample(resample(c, rate), 16000)
    np.testing.assert_allclose(back.samples, value, atol=1e-12)


def test_resample_removes_content_above_cutoff():
    sr = 48000
    t = np.arange(sr) / sr
    tone = np.sin(2 * np.pi * 10000 * t)      # above 0.45 * 16 kHz
    out = resample(_clip(tone, sr), 16000)
    assert np.sqrt(np.mean(out.samples[500:-500] ** 2)) < 0.05


def test_trim_nothing_to_remove():
    x = np.sin(np.linspace(0, 200, 16000))
    out = trim_silence(_clip(x))
    np.testing.assert_array_equal(out.samples, x)
    assert out.metadata["all_silent"] is False


def test_trim_tone_gap_tone():
    sr = 16000
    tone = np.sin(2 * np.pi * 440 * np.arange(sr) / sr)
    x = np.concatenate([tone, np.zeros(2 * sr), tone])
    out = trim_silence(_clip(x), margin_ms=50)
    # kept: [0, 16000+800) and [48000-800, 64000)
    assert len(out) == 2 * 16000 + 2 * 800
    np.testing.assert_array_equal(out.samples[:16800], x[:16800])
    np.testing.assert_array_equal(out.samples[16800:], x[47200:])


def test_trim_all_zero_is_flagged():
    out = trim_silence(_clip(np.zeros(16000)), margin_ms=50, frame_ms=10)
    assert out.metadata["all_silent"] is True
    assert len(out) == 160 + 800


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=3000), st.floats(0, 100),
       st.floats(0.5, 40), st.floats(0, 2))
def test_trim_never_grows_or_empties(vals, margin, frame, ratio):
    c = _clip(vals)
    out = trim_silence(c, margin_ms=margin, frame_ms=frame, threshold_ratio=ratio)
    assert 1 <= len(out) <= len(c)


def test_trim_empty_rejected():
    with pytest.raises(EmptyAudioError):
        trim_silence(_clip(np.zeros(0)))


def _write_csv(path, rows):
    path.write_text("path,subject_id,label,audio_type,dataset\n" + "\n".join(rows) + "\n")


def test_manifest_parsing(tmp_path):
    p = tmp_path / "m.csv"
    _write_csv(p, ["a.wav,s1,cough,cough,task", "b.wav,s2,covid_positive,cough,coswara",
                   "c.wav,s3,negative,breath,coswara"])
    m = load_manifest(p)
    assert [e.label for e in m] == [PretrainClass.COUGH, CovidClass.POSITIVE, CovidClass.NEGATIVE]
    assert m.entries[2].audio_type is AudioType.BREATH
    assert m.resolve(m.entries[0]) == tmp_path / "a.wav"


def test_manifest_errors(tmp_path):
    p = tmp_path / "m.csv"
    _write_csv(p, ["a.wav,s1,cough,cough,task", "a.wav,s2,cough,cough,task"])
    with pytest.raises(ManifestError, match="a.wav"):
        load_manifest(p)
    _write_csv(p, ["a.wav,s1,cough,cough,task", "b.wav,s1,wheeze,cough,task"])
    with pytest.raises(ManifestError, match="row 3"):
        load_manifest(p)
    _write_csv(p, ["a.wav,,cough,cough,task"])
    with pytest.raises(ManifestError, match="subject_id"):
        load_manifest(p)
    p.write_text("file,label\na.wav,cough\n")
    with pytest.raises(ManifestError, match="header"):
        load_manifest(p)


def test_manifest_round_trip(tmp_path):
    entries = [ManifestEntry("x/a.wav", "s1", CovidClass.POSITIVE, AudioType.SPEECH, "d"),
               ManifestEntry("x/b.wav", "s2", PretrainClass.SNEEZE, AudioType.COUGH, "d")]
    write_manifest(tmp_path / "m.csv", entries)
    assert load_manifest(tmp_path / "m.csv").entries == tuple(entries)
