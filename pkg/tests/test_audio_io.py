import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phasesep.audio_io import (AudioClip, ClipMismatchError, TruncatedWavError,
                               UnsupportedWavError, WavError, WavReadError, mix, read_wav,
                               write_wav)


def _pcm16_bytes(samples, channels=1, rate=8000):
    data = np.asarray(samples, dtype="<i2").tobytes()
    fmt = struct.pack("<HHIIHH", 1, channels, rate, rate * 2 * channels, 2 * channels, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_clip_validation():
    with pytest.raises(ValueError):
        AudioClip(np.array([[0.0, np.nan]]), 8000)
    with pytest.raises(ValueError):
        AudioClip(np.zeros((1, 4)), 0)
    clip = AudioClip(np.zeros(5), 8000)
    assert clip.channels == 1 and clip.length == 5
    assert not clip.samples.flags.writeable


def test_pcm16_scaling(tmp_path):
    p = tmp_path / "a.wav"
    p.write_bytes(_pcm16_bytes([16384, -32768, 0]))
    clip = read_wav(p)
    assert clip.samples[0, 0] == 0.5
    assert clip.samples[0, 1] == -1.0
    assert clip.sample_rate == 8000


def test_float32_stereo_bit_identical(tmp_path, rng):
    x = rng.uniform(-1, 1, (2, 100)).astype(np.float32)
    p = tmp_path / "f.wav"
    write_wav(p, AudioClip(x.astype(np.float64), 16000))
    clip = read_wav(p)
    assert clip.channels == 2 and clip.sample_rate == 16000
    assert np.array_equal(clip.samples.astype(np.float32).view(np.uint32), x.view(np.uint32))


def test_float_round_trip_exact(tmp_path, rng):
    # float32-representable values survive exactly
    x = rng.standard_normal((2, 1000)).astype(np.float32).astype(np.float64)
    clip = AudioClip(x, 8000)
    write_wav(tmp_path / "r.wav", clip)
    assert np.max(np.abs(read_wav(tmp_path / "r.wav").samples - x)) == 0.0


def test_silent_clip(tmp_path):
    write_wav(tmp_path / "s.wav", AudioClip(np.zeros((1, 37)), 8000), "pcm16")
    back = read_wav(tmp_path / "s.wav")
    assert back.length == 37 and not back.samples.any()


def test_pcm16_clamps(tmp_path):
    write_wav(tmp_path / "c.wav", AudioClip(np.array([[2.0, -2.0, 0.25]]), 8000), "pcm16")
    raw = (tmp_path / "c.wav").read_bytes()
    data = np.frombuffer(raw[raw.index(b"data") + 8:][:6], "<i2")
    assert list(data) == [32767, -32768, 8192]


def test_comment_chunk_is_ignored_on_read(tmp_path):
    clip = AudioClip(np.array([[0.5, -0.25]]), 8000)
    write_wav(tmp_path / "m.wav", clip, comment="config_hash=abc")
    assert b"config_hash=abc" in (tmp_path / "m.wav").read_bytes()
    assert read_wav(tmp_path / "m.wav") == clip


def test_read_errors_are_distinct(tmp_path):
    with pytest.raises(WavReadError):
        read_wav(tmp_path / "missing.wav")
    (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(WavReadError):
        read_wav(tmp_path / "junk.wav")
    good = _pcm16_bytes([1, 2, 3, 4])
    (tmp_path / "trunc.wav").write_bytes(good[:-3])
    with pytest.raises(TruncatedWavError):
        read_wav(tmp_path / "trunc.wav")
    # 24-bit PCM is unsupported
    bad = bytearray(good)
    i = bad.index(b"fmt ") + 8
    bad[i + 14:i + 16] = struct.pack("<H", 24)
    (tmp_path / "b24.wav").write_bytes(bytes(bad))
    with pytest.raises(UnsupportedWavError):
        read_wav(tmp_path / "b24.wav")


def test_unwritable_path(tmp_path):
    with pytest.raises(WavError):
        write_wav(tmp_path / "no" / "such" / "dir.wav", AudioClip(np.zeros((1, 2)), 8000))


def test_mix_examples(random_clip):
    s = random_clip()
    assert mix([s]) == s
    neg = AudioClip(-s.samples, s.sample_rate)
    assert not mix([s, neg]).samples.any()
    clips = [random_clip() for _ in range(4)]
    expected = clips[0].samples + clips[1].samples + clips[2].samples + clips[3].samples
    np.testing.assert_allclose(mix(clips).samples, expected, rtol=0, atol=1e-15)


def test_mix_mismatch(random_clip):
    with pytest.raises(ClipMismatchError):
        mix([random_clip(length=10), random_clip(length=11)])
    with pytest.raises(ClipMismatchError):
        mix([random_clip(rate=8000), random_clip(rate=16000)])
    with pytest.raises(ValueError):
        mix([])


@given(arrays(np.float64, (3, 2, 16), elements=st.floats(-1, 1)), st.permutations([0, 1, 2]))
def test_mix_commutative(x, perm):
    clips = [AudioClip(a, 8000) for a in x]
    a = mix(clips).samples
    b = mix([clips[i] for i in perm]).samples
    assert np.max(np.abs(a - b)) <= 1e-12 * max(1.0, np.max(np.abs(a)))


@given(arrays(np.float32, (2, 33), elements=st.floats(-4, 4, width=32)))
def test_float32_round_trip_property(tmp_path_factory, x):
    p = tmp_path_factory.mktemp("rt") / "x.wav"
    clip = AudioClip(x.astype(np.float64), 22050)
    write_wav(p, clip)
    assert read_wav(p) == clip
