import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phasesep.audio_io import AudioClip
from phasesep.stft import (NonColaError, Spectrogram, StftConfig, amplitude, istft, make_window,
                           phase, polar_to_complex, read_pspc, stft, write_pspc)

DESK = StftConfig()


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_hann_periodic():
    np.testing.assert_allclose(make_window(StftConfig(fft_size=4, hop=1)), [0, 0.5, 1, 0.5], atol=1e-15)


def test_gaussian_center_value():
    lam = 0.01
    cfg = StftConfig(fft_size=256, hop=64, window="gaussian", gaussian_lambda=lam)
    w = make_window(cfg)
    assert w[128] == pytest.approx(lam ** -0.5 * np.pi ** -0.25, rel=1e-14)
    t = (np.arange(256) - 128) / cfg.sample_rate
    np.testing.assert_allclose(w, lam ** -0.5 * np.pi ** -0.25 * np.exp(-t ** 2 / (2 * lam ** 2)))


def test_sqrt_hann_squared_is_hann():
    h = make_window(StftConfig(window="hann"))
    s = make_window(StftConfig(window="sqrt_hann"))
    np.testing.assert_allclose(s ** 2, h, atol=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        StftConfig(fft_size=511)
    with pytest.raises(ValueError):
        StftConfig(hop=0)
    with pytest.raises(ValueError):
        StftConfig(hop=1024)
    with pytest.raises(ValueError):
        StftConfig(window="gaussian")
    with pytest.raises(ValueError):
        StftConfig(window="gaussian", gaussian_lambda=-1.0)
    assert DESK.is_cola
    assert StftConfig(fft_size=4096, hop=1024, sample_rate=44100).is_cola
    assert not StftConfig(hop=384).is_cola


def test_config_dict_round_trip():
    cfg = StftConfig(fft_size=256, hop=64, window="sqrt_hann", sample_rate=16000)
    assert StftConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_clip():
    spec = stft(AudioClip(np.zeros((2, 4000)), 8000), DESK)
    assert spec.shape[2] == 257 and not spec.values.any()
    assert not istft(spec).samples.any()


def test_impulse_rect_window_flat_spectrum():
    cfg = StftConfig(fft_size=16, hop=16, window="rect", center_pad=False)
    x = np.zeros((1, 64))
    x[0, 16] = 1.0  # start of frame 1
    spec = stft(AudioClip(x, 8000), cfg)
    np.testing.assert_allclose(amplitude(spec)[0, 1], np.ones(9), atol=1e-15)


def test_parseval_rect(rng):
    n = 64
    cfg = StftConfig(fft_size=n, hop=n, window="rect", center_pad=False)
    x = rng.standard_normal((1, 10 * n))
    X = stft(AudioClip(x, 8000), cfg).values
    w = np.full(n // 2 + 1, 2.0)
    w[0] = w[-1] = 1.0
    energy = np.sum(w * np.abs(X) ** 2) / n
    assert abs(energy - np.sum(x ** 2)) / np.sum(x ** 2) < 1e-10


def test_bin_center_sinusoid_peaks_at_bin():
    k0 = 20
    n = np.arange(8000)
    x = np.cos(2 * np.pi * k0 * n / DESK.fft_size)
    A = amplitude(stft(AudioClip(x, 8000), DESK))[0]
    # interior frames only (centre padding makes the edges partial)
    assert np.all(np.argmax(A[4:-4], axis=1) == k0)
    # direct DFT oracle for one interior frame
    m = 10
    seg = np.pad(x, 256)[m * 128:m * 128 + 512] * make_window(DESK)
    direct = np.abs(np.fft.rfft(seg))
    np.testing.assert_allclose(A[m], direct, atol=1e-9)


@pytest.mark.parametrize("cfg", [DESK, StftConfig(window="sqrt_hann"),
                                 StftConfig(fft_size=256, hop=64, sample_rate=8000)])
def test_round_trip(cfg, rng):
    x = rng.standard_normal((2, 3 * 8000))
    y = istft(stft(AudioClip(x, 8000), cfg)).samples
    assert y.shape == x.shape
    assert _rel(y, x) < 1e-10


def test_hann_half_overlap_is_not_cola():
    # hann squared does not overlap-add to a constant at 50 %
    assert not StftConfig(fft_size=128, hop=64).is_cola
    assert StftConfig(fft_size=128, hop=64, window="sqrt_hann").is_cola


def test_non_cola_synthesis_refused(rng):
    cfg = StftConfig(hop=384)
    spec = stft(AudioClip(rng.standard_normal((1, 4000)), 8000), cfg)
    with pytest.raises(NonColaError):
        istft(spec)


def test_rate_mismatch_and_short_clip():
    with pytest.raises(ValueError):
        stft(AudioClip(np.zeros((1, 4000)), 16000), DESK)
    with pytest.raises(ValueError):
        stft(AudioClip(np.zeros((1, 100)), 8000), StftConfig(center_pad=False))


def test_polar_examples():
    cfg = StftConfig(fft_size=2, hop=1, window="rect")
    spec = Spectrogram(np.array([[[1 + 0j, -2 + 0j]]]), cfg)
    np.testing.assert_array_equal(amplitude(spec), [[[1.0, 2.0]]])
    np.testing.assert_array_equal(phase(spec), [[[0.0, -np.pi]]])
    with pytest.raises(ValueError):
        polar_to_complex(-np.ones((1, 1, 2)), np.zeros((1, 1, 2)), cfg)


def test_polar_round_trip(rng):
    v = rng.standard_normal((2, 7, 257)) + 1j * rng.standard_normal((2, 7, 257))
    spec = Spectrogram(v, DESK)
    back = polar_to_complex(amplitude(spec), phase(spec), DESK)
    assert np.max(np.abs(back.values - v)) < 1e-12
    assert np.all(phase(spec) >= -np.pi) and np.all(phase(spec) < np.pi)


def test_spectrogram_validation():
    with pytest.raises(ValueError):
        Spectrogram(np.zeros((1, 2, 10)), DESK)
    with pytest.raises(ValueError):
        Spectrogram(np.full((1, 2, 257), np.nan), DESK)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 32 - 1))
def test_linearity(a, b, seed):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((2, 1, 2048))
    lhs = stft(AudioClip(a * x + b * y, 8000), DESK).values
    rhs = a * stft(AudioClip(x, 8000), DESK).values + b * stft(AudioClip(y, 8000), DESK).values
    scale = max(1.0, np.max(np.abs(rhs)))
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * scale


@given(st.integers(0, 2 ** 32 - 1),
       st.sampled_from([(512, 128, "hann"), (256, 64, "hann"), (64, 16, "hann"),
                        (128, 32, "sqrt_hann"), (128, 64, "sqrt_hann")]),
       st.integers(600, 3000))
def test_perfect_reconstruction_property(seed, cfg_tuple, length):
    n, hop, window = cfg_tuple
    cfg = StftConfig(fft_size=n, hop=hop, window=window)
    assert cfg.is_cola
    x = np.random.default_rng(seed).standard_normal((2, length))
    assert _rel(istft(stft(AudioClip(x, 8000), cfg)).samples, x) < 1e-10


def test_pspc_complex_round_trip(tmp_path, rng):
    v = (rng.standard_normal((2, 5, 257)) + 1j * rng.standard_normal((2, 5, 257))).astype(np.complex64)
    write_pspc(tmp_path / "s.pspc", v, DESK)
    back, hdr = read_pspc(tmp_path / "s.pspc")
    assert np.array_equal(back, v)
    assert (hdr["fft_size"], hdr["hop"], hdr["sample_rate"]) == (512, 128, 8000)
    raw = (tmp_path / "s.pspc").read_bytes()
    assert raw[:4] == b"PSPC"
    # interleaved (re, im) float32, channel-major then frame then bin
    first = np.frombuffer(raw[32:40], "<f4")
    assert first[0] == v[0, 0, 0].real and first[1] == v[0, 0, 0].imag


def test_pspc_features_round_trip(tmp_path, rng):
    f = rng.uniform(-np.pi, np.pi, (2, 5, 257, 2)).astype(np.float32)
    write_pspc(tmp_path / "f.pspc", f, DESK)
    back, hdr = read_pspc(tmp_path / "f.pspc")
    assert np.array_equal(back, f)
