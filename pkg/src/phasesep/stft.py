"""Short-time Fourier transform with weighted overlap-add resynthesis.

Frame ``m`` covers samples ``[m * hop, m * hop + fft_size)`` of the (optionally
centre-padded) signal. Each frame is windowed and transformed with the
positive-exponent kernel ``exp(+2j*pi*k*n/N)``, i.e. the complex conjugate of
``numpy.fft.rfft`` for real input. With this kernel a delay of ``n0`` samples
multiplies bin ``k`` by ``exp(+2j*pi*k*n0/N)``, so a stationary sinusoid
loses ``2*pi*k*hop/N`` of phase from one frame to the next. Amplitudes are
unaffected by the choice; it only fixes the sign of phase features.

No ``exp(j*omega*t/2)`` modulation factor is applied here; the symmetric
continuous-time convention lives in :mod:`phasesep.theory_oracle`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio_io import AudioClip

__all__ = [
    "StftConfig",
    "Spectrogram",
    "NonColaError",
    "make_window",
    "stft",
    "istft",
    "amplitude",
    "phase",
    "polar_to_complex",
    "write_pspc",
    "read_pspc",
]

WINDOW_KINDS = ("hann", "sqrt_hann", "gaussian", "rect")
COLA_TOL = 1e-10


class NonColaError(ValueError):
    """The window/hop pair cannot be used for overlap-add synthesis."""


@dataclass(frozen=True)
class StftConfig:
    """Framing parameters of an STFT.

    ``gaussian_lambda`` (seconds) is only used by the ``gaussian`` window.
    ``rect`` (all ones) exists for test paths that need a plain DFT.
    """

    fft_size: int = 512
    hop: int = 128
    window: str = "hann"
    sample_rate: int = 8000
    center_pad: bool = True
    gaussian_lambda: float | None = None

    def __post_init__(self):
        if self.fft_size <= 0 or self.fft_size % 2:
            raise ValueError(f"fft_size must be positive and even, got {self.fft_size}")
        if not 0 < self.hop <= self.fft_size:
            raise ValueError(f"hop must satisfy 0 < hop <= fft_size, got {self.hop}")
        if self.window not in WINDOW_KINDS:
            raise ValueError(f"unknown window {self.window!r}; expected one of {WINDOW_KINDS}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.window == "gaussian" and (self.gaussian_lambda is None or self.gaussian_lambda <= 0):
            raise ValueError("gaussian window needs gaussian_lambda > 0")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def is_cola(self) -> bool:
        """True when the squared window overlap-adds to a constant at this hop."""
        if self.window == "gaussian":
            return False
        env = _overlap_envelope(make_window(self), self.hop)
        return bool(np.ptp(env) <= COLA_TOL * np.mean(env))

    def to_dict(self) -> dict:
        return {
            "fft_size": self.fft_size,
            "hop": self.hop,
            "window": self.window,
            "sample_rate": self.sample_rate,
            "center_pad": self.center_pad,
            "gaussian_lambda": self.gaussian_lambda,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StftConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """Complex STFT values of shape ``(channels, frames, bins)``.

    ``length`` is the time-domain length of the analysed clip, used by
    `istft` to trim the output; it may be None for synthetic spectrograms.
    """

    values: np.ndarray
    config: StftConfig
    length: int | None = field(default=None)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"spectrogram values must be (channels, frames, bins), got {v.shape}")
        if v.shape[2] != self.config.n_bins:
            raise ValueError(f"expected {self.config.n_bins} bins, got {v.shape[2]}")
        if not np.all(np.isfinite(v)):
            raise ValueError("spectrogram has non-finite entries")
        object.__setattr__(self, "values", v.astype(np.complex128, copy=False))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def with_values(self, values: np.ndarray) -> "Spectrogram":
        return replace(self, values=values)


def make_window(config: StftConfig) -> np.ndarray:
    """Analysis window of length ``fft_size``.

    ``hann`` is the periodic Hann window; ``sqrt_hann`` its square root.
    ``gaussian`` samples ``lam**-0.5 * pi**-0.25 * exp(-t**2 / (2 lam**2))``
    at ``t = (i - N/2) / sample_rate``.
    """
    n = config.fft_size
    i = np.arange(n)
    if config.window == "hann":
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * i / n)
    if config.window == "sqrt_hann":
        return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * i / n))
    if config.window == "rect":
        return np.ones(n)
    lam = config.gaussian_lambda
    if lam is None or lam <= 0:
        raise ValueError("gaussian window needs gaussian_lambda > 0")
    t = (i - n / 2) / config.sample_rate
    return lam ** -0.5 * np.pi ** -0.25 * np.exp(-t ** 2 / (2.0 * lam ** 2))


def _overlap_envelope(window: np.ndarray, hop: int) -> np.ndarray:
    # sum of window**2 over all frames overlapping each position of one hop period
    w2 = window ** 2
    env = np.zeros(hop)
    for start in range(0, len(window), hop):
        seg = w2[start:start + hop]
        env[:len(seg)] += seg
    return env


def _frame_count(n_samples: int, config: StftConfig) -> int:
    return 1 + (n_samples - config.fft_size) // config.hop


def stft(clip: AudioClip, config: StftConfig) -> Spectrogram:
    """Analyse every channel of ``clip``.

    Raises
    ------
    ValueError
        If the clip sample rate differs from the config, or the (padded)
        clip is shorter than one frame.
    """
    if clip.sample_rate != config.sample_rate:
        raise ValueError(
            f"clip sample rate {clip.sample_rate} Hz does not match STFT config "
            f"{config.sample_rate} Hz (no resampling is performed)"
        )
    x = clip.samples
    n = config.fft_size
    if config.center_pad:
        x = np.pad(x, ((0, 0), (n // 2, n // 2)))
    if x.shape[1] < n:
        raise ValueError(f"clip too short: {clip.length} samples for fft_size {n}")
    frames = np.lib.stride_tricks.sliding_window_view(x, n, axis=-1)[:, ::config.hop, :]
    values = np.conj(np.fft.rfft(frames * make_window(config), axis=-1))
    return Spectrogram(values, config, clip.length)


def istft(spec: Spectrogram, length: int | None = None) -> AudioClip:
    """Weighted overlap-add inverse of `stft`.

    Each inverse frame is multiplied by the analysis window and the sum is
    divided by the overlap-added squared window, which reconstructs the
    analysed signal wherever that envelope is non-zero.

    Raises
    ------
    NonColaError
        The configured window/hop pair is not COLA-valid for synthesis.
    """
    cfg = spec.config
    if not cfg.is_cola:
        raise NonColaError(
            f"window {cfg.window!r} with fft_size {cfg.fft_size} and hop {cfg.hop} "
            "does not satisfy constant overlap-add; synthesis refused"
        )
    n, hop = cfg.fft_size, cfg.hop
    channels, n_frames, _ = spec.values.shape
    window = make_window(cfg)
    frames = np.fft.irfft(np.conj(spec.values), n=n, axis=-1) * window

    total = n + hop * (n_frames - 1)
    out = np.zeros((channels, total))
    env = np.zeros(total)
    w2 = window ** 2
    for m in range(n_frames):
        s = m * hop
        out[:, s:s + n] += frames[:, m]
        env[s:s + n] += w2
    nonzero = env > COLA_TOL * env.max()
    out[:, nonzero] /= env[nonzero]
    out[:, ~nonzero] = 0.0

    if cfg.center_pad:
        out = out[:, n // 2:]
    if length is None:
        length = spec.length
    if length is not None:
        if out.shape[1] < length:
            out = np.pad(out, ((0, 0), (0, length - out.shape[1])))
        out = out[:, :length]
    return AudioClip(out, cfg.sample_rate)


def amplitude(spec: Spectrogram) -> np.ndarray:
    """Modulus of the STFT values, shape ``(channels, frames, bins)``."""
    return np.abs(spec.values)


def phase(spec: Spectrogram) -> np.ndarray:
    """Principal phase in ``[-pi, pi)``; ``-pi`` is kept, ``+pi`` maps to ``-pi``."""
    ph = np.angle(spec.values)
    ph[ph >= np.pi] = -np.pi
    return ph


def polar_to_complex(amp: np.ndarray, ph: np.ndarray, config: StftConfig,
                     length: int | None = None) -> Spectrogram:
    """Build a spectrogram from amplitude and phase tensors."""
    amp = np.asarray(amp, dtype=np.float64)
    ph = np.asarray(ph, dtype=np.float64)
    if amp.shape != ph.shape:
        raise ValueError(f"amplitude shape {amp.shape} != phase shape {ph.shape}")
    if np.any(amp < 0):
        raise ValueError("amplitude tensor has negative entries")
    return Spectrogram(amp * np.exp(1j * ph), config, length)


_PSPC_MAGIC = b"PSPC"
_PSPC_HEADER = struct.Struct("<4sIIIIIII")
_PSPC_FEATURE_DIM = struct.Struct("<I")


def write_pspc(path, tensor: np.ndarray, config: StftConfig) -> None:
    """Dump a spectrogram or feature tensor in the little-endian PSPC layout.

    A complex ``(I, M, K)`` tensor is written as version 1: header
    ``magic, version, I, M, K, N, n0, sample_rate`` followed by interleaved
    ``(re, im)`` float32 in channel/frame/bin order. A real ``(I, M, K, F)``
    feature tensor is written as version 2, with ``F`` appended to the header
    and float32 values in channel/frame/bin/feature order.
    """
    t = np.asarray(tensor)
    if np.iscomplexobj(t):
        if t.ndim != 3:
            raise ValueError("complex PSPC payload must be (I, M, K)")
        header = _PSPC_HEADER.pack(_PSPC_MAGIC, 1, *t.shape, config.fft_size,
                                   config.hop, config.sample_rate)
        payload = np.stack([t.real, t.imag], axis=-1).astype("<f4")
        extra = b""
    else:
        if t.ndim == 3:
            t = t[..., np.newaxis]
        if t.ndim != 4:
            raise ValueError("real PSPC payload must be (I, M, K) or (I, M, K, F)")
        header = _PSPC_HEADER.pack(_PSPC_MAGIC, 2, *t.shape[:3], config.fft_size,
                                   config.hop, config.sample_rate)
        payload = t.astype("<f4")
        extra = _PSPC_FEATURE_DIM.pack(t.shape[3])
    Path(path).write_bytes(header + extra + np.ascontiguousarray(payload).tobytes())


def read_pspc(path) -> tuple[np.ndarray, dict]:
    """Load a PSPC dump; returns the tensor and its header fields."""
    blob = Path(path).read_bytes()
    if len(blob) < _PSPC_HEADER.size:
        raise ValueError(f"{path}: truncated PSPC header")
    magic, version, i, m, k, n, hop, rate = _PSPC_HEADER.unpack_from(blob, 0)
    if magic != _PSPC_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    pos = _PSPC_HEADER.size
    meta = {"version": version, "channels": i, "frames": m, "bins": k,
            "fft_size": n, "hop": hop, "sample_rate": rate}
    if version == 1:
        shape = (i, m, k, 2)
    elif version == 2:
        (f,) = _PSPC_FEATURE_DIM.unpack_from(blob, pos)
        pos += _PSPC_FEATURE_DIM.size
        meta["features"] = f
        shape = (i, m, k, f)
    else:
        raise ValueError(f"{path}: unsupported PSPC version {version}")
    count = int(np.prod(shape))
    if len(blob) - pos != 4 * count:
        raise ValueError(f"{path}: payload size mismatch")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
    if version == 1:
        return data[..., 0].astype(np.float64) + 1j * data[..., 1].astype(np.float64), meta
    return data.astype(np.float64), meta
