"""Phase pre-processing: instantaneous frequency and group delay features.

Pipeline for a phase tensor of shape ``(..., frames, bins)``:

1. frame-to-frame difference (instantaneous frequency, ``dt``) and/or
   bin-to-bin difference (group delay, ``df``);
2. ``dt += 2*pi*k*hop/N`` which removes the linear phase drift a stationary
   sinusoid picks up between hops; ``df -= pi``;
3. wrap to ``[-pi, pi)``.

The ``-k*pi/2`` drift removed in step 2 (at 75% overlap) is between
consecutive frames at a fixed bin ``k``, not between consecutive bins.

Boundary frames (``m = 0`` for ``dt``) and bins (``k = 0`` for ``df``) are
set to zero so feature tensors keep the shape of the amplitude tensors.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "PhaseFeatureConfig",
    "Histogram",
    "wrap",
    "time_diff",
    "freq_diff",
    "correct_time_shift",
    "correct_freq_shift",
    "extract_phase_features",
    "feature_histogram",
    "write_histogram_csv",
]

TWO_PI = 2.0 * np.pi


def wrap(x) -> np.ndarray:
    """Map values to ``[-pi, pi)`` via ``((x + pi) mod 2 pi) - pi``.

    Values already in range come back bit-for-bit unchanged and ``pi``
    itself maps to ``-pi``.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.mod(x + np.pi, TWO_PI) - np.pi
    # np.mod can return exactly 2*pi for tiny negative arguments
    out = np.where(out >= np.pi, -np.pi, out)
    return np.where((x >= -np.pi) & (x < np.pi), x, out)


def time_diff(ph: np.ndarray) -> np.ndarray:
    """Wrapped ``phi(k, m) - phi(k, m-1)`` along the frame axis (second to last)."""
    ph = np.asarray(ph, dtype=np.float64)
    if ph.ndim < 2 or ph.shape[-2] < 2:
        raise ValueError(f"time_diff needs at least 2 frames, got shape {ph.shape}")
    out = np.zeros_like(ph)
    out[..., 1:, :] = wrap(ph[..., 1:, :] - ph[..., :-1, :])
    return out


def freq_diff(ph: np.ndarray) -> np.ndarray:
    """Wrapped ``phi(k, m) - phi(k-1, m)`` along the bin axis (last)."""
    ph = np.asarray(ph, dtype=np.float64)
    if ph.ndim < 1 or ph.shape[-1] < 2:
        raise ValueError(f"freq_diff needs at least 2 bins, got shape {ph.shape}")
    out = np.zeros_like(ph)
    out[..., 1:] = wrap(ph[..., 1:] - ph[..., :-1])
    return out


def correct_time_shift(dt: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    """Add the linear term ``2*pi*k*hop/fft_size`` to each bin ``k`` (last axis), then wrap."""
    dt = np.asarray(dt, dtype=np.float64)
    k = np.arange(dt.shape[-1])
    return wrap(dt + TWO_PI * k * hop / fft_size)


def correct_freq_shift(df: np.ndarray) -> np.ndarray:
    """Remove the systematic ``pi`` offset of group delays: ``wrap(df - pi)``."""
    return wrap(np.asarray(df, dtype=np.float64) - np.pi)


@dataclass(frozen=True)
class PhaseFeatureConfig:
    """Which phase representation to feed a network.

    ``raw_phase`` selects the unprocessed wrapped phase (one feature) and is
    mutually exclusive with the derivative features; it exists for ablations.
    """

    use_time_derivative: bool = True
    use_freq_derivative: bool = True
    correct_time_shift: bool = True
    correct_freq_shift: bool = True
    fft_size: int = 512
    hop: int = 128
    raw_phase: bool = False

    def __post_init__(self):
        derivs = self.use_time_derivative or self.use_freq_derivative
        if self.raw_phase and derivs:
            raise ValueError("raw_phase cannot be combined with derivative features")
        if not self.raw_phase and not derivs:
            raise ValueError("enable at least one derivative feature (or raw_phase)")

    @property
    def n_features(self) -> int:
        if self.raw_phase:
            return 1
        return int(self.use_time_derivative) + int(self.use_freq_derivative)

    @property
    def tag(self) -> str:
        """Short human-readable name, e.g. ``dt+df_shift``."""
        if self.raw_phase:
            return "raw"
        parts = []
        if self.use_time_derivative:
            parts.append("dt_shift" if self.correct_time_shift else "dt")
        if self.use_freq_derivative:
            parts.append("df_shift" if self.correct_freq_shift else "df")
        return "+".join(parts)

    def to_dict(self) -> dict:
        return {
            "use_time_derivative": self.use_time_derivative,
            "use_freq_derivative": self.use_freq_derivative,
            "correct_time_shift": self.correct_time_shift,
            "correct_freq_shift": self.correct_freq_shift,
            "fft_size": self.fft_size,
            "hop": self.hop,
            "raw_phase": self.raw_phase,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseFeatureConfig":
        return cls(**d)


def extract_phase_features(ph: np.ndarray, cfg: PhaseFeatureConfig) -> np.ndarray:
    """Apply the configured pre-processing and stack features on a new last axis.

    Returns a tensor of shape ``ph.shape + (F,)`` ordered ``[dt, df]`` when
    both derivatives are enabled.
    """
    ph = np.asarray(ph, dtype=np.float64)
    if cfg.raw_phase:
        return wrap(ph)[..., np.newaxis]
    feats = []
    if cfg.use_time_derivative:
        dt = time_diff(ph)
        if cfg.correct_time_shift:
            dt = correct_time_shift(dt, cfg.fft_size, cfg.hop)
            dt[..., 0, :] = 0.0
        feats.append(wrap(dt))
    if cfg.use_freq_derivative:
        df = freq_diff(ph)
        if cfg.correct_freq_shift:
            df = correct_freq_shift(df)
            df[..., 0] = 0.0
        feats.append(wrap(df))
    return np.stack(feats, axis=-1)


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    bin_index: int
    feature: str = ""

    @property
    def mode_center(self) -> float:
        i = int(np.argmax(self.counts))
        return 0.5 * (self.edges[i] + self.edges[i + 1])


def feature_histogram(values, bins: int, k: int, feature: str = "") -> Histogram:
    """Histogram of phase-feature values over ``bins`` uniform cells on ``[-pi, pi]``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if bins < 2:
        raise ValueError("need at least 2 histogram bins")
    if v.size == 0:
        raise ValueError("cannot histogram an empty slice")
    counts, edges = np.histogram(v, bins=bins, range=(-np.pi, np.pi))
    return Histogram(edges, counts, int(k), feature)


def write_histogram_csv(path, hist: Histogram, preamble: str | None = None) -> None:
    """Write ``bin_lo,bin_hi,count`` rows; ``preamble`` becomes a leading ``#`` line."""
    with Path(path).open("w", newline="") as fh:
        if preamble:
            fh.write(f"# {preamble}\n")
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
