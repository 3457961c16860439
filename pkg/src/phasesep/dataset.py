"""Training material: synthetic songs, DSD100-layout corpora, network examples.

Network input layout
--------------------
For a frame ``m`` with context radius ``C`` an example is the flattening, in
C order, of an array shaped ``(channels, 2C+1, bins)`` for amplitudes or
``(channels, 2C+1, bins, F)`` for phase features: channel-major, then
context frame ``m-C .. m+C``, then bin, then feature. Frames outside the
clip are replaced by the nearest edge frame. Targets are the instrument
amplitudes at frame ``m`` flattened as ``(channels, bins)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal as sps

from . import INSTRUMENTS
from .audio_io import AudioClip, mix, read_wav, write_wav
from .phase_features import PhaseFeatureConfig, extract_phase_features
from .stft import StftConfig, amplitude, phase, stft

log = logging.getLogger(__name__)

__all__ = [
    "SynthSpec",
    "Song",
    "SongRef",
    "DatasetStats",
    "ExampleBatch",
    "CorpusError",
    "generate_synthetic_song",
    "write_song",
    "scan_corpus",
    "stack_context",
    "make_examples",
    "assemble_examples",
    "compute_stats",
]

STD_FLOOR = 1e-5
DEFAULT_CONTEXT = 5
MIXTURE_PEAK = 0.7
SPLITS = ("Dev", "Test")


class CorpusError(Exception):
    """Corpus directory missing, malformed or empty."""


@dataclass(frozen=True)
class SynthSpec:
    duration: float = 6.0
    sample_rate: int = 8000
    channels: int = 2

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.sample_rate < 2000:
            raise ValueError("sample_rate must be at least 2000 Hz")
        if self.channels not in (1, 2):
            raise ValueError("channels must be 1 or 2")


@dataclass(eq=False)
class Song:
    name: str
    sources: dict[str, AudioClip]
    mixture: AudioClip

    def __post_init__(self):
        for inst, clip in self.sources.items():
            if clip.samples.shape != self.mixture.samples.shape:
                raise ValueError(f"{self.name}: source {inst} shape differs from mixture")
            if clip.sample_rate != self.mixture.sample_rate:
                raise ValueError(f"{self.name}: source {inst} sample rate differs from mixture")

    @property
    def instruments(self) -> list[str]:
        return list(self.sources)

    def mixture_error(self) -> float:
        """Max absolute deviation between the mixture and the sum of sources."""
        return float(np.max(np.abs(mix(self.sources.values()).samples - self.mixture.samples)))


# ---------------------------------------------------------------------------
# synthetic songs

def _envelope(n: int, sr: int, attack: float, decay: float) -> np.ndarray:
    t = np.arange(n) / sr
    env = np.exp(-t / decay)
    a = min(n, max(1, int(attack * sr)))
    env[:a] *= np.linspace(0.0, 1.0, a, endpoint=False)
    return env


def _tone(freqs: np.ndarray, sr: int, harmonics: Sequence[float], phase0: float = 0.0) -> np.ndarray:
    """Harmonic stack following an instantaneous fundamental track (Hz), band-limited to Nyquist."""
    ph = phase0 + 2.0 * np.pi * np.cumsum(freqs) / sr
    out = np.zeros_like(freqs)
    for h, a in enumerate(harmonics, start=1):
        if h * freqs.max() < 0.45 * sr:
            out += a * np.sin(h * ph)
    return out


def _bass(rng, n, sr, beat):
    scale = np.array([41.2, 46.25, 49.0, 55.0, 61.74, 65.41, 73.42, 82.41, 98.0,
                      110.0, 123.47, 130.81, 146.83, 164.81, 196.0])
    out = np.zeros(n)
    pos = 0
    while pos < n:
        dur = int(beat * rng.choice([1, 1, 2]) * sr)
        seg = min(dur, n - pos)
        f = rng.choice(scale)
        tone = _tone(np.full(seg, f), sr, (1.0, 0.5, 0.25), rng.uniform(0, 2 * np.pi))
        out[pos:pos + seg] = tone * _envelope(seg, sr, 0.02, rng.uniform(0.4, 1.2))
        pos += dur
    # slow global swell
    t = np.arange(n) / sr
    out *= 0.75 + 0.25 * np.sin(2 * np.pi * rng.uniform(0.1, 0.3) * t + rng.uniform(0, 2 * np.pi))
    return out


def _drums(rng, n, sr, beat):
    nyq = sr / 2
    kick = sps.butter(4, 150 / nyq, "low", output="sos")
    snare = sps.butter(2, [300 / nyq, 2000 / nyq], "band", output="sos")
    hat = sps.butter(4, min(2500 / nyq, 0.9), "high", output="sos")
    out = np.zeros(n)
    step = beat / 2
    n_steps = int(np.ceil(n / (step * sr)))
    pattern_kick = rng.random(8) < np.array([0.95, 0.1, 0.3, 0.1, 0.8, 0.2, 0.3, 0.1])
    pattern_snare = rng.random(8) < np.array([0.0, 0.05, 0.9, 0.1, 0.0, 0.1, 0.9, 0.2])
    for i in range(n_steps):
        start = int(i * step * sr)
        if start >= n:
            break
        for active, sos, dur, decay, gain in (
            (pattern_kick[i % 8], kick, 0.25, 0.06, 3.0),
            (pattern_snare[i % 8], snare, 0.2, 0.05, 1.2),
            (True, hat, 0.06, 0.015, 0.4 * rng.uniform(0.6, 1.0)),
        ):
            if not active:
                continue
            seg = min(int(dur * sr), n - start)
            burst = sps.sosfilt(sos, rng.standard_normal(seg))
            out[start:start + seg] += gain * burst * _envelope(seg, sr, 0.002, decay)
    return out


def _vocals(rng, n, sr):
    out = np.zeros(n)
    t_all = np.arange(n) / sr
    vib_rate = rng.uniform(4.5, 6.5)
    vib_depth = rng.uniform(0.01, 0.025)
    pos = int(rng.uniform(0.0, 0.3) * sr)
    while pos < n:
        dur = int(rng.uniform(0.3, 0.8) * sr)
        seg = min(dur, n - pos)
        f0 = rng.uniform(200.0, 400.0)
        track = f0 * (1 + vib_depth * np.sin(2 * np.pi * vib_rate * t_all[pos:pos + seg]))
        n_harm = max(1, int(1000.0 // (f0 * (1 + vib_depth))))
        harm = [1.0 / h for h in range(1, n_harm + 1)]
        env = _envelope(seg, sr, 0.05, 2.0)
        rel = min(seg, int(0.05 * sr))
        env[seg - rel:] *= np.linspace(1.0, 0.0, rel)
        out[pos:pos + seg] = _tone(track, sr, harm, rng.uniform(0, 2 * np.pi)) * env
        pos += dur + int(rng.uniform(0.05, 0.4) * sr)
    return out


def _other(rng, n, sr):
    out = np.zeros(n)
    chord_len = int(1.5 * sr)
    roots = np.array([130.81, 146.83, 164.81, 174.61, 196.0, 220.0, 246.94])
    for start in range(0, n, chord_len):
        seg = min(chord_len, n - start)
        root = rng.choice(roots)
        ratios = (1.0, 1.25, 1.5) if rng.random() < 0.5 else (1.0, 1.2, 1.5)
        chord = np.zeros(seg)
        for r in ratios:
            octave = 2.0 ** rng.integers(0, 2)
            f = min(root * r * octave, 800.0)
            chord += _tone(np.full(seg, f), sr, (1.0, 0.4, 0.2), rng.uniform(0, 2 * np.pi))
        fade = min(seg // 2, int(0.2 * sr))
        env = np.ones(seg)
        env[:fade] = np.linspace(0.0, 1.0, fade)
        env[seg - fade:] *= np.linspace(1.0, 0.0, fade)
        out[start:start + seg] = chord * env / len(ratios)
    return out


def generate_synthetic_song(spec: SynthSpec, seed: int, name: str | None = None) -> Song:
    """Deterministic four-source song (bass, drums, vocals, other).

    Each source gets a constant stereo panning gain; the sources are scaled
    jointly so that the mixture peak is 0.7, and the mixture is their exact
    sum.
    """
    n = int(round(spec.duration * spec.sample_rate))
    sr = spec.sample_rate
    if n < 1:
        raise ValueError("duration too short for one sample")
    children = np.random.SeedSequence(seed).spawn(len(INSTRUMENTS) + 1)
    rngs = dict(zip(("song",) + INSTRUMENTS, (np.random.default_rng(c) for c in children)))
    beat = 60.0 / rngs["song"].uniform(90, 140)
    levels = rngs["song"].uniform(0.5, 1.0, size=len(INSTRUMENTS))

    mono = {
        "bass": _bass(rngs["bass"], n, sr, beat),
        "drums": _drums(rngs["drums"], n, sr, beat),
        "vocals": _vocals(rngs["vocals"], n, sr),
        "other": _other(rngs["other"], n, sr),
    }
    raw = {}
    for (inst, x), level in zip(mono.items(), levels):
        rms = np.sqrt(np.mean(x ** 2))
        x = level * x / rms if rms > 0 else x
        if spec.channels == 2:
            pan = rngs["song"].uniform(0.2, 0.8)
            gains = np.array([np.cos(pan * np.pi / 2), np.sin(pan * np.pi / 2)])
        else:
            gains = np.ones(1)
        raw[inst] = gains[:, np.newaxis] * x[np.newaxis, :]

    peak = np.max(np.abs(sum(raw.values())))
    g = MIXTURE_PEAK / peak if peak > 0 else 1.0
    sources = {inst: AudioClip(g * x, sr) for inst, x in raw.items()}
    return Song(name or f"synth_{seed:05d}", sources, mix(sources.values()))


# ---------------------------------------------------------------------------
# DSD100-layout corpora

@dataclass(frozen=True)
class SongRef:
    """Lazily loadable song in a DSD100-style tree."""

    name: str
    split: str
    mixture_path: Path
    source_paths: dict = field(hash=False)

    def load(self, mixture_tol: float = 1e-6) -> Song:
        mixture = read_wav(self.mixture_path)
        sources = {inst: read_wav(p) for inst, p in self.source_paths.items()}
        song = Song(self.name, sources, mixture)
        err = song.mixture_error()
        if err > mixture_tol:
            log.warning("%s: mixture differs from sum of stems by %.3g", self.name, err)
        return song


def write_song(song: Song, root, split: str = "Dev", comment: str | None = None) -> SongRef:
    """Write ``song`` as float32 WAVs under ``root`` in DSD100 layout."""
    root = Path(root)
    mdir = root / "Mixtures" / split / song.name
    sdir = root / "Sources" / split / song.name
    mdir.mkdir(parents=True, exist_ok=True)
    sdir.mkdir(parents=True, exist_ok=True)
    write_wav(mdir / "mixture.wav", song.mixture, "float32", comment)
    paths = {}
    for inst, clip in song.sources.items():
        paths[inst] = sdir / f"{inst}.wav"
        write_wav(paths[inst], clip, "float32", comment)
    return SongRef(song.name, split, mdir / "mixture.wav", paths)


def scan_corpus(root, instruments: Sequence[str] = INSTRUMENTS) -> list[SongRef]:
    """Find songs under ``root/Mixtures/{Dev,Test}`` with all stems present.

    Songs missing a stem are logged and skipped.

    Raises
    ------
    CorpusError
        ``root`` does not exist or no complete song was found.
    """
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus root {root} does not exist")
    refs = []
    for split in SPLITS:
        mdir = root / "Mixtures" / split
        if not mdir.is_dir():
            continue
        for song_dir in sorted(p for p in mdir.iterdir() if p.is_dir()):
            mixture = song_dir / "mixture.wav"
            sdir = root / "Sources" / split / song_dir.name
            stems = {inst: sdir / f"{inst}.wav" for inst in instruments}
            missing = [i for i, p in stems.items() if not p.is_file()]
            if not mixture.is_file():
                missing.insert(0, "mixture")
            if missing:
                log.warning("skipping %s/%s: missing %s", split, song_dir.name, ", ".join(missing))
                continue
            refs.append(SongRef(song_dir.name, split, mixture, stems))
    if not refs:
        raise CorpusError(f"no complete songs found under {root}")
    return refs


# ---------------------------------------------------------------------------
# statistics

@dataclass
class DatasetStats:
    """Per-(channel, bin) amplitude statistics of the training mixtures.

    ``instrument_mean[j]`` is the average amplitude of instrument ``j``.
    All arrays have shape ``(channels, bins)``.
    """

    mean: np.ndarray
    std: np.ndarray
    instrument_mean: dict[str, np.ndarray]
    n_frames: int = 0

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    @property
    def n_bins(self) -> int:
        return self.mean.shape[1]


class _Moments:
    """Chan et al. pairwise merge of (count, mean, M2) accumulators."""

    def __init__(self):
        self.n = 0
        self.mean = None
        self.m2 = None

    def add(self, frames: np.ndarray):
        # frames: (channels, M, K) -> merge per (channel, bin) over the M axis
        nb = frames.shape[1]
        mb = frames.mean(axis=1)
        m2b = ((frames - mb[:, np.newaxis, :]) ** 2).sum(axis=1)
        if self.n == 0:
            self.n, self.mean, self.m2 = nb, mb, m2b
            return
        n = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * nb / n
        self.m2 = self.m2 + m2b + delta ** 2 * self.n * nb / n
        self.n = n


def compute_stats(songs: Iterable[Song], stft_cfg: StftConfig) -> DatasetStats:
    """Single-pass mean/std of mixture amplitudes and mean instrument amplitudes.

    Raises
    ------
    ValueError
        No songs given.
    """
    mix_acc = _Moments()
    inst_acc: dict[str, _Moments] = {}
    for song in songs:
        mix_acc.add(amplitude(stft(song.mixture, stft_cfg)))
        for inst, clip in song.sources.items():
            inst_acc.setdefault(inst, _Moments()).add(amplitude(stft(clip, stft_cfg)))
    if mix_acc.n == 0:
        raise ValueError("compute_stats needs at least one song")
    std = np.maximum(np.sqrt(mix_acc.m2 / mix_acc.n), STD_FLOOR)
    return DatasetStats(
        mean=mix_acc.mean,
        std=std,
        instrument_mean={k: v.mean for k, v in inst_acc.items()},
        n_frames=mix_acc.n,
    )


# ---------------------------------------------------------------------------
# examples

@dataclass
class ExampleBatch:
    """Examples for every frame of one or more clips.

    ``amp`` has shape ``(M, I*(2C+1)*K)``, ``phase`` ``(M, I*(2C+1)*K*F)``;
    either may be None depending on the architecture. ``targets`` is
    ``(M, I*K)``.
    """

    amp: np.ndarray | None
    phase: np.ndarray | None
    targets: np.ndarray
    context: int = DEFAULT_CONTEXT

    def __len__(self) -> int:
        return self.targets.shape[0]

    @property
    def inputs(self):
        """Network input: a single array or an ``(amp, phase)`` pair."""
        if self.amp is not None and self.phase is not None:
            return (self.amp, self.phase)
        return self.amp if self.amp is not None else self.phase


def stack_context(tensor: np.ndarray, context: int) -> np.ndarray:
    """Gather ``2C+1`` edge-replicated frames around each frame and flatten.

    ``tensor`` is ``(I, M, K)`` or ``(I, M, K, F)``; returns ``(M, D)``.
    """
    n_frames = tensor.shape[1]
    offsets = np.arange(-context, context + 1)
    idx = np.clip(np.arange(n_frames)[:, np.newaxis] + offsets, 0, n_frames - 1)
    g = tensor[:, idx]                      # (I, M, 2C+1, K[, F])
    g = np.moveaxis(g, 1, 0)                # (M, I, 2C+1, K[, F])
    return np.ascontiguousarray(g.reshape(n_frames, -1))


def make_examples(song: Song, stft_cfg: StftConfig, phase_cfg: PhaseFeatureConfig | None,
                  context: int, stats: DatasetStats | None, instrument: str,
                  use_amplitude: bool = True, use_phase: bool = True,
                  input_source: str = "mixture") -> ExampleBatch:
    """One example per STFT frame of ``song`` for ``instrument``.

    ``input_source`` is ``"mixture"`` (separation) or ``"instrument"``
    (recover the instrument amplitude from the instrument's own features).
    """
    if not (use_amplitude or use_phase):
        raise ValueError("need amplitude and/or phase inputs")
    if use_phase and phase_cfg is None:
        raise ValueError("phase inputs requested without a PhaseFeatureConfig")
    if instrument not in song.sources:
        raise KeyError(f"{song.name} has no source {instrument!r}")
    if input_source == "mixture":
        src = song.mixture
    elif input_source == "instrument":
        src = song.sources[instrument]
    else:
        raise ValueError(f"input_source must be 'mixture' or 'instrument', got {input_source!r}")

    spec = stft(src, stft_cfg)
    n_ch, n_frames, n_bins = spec.shape
    if stats is not None and stats.mean.shape != (n_ch, n_bins):
        raise ValueError(f"stats shape {stats.mean.shape} does not match spectrogram {(n_ch, n_bins)}")
    if n_frames <= 2 * context + 1:
        raise ValueError(f"{song.name}: {n_frames} frames, need more than {2 * context + 1}")

    amp_in = stack_context(amplitude(spec), context) if use_amplitude else None
    ph_in = None
    if use_phase:
        ph_in = stack_context(extract_phase_features(phase(spec), phase_cfg), context)
    target = amplitude(stft(song.sources[instrument], stft_cfg))
    targets = np.ascontiguousarray(np.moveaxis(target, 1, 0).reshape(n_frames, -1))
    return ExampleBatch(amp_in, ph_in, targets, context)


def assemble_examples(songs: Iterable[Song], *args, **kwargs) -> ExampleBatch:
    """Concatenate `make_examples` over songs (same arguments after ``song``)."""
    batches = [make_examples(s, *args, **kwargs) for s in songs]
    if not batches:
        raise ValueError("no songs to assemble")

    def cat(name):
        parts = [getattr(b, name) for b in batches]
        return None if parts[0] is None else np.concatenate(parts, axis=0)

    return ExampleBatch(cat("amp"), cat("phase"), cat("targets"), batches[0].context)
