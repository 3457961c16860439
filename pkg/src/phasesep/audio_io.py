"""Multichannel audio clips and a minimal RIFF/WAVE reader/writer.

Only PCM 16-bit integer (format code 1) and IEEE 32-bit float (format
code 3) files with one or two channels are supported. Anything else is a
hard error: there is no resampling and no format guessing.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "AudioClip",
    "WavError",
    "WavReadError",
    "UnsupportedWavError",
    "TruncatedWavError",
    "ClipMismatchError",
    "read_wav",
    "write_wav",
    "mix",
]

PCM16_SCALE = 32768.0

_FORMAT_PCM = 1
_FORMAT_FLOAT = 3


class WavError(Exception):
    """Base class for WAV input/output failures."""


class WavReadError(WavError):
    """The file is missing, unreadable, or not a RIFF/WAVE file."""


class UnsupportedWavError(WavError):
    """The file is a valid WAV but uses an encoding we do not handle."""


class TruncatedWavError(WavError):
    """A chunk (usually ``data``) ends before its declared size."""


class ClipMismatchError(ValueError):
    """Clips disagree in channel count, length or sample rate."""


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Time-domain signal of shape ``(channels, length)``.

    Samples are stored as read-only float64. The array is copied on
    construction so a clip never aliases caller-owned memory.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64, copy=True)
        if x.ndim == 1:
            x = x[np.newaxis, :]
        if x.ndim != 2:
            raise ValueError(f"samples must be 2-D (channels, length), got shape {x.shape}")
        if x.shape[0] < 1:
            raise ValueError("clip needs at least one channel")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples contain NaN or Inf")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.length / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> "AudioClip":
        return AudioClip(samples, self.sample_rate)

    def __eq__(self, other):
        if not isinstance(other, AudioClip):
            return NotImplemented
        return (
            self.sample_rate == other.sample_rate
            and self.samples.shape == other.samples.shape
            and bool(np.array_equal(self.samples, other.samples))
        )

    __hash__ = None


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8: pos + 8 + size]
        yield cid, size, body
        # chunks are word aligned
        pos += 8 + size + (size & 1)


def read_wav(path) -> AudioClip:
    """Read a PCM16 or float32 WAV file.

    PCM16 samples are divided by 32768 so they land in ``[-1, 1)``; float
    samples are returned as stored.

    Raises
    ------
    WavReadError
        File missing/unreadable or not RIFF/WAVE.
    UnsupportedWavError
        Encoding other than PCM16/float32, or more than two channels.
    TruncatedWavError
        ``fmt`` or ``data`` chunk shorter than declared.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise WavReadError(f"cannot read {path}: {exc}") from exc
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavReadError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    pcm = None
    for cid, size, body in _iter_chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise TruncatedWavError(f"{path}: fmt chunk truncated")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == 0xFFFE and len(body) >= 26:
                # WAVE_FORMAT_EXTENSIBLE: real format code leads the subformat GUID
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif cid == b"data":
            if len(body) < size:
                raise TruncatedWavError(
                    f"{path}: data chunk declares {size} bytes, only {len(body)} present"
                )
            pcm = body
    if fmt is None:
        raise WavReadError(f"{path}: missing fmt chunk")
    if pcm is None:
        raise WavReadError(f"{path}: missing data chunk")

    code, channels, rate, _, block_align, bits = fmt
    if channels not in (1, 2):
        raise UnsupportedWavError(f"{path}: {channels} channels (only 1 or 2 supported)")
    if code == _FORMAT_PCM and bits == 16:
        dtype = np.dtype("<i2")
    elif code == _FORMAT_FLOAT and bits == 32:
        dtype = np.dtype("<f4")
    else:
        raise UnsupportedWavError(f"{path}: format code {code} with {bits} bits is not supported")
    if rate <= 0:
        raise UnsupportedWavError(f"{path}: sample rate {rate}")
    frame_bytes = dtype.itemsize * channels
    if len(pcm) % frame_bytes:
        raise TruncatedWavError(f"{path}: data chunk ends mid-frame")

    frames = np.frombuffer(pcm, dtype=dtype).reshape(-1, channels).T
    if dtype.kind == "i":
        samples = frames.astype(np.float64) / PCM16_SCALE
    else:
        samples = frames.astype(np.float64)
    return AudioClip(samples, rate)


def _info_chunk(comment: str) -> bytes:
    text = comment.encode("utf-8") + b"\x00"
    if len(text) & 1:
        text += b"\x00"
    sub = b"ICMT" + struct.pack("<I", len(text)) + text
    body = b"INFO" + sub
    return b"LIST" + struct.pack("<I", len(body)) + body


def write_wav(path, clip: AudioClip, format: str = "float32", comment: str | None = None) -> None:
    """Write ``clip`` as a PCM16 or float32 WAV file.

    ``pcm16`` clamps to ``[-1, 1)`` and rounds to the nearest integer step.
    ``float32`` casts samples to single precision; a clip whose samples are
    already float32-representable round-trips exactly through `read_wav`.
    An optional ``comment`` is stored in a LIST/INFO chunk (ICMT).
    """
    if format == "pcm16":
        q = np.rint(np.clip(clip.samples, -1.0, 1.0) * PCM16_SCALE)
        payload = np.clip(q, -32768, 32767).astype("<i2")
        code, bits = _FORMAT_PCM, 16
    elif format == "float32":
        payload = clip.samples.astype("<f4")
        code, bits = _FORMAT_FLOAT, 32
    else:
        raise ValueError(f"unknown WAV format {format!r} (expected 'pcm16' or 'float32')")
    if clip.channels not in (1, 2):
        raise UnsupportedWavError(f"cannot write {clip.channels} channels (only 1 or 2)")

    raw = np.ascontiguousarray(payload.T).tobytes()
    block_align = clip.channels * bits // 8
    fmt = struct.pack(
        "<HHIIHH", code, clip.channels, clip.sample_rate,
        clip.sample_rate * block_align, block_align, bits,
    )
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    if comment:
        chunks += _info_chunk(comment)
    chunks += b"data" + struct.pack("<I", len(raw)) + raw
    if len(raw) & 1:
        chunks += b"\x00"
    blob = b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks
    path = Path(path)
    try:
        path.write_bytes(blob)
    except OSError as exc:
        raise WavError(f"cannot write {path}: {exc}") from exc


def mix(clips: Sequence[AudioClip]) -> AudioClip:
    """Sample-wise sum of clips, without any normalisation."""
    clips = list(clips)
    if not clips:
        raise ValueError("mix needs at least one clip")
    ref = clips[0]
    total = np.zeros_like(ref.samples)
    for c in clips:
        if c.samples.shape != ref.samples.shape or c.sample_rate != ref.sample_rate:
            raise ClipMismatchError(
                f"cannot mix shape {c.samples.shape} @ {c.sample_rate} Hz with "
                f"{ref.samples.shape} @ {ref.sample_rate} Hz"
            )
        total += c.samples
    return AudioClip(total, ref.sample_rate)
