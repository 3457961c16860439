"""Signal-to-distortion scoring and run comparison.

The SDR here is the plain energy ratio ``10 log10(|s|^2 / |s - s_hat|^2)``,
not the BSS Eval projection-based SDR. Absolute values are therefore not
comparable with BSS Eval numbers; orderings and signs of improvements are.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .audio_io import AudioClip

log = logging.getLogger(__name__)

__all__ = [
    "SDR_CAP",
    "SDR_NOTE",
    "SilentReferenceError",
    "ScoreReport",
    "Comparison",
    "sdr",
    "evaluate_song",
    "aggregate",
    "compare",
    "write_scores_csv",
    "write_summary_json",
    "write_comparison_csv",
]

SDR_CAP = 300.0
SDR_NOTE = ("SDR is the plain energy ratio 10*log10(|s|^2/|s-s_hat|^2), not BSS Eval; "
            "absolute dB values are not comparable to BSS Eval results")


class SilentReferenceError(ValueError):
    """The reference signal is all zeros, so SDR is undefined."""


def _sdr_1d(s: np.ndarray, e: np.ndarray) -> float:
    num = float(np.dot(s, s))
    if num == 0.0:
        raise SilentReferenceError("reference is silent")
    err = s - e
    den = float(np.dot(err, err))
    if den == 0.0:
        return SDR_CAP
    return min(SDR_CAP, 10.0 * np.log10(num / den))


def sdr(reference, estimate, segment: float | None = None) -> float:
    """Channel-averaged SDR in dB, capped at +300 dB.

    ``reference``/``estimate`` are `AudioClip` or arrays of shape
    ``(channels, length)``. With ``segment`` (seconds, clips only) the score
    is the mean over non-overlapping segments with a non-silent reference.

    Raises
    ------
    SilentReferenceError
        Every channel (or segment) of the reference is silent.
    """
    rate = None
    if isinstance(reference, AudioClip):
        rate = reference.sample_rate
        reference = reference.samples
    if isinstance(estimate, AudioClip):
        estimate = estimate.samples
    s = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    e = np.atleast_2d(np.asarray(estimate, dtype=np.float64))
    if s.shape != e.shape:
        raise ValueError(f"reference shape {s.shape} != estimate shape {e.shape}")

    if segment is None:
        bounds = [(0, s.shape[1])]
    else:
        if rate is None:
            raise ValueError("segment mode needs AudioClip inputs (sample rate)")
        w = max(1, int(round(segment * rate)))
        bounds = [(a, min(a + w, s.shape[1])) for a in range(0, s.shape[1], w)]

    scores = []
    for a, b in bounds:
        per_ch = []
        for c in range(s.shape[0]):
            try:
                per_ch.append(_sdr_1d(s[c, a:b], e[c, a:b]))
            except SilentReferenceError:
                continue
        if per_ch:
            scores.append(float(np.mean(per_ch)))
    if not scores:
        raise SilentReferenceError("reference is silent")
    return float(np.mean(scores))


def evaluate_song(song, result, segment: float | None = None) -> tuple[dict[str, float], dict]:
    """SDR per instrument; returns ``(scores, info)``.

    ``song`` is a `Song` (or a mapping instrument -> reference clip) and
    ``result`` a `SeparationResult` (or a mapping instrument -> estimate).

    Estimates and references are trimmed to their common length
    (``info["trim"]`` records samples dropped per instrument); instruments
    with a silent reference are listed in ``info["skipped"]``.
    """
    sources = getattr(song, "sources", song)
    estimates = getattr(result, "estimates", result)
    scores, info = {}, {"trim": {}, "skipped": []}
    for inst, ref in sources.items():
        if inst not in estimates:
            raise KeyError(f"no estimate for {inst!r}")
        est = estimates[inst]
        n = min(ref.length, est.length)
        info["trim"][inst] = max(ref.length, est.length) - n
        r = AudioClip(ref.samples[:, :n], ref.sample_rate)
        try:
            scores[inst] = sdr(r, est.samples[:, :n], segment)
        except SilentReferenceError:
            info["skipped"].append(inst)
            log.info("skipping %s: silent reference", inst)
    return scores, info


@dataclass
class ScoreReport:
    """Per-(song, instrument) SDR with medians over songs."""

    scores: dict[str, dict[str, float]]
    medians: dict[str, float]
    metadata: dict = field(default_factory=dict)

    @property
    def songs(self) -> list[str]:
        return list(self.scores)

    @property
    def instruments(self) -> list[str]:
        return list(self.medians)

    @property
    def overall(self) -> float:
        """Median over songs of the per-song mean across instruments."""
        per_song = [np.mean(list(v.values())) for v in self.scores.values() if v]
        return float(np.median(per_song))


def aggregate(per_song: Mapping[str, Mapping[str, float]], metadata: dict | None = None) -> ScoreReport:
    """Median over songs per instrument (mean of the middle two for even counts)."""
    if not per_song:
        raise ValueError("aggregate needs at least one song")
    instruments = []
    for scores in per_song.values():
        for inst in scores:
            if inst not in instruments:
                instruments.append(inst)
    medians = {}
    for inst in instruments:
        vals = [s[inst] for s in per_song.values() if inst in s]
        medians[inst] = float(np.median(vals))
    meta = {"sdr_definition": SDR_NOTE}
    meta.update(metadata or {})
    return ScoreReport({k: dict(v) for k, v in per_song.items()}, medians, meta)


@dataclass
class Comparison:
    baseline: ScoreReport
    candidate: ScoreReport
    delta_db: dict[str, float]
    relative_pct: dict[str, float]

    def rows(self) -> list[tuple[str, float, float, float, float]]:
        return [(i, self.baseline.medians[i], self.candidate.medians[i],
                 self.delta_db[i], self.relative_pct[i]) for i in self.delta_db]


def compare(baseline: ScoreReport, candidate: ScoreReport) -> Comparison:
    """Absolute and relative change of per-instrument medians.

    Raises
    ------
    ValueError
        The two reports cover different songs or instruments.
    """
    if set(baseline.songs) != set(candidate.songs):
        raise ValueError("reports cover different song sets")
    if set(baseline.instruments) != set(candidate.instruments):
        raise ValueError("reports cover different instrument sets")
    delta, rel = {}, {}
    for inst in baseline.instruments:
        b, c = baseline.medians[inst], candidate.medians[inst]
        delta[inst] = c - b
        rel[inst] = 100.0 * (c - b) / abs(b) if b != 0 else float("nan")
    return Comparison(baseline, candidate, delta, rel)


def _preamble(fh, metadata: Mapping | None):
    if metadata:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in metadata.items()) + "\n")


def write_scores_csv(path, report: ScoreReport, metadata: Mapping | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        _preamble(fh, metadata)
        w = csv.writer(fh)
        w.writerow(["song", "instrument", "sdr_db"])
        for song, scores in report.scores.items():
            for inst, v in scores.items():
                w.writerow([song, inst, f"{v:.6f}"])


def write_summary_json(path, report: ScoreReport) -> None:
    doc = {"metadata": report.metadata, "medians": report.medians,
           "overall_median": report.overall, "n_songs": len(report.scores)}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def write_comparison_csv(path, comparison: Comparison, names: Sequence[str] = ("baseline", "candidate"),
                         metadata: Mapping | None = None) -> None:
    """Table with one row per instrument: both medians, dB change and relative change."""
    with Path(path).open("w", newline="") as fh:
        _preamble(fh, metadata)
        w = csv.writer(fh)
        w.writerow(["instrument", names[0], names[1], "delta_db", "relative_improvement_pct"])
        for inst, b, c, d, r in comparison.rows():
            w.writerow([inst, f"{b:.4f}", f"{c:.4f}", f"{d:+.4f}", f"{r:+.2f}"])
