"""Experiment runners shared by the CLI and the acceptance suite.

Each runner takes in-memory songs so it can be driven either from a corpus
on disk or from freshly generated synthetic songs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import INSTRUMENTS
from .dataset import DatasetStats, Song, assemble_examples, compute_stats
from .evaluation import ScoreReport, aggregate, evaluate_song
from .neuralnet import (ModelBundle, TrainConfig, TrainResult, build_amp_net, build_concat_net,
                        build_joint_net, build_phase_net, input_weight_ratio, train)
from .phase_features import PhaseFeatureConfig
from .separation import (WienerConfig, estimate_amplitudes, irm_amplitude, oracle_phase_synthesize,
                         separate_amplitudes, synthesize)
from .stft import StftConfig, phase, stft

log = logging.getLogger(__name__)

__all__ = [
    "FEATURE_VARIANTS",
    "phase_variant",
    "build_network",
    "train_instrument",
    "train_bundle",
    "feature_training_mse",
    "evaluate_bundle",
    "upper_bound_reports",
    "concat_probe",
]


def phase_variant(name: str, stft_cfg: StftConfig) -> PhaseFeatureConfig:
    """Named pre-processing variant for ablations.

    ``raw``, ``dt``, ``dt_shift``, ``df``, ``df_shift``, ``dt+df`` and
    ``dt+df_shift`` (both derivatives, both corrections).
    """
    n, hop = stft_cfg.fft_size, stft_cfg.hop
    table = {
        "raw": dict(raw_phase=True, use_time_derivative=False, use_freq_derivative=False),
        "dt": dict(use_freq_derivative=False, correct_time_shift=False),
        "dt_shift": dict(use_freq_derivative=False),
        "df": dict(use_time_derivative=False, correct_freq_shift=False),
        "df_shift": dict(use_time_derivative=False),
        "dt+df": dict(correct_time_shift=False, correct_freq_shift=False),
        "dt+df_shift": dict(),
    }
    if name not in table:
        raise ValueError(f"unknown phase variant {name!r}; choose from {sorted(table)}")
    return PhaseFeatureConfig(fft_size=n, hop=hop, **table[name])


FEATURE_VARIANTS = ("raw", "dt", "dt_shift", "df", "df_shift", "dt+df", "dt+df_shift")


def build_network(architecture: str, stats: DatasetStats, context: int, instrument: str,
                  phase_cfg: PhaseFeatureConfig | None, hidden: int, seed: int):
    ch, k = stats.mean.shape
    f = phase_cfg.n_features if phase_cfg else 0
    if architecture == "amp_only":
        return build_amp_net(k, ch, context, stats, instrument, hidden=hidden, seed=seed)
    if architecture == "phase_only":
        return build_phase_net(k, ch, context, stats, instrument, f, hidden=hidden, seed=seed)
    if architecture == "joint":
        return build_joint_net(k, ch, context, stats, instrument, f, hidden=hidden, seed=seed)
    if architecture == "concat":
        return build_concat_net(k, ch, context, stats, instrument, f, hidden=hidden, seed=seed)
    raise ValueError(f"unknown architecture {architecture!r}")


def _inputs(batch, architecture):
    if architecture == "concat":
        return np.concatenate([batch.amp, batch.phase], axis=1)
    return batch.inputs


def train_instrument(songs: Sequence[Song], architecture: str, instrument: str,
                     stft_cfg: StftConfig, phase_cfg: PhaseFeatureConfig | None,
                     stats: DatasetStats, train_cfg: TrainConfig, context: int = 5,
                     hidden: int = 500, input_source: str = "mixture") -> TrainResult:
    use_amp = architecture != "phase_only"
    use_phase = architecture != "amp_only"
    batch = assemble_examples(songs, stft_cfg, phase_cfg if use_phase else None, context, stats,
                              instrument, use_amplitude=use_amp, use_phase=use_phase,
                              input_source=input_source)
    net = build_network(architecture, stats, context, instrument,
                        phase_cfg if use_phase else None, hidden, train_cfg.seed)
    return train(net, _inputs(batch, architecture), batch.targets, train_cfg)


def train_bundle(songs: Sequence[Song], architecture: str, stft_cfg: StftConfig,
                 phase_cfg: PhaseFeatureConfig | None, train_cfg: TrainConfig,
                 context: int = 5, hidden: int = 500,
                 instruments: Sequence[str] = INSTRUMENTS,
                 stats: DatasetStats | None = None, metadata: dict | None = None,
                 input_source: str = "mixture") -> ModelBundle:
    """Train one network per instrument on ``songs`` (the training split).

    ``input_source="instrument"`` feeds each network its own instrument's
    STFT (the clean-reconstruction task) instead of the mixture.
    """
    songs = list(songs)
    if stats is None:
        stats = compute_stats(songs, stft_cfg)
    if architecture == "amp_only":
        phase_cfg = None
    nets, curves = {}, {}
    for inst in instruments:
        res = train_instrument(songs, architecture, inst, stft_cfg, phase_cfg, stats,
                               train_cfg, context, hidden, input_source)
        nets[inst] = res.net
        curves[inst] = res.curve
        log.info("%s/%s: %d epochs, final train mse %.4g", architecture, inst,
                 len(res.curve), res.final_train_mse)
    meta = {"train": train_cfg.to_dict(), "hidden": hidden, "input_source": input_source}
    meta.update(metadata or {})
    return ModelBundle(nets, stats, stft_cfg, phase_cfg, architecture, context, curves, meta)


def feature_training_mse(songs: Sequence[Song], stft_cfg: StftConfig, variant: str,
                         task: str, seeds: Iterable[int], train_cfg: TrainConfig,
                         context: int = 5, hidden: int = 500,
                         instruments: Sequence[str] = INSTRUMENTS,
                         stats: DatasetStats | None = None) -> dict[str, list[float]]:
    """Final training MSE of phase-only networks for one pre-processing variant.

    ``task`` is ``"clean"`` (instrument amplitude from the instrument's own
    phase) or ``"separation"`` (from the mixture phase). Returns instrument
    -> list of final training MSE, one per seed.
    """
    source = {"clean": "instrument", "separation": "mixture"}[task]
    songs = list(songs)
    if stats is None:
        stats = compute_stats(songs, stft_cfg)
    pcfg = phase_variant(variant, stft_cfg)
    out = {}
    for inst in instruments:
        out[inst] = []
        for seed in seeds:
            res = train_instrument(songs, "phase_only", inst, stft_cfg, pcfg, stats,
                                   replace(train_cfg, seed=seed), context, hidden, source)
            out[inst].append(res.final_train_mse)
    return out


def evaluate_bundle(bundle: ModelBundle, songs: Sequence[Song],
                    wiener: WienerConfig | None = WienerConfig(),
                    metadata: dict | None = None) -> ScoreReport:
    """SDR of the full pipeline; ``wiener=None`` resynthesises raw amplitudes with mixture phase."""
    per_song = {}
    for song in songs:
        spec = stft(song.mixture, bundle.stft_config)
        amps = estimate_amplitudes(bundle, song.mixture, spec)
        if wiener is None:
            est = {n: synthesize(a, phase(spec), bundle.stft_config, song.mixture.length)
                   for n, a in amps.items()}
        else:
            est = separate_amplitudes(amps, spec, wiener).estimates
        per_song[song.name], _ = evaluate_song(song, est)
    meta = {"architecture": bundle.architecture,
            "phase_features": bundle.phase_config.tag if bundle.phase_config else "none",
            "wiener": wiener.to_dict() if wiener else None}
    meta.update(metadata or {})
    return aggregate(per_song, meta)


def upper_bound_reports(bundle: ModelBundle, songs: Sequence[Song]) -> dict[str, ScoreReport]:
    """Scores for the three columns of an upper-bound table.

    ``dnn_mixture_phase``: network amplitude with mixture phase;
    ``irm_mixture_phase``: ideal-ratio-mask amplitude with mixture phase;
    ``dnn_oracle_phase``: network amplitude with each source's true phase.
    """
    cfg = bundle.stft_config
    cols = {"dnn_mixture_phase": {}, "irm_mixture_phase": {}, "dnn_oracle_phase": {}}
    for song in songs:
        spec = stft(song.mixture, cfg)
        mix_phase = phase(spec)
        amps = estimate_amplitudes(bundle, song.mixture, spec)
        src_specs = {n: stft(c, cfg) for n, c in song.sources.items()}
        irm = irm_amplitude(src_specs, spec)
        n = song.mixture.length
        est = {
            "dnn_mixture_phase": {j: synthesize(amps[j], mix_phase, cfg, n) for j in amps},
            "irm_mixture_phase": {j: synthesize(irm[j], mix_phase, cfg, n) for j in amps},
            "dnn_oracle_phase": {j: oracle_phase_synthesize(amps[j], song.sources[j], cfg)
                                 for j in amps},
        }
        for col in cols:
            cols[col][song.name], _ = evaluate_song(song, est[col])
    return {col: aggregate(v, {"column": col}) for col, v in cols.items()}


@dataclass
class ProbeResult:
    ratio: float
    initial_ratio: float
    curve: list


def concat_probe(songs: Sequence[Song], stft_cfg: StftConfig, phase_cfg: PhaseFeatureConfig,
                 instrument: str, train_cfg: TrainConfig, context: int = 5,
                 hidden: int = 500) -> ProbeResult:
    """Train the naive concatenated-input network and report the input weight ratio.

    The ratio is mean |W| over phase input columns divided by mean |W| over
    amplitude input columns of the first dense layer.
    """
    songs = list(songs)
    stats = compute_stats(songs, stft_cfg)
    batch = assemble_examples(songs, stft_cfg, phase_cfg, context, stats, instrument)
    net = build_network("concat", stats, context, instrument, phase_cfg, hidden, train_cfg.seed)
    n_amp = batch.amp.shape[1]
    before = input_weight_ratio(net, n_amp)
    res = train(net, _inputs(batch, "concat"), batch.targets, train_cfg)
    return ProbeResult(input_weight_ratio(res.net, n_amp), before, res.curve)
