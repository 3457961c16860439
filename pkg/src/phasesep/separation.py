"""Separation pipeline, oracle baselines and Wiener post-filtering.

Amplitudes are tensors of shape ``(channels, frames, bins)`` and the complex
mixture STFT is a `Spectrogram` with the same shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .audio_io import AudioClip
from .dataset import stack_context
from .neuralnet import ModelBundle
from .phase_features import extract_phase_features
from .stft import Spectrogram, StftConfig, amplitude, istft, phase, polar_to_complex, stft

__all__ = [
    "WienerConfig",
    "SeparationResult",
    "SingularCovarianceError",
    "estimate_amplitudes",
    "irm_amplitude",
    "synthesize",
    "oracle_phase_synthesize",
    "wiener_filter",
    "separate_amplitudes",
    "separate",
]


class SingularCovarianceError(np.linalg.LinAlgError):
    """Mixture covariance could not be inverted even after diagonal loading."""


@dataclass(frozen=True)
class WienerConfig:
    """``ratio_mask``: per-channel soft mask ``v_j / sum v``.

    ``multichannel``: spatial covariance model with relative diagonal
    loading ``eps`` and ``em_iterations`` re-estimations of the source
    powers after the first pass.
    """

    mode: str = "multichannel"
    em_iterations: int = 1
    eps: float = 1e-8

    def __post_init__(self):
        if self.mode not in ("ratio_mask", "multichannel"):
            raise ValueError(f"unknown Wiener mode {self.mode!r}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.em_iterations < 0:
            raise ValueError("em_iterations must be >= 0")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "em_iterations": self.em_iterations, "eps": self.eps}


@dataclass
class SeparationResult:
    estimates: dict[str, AudioClip]
    amplitudes: dict[str, np.ndarray]
    filtered: dict[str, np.ndarray]
    mixture_spec: Spectrogram
    spectrograms: dict[str, Spectrogram] = field(default_factory=dict)


def _bundle_inputs(bundle: ModelBundle, spec: Spectrogram):
    amp_in = ph_in = None
    if bundle.uses_amplitude:
        amp_in = stack_context(amplitude(spec), bundle.context)
    if bundle.uses_phase:
        ph_in = stack_context(extract_phase_features(phase(spec), bundle.phase_config), bundle.context)
    if bundle.architecture == "joint":
        return (amp_in, ph_in)
    if bundle.architecture == "concat":
        return np.concatenate([amp_in, ph_in], axis=1)
    return amp_in if amp_in is not None else ph_in


def estimate_amplitudes(bundle: ModelBundle, mixture: AudioClip,
                        spec: Spectrogram | None = None) -> dict[str, np.ndarray]:
    """Run every instrument network on each frame of ``mixture``.

    Raises
    ------
    ValueError
        Sample rate or channel count disagree with the bundle.
    """
    cfg = bundle.stft_config
    if mixture.sample_rate != cfg.sample_rate:
        raise ValueError(f"mixture at {mixture.sample_rate} Hz, bundle expects {cfg.sample_rate} Hz")
    if mixture.channels != bundle.stats.channels:
        raise ValueError(f"mixture has {mixture.channels} channels, bundle expects {bundle.stats.channels}")
    if spec is None:
        spec = stft(mixture, cfg)
    n_ch, n_frames, n_bins = spec.shape
    inputs = _bundle_inputs(bundle, spec)
    out = {}
    for inst, net in bundle.networks.items():
        y = net.predict(inputs)                                 # (M, I*K)
        out[inst] = np.moveaxis(y.reshape(n_frames, n_ch, n_bins), 0, 1).copy()
    return out


def irm_amplitude(sources: Mapping[str, Spectrogram], mixture: Spectrogram | None = None,
                  exponent: float = 1.0) -> dict[str, np.ndarray]:
    """Ideal ratio mask amplitudes ``mask_j * |X|``.

    ``mask_j = |S_j|^p / sum_i |S_i|^p`` (default ``p = 1``); where every
    source is silent each mask is ``1/J``. ``mixture`` defaults to the sum
    of the source spectrograms.
    """
    names = list(sources)
    if not names:
        raise ValueError("need at least one source")
    shape = sources[names[0]].shape
    for n in names:
        if sources[n].shape != shape:
            raise ValueError(f"source {n} spectrogram shape {sources[n].shape} != {shape}")
    mags = np.stack([np.abs(sources[n].values) ** exponent for n in names])
    total = mags.sum(axis=0)
    silent = total == 0
    masks = np.where(silent, 1.0 / len(names), mags / np.where(silent, 1.0, total))
    if mixture is None:
        mix_amp = np.abs(sum(sources[n].values for n in names))
    else:
        if mixture.shape != shape:
            raise ValueError("mixture and source spectrograms differ in shape")
        mix_amp = amplitude(mixture)
    return {n: masks[i] * mix_amp for i, n in enumerate(names)}


def synthesize(amp: np.ndarray, ph: np.ndarray, cfg: StftConfig, length: int | None = None) -> AudioClip:
    """Inverse STFT of ``amp * exp(j ph)``."""
    return istft(polar_to_complex(amp, ph, cfg, length))


def oracle_phase_synthesize(amp_est: np.ndarray, true_source: AudioClip, cfg: StftConfig) -> AudioClip:
    """Resynthesise an amplitude estimate with the true source phase."""
    ref = stft(true_source, cfg)
    if amp_est.shape != ref.shape:
        raise ValueError(f"amplitude shape {amp_est.shape} != source spectrogram {ref.shape}")
    return synthesize(amp_est, phase(ref), cfg, true_source.length)


def _check_hermitian_psd(R: np.ndarray, tol: float = 1e-9):
    herm = np.max(np.abs(R - np.conj(np.swapaxes(R, -1, -2))))
    scale = max(np.max(np.abs(R)), np.finfo(float).tiny)
    if herm > tol * scale:
        raise AssertionError(f"spatial covariance not Hermitian (deviation {herm:.3g})")
    lo = np.linalg.eigvalsh(R).min()
    if lo < -tol * scale:
        raise AssertionError(f"spatial covariance has negative eigenvalue {lo:.3g}")


def _spatial_covariances(x: np.ndarray, w: np.ndarray, eps: float) -> np.ndarray:
    """Weighted covariances ``R_j(k)``, shape ``(J, K, I, I)``.

    ``x`` is ``(M, K, I)``, ``w`` is ``(J, M, K)``. Bins with no mixture
    energy get the identity; all get diagonal loading ``eps * tr(R)/I``.
    """
    n_ch = x.shape[-1]
    xx = x[..., :, np.newaxis] * np.conj(x[..., np.newaxis, :])          # (M, K, I, I)
    num = np.einsum("jmk,mkab->jkab", w, xx)
    den = w.sum(axis=1)[..., np.newaxis, np.newaxis]                       # (J, K, 1, 1)
    R = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    eye = np.eye(n_ch)
    trace = np.real(np.trace(R, axis1=-2, axis2=-1))[..., np.newaxis, np.newaxis]
    empty = trace <= 0
    R = np.where(empty, eye, R)
    trace = np.where(empty, float(n_ch), trace)
    R = R + eps * trace / n_ch * eye
    # exact Hermitian symmetry regardless of summation rounding
    return 0.5 * (R + np.conj(np.swapaxes(R, -1, -2)))


def _multichannel(v: np.ndarray, x: np.ndarray, eps: float):
    """One multichannel Wiener pass. ``v`` is ``(J, M, K)``, ``x`` ``(M, K, I)``."""
    n_src = v.shape[0]
    n_ch = x.shape[-1]
    total = v.sum(axis=0)
    silent = total <= 0
    v = np.where(silent, 1.0, v)
    total = np.where(silent, float(n_src), total)
    w = v / total
    R = _spatial_covariances(x, w, eps)
    _check_hermitian_psd(R)

    C = np.einsum("jmk,jkab->mkab", v, R)                                # (M, K, I, I)
    tr = np.real(np.trace(C, axis1=-2, axis2=-1))[..., np.newaxis, np.newaxis]
    C = C + eps * tr / n_ch * np.eye(n_ch)
    try:
        Cinv = np.linalg.inv(C)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError(f"singular mixture covariance: {exc}") from exc
    bad = ~np.all(np.isfinite(Cinv), axis=(-2, -1))
    if bad.any():
        m, k = np.argwhere(bad)[0]
        raise SingularCovarianceError(f"singular mixture covariance at frame {m}, bin {k}")
    Cx = np.einsum("mkab,mkb->mka", Cinv, x)
    return np.einsum("jmk,jkab,mkb->jmka", v, R, Cx), R


def wiener_filter(estimates: Mapping[str, np.ndarray], mixture: Spectrogram,
                  cfg: WienerConfig = WienerConfig()) -> dict[str, Spectrogram]:
    """Turn amplitude estimates into complex source estimates.

    ``ratio_mask`` mode sums exactly to the mixture. ``multichannel`` mode
    uses ``v_j = mean_c A_j^2``, spatial covariances weighted by
    ``v_j / sum v``, and the gain ``v_j R_j (sum_i v_i R_i + loading)^-1``;
    it is invariant to a common scaling of all ``v_j``.
    """
    names = list(estimates)
    if len(names) < 2:
        raise ValueError("Wiener filtering needs at least two sources")
    X = mixture.values                                                      # (I, M, K)
    for n in names:
        if estimates[n].shape != X.shape:
            raise ValueError(f"estimate {n} has shape {estimates[n].shape}, mixture {X.shape}")
    power = np.stack([np.asarray(estimates[n], dtype=np.float64) ** 2 for n in names])

    if cfg.mode == "ratio_mask":
        total = power.sum(axis=0)
        silent = total == 0
        masks = np.where(silent, 1.0 / len(names), power / np.where(silent, 1.0, total))
        return {n: mixture.with_values(masks[i] * X) for i, n in enumerate(names)}

    x = np.moveaxis(X, 0, -1)                                               # (M, K, I)
    v = power.mean(axis=1)                                                  # (J, M, K)
    S, _ = _multichannel(v, x, cfg.eps)
    for _ in range(cfg.em_iterations):
        v = np.mean(np.abs(S) ** 2, axis=-1)
        S, _ = _multichannel(v, x, cfg.eps)
    return {n: mixture.with_values(np.moveaxis(S[i], -1, 0)) for i, n in enumerate(names)}


def separate_amplitudes(amps: Mapping[str, np.ndarray], spec: Spectrogram,
                        wiener: WienerConfig = WienerConfig()) -> SeparationResult:
    """Wiener-filter given amplitude estimates against ``spec`` and resynthesise."""
    specs = wiener_filter(amps, spec, wiener)
    clips = {n: istft(s) for n, s in specs.items()}
    filtered = {n: amplitude(s) for n, s in specs.items()}
    return SeparationResult(clips, dict(amps), filtered, spec, specs)


def separate(bundle: ModelBundle, mixture: AudioClip,
             wiener: WienerConfig = WienerConfig()) -> SeparationResult:
    """Estimate amplitudes, Wiener-filter them against the mixture, resynthesise."""
    spec = stft(mixture, bundle.stft_config)
    return separate_amplitudes(estimate_amplitudes(bundle, mixture, spec), spec, wiener)
