"""Numerical check of the Gaussian-window phase/amplitude relation.

With ``h(t) = lam**-0.5 * pi**-0.25 * exp(-t**2 / (2 lam**2))`` and the
symmetric continuous STFT

    X(w, t) = exp(j w t / 2) * integral x(u) h(t - u) exp(-j w u) du,

phase and log-amplitude satisfy

    d/dt phi = +lam**-2 * d/dw log A + w / 2
    d/dw phi = -lam**2  * d/dt log A - t / 2

for any signal. This module evaluates ``X`` by trapezoidal quadrature on a
``(w, t)`` grid and measures both residuals with centred finite differences.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .phase_features import wrap

__all__ = [
    "TfGrid",
    "RelationReport",
    "gaussian_window",
    "gaussian_stft_grid",
    "chirp",
    "chirp_stft_closed_form",
    "relation_residual",
    "write_relation_csv",
    "chirp_check_grid",
    "chirp_relation_check",
]

Signal = Callable[[np.ndarray], np.ndarray]

#: window support used by the quadrature, in units of lambda
TRUNCATION = 6.0
#: minimum samples per period of the highest analysed frequency
MIN_OVERSAMPLING = 4.0


@dataclass(frozen=True)
class TfGrid:
    """Uniform time/frequency analysis grid.

    ``times`` in seconds, ``omegas`` in rad/s; ``sample_rate`` sets the
    quadrature step ``1 / sample_rate`` over the integration variable.
    """

    times: np.ndarray
    omegas: np.ndarray
    lam: float
    sample_rate: float

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        for name in ("times", "omegas"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.ndim != 1 or a.size < 3:
                raise ValueError(f"{name} must be a 1-D grid with at least 3 points")
            d = np.diff(a)
            if np.any(d <= 0) or np.ptp(d) > 1e-9 * abs(d[0]):
                raise ValueError(f"{name} must be uniform and increasing")
            object.__setattr__(self, name, a)
        nyquist = np.pi * self.sample_rate
        max_w = np.max(np.abs(self.omegas))
        if max_w * MIN_OVERSAMPLING > 2.0 * nyquist:
            raise ValueError(
                f"sample_rate {self.sample_rate} Hz too low for |omega| up to {max_w:.1f} rad/s "
                f"(need oversampling >= {MIN_OVERSAMPLING})"
            )

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def dw(self) -> float:
        return float(self.omegas[1] - self.omegas[0])

    def refined(self, factor: int = 2) -> "TfGrid":
        """Same extent, steps divided by ``factor``."""
        def refine(a):
            return np.linspace(a[0], a[-1], (len(a) - 1) * factor + 1)
        return TfGrid(refine(self.times), refine(self.omegas), self.lam, self.sample_rate)


@dataclass
class RelationReport:
    omegas: np.ndarray
    times: np.ndarray
    residual_a: np.ndarray
    residual_b: np.ndarray
    rel_residual_a: np.ndarray
    rel_residual_b: np.ndarray
    mask: np.ndarray
    threshold: float

    @property
    def median_a(self) -> float:
        return float(np.median(self.rel_residual_a[self.mask]))

    @property
    def median_b(self) -> float:
        return float(np.median(self.rel_residual_b[self.mask]))

    def passes(self, tol: float = 0.05) -> bool:
        return self.median_a < tol and self.median_b < tol


def gaussian_window(t: np.ndarray, lam: float) -> np.ndarray:
    return lam ** -0.5 * np.pi ** -0.25 * np.exp(-np.asarray(t) ** 2 / (2.0 * lam ** 2))


def gaussian_stft_grid(signal: Signal, grid: TfGrid) -> np.ndarray:
    """Quadrature of the symmetric STFT; returns an array of shape ``(len(omegas), len(times))``.

    ``signal`` is a vectorised callable ``x(u)`` (u in seconds), real or
    complex. The window is truncated at ``+-6 lam``.
    """
    step = 1.0 / grid.sample_rate
    half = int(np.ceil(TRUNCATION * grid.lam / step))
    offsets = np.arange(-half, half + 1) * step
    win = gaussian_window(offsets, grid.lam)
    # trapezoid end weights; the window is ~1e-8 there so this is cosmetic
    weights = win * step
    weights[[0, -1]] *= 0.5

    out = np.empty((grid.omegas.size, grid.times.size), dtype=np.complex128)
    for j, t in enumerate(grid.times):
        u = t - offsets
        xu = np.asarray(signal(u), dtype=np.complex128) * weights
        if xu.shape != u.shape:
            raise ValueError("signal must return one value per sample time")
        kernel = np.exp(-1j * np.outer(grid.omegas, u))
        out[:, j] = np.exp(0.5j * grid.omegas * t) * (kernel @ xu)
    return out


def chirp(w0: float, rate: float, fade_in: float | None = None) -> Signal:
    """Analytic linear chirp ``exp(j (w0 u + rate u**2 / 2))``; ``rate`` in rad/s^2.

    With ``fade_in`` (seconds) the chirp is multiplied by
    ``(1 + tanh(u / fade_in)) / 2``. Without it log-amplitude and phase of the
    STFT are exactly quadratic, so centred differences carry no truncation
    error; the fade-in gives finite differences something to converge on.
    """
    def x(u):
        u = np.asarray(u, dtype=np.float64)
        out = np.exp(1j * (w0 * u + 0.5 * rate * u ** 2))
        if fade_in is not None:
            out = out * 0.5 * (1.0 + np.tanh(u / fade_in))
        return out
    return x


def chirp_stft_closed_form(w0: float, rate: float, grid: TfGrid) -> np.ndarray:
    """Exact symmetric Gaussian-window STFT of an un-faded `chirp`.

    Evaluated as a complex Gaussian integral:

    ``integral exp(-P u^2 + Q u + R) du = sqrt(pi / P) exp(Q^2 / (4P) + R)``
    with ``Re P > 0``; the principal square root is the correct branch.
    """
    lam = grid.lam
    w = grid.omegas[:, np.newaxis]
    t = grid.times[np.newaxis, :]
    p = 1.0 / (2.0 * lam ** 2) - 0.5j * rate
    q = t / lam ** 2 + 1j * (w0 - w)
    r = -t ** 2 / (2.0 * lam ** 2)
    integral = np.sqrt(np.pi / p) * np.exp(q ** 2 / (4.0 * p) + r)
    return np.exp(0.5j * w * t) * lam ** -0.5 * np.pi ** -0.25 * integral


def relation_residual(signal: Signal, grid: TfGrid, threshold: float = 0.01,
                      values: np.ndarray | None = None) -> RelationReport:
    """Residuals of both relations on the interior of ``grid``.

    Derivatives are centred differences; phase differences are wrapped to
    ``[-pi, pi)`` before division by the step. Relative residuals divide by
    ``|d/dt phi| + |w/2|`` and ``|d/dw phi| + |t/2|``. Points whose amplitude
    is at most ``threshold * max`` are masked out. ``values`` may supply a
    precomputed STFT on ``grid`` instead of running the quadrature.

    Raises
    ------
    ValueError
        If no interior point clears the amplitude threshold.
    """
    X = gaussian_stft_grid(signal, grid) if values is None else np.asarray(values)
    amp = np.abs(X)
    if amp.max() == 0:
        raise ValueError("signal has zero STFT everywhere; nothing to verify")
    ph = np.angle(X)
    with np.errstate(divide="ignore"):
        log_a = np.log(amp)
    dw, dt = grid.dw, grid.dt
    # interior slices: axis 0 is omega, axis 1 is time
    c = (slice(1, -1), slice(1, -1))
    dphi_dt = wrap(ph[1:-1, 2:] - ph[1:-1, :-2]) / (2 * dt)
    dphi_dw = wrap(ph[2:, 1:-1] - ph[:-2, 1:-1]) / (2 * dw)
    dlog_dt = (log_a[1:-1, 2:] - log_a[1:-1, :-2]) / (2 * dt)
    dlog_dw = (log_a[2:, 1:-1] - log_a[:-2, 1:-1]) / (2 * dw)

    w = grid.omegas[1:-1, np.newaxis]
    t = grid.times[np.newaxis, 1:-1]
    lam = grid.lam
    res_a = dphi_dt - dlog_dw / lam ** 2 - w / 2
    res_b = dphi_dw + lam ** 2 * dlog_dt + t / 2

    # mask needs the centre and all four stencil neighbours above threshold
    level = threshold * amp.max()
    above = amp > level
    mask = (above[c] & above[2:, 1:-1] & above[:-2, 1:-1]
            & above[1:-1, 2:] & above[1:-1, :-2])
    if not mask.any():
        raise ValueError("no grid point exceeds the amplitude threshold")
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_a = np.abs(res_a) / (np.abs(dphi_dt) + np.abs(w / 2))
        rel_b = np.abs(res_b) / (np.abs(dphi_dw) + np.abs(t / 2))
    return RelationReport(
        omegas=grid.omegas[1:-1], times=grid.times[1:-1],
        residual_a=res_a, residual_b=res_b,
        rel_residual_a=rel_a, rel_residual_b=rel_b,
        mask=mask, threshold=threshold,
    )


def write_relation_csv(path, report: RelationReport, preamble: str | None = None) -> None:
    """Write masked points as ``omega,t,residual_a,residual_b``."""
    iw, it = np.nonzero(report.mask)
    with Path(path).open("w", newline="") as fh:
        if preamble:
            fh.write(f"# {preamble}\n")
        w = csv.writer(fh)
        w.writerow(["omega", "t", "residual_a", "residual_b"])
        for a, b in zip(iw, it):
            w.writerow([repr(float(report.omegas[a])), repr(float(report.times[b])),
                        repr(float(report.residual_a[a, b])), repr(float(report.residual_b[a, b]))])


def chirp_check_grid(lam: float, dt: float = 1e-3, dw: float = 4.0,
                     sample_rate: float = 4000.0) -> TfGrid:
    """Grid for the standard chirp check: ``|t| <= 5 lam`` and 2000..3000 rad/s.

    The phase advances by about ``omega / 2`` per second, so the centred
    time difference spans ``omega * dt`` radians; ``dt = 1 ms`` keeps that
    below pi for the analysed band and avoids aliasing after wrapping.
    """
    n_t = int(round(10 * lam / dt)) + 1
    n_w = int(round(1000.0 / dw)) + 1
    return TfGrid(np.linspace(-5 * lam, 5 * lam, n_t),
                  np.linspace(2000.0, 3000.0, n_w), lam, sample_rate)


def chirp_relation_check(lam: float = 0.02, threshold: float = 0.01,
                         fade_in: float = 0.01) -> tuple[RelationReport, RelationReport]:
    """Residual reports for a faded 400 Hz, 400 Hz/s chirp on a grid and its 2x refinement."""
    w0 = rate = 2 * np.pi * 400.0
    signal = chirp(w0, rate, fade_in)
    grid = chirp_check_grid(lam)
    return (relation_residual(signal, grid, threshold),
            relation_residual(signal, grid.refined(), threshold))
