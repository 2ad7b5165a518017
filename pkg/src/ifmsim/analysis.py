"""From counts back to physics: fringe fits, expectation values, S-value."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ifmsim.counting import CountRecord
from ifmsim.fitting import (
    DesignError,
    FitError,
    fringe_model,
    levenberg_marquardt,
    poisson_weights,
)

TWO_SQRT2 = 2.0 * math.sqrt(2.0)
CLASSICAL_BOUND = 2.0


class EstimateError(ValueError):
    """The estimator is undefined for the supplied counts."""


def wrap_phase(phi: float) -> float:
    """Map an angle to (-pi, pi]."""
    w = math.remainder(phi, 2 * math.pi)
    return math.pi if w == -math.pi else w


@dataclass(frozen=True)
class FringeFit:
    offset: float
    amplitude: float
    phase: float
    contrast: float
    covariance: np.ndarray
    chi_square: float
    dof: int

    @property
    def offset_sigma(self) -> float:
        return float(np.sqrt(self.covariance[0, 0]))

    @property
    def amplitude_sigma(self) -> float:
        return float(np.sqrt(self.covariance[1, 1]))

    @property
    def phase_sigma(self) -> float:
        return float(np.sqrt(self.covariance[2, 2]))

    @property
    def contrast_sigma(self) -> float:
        # delta method on C = A / O
        grad = np.array([-self.amplitude / self.offset**2, 1.0 / self.offset])
        return float(np.sqrt(max(grad @ self.covariance[:2, :2] @ grad, 0.0)))

    def evaluate(self, chi) -> np.ndarray:
        return self.offset + self.amplitude * np.cos(np.asarray(chi, dtype=float) + self.phase)


def _initial_guess(chi: np.ndarray, n: np.ndarray) -> np.ndarray:
    o = float(np.mean(n))
    a = math.sqrt(2.0) * float(np.sqrt(np.mean((n - o) ** 2)))
    # first Fourier component at the known 2pi period
    z = np.sum((n - o) * np.exp(-1j * chi))
    ph = float(np.angle(z)) if abs(z) > 0 else 0.0
    return np.array([o, a, ph])


def _zero_amplitude_covariance(chi: np.ndarray, w: np.ndarray, ph: float) -> np.ndarray:
    """Covariance of (O, A, phi) at A = 0, where the phase is undetermined.

    Uses the linear form O + c cos(chi) + s sin(chi); the amplitude variance
    is that of (c, s) projected on the returned phase direction, the limit
    of the Gauss-Newton value as A -> 0.
    """
    x = np.column_stack([np.ones_like(chi), np.cos(chi), np.sin(chi)])
    lin = np.linalg.inv(x.T @ (w[:, None] * x))
    u = np.array([0.0, math.cos(ph), -math.sin(ph)])
    t = np.array([[1.0, 0.0, 0.0], u])
    cov = np.full((3, 3), 0.0)
    cov[:2, :2] = t @ lin @ t.T
    cov[2, 2] = math.inf
    return cov


def fit_fringe_arrays(chi, counts) -> FringeFit:
    chi = np.asarray(chi, dtype=float)
    n = np.asarray(counts, dtype=float)
    if chi.shape != n.shape or chi.ndim != 1:
        raise DesignError("chi and counts must be matching 1-D arrays")
    if np.any(n < 0):
        raise DesignError("counts must be non-negative")
    distinct = np.unique(np.round(np.mod(chi, 2 * np.pi), 12))
    if distinct.size < 5:
        raise DesignError(f"need at least 5 distinct phase settings, got {distinct.size}")
    w = poisson_weights(n)
    res = levenberg_marquardt(fringe_model, chi, n, w, _initial_guess(chi, n))
    o, a, ph = res.params
    cov = res.covariance.copy()
    if a == 0.0:
        cov = _zero_amplitude_covariance(chi, w, ph)
    if a < 0:
        # (A, phi) and (-A, phi + pi) describe the same fringe
        a, ph = -a, ph + math.pi
        flip = np.diag([1.0, -1.0, 1.0])
        cov = flip @ cov @ flip
    if o <= 0:
        raise FitError(f"fitted offset {o:.6g} is not positive")
    return FringeFit(float(o), float(a), wrap_phase(float(ph)), float(a / o), cov, res.chi_square, res.dof)


def fit_fringe(records: Sequence[CountRecord]) -> FringeFit:
    """Weighted least-squares sinusoid over records scanning chi at fixed alpha."""
    if not records:
        raise DesignError("no records to fit")
    alphas = {r.setting.alpha for r in records}
    if len(alphas) != 1:
        raise DesignError("fringe records must share one spin setting alpha")
    chi = [r.setting.chi for r in records]
    counts = [r.observed_counts for r in records]
    return fit_fringe_arrays(chi, counts)


@dataclass(frozen=True)
class ExpectationEstimate:
    value: float
    sigma: float
    setting_pair: tuple[float, float]

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if abs(self.value) > 1 + 3 * self.sigma + 1e-12:
            raise ValueError(f"|E| = {abs(self.value):.6g} exceeds 1 + 3 sigma")


def expectation_from_count_values(n_pp: float, n_mm: float, n_pm: float, n_mp: float,
                                  setting_pair=(0.0, 0.0)) -> ExpectationEstimate:
    a = n_pp + n_mm
    b = n_pm + n_mp
    total = a + b
    if total <= 0:
        raise EstimateError("expectation value undefined for zero total counts")
    value = (a - b) / total
    sigma = 2.0 * math.sqrt(b * b * a + a * a * b) / total**2
    return ExpectationEstimate(value, sigma, tuple(setting_pair))


def expectation_from_counts(n_pp: CountRecord, n_mm: CountRecord, n_pm: CountRecord,
                            n_mp: CountRecord) -> ExpectationEstimate:
    """Four-rate estimator.

    Records are taken at (a, c), (a+pi, c+pi), (a, c+pi) and (a+pi, c).
    """
    pair = (n_pp.setting.alpha, n_pp.setting.chi)
    return expectation_from_count_values(n_pp.observed_counts, n_mm.observed_counts,
                                         n_pm.observed_counts, n_mp.observed_counts, pair)


def expectation_from_fringe(fit: FringeFit, fit_shifted: FringeFit, chi: float) -> float:
    """E at (alpha, chi) from fringes fitted at alpha and alpha + pi.

    Equal integration times are assumed for both fringes.
    """
    n_pp, n_pm = fit.evaluate([chi, chi + math.pi])
    n_mp, n_mm = fit_shifted.evaluate([chi, chi + math.pi])
    return float((n_pp + n_mm - n_pm - n_mp) / (n_pp + n_mm + n_pm + n_mp))


@dataclass(frozen=True)
class BellResult:
    e: tuple[ExpectationEstimate, ExpectationEstimate, ExpectationEstimate, ExpectationEstimate]
    s_value: float
    s_sigma: float
    n_sigma_violation: float


CHSH_SIGNS = (1.0, 1.0, -1.0, 1.0)


def chsh_s(e1: ExpectationEstimate, e2: ExpectationEstimate, e3: ExpectationEstimate,
           e4: ExpectationEstimate) -> BellResult:
    """S = E(a1,c1) + E(a1,c2) - E(a2,c1) + E(a2,c2), independent errors."""
    es = (e1, e2, e3, e4)
    s = sum(sign * e.value for sign, e in zip(CHSH_SIGNS, es))
    sig = math.sqrt(sum(e.sigma**2 for e in es))
    n_sig = (s - CLASSICAL_BOUND) / sig if sig > 0 else math.copysign(math.inf, s - CLASSICAL_BOUND)
    return BellResult(es, float(s), sig, n_sig)


def visibility_budget(contrast: float, polarization: float, flipper_effs: Sequence[float] = ()) -> float:
    v = contrast * polarization
    for f in flipper_effs:
        v *= f
    return v


def predicted_s(visibility: float) -> float:
    return TWO_SQRT2 * visibility
