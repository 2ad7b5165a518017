"""Weighted nonlinear least squares (Levenberg-Marquardt) and the model
functions used by the analysis and procedures modules."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ifmsim.apparatus import FWHM_PER_SIGMA


class FitError(RuntimeError):
    """The optimiser did not converge."""


class DesignError(ValueError):
    """The data cannot determine the model parameters."""


@dataclass(frozen=True)
class LsqResult:
    params: np.ndarray
    covariance: np.ndarray
    chi_square: float
    dof: int
    iterations: int
    gradient_norm: float


Model = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def _relative_gradient(jac, r, y, w):
    # |J^T W r| per column, relative to |J_col|_W * |y|_W
    g = jac.T @ (w * r)
    cnorm = np.sqrt(np.sum(w[:, None] * jac * jac, axis=0))
    ynorm = np.sqrt(np.sum(w * y * y))
    denom = cnorm * ynorm
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(denom > 0, np.abs(g) / denom, 0.0)
    return float(np.max(rel)) if rel.size else 0.0


def levenberg_marquardt(model: Model, x, y, weights, p0, *, gtol: float = 1e-10,
                        max_iter: int = 200) -> LsqResult:
    """Minimise sum w (y - f(x, p))^2.

    ``model(x, p)`` returns ``(f, jac)`` with ``jac`` of shape (n, k).
    The covariance is the inverse Gauss-Newton normal matrix (J^T W J)^-1
    at the optimum, i.e. weights are taken as inverse variances.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    p = np.array(p0, dtype=float)
    n, k = y.size, p.size
    if n < k:
        raise DesignError(f"{n} data points cannot determine {k} parameters")

    f, jac = model(x, p)
    r = y - f
    chi2 = float(np.sum(w * r * r))
    lam = 1e-3
    grad = _relative_gradient(jac, r, y, w)
    it = 0
    converged = grad <= gtol or chi2 == 0.0
    while not converged and it < max_iter:
        it += 1
        a = jac.T @ (w[:, None] * jac)
        g = jac.T @ (w * r)
        d = np.sqrt(np.diag(a))
        if np.any(d == 0):
            raise DesignError("a parameter has no influence on the model")
        a_s = a / np.outer(d, d)
        g_s = g / d
        for _ in range(40):
            try:
                step = np.linalg.solve(a_s + lam * np.eye(k), g_s) / d
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            p_new = p + step
            f_new, jac_new = model(x, p_new)
            r_new = y - f_new
            chi2_new = float(np.sum(w * r_new * r_new))
            # steps whose chi^2 change is below its rounding noise still count:
            # near the optimum they are what drives the gradient to zero
            if np.isfinite(chi2_new) and chi2_new <= chi2 * (1 + 1e-13):
                p, f, jac, r, chi2 = p_new, f_new, jac_new, r_new, chi2_new
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
        grad = _relative_gradient(jac, r, y, w)
        converged = grad <= gtol or chi2 == 0.0
    if not converged:
        raise FitError(f"no convergence after {it} iterations (scaled gradient {grad:.3e})")

    a = jac.T @ (w[:, None] * jac)
    d = np.sqrt(np.diag(a))
    live = d > 0
    # parameters with no influence at the optimum get infinite variance
    cov = np.zeros((k, k))
    cov[~live, ~live] = np.inf
    try:
        dl = d[live]
        cov[np.ix_(live, live)] = np.linalg.inv(a[np.ix_(live, live)] / np.outer(dl, dl)) / np.outer(dl, dl)
    except np.linalg.LinAlgError as exc:
        raise DesignError("singular normal matrix at the optimum") from exc
    return LsqResult(p, cov, chi2, n - k, it, grad)


def fringe_model(chi: np.ndarray, p: np.ndarray):
    """offset + amplitude * cos(chi + phase)"""
    o, a, ph = p
    c = np.cos(chi + ph)
    s = np.sin(chi + ph)
    return o + a * c, np.column_stack([np.ones_like(chi), c, -a * s])


def sinusoid_model(x: np.ndarray, p: np.ndarray):
    """offset + amplitude * cos(freq * x + phase)"""
    o, a, k, ph = p
    arg = k * x + ph
    c = np.cos(arg)
    s = np.sin(arg)
    return o + a * c, np.column_stack([np.ones_like(x), c, -a * x * s, -a * s])


def gaussian_sum_model(x: np.ndarray, p: np.ndarray):
    """Sum of Gaussians, parameters (center, fwhm, height) per peak."""
    p = np.asarray(p).reshape(-1, 3)
    f = np.zeros_like(x)
    cols = []
    for c, fw, h in p:
        sig = fw / FWHM_PER_SIGMA
        u = (x - c) / sig
        e = np.exp(-0.5 * u * u)
        f = f + h * e
        cols += [h * e * u / sig, h * e * u * u / fw, e]
    return f, np.column_stack(cols)


def poisson_weights(counts) -> np.ndarray:
    """Inverse-variance weights from observed counts, floored at one count."""
    return 1.0 / np.maximum(np.asarray(counts, dtype=float), 1.0)
