"""Weighted exponential-decay fits shared by retention and coherence analysis."""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .errors import FitError


@dataclass
class ExpFit:
    amplitude: float
    tau: float
    amplitude_stderr: float
    tau_stderr: float
    # covariance of (amplitude, rate) with rate = 1/tau
    covariance: np.ndarray
    chi2_reduced: float

    @property
    def decays(self) -> bool:
        return np.isfinite(self.tau)

    def to_json(self) -> dict:
        def num(v):
            return float(v) if np.isfinite(v) else None

        return {
            "model": "A*exp(-x/tau)",
            "amplitude": num(self.amplitude),
            "tau": num(self.tau),
            "amplitude_stderr": num(self.amplitude_stderr),
            "tau_stderr": num(self.tau_stderr),
            "covariance_amplitude_rate": [[num(v) for v in row] for row in self.covariance],
            "chi2_reduced": num(self.chi2_reduced),
        }


def fit_exponential(x, y, sigma=None) -> ExpFit:
    """Weighted least squares for y = A exp(-x / tau).

    The start point comes from a weighted log-linear regression over the
    positive samples.  The fit runs in the decay rate 1/tau so that a flat
    data set converges to rate 0, reported as ``tau = inf``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sigma = np.ones_like(y) if sigma is None else np.asarray(sigma, dtype=float)
    if x.shape != y.shape or y.shape != sigma.shape:
        raise FitError("x, y and sigma must have the same length")
    if len(x) < 3:
        raise FitError("need at least 3 points")
    if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
        raise FitError("sigmas must be positive and finite")
    if np.ptp(x) == 0:
        raise FitError("all x values coincide")
    if np.all(y == y[0]) and y[0] in (0.0, 1.0):
        raise FitError(f"degenerate data: every sample equals {y[0]:g}")
    pos = y > 0
    if np.count_nonzero(pos) < 2:
        raise FitError("fewer than two positive samples")

    w = (y[pos] / sigma[pos]) ** 2
    X = np.column_stack([np.ones(pos.sum()), x[pos]])
    beta = np.linalg.lstsq(X * np.sqrt(w)[:, None], np.log(y[pos]) * np.sqrt(w), rcond=None)[0]
    p0 = np.array([np.exp(beta[0]), max(-beta[1], 0.0)])

    xs = max(np.max(np.abs(x)), 1e-300)

    def resid(p):
        return (p[0] * np.exp(-p[1] * x) - y) / sigma

    def jac(p):
        e = np.exp(-p[1] * x)
        return np.column_stack([e, -p[0] * x * e]) / sigma[:, None]

    sol = least_squares(resid, p0, jac=jac, method="lm", x_scale=[max(abs(p0[0]), 1e-12), 1.0 / xs],
                        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=10000)
    if not sol.success:
        raise FitError(f"least squares did not converge: {sol.message}")
    A, k = sol.x
    J = jac(sol.x)
    dof = max(len(x) - 2, 1)
    chi2 = float(np.sum(sol.fun**2) / dof)
    try:
        cov = np.linalg.inv(J.T @ J)
    except np.linalg.LinAlgError as exc:
        raise FitError("singular normal matrix") from exc
    a_err = float(np.sqrt(cov[0, 0]))
    k_err = float(np.sqrt(cov[1, 1]))
    # a rate this small is a flat curve up to rounding
    if k * xs <= 1e-12:
        return ExpFit(float(A), np.inf, a_err, np.inf, cov, chi2)
    return ExpFit(float(A), float(1.0 / k), a_err, float(k_err / k**2), cov, chi2)
