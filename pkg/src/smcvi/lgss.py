"""Linear-Gaussian state-space model: simulation, exact Kalman likelihood,
the analytic two-step posterior, and the affine-Gaussian model/proposal
densities plugged into the particle filter.

The exact likelihood is the oracle against which the particle filter's
evidence estimate and the trained bounds are scored.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import autodiff as ad
from .autodiff import LOG_2PI
from .smc import ModelSpec

__all__ = [
    "LgssParams",
    "LgssProposal",
    "simulate",
    "kalman_loglik",
    "two_step_posterior",
    "lgss_model",
    "NumericError",
]


class NumericError(ArithmeticError):
    """Linear algebra failed (non positive-definite innovation, NaN, ...)."""


def _check_psd(name, m):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(m, m.T, atol=1e-10):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(m).min() < -1e-10:
        raise ValueError(f"{name} must be positive semi-definite")
    return m


def _sqrt_psd(m):
    # Cholesky when possible; eigenvalue square root otherwise (covers the
    # degenerate zero-covariance test configurations).
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(m)
        return v @ np.diag(np.sqrt(np.clip(w, 0.0, None)))


@dataclass
class LgssParams:
    """x_n = A x_{n-1} + N(0, sigma_x); y_n = B x_n + N(0, sigma_y);
    x_0 ~ N(a0, sigma_x0)."""

    A: np.ndarray
    B: np.ndarray
    sigma_x: np.ndarray
    sigma_y: np.ndarray
    sigma_x0: np.ndarray
    a0: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.sigma_x = _check_psd("sigma_x", np.atleast_2d(self.sigma_x))
        self.sigma_y = _check_psd("sigma_y", np.atleast_2d(self.sigma_y))
        self.sigma_x0 = _check_psd("sigma_x0", np.atleast_2d(self.sigma_x0))
        self.a0 = np.atleast_1d(np.asarray(self.a0, dtype=float))
        dx, dy = self.dx, self.dy
        if self.B.shape != (dy, dx):
            raise ValueError(f"B must be ({dy}, {dx})")
        if self.sigma_x.shape != (dx, dx) or self.sigma_x0.shape != (dx, dx):
            raise ValueError("state covariances must be dx x dx")
        if self.a0.shape != (dx,):
            raise ValueError("a0 must have length dx")

    @property
    def dx(self):
        return self.A.shape[0]

    @property
    def dy(self):
        return self.B.shape[0]


def simulate(params: LgssParams, horizon: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw (observations, latents) for steps 0..horizon inclusive."""
    dx, dy = params.dx, params.dy
    cx0 = _sqrt_psd(params.sigma_x0)
    cx = _sqrt_psd(params.sigma_x)
    cy = _sqrt_psd(params.sigma_y)
    xs = np.empty((horizon + 1, dx))
    ys = np.empty((horizon + 1, dy))
    xs[0] = params.a0 + cx0 @ rng.standard_normal(dx)
    ys[0] = params.B @ xs[0] + cy @ rng.standard_normal(dy)
    for n in range(1, horizon + 1):
        xs[n] = params.A @ xs[n - 1] + cx @ rng.standard_normal(dx)
        ys[n] = params.B @ xs[n] + cy @ rng.standard_normal(dy)
    return ys, xs


def kalman_loglik(params: LgssParams, observations: np.ndarray) -> float:
    """Exact log p(y_{0:M}) by the prediction-error decomposition."""
    ys = np.atleast_2d(np.asarray(observations, dtype=float))
    A, B = params.A, params.B
    mean = params.a0.copy()
    cov = params.sigma_x0.copy()
    total = 0.0
    for n, y in enumerate(ys):
        innov_cov = B @ cov @ B.T + params.sigma_y
        resid = y - B @ mean
        try:
            cf = cho_factor(innov_cov, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"innovation covariance not PD at step {n}") from exc
        solve = cho_solve(cf, resid)
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
        total += -0.5 * (len(y) * LOG_2PI + logdet + resid @ solve)
        gain = cov @ B.T @ cho_solve(cf, np.eye(len(y)))
        mean = mean + gain @ resid
        cov = cov - gain @ B @ cov
        mean = A @ mean
        cov = A @ cov @ A.T + params.sigma_x
    return float(total)


def two_step_posterior(lam: float, y0: float, y1: float) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian posterior over (x0_0, x0_1, x1_0, x1_1) for the 2-D AR model
    with B=(1,1), unit noises, and the stationary initial law.

    Returns (mean, covariance); requires |lam| < 1.
    """
    if abs(lam) >= 1.0:
        raise ValueError("autoregressive coefficient must satisfy |lam| < 1")
    prec = np.array([
        [2.0, 1.0, -lam, 0.0],
        [1.0, 2.0, 0.0, -lam],
        [-lam, 0.0, 2.0, 1.0],
        [0.0, -lam, 1.0, 2.0],
    ])
    cov = np.linalg.inv(prec)
    mean = cov @ np.array([y0, y0, y1, y1])
    return mean, cov


@dataclass
class LgssProposal:
    """Affine-Gaussian proposal: N(A_p x_n + B_p y_{n+1}, diag) with a
    separate affine form N(a0_p + B_p y_0, diag) at step 0. Diagonal
    scales are stored as log standard deviations."""

    A_p: np.ndarray
    B_p: np.ndarray
    log_s: np.ndarray
    a0_p: np.ndarray
    log_s0: np.ndarray

    @classmethod
    def default(cls, dx: int, dy: int, scale: float = 1.0) -> "LgssProposal":
        return cls(
            A_p=np.zeros((dx, dx)),
            B_p=np.zeros((dx, dy)),
            log_s=np.full(dx, np.log(scale)),
            a0_p=np.zeros(dx),
            log_s0=np.full(dx, np.log(scale)),
        )

    @classmethod
    def prior_matched(cls, params: LgssParams) -> "LgssProposal":
        """Proposal equal to the transition prior (requires diagonal covariances)."""
        return cls(
            A_p=params.A.copy(),
            B_p=np.zeros((params.dx, params.dy)),
            log_s=0.5 * np.log(np.diag(params.sigma_x)),
            a0_p=params.a0.copy(),
            log_s0=0.5 * np.log(np.diag(params.sigma_x0)),
        )


def _entry(m, i, j):
    # matrices of parameters may be nested lists of DiffScalars or arrays
    if isinstance(m, np.ndarray) and m.dtype != object:
        return m[i, j]
    return m[i][j]


def _vec_entry(v, i):
    if isinstance(v, np.ndarray) and v.dtype != object:
        return v[i]
    return v[i]


def _diag_normal_logpdf(resid, log_sd):
    """Sum of independent normal log-densities; resid entries are scalar lanes."""
    total = 0.0
    for r, ls in zip(resid, log_sd):
        z = r * ad.exp(-ls)
        total = total + (-0.5 * LOG_2PI) - ls - 0.5 * z * z
    return total


def lgss_model(theta, proposal, observations, *, fixed=None) -> ModelSpec:
    """Bind parameters and data into particle-filter callables.

    ``theta`` carries A (dx x dx), B (dy x dx) and log_sy (dy log standard
    deviations); entries may be floats or tape values.  ``fixed`` supplies
    the non-learned pieces as plain arrays: sigma_x_diag, sigma_x0_diag,
    a0 (defaults: unit variances, zero mean).  Covariances on the filter
    path are diagonal; full matrices live only in the exact-likelihood
    oracle.
    """
    ys = np.atleast_2d(np.asarray(observations, dtype=float))
    num_steps = ys.shape[0]
    A, B, log_sy = theta["A"], theta["B"], theta["log_sy"]
    dx = len(A)
    dy = ys.shape[1]
    fixed = fixed or {}
    sx = np.asarray(fixed.get("sigma_x_diag", np.ones(dx)), dtype=float)
    sx0 = np.asarray(fixed.get("sigma_x0_diag", np.ones(dx)), dtype=float)
    a0 = np.asarray(fixed.get("a0", np.zeros(dx)), dtype=float)
    log_sd_x = 0.5 * np.log(sx)
    log_sd_x0 = 0.5 * np.log(sx0)

    A_p, B_p, log_s = proposal["A_p"], proposal["B_p"], proposal["log_s"]
    a0_p, log_s0 = proposal["a0_p"], proposal["log_s0"]

    def prop_mean0(_x=None):
        return [_vec_entry(a0_p, i)
                + sum(_entry(B_p, i, j) * ys[0, j] for j in range(dy))
                for i in range(dx)]

    def prop_mean(x_prev, n):
        return [sum(_entry(A_p, i, j) * x_prev[j] for j in range(dx))
                + sum(_entry(B_p, i, j) * ys[n, j] for j in range(dy))
                for i in range(dx)]

    def sample_init(eps):
        mean = prop_mean0()
        return [mean[i] + ad.exp(_vec_entry(log_s0, i)) * eps[i] for i in range(dx)]

    def log_init_proposal(x0):
        mean = prop_mean0()
        return _diag_normal_logpdf([x0[i] - mean[i] for i in range(dx)],
                                   [_vec_entry(log_s0, i) for i in range(dx)])

    def log_init_target(x0):
        return _diag_normal_logpdf([x0[i] - a0[i] for i in range(dx)], log_sd_x0)

    def sample_step(x_prev, eps, n):
        mean = prop_mean(x_prev, n)
        return [mean[i] + ad.exp(_vec_entry(log_s, i)) * eps[i] for i in range(dx)]

    def log_step_proposal(x, x_prev, n):
        mean = prop_mean(x_prev, n)
        return _diag_normal_logpdf([x[i] - mean[i] for i in range(dx)],
                                   [_vec_entry(log_s, i) for i in range(dx)])

    def log_transition(x, x_prev, n):
        resid = [x[i] - sum(_entry(A, i, j) * x_prev[j] for j in range(dx))
                 for i in range(dx)]
        return _diag_normal_logpdf(resid, log_sd_x)

    def log_observation(x, n):
        resid = [ys[n, i] - sum(_entry(B, i, j) * x[j] for j in range(dx))
                 for i in range(dy)]
        return _diag_normal_logpdf(resid, [_vec_entry(log_sy, i) for i in range(dy)])

    return ModelSpec(
        num_steps=num_steps,
        state_dim=dx,
        eps_dim=dx,
        sample_init=sample_init,
        log_init_target=log_init_target,
        log_init_proposal=log_init_proposal,
        sample_step=sample_step,
        log_step_proposal=log_step_proposal,
        log_transition=log_transition,
        log_observation=log_observation,
    )


def theta_from_params(params: LgssParams) -> dict:
    """Float theta dict for a known-parameter filter run (diagonal sigma_y)."""
    return {
        "A": params.A.copy(),
        "B": params.B.copy(),
        "log_sy": 0.5 * np.log(np.diag(params.sigma_y)),
    }


def proposal_dict(p: LgssProposal) -> dict:
    return {"A_p": p.A_p, "B_p": p.B_p, "log_s": p.log_s,
            "a0_p": p.a0_p, "log_s0": p.log_s0}
