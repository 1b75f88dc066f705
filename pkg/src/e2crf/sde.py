"""VP-SDE in phi coordinates: schedule, perturbation kernel, mirrored noise, reverse step.

All state lives in phi coordinates, real arrays of shape ``(..., N, M)``.
White noise drawn in the time domain and mapped through the DFT and the
chart gives increments with diagonal covariance ``Lambda**2 * dt``.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import NumericalError, check_unit_time
from .spectral import lambda_phi, n_tokens


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear VP schedule ``beta(t) = beta_min + t (beta_max - beta_min)`` on ``[0, 1]``."""

    beta_min: float = 0.1
    beta_max: float = 20.0
    n_steps: int = 1000

    def __post_init__(self):
        if not 0 < self.beta_min < self.beta_max:
            raise ValueError("need 0 < beta_min < beta_max")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    def beta(self, t):
        t = check_unit_time(t)
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def beta_integral(self, t):
        """``B(t) = int_0^t beta(s) ds``."""
        t = check_unit_time(t)
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t

    def mean_coef(self, t):
        """Perturbation kernel mean factor ``exp(-B(t)/2)``."""
        return np.exp(-0.5 * self.beta_integral(t))

    def sigma2(self, t):
        """Perturbation kernel variance factor ``1 - exp(-B(t))`` (times Lambda**2)."""
        return -np.expm1(-self.beta_integral(t))

    def sigma(self, t):
        return np.sqrt(self.sigma2(t))

    def time_grid(self):
        """Times at which the reverse sampler evaluates the score: 1, 1 - 1/n, ..., 1/n."""
        return 1.0 - np.arange(self.n_steps) / self.n_steps


def white_to_phi(w):
    """Map time-domain arrays ``(..., N, M)`` to phi coordinates (unitary DFT + chart)."""
    n = w.shape[-2]
    c = np.fft.rfft(w, axis=-2, norm="ortho")
    n_re = n_tokens(n)
    return np.concatenate([c.real, c[..., 1 : n - n_re + 1, :].imag], axis=-2)


def mirrored_increment(n, m, dt, rng, size=()):
    """Increment of mirrored Brownian motion over ``dt`` in phi coordinates.

    Real white noise ``N(0, dt I)`` is drawn in the time domain and mapped
    through the DFT, so conjugate symmetry holds by construction and the
    phi covariance is ``Lambda**2 dt``. ``rng=None`` returns zeros.
    """
    if dt < 0:
        raise ValueError("dt must be non-negative")
    shape = tuple(np.atleast_1d(size)) if size != () else ()
    if rng is None or dt == 0:
        return np.zeros(shape + (n, m))
    w = rng.standard_normal(shape + (n, m))
    return white_to_phi(w) * np.sqrt(dt)


def _lam2(n):
    return (lambda_phi(n) ** 2)[:, None]


def perturb(x0_phi, t, sched, noise_phi):
    """Deterministic part of :func:`forward_perturb` given unit mirrored noise.

    ``noise_phi`` must have covariance ``Lambda**2`` (e.g. ``white_to_phi`` of
    standard normal draws). Returns ``(x_t, target)``.
    """
    x0_phi = np.asarray(x0_phi, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("perturbation kernel is degenerate at t = 0")
    bint = sched.beta_min * t + 0.5 * (sched.beta_max - sched.beta_min) * t * t
    mean = np.exp(-0.5 * bint)
    sig2 = -np.expm1(-bint)
    # broadcast per-sample t over (N, M)
    mean = mean.reshape(mean.shape + (1, 1)) if mean.ndim else mean
    sig2 = sig2.reshape(sig2.shape + (1, 1)) if sig2.ndim else sig2
    xt = mean * x0_phi + np.sqrt(sig2) * noise_phi
    lam2 = _lam2(x0_phi.shape[-2])
    target = -(xt - mean * x0_phi) / (sig2 * lam2)
    return xt, target


def forward_perturb(x0_phi, t, sched, rng):
    """Sample the VP kernel in phi coordinates and return ``(x_t, dsm_target)``.

    The target is the conditional score ``-(x_t - mean) / (sigma^2 lambda_c^2)``.
    """
    x0_phi = np.asarray(x0_phi, dtype=np.float64)
    noise = white_to_phi(rng.standard_normal(x0_phi.shape))
    return perturb(x0_phi, t, sched, noise)


def reverse_step(x, t, dt, score, sched, rng=None, noise=None):
    """One Euler-Maruyama step of the reverse SDE from ``t`` to ``t - dt``.

    ``x + (beta/2 x + beta Lambda^2 score) dt + sqrt(beta) dW`` where ``dW`` is a
    mirrored increment. Pass ``noise`` (an increment already scaled by
    ``sqrt(dt)``) to reuse draws; otherwise it is drawn from ``rng``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t - dt < -1e-12:
        raise ValueError("step would cross t = 0")
    if not np.all(np.isfinite(score)):
        raise NumericalError(f"non-finite score at t={t:.6f}")
    n, m = x.shape[-2:]
    b = sched.beta(t)
    if noise is None:
        noise = mirrored_increment(n, m, dt, rng, size=x.shape[:-2])
    return x + (0.5 * b * x + b * _lam2(n) * score) * dt + np.sqrt(b) * noise


def prior_sample(n, m, rng, size=()):
    """Draw from the stationary prior ``N(0, Lambda^2)`` at t = 1."""
    return mirrored_increment(n, m, 1.0, rng, size=size)


def analytic_dirac_score(x, t, x0_phi, sched):
    """Exact score of ``p_t`` when the data distribution is a point mass at ``x0``."""
    lam2 = _lam2(x.shape[-2])
    return -(x - sched.mean_coef(t) * x0_phi) / (sched.sigma2(t) * lam2)
