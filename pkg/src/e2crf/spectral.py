"""Unitary DFT along the time axis, half-spectrum storage and the real chart.

Conventions
-----------
Series are arrays of shape ``(..., N, M)``: time on axis -2, features on
axis -1. Every transform runs feature-wise. The DFT is the unitary one,
``U[k, tau] = N**-0.5 * exp(-2j*pi*k*tau/N)``.

A real series is fully described by its half-spectrum (frequencies
``0..N//2``). The real chart ``phi`` packs the half-spectrum into exactly
``N`` real numbers per feature: real parts of frequencies ``0..N//2`` followed
by the imaginary parts of the interior frequencies.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import DimensionError, SymmetryError, check_series

#: imaginary residual tolerated (and discarded) when going back to real time
IMAG_TOL = 1e-9


def n_tokens(n):
    """Number of non-redundant frequencies of a length-``n`` real signal."""
    return n // 2 + 1


def _n_imag(n):
    # interior frequencies carrying an imaginary part
    return n - n_tokens(n)


@dataclass(frozen=True)
class HalfSpectrum:
    """Non-redundant DFT coefficients of a real series.

    ``tokens`` has shape ``(..., N//2 + 1, M)`` and complex dtype; ``n`` is
    the length of the time-domain signal, needed to tell even from odd.
    """

    tokens: np.ndarray
    n: int

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.complex128)
        if tokens.ndim < 2 or tokens.shape[-2] != n_tokens(self.n):
            raise DimensionError(
                f"expected {n_tokens(self.n)} frequency tokens for N={self.n}, "
                f"got shape {tokens.shape}"
            )
        object.__setattr__(self, "tokens", tokens)

    @property
    def m(self):
        return self.tokens.shape[-1]

    @property
    def has_nyquist(self):
        return self.n % 2 == 0


def dft_matrix(n):
    """Explicit unitary DFT matrix (direct O(N^2) construction)."""
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


def dft_forward(x):
    """Half-spectrum of the real series ``x`` under the unitary DFT."""
    x = check_series(x)
    n = x.shape[-2]
    c = np.fft.rfft(x, axis=-2, norm="ortho")
    # exact zeros, not round-off
    c[..., 0, :] = c[..., 0, :].real
    if n % 2 == 0:
        c[..., -1, :] = c[..., -1, :].real
    return HalfSpectrum(c, n)


def full_spectrum(xs):
    """Mirror-expand a half-spectrum to all ``N`` frequencies."""
    n = xs.n
    tail = np.conj(xs.tokens[..., 1 : _n_imag(n) + 1, :])[..., ::-1, :]
    return np.concatenate([xs.tokens, tail], axis=-2)


def dft_inverse(xs, tol=IMAG_TOL):
    """Real series whose unitary DFT is the half-spectrum ``xs``.

    Raises
    ------
    SymmetryError
        If the DC (or, for even N, the Nyquist) coefficient has an imaginary
        part large enough that the inverse would not be real.
    """
    n = xs.n
    c = xs.tokens
    # DC / Nyquist imaginary parts are the only source of a complex inverse
    resid = np.abs(c[..., 0, :].imag)
    if n % 2 == 0:
        resid = resid + np.abs(c[..., -1, :].imag)
    worst = float(resid.max(initial=0.0)) / np.sqrt(n)
    if worst > tol:
        raise SymmetryError(f"imaginary residual {worst:.3e} exceeds {tol:.1e}")
    return np.fft.irfft(c, n=n, axis=-2, norm="ortho")


def phi(xs):
    """Real chart of a half-spectrum, shape ``(..., N, M)``."""
    n = xs.n
    n_im = _n_imag(n)
    return np.concatenate([xs.tokens.real, xs.tokens[..., 1 : n_im + 1, :].imag], axis=-2)


def phi_inverse(z, n=None):
    """Inverse of :func:`phi`; ``z`` has shape ``(..., N, M)``."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim < 2:
        raise DimensionError(f"phi coordinates need shape (..., N, M), got {z.shape}")
    if n is None:
        n = z.shape[-2]
    elif z.shape[-2] != n:
        raise DimensionError(f"expected {n} phi coordinates per feature, got {z.shape[-2]}")
    n_re = n_tokens(n)
    tokens = z[..., :n_re, :].astype(np.complex128)
    tokens[..., 1 : n - n_re + 1, :] += 1j * z[..., n_re:, :]
    return HalfSpectrum(tokens, n)


def tokens_from_phi(z):
    """Token matrix ``(..., N//2 + 1, 2M)`` straight from phi coordinates.

    Token ``k`` is ``[Re x_k (M values), Im x_k (M values)]``.
    """
    n, m = z.shape[-2:]
    n_re = n_tokens(n)
    out = np.zeros(z.shape[:-2] + (n_re, 2 * m))
    out[..., :m] = z[..., :n_re, :]
    out[..., 1 : n - n_re + 1, m:] = z[..., n_re:, :]
    return out


def phi_from_tokens(tokens, n):
    """Inverse of :func:`tokens_from_phi`; DC/Nyquist imaginary slots are dropped."""
    m = tokens.shape[-1] // 2
    n_re = n_tokens(n)
    if tokens.shape[-2] != n_re:
        raise DimensionError(f"expected {n_re} tokens for N={n}, got {tokens.shape[-2]}")
    return np.concatenate([tokens[..., :m], tokens[..., 1 : n - n_re + 1, m:]], axis=-2)


def tokenize(xs):
    """Token matrix of a :class:`HalfSpectrum`."""
    return np.concatenate([xs.tokens.real, xs.tokens.imag], axis=-1)


def lambda_diag(n):
    """Half-spectrum scaling: 1 at DC (and Nyquist for even N), 1/sqrt(2) elsewhere."""
    if n < 2:
        raise DimensionError(f"N must be >= 2, got {n}")
    lam = np.full(n_tokens(n), 1.0 / np.sqrt(2.0))
    lam[0] = 1.0
    if n % 2 == 0:
        lam[-1] = 1.0
    return lam


def lambda_phi(n):
    """The same scaling laid out on the ``N`` phi coordinates of one feature."""
    lam = lambda_diag(n)
    return np.concatenate([lam, lam[1 : _n_imag(n) + 1]])


def spectral_energy(xs):
    """Per-token energy ``|x_k|^2`` summed over features, shape ``(..., N//2 + 1)``."""
    c = xs.tokens
    return (c.real**2 + c.imag**2).sum(axis=-1)


def low_frequency_energy_fraction(xs, k):
    """Share of half-spectrum energy held by tokens ``0..k``.

    An all-zero spectrum returns 1.0.
    """
    k = int(k)
    if not 0 <= k <= xs.n // 2:
        raise ValueError(f"k must lie in [0, {xs.n // 2}], got {k}")
    e = spectral_energy(xs)
    total = e.sum(axis=-1)
    low = e[..., : k + 1].sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(total > 0, low / np.where(total > 0, total, 1.0), 1.0)
    return float(frac) if np.ndim(frac) == 0 else frac
