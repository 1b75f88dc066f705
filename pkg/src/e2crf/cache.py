"""Event-driven KV/CRF cache with error feedback.

Per sampling step the policy looks at the two most recent final-layer
residual features (CRFs) and decides which frequency tokens get recomputed:

* tokens ``0..K`` always,
* tokens whose CRF drift exceeds an energy-weighted threshold,
* a few random probes from the remaining tokens, when probing is due.

Probes measure how far the cached CRF/output has drifted from a fresh
computation; the cache is pulled toward the fresh value by a step ``alpha``.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from ._validation import CacheError

LOW_FREQ, HIGH_CHANGE, PROBE = 0, 1, 2
REASONS = ("low_freq", "high_change", "probe")
QUERY_MODES = ("row_skip", "all_queries")


@dataclass(frozen=True)
class E2CRFConfig:
    """Caching hyperparameters.

    ``k_low=None`` resolves to ``N // 10`` once the series length is known
    (see :meth:`resolve`). ``energy_weighting=False`` uses ``tau0`` for every
    token; ``feedback=False`` keeps probes but never corrects the cache.
    """

    k_low: int = None
    tau0: float = 0.01
    energy_eps: float = 1e-6
    eta: float = 1e-6
    refresh_interval: int = 50
    tau_safe: float = 0.1
    tau_warn: float = 0.5
    probe_fraction: float = 0.05
    delta_steps: int = 1
    alpha_cap: float = 0.1
    energy_weighting: bool = True
    feedback: bool = True

    def __post_init__(self):
        if self.k_low is not None and self.k_low < 0:
            raise ValueError("k_low must be >= 0")
        if self.tau0 <= 0:
            raise ValueError("tau0 must be positive")
        if self.refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1")
        if not 0 <= self.tau_safe <= self.tau_warn:
            raise ValueError("need 0 <= tau_safe <= tau_warn")
        if not 0.0 <= self.probe_fraction <= 1.0:
            raise ValueError("probe_fraction must lie in [0, 1]")
        if self.delta_steps != 1:
            raise ValueError("only delta_steps = 1 is supported")
        if not 0.0 <= self.alpha_cap <= 1.0:
            raise ValueError("alpha_cap must lie in [0, 1]")
        if self.energy_eps <= 0 or self.eta <= 0:
            raise ValueError("energy_eps and eta must be positive")

    def resolve(self, n):
        """Copy with ``k_low`` filled in and checked against series length ``n``."""
        k = n // 10 if self.k_low is None else self.k_low
        if k > n // 2:
            raise ValueError(f"k_low={k} exceeds N//2={n // 2}")
        return replace(self, k_low=k)

    def n_probes(self, n_tokens):
        return max(1, math.ceil(self.probe_fraction * n_tokens - 1e-12))


class RecomputeSet:
    """Sorted token indices with a reason tag per index."""

    __slots__ = ("indices", "reasons", "n_tokens")

    def __init__(self, indices, reasons, n_tokens):
        indices = np.asarray(indices, dtype=np.intp)
        reasons = np.asarray(reasons, dtype=np.int8)
        if indices.shape != reasons.shape or indices.ndim != 1:
            raise ValueError("indices and reasons must be 1-D and aligned")
        if indices.size:
            if np.any(np.diff(indices) <= 0):
                raise ValueError("indices must be sorted and unique")
            if indices[0] < 0 or indices[-1] >= n_tokens:
                raise ValueError("token index out of range")
        self.indices = indices
        self.reasons = reasons
        self.n_tokens = int(n_tokens)

    @classmethod
    def full(cls, n_tokens, k_low=None):
        """Every token; tokens above ``k_low`` are tagged ``high_change``."""
        idx = np.arange(n_tokens)
        k = n_tokens - 1 if k_low is None else k_low
        return cls(idx, np.where(idx <= k, LOW_FREQ, HIGH_CHANGE), n_tokens)

    @classmethod
    def low(cls, k_low, n_tokens):
        idx = np.arange(min(k_low, n_tokens - 1) + 1)
        return cls(idx, np.zeros(idx.size), n_tokens)

    def __len__(self):
        return self.indices.size

    def __contains__(self, k):
        return bool(np.any(self.indices == k))

    def probe_mask(self):
        mask = np.zeros(self.n_tokens, dtype=bool)
        mask[self.indices[self.reasons == PROBE]] = True
        return mask

    def counts(self):
        c = np.bincount(self.reasons, minlength=3)
        return dict(zip(REASONS, (int(v) for v in c)))

    def __repr__(self):
        return f"RecomputeSet({self.indices.tolist()}, n_tokens={self.n_tokens})"


class CacheState:
    """Per-chain cache: K/V and hidden rows per layer, CRF history, ages, hit log.

    ``crf`` holds the latest CRF of every token (fresh or cached) and
    ``crf_prev`` the one before it; slots never computed are flagged invalid.
    ``out`` caches the raw (unscaled) network output per token.
    """

    def __init__(self, n_layers, n_tokens, d_model, token_dim, query_mode="row_skip"):
        if query_mode not in QUERY_MODES:
            raise ValueError(f"query_mode must be one of {QUERY_MODES}")
        self.n_layers, self.n_tokens = n_layers, n_tokens
        self.d_model, self.token_dim = d_model, token_dim
        self.query_mode = query_mode
        shape = (n_layers, n_tokens, d_model)
        self.K = np.zeros(shape)
        self.V = np.zeros(shape)
        self.H = np.zeros(shape)
        self.kv_valid = np.zeros(n_tokens, dtype=bool)
        self.crf = np.zeros((n_tokens, d_model))
        self.crf_valid = np.zeros(n_tokens, dtype=bool)
        self.crf_prev = np.zeros((n_tokens, d_model))
        self.crf_prev_valid = np.zeros(n_tokens, dtype=bool)
        self.out = np.zeros((n_tokens, token_dim))
        self.age = np.zeros(n_tokens, dtype=np.int64)
        self.step = 0
        self.recomputed = []

    @classmethod
    def for_config(cls, config, query_mode="row_skip"):
        return cls(config.n_layers, config.n_tokens, config.d_model, config.token_dim,
                   query_mode=query_mode)

    def check_compatible(self, config):
        want = (config.n_layers, config.n_tokens, config.d_model, config.token_dim)
        have = (self.n_layers, self.n_tokens, self.d_model, self.token_dim)
        if want != have:
            raise CacheError(f"cache shape {have} does not match network {want}")

    @property
    def warm(self):
        """Both CRF snapshots are valid for every token."""
        return bool(self.crf_valid.all() and self.crf_prev_valid.all())

    def roll(self):
        self.crf_prev[:] = self.crf
        self.crf_prev_valid[:] = self.crf_valid

    def advance(self, recomputed):
        self.age += 1
        self.age[recomputed] = 0
        self.step += 1
        self.recomputed.append(len(recomputed))


def event_intensity(z_now, z_prev, eta=1e-6):
    """Relative squared change of the whole CRF: ``|z - z'|^2 / (|z'|^2 + eta)``."""
    diff = z_now - z_prev
    return float(np.vdot(diff, diff).real / (np.vdot(z_prev, z_prev).real + eta))


def token_drift(z_now, z_prev, valid=None):
    """Per-token L2 drift in absolute units; invalid slots give ``+inf``."""
    diff = z_now - z_prev
    d = np.sqrt((diff * diff).sum(-1))
    if valid is not None:
        d = np.where(valid, d, np.inf)
    return d


def energy_threshold(tau0, eps, energy):
    return tau0 / (eps + np.asarray(energy, dtype=np.float64))


def token_energy(tokens):
    """``|x_k|^2`` summed over features, from a token matrix (n_tokens, 2M)."""
    return (tokens * tokens).sum(-1)


def probe_due(cfg, step, r):
    """Whether probes run at ``step`` (1-based) given event intensity ``r``.

    Scheduled every ``R`` steps; every ``ceil(R/2)`` steps while ``r`` sits
    between ``tau_safe`` and ``tau_warn``; every step above ``tau_warn``.
    """
    R = cfg.refresh_interval
    if r > cfg.tau_warn or step % R == 0:
        return True
    return cfg.tau_safe <= r and step % math.ceil(R / 2) == 0


def select_recompute_set(cfg, drifts, energies, step, rng, r=0.0):
    """Build the recompute set for one step.

    ``cfg`` must be resolved (integer ``k_low``). Drifts of ``+inf`` mark
    cold slots and always trigger.
    """
    drifts = np.asarray(drifts, dtype=np.float64)
    n_tok = drifts.size
    if np.shape(energies) != (n_tok,):
        raise ValueError("drifts and energies must have one entry per token")
    k = min(cfg.k_low, n_tok - 1)
    reasons = np.full(n_tok, -1, dtype=np.int8)
    reasons[: k + 1] = LOW_FREQ
    if cfg.energy_weighting:
        tau = energy_threshold(cfg.tau0, cfg.energy_eps, energies)
    else:
        tau = np.full(n_tok, cfg.tau0)
    hot = drifts > tau
    hot[: k + 1] = False
    reasons[hot] = HIGH_CHANGE
    if probe_due(cfg, step, r):
        pool = np.flatnonzero(reasons < 0)
        if pool.size:
            n_p = min(cfg.n_probes(n_tok), pool.size)
            reasons[rng.choice(pool, size=n_p, replace=False)] = PROBE
    idx = np.flatnonzero(reasons >= 0)
    return RecomputeSet(idx, reasons[idx], n_tok)


def feedback_alpha(r, alpha_cap=0.1):
    if r < 0:
        raise ValueError("event intensity must be non-negative")
    return min(alpha_cap, r / 2.0)


def apply_error_feedback(cache, result, alpha):
    """Blend probed tokens' cached CRF and output toward their fresh values.

    ``result`` is the :class:`~e2crf.scorenet.ForwardResult` of the step,
    carrying fresh probe values that were not yet written to the cache.
    Returns a report with error norms before and after the correction.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    idx = result.probe_index
    if idx is None or idx.size == 0:
        return {"n_probes": 0, "alpha": alpha, "crf_error": 0.0, "crf_error_after": 0.0,
                "out_error": 0.0, "out_error_after": 0.0}
    eps = result.probe_crf - cache.crf[idx]
    eps_out = result.probe_raw - cache.out[idx]
    if alpha == 1.0:
        cache.crf[idx] = result.probe_crf
        cache.out[idx] = result.probe_raw
    elif alpha > 0.0:
        cache.crf[idx] += alpha * eps
        cache.out[idx] += alpha * eps_out
    after = result.probe_crf - cache.crf[idx]
    after_out = result.probe_raw - cache.out[idx]
    return {
        "n_probes": int(idx.size),
        "alpha": alpha,
        "crf_error": float(np.linalg.norm(eps)),
        "crf_error_after": float(np.linalg.norm(after)),
        "out_error": float(np.linalg.norm(eps_out)),
        "out_error_after": float(np.linalg.norm(after_out)),
    }


def hit_rate(cache, window=None):
    """Mean fraction of tokens served from cache over the last ``window`` steps."""
    hist = cache.recomputed if window is None else cache.recomputed[-window:]
    if not hist:
        raise ValueError("no steps recorded")
    return 1.0 - float(np.mean(hist)) / cache.n_tokens
