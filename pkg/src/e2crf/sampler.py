"""Reverse-SDE sampling drivers: full recomputation, E2-CRF and ablation policies.

Every policy shares the same Euler-Maruyama update and the same noise
stream; they differ only in how the score is obtained. Chain ``j`` of a run
with seed ``s`` draws diffusion noise from ``SeedSequence(s, spawn_key=(j, 0))``
and probe choices from ``SeedSequence(s, spawn_key=(j, 1))``, so two policies
run with the same seed see identical noise however many probes they draw.
"""

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import cache as C
from ._validation import NumericalError
from .scorenet import apply_head, forward_cached, forward_full
from .sde import mirrored_increment, prior_sample, reverse_step
from .spectral import dft_inverse, phi_from_tokens, phi_inverse, tokens_from_phi

POLICIES = ("baseline", "e2crf", "naive", "fixed_schedule", "e2crf_no_feedback",
            "e2crf_uniform_tau")
ADAPTIVE = ("e2crf", "e2crf_no_feedback", "e2crf_uniform_tau")

TRACE_COLUMNS = ("sample", "step", "t", "r", "n_recompute", "n_low_freq", "n_high_change",
                 "n_probe", "hit_rate", "probe_error_norm", "wall_ns_full_equivalent",
                 "wall_ns_actual")
TRACE_DTYPE = np.dtype([
    ("sample", np.int64), ("step", np.int64), ("t", np.float64), ("r", np.float64),
    ("n_recompute", np.int64), ("n_low_freq", np.int64), ("n_high_change", np.int64),
    ("n_probe", np.int64), ("hit_rate", np.float64), ("probe_error_norm", np.float64),
    ("wall_ns_full_equivalent", np.int64), ("wall_ns_actual", np.int64),
])


@dataclass(frozen=True)
class SamplerConfig:
    """Sampling run settings. ``fixed_period`` only matters for ``fixed_schedule``."""

    n_steps: int = 1000
    n_samples: int = 1
    policy: str = "baseline"
    seed: int = 0
    cache: C.E2CRFConfig = field(default_factory=C.E2CRFConfig)
    fixed_period: int = 2
    query_mode: str = "row_skip"
    check_symmetry: bool = False
    n_jobs: int = 1
    calibrate: bool = True

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; choose from {POLICIES}")
        if self.fixed_period < 1:
            raise ValueError("fixed_period must be >= 1")
        if self.query_mode not in C.QUERY_MODES:
            raise ValueError(f"query_mode must be one of {C.QUERY_MODES}")

    def policy_cache_config(self, n):
        """Resolved cache config with the ablation switches of this policy applied."""
        cc = self.cache.resolve(n)
        if self.policy == "e2crf_no_feedback":
            cc = replace(cc, feedback=False)
        elif self.policy == "e2crf_uniform_tau":
            cc = replace(cc, energy_weighting=False)
        return cc


@dataclass
class SamplerTrace:
    """Per-step records of every chain plus per-chain wall-clock totals."""

    policy: str
    n_tokens: int
    records: np.ndarray
    wall_ns_total: np.ndarray

    @property
    def n_steps(self):
        return int(self.records["step"].max(initial=0))

    def to_csv(self, path):
        rec = self.records
        with open(path, "w") as fh:
            fh.write(",".join(TRACE_COLUMNS) + "\n")
            for row in rec:
                vals = []
                for name in TRACE_COLUMNS:
                    v = row[name]
                    vals.append(repr(float(v)) if rec.dtype[name].kind == "f" else str(int(v)))
                fh.write(",".join(vals) + "\n")

    def recompute_fraction(self):
        return float(self.records["n_recompute"].mean() / self.n_tokens)

    def hit_rate_curve(self, n_buckets=10, skip=0):
        """Mean hit rate per step bucket (averaged over chains), ignoring the first ``skip`` steps."""
        steps = self.records["step"]
        keep = steps > skip
        s = steps[keep] - skip - 1
        span = max(1, self.n_steps - skip)
        bucket = np.minimum((s * n_buckets) // span, n_buckets - 1)
        hr = self.records["hit_rate"][keep]
        return np.array([hr[bucket == b].mean() if np.any(bucket == b) else np.nan
                         for b in range(n_buckets)])

    def work_breakdown(self, n_layers):
        """Fractions of K/V, query/attention and MLP row work skipped relative to full recompute."""
        n = self.records["n_recompute"].astype(np.float64)
        skipped = 1.0 - n.mean() / self.n_tokens
        return {"kv_rows_skipped": skipped, "attention_rows_skipped": skipped,
                "mlp_rows_skipped": skipped, "n_layers": n_layers}


@dataclass
class SampleResult:
    phi: np.ndarray
    time: np.ndarray
    trace: SamplerTrace


def chain_streams(seed, j):
    """Independent (noise, probe) generators for chain ``j``."""
    return (np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(j, 0))),
            np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(j, 1))))


def calibrate_full_forward(params, repeats=15, t=0.5):
    """Median wall time (ns) of one full forward pass on random tokens."""
    cfg = params.config
    tok = np.random.default_rng(0).standard_normal((cfg.n_tokens, cfg.token_dim))
    forward_full(params, tok, t)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        forward_full(params, tok, t)
        times.append(time.perf_counter_ns() - t0)
    return int(np.median(times))


def _check_real(x, n, step):
    try:
        dft_inverse(phi_inverse(x, n))
    except Exception as exc:  # noqa: BLE001 - reported with the step index
        raise NumericalError(f"symmetry check failed at step {step}: {exc}", step=step) from exc


def run_chain(params, sched, cfg, j, n=None, m=None, score_fn=None, full_ns=0, observer=None):
    """Integrate one chain from the prior at ``t = 1`` down to ``t = 0``.

    ``score_fn(x_phi, t)`` replaces the network (baseline policy only).
    ``observer(step, t, x, score, info)`` is called after the score of each step
    is known, before the state update. Returns ``(x_phi, records, wall_ns)``.
    """
    if score_fn is None:
        ncfg = params.config
        n, m = ncfg.n, ncfg.m
    elif cfg.policy != "baseline":
        raise ValueError("an analytic score only works with the baseline policy")
    policy = cfg.policy
    n_steps = cfg.n_steps
    dt = 1.0 / n_steps
    noise_rng, probe_rng = chain_streams(cfg.seed, j)
    n_tok = n // 2 + 1
    cached = policy != "baseline"
    if cached:
        cc = cfg.policy_cache_config(n)
        cache = C.CacheState.for_config(ncfg, query_mode=cfg.query_mode)
        low = C.RecomputeSet.low(cc.k_low, n_tok)
    rec = np.zeros(n_steps, dtype=TRACE_DTYPE)
    rec["sample"] = j
    rec["wall_ns_full_equivalent"] = full_ns

    x = prior_sample(n, m, noise_rng)
    wall0 = time.perf_counter_ns()
    for i in range(1, n_steps + 1):
        t = 1.0 - (i - 1) / n_steps
        t0 = time.perf_counter_ns()
        r = math.nan
        perr = 0.0
        info = None
        if score_fn is not None:
            score = score_fn(x, t)
            counts = (n_tok, 0, 0, 0)
        elif not cached:
            res = forward_full(params, tokens_from_phi(x), t)
            score = phi_from_tokens(res.score_tokens, n)
            counts = (n_tok, 0, 0, 0)
            info = {"result": res}
        else:
            tok = tokens_from_phi(x)
            warm = cache.warm
            if warm:
                r = C.event_intensity(cache.crf, cache.crf_prev, cc.eta)
            elif policy in ADAPTIVE:
                r = math.inf
            if policy in ADAPTIVE:
                if warm:
                    drift = C.token_drift(cache.crf, cache.crf_prev)
                else:
                    drift = C.token_drift(cache.crf, cache.crf_prev,
                                          valid=cache.crf_valid & cache.crf_prev_valid)
                S = C.select_recompute_set(cc, drift, C.token_energy(tok), i, probe_rng, r)
            elif policy == "naive":
                S = low if cache.crf_valid.all() else C.RecomputeSet.full(n_tok, cc.k_low)
            else:  # fixed_schedule
                full_step = (i - 1) % cfg.fixed_period == 0
                S = C.RecomputeSet.full(n_tok, cc.k_low) if full_step else low
            res, cache, _ = forward_cached(params, tok, t, cache, S)
            if res.probe_index.size:
                alpha = C.feedback_alpha(r, cc.alpha_cap) if cc.feedback else 0.0
                report = C.apply_error_feedback(cache, res, alpha)
                perr = report["out_error"]
                score = phi_from_tokens(apply_head(ncfg, tok, cache.out, t), n)
            else:
                score = phi_from_tokens(res.score_tokens, n)
            c = S.counts()
            counts = (len(S), c["low_freq"], c["high_change"], c["probe"])
            info = {"result": res, "recompute": S, "cache": cache}
        rec["wall_ns_actual"][i - 1] = time.perf_counter_ns() - t0
        rec["step"][i - 1] = i
        rec["t"][i - 1] = t
        rec["r"][i - 1] = r
        rec["n_recompute"][i - 1], rec["n_low_freq"][i - 1] = counts[0], counts[1]
        rec["n_high_change"][i - 1], rec["n_probe"][i - 1] = counts[2], counts[3]
        rec["hit_rate"][i - 1] = 1.0 - counts[0] / n_tok
        rec["probe_error_norm"][i - 1] = perr
        if observer is not None:
            observer(i, t, x, score, info)
        try:
            noise = mirrored_increment(n, m, dt, noise_rng)
            x = reverse_step(x, t, dt, score, sched, noise=noise)
        except NumericalError as exc:
            raise NumericalError(f"{exc} (step {i})", step=i) from exc
        if not np.isfinite(x).all():
            raise NumericalError(f"non-finite state after step {i}", step=i)
        if cfg.check_symmetry:
            _check_real(x, n, i)
    wall = time.perf_counter_ns() - wall0
    return x, rec, wall


def _chain_job(args):
    params, sched, cfg, j, full_ns = args
    return run_chain(params, sched, cfg, j, full_ns=full_ns)


def sample(params, sched, cfg, score_fn=None, n=None, m=None, observer=None):
    """Run ``cfg.n_samples`` chains and collect samples in both domains plus the trace.

    ``sched.n_steps`` is ignored in favour of ``cfg.n_steps``.
    """
    if score_fn is None:
        n, m = params.config.n, params.config.m
    elif n is None or m is None:
        raise ValueError("n and m are required with an analytic score")
    full_ns = 0
    if score_fn is None and cfg.calibrate and cfg.n_samples:
        full_ns = calibrate_full_forward(params)
    jobs = range(cfg.n_samples)
    if cfg.n_jobs > 1 and score_fn is None and observer is None and cfg.n_samples > 1:
        with ProcessPoolExecutor(max_workers=cfg.n_jobs) as ex:
            outs = list(ex.map(_chain_job, [(params, sched, cfg, j, full_ns) for j in jobs]))
    else:
        outs = [run_chain(params, sched, cfg, j, n=n, m=m, score_fn=score_fn, full_ns=full_ns,
                          observer=observer) for j in jobs]
    if outs:
        phi = np.stack([o[0] for o in outs])
        records = np.concatenate([o[1] for o in outs])
    else:
        phi = np.zeros((0, n, m))
        records = np.zeros(0, dtype=TRACE_DTYPE)
    wall = np.array([o[2] for o in outs], dtype=np.int64)
    time_dom = dft_inverse(phi_inverse(phi, n)) if len(phi) else np.zeros((0, n, m))
    trace = SamplerTrace(cfg.policy, n // 2 + 1, records, wall)
    return SampleResult(phi, time_dom, trace)


def sample_baseline(params, sched, cfg, **kw):
    return sample(params, sched, replace(cfg, policy="baseline"), **kw)


def sample_e2crf(params, sched, cfg, **kw):
    return sample(params, sched, replace(cfg, policy="e2crf"), **kw)


def sample_ablation(params, sched, cfg, **kw):
    if cfg.policy in ("baseline", "e2crf"):
        raise ValueError(f"{cfg.policy!r} is not an ablation policy")
    return sample(params, sched, cfg, **kw)
