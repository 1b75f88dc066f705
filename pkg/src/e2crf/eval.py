"""Sample-quality metrics and the wall-clock benchmark harness."""

import json
import math
import platform
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ._validation import DimensionError, check_random_state
from .spectral import dft_forward, phi, spectral_energy

REPORT_FORMAT = "e2crf-eval-report"


def wasserstein_1d(a, b, p=2):
    """Order-``p`` Wasserstein distance between two equal-size 1-D samples (sorted coupling)."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    if a.size != b.size:
        raise ValueError("samples must have equal size; subsample the larger one first")
    return float(np.mean(np.abs(a - b) ** p) ** (1.0 / p))


def _sorted_w(pa, pb, p):
    # pa, pb: (n_proj, n) projections
    d = np.abs(np.sort(pa, axis=1) - np.sort(pb, axis=1))
    if p == 2:
        return np.sqrt(np.mean(d * d, axis=1))
    return np.mean(d**p, axis=1) ** (1.0 / p)


def _as_matrix(A, name):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    A = A.reshape(A.shape[0], -1)
    if A.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if A.shape[1] == 0:
        raise DimensionError(f"{name} has dimension 0")
    return A


def match_sizes(A, B, rng):
    """Uniformly subsample the larger set (without replacement) to the smaller size."""
    if len(A) > len(B):
        A = A[np.sort(rng.choice(len(A), size=len(B), replace=False))]
    elif len(B) > len(A):
        B = B[np.sort(rng.choice(len(B), size=len(A), replace=False))]
    return A, B


def random_directions(d, n_proj, rng):
    """``n_proj`` uniform unit vectors in R^d (normalised Gaussian draws)."""
    u = rng.standard_normal((n_proj, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def sliced_wasserstein(A, B, n_proj=1000, p=2, random_state=None, directions=None,
                       return_values=False):
    """Monte Carlo sliced Wasserstein distance between two sample sets.

    Samples are flattened to vectors. Returns ``(estimate, stderr)`` where
    the estimate is the mean of the per-direction 1-D distances and
    ``stderr`` their standard error.
    """
    rng = check_random_state(random_state)
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    if A.shape[1] != B.shape[1]:
        raise DimensionError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    A, B = match_sizes(A, B, rng)
    if directions is None:
        directions = random_directions(A.shape[1], n_proj, rng)
    vals = _sorted_w(directions @ A.T, directions @ B.T, p)
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    if return_values:
        return est, se, vals
    return est, se


def marginal_wasserstein(A, B, j, p=2, random_state=None):
    """Wasserstein distance of coordinate ``j`` of the flattened samples."""
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    if not 0 <= j < A.shape[1] or A.shape[1] != B.shape[1]:
        raise IndexError(f"coordinate {j} out of range for dimension {A.shape[1]}")
    A, B = match_sizes(A, B, check_random_state(random_state))
    return wasserstein_1d(A[:, j], B[:, j], p)


def spectral_density_compare(train, gen):
    """Mean per-token energy of two sets of series and the L2 gap between the curves."""
    train = np.asarray(train, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    if train.shape[1:] != gen.shape[1:]:
        raise DimensionError(f"shape mismatch: {train.shape[1:]} vs {gen.shape[1:]}")
    e_train = spectral_energy(dft_forward(train)).mean(axis=0)
    e_gen = spectral_energy(dft_forward(gen)).mean(axis=0)
    return {"train": e_train, "generated": e_gen,
            "l2_gap": float(np.linalg.norm(e_train - e_gen))}


def format_pm(mean, stderr, digits=3):
    """``mean ± 2 stderr`` as text."""
    return f"{mean:.{digits}f} ± {2 * stderr:.{digits}f}"


@dataclass
class EvalReport:
    """Distances between a reference set and a generated set, in both domains."""

    sw_time: float
    sw_time_stderr: float
    sw_freq: float
    sw_freq_stderr: float
    marginal_w: list
    spectral_l2: float
    speedup: float = None
    hit_rate_curve: list = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["format"] = REPORT_FORMAT
        d["version"] = 1
        d["sw_time_text"] = format_pm(self.sw_time, self.sw_time_stderr)
        d["sw_freq_text"] = format_pm(self.sw_freq, self.sw_freq_stderr)
        return d

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not JSON serialisable: {type(v)}")


def evaluate(reference, generated, n_proj=1000, random_state=0):
    """Sliced Wasserstein in time and phi coordinates plus marginals and spectral gap.

    Both sets have shape (n, N, M). One eval generator drives subsampling and
    projection directions, so two generated sets evaluated with the same
    ``random_state`` against the same reference are compared on identical
    directions and the identical reference subset.
    """
    reference = np.asarray(reference, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    if reference.shape[1:] != generated.shape[1:]:
        raise DimensionError(f"shape mismatch: {reference.shape[1:]} vs {generated.shape[1:]}")
    rng = check_random_state(random_state)
    ref, gen = match_sizes(reference, generated, rng)
    d = int(np.prod(ref.shape[1:]))
    dirs = random_directions(d, n_proj, rng)
    sw_t, se_t = sliced_wasserstein(ref, gen, directions=dirs)
    sw_f, se_f = sliced_wasserstein(phi(dft_forward(ref)), phi(dft_forward(gen)), directions=dirs)
    rf, gf = ref.reshape(len(ref), -1), gen.reshape(len(gen), -1)
    marg = [wasserstein_1d(rf[:, j], gf[:, j]) for j in range(d)]
    spec = spectral_density_compare(ref, gen)
    return EvalReport(sw_t, se_t, sw_f, se_f, marg, spec["l2_gap"],
                      metadata={"n_reference": int(len(reference)),
                                "n_generated": int(len(generated)),
                                "n_compared": int(len(ref)), "n_proj": int(n_proj)})


# --------------------------------------------------------------------------
# benchmark


TABLE_POLICIES = ("baseline", "e2crf", "fixed_schedule", "naive", "e2crf_no_feedback")


def benchmark(policies, params, sched, cfg, reference=None, n_proj=1000, eval_seed=0,
              timing_chains=None, sweep=None):
    """Run paired chains under each policy and report speedup, quality and cache work.

    ``cfg`` is a :class:`~e2crf.sampler.SamplerConfig` (its policy is
    overridden). Chains are interleaved across policies so slow drifts of the
    machine affect every policy alike; the speedup is the ratio of median
    per-chain wall time, baseline over policy. ``sweep`` is an optional list
    of ``(k_low, refresh_interval)`` pairs run with the ``e2crf`` policy.
    Returns ``(rows, results)``.
    """
    from .sampler import SampleResult, SamplerTrace, calibrate_full_forward, run_chain
    from .spectral import dft_inverse, phi_inverse

    policies = list(policies)
    if "baseline" not in policies:
        policies.insert(0, "baseline")
    if len(policies) < 2 and not sweep:
        raise ValueError("need baseline plus at least one cached policy")
    variants = [(p, replace(cfg, policy=p)) for p in policies]
    for k, R in sweep or ():
        variants.append((f"e2crf[K={k},R={R}]",
                         replace(cfg, policy="e2crf",
                                 cache=replace(cfg.cache, k_low=k, refresh_interval=R))))
    n, m = params.config.n, params.config.m
    full_ns = calibrate_full_forward(params)
    outs = {name: [] for name, _ in variants}
    for j in range(cfg.n_samples):
        for name, vc in variants:
            outs[name].append(run_chain(params, sched, vc, j, full_ns=full_ns))
    results = {}
    for name, vc in variants:
        o = outs[name]
        ph = np.stack([x[0] for x in o])
        rec = np.concatenate([x[1] for x in o])
        wall = np.array([x[2] for x in o], dtype=np.int64)
        results[name] = SampleResult(ph, dft_inverse(phi_inverse(ph, n)),
                                     SamplerTrace(vc.policy, n // 2 + 1, rec, wall))
    k = timing_chains or cfg.n_samples
    base_t = float(np.median(results["baseline"].trace.wall_ns_total[:k]))
    rows = []
    base_report = None
    for name, _ in variants:
        res = results[name]
        tr = res.trace
        row = {"policy": name,
               "speedup": base_t / float(np.median(tr.wall_ns_total[:k])),
               "median_wall_s": float(np.median(tr.wall_ns_total[:k])) / 1e9,
               "recompute_fraction": tr.recompute_fraction(),
               "kv_rows_skipped": 1.0 - tr.recompute_fraction()}
        row["mlp_rows_skipped"] = row["attention_rows_skipped"] = row["kv_rows_skipped"]
        if reference is not None:
            rep = evaluate(reference, res.time, n_proj=n_proj, random_state=eval_seed)
            row.update(sw_time=rep.sw_time, sw_time_stderr=rep.sw_time_stderr,
                       sw_freq=rep.sw_freq, sw_freq_stderr=rep.sw_freq_stderr,
                       spectral_l2=rep.spectral_l2)
            if name == "baseline":
                base_report = rep
            row["quality_change_pct"] = 100.0 * (rep.sw_time / base_report.sw_time - 1.0)
        curve = tr.hit_rate_curve(10, skip=2)
        row["hit_rate_curve"] = [None if math.isnan(v) else float(v) for v in curve]
        rows.append(row)
    return rows, results


def machine_info():
    return {"python": platform.python_version(), "machine": platform.machine(),
            "numpy": np.__version__, "time": time.strftime("%Y-%m-%dT%H:%M:%S")}
