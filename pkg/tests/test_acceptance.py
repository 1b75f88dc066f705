"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are collected in ``RESULTS`` and printed in the terminal summary
(see ``conftest.py``), so they appear even when output capture is on.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from e2crf.cache import E2CRFConfig, apply_error_feedback, feedback_alpha
from e2crf.data import generate
from e2crf.eval import TABLE_POLICIES, benchmark, sliced_wasserstein
from e2crf.sampler import SamplerConfig, sample
from e2crf.scorenet import (ScoreNetConfig, backward_train, forward_full, forward_train,
                            head_coefficients, init_params, spectral_scale)
from e2crf.sde import DiffusionSchedule, analytic_dirac_score, mirrored_increment, white_to_phi
from e2crf.spectral import (dft_forward, dft_inverse, dft_matrix, full_spectrum, lambda_phi,
                            phi, phi_inverse, tokens_from_phi)
from e2crf.train import TrainConfig, dsm_loss, standardize, train_loop, train_val_split

RESULTS = {}


def record(key, ok, detail):
    RESULTS[key] = f"CRITERION {key}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[key])
    return ok


SCHED = DiffusionSchedule()


# --------------------------------------------------------------------------
# 1. cached sampler with the full band equals the baseline bit for bit


def test_criterion_1_oracle_equivalence():
    t0 = time.perf_counter()
    bad = []
    runs = 0
    for n in (16, 64, 134):
        for m in (1, 3):
            cfg = ScoreNetConfig(n=n, m=m, n_layers=2, d_model=16, n_heads=2)
            params = init_params(cfg, n * 10 + m, zero_output=False)
            base = SamplerConfig(n_steps=30, n_samples=1, calibrate=False)
            for seed in range(20):
                a = sample(params, SCHED, replace(base, policy="baseline", seed=seed))
                b = sample(params, SCHED, replace(base, policy="e2crf", seed=seed,
                                                  cache=E2CRFConfig(k_low=n // 2)))
                runs += 1
                if not np.array_equal(a.phi, b.phi) or not np.array_equal(a.time, b.time):
                    bad.append((n, m, seed))
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 120
    record(1, ok, f"{runs - len(bad)}/{runs} (N, M, seed) runs bit-identical; {elapsed:.1f}s")
    assert not bad, bad
    assert elapsed < 120


# --------------------------------------------------------------------------
# 2. spectral invariants over 1000 random cases


def test_criterion_2_spectral_invariants():
    rng = np.random.default_rng(2)
    worst = {"unitarity": 0.0, "parseval": 0.0, "round_trip": 0.0, "phi_round_trip": 0.0}
    mirror_ok = True
    for case in range(1000):
        n = int(rng.integers(2, 65))
        m = int(rng.integers(1, 4))
        x = rng.standard_normal((n, m)) * 10 ** rng.uniform(-3, 3)
        scale = float(np.abs(x).max())
        xs = dft_forward(x)
        full = full_spectrum(xs)
        if case % 10 == 0:
            U = dft_matrix(n)
            worst["unitarity"] = max(worst["unitarity"],
                                     float(np.abs(U @ U.conj().T - np.eye(n)).max()))
            worst["unitarity"] = max(worst["unitarity"],
                                     float(np.abs(U @ x - full).max()) / scale)
        k = np.arange(1, n)
        mirror_ok &= bool(np.array_equal(full[k], np.conj(full[n - k])))
        mirror_ok &= bool(np.all(full[0].imag == 0))
        e_t = float((x * x).sum())
        e_f = float((np.abs(full) ** 2).sum())
        worst["parseval"] = max(worst["parseval"], abs(e_t - e_f) / e_t)
        z = phi(xs)
        y = dft_inverse(phi_inverse(z, n))
        worst["round_trip"] = max(worst["round_trip"], float(np.abs(y - x).max()) / scale)
        worst["phi_round_trip"] = max(worst["phi_round_trip"],
                                      float(np.abs(phi(phi_inverse(z, n)) - z).max()))
    ok = (worst["unitarity"] < 1e-10 and worst["parseval"] < 1e-9 and worst["round_trip"] < 1e-12
          and worst["phi_round_trip"] < 1e-12 and mirror_ok)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(2, ok, f"1000 cases: {detail}, mirror exact={mirror_ok}")
    assert ok


# --------------------------------------------------------------------------
# 3. mirrored noise covariance


def test_criterion_3_mirrored_noise_covariance():
    rng = np.random.default_rng(3)
    n, dt = 16, 1e-3
    draws = mirrored_increment(n, 1, dt, rng, size=100_000)[..., 0]
    cov = np.cov(draws, rowvar=False)
    lam2 = lambda_phi(n) ** 2
    diag_err = float(np.abs(np.diag(cov) / (lam2 * dt) - 1).max())
    off = float(np.abs(cov - np.diag(np.diag(cov))).max() / dt)
    ok = diag_err < 0.05 and off < 0.02
    record(3, ok, f"max diag rel err {diag_err:.4f} (<0.05), max off-diag {off:.4f} dt (<0.02)")
    assert ok


# --------------------------------------------------------------------------
# 4. analytic gradients against central differences


def test_criterion_4_gradient_check():
    rng = np.random.default_rng(4)
    cfg = ScoreNetConfig(n=12, m=2, n_layers=2, d_model=16, n_heads=4)
    p = init_params(cfg, 4, zero_output=False)
    tok = tokens_from_phi(rng.standard_normal((3, 12, 2)))
    t = np.array([0.1, 0.5, 0.9])
    W = rng.standard_normal((3, cfg.n_tokens, cfg.token_dim))

    def loss():
        raw, acts = forward_train(p, tok, t)
        return float((W * raw).sum()), acts

    _, acts = loss()
    grads = backward_train(p, acts, W)
    names = p.trainable()
    worst = 0.0
    h = 1e-5
    n_checked = 0
    while n_checked < 120:
        name = names[rng.integers(len(names))]
        arr = p.tensors[name]
        i = np.unravel_index(rng.integers(arr.size), arr.shape)
        old = arr[i]
        arr[i] = old + h
        lp, _ = loss()
        arr[i] = old - h
        lm, _ = loss()
        arr[i] = old
        fd = (lp - lm) / (2 * h)
        g = grads[name][i]
        scale = max(abs(g), abs(fd))
        if scale < 1e-6:
            continue  # both essentially zero; relative error undefined
        worst = max(worst, abs(g - fd) / scale)
        n_checked += 1
    ok = worst < 1e-4
    record(4, ok, f"{n_checked} coordinates, max relative error {worst:.2e} (<1e-4)")
    assert ok


# --------------------------------------------------------------------------
# 5. point-mass data with the exact score


def test_criterion_5_dirac_recovery():
    n, m, chains = 16, 1, 1000
    x0 = phi(dft_forward(generate("dirac", 1, n, m, seed=5)[0]))
    fn = lambda x, t: analytic_dirac_score(x, t, x0, SCHED)  # noqa: E731
    cfg = SamplerConfig(n_steps=1000, n_samples=chains, seed=5, calibrate=False)
    res = sample(None, SCHED, cfg, score_fn=fn, n=n, m=m)
    sigma_final = float(SCHED.sigma(1.0 / cfg.n_steps))
    lam = lambda_phi(n)[:, None]
    # per-chain RMS of the whitened error in units of sigma_final
    err = np.sqrt((((res.phi - x0) / lam) ** 2).mean(axis=(1, 2))) / sigma_final
    frac = float((err <= 3.0).mean())
    ok = frac >= 0.99
    record(5, ok, f"{frac * 100:.1f}% of {chains} chains within 3 sigma_final "
                  f"(sigma_final={sigma_final:.4f}, median {np.median(err):.2f} sigma)")
    assert ok


# --------------------------------------------------------------------------
# 6. error-feedback contraction on real probe results


def test_criterion_6_feedback_contraction():
    cfg = ScoreNetConfig(n=40, m=1, n_layers=2, d_model=16, n_heads=2)
    params = init_params(cfg, 6, zero_output=False)
    worst = 0.0
    checked = 0
    for alpha in (0.0, 0.025, 0.1, 0.5, 0.9, 1.0):
        captured = []

        def observer(i, t, x, score, info):
            if info and info["result"].probe_index.size:
                captured.append(info)

        sc = SamplerConfig(n_steps=60, n_samples=1, policy="e2crf_no_feedback", seed=6,
                           cache=E2CRFConfig(refresh_interval=5), calibrate=False)
        sample(params, SCHED, sc, observer=observer)
        for info in captured:
            res, cache = info["result"], info["cache"]
            before_crf = res.probe_crf - cache.crf[res.probe_index]
            before_out = res.probe_raw - cache.out[res.probe_index]
            apply_error_feedback(cache, res, alpha)
            after_crf = res.probe_crf - cache.crf[res.probe_index]
            after_out = res.probe_raw - cache.out[res.probe_index]
            worst = max(worst, float(np.abs(after_crf - (1 - alpha) * before_crf).max()),
                        float(np.abs(after_out - (1 - alpha) * before_out).max()))
            checked += 1
    assert feedback_alpha(0.05) == pytest.approx(0.025)
    ok = worst <= 1e-10 and checked > 0
    record(6, ok, f"{checked} probe corrections, max |after - (1-alpha) before| = {worst:.1e}")
    assert ok


# --------------------------------------------------------------------------
# 7. cache behaviour on a trained toy model

N7 = 128
CHAINS7 = 64


@pytest.fixture(scope="module")
def toy_model():
    X = generate("sine_mix", 512, N7, 1, seed=0)
    Xs, stats = standardize(X)
    train, val = train_val_split(Xs, 0.1, 0)
    to_phi = lambda A: phi(dft_forward(A))  # noqa: E731
    mc = ScoreNetConfig(n=N7, m=1, n_layers=4, d_model=32, n_heads=4,
                        sigma_data=spectral_scale(to_phi(train)))
    tc = TrainConfig(epochs=30, warmup_epochs=3, lr=2e-3, seed=0)
    with threadpool_limits(1):
        params, hist, _ = train_loop(tc, to_phi(train), to_phi(val), SCHED, model_config=mc)
    ref = (generate("sine_mix", 1024, N7, 1, seed=1) - stats.mean) / stats.std
    return params, ref, hist


def test_criterion_7_cache_behaviour(toy_model):
    params, ref, hist = toy_model
    t0 = time.perf_counter()
    cfg = SamplerConfig(n_steps=1000, n_samples=CHAINS7, seed=7)
    with threadpool_limits(1):
        rows, results = benchmark(TABLE_POLICIES, params, SCHED, cfg, reference=ref,
                                  n_proj=1000, eval_seed=0)
    elapsed = time.perf_counter() - t0
    by = {r["policy"]: r for r in rows}
    for r in rows:
        print(f"  {r['policy']:18s} speedup {r['speedup']:.2f}  recompute "
              f"{r['recompute_fraction']:.3f}  SW time {r['sw_time']:.4f}  "
              f"SW freq {r['sw_freq']:.4f}")
    curve = results["e2crf"].trace.hit_rate_curve(10, skip=2)
    gain = float(curve[-1] - curve[0])
    a = gain >= 0.10
    b = by["e2crf"]["speedup"] >= 1.3
    ct = by["e2crf"]["sw_time"] <= 1.10 * by["baseline"]["sw_time"]
    cf = by["e2crf"]["sw_freq"] <= 1.10 * by["baseline"]["sw_freq"]
    d1 = by["e2crf_no_feedback"]["sw_time"] >= by["e2crf"]["sw_time"]
    d2 = by["fixed_schedule"]["speedup"] < by["e2crf"]["speedup"]
    record("7a", a, f"hit rate {curve[0]:.3f} -> {curve[-1]:.3f} (+{gain * 100:.1f} pp, >= 10)")
    record("7b", b, f"speedup {by['e2crf']['speedup']:.2f}x (>= 1.3) at N={N7}, batch 1")
    record("7c", ct and cf,
           f"SW time {by['e2crf']['sw_time']:.4f} vs {by['baseline']['sw_time']:.4f} "
           f"({by['e2crf']['sw_time'] / by['baseline']['sw_time']:.3f}x), SW freq "
           f"{by['e2crf']['sw_freq']:.4f} vs {by['baseline']['sw_freq']:.4f} "
           f"({by['e2crf']['sw_freq'] / by['baseline']['sw_freq']:.3f}x), limit 1.10x")
    record("7d", d1 and d2,
           f"SW no-feedback {by['e2crf_no_feedback']['sw_time']:.4f} >= "
           f"e2crf {by['e2crf']['sw_time']:.4f}: {d1}; speedup fixed "
           f"{by['fixed_schedule']['speedup']:.2f} < e2crf {by['e2crf']['speedup']:.2f}: {d2}")
    record(7, a and b and ct and cf and d1 and d2 and elapsed < 1800,
           f"sampling/eval {elapsed:.0f}s with {CHAINS7} paired chains per policy")
    assert a and b and ct and cf and d1 and d2


# --------------------------------------------------------------------------
# 8. cached score error stays below L x staleness x max step


def _jacobian_norm(params, x, t, h=1e-6):
    n = x.shape[0]
    f0 = lambda z: tokens_from_phi(z)  # noqa: E731
    cols = []
    flat = x.reshape(-1)
    for j in range(flat.size):
        e = np.zeros_like(flat)
        e[j] = h
        sp = forward_full(params, f0((flat + e).reshape(x.shape)), t).score_tokens
        sm = forward_full(params, f0((flat - e).reshape(x.shape)), t).score_tokens
        cols.append(((sp - sm) / (2 * h)).reshape(-1))
    return float(np.linalg.norm(np.array(cols).T, 2))


def test_criterion_8_error_bound():
    n, m = 16, 1
    cfg = ScoreNetConfig(n=n, m=m, n_layers=2, d_model=16, n_heads=2, parametrization="score")
    params = init_params(cfg, 8, zero_output=False)
    params.tensors["time.w"][:] = 0.0  # time-independent network
    n_tok = cfg.n_tokens
    n_steps = 200
    sc = SamplerConfig(n_steps=n_steps, n_samples=1, policy="e2crf",
                       cache=E2CRFConfig(refresh_interval=10), calibrate=False)

    states = []
    logs = []
    for j in range(100):
        st = {"prev": None, "dx": [], "e_kv": None, "e_out": None, "rows": []}

        def observer(i, t, x, score, info, st=st):
            if st["prev"] is not None:
                st["dx"].append(float(np.linalg.norm(x - st["prev"])))
            st["prev"] = x.copy()
            S = info["recompute"]
            probe = S.probe_mask()
            in_s = np.zeros(n_tok, dtype=bool)
            in_s[S.indices] = True
            if st["e_kv"] is None:
                st["e_kv"] = np.full(n_tok, i)
                st["e_out"] = np.full(n_tok, i)
            # information time of the fresh rows: oldest stale K/V they attend to
            stale = ~in_s
            info_t = min(i, int(st["e_kv"][stale].min())) if stale.any() else i
            st["e_kv"][in_s] = info_t
            fresh = in_s & ~probe
            st["e_out"][fresh] = info_t
            st["e_out"][probe] = np.minimum(st["e_out"][probe], info_t)
            full = forward_full(params, tokens_from_phi(x), t).score_tokens
            cached = tokens_from_phi(score)
            err = np.linalg.norm(full - cached, axis=1)
            st["rows"].append((i, err, i - st["e_out"].copy()))
            if i % 20 == 1 and j % 10 == 0:
                states.append((x.copy(), t))

        sample(params, SCHED, replace(sc, seed=j), observer=observer)
        logs.append(st)

    L = max(_jacobian_norm(params, x, t) for x, t in states)
    worst_ratio = 0.0
    violations = 0
    checked = 0
    for st in logs:
        dx = np.array(st["dx"])
        for i, err, stale in st["rows"]:
            for k in range(n_tok):
                w = int(stale[k])
                if w == 0:
                    if err[k] != 0.0:
                        violations += 1
                    continue
                # state changes x_{i-w} -> ... -> x_i are dx[i-w-1 .. i-2]
                window = dx[i - w - 1:i - 1]
                bound = L * w * float(window.max())
                checked += 1
                worst_ratio = max(worst_ratio, err[k] / bound)
                if err[k] > bound:
                    violations += 1
    ok = violations == 0
    record(8, ok, f"100 trajectories, {checked} stale token-steps, L={L:.3f}, "
                  f"max err/bound {worst_ratio:.3f}, violations {violations}")
    assert ok


# --------------------------------------------------------------------------
# 9. sliced Wasserstein estimator


def test_criterion_9_sliced_wasserstein():
    rng = np.random.default_rng(9)
    d, size = 4, 20000
    mu = np.array([2.0, -1.0, 1.5, 0.5])
    A = rng.standard_normal((size, d))
    B = rng.standard_normal((size, d)) + mu
    # mean over uniform directions of |<u, mu>| = ||mu|| E|u_1|
    e_abs = math.gamma(d / 2) / (math.sqrt(math.pi) * math.gamma((d + 1) / 2))
    analytic = float(np.linalg.norm(mu)) * e_abs
    est, _ = sliced_wasserstein(A, B, n_proj=2000, random_state=0)
    rel = abs(est - analytic) / analytic
    zero, zse = sliced_wasserstein(A, A, n_proj=2000, random_state=0)
    ses = {k: sliced_wasserstein(A[:2000], B[:2000], n_proj=k, random_state=k)[1]
           for k in (250, 4000)}
    ratio = ses[250] / ses[4000]
    expect = math.sqrt(4000 / 250)
    ok = rel < 0.05 and zero == 0.0 and zse == 0.0 and abs(ratio / expect - 1) < 0.30
    record(9, ok, f"shifted Gaussian {est:.4f} vs {analytic:.4f} ({rel * 100:.2f}%), "
                  f"SW(A,A)={zero}, stderr ratio {ratio:.2f} vs {expect:.2f}")
    assert ok


# --------------------------------------------------------------------------
# 10. phi-domain DSM loss equals the induced time-domain loss


def _time_domain_loss(params, x0_time, w_time, t, weighting):
    n = x0_time.shape[1]
    mean = SCHED.mean_coef(t)[:, None, None]
    sig = SCHED.sigma(t)[:, None, None]
    xt_time = mean * x0_time + sig * w_time
    target_time = -(xt_time - mean * x0_time) / sig**2
    xt = phi(dft_forward(xt_time))
    raw, _ = forward_train(params, tokens_from_phi(xt), t)
    from e2crf.spectral import phi_from_tokens
    a, b = head_coefficients(params.config, t[:, None, None], "phi")
    s_phi = a * xt + b * phi_from_tokens(raw, n)
    lam2 = (lambda_phi(n) ** 2)[:, None]
    s_time = dft_inverse(phi_inverse(lam2 * s_phi, n))
    wt = np.ones_like(t) if weighting == "none" else SCHED.sigma2(t)
    return float(np.mean(wt * ((s_time - target_time) ** 2).sum(axis=(1, 2))))


def test_criterion_10_score_equivalence():
    rng = np.random.default_rng(10)
    worst = 0.0
    for n, m in ((16, 1), (17, 2), (32, 3)):
        sd = rng.uniform(0.3, 2.0, size=(n // 2 + 1, m)).tolist()
        cfg = ScoreNetConfig(n=n, m=m, n_layers=2, d_model=16, n_heads=2, sigma_data=sd)
        params = init_params(cfg, n, zero_output=False)
        x0 = rng.standard_normal((8, n, m))
        w = rng.standard_normal((8, n, m))
        t = rng.uniform(0.01, 1.0, size=8)
        for weighting in ("none", "sigma2"):
            lp, _ = dsm_loss(params, phi(dft_forward(x0)), SCHED, t=t, noise=white_to_phi(w),
                             weighting=weighting, grad=False)
            lt = _time_domain_loss(params, x0, w, t, weighting)
            worst = max(worst, abs(lp - lt) / max(abs(lt), 1.0))
    ok = worst < 1e-8
    record(10, ok, f"max |phi loss - time loss| / max(|loss|, 1) = {worst:.1e} (<1e-8)")
    assert ok
