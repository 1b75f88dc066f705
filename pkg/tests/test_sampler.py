import numpy as np
import pytest
from dataclasses import replace

from e2crf._validation import NumericalError
from e2crf.cache import E2CRFConfig
from e2crf.sampler import (TRACE_COLUMNS, SamplerConfig, chain_streams, run_chain, sample,
                           sample_ablation)
from e2crf.scorenet import ScoreNetConfig, init_params
from e2crf.sde import DiffusionSchedule, analytic_dirac_score
from e2crf.spectral import dft_forward, phi


@pytest.fixture(scope="module")
def params():
    cfg = ScoreNetConfig(n=16, m=2, n_layers=2, d_model=16, n_heads=2)
    return init_params(cfg, 5, zero_output=False)


SCHED = DiffusionSchedule()


def cfg_(**kw):
    base = dict(n_steps=20, n_samples=2, seed=7, calibrate=False)
    base.update(kw)
    return SamplerConfig(**base)


def test_full_band_e2crf_equals_baseline(params):
    a = sample(params, SCHED, cfg_(policy="baseline"))
    b = sample(params, SCHED, cfg_(policy="e2crf", cache=E2CRFConfig(k_low=8)))
    assert np.array_equal(a.phi, b.phi)
    assert b.trace.recompute_fraction() == 1.0


def test_fixed_period_one_equals_baseline(params):
    a = sample(params, SCHED, cfg_(policy="baseline"))
    b = sample(params, SCHED, cfg_(policy="fixed_schedule", fixed_period=1))
    assert np.array_equal(a.phi, b.phi)


def test_determinism_and_seed_sensitivity(params):
    c = cfg_(policy="e2crf")
    a = sample(params, SCHED, c)
    b = sample(params, SCHED, c)
    assert np.array_equal(a.phi, b.phi)
    d = sample(params, SCHED, replace(c, seed=8))
    assert not np.array_equal(a.phi, d.phi)


def test_chain_independent_of_batch(params):
    c = cfg_(policy="e2crf", n_samples=3)
    res = sample(params, SCHED, c)
    x, _, _ = run_chain(params, SCHED, c, 2)
    assert np.array_equal(res.phi[2], x)


def test_noise_stream_shared_across_policies():
    n0, p0 = chain_streams(3, 0)
    n1, _ = chain_streams(3, 0)
    assert np.array_equal(n0.standard_normal(5), n1.standard_normal(5))
    assert not np.array_equal(chain_streams(3, 0)[0].standard_normal(5), p0.standard_normal(5))


def test_trace_layout(params, tmp_path):
    res = sample(params, SCHED, cfg_(policy="e2crf", check_symmetry=True))
    rec = res.trace.records
    assert len(rec) == 2 * 20
    assert rec["step"][:20].tolist() == list(range(1, 21))
    np.testing.assert_allclose(rec["t"][:3], [1.0, 0.95, 0.9])
    # cold start: the first two steps recompute everything
    assert rec["n_recompute"][0] == rec["n_recompute"][1] == 9
    assert np.isinf(rec["r"][0])
    path = tmp_path / "trace.csv"
    res.trace.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == list(TRACE_COLUMNS)
    assert len(lines) == 41


def test_naive_policy_caches_high_band(params):
    res = sample(params, SCHED, cfg_(policy="naive", cache=E2CRFConfig(k_low=2)))
    n = res.trace.records["n_recompute"][:20]
    assert n[0] == 9 and set(n[1:].tolist()) == {3}


def test_time_domain_matches_phi(params):
    res = sample(params, SCHED, cfg_(policy="baseline"))
    np.testing.assert_allclose(phi(dft_forward(res.time)), res.phi, atol=1e-12)


def test_analytic_score_recovers_point_mass():
    rng = np.random.default_rng(0)
    x0 = phi(dft_forward(rng.standard_normal((8, 1))))
    fn = lambda x, t: analytic_dirac_score(x, t, x0, SCHED)  # noqa: E731
    res = sample(None, SCHED, cfg_(policy="baseline", n_steps=1000, n_samples=4), score_fn=fn,
                 n=8, m=1)
    assert np.abs(res.phi - x0).max() < 0.1
    with pytest.raises(ValueError):
        sample(None, SCHED, cfg_(policy="e2crf"), score_fn=fn, n=8, m=1)


def test_numerical_failure_reports_step():
    fn = lambda x, t: np.full_like(x, np.nan)  # noqa: E731
    with pytest.raises(NumericalError) as exc:
        sample(None, SCHED, cfg_(policy="baseline"), score_fn=fn, n=8, m=1)
    assert exc.value.step == 1


def test_zero_samples(params):
    res = sample(params, SCHED, cfg_(n_samples=0))
    assert res.phi.shape == (0, 16, 2) and len(res.trace.records) == 0


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(policy="magic")
    with pytest.raises(ValueError):
        SamplerConfig(fixed_period=0)
    with pytest.raises(ValueError):
        sample_ablation(None, SCHED, SamplerConfig(policy="baseline"))


def test_hit_rate_curve(params):
    res = sample(params, SCHED, cfg_(policy="naive", cache=E2CRFConfig(k_low=2)))
    curve = res.trace.hit_rate_curve(n_buckets=3, skip=2)
    np.testing.assert_allclose(curve, 6 / 9)
