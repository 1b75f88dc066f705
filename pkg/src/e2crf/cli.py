"""``e2crf`` command line: gen-data, train, sample, bench, eval.

Every command resolves a :class:`~e2crf.config.RunConfig` from defaults, an
optional ``--config`` YAML file, ``--set section.key=value`` overrides and
finally the dedicated flags, in that order. The resolved config is written
to ``config.yaml`` in the output directory, headed by the tool version.

Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 I/O error.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from ._validation import DimensionError, NumericalError
from .config import RunConfig
from .data import generate, read_dataset, write_csv, write_dataset
from .eval import TABLE_POLICIES, benchmark, evaluate, machine_info
from .sampler import POLICIES, SamplerConfig, sample
from .scorenet import ScoreNetConfig, ScoreNetParams, spectral_scale
from .sde import analytic_dirac_score
from .spectral import dft_forward, phi
from .train import (StandardizationStats, TrainState, apply_standardization,
                    destandardize, fit_standardization, train_loop, train_val_split)

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
MODEL_FILE = "model.npz"
STATE_FILE = "train_state.npz"
STATS_FILE = "standardization.json"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _prepare_out(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise UsageError(f"output directory {path} exists and is not empty (use --force)")
    os.makedirs(path, exist_ok=True)
    return path


def _write_config(out, run):
    with open(os.path.join(out, "config.yaml"), "w") as fh:
        fh.write(f"# e2crf {__version__}\n")
        fh.write(run.dump())


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not JSON serialisable: {type(v)}")


def _threads(n):
    return n if n else os.cpu_count() or 1


def _limit(n):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(n)


def _k_low(value):
    if value is None or value == "max":
        return value
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("--k-low takes an integer or 'max'") from None


def _resolve(args):
    run = RunConfig.load(args.config) if args.config else RunConfig()
    run = run.override(args.set or [])
    flag_map = {
        "generator": ("data", "generator"), "count": ("data", "count"), "n": ("data", "n"),
        "m": ("data", "m"), "epochs": ("train", "epochs"), "lr": ("train", "lr"),
        "batch_size": ("train", "batch_size"), "policy": ("sample", "policy"),
        "n_samples": ("sample", "n_samples"), "steps": ("sde", "n_steps"),
        "refresh_interval": ("cache", "refresh_interval"), "n_proj": ("eval", "n_proj"),
        "threads": ("sample", "threads"),
    }
    for attr, (sec, key) in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            run = run.set(sec, **{key: v})
    seed = getattr(args, "seed", None)
    if seed is not None:
        for sec in ("data", "train", "sample", "eval"):
            run = run.set(sec, seed=seed)
    return run


def _apply_k(run, args):
    """``--k-low`` once the series length is known; rejects K beyond N // 2."""
    k = getattr(args, "k_low", None)
    if k is not None:
        run = run.set("cache", k_low=run.data.n // 2 if k == "max" else k)
    if run.cache.k_low is not None and run.cache.k_low > run.data.n // 2:
        raise UsageError(f"k_low={run.cache.k_low} exceeds N//2={run.data.n // 2}")
    return run


def _load_model(path):
    """Checkpoint file or training output directory -> (params, stats or None)."""
    if os.path.isdir(path):
        model = os.path.join(path, MODEL_FILE)
        stats = os.path.join(path, STATS_FILE)
    else:
        model, stats = path, os.path.join(os.path.dirname(path), STATS_FILE)
    params = ScoreNetParams.load(model)
    st = None
    if os.path.exists(stats):
        with open(stats) as fh:
            st = StandardizationStats.from_dict(json.load(fh))
    return params, st


def _sampler_config(run, n_samples=None, policy=None):
    s = run.sample
    return SamplerConfig(n_steps=run.sde.n_steps,
                         n_samples=s.n_samples if n_samples is None else n_samples,
                         policy=policy or s.policy, seed=s.seed, cache=run.cache,
                         fixed_period=s.fixed_period, query_mode=s.query_mode,
                         check_symmetry=True)


def _model_config(run, train_phi):
    mc = run.model
    sd = mc.sigma_data
    if sd == "spectral":
        sd = spectral_scale(train_phi)
    return ScoreNetConfig(n=run.data.n, m=run.data.m, n_layers=mc.n_layers, d_model=mc.d_model,
                          n_heads=mc.n_heads, mlp_ratio=mc.mlp_ratio, rff_dim=mc.rff_dim,
                          rff_scale=mc.rff_scale, parametrization=mc.parametrization,
                          sigma_data=sd, beta_min=run.sde.beta_min, beta_max=run.sde.beta_max)


def _read_set(path):
    if os.path.isdir(path) and os.path.isdir(os.path.join(path, "samples", "time")):
        path = os.path.join(path, "samples", "time")
    return read_dataset(path)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    run = _resolve(args)
    d = run.data
    kw = {"coef": d.ar_coef} if d.generator == "ar1" else {}
    X = generate(d.generator, d.count, d.n, d.m, seed=d.seed, **kw)
    out = _prepare_out(args.out, args.force)
    write_dataset(out, X, meta={"generator": d.generator, "seed": d.seed,
                                "e2crf_version": __version__})
    if d.count == 0:
        # the manifest records n and m even without samples
        with open(os.path.join(out, "manifest.json")) as fh:
            man = json.load(fh)
        man.update(n=d.n, m=d.m)
        _write_json(os.path.join(out, "manifest.json"), man)
    _write_config(out, run)
    print(f"wrote {d.count} samples to {out}")


def cmd_train(args):
    if not args.data:
        raise UsageError("train needs --data DATASET_DIR")
    if not os.path.isdir(args.data):
        raise UsageError(f"dataset directory {args.data} does not exist")
    X = read_dataset(args.data)
    run = _resolve(args).set("data", n=X.shape[1], m=X.shape[2])
    tc = run.train
    out = _prepare_out(args.out, args.force or bool(args.resume))
    train, val = train_val_split(X, tc.val_fraction, tc.seed)
    stats = fit_standardization(train)
    to_phi = lambda A: phi(dft_forward(apply_standardization(A, stats)))  # noqa: E731
    train_phi = to_phi(train)
    val_phi = to_phi(val) if len(val) else np.zeros((0,) + X.shape[1:])
    resume = TrainState.load(args.resume, tc) if args.resume else None
    state_path = os.path.join(out, STATE_FILE)

    def checkpoint(state):
        state.save(state_path)
        h = state.history[-1]
        print(f"epoch {h['epoch']:4d}  train {h['train_loss']:.4f}  val {h['val_loss']:.4f}",
              flush=True)

    with _limit(_threads(run.sample.threads)):
        try:
            best, history, state = train_loop(tc, train_phi, val_phi, run.sde,
                                              model_config=_model_config(run, train_phi),
                                              resume=resume, callback=checkpoint)
        except NumericalError as exc:
            exc.best_params.save(os.path.join(out, MODEL_FILE))
            raise
    best.save(os.path.join(out, MODEL_FILE))
    state.save(state_path)
    _write_json(os.path.join(out, STATS_FILE), stats.to_dict())
    _write_json(os.path.join(out, "history.json"), history)
    _write_config(out, run)
    print(f"best validation loss {state.best_val:.4f}; checkpoint {out}/{MODEL_FILE}")


def _dirac_score(run):
    # exact score of the point mass written by ``gen-data --generator dirac``
    x0 = generate("dirac", 1, run.data.n, run.data.m, seed=run.data.seed)[0]
    z0 = phi(dft_forward(x0))
    return lambda x, t: analytic_dirac_score(x, t, z0, run.sde)


def cmd_sample(args):
    run = _resolve(args)
    cfg = _sampler_config(run)
    stats = None
    if args.analytic_dirac:
        if cfg.policy != "baseline":
            raise UsageError("the analytic Dirac score only supports --policy baseline")
        score_fn = _dirac_score(run)
        params = None
        n, m = run.data.n, run.data.m
        run = _apply_k(run, args)
    elif args.checkpoint:
        params, stats = _load_model(args.checkpoint)
        n, m = params.config.n, params.config.m
        run = _apply_k(run.set("data", n=n, m=m), args)
        cfg = _sampler_config(run)
        score_fn = None
    else:
        raise UsageError("sample needs --checkpoint or --analytic-dirac")
    out = _prepare_out(args.out, args.force)
    cfg = replace(cfg, n_jobs=_threads(run.sample.threads) if cfg.n_samples > 1 else 1)
    with _limit(1):
        res = sample(params, run.sde, cfg, score_fn=score_fn, n=n, m=m)
    series = destandardize(res.time, stats) if stats is not None else res.time
    for sub, arr in (("time", series), ("freq", res.phi)):
        d = os.path.join(out, "samples", sub)
        os.makedirs(d, exist_ok=True)
        for j, x in enumerate(arr):
            write_csv(os.path.join(d, f"sample_{j:05d}.csv"), x)
    np.savez(os.path.join(out, "samples.npz"), time=series, phi=res.phi)
    res.trace.to_csv(os.path.join(out, "trace.csv"))
    _write_config(out, run)
    print(f"wrote {cfg.n_samples} samples ({cfg.policy}, {cfg.n_steps} steps) to {out}; "
          f"recompute fraction {res.trace.recompute_fraction():.3f}")


def _parse_sweep(run, text):
    if not text:
        ks, rs = run.eval.sweep_k, run.eval.sweep_r
    else:
        ks_txt, _, rs_txt = text.partition(":")
        ks = [int(v) for v in ks_txt.split(",") if v]
        rs = [int(v) for v in rs_txt.split(",") if v]
    if bool(ks) != bool(rs):
        raise UsageError("a sweep needs both K values and R values (K1,K2:R1,R2)")
    return [(k, r) for k in ks for r in rs]


def cmd_bench(args):
    run = _resolve(args)
    if not args.checkpoint:
        raise UsageError("bench needs --checkpoint")
    params, stats = _load_model(args.checkpoint)
    n, m = params.config.n, params.config.m
    run = _apply_k(run.set("data", n=n, m=m), args)
    policies = args.policies.split(",") if args.policies else list(run.eval.policies)
    bad = [p for p in policies if p not in POLICIES]
    if bad:
        raise UsageError(f"unknown policies {bad}; choose from {POLICIES}")
    sweep = _parse_sweep(run, args.sweep)
    ref = None
    if args.reference:
        ref = _read_set(args.reference)
        if stats is not None:
            ref = apply_standardization(ref, stats)
    elif not args.no_quality:
        d = run.data
        kw = {"coef": d.ar_coef} if d.generator == "ar1" else {}
        raw = generate(d.generator, run.eval.reference_count, n, m, seed=d.seed + 1, **kw)
        ref = apply_standardization(raw, stats) if stats is not None else raw
    out = _prepare_out(args.out, args.force)
    cfg = _sampler_config(run, policy="baseline")
    with _limit(_threads(args.threads) if args.threads else 1):
        rows, _ = benchmark(policies, params, run.sde, cfg, reference=ref,
                            n_proj=run.eval.n_proj, eval_seed=run.eval.seed, sweep=sweep)
    cols = ["policy", "speedup", "median_wall_s", "recompute_fraction", "sw_time",
            "sw_time_stderr", "sw_freq", "sw_freq_stderr", "quality_change_pct"]
    with open(os.path.join(out, "bench.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r.get(c, "") for c in cols])
    _write_json(os.path.join(out, "bench.json"),
                {"format": "e2crf-bench", "version": 1, "rows": rows, "machine": machine_info(),
                 "e2crf_version": __version__})
    _write_config(out, run)
    if args.plot:
        _plot_bench(rows, os.path.join(out, "hit_rate.svg"))
    for r in rows:
        q = f"  SW {r['sw_time']:.4f} ({r['quality_change_pct']:+.1f}%)" if "sw_time" in r else ""
        print(f"{r['policy']:28s} speedup {r['speedup']:.2f}x  "
              f"recompute {r['recompute_fraction']:.3f}{q}")


def _plot_bench(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for r in rows:
        curve = [np.nan if v is None else v for v in r["hit_rate_curve"]]
        ax.plot(np.arange(1, len(curve) + 1), curve, marker="o", label=r["policy"])
    ax.set_xlabel("step decile")
    ax.set_ylabel("cache hit rate")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_eval(args):
    run = _resolve(args)
    A = _read_set(args.reference)
    B = _read_set(args.generated)
    if A.shape[1:] != B.shape[1:]:
        raise UsageError(f"shape mismatch: {A.shape[1:]} vs {B.shape[1:]}")
    out = _prepare_out(args.out, args.force)
    rep = evaluate(A, B, n_proj=run.eval.n_proj, random_state=run.eval.seed)
    rep.metadata.update(reference=os.path.abspath(args.reference),
                        generated=os.path.abspath(args.generated), e2crf_version=__version__)
    rep.to_json(os.path.join(out, "report.json"))
    _write_config(out, run)
    d = rep.to_dict()
    print(f"SW time {d['sw_time_text']}   SW freq {d['sw_freq_text']}")


# --------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="e2crf", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"e2crf {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--force", action="store_true", help="allow a non-empty --out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int,
                        help="worker threads/processes (0: all cores)")

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(g)
    g.add_argument("--generator", choices=("sine_mix", "ar1", "square", "dirac"))
    g.add_argument("--count", type=int)
    g.add_argument("--n", type=int)
    g.add_argument("--m", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a score network on a dataset")
    common(t)
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--resume", help="train_state.npz to continue from")
    t.set_defaults(func=cmd_train)

    def sampling(sp):
        sp.add_argument("--checkpoint", help="model.npz or a train output directory")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--k-low", type=_k_low, help="low-frequency band K (integer or 'max')")
        sp.add_argument("--refresh-interval", type=int)
        sp.add_argument("--n-samples", type=int)

    s = sub.add_parser("sample", help="draw samples with a sampling policy")
    common(s)
    sampling(s)
    s.add_argument("--policy", choices=POLICIES)
    s.add_argument("--analytic-dirac", action="store_true",
                   help="use the exact score of a point-mass dataset instead of a network")
    s.add_argument("--n", type=int, help="series length for --analytic-dirac")
    s.add_argument("--m", type=int, help="feature count for --analytic-dirac")
    s.set_defaults(func=cmd_sample)

    b = sub.add_parser("bench", help="paired speed/quality comparison of policies")
    common(b)
    sampling(b)
    b.add_argument("--policies", help=f"comma list (default: {','.join(TABLE_POLICIES)})")
    b.add_argument("--sweep", help="K/R grid as K1,K2:R1,R2 for the e2crf policy")
    b.add_argument("--reference", help="reference dataset or sample directory for SW")
    b.add_argument("--no-quality", action="store_true", help="skip SW evaluation")
    b.add_argument("--n-proj", type=int)
    b.add_argument("--plot", action="store_true", help="write hit_rate.svg (needs matplotlib)")
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("eval", help="sliced Wasserstein report between two sample sets")
    common(e)
    e.add_argument("reference", help="dataset or sample directory")
    e.add_argument("generated", help="dataset or sample directory")
    e.add_argument("--n-proj", type=int)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"e2crf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"e2crf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DimensionError, ValueError) as exc:
        print(f"e2crf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"e2crf: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
