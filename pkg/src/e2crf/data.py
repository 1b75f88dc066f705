"""Synthetic datasets and the CSV sample/dataset layout.

A dataset directory holds one CSV per sample (``N`` rows, ``M`` columns,
header row optional) and a ``manifest.json``.
"""

import json
import os

import numpy as np

from ._validation import DimensionError, check_batch

GENERATORS = ("sine_mix", "ar1", "square", "dirac")
MANIFEST = "manifest.json"
DATASET_FORMAT = "e2crf-dataset"


def sine_mix(count, n, m, rng, max_components=3, noise=0.05):
    """Sums of 1..``max_components`` low-frequency sinusoids with random phase, plus noise."""
    tau = np.arange(n)[None, :, None]
    out = np.zeros((count, n, m))
    max_cycles = max(1.0, n / 8)
    for c in range(max_components):
        active = rng.random((count, 1, m)) < (1.0 if c == 0 else 0.5)
        freq = rng.uniform(0.5, max_cycles, size=(count, 1, m))
        phase = rng.uniform(0, 2 * np.pi, size=(count, 1, m))
        amp = rng.uniform(0.5, 1.5, size=(count, 1, m))
        out += active * amp * np.sin(2 * np.pi * freq * tau / n + phase)
    return out + noise * rng.standard_normal((count, n, m))


def ar1(count, n, m, rng, coef=0.95):
    """Stationary AR(1) paths with unit innovations."""
    if not -1.0 < coef < 1.0:
        raise ValueError("AR(1) coefficient must lie in (-1, 1)")
    out = np.empty((count, n, m))
    out[:, 0] = rng.standard_normal((count, m)) / np.sqrt(1.0 - coef * coef)
    eps = rng.standard_normal((count, n, m))
    for i in range(1, n):
        out[:, i] = coef * out[:, i - 1] + eps[:, i]
    return out


def square(count, n, m, rng, noise=0.05):
    """Square waves with random period (4..N/2 samples), phase and amplitude."""
    tau = np.arange(n)[None, :, None]
    period = rng.uniform(4, max(5, n / 2), size=(count, 1, m))
    phase = rng.uniform(0, 1, size=(count, 1, m))
    amp = rng.uniform(0.5, 1.5, size=(count, 1, m))
    wave = np.where(((tau / period + phase) % 1.0) < 0.5, 1.0, -1.0)
    return amp * wave + noise * rng.standard_normal((count, n, m))


def dirac(count, n, m, rng):
    """``count`` copies of one fixed random series (a point-mass data distribution)."""
    x0 = rng.standard_normal((n, m))
    return np.broadcast_to(x0, (count, n, m)).copy()


def generate(name, count, n, m, seed=0, **kw):
    rng = np.random.default_rng(seed)
    if name not in GENERATORS:
        raise ValueError(f"unknown generator {name!r}; choose from {GENERATORS}")
    if count < 0:
        raise ValueError("count must be >= 0")
    return {"sine_mix": sine_mix, "ar1": ar1, "square": square, "dirac": dirac}[name](
        count, n, m, rng, **kw)


# --------------------------------------------------------------------------
# CSV layout


def write_csv(path, x, header=True):
    """Write one (N, M) series; values use ``repr`` so the round trip is exact."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    with open(path, "w") as fh:
        if header:
            fh.write(",".join(f"f{j}" for j in range(x.shape[1])) + "\n")
        for row in x:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_csv(path):
    """Read one series; a first row that does not parse as numbers is taken as a header."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise DimensionError(f"{path} is empty")
    try:
        [float(v) for v in lines[0].split(",")]
    except ValueError:
        lines = lines[1:]
    rows = [[float(v) for v in ln.split(",")] for ln in lines]
    if len({len(r) for r in rows}) > 1:
        raise DimensionError(f"{path} has ragged rows")
    return np.array(rows, dtype=np.float64).reshape(len(rows), -1)


def write_dataset(directory, X, meta=None, prefix="sample"):
    """Write a batch (count, N, M) as numbered CSVs plus ``manifest.json``."""
    X = np.asarray(X, dtype=np.float64)
    os.makedirs(directory, exist_ok=True)
    files = []
    for j, x in enumerate(X):
        name = f"{prefix}_{j:05d}.csv"
        write_csv(os.path.join(directory, name), x)
        files.append(name)
    manifest = {"format": DATASET_FORMAT, "version": 1,
                "n": int(X.shape[1]) if X.ndim == 3 else None,
                "m": int(X.shape[2]) if X.ndim == 3 else None,
                "count": len(files), "files": files}
    manifest.update(meta or {})
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_dataset(directory):
    """Load every CSV of a dataset directory (manifest order if present, else sorted)."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    mpath = os.path.join(directory, MANIFEST)
    if os.path.exists(mpath):
        with open(mpath) as fh:
            files = json.load(fh).get("files", [])
    else:
        files = sorted(f for f in os.listdir(directory) if f.endswith(".csv"))
    if not files:
        raise ValueError(f"no samples in {directory}")
    X = [read_csv(os.path.join(directory, f)) for f in files]
    if len({x.shape for x in X}) > 1:
        raise DimensionError(f"samples in {directory} differ in shape")
    return check_batch(np.stack(X))
