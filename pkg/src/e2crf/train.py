"""Denoising score matching in phi coordinates, AdamW, and dataset standardization."""

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from ._validation import NumericalError, check_batch
from .scorenet import (ScoreNetParams, backward_train, forward_train, head_coefficients,
                       _layout, init_params)
from .sde import perturb, white_to_phi
from .spectral import lambda_phi, phi_from_tokens, tokens_from_phi

STD_FLOOR = 1e-8
WEIGHTINGS = ("auto", "sigma2", "unit", "none")


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings. ``warmup_epochs`` scales with ``epochs`` (1/10 by default)."""

    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    warmup_epochs: int = 5
    weight_decay: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.1
    t_min: float = 1e-3
    weighting: str = "auto"
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need epochs >= 0 and batch_size >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("need 0 <= warmup_epochs <= epochs")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if not 0.0 < self.t_min < 1.0:
            raise ValueError("t_min must lie in (0, 1)")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")


# --------------------------------------------------------------------------
# standardization


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_standardization(X):
    """Per-feature mean/std over samples and time of ``X`` (n, N, M)."""
    X = check_batch(X)
    mean = X.mean(axis=(0, 1))
    std = X.std(axis=(0, 1))
    if np.any(std < STD_FLOOR):
        warnings.warn("constant feature: standard deviation floored at 1e-8", RuntimeWarning,
                      stacklevel=2)
        std = np.maximum(std, STD_FLOOR)
    return StandardizationStats(mean, std)


def apply_standardization(X, stats):
    return (np.asarray(X, dtype=np.float64) - stats.mean) / stats.std


def standardize(X):
    """z-score ``X`` per feature; returns ``(X_std, stats)``."""
    stats = fit_standardization(X)
    return apply_standardization(check_batch(X), stats), stats


def destandardize(X, stats):
    return np.asarray(X, dtype=np.float64) * stats.std + stats.mean


def train_val_split(X, val_fraction, seed):
    """Shuffled split; the permutation depends only on ``seed``."""
    n = len(X)
    perm = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,))).permutation(n)
    n_val = int(round(val_fraction * n))
    if n - n_val < 1:
        n_val = n - 1
    return X[perm[n_val:]], X[perm[:n_val]]


# --------------------------------------------------------------------------
# loss


def loss_weight(config, t, weighting):
    """DSM weight for times ``t`` (B,), shaped to broadcast over (B, N, M).

    ``none`` and ``sigma2`` (the kernel variance) are per sample. ``unit``
    makes the weighted loss an unweighted squared error on the raw ``edm``
    output, so it varies per coordinate when ``sigma_data`` does. ``auto``
    picks ``unit`` for the ``edm`` head and ``sigma2`` otherwise.
    """
    t = np.asarray(t, dtype=np.float64)[:, None, None]
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}")
    if weighting == "auto":
        weighting = "unit" if config.parametrization == "edm" else "sigma2"
    if weighting == "none":
        return np.ones_like(t)
    mean, var = config.kernel(t)
    if weighting == "sigma2":
        return var
    if config.parametrization != "edm":
        raise ValueError("unit weighting needs the edm head")
    # 1 / (lam^2 b^2)
    lam, sd = _layout(config, "phi")
    ms2 = mean * mean * sd * sd
    return var * (var + ms2) / ms2


def dsm_objective(score, target, n, weights):
    """Mean over the batch of ``w * sum_c lambda_c^2 (s_c - g_c)^2``.

    With the ``lambda^2`` metric this equals the squared error of the
    corresponding time-domain scores.
    """
    lam2 = (lambda_phi(n) ** 2)[:, None]
    r = score - target
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None, None]
    return float(np.mean((w * lam2 * r * r).sum(axis=(-2, -1))))


def draw_dsm_batch(batch_phi, sched, rng, t_min=1e-3):
    """Per-element times and noise for one DSM evaluation: ``(t, noise_phi)``."""
    B = batch_phi.shape[0]
    t = rng.uniform(t_min, 1.0, size=B)
    noise = white_to_phi(rng.standard_normal(batch_phi.shape))
    return t, noise


def dsm_loss(params, batch_phi, sched, rng=None, t=None, noise=None, weighting="auto",
             t_min=1e-3, grad=True):
    """DSM loss and (optionally) its gradient for a batch in phi coordinates.

    Either pass ``rng`` or explicit ``t`` (B,) and ``noise`` (B, N, M, with
    covariance Lambda^2). Returns ``(loss, grads)``; ``grads`` is ``None``
    when ``grad`` is false.
    """
    batch_phi = np.asarray(batch_phi, dtype=np.float64)
    if t is None or noise is None:
        t, noise = draw_dsm_batch(batch_phi, sched, rng, t_min)
    t = np.asarray(t, dtype=np.float64)
    cfg = params.config
    n = cfg.n
    xt, target = perturb(batch_phi, t, sched, noise)
    raw, acts = forward_train(params, tokens_from_phi(xt), t)
    out = phi_from_tokens(raw, n)
    a, b = head_coefficients(cfg, t[:, None, None], "phi")
    score = a * xt + b * out
    w = loss_weight(cfg, t, weighting)
    loss = dsm_objective(score, target, n, w)
    if not math.isfinite(loss):
        raise NumericalError("non-finite DSM loss")
    if not grad:
        return loss, None
    lam2 = (lambda_phi(n) ** 2)[:, None]
    dscore = (2.0 / len(t)) * w * lam2 * (score - target)
    draw = tokens_from_phi(dscore * b)
    return loss, backward_train(params, acts, draw)


# --------------------------------------------------------------------------
# optimiser


def lr_at(step, total, warmup, peak):
    """Linear warmup to ``peak`` over ``warmup`` steps, then cosine decay to zero."""
    if warmup > 0 and step < warmup:
        return peak * (step + 1) / warmup
    if total <= warmup:
        return peak
    prog = (step - warmup) / (total - warmup)
    return 0.5 * peak * (1.0 + math.cos(math.pi * min(prog, 1.0)))


class AdamW:
    """Adam with decoupled weight decay on weight matrices."""

    def __init__(self, names, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.names = list(names)
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k in self.names:
            g = grads[k]
            p = params.tensors[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay and k.endswith(".w"):
                p -= lr * self.weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state):
        self.t = int(state["t"])
        self.m = {k: v.copy() for k, v in state["m"].items()}
        self.v = {k: v.copy() for k, v in state["v"].items()}


def _clip(grads, max_norm):
    if not max_norm:
        return grads
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        grads = {k: g * s for k, g in grads.items()}
    return grads


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainState:
    """Everything needed to resume training after ``epoch`` completed epochs."""

    params: ScoreNetParams
    optimizer: AdamW
    epoch: int
    history: list
    best_params: ScoreNetParams
    best_val: float

    def save(self, path):
        meta = {"epoch": self.epoch, "history": self.history, "best_val": self.best_val,
                "opt_t": self.optimizer.t, "config": asdict(self.params.config)}
        arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
        for k, v in self.params.tensors.items():
            arrays["p/" + k] = v
        for k, v in self.best_params.tensors.items():
            arrays["b/" + k] = v
        for k in self.optimizer.m:
            arrays["m/" + k] = self.optimizer.m[k]
            arrays["v/" + k] = self.optimizer.v[k]
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path, train_cfg):
        from .scorenet import ScoreNetConfig

        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())

            def group(prefix):
                return {k[len(prefix):]: data[k].copy() for k in data.files if k.startswith(prefix)}

            cfg = ScoreNetConfig(**meta["config"])
            params = ScoreNetParams(cfg, group("p/"))
            best = ScoreNetParams(cfg, group("b/"))
            opt = AdamW(params.trainable(), weight_decay=train_cfg.weight_decay)
            opt.load_state({"t": meta["opt_t"], "m": group("m/"), "v": group("v/")})
        return cls(params, opt, meta["epoch"], meta["history"], best, meta["best_val"])


def _val_loss(params, val_phi, sched, cfg):
    if len(val_phi) == 0:
        return math.nan
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(9,)))
    t, noise = draw_dsm_batch(val_phi, sched, rng, cfg.t_min)
    total = 0.0
    for s in range(0, len(val_phi), 256):
        sl = slice(s, s + 256)
        loss, _ = dsm_loss(params, val_phi[sl], sched, t=t[sl], noise=noise[sl],
                           weighting=cfg.weighting, grad=False)
        total += loss * len(val_phi[sl])
    return total / len(val_phi)


def train_loop(cfg, train_phi, val_phi, sched, model_config=None, params=None, resume=None,
               callback=None):
    """Train with AdamW + warmup/cosine; keep the parameters with the lowest validation loss.

    Data are phi-coordinate arrays (n, N, M). Returns ``(best_params, history,
    state)``; ``history`` holds one dict per epoch and ``state`` can be saved
    and passed back as ``resume``. On a non-finite loss a
    :class:`NumericalError` is raised carrying ``best_params``.
    """
    train_phi = np.asarray(train_phi, dtype=np.float64)
    val_phi = np.asarray(val_phi, dtype=np.float64).reshape((-1,) + train_phi.shape[1:])
    if resume is not None:
        state = resume
    else:
        if params is None:
            params = init_params(model_config, np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
        params = params.copy()
        opt = AdamW(params.trainable(), weight_decay=cfg.weight_decay)
        best_val = _val_loss(params, val_phi, sched, cfg) if len(val_phi) else math.inf
        state = TrainState(params, opt, 0, [], params.copy(), best_val)
    n = len(train_phi)
    spe = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * spe
    warm = cfg.warmup_epochs * spe
    while state.epoch < cfg.epochs:
        e = state.epoch
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2, e)))
        perm = rng.permutation(n)
        losses = []
        for b in range(spe):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            try:
                loss, grads = dsm_loss(state.params, train_phi[idx], sched, rng,
                                       weighting=cfg.weighting, t_min=cfg.t_min)
            except NumericalError as exc:
                exc.best_params = state.best_params
                raise
            lr = lr_at(state.optimizer.t, total, warm, cfg.lr)
            state.optimizer.step(state.params, _clip(grads, cfg.grad_clip), lr)
            losses.append(loss)
        train_loss = float(np.mean(losses))
        val = _val_loss(state.params, val_phi, sched, cfg)
        score = val if len(val_phi) else train_loss
        if not math.isfinite(score):
            exc = NumericalError(f"non-finite loss in epoch {e + 1}", step=e + 1)
            exc.best_params = state.best_params
            raise exc
        if score <= state.best_val:
            state.best_val = score
            state.best_params = state.params.copy()
        state.history.append({"epoch": e + 1, "train_loss": train_loss, "val_loss": val,
                              "lr": lr, "best": bool(score == state.best_val)})
        state.epoch = e + 1
        if callback is not None:
            callback(state)
    return state.best_params, state.history, state


def history_digest(history):
    """Stable hash of a training history (for reproducibility checks)."""
    return hashlib.sha256(json.dumps(history, sort_keys=True).encode()).hexdigest()
