"""Toy pre-norm transformer score network over half-spectrum tokens.

Inference has two entry points sharing one row kernel:

* :func:`forward_full` recomputes every token.
* :func:`forward_cached` recomputes only a :class:`~e2crf.cache.RecomputeSet`
  and serves the rest from a :class:`~e2crf.cache.CacheState`.

With a recompute set covering every token the two paths execute the same
arithmetic on the same buffers, so their outputs agree bit for bit.

Training uses :func:`forward_train` / :func:`backward_train`, a batched
implementation with a hand-written backward pass.
"""

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from ._validation import CacheError, DimensionError
from .spectral import lambda_diag
from .spectral import n_tokens as _n_tokens

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)
CHECKPOINT_FORMAT = "e2crf-scorenet"
CHECKPOINT_VERSION = 1
PARAMETRIZATIONS = ("edm", "noise", "score")


@dataclass(frozen=True)
class ScoreNetConfig:
    """Architecture of the score network.

    ``n`` and ``m`` fix the series shape; each of the ``n // 2 + 1`` tokens
    carries ``2 m`` real inputs.

    ``parametrization`` fixes how the raw network output ``F`` becomes a
    score (see :func:`head_coefficients`):

    * ``"edm"``: preconditioned denoiser ``x0_hat = c_skip x + c_out Lambda F``;
      the score then has a part linear in the current input plus ``F`` times a
      time-dependent factor.
    * ``"noise"``: ``score = F / sigma(t)``.
    * ``"score"``: ``score = F``.

    ``sigma_data`` is the data scale of the ``edm`` preconditioner in
    whitened phi coordinates: a scalar, or one value per (token, feature)
    as a nested ``n_tokens x m`` sequence (see :func:`spectral_scale`).
    """

    n: int
    m: int
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 4
    mlp_ratio: int = 4
    rff_dim: int = 16
    rff_scale: float = 4.0
    parametrization: str = "edm"
    sigma_data: object = 1.0
    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if self.n < 2 or self.m < 1:
            raise ValueError("need n >= 2 and m >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.parametrization not in PARAMETRIZATIONS:
            raise ValueError(f"parametrization must be one of {PARAMETRIZATIONS}")
        sd = np.asarray(self.sigma_data, dtype=np.float64)
        if sd.ndim:
            if sd.shape != (self.n_tokens, self.m):
                raise DimensionError(f"sigma_data must be a scalar or shaped "
                                     f"({self.n_tokens}, {self.m}), got {sd.shape}")
            object.__setattr__(self, "sigma_data", tuple(tuple(map(float, r)) for r in sd))
        else:
            object.__setattr__(self, "sigma_data", float(sd))
        if not np.all(np.isfinite(sd)) or np.any(sd <= 0):
            raise ValueError("sigma_data must be positive and finite")

    @classmethod
    def full_scale(cls, n, m, **kw):
        return cls(n=n, m=m, n_layers=10, d_model=72, n_heads=12, **kw)

    @property
    def n_tokens(self):
        return _n_tokens(self.n)

    @property
    def token_dim(self):
        return 2 * self.m

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def sigma_data_array(self):
        """``sigma_data`` broadcast to shape (n_tokens, m)."""
        return np.broadcast_to(np.asarray(self.sigma_data, dtype=np.float64),
                               (self.n_tokens, self.m))

    def kernel(self, t):
        """Perturbation mean factor and variance factor at ``t``."""
        t = np.asarray(t, dtype=np.float64)
        bint = self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
        return np.exp(-0.5 * bint), -np.expm1(-bint)

    def sigma(self, t):
        return np.sqrt(self.kernel(t)[1])


#: parameters that stay fixed after initialisation
FROZEN = ("time.freq",)


@dataclass
class ScoreNetParams:
    """Config plus a flat name -> array mapping of all tensors."""

    config: ScoreNetConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def trainable(self):
        return [k for k in self.tensors if k not in FROZEN]

    def copy(self):
        return ScoreNetParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def n_parameters(self):
        return int(sum(v.size for k, v in self.tensors.items() if k not in FROZEN))

    def save(self, path):
        """Write an ``.npz`` checkpoint: tensors plus a JSON ``__meta__`` entry."""
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
        }
        arrays = dict(self.tensors)
        arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"{path} is not a score-network checkpoint")
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            tensors = {k: data[k].copy() for k in data.files if k != "__meta__"}
        return cls(ScoreNetConfig(**meta["config"]), tensors)


def layer_names(i):
    p = f"l{i}."
    return {
        k: p + k
        for k in ("ln1.g", "ln1.b", "q.w", "q.b", "kv.w", "kv.b", "o.w", "o.b",
                  "ln2.g", "ln2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b")
    }


def init_params(config, random_state=None, zero_output=True):
    """Gaussian ``N(0, 1/fan_in)`` projections; output projection zero unless told otherwise."""
    rng = np.random.default_rng(random_state)
    d, m2, R = config.d_model, config.token_dim, config.rff_dim
    hid = config.mlp_ratio * d

    def dense(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

    t = {
        "in.w": dense(m2, d),
        "in.b": np.zeros(d),
        "pos": 0.1 * rng.standard_normal((config.n_tokens, d)),
        "time.freq": config.rff_scale * rng.standard_normal(R),
        "time.w": dense(2 * R, d),
        "time.b": np.zeros(d),
    }
    for i in range(config.n_layers):
        n = layer_names(i)
        t[n["ln1.g"]], t[n["ln1.b"]] = np.ones(d), np.zeros(d)
        t[n["q.w"]], t[n["q.b"]] = dense(d, d), np.zeros(d)
        t[n["kv.w"]], t[n["kv.b"]] = dense(d, 2 * d), np.zeros(2 * d)
        t[n["o.w"]], t[n["o.b"]] = dense(d, d), np.zeros(d)
        t[n["ln2.g"]], t[n["ln2.b"]] = np.ones(d), np.zeros(d)
        t[n["fc1.w"]], t[n["fc1.b"]] = dense(d, hid), np.zeros(hid)
        t[n["fc2.w"]], t[n["fc2.b"]] = dense(hid, d), np.zeros(d)
    t["lnf.g"], t["lnf.b"] = np.ones(d), np.zeros(d)
    t["out.w"] = np.zeros((d, m2)) if zero_output else dense(d, m2)
    t["out.b"] = np.zeros(m2)
    return ScoreNetParams(config, t)


# --------------------------------------------------------------------------
# shared primitives


def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    return xc / np.sqrt(var + LN_EPS) * g + b


def _gelu(u):
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + 0.044715 * u * u * u)))


def _output_mask(config):
    mask = np.ones((config.n_tokens, config.token_dim))
    mask[0, config.m:] = 0.0
    if config.n % 2 == 0:
        mask[-1, config.m:] = 0.0
    return mask


def time_embed(params, t):
    """Random Fourier features of ``t`` through the learnable dense layer."""
    ang = 2.0 * np.pi * params["time.freq"] * float(t)
    feat = np.concatenate([np.cos(ang), np.sin(ang)])
    return feat @ params["time.w"] + params["time.b"]


# --------------------------------------------------------------------------
# inference


@dataclass
class ForwardResult:
    """Output of one score-network evaluation on a single sample.

    ``score_tokens`` is the score in token layout (``n_tokens x 2M``) with the
    DC/Nyquist imaginary slots zero; ``raw`` is the network output before the
    head of :func:`apply_head`. ``crf`` is the final-layer residual stream.
    """

    score_tokens: np.ndarray
    raw: np.ndarray
    crf: np.ndarray
    hidden: list = None
    branches: list = None
    probe_index: np.ndarray = None
    probe_crf: np.ndarray = None
    probe_raw: np.ndarray = None


def _check_tokens(config, tokens):
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape != (config.n_tokens, config.token_dim):
        raise DimensionError(
            f"expected tokens of shape {(config.n_tokens, config.token_dim)}, got {tokens.shape}"
        )
    return tokens


def _attend(q, K, V, n_heads):
    r, d = q.shape
    n = K.shape[0]
    dh = d // n_heads
    qh = q.reshape(r, n_heads, dh).transpose(1, 0, 2)
    s = qh @ K.reshape(n, n_heads, dh).transpose(1, 2, 0)
    s *= 1.0 / np.sqrt(dh)
    s -= s.max(-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(-1, keepdims=True)
    o = s @ V.reshape(n, n_heads, dh).transpose(1, 0, 2)
    return o.transpose(1, 0, 2).reshape(r, d)


def _run_rows(params, tokens, t, rows, kv_store, hidden_store=None, all_queries=False,
              branches=None):
    """Push the selected token rows through every layer.

    ``rows=None`` means every token. ``kv_store(l)`` returns the (K, V)
    buffers for layer ``l``; fresh projections for ``rows`` are written into
    them before attention reads the full buffers, so stale rows of other
    tokens take part in attention. With ``all_queries`` every token computes
    queries, attention and MLP and only the K/V projections are restricted
    to ``rows``.
    """
    cfg = params.config
    tp = params.tensors
    d = cfg.d_model
    pos = tp["pos"]
    if rows is None or all_queries:
        h = tokens @ tp["in.w"] + tp["in.b"] + pos + time_embed(params, t)
    else:
        h = tokens[rows] @ tp["in.w"] + tp["in.b"] + pos[rows] + time_embed(params, t)
    if branches is not None:
        branches.append(h.copy())
    for i in range(cfg.n_layers):
        nm = layer_names(i)
        K, V = kv_store(i)
        a = _ln(h, tp[nm["ln1.g"]], tp[nm["ln1.b"]])
        q = a @ tp[nm["q.w"]] + tp[nm["q.b"]]
        if rows is None:
            kv = a @ tp[nm["kv.w"]] + tp[nm["kv.b"]]
            K[:] = kv[:, :d]
            V[:] = kv[:, d:]
        else:
            src = a[rows] if all_queries else a
            kv = src @ tp[nm["kv.w"]] + tp[nm["kv.b"]]
            K[rows] = kv[:, :d]
            V[rows] = kv[:, d:]
        att = _attend(q, K, V, cfg.n_heads) @ tp[nm["o.w"]] + tp[nm["o.b"]]
        h = h + att
        a2 = _ln(h, tp[nm["ln2.g"]], tp[nm["ln2.b"]])
        mlp = _gelu(a2 @ tp[nm["fc1.w"]] + tp[nm["fc1.b"]]) @ tp[nm["fc2.w"]] + tp[nm["fc2.b"]]
        h = h + mlp
        if branches is not None:
            branches.append(att)
            branches.append(mlp)
        if hidden_store is not None:
            hidden_store(i, h)
    raw = _ln(h, tp["lnf.g"], tp["lnf.b"]) @ tp["out.w"] + tp["out.b"]
    return h, raw


def _mask_rows(config, raw, rows):
    m = config.m
    if rows is None:
        raw[0, m:] = 0.0
        if config.n % 2 == 0:
            raw[-1, m:] = 0.0
        return raw
    raw[rows == 0, m:] = 0.0
    if config.n % 2 == 0:
        raw[rows == config.n_tokens - 1, m:] = 0.0
    return raw


def spectral_scale(batch_phi, floor=1e-3):
    """Per-(token, feature) RMS of whitened phi coordinates, for ``sigma_data``.

    For token ``k`` this is ``sqrt(E |x~_k|^2)``, the square root of the
    mean spectral energy, floored at ``floor`` times its largest value.
    Returns a nested tuple of shape (n_tokens, m).
    """
    from .spectral import phi_inverse
    batch_phi = np.asarray(batch_phi, dtype=np.float64)
    if batch_phi.ndim != 3 or len(batch_phi) == 0:
        raise DimensionError("need a non-empty batch (B, N, M) of phi coordinates")
    n = batch_phi.shape[1]
    c = phi_inverse(batch_phi, n).tokens
    sd = np.sqrt((c.real**2 + c.imag**2).mean(axis=0))
    sd = np.maximum(sd, floor * max(float(sd.max()), 1e-12))
    return tuple(tuple(map(float, r)) for r in sd)


@lru_cache(maxsize=64)
def _layout(config, layout):
    # (lambda, sigma_data) arrays in token (n_tok, 2m) or phi (N, m) layout
    sd = config.sigma_data_array()
    lam = lambda_diag(config.n)[:, None]
    if layout == "tokens":
        sd = np.concatenate([sd, sd], axis=1)
    elif layout == "phi":
        n_im = config.n - config.n_tokens
        sd = np.concatenate([sd, sd[1:1 + n_im]], axis=0)
        lam = np.concatenate([lam, lam[1:1 + n_im]], axis=0)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    for a in (sd, lam):
        a.flags.writeable = False
    return lam, sd


def head_coefficients(config, t, layout="tokens"):
    """``(a, b)`` such that ``score = a * x + b * F`` coordinate-wise.

    ``layout`` is ``"tokens"`` (n_tokens, 2m) or ``"phi"`` (N, m); ``t`` may
    be an array shaped to broadcast in front of it. For the ``edm`` head
    with ``D = sigma^2 + m^2 sigma_data^2``::

        a = -1 / (D lam^2),   b = m sigma_data / (sigma sqrt(D) lam)

    which is the score of ``x0_hat = c_skip x + c_out lam F`` with
    ``c_skip = m sigma_data^2 / D`` and ``c_out = sigma sigma_data / sqrt(D)``.
    """
    p = config.parametrization
    if p == "score":
        return 0.0, 1.0
    mean, var = config.kernel(t)
    sig = np.sqrt(var)
    if p == "noise":
        return 0.0, 1.0 / sig
    lam, sd = _layout(config, layout)
    D = var + mean * mean * sd * sd
    return -1.0 / (D * lam * lam), mean * sd / (sig * np.sqrt(D) * lam)


def apply_head(config, tokens, raw, t):
    """Score in token layout from the current input tokens and the raw output."""
    a, b = head_coefficients(config, t)
    return a * tokens + b * raw


def forward_full(params, tokens, t, keep_hidden=False, instrument=False):
    """Full recomputation of every token at diffusion time ``t``."""
    cfg = params.config
    tokens = _check_tokens(cfg, tokens)
    n, d = cfg.n_tokens, cfg.d_model
    K = np.empty((n, d))
    V = np.empty((n, d))
    hidden = [] if keep_hidden else None
    branches = [] if instrument else None
    h, raw = _run_rows(
        params, tokens, t, None, lambda i: (K, V),
        hidden_store=(lambda i, h: hidden.append(h.copy())) if keep_hidden else None,
        branches=branches,
    )
    raw = _mask_rows(cfg, raw, None)
    return ForwardResult(apply_head(cfg, tokens, raw, t), raw, h, hidden=hidden,
                         branches=branches)


def forward_cached(params, tokens, t, cache, recompute):
    """Cache-assisted forward pass for one sampling step.

    Tokens in ``recompute`` get fresh K/V projections (written to the cache);
    their attention rows read the mixed fresh/stale K/V of all tokens. Under
    the default row-skipping mode the remaining tokens compute nothing and
    their CRF and output are served from the cache. Probe tokens are
    recomputed but their fresh CRF/output is returned in the result instead
    of overwriting the cache, for :func:`~e2crf.cache.apply_error_feedback`.

    Returns ``(result, cache, stats)``; ``cache`` is updated in place.
    """
    cfg = params.config
    tokens = _check_tokens(cfg, tokens)
    cache.check_compatible(cfg)
    n = cfg.n_tokens
    idx = recompute.indices
    if idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise CacheError("recompute index out of range")
    full = idx.size == n
    if not full:
        skipped = np.ones(n, dtype=bool)
        skipped[idx] = False
        if not np.all(cache.crf_valid[skipped] & cache.kv_valid[skipped]):
            raise CacheError("cold cache: every token must be recomputed before it can be reused")
    all_queries = cache.query_mode == "all_queries"
    rows = None if full else idx

    cache.roll()

    def store_hidden(i, h):
        if rows is None or all_queries:
            cache.H[i] = h
        else:
            cache.H[i, rows] = h

    h, raw = _run_rows(params, tokens, t, rows, lambda i: (cache.K[i], cache.V[i]),
                       hidden_store=store_hidden, all_queries=all_queries)
    if all_queries and rows is not None:
        # every row was computed; only K/V were restricted
        raw = _mask_rows(cfg, raw, None)
        fresh_idx = np.arange(n)
    else:
        raw = _mask_rows(cfg, raw, rows)
        fresh_idx = np.arange(n) if rows is None else idx

    probe_mask = recompute.probe_mask()
    probe_pos = np.flatnonzero(probe_mask[fresh_idx] & cache.crf_valid[fresh_idx])
    if probe_pos.size:
        keep = np.ones(fresh_idx.size, dtype=bool)
        keep[probe_pos] = False
        write_idx = fresh_idx[keep]
        cache.crf[write_idx] = h[keep]
        cache.out[write_idx] = raw[keep]
        probe_index = fresh_idx[probe_pos]
        probe_crf, probe_raw = h[probe_pos], raw[probe_pos]
    else:
        if rows is None or all_queries:
            cache.crf[:] = h
            cache.out[:] = raw
        else:
            cache.crf[rows] = h
            cache.out[rows] = raw
        probe_index = np.empty(0, dtype=np.intp)
        probe_crf = probe_raw = None
    cache.crf_valid[fresh_idx] = True
    cache.kv_valid[idx] = True
    cache.advance(idx)

    stats = {
        "n_recomputed": int(idx.size),
        "n_cached": int(n - idx.size),
        "kv_rows": int(idx.size) * cfg.n_layers,
        "query_rows": (n if all_queries else int(idx.size)) * cfg.n_layers,
        "mlp_rows": (n if all_queries else int(idx.size)) * cfg.n_layers,
    }
    out = cache.out.copy()
    result = ForwardResult(apply_head(cfg, tokens, out, t), out, cache.crf.copy(),
                           probe_index=probe_index, probe_crf=probe_crf, probe_raw=probe_raw)
    return result, cache, stats


# --------------------------------------------------------------------------
# training: batched forward with stored activations and manual backward


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _ln_bwd(dy, cache):
    xhat, rstd, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axes)
    db = dy.sum(axes)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu_grad(u):
    inner = _GELU_C * (u + 0.044715 * u * u * u)
    th = np.tanh(inner)
    return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _dense_grad(x, dy):
    """Weight and bias gradients of ``y = x @ W + b`` over all leading axes."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return x2.T @ dy2, dy2.sum(0)


def forward_train(params, tokens, t):
    """Batched forward on ``tokens`` (B, n_tokens, 2M) and times ``t`` (B,).

    Returns the masked raw output (B, n_tokens, 2M) and the activation cache.
    """
    cfg = params.config
    tp = params.tensors
    B = tokens.shape[0]
    H, d = cfg.n_heads, cfg.d_model
    dh = d // H
    n = cfg.n_tokens
    t = np.asarray(t, dtype=np.float64).reshape(B)
    ang = 2.0 * np.pi * t[:, None] * tp["time.freq"][None, :]
    feat = np.concatenate([np.cos(ang), np.sin(ang)], axis=1)
    temb = feat @ tp["time.w"] + tp["time.b"]
    h = tokens @ tp["in.w"] + tp["in.b"] + tp["pos"][None] + temb[:, None, :]
    acts = {"tokens": tokens, "feat": feat, "layers": []}
    scale = 1.0 / np.sqrt(dh)
    for i in range(cfg.n_layers):
        nm = layer_names(i)
        a1, c1 = _ln_fwd(h, tp[nm["ln1.g"]], tp[nm["ln1.b"]])
        q = a1 @ tp[nm["q.w"]] + tp[nm["q.b"]]
        kv = a1 @ tp[nm["kv.w"]] + tp[nm["kv.b"]]
        qh = q.reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        kh = kv[..., :d].reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        vh = kv[..., d:].reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        s = qh @ kh.transpose(0, 1, 3, 2) * scale
        s -= s.max(-1, keepdims=True)
        P = np.exp(s)
        P /= P.sum(-1, keepdims=True)
        o = (P @ vh).transpose(0, 2, 1, 3).reshape(B, n, d)
        h = h + o @ tp[nm["o.w"]] + tp[nm["o.b"]]
        a2, c2 = _ln_fwd(h, tp[nm["ln2.g"]], tp[nm["ln2.b"]])
        u = a2 @ tp[nm["fc1.w"]] + tp[nm["fc1.b"]]
        g = _gelu(u)
        h = h + g @ tp[nm["fc2.w"]] + tp[nm["fc2.b"]]
        acts["layers"].append(dict(a1=a1, c1=c1, qh=qh, kh=kh, vh=vh, P=P, o=o,
                                   a2=a2, c2=c2, u=u, g=g))
    af, cf = _ln_fwd(h, tp["lnf.g"], tp["lnf.b"])
    raw = (af @ tp["out.w"] + tp["out.b"]) * _output_mask(cfg)
    acts.update(af=af, cf=cf, crf=h)
    return raw, acts


def backward_train(params, acts, draw):
    """Gradients of a scalar loss w.r.t. all trainable tensors given ``dL/draw``."""
    cfg = params.config
    tp = params.tensors
    H, d = cfg.n_heads, cfg.d_model
    dh = d // H
    B, n = draw.shape[:2]
    scale = 1.0 / np.sqrt(dh)
    grads = {}
    draw = draw * _output_mask(cfg)
    grads["out.w"], grads["out.b"] = _dense_grad(acts["af"], draw)
    dh_ = draw @ tp["out.w"].T
    dh_, grads["lnf.g"], grads["lnf.b"] = _ln_bwd(dh_, acts["cf"])
    for i in reversed(range(cfg.n_layers)):
        nm = layer_names(i)
        L = acts["layers"][i]
        # MLP branch
        grads[nm["fc2.w"]], grads[nm["fc2.b"]] = _dense_grad(L["g"], dh_)
        du = (dh_ @ tp[nm["fc2.w"]].T) * _gelu_grad(L["u"])
        grads[nm["fc1.w"]], grads[nm["fc1.b"]] = _dense_grad(L["a2"], du)
        da2 = du @ tp[nm["fc1.w"]].T
        dx, grads[nm["ln2.g"]], grads[nm["ln2.b"]] = _ln_bwd(da2, L["c2"])
        dh_ = dh_ + dx
        # attention branch
        grads[nm["o.w"]], grads[nm["o.b"]] = _dense_grad(L["o"], dh_)
        do = (dh_ @ tp[nm["o.w"]].T).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        P = L["P"]
        dP = do @ L["vh"].transpose(0, 1, 3, 2)
        dvh = P.transpose(0, 1, 3, 2) @ do
        ds = P * (dP - (dP * P).sum(-1, keepdims=True)) * scale
        dqh = ds @ L["kh"]
        dkh = ds.transpose(0, 1, 3, 2) @ L["qh"]
        dq = dqh.transpose(0, 2, 1, 3).reshape(B, n, d)
        dkv = np.concatenate([dkh.transpose(0, 2, 1, 3).reshape(B, n, d),
                              dvh.transpose(0, 2, 1, 3).reshape(B, n, d)], axis=-1)
        grads[nm["q.w"]], grads[nm["q.b"]] = _dense_grad(L["a1"], dq)
        grads[nm["kv.w"]], grads[nm["kv.b"]] = _dense_grad(L["a1"], dkv)
        da1 = dq @ tp[nm["q.w"]].T + dkv @ tp[nm["kv.w"]].T
        dx, grads[nm["ln1.g"]], grads[nm["ln1.b"]] = _ln_bwd(da1, L["c1"])
        dh_ = dh_ + dx
    grads["in.w"], grads["in.b"] = _dense_grad(acts["tokens"], dh_)
    grads["pos"] = dh_.sum(0)
    dtemb = dh_.sum(1)
    grads["time.w"], grads["time.b"] = _dense_grad(acts["feat"], dtemb)
    return grads
