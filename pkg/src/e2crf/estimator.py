"""scikit-learn style wrappers: the spectral chart as a transformer and the full model."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._validation import check_batch
from .cache import E2CRFConfig
from .sampler import SamplerConfig, sample
from .scorenet import ScoreNetConfig, spectral_scale
from .sde import DiffusionSchedule
from .spectral import dft_forward, dft_inverse, phi, phi_inverse
from .train import (TrainConfig, apply_standardization, destandardize, draw_dsm_batch, dsm_loss,
                    fit_standardization, train_loop, train_val_split)


def _check_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


class SpectralTransformer(TransformerMixin, BaseEstimator):
    """Map series (n_samples, N, M) to flattened phi coordinates (n_samples, N*M) and back."""

    def fit(self, X, y=None):
        X = check_batch(X)
        self.n_timesteps_, self.n_features_in_ = X.shape[1:]
        return self

    def transform(self, X):
        _check_fitted(self, "n_timesteps_")
        X = check_batch(X, self.n_timesteps_, self.n_features_in_)
        return phi(dft_forward(X)).reshape(len(X), -1)

    def inverse_transform(self, Z):
        _check_fitted(self, "n_timesteps_")
        Z = np.asarray(Z, dtype=np.float64).reshape(-1, self.n_timesteps_, self.n_features_in_)
        return dft_inverse(phi_inverse(Z, self.n_timesteps_))


class FrequencyDiffusion(BaseEstimator):
    """Frequency-domain score diffusion model with cache-accelerated sampling.

    ``fit`` standardizes the data per feature, trains the score network by
    denoising score matching in phi coordinates and keeps the parameters
    with the lowest validation loss. ``sample`` draws new series in the
    original units. ``score`` is the negative DSM loss on held-out data.
    """

    def __init__(self, n_layers=4, d_model=32, n_heads=4, epochs=50, batch_size=32, lr=1e-3,
                 warmup_epochs=5, weight_decay=1e-4, val_fraction=0.1, n_steps=1000,
                 policy="e2crf", k_low=None, refresh_interval=50, tau0=0.01,
                 parametrization="edm", sigma_data="spectral", random_state=0):
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.val_fraction = val_fraction
        self.n_steps = n_steps
        self.policy = policy
        self.k_low = k_low
        self.refresh_interval = refresh_interval
        self.tau0 = tau0
        self.parametrization = parametrization
        self.sigma_data = sigma_data
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           warmup_epochs=min(self.warmup_epochs, self.epochs),
                           weight_decay=self.weight_decay, seed=self.random_state or 0,
                           val_fraction=self.val_fraction)

    def fit(self, X, y=None):
        X = check_batch(X)
        _, n, m = X.shape
        tc = self._train_config()
        train, val = train_val_split(X, tc.val_fraction, tc.seed) if len(X) > 1 else (X, X[:0])
        self.stats_ = fit_standardization(train)
        self.schedule_ = DiffusionSchedule(n_steps=self.n_steps)
        to_phi = lambda A: phi(dft_forward(apply_standardization(A, self.stats_)))  # noqa: E731
        train_phi = to_phi(train)
        val_phi = to_phi(val) if len(val) else np.zeros((0, n, m))
        sd = spectral_scale(train_phi) if self.sigma_data == "spectral" else self.sigma_data
        mc = ScoreNetConfig(n=n, m=m, n_layers=self.n_layers, d_model=self.d_model,
                            n_heads=self.n_heads, parametrization=self.parametrization,
                            sigma_data=sd)
        self.params_, self.history_, _ = train_loop(tc, train_phi, val_phi, self.schedule_,
                                                    model_config=mc)
        self.n_timesteps_, self.n_features_in_ = n, m
        return self

    def sample(self, n_samples=1, policy=None, random_state=None, return_trace=False):
        """Draw ``n_samples`` series (n_samples, N, M) in data units."""
        _check_fitted(self, "params_")
        cfg = SamplerConfig(n_steps=self.n_steps, n_samples=n_samples,
                            policy=policy or self.policy,
                            seed=self.random_state or 0 if random_state is None else random_state,
                            cache=E2CRFConfig(k_low=self.k_low,
                                              refresh_interval=self.refresh_interval,
                                              tau0=self.tau0))
        res = sample(self.params_, self.schedule_, cfg)
        out = destandardize(res.time, self.stats_)
        return (out, res.trace) if return_trace else out

    def score(self, X, y=None):
        """Negative DSM loss on ``X`` with a fixed draw of times and noise."""
        _check_fitted(self, "params_")
        X = check_batch(X, self.n_timesteps_, self.n_features_in_)
        Z = phi(dft_forward(apply_standardization(X, self.stats_)))
        rng = np.random.default_rng(12345)
        t, noise = draw_dsm_batch(Z, self.schedule_, rng)
        loss, _ = dsm_loss(self.params_, Z, self.schedule_, t=t, noise=noise, grad=False)
        return -loss
