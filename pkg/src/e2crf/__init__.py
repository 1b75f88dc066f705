"""Frequency-domain score diffusion for time series with an event-driven KV/CRF cache."""

__version__ = "0.1.0"

from .cache import CacheState, E2CRFConfig, RecomputeSet  # noqa: E402
from .config import RunConfig  # noqa: E402
from .estimator import FrequencyDiffusion, SpectralTransformer  # noqa: E402
from .eval import EvalReport, benchmark, evaluate, sliced_wasserstein  # noqa: E402
from .sampler import SamplerConfig, SampleResult, SamplerTrace, sample  # noqa: E402
from .scorenet import ScoreNetConfig, ScoreNetParams, init_params  # noqa: E402
from .sde import DiffusionSchedule  # noqa: E402
from .spectral import HalfSpectrum, dft_forward, dft_inverse, phi, phi_inverse  # noqa: E402
from .train import TrainConfig, train_loop  # noqa: E402

__all__ = [
    "CacheState", "DiffusionSchedule", "E2CRFConfig", "EvalReport", "FrequencyDiffusion",
    "HalfSpectrum", "RecomputeSet", "RunConfig", "SampleResult", "SamplerConfig",
    "SamplerTrace", "ScoreNetConfig", "ScoreNetParams", "SpectralTransformer", "TrainConfig",
    "__version__", "benchmark", "dft_forward", "dft_inverse", "evaluate", "init_params", "phi",
    "phi_inverse", "sample", "sliced_wasserstein", "train_loop",
]
