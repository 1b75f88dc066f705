"""Run configuration: nested YAML sections with documented defaults and dotted overrides.

Grammar: a YAML mapping with up to seven top-level sections (``data``,
``model``, ``sde``, ``cache``, ``train``, ``sample``, ``eval``), each a flat
mapping of scalar or list values. Missing keys take the defaults below;
unknown keys are errors. Overrides use ``section.key=value`` where
``value`` is parsed as a YAML scalar (``null`` for none).
"""

from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from .cache import E2CRFConfig
from .sde import DiffusionSchedule
from .train import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    generator: str = "ar1"
    count: int = 512
    n: int = 128
    m: int = 1
    seed: int = 0
    ar_coef: float = 0.95


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 4
    mlp_ratio: int = 4
    rff_dim: int = 16
    rff_scale: float = 4.0
    parametrization: str = "edm"
    # "spectral": per-token RMS of the training spectrum; or a positive number
    sigma_data: object = "spectral"

    def __post_init__(self):
        sd = self.sigma_data
        if sd != "spectral" and not (isinstance(sd, (int, float)) and sd > 0):
            raise ValueError("model.sigma_data must be 'spectral' or a positive number")


@dataclass(frozen=True)
class SampleConfig:
    policy: str = "e2crf"
    n_samples: int = 16
    seed: int = 0
    fixed_period: int = 2
    query_mode: str = "row_skip"
    threads: int = 0


@dataclass(frozen=True)
class EvalConfig:
    n_proj: int = 1000
    seed: int = 0
    policies: list = field(
        default_factory=lambda: ["baseline", "e2crf", "fixed_schedule", "naive",
                                 "e2crf_no_feedback"])
    sweep_k: list = field(default_factory=list)
    sweep_r: list = field(default_factory=list)
    reference_count: int = 1024


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "sde": DiffusionSchedule,
    "cache": E2CRFConfig,
    "train": TrainConfig,
    "sample": SampleConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sde: DiffusionSchedule = field(default_factory=DiffusionSchedule)
    cache: E2CRFConfig = field(default_factory=E2CRFConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, d):
        d = d or {}
        if not isinstance(d, dict):
            raise ValueError("config must be a mapping of sections")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        for name, typ in SECTIONS.items():
            sec = d.get(name) or {}
            allowed = {f.name for f in fields(typ)}
            bad = set(sec) - allowed
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            kw[name] = typ(**sec)
        return cls(**kw)

    def to_dict(self):
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def dump(self, path=None):
        text = yaml.safe_dump(self.to_dict(), sort_keys=False)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def override(self, assignments):
        """Apply ``section.key=value`` strings (values parsed as YAML)."""
        d = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ValueError(f"override {item!r} is not of the form section.key=value")
            path, raw = item.split("=", 1)
            sec, _, key = path.strip().replace("-", "_").partition(".")
            if sec not in d or key not in d[sec]:
                raise ValueError(f"unknown config path {path!r}")
            d[sec][key] = yaml.safe_load(raw)
        return RunConfig.from_dict(d)

    def set(self, section, **kw):
        return replace(self, **{section: replace(getattr(self, section), **kw)})
