"""Experiment configuration: ``section.key = value`` lines.

Blank lines and ``#`` comments are ignored. Every key must belong to a known
section; unknown keys are rejected before anything runs. ``dump_config``
writes every key (defaults included) in a fixed order, and ``parse_config``
of that text gives back an equal value.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParameterError


@dataclass(frozen=True)
class ModelSection:
    kind: str = "lorenz96"


@dataclass(frozen=True)
class Lorenz96Section:
    n: int = 40
    forcing: float = 8.0
    dt: float = 0.05
    substeps: int = 1


@dataclass(frozen=True)
class AdvectionSection:
    n_features: int = 3
    n_lat: int = 36
    n_lon: int = 72
    u: float = 0.5
    v: float = 0.1
    diffusion: float = 0.1
    periodic_lon: bool = True
    blobs: int = 6


@dataclass(frozen=True)
class LinearSection:
    a: float = 0.9
    dim: int = 1


@dataclass(frozen=True)
class TruthSection:
    spinup: int = 1000
    init_amplitude: float = 0.01


@dataclass(frozen=True)
class SurrogateSection:
    parameter_bias: float = 0.0
    additive_bias: float = 0.0
    smoothing: bool = True


@dataclass(frozen=True)
class ObsSection:
    stride: int = 2
    lat_offset: int = 0
    lon_offset: int = 0
    noise_variance: float = 0.0001


@dataclass(frozen=True)
class KernelSection:
    size: int = 0  # 0: use the observation stride
    sigma2: float = 8.0


@dataclass(frozen=True)
class CovarianceSection:
    q: float = 0.0  # 0: 0.5 / sum(W^2)


@dataclass(frozen=True)
class RunSection:
    horizon: int = 1460
    seed: int = 0
    cadence: int = 1
    operational: bool = False
    divergence_check: bool = True
    divergence_reference: str = "per_time"  # or "run": extremes over the whole truth run


@dataclass(frozen=True)
class EnsembleSection:
    size: int = 50
    perturbation_std: float = 0.3
    horizon: int = 8
    start_stride: int = 4
    start_time: int = 1
    control: bool = False
    track_feature: int = 0


@dataclass(frozen=True)
class TheorySection:
    samples: int = 20
    spacing: int = 10
    perturb_std: float = 0.0
    tail_fraction: float = 0.5
    noise_draws: int = 200
    c: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    lorenz96: Lorenz96Section = field(default_factory=Lorenz96Section)
    advection: AdvectionSection = field(default_factory=AdvectionSection)
    linear: LinearSection = field(default_factory=LinearSection)
    truth: TruthSection = field(default_factory=TruthSection)
    surrogate: SurrogateSection = field(default_factory=SurrogateSection)
    obs: ObsSection = field(default_factory=ObsSection)
    kernel: KernelSection = field(default_factory=KernelSection)
    covariance: CovarianceSection = field(default_factory=CovarianceSection)
    run: RunSection = field(default_factory=RunSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    theory: TheorySection = field(default_factory=TheorySection)

    def __post_init__(self):
        validate(self)

    def with_seed(self, seed):
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seed=int(seed)))


MODEL_KINDS = ("lorenz96", "advection2d", "linear")


def validate(cfg):
    if cfg.model.kind not in MODEL_KINDS:
        raise ParameterError(f"model.kind must be one of {MODEL_KINDS}, got {cfg.model.kind!r}")
    checks = [
        (cfg.run.horizon >= 1, "run.horizon must be >= 1"),
        (cfg.run.cadence >= 1, "run.cadence must be >= 1"),
        (cfg.run.divergence_reference in ("per_time", "run"), "run.divergence_reference must be per_time or run"),
        (cfg.obs.stride >= 1, "obs.stride must be >= 1"),
        (0 <= cfg.obs.lat_offset < cfg.obs.stride, "obs.lat_offset must lie in [0, stride)"),
        (0 <= cfg.obs.lon_offset < cfg.obs.stride, "obs.lon_offset must lie in [0, stride)"),
        (cfg.obs.noise_variance >= 0, "obs.noise_variance must be >= 0"),
        (cfg.kernel.size >= 0, "kernel.size must be >= 0"),
        (cfg.kernel.sigma2 > 0, "kernel.sigma2 must be > 0"),
        (cfg.covariance.q >= 0, "covariance.q must be >= 0"),
        (cfg.truth.spinup >= 0, "truth.spinup must be >= 0"),
        (cfg.ensemble.size >= 1, "ensemble.size must be >= 1"),
        (cfg.ensemble.horizon >= 1, "ensemble.horizon must be >= 1"),
        (cfg.ensemble.start_stride >= 1, "ensemble.start_stride must be >= 1"),
        (cfg.ensemble.perturbation_std >= 0, "ensemble.perturbation_std must be >= 0"),
        (cfg.theory.samples >= 1, "theory.samples must be >= 1"),
        (cfg.theory.spacing >= 1, "theory.spacing must be >= 1"),
        (0 < cfg.theory.tail_fraction < 1, "theory.tail_fraction must lie in (0, 1)"),
        (cfg.linear.dim >= 1, "linear.dim must be >= 1"),
    ]
    for ok, message in checks:
        if not ok:
            raise ParameterError(message)


def _convert(raw, typ, key):
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ParameterError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def _field_type(f):
    return f.type if isinstance(f.type, type) else _TYPES[f.type]


def parse_config(text, source="<config>"):
    sections = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{source}:{lineno}: expected 'section.key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise ParameterError(f"{source}:{lineno}: unknown key {key!r}")
        sec_cls = sections[section].default_factory
        sec_fields = {f.name: f for f in dataclasses.fields(sec_cls)}
        if name not in sec_fields:
            raise ParameterError(f"{source}:{lineno}: unknown key {key!r}")
        if name in updates.get(section, {}):
            raise ParameterError(f"{source}:{lineno}: duplicate key {key!r}")
        updates.setdefault(section, {})[name] = _convert(value, _field_type(sec_fields[name]), key)
    kwargs = {name: sections[name].default_factory(**vals) for name, vals in updates.items()}
    return ExperimentConfig(**kwargs)


def load_config(path):
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg):
    lines = []
    for sec in dataclasses.fields(cfg):
        section = getattr(cfg, sec.name)
        for f in dataclasses.fields(section):
            lines.append(f"{sec.name}.{f.name} = {_format(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"
