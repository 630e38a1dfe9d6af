"""Run configuration read from JSON, validated at parse time."""
from dataclasses import asdict, dataclass, field, fields
import json
from pathlib import Path

from .model import Hyperparams


class ConfigError(ValueError):
    pass


@dataclass
class EMConfig:
    D: int = 20
    tol: float = 1e-3
    max_iter: int = 30


@dataclass
class OrdinationConfig:
    d: int = 3
    level: float = 0.95
    mode: str = "mean"
    max_draws: int = 500


@dataclass
class ClusterConfig:
    k: object = "auto"
    max_draws: int = 500


@dataclass
class SamplerConfig:
    init: str = "em"
    block_size: int = 256


@dataclass
class RunConfig:
    input: str = None
    output: str = None
    seed: int = 0
    hyper: Hyperparams = field(default_factory=Hyperparams)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    em: EMConfig = field(default_factory=EMConfig)
    ordination: OrdinationConfig = field(default_factory=OrdinationConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)

    def hyperparams(self):
        h = Hyperparams(**{f.name: getattr(self.hyper, f.name) for f in fields(Hyperparams)})
        h.seed = self.seed
        return h

    def to_dict(self):
        d = asdict(self)
        d["hyper"].pop("seed", None)
        d["hyper"]["tau_prior"] = list(d["hyper"]["tau_prior"])
        return d

    def dump(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


_SECTIONS = {"hyper": Hyperparams, "sampler": SamplerConfig, "em": EMConfig,
             "ordination": OrdinationConfig, "cluster": ClusterConfig}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)} - ({"seed"} if cls is Hyperparams else set())
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(cfg):
    h = cfg.hyper
    checks = [
        (_is_num(h.alpha) and h.alpha > 0, "hyper.alpha must be > 0"),
        (h.m is None or (_is_int(h.m) and h.m >= 1), "hyper.m must be a positive integer or null"),
        (_is_num(h.a1) and h.a1 > 0, "hyper.a1 must be > 0"),
        (_is_num(h.a2) and h.a2 > 1, "hyper.a2 must be > 1"),
        (_is_num(h.v) and h.v > 0, "hyper.v must be > 0"),
        (isinstance(h.tau_prior, (list, tuple)) and len(h.tau_prior) == 2
         and all(_is_num(x) and x > 0 for x in h.tau_prior),
         "hyper.tau_prior must be two positive numbers"),
        (_is_int(h.iterations) and h.iterations >= 1, "hyper.iterations must be >= 1"),
        (_is_int(h.burn_in) and 0 <= h.burn_in < h.iterations if _is_int(h.iterations) else False,
         "hyper.burn_in must lie in [0, iterations)"),
        (_is_int(h.thin) and h.thin >= 1, "hyper.thin must be >= 1"),
        (_is_int(cfg.seed) and cfg.seed >= 0, "seed must be a nonnegative integer"),
        (cfg.sampler.init in ("em", "prior"), "sampler.init must be 'em' or 'prior'"),
        (_is_int(cfg.sampler.block_size) and cfg.sampler.block_size >= 1,
         "sampler.block_size must be >= 1"),
        (_is_int(cfg.em.D) and cfg.em.D >= 1, "em.D must be >= 1"),
        (_is_num(cfg.em.tol) and cfg.em.tol > 0, "em.tol must be > 0"),
        (_is_int(cfg.em.max_iter) and cfg.em.max_iter >= 1, "em.max_iter must be >= 1"),
        (_is_int(cfg.ordination.d) and cfg.ordination.d >= 1, "ordination.d must be >= 1"),
        (_is_num(cfg.ordination.level) and 0 < cfg.ordination.level < 1,
         "ordination.level must lie in (0, 1)"),
        (cfg.ordination.mode in ("mean", "rv_weighted"),
         "ordination.mode must be 'mean' or 'rv_weighted'"),
        (_is_int(cfg.ordination.max_draws) and cfg.ordination.max_draws >= 1,
         "ordination.max_draws must be >= 1"),
        (cfg.cluster.k == "auto" or (_is_int(cfg.cluster.k) and cfg.cluster.k >= 1),
         "cluster.k must be 'auto' or a positive integer"),
        (_is_int(cfg.cluster.max_draws) and cfg.cluster.max_draws >= 1,
         "cluster.max_draws must be >= 1"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    h.tau_prior = tuple(h.tau_prior)
    return cfg


def from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    kw = {}
    for key, value in data.items():
        kw[key] = _build(_SECTIONS[key], value, key) if key in _SECTIONS else value
    return validate(RunConfig(**kw))


def load_config(path):
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)
