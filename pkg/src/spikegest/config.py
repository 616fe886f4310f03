"""INI-style run configuration with strict key checking.

Each section maps onto one frozen dataclass; every key has a default, unknown
sections or keys raise :class:`ConfigError`. The only environment override is
``SPIKEGEST_SEED``; an explicit ``--seed`` on the command line wins over it.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .signal import SynthSpec
from .snn import ATTENTION_VARIANTS, DEFAULT_INIT_GAIN, LifParams
from .ssfda import SsfdaConfig

SEED_ENV = "SPIKEGEST_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    num_classes: int = 10
    num_domains: int = 3
    samples_per_class_per_domain: int = 20
    seq_len: int = 200
    channel_count: int = 8
    noise_std: float = 0.25
    domain_mixing_strength: float = 0.5
    train_fraction: float = 0.7
    # Directory produced by ``generate``; empty means synthesise in memory.
    data_dir: str = ""


@dataclass(frozen=True)
class ModelSection:
    base_channels: int = 32
    kernel_size: int = 3
    attention: str = "sja_channelwise"
    eps: float = 1e-6
    u_th: float = 1.0
    v_reset: float = 0.0
    decay: float = 0.9
    init_gain: float = DEFAULT_INIT_GAIN


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 50
    patience: int = 10
    min_improvement: float = 0.002
    domain: int = 0


@dataclass(frozen=True)
class EvalSection:
    checkpoint: str = ""
    domain: int = 0
    split: str = "test"


@dataclass(frozen=True)
class SsfdaSection:
    k_neighbors: int = 5
    explore_prob: float = 0.1
    alpha: float = 0.3
    delta: float = 0.1
    epochs: int = 15
    lr: float = 1e-4
    batch_size: int = 32
    k_resample: bool = False
    checkpoint: str = ""
    target_domain: int = 1


@dataclass(frozen=True)
class BenchSection:
    impls: str = "sja_channelwise,sja_elementwise,dense"
    lengths: str = "256,512,1024,2048,4096"
    densities: str = "0.01,0.05,0.1"
    reps: int = 20

    def impl_list(self) -> list[str]:
        return [s.strip() for s in self.impls.split(",") if s.strip()]

    def length_list(self) -> list[int]:
        return [int(s) for s in self.lengths.split(",") if s.strip()]

    def density_list(self) -> list[float]:
        return [float(s) for s in self.densities.split(",") if s.strip()]


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ssfda: SsfdaSection = field(default_factory=SsfdaSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def synth_spec(self) -> SynthSpec:
        d = self.data
        return SynthSpec(d.num_classes, d.num_domains, d.samples_per_class_per_domain, d.seq_len,
                         d.channel_count, d.noise_std, d.domain_mixing_strength, self.seed)

    def lif_params(self) -> LifParams:
        m = self.model
        return LifParams.from_decay(m.decay, m.u_th, m.v_reset)

    def ssfda_config(self) -> SsfdaConfig:
        s = self.ssfda
        return SsfdaConfig(s.k_neighbors, s.explore_prob, s.alpha, s.delta, s.epochs, s.lr,
                           s.batch_size, self.seed, s.k_resample)

    def to_ini(self) -> str:
        lines = ["[run]", f"seed = {self.seed}", ""]
        for name in _SECTIONS:
            lines.append(f"[{name}]")
            for key, value in asdict(getattr(self, name)).items():
                lines.append(f"{key} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)


_SECTIONS = {"data": DataSection, "model": ModelSection, "train": TrainSection,
             "eval": EvalSection, "ssfda": SsfdaSection, "bench": BenchSection}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(raw: str, kind, where: str):
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_seed(raw, where: str = "seed") -> int:
    seed = _coerce(str(raw), int, where)
    if not 0 <= seed < 2**64:
        raise ConfigError(f"{where}: seed must be an unsigned 64-bit integer")
    return seed


def _validate(cfg: RunConfig) -> None:
    m = cfg.model
    if m.attention not in ATTENTION_VARIANTS:
        raise ConfigError(f"model.attention must be one of {', '.join(ATTENTION_VARIANTS)}")
    if cfg.eval.split not in ("train", "test"):
        raise ConfigError("eval.split must be 'train' or 'test'")
    if not 0.0 < cfg.data.train_fraction < 1.0:
        raise ConfigError("data.train_fraction must lie in (0, 1)")
    for name in ("base_channels", "kernel_size"):
        if getattr(m, name) < 1:
            raise ConfigError(f"model.{name} must be >= 1")
    for name, sec in (("train", cfg.train), ("ssfda", cfg.ssfda)):
        if sec.batch_size < 1 or sec.epochs < 1 or sec.lr <= 0:
            raise ConfigError(f"{name}: batch_size and epochs must be >= 1 and lr positive")
    try:
        cfg.synth_spec()
        cfg.lif_params()
        cfg.ssfda_config()
        lengths, densities = cfg.bench.length_list(), cfg.bench.density_list()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if any(n < 1 for n in lengths) or any(not 0 <= d <= 1 for d in densities):
        raise ConfigError("bench lengths must be positive and densities in [0, 1]")
    if cfg.bench.reps < 3:
        raise ConfigError("bench.reps must be >= 3")


def parse_config(text: str, seed_override: int | None = None,
                 environ: dict | None = None) -> RunConfig:
    """Parse INI text into a validated :class:`RunConfig`.

    Seed precedence: ``seed_override`` > ``SPIKEGEST_SEED`` > ``[run] seed``.
    """
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                       comment_prefixes=("#", ";"), default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = {}
    seed = 0
    for name in parser.sections():
        items = dict(parser.items(name))
        if name == "run":
            unknown = set(items) - {"seed"}
            if unknown:
                raise ConfigError(f"unknown key(s) in [run]: {', '.join(sorted(unknown))}")
            if "seed" in items:
                seed = parse_seed(items["seed"], "run.seed")
            continue
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        cls = _SECTIONS[name]
        types = {f.name: type(f.default) for f in fields(cls)}
        unknown = set(items) - set(types)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
        values = {k: _coerce(v, types[k], f"{name}.{k}") for k, v in items.items()}
        sections[name] = cls(**values)
    env = os.environ if environ is None else environ
    if seed_override is not None:
        seed = parse_seed(seed_override, "--seed")
    elif env.get(SEED_ENV):
        seed = parse_seed(env[SEED_ENV], SEED_ENV)
    cfg = replace(RunConfig(), seed=seed, **sections)
    _validate(cfg)
    return cfg


def load_config(path, seed_override: int | None = None, environ: dict | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, seed_override, environ)
