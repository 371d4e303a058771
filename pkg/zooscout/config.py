"""One TOML configuration for every subcommand.

Lookup order: ``--config``, ``./zooscout.toml``, the ``[tool.zooscout]``
table of ``./pyproject.toml``, then the defaults below.
"""

import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import toml

from losses.dispatcher import parse_loss_set
from zooscout.dataio import FamilySpec, SyntheticFamilySpec
from zooscout.errors import ConfigError, UsageError
from zooscout.metaspace import SIGMA_RULES
from zooscout.supernet import SearchSpace, TrainSchedule
from zooscout.zoo import parse_policy

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)


@dataclass
class SupernetConfig:
    epochs: int = 10
    stage1_fraction: float = 0.4
    subnets_per_batch: int = 4
    batch_size: int = 32
    lr: float = 5e-3
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise UsageError("supernet.epochs must be >= 1")
        if not 0.0 < self.stage1_fraction <= 1.0:
            raise UsageError("supernet.stage1_fraction must be in (0, 1]")
        self.schedule()

    def schedule(self):
        return TrainSchedule.from_total(self.epochs, self.stage1_fraction, subnets_per_batch=self.subnets_per_batch,
                                        batch_size=self.batch_size, lr=self.lr)


@dataclass
class ZooConfig:
    policy: str = "all"
    audit_k: int = 16
    scratch_epochs: int = 6
    transfer: int = 32  # subnets per source scored on each other dataset; 0 turns it off

    def validate(self):
        parse_policy(self.policy)
        if self.audit_k < 3 or self.scratch_epochs < 1:
            raise UsageError("zoo.audit_k must be >= 3 and zoo.scratch_epochs >= 1")
        if self.transfer < 0:
            raise UsageError("zoo.transfer must be >= 0")


@dataclass
class EncodingConfig:
    n_z: int = 8
    n_img: int = 256
    feature_dim: int = 32
    probe_seed: int = 0
    extractor_seed: int = 0

    def validate(self):
        if min(self.n_z, self.n_img, self.feature_dim) < 1:
            raise UsageError("encoding.n_z, n_img and feature_dim must be >= 1")


@dataclass
class MetaSpaceConfig:
    embed_dim: int = 64
    hidden: list = field(default_factory=lambda: [128])
    beta: float = 10.0
    sigma_fid: float = 0.0  # 0 -> derived from the training FIDs by sigma_rule
    sigma_rule: str = "nearest"  # "nearest" neighbour FID median, or "median" of all pairs
    lam_perf: float = 1.0
    lam_rank: float = 1.0
    lam_fid: float = 1.0
    lam_contrastive: float = 1.0
    losses: str = "perf,rank,fid"
    epochs: int = 200
    lr: float = 1e-2
    max_pairs: int = 64
    min_gap: float = 1e-4
    contrastive_q: float = 0.2
    temperature: float = 0.1
    seed: int = 0

    def validate(self):
        parse_loss_set(self.losses)
        if self.embed_dim < 1 or any(h < 1 for h in self.hidden):
            raise UsageError("metaspace.embed_dim and hidden sizes must be >= 1")
        if self.beta <= 0 or self.sigma_fid < 0 or self.temperature <= 0:
            raise UsageError("metaspace.beta and temperature must be > 0, sigma_fid >= 0")
        if self.sigma_rule not in SIGMA_RULES:
            raise UsageError(f"metaspace.sigma_rule must be one of: {', '.join(SIGMA_RULES)}")
        if self.epochs < 1 or self.lr <= 0 or self.max_pairs < 1:
            raise UsageError("metaspace.epochs, lr and max_pairs must be positive")
        if not 0.0 < self.contrastive_q <= 1.0:
            raise UsageError("metaspace.contrastive_q must be in (0, 1]")

    def hyper(self):
        return {
            "beta": self.beta,
            "sigma_fid": self.sigma_fid or None,
            "sigma_rule": self.sigma_rule,
            "lam_perf": self.lam_perf,
            "lam_rank": self.lam_rank,
            "lam_fid": self.lam_fid,
            "lam_contrastive": self.lam_contrastive,
            "temperature": self.temperature,
            "contrastive_q": self.contrastive_q,
        }


@dataclass
class RetrievalConfig:
    topk: int = 10
    finetune_epochs: int = 1
    batch_size: int = 32
    lr: float = 5e-3
    continue_epochs: int = 0
    checkpoints: list = field(default_factory=list)
    seed: int = 0

    def validate(self):
        if self.topk < 1 or self.finetune_epochs < 0 or self.continue_epochs < 0:
            raise UsageError("retrieval.topk must be >= 1; finetune/continue epochs >= 0")
        if any(c < 1 or c > self.continue_epochs for c in self.checkpoints):
            raise UsageError("retrieval.checkpoints must lie in [1, continue_epochs]")


@dataclass
class FamilyConfig:
    classes: int = 4
    image_shape: list = field(default_factory=lambda: [1, 16, 16])
    noise: float = 0.3
    blob_sigma: float = 2.0
    texture_amp: float = 0.2
    prototype_seed: int = 7
    ids: list = field(default_factory=lambda: ["d0", "d1", "d2", "d3", "d4", "d5"])
    shifts: list = field(default_factory=lambda: [0.0, 0.25, 1.0, 1.25, 2.5, 2.75])
    samples: int = 400

    def spec(self):
        base = SyntheticFamilySpec(self.classes, tuple(self.image_shape), 0.0, self.noise, self.blob_sigma,
                                   self.texture_amp, self.prototype_seed)
        return FamilySpec(base, tuple(self.ids), tuple(float(s) for s in self.shifts), self.samples)

    def validate(self):
        self.spec().validate()


@dataclass
class RunConfig:
    threads: int = 1
    seed: int = 0

    def validate(self):
        if self.threads < 1:
            raise UsageError("run.threads must be >= 1")


@dataclass
class SpaceConfig:
    stages: int = 3
    depth: list = field(default_factory=lambda: [1, 2])
    width: list = field(default_factory=lambda: [0.5, 1.0])
    expansion: list = field(default_factory=lambda: [0.5, 1.0])
    base_channels: int = 8
    input_shape: list = field(default_factory=lambda: [1, 16, 16])
    classes: int = 4

    def space(self):
        return SearchSpace(self.stages, tuple(self.depth), tuple(float(w) for w in self.width),
                           tuple(float(e) for e in self.expansion), self.base_channels,
                           tuple(self.input_shape), self.classes)

    def validate(self):
        self.space().validate()


SECTIONS = {
    "space": SpaceConfig,
    "supernet": SupernetConfig,
    "zoo": ZooConfig,
    "encoding": EncodingConfig,
    "metaspace": MetaSpaceConfig,
    "retrieval": RetrievalConfig,
    "family": FamilyConfig,
    "run": RunConfig,
}


@dataclass
class Config:
    space: SpaceConfig = field(default_factory=SpaceConfig)
    supernet: SupernetConfig = field(default_factory=SupernetConfig)
    zoo: ZooConfig = field(default_factory=ZooConfig)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    metaspace: MetaSpaceConfig = field(default_factory=MetaSpaceConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    family: FamilyConfig = field(default_factory=FamilyConfig)
    run: RunConfig = field(default_factory=RunConfig)
    source: str = "<defaults>"

    def validate(self):
        for name in SECTIONS:
            try:
                getattr(self, name).validate()
            except UsageError as e:
                raise ConfigError(f"{self.source}: [{name}] {e}") from e
        return self

    def to_dict(self):
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}


def _coerce(section, key, value, default):
    """Check ``value`` against the type of the field default."""
    where = f"[{section}] {key}"
    if isinstance(default, bool) or isinstance(value, bool):
        ok = isinstance(value, bool) and isinstance(default, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float))
        value = float(value) if ok else value
    elif isinstance(default, int):
        ok = isinstance(value, int)
    elif isinstance(default, list):
        ok = isinstance(value, list)
        if ok and default:
            kind = type(default[0])
            ok = all(isinstance(v, (int, float) if kind is float else kind) for v in value)
            value = [float(v) for v in value] if ok and kind is float else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


def from_dict(doc, source="<dict>"):
    config = Config(source=source)
    for name, values in doc.items():
        if name not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
        if not isinstance(values, dict):
            raise ConfigError(f"{source}: [{name}] must be a table")
        section = getattr(config, name)
        known = {f.name for f in dataclasses.fields(section)}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"{source}: unknown key '{key}' in [{name}]")
            setattr(section, key, _coerce(name, key, value, getattr(section, key)))
    return config.validate()


def _read(path):
    try:
        return tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e


def load_config(path=None, cwd="."):
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"{path}: no such config file")
        return from_dict(_read(path), str(path))
    local = Path(cwd) / "zooscout.toml"
    if local.is_file():
        return from_dict(_read(local), str(local))
    pyproject = Path(cwd) / "pyproject.toml"
    if pyproject.is_file():
        table = _read(pyproject).get("tool", {}).get("zooscout")
        if table is not None:
            logger.debug("using [tool.zooscout] from %s", pyproject)
            return from_dict(table, f"{pyproject} [tool.zooscout]")
    return Config().validate()


def dump_config(config):
    return toml.dumps(config.to_dict())
