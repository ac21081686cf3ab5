"""Training configuration, named profiles, INI round-tripping and seed streams.

Config files are INI documents. An optional ``[run]`` section selects a base
profile (``desk`` or ``paper``); every other key overrides a field of that
profile. :meth:`TrainConfig.to_ini` emits the fully resolved configuration,
which parses back to an identical object.
"""

import configparser
import dataclasses
import zlib
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class TrainConfig:
    # data
    n_genes: int = 1024
    embed_dim: int = 1024
    num_classes: int = 2
    # model
    d: int = 32
    heads: int = 4
    landmarks: int = 16
    pinv_iters: int = 6
    n_fragments: int = 64
    n_groups: int = 8
    gene_heads: int = 4
    mlp_ratio: int = 2
    # train
    window_len: int = 128
    mask_ratio: float = 0.5
    delta: float = 0.8
    lr: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 0.01
    optimizer: str = "adamw"
    schedule: str = "cosine"
    gene_epochs: int = 20
    gene_lr: float = 1e-3
    pretrain_epochs: int = 10
    finetune_epochs: int = 10
    batch_size: int = 8
    accumulate: int = 8
    mining: str = "all"
    use_mpm: bool = True
    use_triplet: bool = True
    seed: int = 0
    profile: str = "desk"

    def __post_init__(self):
        if self.d % self.heads or self.d % self.gene_heads:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads} "
                              f"and gene_heads={self.gene_heads}")
        if self.n_fragments % self.n_groups:
            raise ConfigError(f"n_fragments={self.n_fragments} not divisible by n_groups={self.n_groups}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.delta < 0:
            raise ConfigError(f"delta must be >= 0, got {self.delta}")
        if self.window_len < 2 or self.landmarks < 1 or self.num_classes < 2:
            raise ConfigError("window_len >= 2, landmarks >= 1 and num_classes >= 2 are required")
        if self.optimizer != "adamw" or self.schedule != "cosine":
            raise ConfigError("only optimizer=adamw with schedule=cosine is supported")
        if self.mining not in ("all", "hard"):
            raise ConfigError(f"mining must be 'all' or 'hard', got {self.mining!r}")
        if self.batch_size < 1 or self.accumulate < 1:
            raise ConfigError("batch_size and accumulate must be >= 1")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def architecture(self):
        return {k: getattr(self, k) for k in ARCH_FIELDS}

    def check_compatible(self, other):
        """Raise ConfigError if ``other`` describes a different architecture."""
        a, b = self.architecture(), other.architecture()
        diff = {k: (a[k], b[k]) for k in a if a[k] != b[k]}
        if diff:
            raise ConfigError(f"architecture mismatch: {diff}")

    def to_ini(self):
        lines = ["[run]", f"profile = {self.profile}", f"seed = {self.seed}", ""]
        for section, keys in SECTIONS.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {format_value(getattr(self, k))}" for k in keys)
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_parser(cls, cp):
        profile = cp.get("run", "profile", fallback="desk")
        overrides = {}
        known = {f.name: f for f in fields(cls)}
        for section in cp.sections():
            if section == "synth":
                continue
            for key, raw in cp.items(section):
                if section == "run" and key == "profile":
                    continue
                if key not in known:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                overrides[key] = _parse(raw, known[key].type, key)
        return profile_config(profile, **overrides)

    @classmethod
    def from_ini(cls, text):
        return cls.from_parser(parse_ini(text))


SECTIONS = {
    "data": ["n_genes", "embed_dim", "num_classes"],
    "model": ["d", "heads", "landmarks", "pinv_iters", "n_fragments", "n_groups", "gene_heads",
              "mlp_ratio"],
    "train": ["window_len", "mask_ratio", "delta", "lr", "lr_min", "weight_decay", "optimizer",
              "schedule", "gene_epochs", "gene_lr", "pretrain_epochs", "finetune_epochs",
              "batch_size", "accumulate", "mining", "use_mpm", "use_triplet"],
}
ARCH_FIELDS = SECTIONS["data"] + SECTIONS["model"]

PROFILES = {
    "desk": {},
    # Full-scale values; running this needs TCGA-sized data.
    "paper": dict(n_genes=60480, d=512, heads=8, gene_heads=8, landmarks=256, n_fragments=1890,
                  n_groups=30, window_len=6000, gene_epochs=100, pretrain_epochs=100,
                  finetune_epochs=70, gene_lr=1e-4),
}


def profile_config(name, **overrides):
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return TrainConfig(**{**PROFILES[name], **overrides, "profile": name})


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw, typ, key):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "bool": bool, "str": str}[typ]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_ini(text):
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return cp


def section_values(cp, section, cls):
    """Typed overrides for dataclass ``cls`` from one INI section."""
    if not cp.has_section(section):
        return {}
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, raw in cp.items(section):
        if key not in known:
            raise ConfigError(f"unknown config key [{section}] {key}")
        out[key] = _parse(raw, known[key].type, key)
    return out


def rng_stream(seed, name, *keys):
    """Independent generator for the named substream ``name`` (plus integer keys) of ``seed``."""
    spawn = (zlib.crc32(name.encode()),) + tuple(int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=spawn))
