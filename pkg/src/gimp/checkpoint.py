"""Deterministic checkpoint container.

Layout: ``b"GIMPCKPT"``, u32 version, u64 metadata length, the metadata as
canonical JSON (sorted keys, compact separators), then every array as
little-endian float64 in the order listed by the metadata's ``arrays`` table.
Identical checkpoint contents always serialise to identical bytes, so
save -> load -> save reproduces the file exactly.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .errors import DataError, MissingFileError
from .model import GROUPS, GiMPModel

MAGIC = b"GIMPCKPT"
VERSION = 1
PREFIX = struct.Struct("<8sIQ")
STAGES = ("gene", "pretrain", "finetune")


@dataclass
class Checkpoint:
    """Everything needed to resume a stage bit-for-bit.

    ``epoch`` counts completed epochs of ``stage``. ``params`` and
    ``best_params`` map group -> parameter name -> array; ``optimizer`` is an
    :meth:`AdamW.state_dict` or ``None``; ``rng`` maps stream names to
    ``bit_generator.state`` dicts.
    """

    config: TrainConfig
    stage: str
    epoch: int
    params: dict
    frozen: dict
    optimizer: dict = None
    rng: dict = field(default_factory=dict)
    best_val_acc: float = -1.0
    best_epoch: int = -1
    best_params: dict = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise DataError(f"unknown checkpoint stage {self.stage!r}")

    @classmethod
    def capture(cls, model, cfg, stage, epoch, optimizer=None, rng=None, best=None, extra=None):
        """Snapshot ``model`` (and optional optimizer, generators and best state)."""
        ck = cls(cfg, stage, int(epoch), model.state_dict(), dict(model.frozen),
                 optimizer.state_dict() if optimizer is not None else None,
                 {k: g.bit_generator.state for k, g in (rng or {}).items()},
                 extra=dict(extra or {}))
        if best is not None:
            ck.best_val_acc, ck.best_epoch = float(best.best_acc), int(best.best_epoch)
            ck.best_params = best.best_params or None
        return ck

    def build_model(self):
        """A model with this checkpoint's parameters and freeze flags."""
        model = GiMPModel.build(self.config)
        model.load_state_dict(self.params)
        for g in GROUPS:
            model.freeze(g, bool(self.frozen.get(g, False)))
        return model

    def generator(self, name):
        """A fresh generator positioned at the saved state of stream ``name``."""
        if name not in self.rng:
            raise DataError(f"checkpoint has no rng stream {name!r}")
        g = np.random.default_rng()
        g.bit_generator.state = self.rng[name]
        return g


def _flatten(prefix, tree, out):
    for k in sorted(tree):
        v = tree[k]
        key = f"{prefix}/{k}"
        if isinstance(v, dict):
            _flatten(key, v, out)
        else:
            out[key] = np.asarray(v, dtype=np.float64)


def _unflatten(items, prefix):
    # Parameter names are dotted and never contain "/".
    tree = {}
    for key, arr in items.items():
        if not key.startswith(prefix + "/"):
            continue
        parts = key[len(prefix) + 1:].split("/")
        node = tree
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = arr
    return tree


def _arrays(ck):
    out = {}
    _flatten("params", ck.params, out)
    if ck.best_params:
        _flatten("best", ck.best_params, out)
    if ck.optimizer is not None:
        _flatten("opt/m", ck.optimizer["m"], out)
        _flatten("opt/v", ck.optimizer["v"], out)
    return out


def to_bytes(ck):
    arrays = _arrays(ck)
    table = [[k, list(a.shape)] for k, a in arrays.items()]
    meta = {
        "config": ck.config.to_ini(),
        "stage": ck.stage,
        "epoch": ck.epoch,
        "frozen": {g: bool(ck.frozen.get(g, False)) for g in GROUPS},
        "optimizer_t": None if ck.optimizer is None else int(ck.optimizer["t"]),
        "rng": ck.rng,
        "best_val_acc": float(ck.best_val_acc),
        "best_epoch": int(ck.best_epoch),
        "extra": ck.extra,
        "arrays": table,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes() for k, _ in table)
    return PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + body


def from_bytes(raw, source="<bytes>"):
    if len(raw) < PREFIX.size:
        raise DataError(f"{source}: truncated checkpoint header")
    magic, version, n_meta = PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{source}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(raw[PREFIX.size:PREFIX.size + n_meta])
    except ValueError as exc:
        raise DataError(f"{source}: corrupt checkpoint metadata: {exc}") from None
    offset = PREFIX.size + n_meta
    items = {}
    for key, shape in meta["arrays"]:
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + n > len(raw):
            raise DataError(f"{source}: truncated array {key} at byte {offset}")
        items[key] = np.frombuffer(raw, dtype="<f8", count=n // 8, offset=offset).reshape(shape).copy()
        offset += n
    if offset != len(raw):
        raise DataError(f"{source}: {len(raw) - offset} trailing bytes after arrays")
    optimizer = None
    if meta["optimizer_t"] is not None:
        optimizer = {"t": meta["optimizer_t"], "m": _unflatten(items, "opt/m"),
                     "v": _unflatten(items, "opt/v")}
    return Checkpoint(
        config=TrainConfig.from_ini(meta["config"]),
        stage=meta["stage"],
        epoch=meta["epoch"],
        params=_unflatten(items, "params"),
        frozen=meta["frozen"],
        optimizer=optimizer,
        rng=meta["rng"],
        best_val_acc=meta["best_val_acc"],
        best_epoch=meta["best_epoch"],
        best_params=_unflatten(items, "best") or None,
        extra=meta["extra"],
    )


def save(ck, path):
    Path(path).write_bytes(to_bytes(ck))


def load(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise MissingFileError(f"checkpoint not found: {path}") from None
    return from_bytes(raw, str(path))
