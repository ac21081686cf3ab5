"""Datasets of gene/patch pairs: file formats, manifests and a synthetic generator.

Patch files: ``b"GIMP"``, u32 version (1), u32 N_p, u32 dim, then N_p * dim
little-endian float32 values, row-major. Gene files: one decimal float per
line. A manifest is a JSON array of records ``{patient_id, gene_path,
patch_path, label, split}`` with paths relative to the manifest. Gene z-score
statistics from the training split live beside it in ``gene_norm.json``.
"""

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .aggregator import PatchSequence
from .config import rng_stream
from .errors import ConfigError, DataError, MissingFileError
from .gene_encoder import GeneVector

log = logging.getLogger(__name__)

MAGIC = b"GIMP"
VERSION = 1
HEADER = struct.Struct("<4sIII")
SPLITS = ("train", "val", "test")
NORM_SIDECAR = "gene_norm.json"


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_patch_file(path, embeddings):
    emb = np.ascontiguousarray(embeddings, dtype="<f4")
    if emb.ndim != 2 or emb.shape[0] < 1:
        raise DataError(f"{path}: embeddings must be a non-empty matrix, got {emb.shape}")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, emb.shape[0], emb.shape[1]))
        fh.write(emb.tobytes())


def read_patch_file(path, expected_dim=None):
    """Read a patch file and widen it to float64."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise MissingFileError(f"patch file not found: {path}") from None
    if len(raw) < HEADER.size:
        raise DataError(f"{path}: truncated header, {len(raw)} of {HEADER.size} bytes")
    magic, version, n, dim = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version} at byte 4")
    if expected_dim is not None and dim != expected_dim:
        raise DataError(f"{path}: embedding dim {dim} at byte 12, expected {expected_dim}")
    if n < 1:
        raise DataError(f"{path}: patch count {n} at byte 8 must be >= 1")
    want = HEADER.size + 4 * n * dim
    if len(raw) != want:
        raise DataError(f"{path}: expected {want} bytes for {n}x{dim} patches, found {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(n, dim)
    bad = ~np.isfinite(arr)
    if bad.any():
        flat = int(np.flatnonzero(bad.reshape(-1))[0])
        raise DataError(f"{path}: non-finite value at byte offset {HEADER.size + 4 * flat}")
    return arr.astype(np.float64)


def write_gene_file(path, values):
    with open(path, "w") as fh:
        fh.write("".join(f"{float(v)!r}\n" for v in values))


def read_gene_file(path, n_expected):
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise MissingFileError(f"gene file not found: {path}") from None
    if len(lines) != n_expected:
        raise DataError(f"{path}: {len(lines)} lines, expected N_ge={n_expected}")
    out = np.empty(n_expected)
    for i, line in enumerate(lines):
        try:
            out[i] = float(line)
        except ValueError:
            raise DataError(f"{path}: line {i + 1}: cannot parse {line!r}") from None
        if not math.isfinite(out[i]):
            raise DataError(f"{path}: line {i + 1}: non-finite value {line!r}")
    return out


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass
class PatientPair:
    gene: GeneVector
    patches: PatchSequence
    label: int
    patient_id: str

    def __post_init__(self):
        if self.gene.patient_id != self.patient_id or self.patches.patient_id != self.patient_id:
            raise DataError(f"pair {self.patient_id}: gene/patch patient ids disagree")
        if self.label < 0:
            raise DataError(f"pair {self.patient_id}: invalid label {self.label}")


@dataclass
class ManifestRecord:
    patient_id: str
    gene_path: str
    patch_path: str
    label: int
    split: str


@dataclass
class Manifest:
    records: list
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.patient_id in seen:
                raise DataError(f"manifest: duplicate patient_id {r.patient_id}")
            if r.split not in SPLITS:
                raise DataError(f"manifest: {r.patient_id} has unknown split {r.split!r}")
            seen.add(r.patient_id)

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            items = json.loads(path.read_text())
        except FileNotFoundError:
            raise MissingFileError(f"manifest not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None
        try:
            recs = [ManifestRecord(str(it["patient_id"]), it["gene_path"], it["patch_path"],
                                   int(it["label"]), it["split"]) for it in items]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed record ({exc})") from None
        return cls(recs, path.parent)

    def save(self, path):
        Path(path).write_text(json.dumps([asdict(r) for r in self.records], indent=1) + "\n")

    def split_sizes(self):
        return {s: sum(r.split == s for r in self.records) for s in SPLITS}

    def records_for(self, split):
        return [r for r in self.records if r.split == split]


def split_counts(n, fractions=(0.6, 0.2)):
    """Train/val/test sizes: floors of the fractions, remainder to test (946 -> 567/189/190)."""
    n_train = int(math.floor(n * fractions[0]))
    n_val = int(math.floor(n * fractions[1]))
    return n_train, n_val, n - n_train - n_val


# ---------------------------------------------------------------------------
# gene normalisation
# ---------------------------------------------------------------------------


@dataclass
class GeneNormalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, genes):
        genes = np.asarray(genes, dtype=np.float64)
        std = genes.std(axis=0)
        std[std == 0] = 1.0
        return cls(genes.mean(axis=0), std)

    def apply(self, values, n_padded=None):
        z = (np.asarray(values, dtype=np.float64) - self.mean) / self.std
        if n_padded is not None and n_padded > z.shape[-1]:
            pad = [(0, 0)] * (z.ndim - 1) + [(0, n_padded - z.shape[-1])]
            z = np.pad(z, pad)
        return z

    def save(self, path):
        Path(path).write_text(json.dumps({"mean": self.mean.tolist(), "std": self.std.tolist()}))

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    pairs: list
    splits: dict

    def split(self, name):
        if name not in self.splits:
            raise ConfigError(f"unknown split {name!r}")
        return [self.pairs[i] for i in self.splits[name]]

    def split_sizes(self):
        return {s: len(self.splits.get(s, ())) for s in SPLITS}

    def prepared(self, n_padded, normalizer=None):
        """Copy with z-scored, zero-padded genes (statistics from the training split)."""
        if normalizer is None:
            normalizer = GeneNormalizer.fit(np.stack([p.gene.values for p in self.split("train")]))
        out = []
        for p in self.pairs:
            g = GeneVector(normalizer.apply(p.gene.values, n_padded), p.patient_id)
            out.append(PatientPair(g, p.patches, p.label, p.patient_id))
        return Dataset(out, self.splits)


@dataclass(frozen=True)
class SynthConfig:
    num_patients: int = 200
    num_classes: int = 2
    n_genes: int = 1024
    n_min: int = 64
    n_max: int = 512
    embed_dim: int = 1024
    gene_shift: float = 3.0
    gene_informative: float = 0.1
    patch_shift: float = 4.0
    rho: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.n_min < 1 or self.n_max < self.n_min:
            raise ConfigError(f"patch count range [{self.n_min}, {self.n_max}] is invalid")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"rho must lie in [0, 1), got {self.rho}")
        if self.num_classes < 2 or self.num_patients < 1:
            raise ConfigError("need num_classes >= 2 and num_patients >= 1")
        if not 0.0 < self.gene_informative <= 1.0:
            raise ConfigError("gene_informative must lie in (0, 1]")


def _class_signs(rng, num_classes, width):
    signs = rng.choice([-1.0, 1.0], size=(num_classes, width))
    if num_classes == 2:
        signs[1] = -signs[0]
    return signs


def ar1_sequence(rng, n, dim, rho):
    """Stationary unit-variance AR(1) rows: z_{j+1} = rho z_j + sqrt(1 - rho^2) eps."""
    eps = rng.standard_normal((n, dim))
    z = np.empty((n, dim))
    z[0] = eps[0]
    c = math.sqrt(1.0 - rho * rho)
    for j in range(1, n):
        z[j] = rho * z[j - 1] + c * eps[j]
    return z


def generate_synthetic(cfg, out_dir=None):
    """Build a class-separable, spatially smooth dataset; optionally write it to ``out_dir``.

    Genes: per-gene baseline and scale, with class means separated by
    ``gene_shift`` standard deviations on a random ``gene_informative``
    fraction of genes. Patches: ``e_j = mu_c + z_j`` with ``z`` a stationary
    AR(1) process of coefficient ``rho`` and ``mu_c`` a class direction of norm
    ``patch_shift``. Patch values are rounded to float32, the on-disk width.
    """
    world = rng_stream(cfg.seed, "synth-world")
    base = world.uniform(2.0, 10.0, cfg.n_genes)
    scale = world.uniform(0.5, 2.0, cfg.n_genes)
    n_inf = max(1, int(round(cfg.gene_informative * cfg.n_genes)))
    informative = np.sort(world.choice(cfg.n_genes, n_inf, replace=False))
    gene_offsets = np.zeros((cfg.num_classes, cfg.n_genes))
    gene_offsets[:, informative] = 0.5 * cfg.gene_shift * _class_signs(world, cfg.num_classes, n_inf)
    dirs = world.standard_normal((cfg.num_classes, cfg.embed_dim))
    if cfg.num_classes == 2:
        dirs[1] = -dirs[0]
    dirs *= cfg.patch_shift / np.linalg.norm(dirs, axis=1, keepdims=True)

    labels = rng_stream(cfg.seed, "synth-labels").integers(0, cfg.num_classes, cfg.num_patients)
    pairs = []
    width = len(str(cfg.num_patients - 1))
    for i in range(cfg.num_patients):
        r = rng_stream(cfg.seed, "synth-patient", i)
        pid = f"P{i:0{width}d}"
        c = int(labels[i])
        genes = base + scale * (r.standard_normal(cfg.n_genes) + gene_offsets[c])
        n = int(r.integers(cfg.n_min, cfg.n_max + 1))
        emb = (dirs[c] + ar1_sequence(r, n, cfg.embed_dim, cfg.rho)).astype(np.float32).astype(np.float64)
        pairs.append(PatientPair(GeneVector(genes, pid), PatchSequence(emb, pid), c, pid))

    n_train, n_val, _ = split_counts(cfg.num_patients)
    perm = rng_stream(cfg.seed, "synth-split").permutation(cfg.num_patients)
    splits = {
        "train": sorted(perm[:n_train].tolist()),
        "val": sorted(perm[n_train:n_train + n_val].tolist()),
        "test": sorted(perm[n_train + n_val:].tolist()),
    }
    ds = Dataset(pairs, splits)
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


def write_dataset(ds, out_dir):
    out = Path(out_dir)
    try:
        (out / "genes").mkdir(parents=True, exist_ok=True)
        (out / "patches").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out}: {exc}") from None
    split_of = {i: s for s, idx in ds.splits.items() for i in idx}
    records = []
    for i, p in enumerate(ds.pairs):
        gpath = f"genes/{p.patient_id}.txt"
        ppath = f"patches/{p.patient_id}.gimp"
        write_gene_file(out / gpath, p.gene.values)
        write_patch_file(out / ppath, p.patches.embeddings)
        records.append(ManifestRecord(p.patient_id, gpath, ppath, p.label, split_of[i]))
    Manifest(records, out).save(out / "manifest.json")
    train = np.stack([ds.pairs[i].gene.values for i in ds.splits["train"]])
    GeneNormalizer.fit(train).save(out / NORM_SIDECAR)
    return out / "manifest.json"


def load_pair(record, root, n_genes, normalizer=None, n_padded=None, embed_dim=None):
    """Load one manifest record; genes are z-scored and padded when a normalizer is given."""
    root = Path(root)
    raw = read_gene_file(root / record.gene_path, n_genes)
    genes = raw if normalizer is None else normalizer.apply(raw, n_padded)
    emb = read_patch_file(root / record.patch_path, embed_dim)
    pid = record.patient_id
    return PatientPair(GeneVector(genes, pid), PatchSequence(emb, pid), record.label, pid)


def load_dataset(manifest_path, n_genes, n_padded=None, embed_dim=None, splits=SPLITS):
    """Load the records of ``splits`` with z-scoring from the training-split sidecar.

    The sidecar is computed from the training genes and written if absent.
    """
    manifest = Manifest.load(manifest_path)
    sidecar = manifest.root / NORM_SIDECAR
    if sidecar.exists():
        normalizer = GeneNormalizer.load(sidecar)
        if normalizer.mean.shape != (n_genes,):
            raise DataError(f"{sidecar}: statistics cover {normalizer.mean.shape[0]} genes, "
                            f"expected {n_genes}")
    else:
        train = [read_gene_file(manifest.root / r.gene_path, n_genes) for r in manifest.records_for("train")]
        if not train:
            raise DataError(f"{manifest_path}: no training records to fit gene statistics")
        normalizer = GeneNormalizer.fit(np.stack(train))
        normalizer.save(sidecar)
    pairs, index = [], {s: [] for s in SPLITS}
    for r in manifest.records:
        if r.split not in splits:
            continue
        index[r.split].append(len(pairs))
        pairs.append(load_pair(r, manifest.root, n_genes, normalizer, n_padded, embed_dim))
    return Dataset(pairs, index), manifest


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def balanced_batches(labels, batch_size, rng):
    """One epoch of index batches, each holding >= 2 samples of >= 2 classes when possible.

    Classes are visited in pairs of draws from per-class shuffled queues that
    refill when exhausted, so minority classes are oversampled. A single-class
    split logs a warning and falls back to uniform shuffled batches.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        return []
    classes = np.unique(labels)
    n_batches = -(-n // batch_size)
    if len(classes) < 2 or batch_size < 4:
        if len(classes) < 2:
            log.warning("balanced_batches: split has a single class; using uniform batches")
        perm = rng.permutation(n)
        return [perm[i:i + batch_size].tolist() for i in range(0, n, batch_size)]

    members = {c: np.flatnonzero(labels == c) for c in classes}
    queues = {c: [] for c in classes}

    def draw(c, taken):
        for _ in range(2 * len(members[c]) + 1):
            if not queues[c]:
                queues[c] = rng.permutation(members[c]).tolist()
            i = queues[c].pop()
            if i not in taken:
                return i
            queues[c].insert(0, i)
        return None

    batches = []
    for _ in range(n_batches):
        batch, taken = [], set()
        order = rng.permutation(classes)
        stalled = 0
        k = 0
        while len(batch) < batch_size and stalled < len(classes):
            c = order[k % len(order)]
            k += 1
            added = 0
            for _ in range(min(2, batch_size - len(batch))):
                i = draw(c, taken)
                if i is None:
                    break
                batch.append(int(i))
                taken.add(i)
                added += 1
            stalled = 0 if added else stalled + 1
        batches.append(batch)
    return batches
