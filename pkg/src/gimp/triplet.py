"""Patient tokens, in-batch triplet mining and the margin triplet objective."""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, concat, getitem, mean, relu, sq_l2, sub, add
from .errors import ConfigError, DimensionError


@dataclass
class PatientToken:
    cls_pat: Tensor
    label: int
    patient_id: str = ""


@dataclass
class Triplet:
    anchor: PatientToken
    positive: PatientToken
    negative: PatientToken


def build_cls_pat(cls_img, cls_ge, label=None, patient_id=""):
    """Concatenate image and gene tokens into CLS_pat (image first).

    The gene token is detached: only ``cls_img`` receives gradient. Works on
    single (d,) tokens or batches (..., d). Returns a :class:`PatientToken`
    when ``label`` is given, otherwise the bare tensor.
    """
    cls_img = as_tensor(cls_img)
    ge = cls_ge.data if isinstance(cls_ge, Tensor) else np.asarray(cls_ge, dtype=np.float64)
    if cls_img.shape != ge.shape:
        raise DimensionError(f"CLS_img {cls_img.shape} and CLS_ge {ge.shape} widths differ")
    out = concat([cls_img, Tensor(ge)], axis=-1)
    if label is None:
        return out
    return PatientToken(out, int(label), patient_id)


def triplet_indices(labels):
    """All (anchor, positive, negative) index triples, anchor-major order."""
    labels = np.asarray(labels)
    out = []
    n = len(labels)
    for a in range(n):
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            for q in range(n):
                if labels[q] != labels[a]:
                    out.append((a, p, q))
    if not out:
        return np.zeros((0, 3), dtype=np.int64)
    return np.asarray(out, dtype=np.int64)


def hard_triplet_indices(labels, embeddings):
    """One triplet per anchor: farthest positive and nearest negative."""
    labels = np.asarray(labels)
    x = np.asarray(embeddings, dtype=np.float64)
    dist = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    out = []
    for a in range(len(labels)):
        pos = [p for p in range(len(labels)) if p != a and labels[p] == labels[a]]
        neg = [q for q in range(len(labels)) if labels[q] != labels[a]]
        if pos and neg:
            p = pos[int(np.argmax(dist[a, pos]))]
            q = neg[int(np.argmin(dist[a, neg]))]
            out.append((a, p, q))
    if not out:
        return np.zeros((0, 3), dtype=np.int64)
    return np.asarray(out, dtype=np.int64)


def mine_triplets(batch, mode="all"):
    """Enumerate valid triplets over a list of :class:`PatientToken`."""
    labels = [t.label for t in batch]
    if mode == "all":
        idx = triplet_indices(labels)
    elif mode == "hard":
        idx = hard_triplet_indices(labels, np.stack([t.cls_pat.data for t in batch]))
    else:
        raise ConfigError(f"unknown mining mode {mode!r}")
    return [Triplet(batch[a], batch[p], batch[q]) for a, p, q in idx]


def _hinge(x, xp, xn, delta):
    d_pos = sq_l2(sub(x, xp), axis=-1)
    d_neg = sq_l2(sub(x, xn), axis=-1)
    return relu(add(sub(d_pos, d_neg), delta))


def triplet_loss(t, delta=0.8):
    """max(||x - x+||^2 + delta - ||x - x-||^2, 0) for one triplet."""
    if delta < 0:
        raise ConfigError(f"triplet margin must be >= 0, got {delta}")
    return _hinge(t.anchor.cls_pat, t.positive.cls_pat, t.negative.cls_pat, delta)


def batch_triplet_loss(cls_pat, labels, delta=0.8, mode="all"):
    """Mean hinge over the mined triplets of a (B, 2d) batch; 0 when none exist."""
    if delta < 0:
        raise ConfigError(f"triplet margin must be >= 0, got {delta}")
    cls_pat = as_tensor(cls_pat)
    if mode == "all":
        idx = triplet_indices(labels)
    elif mode == "hard":
        idx = hard_triplet_indices(labels, cls_pat.data)
    else:
        raise ConfigError(f"unknown mining mode {mode!r}")
    if len(idx) == 0:
        return Tensor(0.0), 0
    x = getitem(cls_pat, idx[:, 0])
    xp = getitem(cls_pat, idx[:, 1])
    xn = getitem(cls_pat, idx[:, 2])
    return mean(_hinge(x, xp, xn, delta)), len(idx)
