"""MLP classification head on CLS_pat, fine-tuning step and evaluation."""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import as_tensor, cross_entropy, mul, no_grad, reshape
from .errors import ConfigError, DataError, DimensionError
from . import _kernels as K
from .nn import MLP, Module


class ClassifierHead(Module):
    """2d -> d -> num_classes MLP."""

    def __init__(self, rng, d, num_classes):
        if num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
        self.mlp = MLP(rng, 2 * d, d, num_classes)
        self.d = d
        self.num_classes = num_classes

    def __call__(self, cls_pat):
        cls_pat = as_tensor(cls_pat)
        if cls_pat.shape[-1] != 2 * self.d:
            raise DimensionError(f"head expects width {2 * self.d}, got CLS_pat {cls_pat.shape}")
        return self.mlp(cls_pat)


def probabilities(logits):
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    return K.softmax_fwd(np.ascontiguousarray(logits))


def predict(cls_pat, head):
    """Class probabilities softmax(MLP(CLS_pat)); argmax ties go to the lower index."""
    with no_grad():
        logits = head(cls_pat).data
    p = probabilities(logits.reshape(-1, logits.shape[-1]))
    return p.reshape(logits.shape)


def _check_labels(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        raise DataError(f"label(s) {labels[bad].tolist()} outside [0, {num_classes})")
    return labels


def finetune_step(batch, model, optimizer, lr):
    """One accumulated optimiser step over ``batch`` (each pair processed alone).

    Every pair runs through the aggregator on its full patch sequence; losses
    are averaged over the batch before the single AdamW step. Returns the
    mean cross-entropy.
    """
    n = len(batch)
    labels = _check_labels([p.label for p in batch], model.head.num_classes)
    optimizer.zero_grad()
    total = 0.0
    for pair, label in zip(batch, labels):
        cls_pat = model.cls_pat(pair.gene.values, pair.patches.embeddings)
        logits = reshape(model.head(cls_pat), (1, -1))
        loss = cross_entropy(logits, [label])
        mul(loss, 1.0 / n).backward()
        total += loss.item()
    optimizer.step(lr)
    return total / n


@dataclass
class EvalReport:
    accuracy: float
    loss: float
    confusion: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray
    cls_pat: np.ndarray
    patient_ids: list = field(default_factory=list)

    @property
    def total(self):
        return int(self.labels.size)

    @property
    def per_class_total(self):
        return self.confusion.sum(axis=1)

    @property
    def per_class_correct(self):
        return np.diag(self.confusion).copy()

    def as_record(self):
        return {
            "accuracy": self.accuracy,
            "loss": self.loss,
            "n": self.total,
            "per_class_total": self.per_class_total.tolist(),
            "per_class_correct": self.per_class_correct.tolist(),
        }


def evaluate(pairs, model):
    """Deterministic pass over ``pairs`` (in the given order)."""
    if not pairs:
        raise ConfigError("cannot evaluate an empty split")
    C = model.head.num_classes
    labels = _check_labels([p.label for p in pairs], C)
    cls_rows, preds, losses = [], [], []
    with no_grad():
        for pair, label in zip(pairs, labels):
            cls_pat = model.cls_pat(pair.gene.values, pair.patches.embeddings)
            logits = model.head(cls_pat).data
            p = probabilities(logits)[0]
            cls_rows.append(cls_pat.data)
            preds.append(int(np.argmax(p)))
            losses.append(-np.log(max(p[label], 1e-300)))
    preds = np.asarray(preds, dtype=np.int64)
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    return EvalReport(
        accuracy=float((preds == labels).mean()),
        loss=float(np.mean(losses)),
        confusion=confusion,
        predictions=preds,
        labels=labels,
        cls_pat=np.stack(cls_rows),
        patient_ids=[p.patient_id for p in pairs],
    )
