"""Grouped multi-head self-attention encoder for gene-expression vectors.

The expression vector is cut into fixed-length fragments, each fragment is
projected to the hidden width, fragments are gathered into groups that each
carry a learnable group token, one attention layer runs inside every group
(weights shared across groups), and a second layer runs over the group tokens
plus a classification token.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .attention import AttentionBlock
from .autodiff import Parameter, as_tensor, broadcast_to, concat, cross_entropy, no_grad, reshape
from .errors import ConfigError, DimensionError
from .nn import AdamW, Linear, Module, cosine_lr, uniform_init

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroupLayout:
    n_genes: int
    n_fragments: int
    n_groups: int
    d: int

    def __post_init__(self):
        if min(self.n_genes, self.n_fragments, self.n_groups, self.d) < 1:
            raise ConfigError(f"layout extents must be positive: {self}")
        if self.n_genes % self.n_fragments:
            raise ConfigError(f"N_ge={self.n_genes} is not divisible by N_f={self.n_fragments}")
        if self.n_fragments % self.n_groups:
            raise ConfigError(f"N_f={self.n_fragments} is not divisible by N_gr={self.n_groups}")

    @classmethod
    def padded(cls, n_raw, n_fragments, n_groups, d):
        """Layout whose gene count is ``n_raw`` rounded up to a multiple of ``n_fragments``."""
        n = -(-n_raw // n_fragments) * n_fragments
        return cls(n, n_fragments, n_groups, d)

    @property
    def fragment_len(self):
        return self.n_genes // self.n_fragments

    @property
    def fragments_per_group(self):
        return self.n_fragments // self.n_groups

    @property
    def tokens_per_group(self):
        return self.fragments_per_group + 1


@dataclass
class GeneVector:
    values: np.ndarray
    patient_id: str = ""


def fragment(g, layout):
    """Split (..., N_ge) expression values into (..., N_f, fragment_len), order-preserving."""
    values = g.values if isinstance(g, GeneVector) else g
    t = as_tensor(values)
    if t.shape[-1] != layout.n_genes:
        raise DimensionError(f"gene vector has {t.shape[-1]} values, layout expects {layout.n_genes}")
    return reshape(t, t.shape[:-1] + (layout.n_fragments, layout.fragment_len))


class GeneEncoder(Module):
    def __init__(self, rng, layout, heads=4, mlp_ratio=2):
        d = layout.d
        self.fragment_proj = Linear(rng, layout.fragment_len, d)
        self.group_tokens = Parameter(uniform_init(rng, (layout.n_groups, d), d))
        self.intra = AttentionBlock(rng, d, heads, kind="exact", mlp_ratio=mlp_ratio)
        self.cls_token = Parameter(uniform_init(rng, (d,), d))
        self.inter = AttentionBlock(rng, d, heads, kind="exact", mlp_ratio=mlp_ratio)
        self.layout = layout
        self.frozen = False

    def freeze(self):
        self.frozen = True
        self.set_requires_grad(False)

    def unfreeze(self):
        self.frozen = False
        self.set_requires_grad(True)

    def project_fragments(self, g):
        return self.fragment_proj(fragment(g, self.layout))

    def intra_group(self, g):
        """Group tokens after the intra-group layer, shape (..., N_gr, d)."""
        lay = self.layout
        h = self.project_fragments(g)
        lead = h.shape[:-2]
        groups = reshape(h, lead + (lay.n_groups, lay.fragments_per_group, lay.d))
        tok = broadcast_to(reshape(self.group_tokens, (lay.n_groups, 1, lay.d)),
                           lead + (lay.n_groups, 1, lay.d))
        x = self.intra(concat([tok, groups], axis=-2))
        return reshape(x[..., 0:1, :], lead + (lay.n_groups, lay.d))

    def __call__(self, g):
        """Return ``(cls_ge, group_tokens)`` with shapes (..., d) and (..., N_gr, d)."""
        gt = self.intra_group(g)
        lead = gt.shape[:-2]
        cls = broadcast_to(reshape(self.cls_token, (1, self.layout.d)), lead + (1, self.layout.d))
        x = self.inter(concat([cls, gt], axis=-2))
        return x[..., 0, :], x[..., 1:, :]


def encode_genes(g, encoder):
    return encoder(g)


@dataclass
class GenePretrainResult:
    encoder: GeneEncoder
    head: Linear
    accuracy: list


def pretrain_gene_supervised(genes, labels, encoder, num_classes, epochs, lr=1e-4,
                             batch_size=8, weight_decay=0.01, rng=None, min_lr=1e-6):
    """Fit the encoder plus a linear head on CLS_ge with cross-entropy.

    ``genes`` is (N, N_ge) normalised expression, ``labels`` int class ids.
    Returns the trained encoder, the head and per-epoch training accuracy.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ConfigError("supervised gene pre-training needs at least two classes")
    genes = np.asarray(genes, dtype=np.float64)
    rng = np.random.default_rng(0) if rng is None else rng
    head = Linear(rng, encoder.layout.d, num_classes)
    named = [(f"encoder.{n}", p) for n, p in encoder.named_parameters()]
    named += [(f"head.{n}", p) for n, p in head.named_parameters()]
    opt = AdamW(named, lr=lr, weight_decay=weight_decay)
    history = []
    n = len(labels)
    for epoch in range(epochs):
        lr_e = cosine_lr(epoch, epochs, lr, min_lr)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            cls, _ = encoder(genes[idx])
            loss = cross_entropy(head(cls), labels[idx])
            loss.backward()
            opt.step(lr_e)
        acc = gene_accuracy(encoder, head, genes, labels)
        history.append(acc)
        log.info("gene pretrain epoch %d lr %.2e train_acc %.4f", epoch, lr_e, acc)
    return GenePretrainResult(encoder, head, history)


def gene_accuracy(encoder, head, genes, labels, batch_size=64):
    correct = 0
    with no_grad():
        for start in range(0, len(labels), batch_size):
            cls, _ = encoder(genes[start:start + batch_size])
            pred = np.argmax(head(cls).data, axis=-1)
            correct += int((pred == labels[start:start + batch_size]).sum())
    return correct / len(labels)

