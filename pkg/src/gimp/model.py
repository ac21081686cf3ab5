"""Full model state: four parameter groups with per-group freeze flags."""

import numpy as np

from .aggregator import PatchAggregator
from .autodiff import no_grad
from .config import rng_stream
from .gene_encoder import GeneEncoder, GroupLayout
from .head import ClassifierHead
from .mpm import Decoder
from .triplet import build_cls_pat

GROUPS = ("gene_encoder", "aggregator", "decoder", "head")


def layout_for(cfg):
    return GroupLayout.padded(cfg.n_genes, cfg.n_fragments, cfg.n_groups, cfg.d)


class GiMPModel:
    def __init__(self, gene_encoder, aggregator, decoder, head):
        self.gene_encoder = gene_encoder
        self.aggregator = aggregator
        self.decoder = decoder
        self.head = head
        self.frozen = {g: False for g in GROUPS}

    @classmethod
    def build(cls, cfg, seed=None):
        """Initialise every group from the ``init`` substream (one stream per group)."""
        seed = cfg.seed if seed is None else seed
        gene = GeneEncoder(rng_stream(seed, "init", 0), layout_for(cfg), cfg.gene_heads, cfg.mlp_ratio)
        agg = PatchAggregator(rng_stream(seed, "init", 1), cfg.embed_dim, cfg.d, cfg.heads,
                              cfg.landmarks, cfg.pinv_iters, cfg.mlp_ratio)
        dec = Decoder(rng_stream(seed, "init", 2), cfg.d, cfg.embed_dim)
        head = ClassifierHead(rng_stream(seed, "init", 3), cfg.d, cfg.num_classes)
        return cls(gene, agg, dec, head)

    @property
    def layout(self):
        return self.gene_encoder.layout

    def group(self, name):
        if name not in GROUPS:
            raise KeyError(name)
        return getattr(self, name)

    def freeze(self, name, flag=True):
        self.frozen[name] = flag
        self.group(name).set_requires_grad(not flag)
        if name == "gene_encoder":
            self.gene_encoder.frozen = flag

    def named_parameters(self, groups=GROUPS):
        for g in groups:
            for n, p in self.group(g).named_parameters():
                yield f"{g}.{n}", p

    def trainable(self, groups=GROUPS):
        return [(n, p) for n, p in self.named_parameters([g for g in groups if not self.frozen[g]])]

    def state_dict(self):
        return {g: self.group(g).state_dict() for g in GROUPS}

    def load_state_dict(self, state):
        for g in GROUPS:
            self.group(g).load_state_dict(state[g])

    def gene_tokens(self, genes):
        """CLS_ge for (…, N_ge) genes, detached from the graph."""
        with no_grad():
            cls, _ = self.gene_encoder(np.asarray(genes, dtype=np.float64))
        return cls.data

    def cls_pat(self, genes, patches):
        """CLS_pat = [CLS_img, CLS_ge] for one patient's full patch sequence."""
        cls_img, _ = self.aggregator(patches)
        return build_cls_pat(cls_img, self.gene_tokens(genes))
