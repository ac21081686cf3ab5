"""Two-layer Nystrom-attention transformer over patch-embedding bags."""

from dataclasses import dataclass

import numpy as np

from .attention import AttentionBlock
from .autodiff import Parameter, as_tensor, broadcast_to, concat, reshape
from .errors import ConfigError, DataError
from .nn import Linear, Module, uniform_init

N_LAYERS = 2


@dataclass
class PatchSequence:
    embeddings: np.ndarray
    patient_id: str = ""

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise DataError(f"{self.patient_id}: patch sequence must be N_p x dim with N_p >= 1, "
                            f"got shape {self.embeddings.shape}")

    @property
    def n_patches(self):
        return self.embeddings.shape[0]


class PatchAggregator(Module):
    def __init__(self, rng, embed_dim=1024, d=32, heads=4, landmarks=16, pinv_iters=6, mlp_ratio=2):
        if landmarks < 1:
            raise ConfigError(f"landmark count must be >= 1, got {landmarks}")
        self.proj = Linear(rng, embed_dim, d)
        self.cls_token = Parameter(uniform_init(rng, (d,), d))
        self.layers = [
            AttentionBlock(rng, d, heads, kind="nystrom", landmarks=landmarks,
                           pinv_iters=pinv_iters, mlp_ratio=mlp_ratio)
            for _ in range(N_LAYERS)
        ]
        self.embed_dim = embed_dim
        self.d = d

    def embed(self, seq):
        """Project (..., T, embed_dim) to (..., T, d) and prepend CLS_img at position 0."""
        x = self.proj(seq)
        lead = x.shape[:-2]
        cls = broadcast_to(reshape(self.cls_token, (1, self.d)), lead + (1, self.d))
        return concat([cls, x], axis=-2)

    def __call__(self, seq, embedded=False):
        """Return ``(cls_img, tokens)``: (..., d) and (..., T, d).

        With ``embedded=True`` the input is already (..., T, d) and the input
        projection is skipped.
        """
        seq = as_tensor(seq.embeddings if isinstance(seq, PatchSequence) else seq)
        if embedded:
            lead = seq.shape[:-2]
            cls = broadcast_to(reshape(self.cls_token, (1, self.d)), lead + (1, self.d))
            x = concat([cls, seq], axis=-2)
        else:
            x = self.embed(seq)
        for layer in self.layers:
            x = layer(x)
        return x[..., 0, :], x[..., 1:, :]


def aggregate(seq, aggregator, embedded=False):
    return aggregator(seq, embedded=embedded)
