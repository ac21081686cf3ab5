"""Masked patch modeling: window sampling, masking, decoding and the L1 objective."""

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, as_tensor, masked_abs_sum, reshape, where
from .errors import ConfigError, DimensionError
from .nn import MLP, Module, uniform_init


@dataclass
class MaskedWindow:
    window: np.ndarray
    masked_indices: np.ndarray
    model_input: np.ndarray
    window_start: int = 0

    @property
    def length(self):
        return self.window.shape[0]

    @property
    def mask(self):
        m = np.zeros(self.length, dtype=bool)
        m[self.masked_indices] = True
        return m


def sample_window(seq, L, rng):
    """Pick a contiguous window of ``L`` patches.

    Long sequences get a uniformly drawn start in ``[0, N_p - L]``; short ones
    are repeated cyclically and truncated to ``L`` with start 0.
    Returns ``(window, window_start)``.
    """
    if L < 2:
        raise ConfigError(f"window length must be >= 2, got {L}")
    emb = seq.embeddings if hasattr(seq, "embeddings") else np.asarray(seq)
    n = emb.shape[0]
    if n >= L:
        start = int(rng.integers(0, n - L + 1))
        return emb[start:start + L], start
    reps = -(-L // n)
    return np.concatenate([emb] * reps, axis=0)[:L], 0


def mask_count(L, ratio):
    # the epsilon keeps decimal ratios such as 0.29 * 100 from flooring to 28
    return int(math.floor(ratio * L + 1e-9))


def apply_mask(window, ratio, rng, mask_embedding, window_start=0):
    """Mask ``floor(ratio * L)`` distinct rows drawn uniformly without replacement."""
    if not (0.0 < ratio < 1.0):
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    window = np.asarray(window, dtype=np.float64)
    L = window.shape[0]
    idx = np.sort(rng.choice(L, size=mask_count(L, ratio), replace=False))
    emb = mask_embedding.data if isinstance(mask_embedding, Tensor) else np.asarray(mask_embedding)
    if emb.shape != window.shape[1:]:
        raise DimensionError(f"mask embedding {emb.shape} does not match window rows {window.shape[1:]}")
    model_input = window.copy()
    model_input[idx] = emb
    return MaskedWindow(window, idx, model_input, window_start)


class Decoder(Module):
    """Per-token MLP d -> d -> embed_dim plus the learned mask embedding."""

    def __init__(self, rng, d=32, embed_dim=1024):
        self.mlp = MLP(rng, d, d, embed_dim)
        self.mask_embedding = Parameter(uniform_init(rng, (embed_dim,), embed_dim))
        self.embed_dim = embed_dim

    def __call__(self, tokens):
        return self.mlp(tokens)


def masked_input(windows, masks, mask_embedding):
    """Differentiable model input: masked rows take ``mask_embedding``, others copy the window."""
    windows = np.asarray(windows, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    return where(masks[..., None], mask_embedding, windows)


def reconstruct(masked, aggregator, decoder):
    """Reconstruct every window row from the masked input; returns (L, D) or (B, L, D)."""
    single = isinstance(masked, MaskedWindow)
    batch = [masked] if single else list(masked)
    windows = np.stack([w.window for w in batch])
    masks = np.stack([w.mask for w in batch])
    _, tokens = aggregator(masked_input(windows, masks, decoder.mask_embedding))
    rec = decoder(tokens)
    return rec[0] if single else rec


def mpm_loss(window, H_rec, M):
    """Sum over masked rows of the L1 distance between targets and reconstructions."""
    window = np.asarray(window, dtype=np.float64)
    H_rec = as_tensor(H_rec)
    if H_rec.shape != window.shape:
        raise DimensionError(f"reconstruction {H_rec.shape} vs window {window.shape}")
    mask = np.zeros(window.shape[0], dtype=bool)
    mask[np.asarray(M, dtype=np.int64)] = True
    L, D = window.shape
    out = masked_abs_sum(reshape(H_rec, (1, L, D)), window[None], mask[None])
    return reshape(out, ())
