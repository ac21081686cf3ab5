"""Exact and Nystrom-approximated multi-head attention.

All functions accept arbitrary leading batch dimensions: tokens live on
axis -2 and features on axis -1.
"""

import logging
import math

import numpy as np

from .autodiff import (
    absolute,
    add,
    as_tensor,
    div,
    matmul,
    mul,
    reshape,
    segment_mean,
    softmax,
    sub,
    swap_last,
    tmax,
    transpose,
    tsum,
)
from .errors import ConfigError, DimensionError, NumericError
from .nn import MLP, LayerNorm, Linear, Module

log = logging.getLogger(__name__)


def split_heads(x, heads):
    *lead, T, d = x.shape
    if d % heads:
        raise ConfigError(f"feature width {d} is not divisible by {heads} heads")
    x = reshape(x, tuple(lead) + (T, heads, d // heads))
    n = x.ndim
    return transpose(x, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))


def merge_heads(x):
    n = x.ndim
    x = transpose(x, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))
    *lead, T, h, dh = x.shape
    return reshape(x, tuple(lead) + (T, h * dh))


def _check_qkv(Q, K, V):
    if Q.shape[-1] != K.shape[-1] or K.shape[:-1] != V.shape[:-1] or Q.shape[:-2] != K.shape[:-2]:
        raise DimensionError(f"attention operands disagree: Q{Q.shape} K{K.shape} V{V.shape}")


def multi_head_attention_exact(Q, K, V, heads):
    """softmax(Q_h K_h^T / sqrt(d_h)) V_h per head, heads concatenated."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    _check_qkv(Q, K, V)
    q, k, v = split_heads(Q, heads), split_heads(K, heads), split_heads(V, heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    attn = softmax(mul(matmul(q, swap_last(k)), scale))
    return merge_heads(matmul(attn, v))


def landmarks(X, m):
    """Segment means of ``m`` contiguous token groups (first T % m groups one longer)."""
    X = as_tensor(X)
    T = X.shape[-2]
    if m < 1:
        raise ConfigError(f"landmark count must be >= 1, got {m}")
    if m > T:
        log.warning("landmark count %d exceeds sequence length %d; clamping", m, T)
        m = T
    return segment_mean(X, m)


def pinv_iterative(A, iters):
    """Newton-Schulz approximation of the Moore-Penrose pseudo-inverse.

    Starts from ``A^T / (||A||_1 ||A||_inf)`` and iterates
    ``Z <- 2Z - Z A Z``. Batched over leading dimensions and differentiable,
    including through the initial scaling.
    """
    A = as_tensor(A)
    if A.shape[-1] != A.shape[-2]:
        raise DimensionError(f"pinv_iterative expects square matrices, got {A.shape}")
    if not np.isfinite(A.data).all():
        raise NumericError("pinv_iterative: input is not finite")
    absA = absolute(A)
    norm1 = tmax(tsum(absA, axis=-2, keepdims=True), axis=-1, keepdims=True)
    norminf = tmax(tsum(absA, axis=-1, keepdims=True), axis=-2, keepdims=True)
    Z = div(swap_last(A), mul(norm1, norminf))
    for k in range(iters):
        Z = sub(mul(Z, 2.0), matmul(Z, matmul(A, Z)))
        if not np.isfinite(Z.data).all():
            raise NumericError(f"pinv_iterative: non-finite value at iteration {k + 1}")
    return Z


def nystrom_attention(Q, K, V, m, heads=1, pinv_iters=6):
    """Nystrom approximation of softmax attention with ``m`` segment-mean landmarks.

    Per head:  softmax(Q Kl^T/s) . pinv(softmax(Ql Kl^T/s)) . softmax(Ql K^T/s) . V
    with s = sqrt(d_h).
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    _check_qkv(Q, K, V)
    q, k, v = split_heads(Q, heads), split_heads(K, heads), split_heads(V, heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    q_l = landmarks(q, m)
    k_l = landmarks(k, m)
    kernel1 = softmax(mul(matmul(q, swap_last(k_l)), scale))
    kernel2 = softmax(mul(matmul(q_l, swap_last(k_l)), scale))
    kernel3 = softmax(mul(matmul(q_l, swap_last(k)), scale))
    mid = matmul(pinv_iterative(kernel2, pinv_iters), matmul(kernel3, v))
    return merge_heads(matmul(kernel1, mid))


class AttentionBlock(Module):
    """Post-norm transformer layer: attention + residual + LN, MLP + residual + LN.

    ``kind`` selects exact softmax attention or the Nystrom approximation.
    """

    def __init__(self, rng, d, heads, kind="exact", landmarks=16, pinv_iters=6, mlp_ratio=2):
        if d % heads:
            raise ConfigError(f"width {d} is not divisible by {heads} heads")
        if kind not in ("exact", "nystrom"):
            raise ConfigError(f"unknown attention kind {kind!r}")
        self.w_q = Linear(rng, d, d, bias=False)
        self.w_k = Linear(rng, d, d, bias=False)
        self.w_v = Linear(rng, d, d, bias=False)
        self.w_o = Linear(rng, d, d)
        self.norm1 = LayerNorm(d)
        self.mlp = MLP(rng, d, mlp_ratio * d, d)
        self.norm2 = LayerNorm(d)
        self.heads = heads
        self.kind = kind
        self.landmarks = landmarks
        self.pinv_iters = pinv_iters

    def attend(self, x):
        q, k, v = self.w_q(x), self.w_k(x), self.w_v(x)
        if self.kind == "exact":
            a = multi_head_attention_exact(q, k, v, self.heads)
        else:
            a = nystrom_attention(q, k, v, self.landmarks, self.heads, self.pinv_iters)
        return self.w_o(a)

    def __call__(self, x):
        x = self.norm1(add(x, self.attend(x)))
        return self.norm2(add(x, self.mlp(x)))

