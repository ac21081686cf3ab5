"""Named finite-difference checks over every differentiable operation and module.

Primitives are checked on random inputs in [-1, 1] against a 1e-6 tolerance.
Composite modules and the full pre-training objective use 1e-4, because
central differences through deep compositions carry more truncation error.
Inputs to kinked functions (abs, relu, max) are kept away from their kinks.
"""

import numpy as np

from . import autodiff as ad
from .aggregator import PatchAggregator
from .attention import AttentionBlock, multi_head_attention_exact, nystrom_attention, pinv_iterative
from .autodiff import Parameter, grad_check
from .config import TrainConfig
from .gene_encoder import GeneEncoder, GroupLayout
from .head import ClassifierHead
from .mpm import Decoder, apply_mask
from .nn import Linear
from .triplet import batch_triplet_loss

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4
EPS = 1e-5


def _p(rng, *shape, away=0.0):
    x = rng.uniform(-1.0, 1.0, shape)
    if away:
        x = np.where(np.abs(x) < away, x + np.copysign(away, x), x)
    return Parameter(x)


def _weighted(rng, shape):
    """Fixed random weights so that sum(w * out) exercises every output entry."""
    return rng.uniform(-1.0, 1.0, shape)


def _out_shape(op, x, **kw):
    with ad.no_grad():
        return op(ad.Tensor(x.data), **kw).shape


def _unary(op, away=0.0, shape=(3, 4)):
    def build(rng):
        x = _p(rng, *shape, away=away)
        w = _weighted(rng, _out_shape(op, x))
        return lambda: ad.tsum(ad.mul(op(x), w)), {"x": x}
    return build


def _binary(op, shape_a=(3, 4), shape_b=(3, 4), away_b=0.0):
    def build(rng):
        a, b = _p(rng, *shape_a), _p(rng, *shape_b, away=away_b)
        out_shape = np.broadcast_shapes(shape_a, shape_b)
        w = _weighted(rng, out_shape)
        return lambda: ad.tsum(ad.mul(op(a, b), w)), {"a": a, "b": b}
    return build


def _matmul(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    w = _weighted(rng, (2, 3, 5))
    return lambda: ad.tsum(ad.mul(ad.matmul(a, b), w)), {"a": a, "b": b}


def _linear(rng):
    x, W, bias = _p(rng, 3, 4), _p(rng, 4, 2), _p(rng, 2)
    return lambda: ad.tsum(ad.linear(x, W, bias)), {"x": x, "W": W, "bias": bias}


def _where(rng):
    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    cond = rng.random((3, 4)) < 0.5
    w = _weighted(rng, (3, 4))
    return lambda: ad.tsum(ad.mul(ad.where(cond, a, b), w)), {"a": a, "b": b}


def _getitem(rng):
    x = _p(rng, 5, 3)
    idx = np.array([0, 2, 2, 4])
    w = _weighted(rng, (4, 2))
    return lambda: ad.tsum(ad.mul(ad.getitem(x, (idx, slice(0, 2))), w)), {"x": x}


def _concat(rng):
    a, b = _p(rng, 2, 3), _p(rng, 2, 5)
    w = _weighted(rng, (2, 8))
    return lambda: ad.tsum(ad.mul(ad.concat([a, b], axis=1), w)), {"a": a, "b": b}


def _reduction(op, **kw):
    def build(rng):
        x = _p(rng, 3, 4, 5, away=0.05)
        w = _weighted(rng, _out_shape(op, x, **kw))
        return lambda: ad.tsum(ad.mul(op(x, **kw), w)), {"x": x}
    return build


def _layer_norm(rng):
    x, g, b = _p(rng, 4, 6), _p(rng, 6), _p(rng, 6)
    w = _weighted(rng, (4, 6))
    return lambda: ad.tsum(ad.mul(ad.layer_norm(x, g, b), w)), {"x": x, "gamma": g, "beta": b}


def _segment_mean(rng):
    x = _p(rng, 2, 11, 3)
    w = _weighted(rng, (2, 4, 3))
    return lambda: ad.tsum(ad.mul(ad.segment_mean(x, 4), w)), {"x": x}


def _masked_abs_sum(rng):
    pred = _p(rng, 3, 5, 4)
    target = pred.data + np.where(rng.random((3, 5, 4)) < 0.5, -1.0, 1.0) * rng.uniform(0.05, 1.0, (3, 5, 4))
    mask = rng.random((3, 5)) < 0.5
    mask[:, 0] = True
    w = _weighted(rng, (3,))
    return lambda: ad.tsum(ad.mul(ad.masked_abs_sum(pred, target, mask), w)), {"pred": pred}


def _cross_entropy(rng):
    logits = _p(rng, 6, 3)
    labels = rng.integers(0, 3, 6)
    return lambda: ad.cross_entropy(logits, labels), {"logits": logits}


def _mha_exact(rng):
    Q, K, V = _p(rng, 6, 4), _p(rng, 6, 4), _p(rng, 6, 4)
    w = _weighted(rng, (6, 4))
    return lambda: ad.tsum(ad.mul(multi_head_attention_exact(Q, K, V, 2), w)), {"Q": Q, "K": K, "V": V}


def _pinv(rng):
    X = _p(rng, 5, 5)
    w = _weighted(rng, (5, 5))
    return lambda: ad.tsum(ad.mul(pinv_iterative(ad.softmax_rows(X), 6), w)), {"X": X}


def _nystrom(rng):
    Q, K, V = _p(rng, 10, 4), _p(rng, 10, 4), _p(rng, 10, 4)
    w = _weighted(rng, (10, 4))
    return (lambda: ad.tsum(ad.mul(nystrom_attention(Q, K, V, 3, heads=2, pinv_iters=6), w)),
            {"Q": Q, "K": K, "V": V})


def _module(make, inputs):
    def build(rng):
        mod = make(rng)
        xs = [np.asarray(f(rng)) for f in inputs]
        out = mod(*xs)
        outs = out if isinstance(out, tuple) else (out,)
        ws = [_weighted(rng, o.shape) for o in outs]

        def f():
            res = mod(*xs)
            res = res if isinstance(res, tuple) else (res,)
            total = ad.Tensor(0.0)
            for r, w in zip(res, ws):
                total = ad.add(total, ad.tsum(ad.mul(r, w)))
            return total
        return f, dict(mod.named_parameters())
    return build


def _block(kind):
    return _module(lambda r: AttentionBlock(r, 8, 2, kind=kind, landmarks=3, pinv_iters=6),
                   [lambda r: r.uniform(-1, 1, (9, 8))])


def _triplet(rng):
    x = _p(rng, 6, 4)
    labels = np.array([0, 0, 0, 1, 1, 1])
    return lambda: batch_triplet_loss(x, labels, delta=2.0)[0], {"cls_pat": x}


def tiny_config():
    """The smallest configuration that exercises every pre-training component."""
    return TrainConfig(n_genes=16, embed_dim=12, d=8, heads=2, gene_heads=2, landmarks=4,
                       n_fragments=8, n_groups=2, window_len=16, batch_size=4)


def pretrain_objective_case(rng, cfg=None):
    """Full L_pre = L_tri + L_rec on a batch of 4 random windows (2 per class)."""
    from .model import GiMPModel
    from .training import pretrain_groups, pretrain_objective

    cfg = cfg or tiny_config()
    model = GiMPModel.build(cfg, seed=int(rng.integers(1 << 31)))
    model.freeze("gene_encoder")
    B, L = cfg.batch_size, cfg.window_len
    windows = rng.uniform(-1.0, 1.0, (B, L, cfg.embed_dim))
    masks = np.stack([apply_mask(w, cfg.mask_ratio, rng, model.decoder.mask_embedding).mask for w in windows])
    cls_ge = model.gene_tokens(rng.standard_normal((B, model.layout.n_genes)))
    labels = np.arange(B) % 2

    def f():
        return pretrain_objective(model, windows, masks, cls_ge, labels, cfg)[0]
    return f, dict(model.trainable(pretrain_groups(cfg)))


PRIMITIVES = {
    "add": _binary(ad.add, (3, 4), (4,)),
    "sub": _binary(ad.sub, (3, 4), (3, 1)),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, away_b=0.3),
    "neg": _unary(ad.neg),
    "square": _unary(ad.square),
    "absolute": _unary(ad.absolute, away=0.05),
    "relu": _unary(ad.relu, away=0.05),
    "where": _where,
    "matmul": _matmul,
    "linear": _linear,
    "transpose": _unary(lambda x: ad.transpose(x, (1, 0))),
    "reshape": _unary(lambda x: ad.reshape(x, (2, 6))),
    "broadcast_to": _unary(lambda x: ad.broadcast_to(x, (2, 3, 4))),
    "getitem": _getitem,
    "concat": _concat,
    "sum": _reduction(ad.tsum, axis=1),
    "mean": _reduction(ad.mean, axis=2),
    "max": _reduction(ad.tmax, axis=1),
    "l1": _reduction(ad.l1, axis=-1),
    "sq_l2": _reduction(ad.sq_l2, axis=0),
    "softmax": _unary(ad.softmax_rows, shape=(5, 7)),
    "layer_norm": _layer_norm,
    "segment_mean": _segment_mean,
    "masked_abs_sum": _masked_abs_sum,
    "cross_entropy": _cross_entropy,
}

COMPOSITES = {
    "mha_exact": _mha_exact,
    "pinv_iterative": _pinv,
    "nystrom_attention": _nystrom,
    "linear_layer": _module(lambda r: Linear(r, 5, 3), [lambda r: r.uniform(-1, 1, (4, 5))]),
    "block_exact": _block("exact"),
    "block_nystrom": _block("nystrom"),
    "gene_encoder": _module(lambda r: GeneEncoder(r, GroupLayout(16, 8, 2, 8), heads=2),
                            [lambda r: r.standard_normal((2, 16))]),
    "patch_aggregator": _module(lambda r: PatchAggregator(r, 6, 8, 2, landmarks=3),
                                [lambda r: r.uniform(-1, 1, (9, 6))]),
    "decoder": _module(lambda r: Decoder(r, 8, 6), [lambda r: r.uniform(-1, 1, (5, 8))]),
    "classifier_head": _module(lambda r: ClassifierHead(r, 4, 3), [lambda r: r.uniform(-1, 1, (2, 8))]),
    "triplet_loss": _triplet,
    "pretrain_objective": pretrain_objective_case,
}


def run_suite(seed=0, names=None, max_coords=8):
    """Run the selected checks; returns ``[(name, GradCheckReport), ...]``."""
    results = []
    for group, tol in ((PRIMITIVES, PRIMITIVE_TOL), (COMPOSITES, COMPOSITE_TOL)):
        for name, build in group.items():
            if names is not None and name not in names:
                continue
            rng = np.random.default_rng([seed, len(results)])
            f, params = build(rng)
            rep = grad_check(f, params, eps=EPS, tol=tol,
                             max_coords=None if group is PRIMITIVES else max_coords, rng=rng)
            results.append((name, rep))
    return results
