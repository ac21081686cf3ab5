"""Tape-based reverse-mode differentiation over dense float64 numpy arrays.

A :class:`Tensor` wraps an ndarray. Operations on tensors that require
gradients record their parents and a backward closure; :class:`Tape` orders
the recorded graph topologically and replays it in reverse. There is no
global tape, so independent models can be differentiated on separate threads.
Graph recording can be suspended per thread with :func:`no_grad`.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import ConfigError, DimensionError, NumericError

_local = threading.local()


def is_grad_enabled():
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, op="leaf"):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            or data.dtype != np.float64 else data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_fn = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def mT(self):
        return swap_last(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self, grad=None):
        Tape.from_root(self).backward(grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A leaf tensor that is optimised; its grad buffer always exists."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.grad = np.zeros_like(self.data)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    out = Tensor(data, op=op)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tape:
    """Topologically ordered record of the operations that produced a root."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def backward(self, grad=None):
        """Propagate ``grad`` (ones by default) from the root to every leaf.

        Leaf gradients accumulate into ``.grad``; intermediate gradients are
        dropped as soon as their node has been processed. Returns the number
        of nodes visited.
        """
        if not self.nodes:
            return 0
        root = self.nodes[-1]
        if not root.requires_grad:
            return 0
        seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if seed.shape != root.shape:
            raise DimensionError(f"seed gradient shape {seed.shape} != root shape {root.shape}")
        pending = {id(root): seed}
        visited = 0
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            visited += 1
            if node.backward_fn is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=np.float64)
                else:
                    node.grad += g
                continue
            for p, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        return visited


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a):
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def absolute(a):
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (np.sign(a.data) * g,), "abs")


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0

    return _node(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def where(cond, a, b):
    """Select ``a`` where ``cond`` holds, else ``b`` (bitwise copy of values)."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(cond, a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.where(cond, g, 0.0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw, "where")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, W, bias=None):
    """``x @ W (+ bias)`` for x of shape (..., a) and W of shape (a, b)."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.ndim < 1 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} incompatible with weight {W.shape}")
    if x.ndim == 1:
        out = reshape(matmul(reshape(x, (1, -1)), W), (W.shape[1],))
    else:
        out = matmul(x, W)
    return out if bias is None else add(out, bias)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(a):
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "swap")


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a, shape):
    a = as_tensor(a)
    return _node(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def _fancy(idx):
    if isinstance(idx, tuple):
        return any(isinstance(i, (list, np.ndarray)) for i in idx)
    return isinstance(idx, (list, np.ndarray))


def getitem(a, idx):
    a = as_tensor(a)
    fancy = _fancy(idx)

    def bw(g):
        out = np.zeros_like(a.data)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _node(np.array(a.data[idx]), (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, a.shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, a.shape, axis, keepdims) / n,), "mean")


def tmax(a, axis, keepdims=False):
    """Maximum over one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    arg = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, arg, axis=axis)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, arg, gk, axis=axis)
        return (grad,)

    return _node(out if keepdims else np.squeeze(out, axis), (a,), bw, "max")


def l1(a, axis=None, keepdims=False):
    return tsum(absolute(a), axis, keepdims)


def sq_l2(a, axis=None, keepdims=False):
    return tsum(square(a), axis, keepdims)


# ---------------------------------------------------------------------------
# fused kernels
# ---------------------------------------------------------------------------


def softmax(x):
    """Softmax over the last axis with per-row max subtraction."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    flat = np.ascontiguousarray(x.data.reshape(-1, x.shape[-1]))
    y = K.softmax_fwd(flat)

    def bw(g):
        gf = np.ascontiguousarray(g.reshape(y.shape))
        return (K.softmax_bwd(y, gf).reshape(x.shape),)

    return _node(y.reshape(x.shape), (x,), bw, "softmax")


def softmax_rows(x):
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x)


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm: features {n} vs gamma {gamma.shape}, beta {beta.shape}")
    flat = np.ascontiguousarray(x.data.reshape(-1, n))
    xhat, rstd = K.layernorm_fwd(flat, eps)
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def bw(g):
        gf = g.reshape(-1, n)
        gx = None
        if x.requires_grad:
            gx = K.layernorm_bwd(np.ascontiguousarray(gf * gamma.data), xhat, rstd).reshape(x.shape)
        gg = (gf * xhat).sum(axis=0) if gamma.requires_grad else None
        gb = gf.sum(axis=0) if beta.requires_grad else None
        return gx, gg, gb

    return _node(out, (x, gamma, beta), bw, "layer_norm")


def segment_mean(x, m):
    """Means of ``m`` contiguous, near-equal segments along axis -2."""
    x = as_tensor(x)
    T, D = x.shape[-2], x.shape[-1]
    lead = x.shape[:-2]
    bounds = K.segment_bounds(T, m)
    flat = np.ascontiguousarray(x.data.reshape(-1, T, D))
    out = K.segment_mean_fwd(flat, bounds).reshape(lead + (m, D))

    def bw(g):
        gf = np.ascontiguousarray(g.reshape(-1, m, D))
        return (K.segment_mean_bwd(gf, bounds).reshape(x.shape),)

    return _node(out, (x,), bw, "segment_mean")


def masked_abs_sum(pred, target, mask):
    """Per-sample ``sum_{t in mask} |target_t - pred_t|_1`` for (B, L, D) inputs."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if pred.shape != target.shape or mask.shape != pred.shape[:2] or pred.ndim != 3:
        raise DimensionError(
            f"masked_abs_sum: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    diff = np.ascontiguousarray(pred.data - target)
    out = K.masked_abs_sum(diff, mask)

    def bw(g):
        return (K.masked_abs_grad(diff, mask, np.ascontiguousarray(g)),)

    return _node(out, (pred,), bw, "masked_abs_sum")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = labels.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _node(np.array(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)
    coords: dict = field(default_factory=dict)
    tol: float = 0.0

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return all(e <= self.tol for e in self.errors.values())

    def lines(self):
        for name, err in self.errors.items():
            status = "ok" if err <= self.tol else "FAIL"
            yield f"{name:<40s} coords={self.coords[name]:<6d} rel_err={err:.3e} {status}"


def _scalar(f):
    out = f()
    val = out.data if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)
    if val.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {val.shape}")
    if not np.isfinite(val).all():
        raise NumericError(f"grad_check: function value is not finite ({float(val)})")
    return out, float(val)


def relative_error(analytic, numeric):
    """Max-norm relative error, falling back to absolute error near zero."""
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    return diff / scale if scale > 1e-12 else diff


def grad_check(f, params, eps=1e-5, tol=1e-6, max_coords=None, rng=None):
    """Compare backward gradients of scalar ``f()`` with central differences.

    ``params`` maps names to leaf tensors (a sequence is numbered). ``f`` must
    read the current parameter values on every call. When ``max_coords`` is
    given, larger parameters are checked on a random subset of coordinates.
    """
    if not (0.0 < eps <= 1e-2):
        raise ConfigError(f"grad_check eps must lie in (0, 1e-2], got {eps}")
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    rng = np.random.default_rng(0) if rng is None else rng

    for p in params.values():
        p.grad = np.zeros_like(p.data)
    out, _ = _scalar(f)
    if isinstance(out, Tensor) and out.requires_grad:
        out.backward()
    analytic = {n: p.grad.copy() for n, p in params.items()}

    report = GradCheckReport(tol=tol)
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            else:
                coords = np.arange(flat.size)
            numeric = np.empty(coords.size)
            for k, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + eps
                _, fp = _scalar(f)
                flat[c] = orig - eps
                _, fm = _scalar(f)
                flat[c] = orig
                numeric[k] = (fp - fm) / (2.0 * eps)
            report.errors[name] = relative_error(analytic[name].reshape(-1)[coords], numeric)
            report.coords[name] = int(coords.size)
    return report
