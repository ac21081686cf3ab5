"""Small module system, layers and the AdamW optimiser built on autodiff."""

import math

import numpy as np

from .autodiff import Parameter, layer_norm, linear, relu


class Module:
    """Container whose Parameter / Module attributes form a parameter tree.

    Parameters are enumerated in attribute-assignment order, which keeps
    initialisation and checkpoint layouts deterministic.
    """

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Parameter):
                yield key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{key}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def set_requires_grad(self, flag):
        for p in self.parameters():
            p.requires_grad = flag

    def state_dict(self):
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, p in own.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{n}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng, fan_in, fan_out, bias=True):
        self.weight = Parameter(uniform_init(rng, (fan_in, fan_out), fan_in))
        self.bias = Parameter(np.zeros(fan_out)) if bias else None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Two linear layers with a ReLU between them."""

    def __init__(self, rng, fan_in, hidden, fan_out):
        self.fc1 = Linear(rng, fan_in, hidden)
        self.fc2 = Linear(rng, hidden, fan_out)

    def __call__(self, x):
        return self.fc2(relu(self.fc1(x)))


def cosine_lr(epoch, total_epochs, base_lr, min_lr=1e-6):
    """Per-epoch cosine decay from ``base_lr`` at epoch 0 to ``min_lr`` at the last epoch."""
    if total_epochs <= 1:
        return base_lr
    frac = min(max(epoch / (total_epochs - 1), 0.0), 1.0)
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """AdamW with decoupled weight decay over a fixed list of named parameters."""

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for n, p in self.params:
            if not p.requires_grad:
                continue
            g = p.grad
            m, v = self.m[n], self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {
            "t": self.t,
            "m": {n: a.copy() for n, a in self.m.items()},
            "v": {n: a.copy() for n, a in self.v.items()},
        }

    def load_state_dict(self, state):
        if set(state["m"]) != set(self.m):
            raise KeyError("optimizer state does not match parameter set")
        self.t = int(state["t"])
        for n in self.m:
            self.m[n][...] = state["m"][n]
            self.v[n][...] = state["v"][n]
