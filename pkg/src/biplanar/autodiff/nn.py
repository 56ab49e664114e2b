"""Parameter containers for the layers used by the encoder and decoder."""
from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype, leaky_relu


class Module:
    """Base class; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = ""):
        out = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        missing = set(params) ^ set(state)
        if missing:
            raise KeyError(f"state dict keys differ: {sorted(missing)}")
        for k, p in params.items():
            if tuple(state[k].shape) != p.shape:
                raise ValueError(f"{k}: shape {tuple(state[k].shape)} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(array) -> Tensor:
    return Tensor(array, requires_grad=True, dtype=get_default_dtype())


class Conv2d(Module):
    def __init__(self, c_in, c_out, k=3, stride=1, pad=None, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = c_in * k * k
        bound = math.sqrt(6.0 / fan_in)  # Kaiming-uniform, gain sqrt(2)
        self.weight = _param(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)))
        self.bias = _param(np.zeros(c_out))
        self.stride = stride
        self.pad = (k // 2) if pad is None else pad

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class GroupNorm(Module):
    def __init__(self, groups, channels):
        self.groups = math.gcd(groups, channels)
        self.scale = _param(np.ones(channels))
        self.shift = _param(np.zeros(channels))

    def forward(self, x):
        return F.group_norm(x, self.groups, self.scale, self.shift)


class ConvBlock(Module):
    """conv -> group norm -> leaky ReLU."""

    def __init__(self, c_in, c_out, k=3, stride=1, groups=8, slope=0.2, rng=None):
        self.conv = Conv2d(c_in, c_out, k, stride, rng=rng)
        self.norm = GroupNorm(groups, c_out)
        self.slope = slope

    def forward(self, x):
        return leaky_relu(self.norm(self.conv(x)), self.slope)


class SelfAttention(Module):
    def __init__(self, channels, rng=None):
        self.q = Conv2d(channels, channels, 1, rng=rng)
        self.k = Conv2d(channels, channels, 1, rng=rng)
        self.v = Conv2d(channels, channels, 1, rng=rng)

    def forward(self, x):
        return F.self_attention(x, self.q.weight, self.q.bias, self.k.weight, self.k.bias,
                                self.v.weight, self.v.bias)

    def weights(self, x):
        """Attention matrix (N, HW, HW) for inspection."""
        return F.attention_weights(self.q(x), self.k(x))
