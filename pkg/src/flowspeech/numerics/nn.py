"""Parameter containers and the layers shared by the encoders and decoder."""
from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as F
from .tensor import Tensor


class Module:
    """Base class: parameters are discovered from attributes recursively."""

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if name in state:
                arr = np.asarray(state[name], dtype=p.data.dtype)
                if arr.shape != p.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
                p.data = arr.copy()

    def fingerprint(self):
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k in sorted(value):
            yield from _walk(value[k], f"{name}.{k}")


def param(array):
    return Tensor(array, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, zero=False, scale=None):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            s = scale if scale is not None else 1.0 / np.sqrt(d_in)
            w = rng.uniform(-s, s, size=(d_in, d_out))
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    def forward(self, x):
        y = F.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, n, d, rng, scale=1.0):
        self.table = param(rng.normal(0.0, scale, size=(n, d)))

    def forward(self, ids):
        return F.embedding(self.table, ids)


def attention_mask(lengths, T):
    """Boolean (B, T) mask of valid frames, or None when nothing is padded."""
    if lengths is None:
        return None
    lengths = np.asarray(lengths)
    return np.arange(T)[None, :] < lengths[:, None]


def multi_head_attention(x, qkv, proj, n_heads, mask=None):
    """Self-attention. x: (B, T, H); mask: (B, T) valid-frame mask or None."""
    B, T, H = x.shape
    dh = H // n_heads
    q_k_v = qkv(x).reshape(B, T, 3, n_heads, dh)
    q = F.transpose(q_k_v[:, :, 0], (0, 2, 1, 3))
    k = F.transpose(q_k_v[:, :, 1], (0, 2, 3, 1))
    v = F.transpose(q_k_v[:, :, 2], (0, 2, 1, 3))
    scores = F.matmul(q, k) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = F.masked_fill(scores, ~mask[:, None, None, :], -1e9)
    att = F.softmax(scores, axis=-1)
    out = F.transpose(F.matmul(att, v), (0, 2, 1, 3)).reshape(B, T, H)
    return proj(out)


def sinusoidal_embedding(positions, dim, max_period=10000.0):
    """Plain numpy sinusoidal features for scalar positions, shape (N, dim)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = positions[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)
