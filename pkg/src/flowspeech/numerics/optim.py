"""Adam with bias correction and a linear-warmup-then-constant schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def to_json(self):
        return {"step": self.step, "learning_rate": self.learning_rate,
                "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon}


def adam_step(params, grads, state):
    """Apply one bias-corrected Adam update to ``params`` in place.

    ``params`` and ``grads`` are parallel lists of arrays (or Tensors for
    params); a ``None`` gradient is treated as zero.
    """
    if len(params) != len(grads):
        raise ContractError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if state.step < 0:
        raise ContractError("adam_step: negative step count")
    arrays = [p.data if isinstance(p, Tensor) else p for p in params]
    if not state.first_moment:
        state.first_moment = [np.zeros_like(a) for a in arrays]
        state.second_moment = [np.zeros_like(a) for a in arrays]
    if len(state.first_moment) != len(arrays):
        raise ContractError("adam_step: optimizer state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    lr = state.learning_rate
    for a, g, m, v in zip(arrays, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(a)
        if g.shape != a.shape:
            raise ContractError(f"adam_step: grad shape {g.shape} != param shape {a.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        a -= (lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(a.dtype)
    return params, state


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, warmup_steps=0,
                 grad_clip=None, decay_steps=None):
        self.params = list(params)
        self.base_lr = lr
        self.warmup_steps = warmup_steps
        self.decay_steps = decay_steps
        self.grad_clip = grad_clip
        self.state = AdamState(learning_rate=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def lr_at(self, step):
        """Linear warmup, then constant (or cosine decay to 0 when ``decay_steps`` is set)."""
        lr = self.base_lr
        if self.warmup_steps > 0:
            lr *= min(1.0, (step + 1) / self.warmup_steps)
        if self.decay_steps:
            frac = min(max(step - self.warmup_steps, 0) / self.decay_steps, 1.0)
            lr *= 0.5 * (1.0 + np.cos(np.pi * frac))
        return lr

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad for p in self.params]
        if self.grad_clip is not None:
            total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads if g is not None))
            if total > self.grad_clip:
                scale = self.grad_clip / (total + 1e-12)
                grads = [None if g is None else g * scale for g in grads]
        self.state.learning_rate = self.lr_at(self.state.step)
        adam_step(self.params, grads, self.state)

    def state_records(self):
        """Moments as named arrays for the checkpoint container."""
        out = {}
        for i, (m, v) in enumerate(zip(self.state.first_moment, self.state.second_moment)):
            out[f"__adam__/m/{i}"] = m
            out[f"__adam__/v/{i}"] = v
        return out

    def load_state_records(self, records, meta):
        n = len(self.params)
        self.state.first_moment = [np.array(records[f"__adam__/m/{i}"]) for i in range(n)]
        self.state.second_moment = [np.array(records[f"__adam__/v/{i}"]) for i in range(n)]
        self.state.step = int(meta["step"])
