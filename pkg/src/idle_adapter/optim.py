"""AdamW with a linear-decay schedule, and the truncated-normal initializer."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside [-bound, bound]."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def linear_decay(step: int, total_steps: int, base_lr: float) -> float:
    """Learning rate at optimizer step ``step`` (0-based), reaching 0 at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    return base_lr * max(0.0, 1.0 - step / total_steps)


class NonFiniteGradientError(FloatingPointError):
    pass


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Only tensors with ``requires_grad`` get state; a frozen tensor passed in
    by mistake is skipped even if its ``grad`` holds something.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient in {p.name or 'unnamed parameter'}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p in self.params:
            if not p.requires_grad:
                continue
            g = p.grad
            m = self.m[id(p)] = self.beta1 * self.m[id(p)] + (1 - self.beta1) * g
            v = self.v[id(p)] = self.beta2 * self.v[id(p)] + (1 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            # rebind rather than mutate so earlier snapshots of .data stay valid
            p.data = (p.data * (1.0 - lr * self.weight_decay) - lr * update).astype(p.data.dtype)
