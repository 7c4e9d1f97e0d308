"""AdamW with decoupled weight decay, plus the warmup+cosine LR schedule."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError, NumericError
from .tensor import Tensor


class AdamW:
    """Decoupled-weight-decay Adam over a dict of named parameters.

    Parameters with `grad is None` are skipped entirely for the step
    (no moment update, no decay), so untouched sub-networks stay put.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1.5e-4,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.05,
    ):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment buffers and step counter, keyed for checkpointing."""
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        out["opt.step"] = np.array([self.step_count], dtype=np.float32)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for name in self.params:
            self.m[name] = arrays[f"opt.m.{name}"].astype(self.m[name].dtype).copy()
            self.v[name] = arrays[f"opt.v.{name}"].astype(self.v[name].dtype).copy()
        self.step_count = int(arrays["opt.step"][0])


def cosine_warmup_lr(
    step: int, total_steps: int, base_lr: float, min_lr: float = 0.0, warmup_steps: int = 0
) -> float:
    """Linear warmup to `base_lr`, then cosine decay hitting `min_lr` at the last step."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    last = total_steps - 1
    if last <= warmup_steps:
        return min_lr
    progress = (step - warmup_steps) / (last - warmup_steps)
    progress = min(max(progress, 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))
