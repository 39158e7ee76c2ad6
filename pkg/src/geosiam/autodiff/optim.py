from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .engine import Tensor


@dataclass
class Param:
    tensor: Tensor
    trainable: bool = True
    weight_decay_exempt: bool = False
    lr_mult: float = 1.0


class ParamStore:
    """Ordered name -> parameter mapping with training flags."""

    def __init__(self):
        self._params: "OrderedDict[str, Param]" = OrderedDict()

    def add(self, name, value, *, trainable=True, exempt=False, lr_mult=1.0) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float32), requires_grad=trainable, name=name)
        self._params[name] = Param(t, trainable, exempt, lr_mult)
        return t

    def __getitem__(self, name) -> Tensor:
        return self._params[name].tensor

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def param(self, name) -> Param:
        return self._params[name]

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list:
        return [k for k in self._params if k.startswith(prefix)]

    def zero_grad(self):
        for p in self._params.values():
            p.tensor.grad = np.zeros_like(p.tensor.data) if p.trainable else None

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.tensor.data.copy()) for k, p in self._params.items())

    def l2_penalty(self) -> float:
        """Sum of squares over trainable, non-exempt parameters (float64)."""
        return float(sum(
            np.sum(p.tensor.data.astype(np.float64) ** 2)
            for p in self._params.values()
            if p.trainable and not p.weight_decay_exempt
        ))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, p in self._params.items():
            out.add(k, p.tensor.data, trainable=p.trainable, exempt=p.weight_decay_exempt, lr_mult=p.lr_mult)
        return out


@dataclass(frozen=True)
class LrSchedule:
    """Step-decay schedule: divide by ``decay_factor`` every ``decay_every`` steps
    or at each explicit milestone."""

    initial_lr: float
    decay_factor: float = 2.0
    decay_every: Optional[int] = None
    milestones: Optional[Sequence[int]] = None

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if self.decay_factor <= 0:
            raise ValueError("decay_factor must be positive")
        if self.decay_every is not None and self.decay_every <= 0:
            raise ValueError("decay_every must be positive")

    def lr(self, step: int) -> float:
        if self.milestones:
            n = sum(1 for m in self.milestones if step >= m)
        elif self.decay_every:
            n = step // self.decay_every
        else:
            n = 0
        return self.initial_lr / self.decay_factor**n


def sgd_step(params: ParamStore, schedule: LrSchedule, step: int, weight_decay: float = 0.0) -> float:
    """In-place SGD update with coupled L2 decay; returns the base learning rate used.

    Each trainable parameter moves by ``-lr * lr_mult * (grad + 2 * weight_decay * p)``,
    the decay term being dropped for exempt parameters.
    """
    lr = schedule.lr(step)
    for name, p in params.items():
        if not p.trainable:
            continue
        t = p.tensor
        if t.grad is None:
            raise RuntimeError(f"no gradient for trainable parameter {name!r}")
        g = t.grad.astype(np.float64)
        w = t.data.astype(np.float64)
        if weight_decay and not p.weight_decay_exempt:
            g = g + 2.0 * weight_decay * w
        t.data = (w - lr * p.lr_mult * g).astype(t.data.dtype)
    return lr
