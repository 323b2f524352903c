from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from langneck.errors import ArgumentError
from langneck.tensor import Tensor, zero_grad

OPTIMIZERS = ["sgd", "sgd_momentum"]
MOMENTUM = 0.9


@dataclass
class ParamGroup:
    params: List[Tensor]
    lr: float
    name: str = ""


class Optimizer:
    """Per-group learning rates over tensors whose `.grad` the tape filled."""

    def __init__(self, groups: List[ParamGroup]):
        for group in groups:
            if group.lr < 0:
                raise ArgumentError(f"Learning rate for {group.name or 'group'} must be non-negative")
        self.groups = groups

    def zero_grad(self):
        zero_grad(p for group in self.groups for p in group.params)

    def step(self):
        for group in self.groups:
            for p in group.params:
                if p.grad is not None:
                    p.data = self._update(p, group.lr)

    def _update(self, p: Tensor, lr: float) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, groups: List[ParamGroup], momentum: float = 0.0):
        super().__init__(groups)
        self.momentum = momentum
        self._velocity: Dict[int, np.ndarray] = {}

    def _update(self, p: Tensor, lr: float) -> np.ndarray:
        if not self.momentum:
            return p.data - lr * p.grad
        v = self._velocity.get(id(p))
        v = p.grad.copy() if v is None else self.momentum * v + p.grad
        self._velocity[id(p)] = v
        return p.data - lr * v


@dataclass
class _AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class Adam(Optimizer):
    """Used for warm-up pretraining of the backbone."""

    def __init__(self, groups: List[ParamGroup], betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(groups)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._state: Dict[int, _AdamState] = {}

    def _update(self, p: Tensor, lr: float) -> np.ndarray:
        state = self._state.setdefault(id(p), _AdamState(np.zeros_like(p.data), np.zeros_like(p.data)))
        state.t += 1
        state.m = self.beta1 * state.m + (1 - self.beta1) * p.grad
        state.v = self.beta2 * state.v + (1 - self.beta2) * p.grad * p.grad
        m_hat = state.m / (1 - self.beta1**state.t)
        v_hat = state.v / (1 - self.beta2**state.t)
        return p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def build_optimizer(name: str, groups: List[ParamGroup]) -> Optimizer:
    if name == "sgd":
        return SGD(groups)
    if name == "sgd_momentum":
        return SGD(groups, momentum=MOMENTUM)
    raise ArgumentError(f"Unknown optimizer '{name}'. Use: {', '.join(OPTIMIZERS)}")
