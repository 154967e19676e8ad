"""
ABMT Optimizers - Adam with coupled L2 weight decay and the step-decay schedule.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .exceptions import ContractError, DimensionError
from .tensor import Tensor

logger = logging.getLogger("abmt.optim")


@dataclass
class AdamState:
    """Moments and hyperparameters tracking one parameter tensor."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.00035
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0005

    @classmethod
    def for_param(cls, param: Tensor, **hyper: float) -> "AdamState":
        return cls(m=np.zeros_like(param.data), v=np.zeros_like(param.data), **hyper)


def adam_step(params: Sequence[Tensor], states: Sequence[AdamState]) -> None:
    """
    Apply one bias-corrected Adam update in place and zero the gradients.

    Weight decay is the coupled L2 form: ``g + weight_decay * p`` feeds the moments.

    Raises:
        ContractError: a parameter has no gradient or lists are misaligned
        DimensionError: a state does not match its parameter's shape
    """
    if len(params) != len(states):
        raise ContractError(f"{len(params)} params but {len(states)} optimizer states")
    for param, state in zip(params, states):
        if param.grad is None:
            raise ContractError(f"parameter {param!r} has no gradient")
        if state.m.shape != param.data.shape:
            raise DimensionError(f"Adam state {state.m.shape} vs parameter {param.shape}")

        g = param.grad + state.weight_decay * param.data
        state.t += 1
        state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
        state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
        m_hat = state.m / (1.0 - state.beta1**state.t)
        v_hat = state.v / (1.0 - state.beta2**state.t)
        param.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        param.zero_grad()


@dataclass
class Adam:
    """
    Adam over a named parameter set.

    States are created lazily per parameter name, so parameters that get
    replaced (dynamic classifiers) start from fresh moments after ``reset``.
    """

    lr: float = 0.00035
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0005
    states: Dict[str, AdamState] = field(default_factory=dict)

    def step(self, named_params: Dict[str, Tensor]) -> None:
        names = list(named_params)
        for name in names:
            state = self.states.get(name)
            if state is None or state.m.shape != named_params[name].shape:
                self.states[name] = AdamState.for_param(
                    named_params[name],
                    lr=self.lr,
                    beta1=self.beta1,
                    beta2=self.beta2,
                    eps=self.eps,
                    weight_decay=self.weight_decay,
                )
        adam_step([named_params[n] for n in names], [self.states[n] for n in names])

    def reset(self, prefix: str = "") -> List[str]:
        """Drop the moments of every parameter whose name starts with ``prefix``."""
        dropped = [name for name in self.states if name.startswith(prefix)]
        for name in dropped:
            del self.states[name]
        if dropped:
            logger.debug(f"♻️  Adam moments reset for {len(dropped)} tensors ('{prefix}*')")
        return dropped

    def set_lr(self, lr: float) -> None:
        self.lr = lr
        for state in self.states.values():
            state.lr = lr


def default_milestones(epochs: int) -> List[int]:
    """Decay epochs at the 40/80 and 70/80 marks, scaled to ``epochs``."""
    return sorted({max(1, round(epochs * 40 / 80)), max(1, round(epochs * 70 / 80))})


def step_decay_lr(
    base_lr: float, epoch: int, milestones: Optional[Sequence[int]], gamma: float = 0.1
) -> float:
    """Learning rate for a 0-based ``epoch`` under step decay."""
    passed = 0 if not milestones else len([m for m in milestones if epoch >= m])
    return base_lr * gamma**passed
