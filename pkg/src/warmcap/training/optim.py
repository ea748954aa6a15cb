"""AdamW with named parameter groups."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..nn import Parameter

BETAS = (0.9, 0.999)
EPS = 1e-8
WEIGHT_DECAY = 0.01


@dataclass
class ParamGroup:
    name: str
    params: List[Tuple[str, Parameter]]
    lr: float
    weight_decay: float = WEIGHT_DECAY


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    betas: Tuple[float, float] = BETAS,
    eps: float = EPS,
    weight_decay: float = WEIGHT_DECAY,
) -> None:
    """One in-place AdamW update of ``param`` and its moments; ``step`` counts from 1.

    The decay multiplies the parameter by (1 - lr * weight_decay) before the
    bias-corrected Adam step is subtracted.
    """
    b1, b2 = betas
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    if weight_decay:
        param *= 1 - lr * weight_decay
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(
        self,
        groups: Sequence[ParamGroup],
        betas: Tuple[float, float] = BETAS,
        eps: float = EPS,
    ):
        for g in groups:
            if g.lr <= 0:
                raise ValueError(f"learning rate of group {g.name!r} must be positive, got {g.lr}")
        self.groups = list(groups)
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.state: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    def step(self) -> None:
        self.step_count += 1
        for group in self.groups:
            for _, p in group.params:
                if p.grad is None:
                    continue
                key = id(p)
                if key not in self.state:
                    self.state[key] = (np.zeros_like(p.data), np.zeros_like(p.data))
                m, v = self.state[key]
                adamw_step(p.data, p.grad, m, v, self.step_count, group.lr, self.betas, self.eps, group.weight_decay)

    def zero_grad(self) -> None:
        for group in self.groups:
            for _, p in group.params:
                p.grad = None


def split_groups(
    named: Iterable[Tuple[str, Parameter]],
    rules: Sequence[Tuple[str, Callable[[str], bool], float]],
    weight_decay: float = WEIGHT_DECAY,
) -> List[ParamGroup]:
    """Assign each parameter to the first group whose predicate accepts its name."""
    groups = [ParamGroup(name, [], lr, weight_decay) for name, _, lr in rules]
    for pname, p in named:
        for group, (_, accept, _) in zip(groups, rules):
            if accept(pname):
                group.params.append((pname, p))
                break
        else:
            raise ValueError(f"parameter {pname!r} matches no group")
    return [g for g in groups if g.params]
