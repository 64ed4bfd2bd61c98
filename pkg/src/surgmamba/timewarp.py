"""Intensity-modulated discretization for the slow path.

A per-frame intensity ``lam`` in [0, 1] scales the discretization step by
``alpha = 1 + lam``. Because the decay rate is a negative scalar, raising
``lam`` always lowers the effective decay ``exp(alpha * dt * A)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .ssm import ContractError


class IntensityNet(nn.Module):
    """Bottleneck MLP with sigmoid read-out: ``lam = sigmoid(W2 silu(W1 x + b1) + b2)``."""

    def __init__(self, d_in: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(1, d_in // 4)
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def preactivation(self, x: Tensor) -> Tensor:
        return self.fc2(F.silu(self.fc1(x))).squeeze(-1)

    def forward(self, x: Tensor) -> Tensor:
        return torch.sigmoid(self.preactivation(x))


@dataclass(frozen=True)
class WarpedStep:
    lam: float
    alpha: float
    delta: float


def warped_step(delta_raw, lam, W_delta, b_delta):
    """``(1 + lam) * softplus(W_delta * delta_raw + b_delta)``.

    Works on Python floats or tensors; ``lam`` must lie in [0, 1].
    """
    lam_t = torch.as_tensor(lam)
    if bool(((lam_t < 0) | (lam_t > 1)).any()):
        raise ContractError(f"intensity must lie in [0, 1], got {lam}")
    if isinstance(delta_raw, Tensor) or isinstance(lam, Tensor):
        return (1 + lam) * F.softplus(W_delta * delta_raw + b_delta)
    base = float(F.softplus(torch.tensor(W_delta * delta_raw + b_delta, dtype=torch.float64)))
    return (1.0 + lam) * base


def warped_step_info(delta_raw: float, lam: float, W_delta: float, b_delta: float) -> WarpedStep:
    delta = warped_step(delta_raw, lam, W_delta, b_delta)
    return WarpedStep(lam=lam, alpha=1.0 + lam, delta=delta)


def effective_decay_and_grad(A: float, delta: float, lam: float) -> tuple[float, float, float]:
    """Return ``(a_bar, dA, d a_bar / d lam)`` for the warped step.

    ``dA = (1 + lam) delta A`` is the log-decay; its derivative in ``lam`` is
    ``delta A`` and that of ``a_bar`` is ``delta A exp(dA)``, both negative.
    """
    if not A < 0:
        raise ContractError(f"decay rate must be negative, got A={A}")
    if not delta > 0:
        raise ContractError(f"step must be positive, got delta={delta}")
    dA = (1.0 + lam) * delta * A
    a_bar = math.exp(dA)
    return a_bar, dA, delta * A * a_bar
