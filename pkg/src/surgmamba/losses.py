"""Training objectives: masked CE, confidence-weighted smoothness, intensity BCE."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import Tensor

PROB_FLOOR = 1e-8
LABEL_SMOOTHING = 0.1
SIGMA_LEFT = 2.0
SIGMA_RIGHT = 12.0


@dataclass
class PhaseTargets:
    labels: Tensor  # (..., T) long
    mask: Tensor  # (..., T) {0, 1}
    g: Tensor  # (..., T) transition target in [0, 1]

    @classmethod
    def from_labels(cls, labels, mask=None, prev_label=None, sigma_l=SIGMA_LEFT, sigma_r=SIGMA_RIGHT,
                    dtype=torch.float32) -> "PhaseTargets":
        labels = torch.as_tensor(labels, dtype=torch.long)
        mask = torch.ones_like(labels, dtype=dtype) if mask is None else torch.as_tensor(mask, dtype=dtype)
        flat = labels.reshape(-1, labels.shape[-1]).numpy()
        prev = [None] * len(flat) if prev_label is None else np.broadcast_to(np.asarray(prev_label), (len(flat),))
        g = np.stack([transition_target(row, sigma_l, sigma_r, p) for row, p in zip(flat, prev)])
        return cls(labels, mask, torch.as_tensor(g, dtype=dtype).reshape(labels.shape))


@dataclass
class LossBreakdown:
    ce: Tensor
    smooth: Tensor
    trans: Tensor
    total: Tensor
    w_sm: float
    w_trans: float

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("ce", "smooth", "trans", "total")}


def _masked_mean(values: Tensor, mask: Tensor) -> Tensor:
    total = mask.sum()
    if float(total) == 0:
        warnings.warn("empty mask: loss defined as 0", RuntimeWarning, stacklevel=3)
        return values.sum() * 0.0
    return (values * mask).sum() / total


def ce_masked(probs: Tensor, targets: PhaseTargets, smoothing: float = LABEL_SMOOTHING) -> Tensor:
    """Label-smoothed cross-entropy averaged over valid frames."""
    C = probs.shape[-1]
    logp = torch.log(probs.clamp_min(PROB_FLOOR))
    q = torch.full_like(probs, smoothing / C)
    q = q + (1 - smoothing) * torch.nn.functional.one_hot(targets.labels, C).to(probs.dtype)
    return _masked_mean(-(q * logp).sum(-1), targets.mask.to(probs.dtype))


def confidence(probs: Tensor) -> Tensor:
    """``1 - H(p) / ln C``: 0 for uniform, 1 for one-hot."""
    p = probs.clamp_min(PROB_FLOOR)
    entropy = -(probs * torch.log(p)).sum(-1)
    return 1 - entropy / math.log(probs.shape[-1])


def smooth_loss(probs: Tensor, mask: Tensor) -> Tensor:
    """Mean over valid adjacent pairs of ``c_t c_{t+1} KL(p_t || p_{t+1})``."""
    p = probs.clamp_min(PROB_FLOOR)
    logp = torch.log(p)
    kl = (probs[..., :-1, :] * (logp[..., :-1, :] - logp[..., 1:, :])).sum(-1)
    c = confidence(probs)
    pair_mask = (mask[..., :-1] * mask[..., 1:]).to(probs.dtype)
    return _masked_mean(c[..., :-1] * c[..., 1:] * kl, pair_mask)


def transition_target(labels, sigma_l: float = SIGMA_LEFT, sigma_r: float = SIGMA_RIGHT,
                      prev_label: Optional[int] = None) -> np.ndarray:
    """Pointwise max of asymmetric Gaussian bumps centred on each label change.

    A change at frame ``t`` means ``labels[t] != labels[t-1]``; ``prev_label``
    lets a change at frame 0 count when the preceding clip's label is known.
    """
    labels = np.asarray(labels)
    T = len(labels)
    g = np.zeros(T)
    if T == 0:
        return g
    change = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    if prev_label is not None and labels[0] != prev_label:
        change = np.concatenate([[0], change])
    t = np.arange(T, dtype=np.float64)
    for ts in change:
        d = t - ts
        sigma = np.where(d < 0, sigma_l, sigma_r)
        g = np.maximum(g, np.exp(-0.5 * (d / sigma) ** 2))
    return g


def bce(lam: Tensor, g: Tensor) -> Tensor:
    lo = torch.log(lam.clamp_min(PROB_FLOOR))
    hi = torch.log((1 - lam).clamp_min(PROB_FLOOR))
    return -(g * lo + (1 - g) * hi)


def trans_loss(lambdas: Tensor, targets: PhaseTargets) -> Tensor:
    """Per-layer masked-mean BCE against ``g``, averaged over the K layers."""
    mask = targets.mask.to(lambdas.dtype)
    g = targets.g.to(lambdas.dtype)
    per_layer = [_masked_mean(bce(lam, g), mask) for lam in lambdas]
    return torch.stack(per_layer).mean()


def total_loss(outputs, targets: PhaseTargets, w_sm: float = 1.0, w_trans: float = 1.0,
               smoothing: float = LABEL_SMOOTHING) -> LossBreakdown:
    probs = torch.softmax(outputs.logits, dim=-1)
    mask = targets.mask.to(probs.dtype)
    ce = ce_masked(probs, targets, smoothing)
    sm = smooth_loss(probs, mask)
    tr = trans_loss(outputs.lambdas, targets)
    return LossBreakdown(ce, sm, tr, ce + w_sm * sm + w_trans * tr, w_sm, w_trans)
