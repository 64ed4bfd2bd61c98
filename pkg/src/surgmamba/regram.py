"""Per-chunk state regramming.

At each chunk boundary the chunk's per-head output is pooled into a summary,
per-head MLPs predict ``r`` rotation planes ``(U, V)`` with angles ``theta``,
and the state is right-multiplied by the Cayley image of the low-rank skew
generator ``S = U diag(theta) V^T - V diag(theta) U^T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .ssm import ContractError

COLUMN_EPS = 1e-8


@dataclass
class RotationOp:
    U: Tensor  # (..., H, N, r), unit columns
    V: Tensor  # (..., H, N, r), unit columns
    theta: Tensor  # (..., H, r), >= 0
    Z: Tensor  # (..., H, N, N), orthogonal

    def detach(self) -> "RotationOp":
        return RotationOp(self.U.detach(), self.V.detach(), self.theta.detach(), self.Z.detach())

    def select(self, index: int) -> "RotationOp":
        """Pick one sequence out of a batched op."""
        return RotationOp(self.U[index], self.V[index], self.theta[index], self.Z[index])


def chunk_summary(y_chunk: Tensor, norm: nn.LayerNorm | None = None) -> Tensor:
    """Mean over the chunk's frames, then LayerNorm over head channels.

    ``y_chunk`` is (..., L, H, P); the result is (..., H, P).
    """
    if y_chunk.shape[-3] < 1:
        raise ContractError("cannot summarize an empty chunk")
    pooled = y_chunk.mean(dim=-3)
    if norm is None:
        return F.layer_norm(pooled, pooled.shape[-1:])
    return norm(pooled)


def normalize_columns(M: Tensor, eps: float = COLUMN_EPS) -> Tensor:
    return M / (M.norm(dim=-2, keepdim=True) + eps)


def skew_generator(U: Tensor, V: Tensor, theta: Tensor) -> Tensor:
    UT = U * theta[..., None, :]
    half = UT @ V.transpose(-1, -2)
    return half - half.transpose(-1, -2)


def cayley_rotation(U: Tensor, V: Tensor, theta: Tensor) -> Tensor:
    """``Z = (I - S/2)^{-1} (I + S/2)`` via a linear solve."""
    if not (torch.isfinite(U).all() and torch.isfinite(V).all() and torch.isfinite(theta).all()):
        raise ContractError("non-finite rotation generators")
    S = skew_generator(U, V, theta)
    eye = torch.eye(S.shape[-1], dtype=S.dtype, device=S.device)
    return torch.linalg.solve(eye - 0.5 * S, eye + 0.5 * S)


def apply_regram(h: Tensor, Z: Tensor) -> Tensor:
    """Rotate each head's ``P x N`` state on the right: ``h Z``."""
    if h.shape[-1] != Z.shape[-1] or Z.shape[-2] != Z.shape[-1] or h.shape[-3] != Z.shape[-3]:
        raise ContractError(f"state {tuple(h.shape)} and rotation {tuple(Z.shape)} do not match")
    return h @ Z


class PerHeadMLP(nn.Module):
    """Two-layer MLP with independent weights per head, evaluated in one einsum."""

    def __init__(self, n_heads: int, d_in: int, hidden: int, d_out: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.randn(n_heads, d_in, hidden) / math.sqrt(d_in))
        self.b1 = nn.Parameter(torch.zeros(n_heads, hidden))
        self.w2 = nn.Parameter(torch.randn(n_heads, hidden, d_out) * 0.02)
        self.b2 = nn.Parameter(torch.zeros(n_heads, d_out))

    def forward(self, x: Tensor) -> Tensor:
        hid = F.silu(torch.einsum("...hi,hij->...hj", x, self.w1) + self.b1)
        return torch.einsum("...hj,hjk->...hk", hid, self.w2) + self.b2


class Regrammer(nn.Module):
    """Summary norm plus the plane and angle MLPs for one path."""

    def __init__(self, n_heads: int, head_dim: int, d_state: int, rank: int, hidden: int | None = None,
                 angle_bias: float = -4.0):
        super().__init__()
        hidden = hidden or head_dim
        self.n_heads, self.d_state, self.rank = n_heads, d_state, rank
        self.norm = nn.LayerNorm(head_dim)
        self.planes = PerHeadMLP(n_heads, head_dim, hidden, 2 * d_state * rank)
        self.angles = PerHeadMLP(n_heads, head_dim, hidden, rank)
        with torch.no_grad():
            self.planes.b2.copy_(head_diverse_plane_bias(n_heads, d_state, rank))
            self.angles.b2.fill_(angle_bias)

    def predict_planes(self, phi: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        N, r = self.d_state, self.rank
        uv = self.planes(phi)
        U = normalize_columns(uv[..., : N * r].unflatten(-1, (N, r)))
        V = normalize_columns(uv[..., N * r :].unflatten(-1, (N, r)))
        theta = F.softplus(self.angles(phi))
        return U, V, theta

    def forward(self, y_chunk: Tensor) -> RotationOp:
        phi = chunk_summary(y_chunk, self.norm)
        return self.rotation_from_summary(phi)

    def rotation_from_summary(self, phi: Tensor) -> RotationOp:
        U, V, theta = self.predict_planes(phi)
        return RotationOp(U, V, theta, cayley_rotation(U, V, theta))


def head_diverse_plane_bias(n_heads: int, d_state: int, rank: int) -> Tensor:
    """Bias putting plane ``j`` of head ``k`` on axes ``(2m, 2m+1) mod N``, ``m = k r + j``."""
    bias = torch.zeros(n_heads, 2, d_state, rank)
    for k in range(n_heads):
        for j in range(rank):
            m = k * rank + j
            bias[k, 0, (2 * m) % d_state, j] = 1.0
            bias[k, 1, (2 * m + 1) % d_state, j] = 1.0
    return bias.reshape(n_heads, 2 * d_state * rank)


def rotation_angles_deg(theta) -> np.ndarray:
    """In-plane angle of the Cayley rotation generated by ``theta``: ``2 arctan(theta / 2)``."""
    return np.degrees(2.0 * np.arctan(np.asarray(theta, dtype=np.float64) / 2.0))


def plane_projectors(U, V, rtol: float = 1e-8) -> np.ndarray:
    """Orthogonal projectors onto ``span(U cols, V cols)``, one per head: (H, N, N)."""
    basis = np.concatenate([np.asarray(U, dtype=np.float64), np.asarray(V, dtype=np.float64)], axis=-1)
    out = []
    for M in basis:
        q, s, _ = np.linalg.svd(M, full_matrices=False)
        keep = s > rtol * (s[0] if s.size and s[0] > 0 else 1.0)
        qk = q[:, keep]
        out.append(qk @ qk.T)
    return np.stack(out)


def plane_cosine(op_a: RotationOp, op_b: RotationOp) -> float:
    Pa = plane_projectors(_np(op_a.U), _np(op_a.V))
    Pb = plane_projectors(_np(op_b.U), _np(op_b.V))
    denom = np.linalg.norm(Pa) * np.linalg.norm(Pb)
    return float(np.sum(Pa * Pb) / denom) if denom > 0 else 0.0


def angle_stats(op: RotationOp) -> np.ndarray:
    """Per-head ``[min, mean, max]`` rotation angle in degrees, shape (H, 3)."""
    ang = rotation_angles_deg(_np(op.theta))
    return np.stack([ang.min(axis=-1), ang.mean(axis=-1), ang.max(axis=-1)], axis=-1)


def rotation_analytics(op_a: RotationOp, op_b: RotationOp) -> tuple[float, np.ndarray]:
    if op_a.U.shape[-2:] != op_b.U.shape[-2:]:
        raise ContractError("rotation ops differ in state size or rank")
    return plane_cosine(op_a, op_b), angle_stats(op_a)


def _np(t) -> np.ndarray:
    return t.detach().cpu().double().numpy() if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
