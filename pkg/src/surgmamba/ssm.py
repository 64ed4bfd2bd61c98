"""Scalar-decay selective state-space scan.

State layout follows the row-vector convention: each head carries a ``P x N``
state ``h`` updated as ``h_t = a_t h_{t-1} + dt_t x_t B_t^T`` and read as
``y_t = h_t C_t``. Tensors are batch-first and may carry any number of leading
batch dimensions:

    x   (..., T, H, P)     dt  (..., T, H)      A  (H,)
    B   (..., T, N)        C   (..., T, N)      h  (..., H, P, N)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn.functional as F
from torch import Tensor


class ContractError(ValueError):
    """Raised when an operation's shape or domain precondition is violated."""


@dataclass(frozen=True)
class DiscretizationParams:
    A: float
    delta: float
    a_bar: float
    b_scale: float


@dataclass
class SelectiveParams:
    """Per-frame step, write and read vectors of one sequence."""

    delta: object  # (T,) or (T, H), positive
    B: object  # (T, N)
    C: object  # (T, N)


def discretize(A: float, delta: float) -> DiscretizationParams:
    """Zero-order-hold decay for a negative scalar rate.

    The input scale uses the first-order approximation ``b_scale = delta``.
    """
    if not A < 0:
        raise ContractError(f"decay rate must be negative, got A={A}")
    if not delta > 0:
        raise ContractError(f"step must be positive, got delta={delta}")
    return DiscretizationParams(A=A, delta=delta, a_bar=math.exp(delta * A), b_scale=delta)


def exact_zoh_input_scale(A: float, delta: float) -> float:
    """Exact ZOH input factor ``(exp(delta A) - 1) / (delta A) * delta``."""
    return math.expm1(delta * A) / (delta * A) * delta


def cumulative_decay(a_bars, t: int, s: int) -> float:
    """Product of ``a_bars[n]`` for ``s < n <= t``; equals 1 when ``s == t``."""
    if not 0 <= s <= t < len(a_bars):
        raise ContractError(f"need 0 <= s <= t < T, got s={s}, t={t}, T={len(a_bars)}")
    out = 1.0
    for n in range(s + 1, t + 1):
        out *= float(a_bars[n])
    return out


def _check_scan_shapes(x: Tensor, dt: Tensor, A: Tensor, B: Tensor, C: Tensor, h0: Optional[Tensor]):
    if x.dim() < 3:
        raise ContractError(f"x must be (..., T, H, P), got {tuple(x.shape)}")
    T, H, P = x.shape[-3:]
    lead = x.shape[:-3]
    if dt.shape != (*lead, T, H):
        raise ContractError(f"dt shape {tuple(dt.shape)} != {(*lead, T, H)}")
    if A.shape != (H,):
        raise ContractError(f"A shape {tuple(A.shape)} != {(H,)}")
    if B.shape[:-1] != (*lead, T) or C.shape != B.shape:
        raise ContractError(f"B/C shapes {tuple(B.shape)}/{tuple(C.shape)} do not match x {tuple(x.shape)}")
    N = B.shape[-1]
    if h0 is not None and h0.shape != (*lead, H, P, N):
        raise ContractError(f"h0 shape {tuple(h0.shape)} != {(*lead, H, P, N)}")
    return T, H, P, N


def _zero_state(x: Tensor, N: int) -> Tensor:
    *lead, _, H, P = x.shape
    return x.new_zeros(*lead, H, P, N)


def recurrent_scan(
    x: Tensor,
    dt: Tensor,
    A: Tensor,
    B: Tensor,
    C: Tensor,
    h0: Optional[Tensor] = None,
) -> tuple[Tensor, Tensor]:
    """Frame-by-frame reference scan. Returns ``(y, h_final)``."""
    T, H, P, N = _check_scan_shapes(x, dt, A, B, C, h0)
    h = _zero_state(x, N) if h0 is None else h0
    a_bar = torch.exp(dt * A)
    ys = []
    for t in range(T):
        write = (dt[..., t, :, None] * x[..., t, :, :]).unsqueeze(-1) * B[..., t, None, None, :]
        h = a_bar[..., t, :, None, None] * h + write
        ys.append(torch.einsum("...hpn,...n->...hp", h, C[..., t, :]))
    return torch.stack(ys, dim=-3), h


def _segsum(log_a: Tensor) -> Tensor:
    """``out[..., h, t, s] = sum_{s < n <= t} log_a[..., n, h]`` below the diagonal, -inf above."""
    L = log_a.shape[-2]
    cs = torch.cumsum(log_a, dim=-2).transpose(-1, -2)  # (..., H, L)
    seg = cs[..., :, None] - cs[..., None, :]
    causal = torch.ones(L, L, dtype=torch.bool, device=log_a.device).tril()
    return seg.masked_fill(~causal, float("-inf"))


def ssd_chunk(
    x: Tensor, dt: Tensor, A: Tensor, B: Tensor, C: Tensor, h0: Tensor
) -> tuple[Tensor, Tensor]:
    """One chunk of the block (quadratic) form, continuing from state ``h0``."""
    log_a = dt * A  # (..., L, H)
    cs = torch.cumsum(log_a, dim=-2)  # (..., L, H)
    decay = torch.exp(_segsum(log_a))  # (..., H, L, L)
    gram = torch.einsum("...tn,...sn->...ts", C, B)
    xs = x * dt[..., None]
    y = torch.einsum("...hts,...ts,...shp->...thp", decay, gram, xs)
    y = y + torch.exp(cs)[..., None] * torch.einsum("...hpn,...tn->...thp", h0, C)
    tail = torch.exp(cs[..., -1:, :] - cs)  # decay from each frame to chunk end
    h_end = torch.exp(cs[..., -1, :])[..., None, None] * h0 + torch.einsum(
        "...sh,...shp,...sn->...hpn", tail, xs, B
    )
    return y, h_end


Boundary = Callable[[int, Tensor, Tensor], Tensor]


def chunked_scan(
    x: Tensor,
    dt: Tensor,
    A: Tensor,
    B: Tensor,
    C: Tensor,
    h0: Optional[Tensor] = None,
    chunk_size: int = 64,
    boundary: Optional[Boundary] = None,
) -> tuple[Tensor, list[Tensor]]:
    """Chunked scan with chunk-granular state transfer.

    A trailing partial chunk is processed at its natural length. If given,
    ``boundary(c, y_chunk, h_end)`` runs after every chunk (including the
    last) and returns the state handed to the next chunk.

    Returns ``(y, states)`` where ``states[c]`` is the state leaving chunk ``c``.
    """
    if int(chunk_size) != chunk_size or chunk_size < 1:
        raise ContractError(f"chunk_size must be a positive integer, got {chunk_size}")
    T, H, P, N = _check_scan_shapes(x, dt, A, B, C, h0)
    h = _zero_state(x, N) if h0 is None else h0
    ys, states = [], []
    for c, t0 in enumerate(range(0, T, chunk_size)):
        sl = slice(t0, min(t0 + chunk_size, T))
        y, h = ssd_chunk(x[..., sl, :, :], dt[..., sl, :], A, B[..., sl, :], C[..., sl, :], h)
        if boundary is not None:
            h = boundary(c, y, h)
        ys.append(y)
        states.append(h)
    if not ys:
        return x.new_zeros(x.shape), [h]
    return torch.cat(ys, dim=-3), states


@dataclass
class ConvCarry:
    """Last ``d_conv - 1`` frames entering a causal depthwise convolution."""

    tail: Tensor  # (..., d_conv - 1, channels)

    @classmethod
    def zeros(cls, d_conv: int, channels: int, *lead: int, dtype=None) -> "ConvCarry":
        return cls(torch.zeros(*lead, d_conv - 1, channels, dtype=dtype))


def causal_conv(
    x: Tensor, kernel: Tensor, carry: ConvCarry, bias: Optional[Tensor] = None
) -> tuple[Tensor, ConvCarry]:
    """Depthwise causal conv over ``x`` (..., T, ch) followed by SiLU.

    ``kernel[-1]`` multiplies the current frame. The carry rows are prepended,
    so splitting a sequence and threading the carry reproduces the unsplit
    output exactly.
    """
    d_conv, ch = kernel.shape
    if x.shape[-1] != ch:
        raise ContractError(f"x has {x.shape[-1]} channels, kernel has {ch}")
    if carry.tail.shape[-2:] != (d_conv - 1, ch):
        raise ContractError(
            f"carry tail must be ({d_conv - 1}, {ch}), got {tuple(carry.tail.shape[-2:])}"
        )
    T = x.shape[-2]
    tail = carry.tail.to(x.dtype).expand(*x.shape[:-2], d_conv - 1, ch)
    xp = torch.cat([tail, x], dim=-2)
    y = sum(kernel[k] * xp[..., k : k + T, :] for k in range(d_conv))
    if bias is not None:
        y = y + bias
    return F.silu(y), ConvCarry(xp[..., xp.shape[-2] - (d_conv - 1) :, :])
