"""Dual-path temporal model.

Each block routes its (pre-normed) input through a slow path that carries
SSM and conv state across clips and warps its step by a learned intensity,
and a fast path that resets every clip and reads the slow output through its
selective projection. Both paths regram their state at chunk boundaries.
Outputs are summed, gated, normalized and projected back residually.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .regram import Regrammer, RotationOp, apply_regram, chunk_summary
from .ssm import ContractError, ConvCarry, causal_conv, chunked_scan
from .timewarp import IntensityNet


@dataclass
class ModelConfig:
    d_feature: int = 256
    d_model: int = 256
    expand: int = 2
    head_dim: int = 64
    d_state: int = 64
    d_conv: int = 4
    chunk_size: int = 64
    n_layers: int = 4
    rank: int = 16
    n_classes: int = 7
    clip_len: int = 256
    use_intensity: bool = True
    use_regram: bool = True
    use_fast: bool = True
    use_skip: bool = True

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def n_heads(self) -> int:
        return self.d_inner // self.head_dim

    def __post_init__(self):
        if self.d_inner % self.head_dim:
            raise ContractError(f"d_inner={self.d_inner} not divisible by head_dim={self.head_dim}")

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(d_feature=16, d_model=16, expand=2, head_dim=16, d_state=8, d_conv=4,
                    chunk_size=8, n_layers=1, rank=2, n_classes=4, clip_len=32)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class CarryState:
    """Slow-path baggage handed from one clip to the next."""

    ssm: Tensor  # (B, H, P, N)
    conv: ConvCarry

    @classmethod
    def zeros(cls, cfg: ModelConfig, batch: int, dtype=torch.float32) -> "CarryState":
        ssm = torch.zeros(batch, cfg.n_heads, cfg.head_dim, cfg.d_state, dtype=dtype)
        return cls(ssm, ConvCarry.zeros(cfg.d_conv, cfg.d_inner, batch, dtype=dtype))

    def detach(self) -> "CarryState":
        return CarryState(self.ssm.detach(), ConvCarry(self.conv.tail.detach()))


@dataclass
class ModelOutputs:
    logits: Tensor  # (B, T, C)
    lambdas: Tensor  # (K, B, T)
    carries: list[CarryState]
    diagnostics: dict = field(default_factory=dict)


@dataclass
class PathState:
    """Per-frame streaming state of one selective path."""

    h: Tensor  # (B, H, P, N)
    conv: ConvCarry
    acc: Tensor  # running sum of read-outs in the current chunk, (B, H, P)
    count: int = 0

    def nbytes(self) -> int:
        return sum(t.element_size() * t.nelement() for t in (self.h, self.conv.tail, self.acc))


def inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class SelectiveSSM(nn.Module):
    """Conv, selective projections, scalar-decay scan and boundary regram of one path."""

    def __init__(self, cfg: ModelConfig, d_select: int):
        super().__init__()
        self.cfg = cfg
        H, N, d = cfg.n_heads, cfg.d_state, cfg.d_inner
        self.conv_weight = nn.Parameter(torch.randn(cfg.d_conv, d) / math.sqrt(cfg.d_conv))
        self.conv_bias = nn.Parameter(torch.zeros(d))
        self.x_proj = nn.Linear(d_select, H + 2 * N, bias=False)
        self.dt_proj = nn.Linear(H, H)
        # -ln(a_bar) log-spaced so a_bar spans 0.9..0.99 at unit step
        rates = torch.logspace(math.log10(-math.log(0.99)), math.log10(-math.log(0.9)), H)
        self.a_raw = nn.Parameter(torch.tensor([inverse_softplus(float(v)) for v in rates]))
        self.D = nn.Parameter(torch.ones(d))
        self.regram = Regrammer(H, cfg.head_dim, N, cfg.rank)
        with torch.no_grad():
            self.dt_proj.weight.mul_(0.1)
            self.dt_proj.bias.fill_(inverse_softplus(1.0))

    @property
    def A(self) -> Tensor:
        return -F.softplus(self.a_raw)

    def conv(self, x: Tensor, carry: ConvCarry) -> tuple[Tensor, ConvCarry]:
        return causal_conv(x, self.conv_weight, carry, self.conv_bias)

    def select(self, u: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        H, N = self.cfg.n_heads, self.cfg.d_state
        dt_raw, B, C = self.x_proj(u).split([H, N, N], dim=-1)
        return self.dt_proj(dt_raw), B, C

    def scan(self, xc: Tensor, dt: Tensor, B: Tensor, C: Tensor, h0: Tensor,
             rotations: Optional[list] = None) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        x = xc.unflatten(-1, (cfg.n_heads, cfg.head_dim))

        def boundary(c: int, y_chunk: Tensor, h: Tensor) -> Tensor:
            op = self.regram(y_chunk)
            if rotations is not None:
                rotations.append(op)
            return apply_regram(h, op.Z)

        y, states = chunked_scan(x, dt, self.A, B, C, h0, cfg.chunk_size,
                                 boundary if cfg.use_regram else None)
        if cfg.use_skip:
            y = y + x * self.D.view(cfg.n_heads, cfg.head_dim)
        return y.flatten(-2), states[-1]

    def step(self, xc: Tensor, dt: Tensor, B: Tensor, C: Tensor, state: PathState,
             chunk_end: bool) -> tuple[Tensor, Optional[RotationOp]]:
        """One frame of the recurrence; ``xc`` is (B, d_inner), ``dt`` (B, H)."""
        cfg = self.cfg
        x = xc.unflatten(-1, (cfg.n_heads, cfg.head_dim))
        a_bar = torch.exp(dt * self.A)
        write = (dt[..., None] * x).unsqueeze(-1) * B[:, None, None, :]
        state.h = a_bar[..., None, None] * state.h + write
        read = torch.einsum("bhpn,bn->bhp", state.h, C)
        state.acc = state.acc + read
        state.count += 1
        op = None
        if chunk_end:
            if cfg.use_regram:
                phi = chunk_summary((state.acc / state.count).unsqueeze(-3), self.regram.norm)
                op = self.regram.rotation_from_summary(phi)
                state.h = apply_regram(state.h, op.Z)
            state.acc = torch.zeros_like(state.acc)
            state.count = 0
        y = read + x * self.D.view(cfg.n_heads, cfg.head_dim) if cfg.use_skip else read
        return y.flatten(-2), op

    def zero_state(self, batch: int, dtype) -> PathState:
        cfg = self.cfg
        return PathState(
            h=torch.zeros(batch, cfg.n_heads, cfg.head_dim, cfg.d_state, dtype=dtype),
            conv=ConvCarry.zeros(cfg.d_conv, cfg.d_inner, batch, dtype=dtype),
            acc=torch.zeros(batch, cfg.n_heads, cfg.head_dim, dtype=dtype),
        )


class SlowPath(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.d_model, cfg.d_inner, bias=False)
        self.ssm = SelectiveSSM(cfg, cfg.d_inner)
        self.intensity = IntensityNet(cfg.d_inner)

    def warp(self, xc: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        dt_pre, B, C = self.ssm.select(xc)
        if self.cfg.use_intensity:
            lam = self.intensity(xc)
        else:
            lam = xc.new_zeros(xc.shape[:-1])
        dt = (1 + lam)[..., None] * F.softplus(dt_pre)
        return dt, B, C, lam

    def forward(self, u: Tensor, carry: CarryState, rotations: Optional[list] = None):
        cfg = self.cfg
        if carry.ssm.shape[-3:] != (cfg.n_heads, cfg.head_dim, cfg.d_state):
            raise ContractError(f"carry state shape {tuple(carry.ssm.shape)} does not match the model")
        xc, conv = self.ssm.conv(self.in_proj(u), carry.conv)
        dt, B, C, lam = self.warp(xc)
        y, h = self.ssm.scan(xc, dt, B, C, carry.ssm, rotations)
        return y, lam, CarryState(h, conv), dt * self.ssm.A

    def step(self, u: Tensor, state: PathState, chunk_end: bool):
        xc, state.conv = self.ssm.conv(self.in_proj(u).unsqueeze(-2), state.conv)
        xc = xc.squeeze(-2)
        dt, B, C, lam = self.warp(xc)
        y, op = self.ssm.step(xc, dt, B, C, state, chunk_end)
        return y, lam, dt * self.ssm.A, op


class FastPath(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.d_model, 2 * cfg.d_inner, bias=False)
        self.ssm = SelectiveSSM(cfg, 2 * cfg.d_inner)

    def select(self, xc: Tensor, y_slow: Tensor):
        dt_pre, B, C = self.ssm.select(torch.cat([xc, y_slow], dim=-1))
        return F.softplus(dt_pre), B, C

    def forward(self, u: Tensor, y_slow: Tensor, rotations: Optional[list] = None):
        cfg = self.cfg
        if y_slow.shape[:-1] != u.shape[:-1]:
            raise ContractError("slow output is not time-aligned with the block input")
        x, z = self.in_proj(u).chunk(2, dim=-1)
        if not cfg.use_fast:
            return torch.zeros_like(y_slow), z
        batch = u.shape[0]
        xc, _ = self.ssm.conv(x, ConvCarry.zeros(cfg.d_conv, cfg.d_inner, batch, dtype=u.dtype))
        dt, B, C = self.select(xc, y_slow)
        h0 = u.new_zeros(batch, cfg.n_heads, cfg.head_dim, cfg.d_state)
        y, _ = self.ssm.scan(xc, dt, B, C, h0, rotations)
        return y, z

    def step(self, u: Tensor, y_slow: Tensor, state: PathState, chunk_end: bool):
        x, z = self.in_proj(u).chunk(2, dim=-1)
        if not self.cfg.use_fast:
            return torch.zeros_like(y_slow), z
        xc, state.conv = self.ssm.conv(x.unsqueeze(-2), state.conv)
        xc = xc.squeeze(-2)
        dt, B, C = self.select(xc, y_slow)
        y, _ = self.ssm.step(xc, dt, B, C, state, chunk_end)
        return y, z


class DualPathBlock(nn.Module):
    """Pre-norm residual block: ``x + mixer(LN x)`` then ``+ FFN(LN .)``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.slow = SlowPath(cfg)
        self.fast = FastPath(cfg)
        self.out_norm = nn.RMSNorm(cfg.d_inner, eps=1e-6)
        self.out_proj = nn.Linear(cfg.d_inner, cfg.d_model, bias=False)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.d_model, 4 * cfg.d_model), nn.GELU(), nn.Linear(4 * cfg.d_model, cfg.d_model)
        )

    def fuse(self, y_slow: Tensor, y_fast: Tensor, z: Tensor) -> Tensor:
        return self.out_proj(self.out_norm((y_slow + y_fast) * F.silu(z)))

    def forward(self, h: Tensor, carry: CarryState, diag: Optional[dict] = None):
        slow_rot = [] if diag is not None else None
        fast_rot = [] if diag is not None else None
        u = self.norm1(h)
        y_slow, lam, carry, log_decay = self.slow(u, carry, slow_rot)
        y_fast, z = self.fast(u, y_slow, fast_rot)
        h = h + self.fuse(y_slow, y_fast, z)
        h = h + self.ffn(self.norm2(h))
        if diag is not None:
            diag.update(dA=log_decay, slow_rotations=slow_rot, fast_rotations=fast_rot, y_slow=y_slow)
        return h, lam, carry

    def step(self, h: Tensor, slow: PathState, fast: PathState, chunk_end: bool):
        u = self.norm1(h)
        y_slow, lam, log_decay, op = self.slow.step(u, slow, chunk_end)
        y_fast, z = self.fast.step(u, y_slow, fast, chunk_end)
        h = h + self.fuse(y_slow, y_fast, z)
        h = h + self.ffn(self.norm2(h))
        return h, lam, log_decay, op


class OutputHead(nn.Module):
    """LN, split into stream and gate, conv + scan + regram (reset per clip), gate, classify."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.norm = nn.LayerNorm(cfg.d_model)
        self.in_proj = nn.Linear(cfg.d_model, 2 * cfg.d_inner, bias=False)
        self.ssm = SelectiveSSM(cfg, cfg.d_inner)
        self.classifier = nn.Linear(cfg.d_inner, cfg.n_classes)

    def forward(self, h: Tensor, rotations: Optional[list] = None) -> Tensor:
        cfg = self.cfg
        x, z = self.in_proj(self.norm(h)).chunk(2, dim=-1)
        batch = h.shape[0]
        xc, _ = self.ssm.conv(x, ConvCarry.zeros(cfg.d_conv, cfg.d_inner, batch, dtype=h.dtype))
        dt_pre, B, C = self.ssm.select(xc)
        h0 = h.new_zeros(batch, cfg.n_heads, cfg.head_dim, cfg.d_state)
        y, _ = self.ssm.scan(xc, F.softplus(dt_pre), B, C, h0, rotations)
        return self.classifier(y * F.silu(z))

    def step(self, h: Tensor, state: PathState, chunk_end: bool) -> Tensor:
        x, z = self.in_proj(self.norm(h)).chunk(2, dim=-1)
        xc, state.conv = self.ssm.conv(x.unsqueeze(-2), state.conv)
        xc = xc.squeeze(-2)
        dt_pre, B, C = self.ssm.select(xc)
        y, _ = self.ssm.step(xc, F.softplus(dt_pre), B, C, state, chunk_end)
        return self.classifier(y * F.silu(z))


class SurgicalMamba(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.d_feature, cfg.d_model)
        self.proj_norm = nn.LayerNorm(cfg.d_model)
        self.blocks = nn.ModuleList(DualPathBlock(cfg) for _ in range(cfg.n_layers))
        self.head = OutputHead(cfg)

    @property
    def dtype(self) -> torch.dtype:
        return self.proj.weight.dtype

    def initial_carries(self, batch: int) -> list[CarryState]:
        return [CarryState.zeros(self.cfg, batch, self.dtype) for _ in self.blocks]

    def forward(self, features: Tensor, carries: Optional[list[CarryState]] = None,
                diagnostics: bool = False) -> ModelOutputs:
        """Process one clip. ``features`` is (B, T, d_feature) or (T, d_feature)."""
        squeeze = features.dim() == 2
        if squeeze:
            features = features.unsqueeze(0)
        if features.shape[-1] != self.cfg.d_feature:
            raise ContractError(f"expected {self.cfg.d_feature} features, got {features.shape[-1]}")
        if carries is None:
            carries = self.initial_carries(features.shape[0])
        if len(carries) != len(self.blocks):
            raise ContractError(f"need {len(self.blocks)} carries, got {len(carries)}")
        h = self.proj_norm(self.proj(features))
        lams, new_carries, layer_diag = [], [], []
        for block, carry in zip(self.blocks, carries):
            d = {} if diagnostics else None
            h, lam, carry = block(h, carry, d)
            lams.append(lam)
            new_carries.append(carry)
            layer_diag.append(d)
        head_rot = [] if diagnostics else None
        logits = self.head(h, head_rot)
        diag = {}
        if diagnostics:
            diag = {
                "dA": torch.stack([d["dA"] for d in layer_diag]),  # (K, B, T, H) log-decay
                "slow_rotations": [d["slow_rotations"] for d in layer_diag],
                "fast_rotations": [d["fast_rotations"] for d in layer_diag],
                "head_rotations": head_rot,
                "y_slow": [d["y_slow"] for d in layer_diag],
            }
        out = ModelOutputs(logits, torch.stack(lams), new_carries, diag)
        if squeeze:
            out.logits = out.logits[0]
            out.lambdas = out.lambdas[:, 0]
        return out


def run_video(model: SurgicalMamba, features: Tensor, clip_len: int,
              carries: Optional[list[CarryState]] = None) -> ModelOutputs:
    """Clip-by-clip forward over a whole video (B, T, F), threading the slow carries."""
    squeeze = features.dim() == 2
    if squeeze:
        features = features.unsqueeze(0)
    T = features.shape[1]
    logits, lams = [], []
    for t0 in range(0, T, clip_len):
        out = model(features[:, t0:t0 + clip_len], carries)
        carries = out.carries
        logits.append(out.logits)
        lams.append(out.lambdas)
    out = ModelOutputs(torch.cat(logits, dim=1), torch.cat(lams, dim=2), carries)
    if squeeze:
        out.logits, out.lambdas = out.logits[0], out.lambdas[:, 0]
    return out
