"""Dense transfer-matrix view of the scan with boundary rotations.

For one head with a single channel the map ``x -> y`` over a sequence split
into chunks is a block lower-triangular matrix whose ``(c, c')`` block has
entries ``a(t:s) dt_s B_s^T Z_{c',c} C_t``, where ``Z_{c',c}`` is the ordered
product of the boundary rotations crossed between the two chunks. Everything
here is plain numpy and deliberately shares no code with the torch scan.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .ssm import ContractError, SelectiveParams, chunked_scan

MAX_DENSE_T = 1024
RANK_RTOL = 1e-10


@dataclass
class TransferMatrix:
    blocks: dict[tuple[int, int], np.ndarray]  # (c, c') -> block, c >= c'
    trails: dict[tuple[int, int], tuple[int, ...]]  # rotation indices in each block's factor
    factors: dict[tuple[int, int], np.ndarray]
    chunk_size: int
    n_chunks: int
    T: int
    N: int
    rotations: list[np.ndarray] = field(repr=False, default_factory=list)

    def dense(self) -> np.ndarray:
        M = np.zeros((self.T, self.T))
        cs = self.chunk_size
        for (c, cp), blk in self.blocks.items():
            M[c * cs : c * cs + blk.shape[0], cp * cs : cp * cs + blk.shape[1]] = blk
        return M


def z_trail(rotations, c_from: int, c_to: int) -> np.ndarray:
    """``Z[c_from] Z[c_from+1] ... Z[c_to-1]``; identity when the indices agree."""
    if c_from > c_to:
        raise ContractError(f"z_trail needs c_from <= c_to, got {c_from} > {c_to}")
    rotations = [np.asarray(z, dtype=np.float64) for z in rotations]
    N = rotations[0].shape[0] if rotations else 0
    out = np.eye(N)
    for j in range(c_from, c_to):
        out = out @ rotations[j]
    return out


def cumulative_decays(a_bars: np.ndarray) -> np.ndarray:
    """``L[t, s] = prod_{s < n <= t} a_bars[n]`` for ``s <= t``, zero above the diagonal."""
    a_bars = np.asarray(a_bars, dtype=np.float64)
    T = len(a_bars)
    L = np.zeros((T, T))
    for s in range(T):
        L[s, s] = 1.0
        for t in range(s + 1, T):
            L[t, s] = L[t - 1, s] * a_bars[t]
    return L


def build_transfer_matrix(sel: SelectiveParams, a_bars, rotations, chunk_size: int) -> TransferMatrix:
    delta = np.asarray(sel.delta, dtype=np.float64).reshape(-1)
    B = np.asarray(sel.B, dtype=np.float64)
    C = np.asarray(sel.C, dtype=np.float64)
    T, N = B.shape
    if T > MAX_DENSE_T:
        raise ContractError(f"dense materialization refused for T={T} > {MAX_DENSE_T}")
    n_c = -(-T // chunk_size)
    rotations = [np.asarray(z, dtype=np.float64) for z in rotations]
    if len(rotations) < n_c - 1:
        raise ContractError(f"need {n_c - 1} boundary rotations, got {len(rotations)}")
    L = cumulative_decays(a_bars)
    blocks, trails, factors = {}, {}, {}
    for c in range(n_c):
        rows = slice(c * chunk_size, min((c + 1) * chunk_size, T))
        for cp in range(c + 1):
            cols = slice(cp * chunk_size, min((cp + 1) * chunk_size, T))
            Zf = z_trail(rotations, cp, c) if N else np.eye(0)
            # (B_s^T Zf C_t) for every (t, s) in the block
            bilinear = C[rows] @ Zf.T @ B[cols].T
            blocks[(c, cp)] = L[rows, cols] * bilinear * delta[cols][None, :]
            trails[(c, cp)] = tuple(range(cp, c))
            factors[(c, cp)] = Zf
    return TransferMatrix(blocks, trails, factors, chunk_size, n_c, T, N, rotations)


def _torch_scan_with_rotations(x, sel: SelectiveParams, A: float, rotations, chunk_size: int, h0=None):
    """Chunked torch scan for a single head with one channel, rotating at each boundary."""
    xt = torch.as_tensor(np.asarray(x, dtype=np.float64)).reshape(-1, 1, 1)
    T = xt.shape[0]
    dt = torch.as_tensor(np.asarray(sel.delta, dtype=np.float64)).reshape(T, 1)
    Bt = torch.as_tensor(np.asarray(sel.B, dtype=np.float64))
    Ct = torch.as_tensor(np.asarray(sel.C, dtype=np.float64))
    Zs = [torch.as_tensor(np.asarray(z, dtype=np.float64)) for z in rotations]
    At = torch.tensor([A], dtype=torch.float64)
    h0t = None if h0 is None else torch.as_tensor(np.asarray(h0, dtype=np.float64)).reshape(1, 1, -1)

    def boundary(c, y, h):
        return h @ Zs[c] if c < len(Zs) else h

    y, _ = chunked_scan(xt, dt, At, Bt, Ct, h0t, chunk_size, boundary)
    return y.reshape(T).numpy()


def verify_scan_vs_matrix(x, sel: SelectiveParams, A: float, rotations, chunk_size: int) -> float:
    """Max |scan(x) - M x| with the same rotations applied at every boundary."""
    a_bars = np.exp(np.asarray(sel.delta, dtype=np.float64).reshape(-1) * A)
    M = build_transfer_matrix(sel, a_bars, rotations, chunk_size).dense()
    y_scan = _torch_scan_with_rotations(x, sel, A, rotations, chunk_size)
    return float(np.max(np.abs(y_scan - M @ np.asarray(x, dtype=np.float64))))


def numerical_rank(block: np.ndarray, rtol: float = RANK_RTOL) -> int:
    s = np.linalg.svd(block, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


@dataclass
class CheckReport:
    max_offdiag_rank: int
    rank_ok: bool
    joint_rotation_diff: float
    state_only_diff: float


def rank_and_equivariance_checks(M: TransferMatrix, x, sel: SelectiveParams, A: float, h0, Q) -> CheckReport:
    """Rank bound on every off-diagonal block plus the two equivariance probes.

    The joint probe rotates the initial state, every write and read vector,
    and conjugates each boundary rotation by ``Q``; the output must not move.
    The state-only probe rotates just the initial state.
    """
    ranks = [numerical_rank(b) for (c, cp), b in M.blocks.items() if c > cp]
    max_rank = max(ranks, default=0)
    Q = np.asarray(Q, dtype=np.float64)
    h0 = np.asarray(h0, dtype=np.float64)
    base = _torch_scan_with_rotations(x, sel, A, M.rotations, M.chunk_size, h0)
    B = np.asarray(sel.B, dtype=np.float64)
    C = np.asarray(sel.C, dtype=np.float64)
    joint_sel = SelectiveParams(sel.delta, B @ Q, C @ Q)
    joint_rot = [Q.T @ z @ Q for z in M.rotations]
    joint = _torch_scan_with_rotations(x, joint_sel, A, joint_rot, M.chunk_size, h0 @ Q)
    state_only = _torch_scan_with_rotations(x, sel, A, M.rotations, M.chunk_size, h0 @ Q)
    return CheckReport(
        max_offdiag_rank=max_rank,
        rank_ok=max_rank <= M.N,
        joint_rotation_diff=float(np.max(np.abs(joint - base))),
        state_only_diff=float(np.max(np.abs(state_only - base))),
    )


def random_orthogonal(rng: np.random.Generator, N: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((N, N)))
    return q * np.sign(np.diag(r))


def random_instance(rng: np.random.Generator, T: int = 32, N: int = 4, chunk_size: int = 8):
    """Random single-head instance: ``(x, sel, A, rotations)``."""
    n_c = -(-T // chunk_size)
    x = rng.standard_normal(T)
    sel = SelectiveParams(
        delta=rng.uniform(0.05, 0.5, T), B=rng.standard_normal((T, N)), C=rng.standard_normal((T, N))
    )
    A = -float(rng.uniform(0.1, 1.0))
    rotations = [random_orthogonal(rng, N) for _ in range(n_c)]
    return x, sel, A, rotations
