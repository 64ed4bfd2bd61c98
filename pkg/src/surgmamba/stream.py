"""Per-frame streaming inference with a fixed-size state."""

from __future__ import annotations

import copy
import csv
import gc
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import stats
from torch import Tensor

from .model import PathState, SurgicalMamba
from .regram import RotationOp, angle_stats, plane_cosine
from .ssm import ContractError


@dataclass
class StepResult:
    logits: Tensor  # (C,)
    probs: Tensor  # (C,)
    lam: Tensor  # (K,)
    dA: Tensor  # (K, H) log-decay of the slow path
    dh_rel: float
    rotation: Optional[RotationOp]  # first-layer slow rotation if a chunk closed


def relative_state_change(h_prev: Tensor, h_new: Tensor) -> float:
    denom = float(h_prev.norm())
    return float((h_new - h_prev).norm()) / denom if denom > 0 else 0.0


class StreamEngine:
    """Advance every recurrence of the model one frame at a time.

    The slow paths carry forever; fast paths and the output head reset every
    ``clip_len`` frames, and regram fires every ``chunk_size`` frames since
    the clip started (and at clip end), matching clip-mode processing.
    """

    def __init__(self, model: SurgicalMamba, clip_len: Optional[int] = None):
        self.model = model.eval()
        self.cfg = model.cfg
        self.clip_len = int(clip_len or self.cfg.clip_len)
        self.reset()

    def reset(self) -> None:
        dtype = self.model.dtype
        self.slow = [b.slow.ssm.zero_state(1, dtype) for b in self.model.blocks]
        self._start_clip()
        self.frames = 0

    def _start_clip(self) -> None:
        dtype = self.model.dtype
        self.fast = [b.fast.ssm.zero_state(1, dtype) for b in self.model.blocks]
        self.head = self.model.head.ssm.zero_state(1, dtype)
        self.pos = 0

    def snapshot(self) -> dict:
        return copy.deepcopy({"slow": self.slow, "fast": self.fast, "head": self.head,
                              "pos": self.pos, "frames": self.frames})

    def restore(self, snap: dict) -> None:
        snap = copy.deepcopy(snap)
        self.slow, self.fast, self.head = snap["slow"], snap["fast"], snap["head"]
        self.pos, self.frames = snap["pos"], snap["frames"]

    def state_nbytes(self) -> int:
        states: list[PathState] = [*self.slow, *self.fast, self.head]
        return sum(s.nbytes() for s in states)

    @torch.no_grad()
    def step(self, frame) -> StepResult:
        frame = torch.as_tensor(frame, dtype=self.model.dtype)
        if frame.shape != (self.cfg.d_feature,):
            raise ContractError(f"frame must have {self.cfg.d_feature} features, got {tuple(frame.shape)}")
        if not torch.isfinite(frame).all():
            raise ContractError("non-finite frame")
        if self.pos == self.clip_len:
            self._start_clip()
        self.pos += 1
        chunk_end = self.pos % self.cfg.chunk_size == 0 or self.pos == self.clip_len

        h = self.model.proj_norm(self.model.proj(frame.unsqueeze(0)))
        h_prev = self.slow[0].h.clone()
        lams, dAs, first_op = [], [], None
        for k, block in enumerate(self.model.blocks):
            h, lam, log_decay, op = block.step(h, self.slow[k], self.fast[k], chunk_end)
            lams.append(lam[0])
            dAs.append(log_decay[0])
            if k == 0:
                first_op = op
        logits = self.model.head.step(h, self.head, chunk_end)[0]
        self.frames += 1
        return StepResult(
            logits=logits,
            probs=torch.softmax(logits, dim=-1),
            lam=torch.stack(lams),
            dA=torch.stack(dAs),
            dh_rel=relative_state_change(h_prev, self.slow[0].h),
            rotation=None if first_op is None else first_op.select(0),
        )


def stream(engine: StreamEngine, features) -> list[StepResult]:
    return [engine.step(f) for f in torch.as_tensor(features, dtype=engine.model.dtype)]


@dataclass
class BenchReport:
    report_points: list[int]
    median_latency_s: list[float]
    state_bytes: list[int]
    slope_s_per_frame: float
    slope_ci95: tuple[float, float]
    frames: int

    def rows(self) -> list[dict]:
        return [
            {"frame": p, "median_latency_s": m, "state_bytes": b}
            for p, m, b in zip(self.report_points, self.median_latency_s, self.state_bytes)
        ]


def bench(
    engine: StreamEngine,
    T_total: int,
    report_points: Sequence[int] = (100, 1000, 10000),
    window: int = 200,
    seed: int = 0,
    warmup: int = 300,
    rounds: int = 5,
    block: int = 20,
) -> BenchReport:
    """Per-frame latency at several stream positions.

    One pass streams ``T_total`` frames, recording the state size at each
    report point and a snapshot of the engine at the start of every
    ``block``-frame slice of each report window. Timing then replays the
    slices round-robin across report points (shuffled, ``rounds`` times), so
    machine-wide drift lands on every position alike instead of looking like
    a trend with frame index. The reported latency per point is the median
    over all its replayed frames; the slope is an ordinary least-squares fit
    of per-slice median latency against frame index.
    """
    report_points = sorted(int(p) for p in report_points)
    half = window // 2
    if window % block:
        raise ContractError("window must be a multiple of block")
    if report_points[0] < half:
        raise ContractError(f"report points must be at least window/2 = {half}")
    if T_total < report_points[-1] + half:
        raise ContractError(f"T_total={T_total} must cover the last report window")
    gen = torch.Generator().manual_seed(seed)
    pool = torch.randn(1024, engine.cfg.d_feature, generator=gen).to(engine.model.dtype)
    frame = lambda t: pool[t % pool.shape[0]]  # noqa: E731

    engine.reset()
    for t in range(warmup):
        engine.step(frame(t))
    engine.reset()
    slices = {p - half + b: p for p in report_points for b in range(0, window, block)}
    snaps, nbytes = {}, {}
    for t in range(T_total):
        if t in slices:
            snaps[t] = engine.snapshot()
        engine.step(frame(t))
        if t + 1 in report_points:
            nbytes[t + 1] = engine.state_nbytes()

    rng = np.random.default_rng(seed)
    per_point = {p: [] for p in report_points}
    xs, ys = [], []
    lat = np.empty(block)
    gc_was_on = gc.isenabled()
    gc.disable()
    try:
        for _ in range(rounds):
            for b in range(0, window, block):
                for p in rng.permutation(report_points):
                    t_start = int(p) - half + b
                    engine.restore(snaps[t_start])
                    for i in range(block):
                        f = frame(t_start + i)
                        t0 = time.perf_counter()
                        engine.step(f)
                        lat[i] = time.perf_counter() - t0
                    per_point[int(p)].extend(lat)
                    xs.append(int(p))
                    ys.append(float(np.median(lat)))
    finally:
        if gc_was_on:
            gc.enable()
    medians = [float(np.median(per_point[p])) for p in report_points]
    fit = stats.linregress(xs, ys)
    tq = stats.t.ppf(0.975, len(xs) - 2)
    ci = (fit.slope - tq * fit.stderr, fit.slope + tq * fit.stderr)
    return BenchReport(report_points, medians, [nbytes[p] for p in report_points],
                       float(fit.slope), (float(ci[0]), float(ci[1])), T_total)


def trace_export(
    engine: StreamEngine,
    features,
    out_dir,
    max_prior: Optional[int] = None,
    state_every: int = 0,
    figures: bool = True,
) -> dict[str, Path]:
    """Stream ``features`` through a fresh engine and write per-frame and per-chunk traces."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create trace directory {out_dir}: {exc}") from exc
    engine.reset()
    K = engine.cfg.n_layers
    frame_rows, ops, op_frames, states = [], [], [], []
    for t, f in enumerate(torch.as_tensor(features, dtype=engine.model.dtype)):
        r = engine.step(f)
        dA = r.dA.double().numpy()
        lam = r.lam.double().numpy()
        row = [t, int(r.probs.argmax())]
        row += [float(v) for v in lam]
        row += [float(dA[k].mean()) for k in range(K)]
        # order statistics over every (layer, head) decay of this frame
        flat = dA.ravel()
        row += [float(np.percentile(flat, 10)), float(flat.mean()), float(np.percentile(flat, 90)),
                float(lam.mean()), r.dh_rel]
        frame_rows.append(row)
        if r.rotation is not None:
            ops.append(r.rotation)
            op_frames.append(t)
        if state_every and t % state_every == 0:
            states.append(engine.slow[0].h[0].double().numpy().copy())

    paths = {"frames": out_dir / "frames.csv", "chunks": out_dir / "chunks.csv",
             "plane_cosine": out_dir / "plane_cosine.csv"}
    header = (["frame", "pred"] + [f"lambda_{k}" for k in range(K)] + [f"dA_mean_{k}" for k in range(K)]
              + ["dA_p10", "dA_mean", "dA_p90", "lambda_mean", "dh_rel"])
    _write_csv(paths["frames"], header, frame_rows)

    H = engine.cfg.n_heads
    chunk_header = ["chunk", "frame_end", "self_cosine"]
    for h in range(H):
        chunk_header += [f"angle_min_{h}", f"angle_mean_{h}", f"angle_max_{h}"]
    chunk_rows, pair_rows = [], []
    for c, (op, t) in enumerate(zip(ops, op_frames)):
        ang = angle_stats(op)
        chunk_rows.append([c, t, plane_cosine(op, op)] + [float(v) for v in ang.ravel()])
        first = 0 if max_prior is None else max(0, c - max_prior)
        for prior in range(first, c + 1):
            pair_rows.append([c, prior, plane_cosine(op, ops[prior])])
    _write_csv(paths["chunks"], chunk_header, chunk_rows)
    _write_csv(paths["plane_cosine"], ["chunk", "prior_chunk", "plane_cosine"], pair_rows)

    if states:
        paths["states"] = out_dir / "slow_states.npy"
        np.save(paths["states"], np.stack(states))
    if figures:
        from . import plotting

        paths.update(plotting.trace_figures(out_dir, np.asarray(frame_rows), K, pair_rows, chunk_rows, H))
    return paths


def _write_csv(path: Path, header: list[str], rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
