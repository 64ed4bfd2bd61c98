"""Truncated-BPTT training with cross-clip carry, evaluation and gradient checks."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .io import FeatureClip
from .losses import LossBreakdown, PhaseTargets, total_loss
from .metrics import PhaseMetrics, phase_metrics
from .model import CarryState, ModelConfig, SurgicalMamba, run_video
from .ssm import ContractError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 50
    warmup_epochs: int = 10
    clip_len: int = 64
    window: int = 6
    batch_videos: int = 4
    w_sm: float = 1.0
    w_trans: float = 1.0
    smoothing: float = 0.1
    grad_clip: float = 1.0
    precision: str = "single"
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ContractError("TBPTT window must be >= 1")
        if self.clip_len < 1:
            raise ContractError("clip length must be positive")
        if self.precision not in ("single", "double"):
            raise ContractError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "double" else torch.float32


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ClipBatch:
    """One clip from each of a batch of videos, all starting at frame ``start``."""

    features: Tensor  # (B, L, F)
    targets: PhaseTargets
    video_ids: tuple
    start: int

    @property
    def length(self) -> int:
        return self.features.shape[1]


def make_clips(videos: Sequence[FeatureClip], video_ids: Sequence, clip_len: int,
               dtype=torch.float32) -> list[ClipBatch]:
    """Pad a batch of videos to a common length and cut it into clips.

    Padding repeats each video's last label so no spurious transition appears;
    padded frames carry mask 0.
    """
    T = max(v.T for v in videos)
    Fdim = videos[0].features.shape[1]
    feats = np.zeros((len(videos), T, Fdim), np.float32)
    labels = np.zeros((len(videos), T), np.int64)
    mask = np.zeros((len(videos), T), np.float32)
    for i, v in enumerate(videos):
        feats[i, : v.T] = v.features
        labels[i, : v.T] = v.labels
        labels[i, v.T :] = v.labels[-1]
        mask[i, : v.T] = 1.0 if v.mask is None else v.mask
    clips = []
    for t0 in range(0, T, clip_len):
        sl = slice(t0, t0 + clip_len)
        targets = PhaseTargets.from_labels(labels[:, sl], mask[:, sl], dtype=dtype)
        clips.append(ClipBatch(torch.as_tensor(feats[:, sl]).to(dtype), targets, tuple(video_ids), t0))
    return clips


def window_loss(model: SurgicalMamba, clips: Sequence[ClipBatch], carries: Optional[list[CarryState]],
                w_sm: float = 1.0, w_trans: float = 1.0, smoothing: float = 0.1):
    """Forward ``clips`` in order, threading carries; mean of per-clip losses."""
    for a, b in zip(clips, clips[1:]):
        if a.video_ids != b.video_ids:
            raise ContractError("clips in one TBPTT window must come from the same videos")
        if b.start != a.start + a.length:
            raise ContractError("clips in one TBPTT window must be contiguous")
    if not model.cfg.use_intensity:
        w_trans = 0.0
    parts = []
    for clip in clips:
        if float(clip.targets.mask.sum()) == 0:
            break
        out = model(clip.features, carries)
        carries = out.carries
        parts.append(total_loss(out, clip.targets, w_sm, w_trans, smoothing))
    if not parts:
        return None, carries
    mean = lambda name: torch.stack([getattr(p, name) for p in parts]).mean()  # noqa: E731
    return LossBreakdown(mean("ce"), mean("smooth"), mean("trans"), mean("total"), w_sm, w_trans), carries


def tbptt_step(model: SurgicalMamba, optimizer: torch.optim.Optimizer, clips: Sequence[ClipBatch],
               carries: Optional[list[CarryState]], cfg: TrainConfig,
               scheduler=None) -> tuple[Optional[LossBreakdown], list[CarryState]]:
    """One optimizer update over a window of contiguous clips.

    The carry entering the window is detached, so gradients stop at the
    window's left edge; the carry leaving it is returned detached.
    """
    if carries is not None:
        carries = [c.detach() for c in carries]
    losses, carries = window_loss(model, clips, carries, cfg.w_sm, cfg.w_trans, cfg.smoothing)
    if losses is None:
        return None, carries
    if not torch.isfinite(losses.total):
        raise TrainingDiverged(f"non-finite loss at frame {clips[0].start}: {losses.as_floats()}")
    optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return losses, [c.detach() for c in carries]


def warmup_cosine(warmup_steps: int, total_steps: int) -> Callable[[int], float]:
    def factor(step: int) -> float:
        if step < warmup_steps:
            return (step + 1) / warmup_steps
        progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
        return 0.5 * (1 + math.cos(math.pi * min(1.0, progress)))

    return factor


@torch.no_grad()
def predict(model: SurgicalMamba, videos: Sequence[FeatureClip], clip_len: int,
            batch: int = 16) -> list[np.ndarray]:
    model.eval()
    preds = []
    for i in range(0, len(videos), batch):
        group = videos[i : i + batch]
        T = max(v.T for v in group)
        feats = np.zeros((len(group), T, group[0].features.shape[1]), np.float32)
        for j, v in enumerate(group):
            feats[j, : v.T] = v.features
        out = run_video(model, torch.as_tensor(feats).to(model.dtype), clip_len)
        arg = out.logits.argmax(-1).numpy()
        preds += [arg[j, : v.T] for j, v in enumerate(group)]
    return preds


def evaluate(model: SurgicalMamba, videos: Sequence[FeatureClip], clip_len: int) -> PhaseMetrics:
    preds = predict(model, videos, clip_len)
    return phase_metrics(preds, [v.labels for v in videos], model.cfg.n_classes)


@dataclass
class TrainResult:
    model: SurgicalMamba
    history: list[dict] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.history[-1]


def train(model_cfg: ModelConfig, cfg: TrainConfig, train_videos: Sequence[FeatureClip],
          test_videos: Sequence[FeatureClip] = (), on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model_cfg.clip_len = cfg.clip_len
    model = SurgicalMamba(model_cfg).to(cfg.dtype)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    n_batches = math.ceil(len(train_videos) / cfg.batch_videos)
    longest = max(v.T for v in train_videos)
    steps_per_epoch = n_batches * math.ceil(math.ceil(longest / cfg.clip_len) / cfg.window)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, warmup_cosine(cfg.warmup_epochs * steps_per_epoch, cfg.epochs * steps_per_epoch)
    )
    result = TrainResult(model)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        t0 = time.perf_counter()
        order = rng.permutation(len(train_videos))
        sums, count = {"ce": 0.0, "smooth": 0.0, "trans": 0.0, "total": 0.0}, 0
        for b in range(n_batches):
            ids = order[b * cfg.batch_videos : (b + 1) * cfg.batch_videos]
            clips = make_clips([train_videos[i] for i in ids], ids.tolist(), cfg.clip_len, cfg.dtype)
            carries = None
            for w in range(0, len(clips), cfg.window):
                losses, carries = tbptt_step(model, opt, clips[w : w + cfg.window], carries, cfg, sched)
                if losses is None:
                    break
                for k, v in losses.as_floats().items():
                    sums[k] += v
                count += 1
        row = {"epoch": epoch, "lr": opt.param_groups[0]["lr"], "seconds": time.perf_counter() - t0}
        row.update({f"loss_{k}": v / max(count, 1) for k, v in sums.items()})
        if test_videos and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            row.update(evaluate(model, test_videos, cfg.clip_len).as_dict())
        result.history.append(row)
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
        if on_epoch and on_epoch(row):  # a truthy return stops training early
            break
    return result


# --- gradient checking -------------------------------------------------------

PARAM_GROUPS = ("intensity", "regram", "slow", "fast", "head", "other")


def param_group(name: str) -> str:
    if ".intensity." in name:
        return "intensity"
    if ".regram." in name:
        return "regram"
    for g in ("slow", "fast", "head"):
        if f".{g}." in name or name.startswith(f"{g}."):
            return g
    return "other"


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_group: dict[str, float]
    per_param: dict[str, float]
    checked: int


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(model: SurgicalMamba, loss_fn: Callable[[], Tensor], eps: float = 1e-5,
               per_tensor: int = 6, seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare autograd gradients with central differences on sampled entries.

    Up to ``per_tensor`` entries of every parameter tensor are probed. The
    relative error uses ``max(|analytic|, |numeric|, floor)`` as denominator.
    """
    if model.dtype != torch.float64:
        raise ContractError("gradient checks need a double-precision model")
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    grads = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
             for n, p in model.named_parameters()}
    rng = np.random.default_rng(seed)
    per_param, per_group, checked = {}, {g: 0.0 for g in PARAM_GROUPS}, 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            idx = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
            worst = 0.0
            for i in idx:
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                worst = max(worst, relative_error(float(grads[name].view(-1)[i]), numeric, floor))
                checked += 1
            per_param[name] = worst
            g = param_group(name)
            per_group[g] = max(per_group[g], worst)
    return GradCheckReport(max(per_param.values()), per_group, per_param, checked)


def tiny_gradcheck_setup(seed: int = 0, T: int = 24, clips: int = 2):
    """Tiny double-precision model plus a two-clip loss covering every term."""
    torch.manual_seed(seed)
    cfg = ModelConfig.tiny(chunk_size=8, clip_len=T)
    model = SurgicalMamba(cfg).double()
    # move off the near-identity init so rotation and warp gradients are well exercised
    with torch.no_grad():
        for mod in model.modules():
            if hasattr(mod, "angles"):
                mod.angles.b2.fill_(0.3)
    gen = torch.Generator().manual_seed(seed)
    feats = torch.randn(2, clips * T, cfg.d_feature, generator=gen, dtype=torch.float64)
    labels = np.repeat(np.arange(4), (clips * T) // 4 + 1)[: clips * T]
    labels = np.stack([labels, np.roll(labels, 5)])
    batch = make_clips([FeatureClip(f.numpy(), l, None, 4) for f, l in zip(feats, labels)],
                       (0, 1), T, torch.float64)

    def loss_fn():
        losses, _ = window_loss(model, batch, None)
        return losses.total

    return model, loss_fn
