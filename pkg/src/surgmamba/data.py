"""Synthetic phase-labelled feature streams.

Each video walks through the phases left to right (occasionally skipping
one), holding each for a Dirichlet-distributed share of the video. Frames
are Gaussian around a per-phase mean, with an optional linear cross-fade of
the means around each transition.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import FeatureClip, read_features, write_features, write_kv


@dataclass
class SyntheticConfig:
    num_train: int = 20
    num_test: int = 10
    t_min: int = 1800
    t_max: int = 2200
    d: int = 256
    n_classes: int = 7
    concentration: float = 4.0  # Dirichlet parameter for phase shares
    skip_prob: float = 0.1
    separation: float = 1.9  # norm of each phase mean
    noise: float = 1.0
    blur: int = 0  # transition cross-fade width in frames
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two phases")
        if self.t_min < self.n_classes or self.t_max < self.t_min:
            raise ValueError("video lengths must fit one frame per phase")

    @classmethod
    def transition_dense(cls, **overrides) -> "SyntheticConfig":
        """Many short phases: roughly 40-70 frames each."""
        base = dict(t_min=300, t_max=500, skip_prob=0.0)
        base.update(overrides)
        return cls(**base)


def phase_means(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    m = rng.standard_normal((cfg.n_classes, cfg.d))
    return cfg.separation * m / np.linalg.norm(m, axis=1, keepdims=True)


def phase_sequence(cfg: SyntheticConfig, rng: np.random.Generator) -> list[int]:
    phases = [0]
    while phases[-1] < cfg.n_classes - 1:
        step = 2 if rng.random() < cfg.skip_prob and phases[-1] + 2 <= cfg.n_classes - 1 else 1
        phases.append(phases[-1] + step)
    return phases


def gen_video(cfg: SyntheticConfig, means: np.ndarray, rng: np.random.Generator) -> FeatureClip:
    T = int(rng.integers(cfg.t_min, cfg.t_max + 1))
    phases = phase_sequence(cfg, rng)
    shares = rng.dirichlet(np.full(len(phases), cfg.concentration))
    durations = np.maximum(1, np.floor(shares * T).astype(int))
    durations[-1] += T - durations.sum()
    while durations[-1] < 1:  # rounding pushed the last phase negative; borrow from the longest
        i = int(np.argmax(durations[:-1]))
        durations[i] -= 1
        durations[-1] += 1
    labels = np.repeat(phases, durations)
    centre = means[labels]
    if cfg.blur > 0:
        starts = np.cumsum(durations)[:-1]
        for k, ts in enumerate(starts):
            lo, hi = max(0, ts - cfg.blur // 2), min(T, ts + (cfg.blur + 1) // 2)
            w = (np.arange(lo, hi) - (ts - cfg.blur / 2)) / cfg.blur
            centre[lo:hi] = (1 - w)[:, None] * means[phases[k]] + w[:, None] * means[phases[k + 1]]
    feats = centre + cfg.noise * rng.standard_normal((T, cfg.d))
    return FeatureClip(feats.astype(np.float32), labels.astype(np.int64), np.ones(T, np.uint8), cfg.n_classes)


def gen_synthetic(cfg: SyntheticConfig) -> tuple[list[FeatureClip], list[FeatureClip], np.ndarray]:
    """Return ``(train, test, means)``; fully determined by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    means = phase_means(cfg, rng)
    videos = [gen_video(cfg, means, rng) for _ in range(cfg.num_train + cfg.num_test)]
    return videos[: cfg.num_train], videos[cfg.num_train :], means


def transition_times(labels) -> np.ndarray:
    labels = np.asarray(labels)
    return np.flatnonzero(labels[1:] != labels[:-1]) + 1


def nearest_mean_accuracy(videos: list[FeatureClip], means: np.ndarray) -> float:
    """Frame accuracy of the best per-frame linear rule (nearest true mean)."""
    correct = total = 0
    for v in videos:
        d = ((v.features[:, None, :] - means[None]) ** 2).sum(-1)
        correct += int((d.argmin(1) == v.labels).sum())
        total += v.T
    return correct / total


def save_dataset(out_dir, cfg: SyntheticConfig, train, test) -> None:
    out_dir = Path(out_dir)
    for split, videos in (("train", train), ("test", test)):
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        for i, v in enumerate(videos):
            write_features(out_dir / split / f"video_{i:03d}.smfd", v)
    write_kv(out_dir / "synthetic.cfg", {k: getattr(cfg, k) for k in cfg.__dataclass_fields__})


def load_split(data_dir, split: str) -> list[FeatureClip]:
    files = sorted((Path(data_dir) / split).glob("*.smfd"))
    if not files:
        raise FileNotFoundError(f"no .smfd files under {Path(data_dir) / split}")
    return [read_features(f) for f in files]
