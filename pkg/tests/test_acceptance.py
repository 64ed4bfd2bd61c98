"""Acceptance criteria, one test per criterion.

Each test records a one-line PASS/FAIL verdict with its measured value; the
lines are printed as they happen and again in the terminal summary. Run on
its own with ``pytest tests/test_acceptance.py -v`` (about 20 minutes on one
core, most of it in criterion 10).
"""

import math
import time

import numpy as np
import pytest
import torch

from surgmamba import verify
from surgmamba.data import SyntheticConfig, gen_synthetic
from surgmamba.losses import SIGMA_LEFT, SIGMA_RIGHT, transition_target
from surgmamba.model import ModelConfig, SurgicalMamba, run_video
from surgmamba.stream import StreamEngine, bench, stream
from surgmamba.train import TrainConfig, grad_check, tiny_gradcheck_setup, train

REPORT: list[str] = []


def record(capsys, number: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {title}: {detail}"
    REPORT.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert passed, line


# Desk-scale learner used for the synthetic-learning criterion.
LEARNER = dict(d_model=64, head_dim=32, d_state=16, rank=4, n_layers=2, chunk_size=32)
LEARN_TRAIN = dict(warmup_epochs=2, clip_len=128, window=6, batch_videos=4, lr=3e-3)
ABLATION_TRAIN = dict(LEARN_TRAIN, epochs=50, warmup_epochs=10)


def test_01_chunked_recurrent_equivalence(capsys):
    t0 = time.perf_counter()
    dbl = verify.check_chunked_recurrent(seeds=100, precision="double")
    sgl = verify.check_chunked_recurrent(seeds=100, precision="single")
    elapsed = time.perf_counter() - t0
    record(capsys, 1, "chunked == recurrent", dbl.passed and sgl.passed and dbl.seconds < 60 and sgl.seconds < 60,
           f"double {dbl.value:.2e} (<1e-10), single {sgl.value:.2e} (<1e-5), "
           f"{dbl.seconds:.0f}s + {sgl.seconds:.0f}s, total {elapsed:.0f}s")


def test_02_cayley_orthogonality(capsys):
    r = verify.check_cayley(draws=1000)
    record(capsys, 2, "Cayley orthogonality", r.passed,
           f"|Z^T Z - I|_F {r.detail['orthogonality']:.2e}, norm drift {r.detail['norm_drift']:.2e} (<1e-12)")


def test_03_transfer_matrix(capsys):
    r = verify.check_transfer_matrix(seeds=100)
    record(capsys, 3, "transfer matrix", r.passed,
           f"max |scan - Mx| {r.value:.2e} (<1e-8), max off-diagonal rank {r.detail['max_offdiag_rank']} (<=4), "
           f"trails {'ok' if r.detail['trails_ok'] and r.detail['trail_err'] == 0 else 'WRONG'}")


def test_04_equivariance(capsys):
    r = verify.check_equivariance(seeds=100)
    record(capsys, 4, "equivariance pair", r.passed,
           f"joint {r.value:.2e} (<1e-10), state-only >1e-3 in {r.detail['state_only_broken']}/100 (>=95)")


def test_05_decay_derivative(capsys):
    r = verify.check_decay_derivative(points=1000)
    record(capsys, 5, "decay derivative", r.passed,
           f"max rel FD error {r.value:.2e} (<1e-6) over {r.detail['points']} points, "
           f"all negative: {r.detail['all_negative']}")


def test_06_full_model_grad_check(capsys):
    t0 = time.perf_counter()
    model, loss_fn = tiny_gradcheck_setup()
    cfg = model.cfg
    assert (cfg.d_model, cfg.d_state, cfg.n_heads, cfg.rank, cfg.n_layers) == (16, 8, 2, 2, 1)
    rep = grad_check(model, loss_fn, per_tensor=6)
    elapsed = time.perf_counter() - t0
    groups = ", ".join(f"{g} {v:.1e}" for g, v in rep.per_group.items())
    record(capsys, 6, "full-model gradient check", rep.max_rel_error < 1e-4 and elapsed < 300,
           f"max rel error {rep.max_rel_error:.2e} (<1e-4) over {rep.checked} entries in {elapsed:.0f}s [{groups}]")


def test_07_clip_splitting(capsys):
    r = verify.check_clip_splitting(T=512, splits=(1, 2, 4))
    record(capsys, 7, "clip-splitting invariance", r.passed, f"max slow-path difference {r.value:.2e} (<1e-10)")


def test_08_streaming(capsys):
    torch.manual_seed(0)
    model = SurgicalMamba(ModelConfig()).eval()
    engine = StreamEngine(model)
    x = torch.randn(4096, model.cfg.d_feature, generator=torch.Generator().manual_seed(0))
    streamed = torch.stack([r.probs for r in stream(engine, x)])
    with torch.no_grad():
        clip = torch.softmax(run_video(model, x, model.cfg.clip_len).logits, -1)
    diff = float((streamed - clip).abs().max())

    rep = bench(engine, 10_100, (100, 1000, 10_000), window=200, rounds=5)
    ratio = rep.median_latency_s[-1] / rep.median_latency_s[0]
    lo, hi = rep.slope_ci95
    ok = diff < 1e-5 and abs(ratio - 1) <= 0.2 and lo <= 0 <= hi and len(set(rep.state_bytes)) == 1
    record(capsys, 8, "streaming equivalence and flat cost", ok,
           f"max prob diff {diff:.2e} (<1e-5); latency {1e3 * rep.median_latency_s[0]:.2f} -> "
           f"{1e3 * rep.median_latency_s[-1]:.2f} ms (ratio {ratio:.3f}); slope CI [{lo:.2e}, {hi:.2e}]; "
           f"state bytes {sorted(set(rep.state_bytes))}")


def test_09_transition_target(capsys):
    labels = [0] * 40 + [1] * 40
    g = transition_target(labels)
    peak = g[40] == 1.0
    left = abs(g[40 - int(SIGMA_LEFT)] - math.exp(-0.5)) <= 1e-9
    right = abs(g[40 + int(SIGMA_RIGHT)] - math.exp(-0.5)) <= 1e-9

    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        T = int(rng.integers(2, 120))
        lab = np.cumsum(rng.random(T) < 0.08)
        changes = np.flatnonzero(np.diff(lab)) + 1
        oracle = np.zeros(T)
        for t in range(T):
            for ts in changes:
                s = SIGMA_LEFT if t < ts else SIGMA_RIGHT
                oracle[t] = max(oracle[t], math.exp(-0.5 * ((t - ts) / s) ** 2))
        worst = max(worst, float(np.abs(transition_target(lab) - oracle).max()))
    record(capsys, 9, "transition target", peak and left and right and worst < 1e-12,
           f"g(t*)={g[40]}, g(t*-2)={g[38]:.12f}, g(t*+12)={g[52]:.12f}, "
           f"max-composition vs brute force {worst:.1e} over 200 label sequences")


def _learner_cfg(**flags) -> ModelConfig:
    return ModelConfig(**LEARNER, **flags)


def test_10_synthetic_learning(capsys):
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    train_v, test_v, _ = gen_synthetic(SyntheticConfig())
    history = []

    def stop(row):
        history.append(row)
        return row.get("acc", 0.0) >= 95.0

    train(_learner_cfg(), TrainConfig(epochs=50, seed=0, **LEARN_TRAIN), train_v, test_v, on_epoch=stop)
    best = history[-1]
    learned = best["acc"] >= 95.0

    jac = {"full": [], "no_lambda": [], "no_regram": []}
    flags = {"full": {}, "no_lambda": {"use_intensity": False}, "no_regram": {"use_regram": False}}
    for seed in range(3):
        tr, te, _ = gen_synthetic(SyntheticConfig.transition_dense(seed=seed))
        for name, fl in flags.items():
            res = train(_learner_cfg(**fl), TrainConfig(seed=seed, **ABLATION_TRAIN), tr, te)
            jac[name].append(res.final["jaccard"])
    mean = {k: float(np.mean(v)) for k, v in jac.items()}
    ordered = mean["no_lambda"] <= mean["full"] and mean["no_regram"] <= mean["full"]
    elapsed = time.perf_counter() - t0
    record(capsys, 10, "synthetic learning", learned and ordered and elapsed < 7200,
           f"acc {best['acc']:.2f}% at epoch {best['epoch']} (>=95 within 50); transition-dense Jaccard "
           + ", ".join(f"{k} {v:.2f} {np.round(jac[k], 2).tolist()}" for k, v in mean.items())
           + f"; {elapsed / 60:.1f} min")


def test_11_nested_baseline(capsys):
    r = verify.check_nested_baseline()
    record(capsys, 11, "nested-baseline reduction", r.passed,
           f"max logit difference {r.value:.1e} with max lambda {r.detail['max_lambda']}")
