import csv
import math

import numpy as np
import pytest
import torch

from surgmamba.model import ModelConfig, SurgicalMamba, run_video
from surgmamba.ssm import ContractError
from surgmamba.stream import StreamEngine, bench, relative_state_change, stream, trace_export


def engine_for(seed=0, dtype=torch.float64, **kw):
    torch.manual_seed(seed)
    model = SurgicalMamba(ModelConfig.tiny(**kw)).to(dtype)
    with torch.no_grad():
        for mod in model.modules():
            if hasattr(mod, "angles"):
                mod.angles.b2.fill_(0.5)
    return StreamEngine(model)


def frames(T, d=16, seed=1, dtype=torch.float64):
    return torch.randn(T, d, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def test_first_frame_matches_clip_mode():
    eng = engine_for()
    x = frames(1)
    with torch.no_grad():
        ref = eng.model(x).logits[0]
    assert float((eng.step(x[0]).logits - ref).abs().max()) < 1e-12


@pytest.mark.parametrize("clip_len,T", [(32, 96), (20, 70)])
def test_stream_matches_clip_mode_double(clip_len, T):
    eng = engine_for(n_layers=2, clip_len=clip_len)
    x = frames(T)
    res = stream(eng, x)
    with torch.no_grad():
        ref = run_video(eng.model, x, clip_len)
    lg = torch.stack([r.logits for r in res])
    lam = torch.stack([r.lam for r in res], dim=1)
    assert float((lg - ref.logits).abs().max()) < 1e-11
    assert float((lam - ref.lambdas).abs().max()) < 1e-11


def test_stream_matches_clip_mode_single():
    eng = engine_for(dtype=torch.float32, clip_len=32)
    x = frames(128, dtype=torch.float32)
    probs = torch.stack([r.probs for r in stream(eng, x)])
    with torch.no_grad():
        ref = torch.softmax(run_video(eng.model, x, 32).logits, -1)
    assert float((probs - ref).abs().max()) < 1e-5


def test_regram_fires_on_chunk_grid():
    eng = engine_for(clip_len=20)  # chunk 8: boundaries at 8, 16, 20 within every clip
    fired = [t + 1 for t, r in enumerate(stream(eng, frames(40))) if r.rotation is not None]
    assert fired == [8, 16, 20, 28, 36, 40]


def test_pure_decay_state_change():
    h = torch.randn(2, 3, 4, dtype=torch.float64)
    assert relative_state_change(h, 0.8 * h) == pytest.approx(0.2, rel=1e-14)
    assert relative_state_change(torch.zeros(3), torch.ones(3)) == 0.0


def test_state_size_is_constant():
    eng = engine_for()
    sizes = set()
    for t, f in enumerate(frames(300)):
        eng.step(f)
        if t % 50 == 0:
            sizes.add(eng.state_nbytes())
    assert len(sizes) == 1


def test_snapshot_restore_replays_exactly():
    eng = engine_for()
    x = frames(30)
    stream(eng, x[:13])
    snap = eng.snapshot()
    a = [r.logits for r in stream(eng, x[13:])]
    eng.restore(snap)
    b = [r.logits for r in stream(eng, x[13:])]
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_bad_frames_rejected():
    eng = engine_for()
    with pytest.raises(ContractError):
        eng.step(torch.zeros(3))
    with pytest.raises(ContractError):
        eng.step(torch.full((16,), float("nan")))


def test_bench_report_shape():
    eng = engine_for(dtype=torch.float32)
    rep = bench(eng, 400, (100, 300), window=40, rounds=1, warmup=10, block=20)
    assert rep.report_points == [100, 300]
    assert len(set(rep.state_bytes)) == 1
    assert rep.slope_ci95[0] <= rep.slope_s_per_frame <= rep.slope_ci95[1]
    with pytest.raises(ContractError):
        bench(eng, 200, (100, 300), window=40)


def test_trace_files(tmp_path):
    eng = engine_for(n_layers=2, clip_len=32)
    paths = trace_export(eng, frames(70), tmp_path, state_every=10)
    with open(paths["frames"]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 70
    for r in rows:
        for k in range(2):
            assert 0.0 <= float(r[f"lambda_{k}"]) <= 1.0
        assert float(r["dA_p10"]) <= float(r["dA_mean"]) <= float(r["dA_p90"])
    with open(paths["chunks"]) as fh:
        chunks = list(csv.DictReader(fh))
    assert chunks and all(float(c["self_cosine"]) == pytest.approx(1.0) for c in chunks)
    with open(paths["plane_cosine"]) as fh:
        pairs = list(csv.DictReader(fh))
    n = len(chunks)
    assert len(pairs) == n * (n + 1) // 2
    assert np.load(paths["states"]).shape == (7, eng.cfg.n_heads, eng.cfg.head_dim, eng.cfg.d_state)
    for key in ("traces_png", "plane_cosine_png", "angles_png"):
        assert paths[key].stat().st_size > 0
    assert b"\r\n" not in paths["frames"].read_bytes()
