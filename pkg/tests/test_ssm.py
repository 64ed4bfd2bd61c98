import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from surgmamba.ssm import (
    ContractError,
    ConvCarry,
    causal_conv,
    chunked_scan,
    cumulative_decay,
    discretize,
    exact_zoh_input_scale,
    recurrent_scan,
)
from surgmamba.verify import random_scan_instance


def brute_force_scan(x, dt, A, B, C):
    """Unrolled sum over every earlier frame, no state tensor involved."""
    T, H, P = x.shape
    a = np.exp(dt * A)  # (T, H)
    y = np.zeros((T, H, P))
    for t in range(T):
        for u in range(t + 1):
            decay = np.prod(a[u + 1 : t + 1], axis=0)  # (H,)
            y[t] += (decay * dt[u])[:, None] * x[u] * float(B[u] @ C[t])
    return y


# --- discretize ---------------------------------------------------------------

def test_discretize_zero_step_limit():
    assert discretize(-1.0, 1e-12).a_bar == pytest.approx(1.0, abs=1e-11)


def test_discretize_half_life():
    p = discretize(-1.0, math.log(2))
    assert p.a_bar == pytest.approx(0.5, rel=1e-15)
    assert p.b_scale == math.log(2)


def test_first_order_input_scale_close_to_exact_zoh():
    approx = discretize(-0.01, 0.1).b_scale
    exact = exact_zoh_input_scale(-0.01, 0.1)
    assert abs(approx - exact) / exact < 1e-3
    assert exact == pytest.approx(0.09995001666, rel=1e-9)


@pytest.mark.parametrize("A,delta", [(0.0, 1.0), (0.5, 1.0), (-1.0, 0.0), (-1.0, -0.1)])
def test_discretize_rejects_bad_domain(A, delta):
    with pytest.raises(ContractError):
        discretize(A, delta)


@given(st.floats(-50, -1e-6), st.floats(1e-6, 10))
def test_discretized_decay_in_unit_interval(A, delta):
    p = discretize(A, delta)
    assert 0.0 <= p.a_bar < 1.0 and p.b_scale > 0


# --- cumulative decay ----------------------------------------------------------

def test_cumulative_decay_examples():
    a = [0.5, 0.5, 0.5]
    assert cumulative_decay(a, 2, 2) == 1.0
    assert cumulative_decay(a, 2, 0) == 0.25


@given(st.lists(st.floats(0.01, 1.0), min_size=3, max_size=20), st.data())
def test_cumulative_decay_composes(a, data):
    t = data.draw(st.integers(0, len(a) - 1))
    m = data.draw(st.integers(0, t))
    s = data.draw(st.integers(0, m))
    assert cumulative_decay(a, t, m) * cumulative_decay(a, m, s) == pytest.approx(cumulative_decay(a, t, s), rel=1e-12)


def test_cumulative_decay_index_contract():
    with pytest.raises(ContractError):
        cumulative_decay([0.5, 0.5], 0, 1)


# --- recurrent scan -------------------------------------------------------------

def test_no_writes_no_output(gen):
    x, dt, A, B, C, _ = random_scan_instance(gen, 10, 2, 3, 4)
    y, h = recurrent_scan(x, dt, A, torch.zeros_like(B), C)
    assert torch.count_nonzero(y) == 0 and torch.count_nonzero(h) == 0


def test_single_decay_step():
    A = torch.tensor([math.log(0.5)], dtype=torch.float64)
    y, _ = recurrent_scan(
        torch.zeros(1, 1, 1, dtype=torch.float64), torch.ones(1, 1, dtype=torch.float64), A,
        torch.ones(1, 1, dtype=torch.float64), torch.ones(1, 1, dtype=torch.float64),
        torch.ones(1, 1, 1, dtype=torch.float64),
    )
    assert float(y) == pytest.approx(0.5, rel=1e-15)


def test_recurrent_matches_unrolled_sum(gen):
    x, dt, A, B, C, _ = random_scan_instance(gen, 8, 2, 3, 4)
    y, _ = recurrent_scan(x, dt, A, B, C)
    ref = brute_force_scan(x.numpy(), dt.numpy(), A.numpy(), B.numpy(), C.numpy())
    np.testing.assert_allclose(y.numpy(), ref, atol=1e-13)


def test_scan_shape_contract(gen):
    x, dt, A, B, C, _ = random_scan_instance(gen, 8, 2, 3, 4)
    with pytest.raises(ContractError):
        recurrent_scan(x, dt[:-1], A, B, C)
    with pytest.raises(ContractError):
        chunked_scan(x, dt, A, B, C[:, :3])
    with pytest.raises(ContractError):
        chunked_scan(x, dt, A, B, C, chunk_size=0)


# --- chunked scan ---------------------------------------------------------------

@pytest.mark.parametrize("chunk", [1, 5, 8, 16])
def test_chunked_equals_recurrent(gen, chunk):
    x, dt, A, B, C, h0 = random_scan_instance(gen, 16, 2, 3, 4)
    y_ref, h_ref = recurrent_scan(x, dt, A, B, C, h0)
    y, states = chunked_scan(x, dt, A, B, C, h0, chunk)
    assert len(states) == math.ceil(16 / chunk)
    torch.testing.assert_close(y, y_ref, atol=1e-12, rtol=0)
    torch.testing.assert_close(states[-1], h_ref, atol=1e-12, rtol=0)


def test_chunked_long_sequence(gen):
    x, dt, A, B, C, h0 = random_scan_instance(gen, 256, 2, 4, 16)
    y_ref, _ = recurrent_scan(x, dt, A, B, C, h0)
    y, _ = chunked_scan(x, dt, A, B, C, h0, 64)
    assert float((y - y_ref).abs().max()) < 1e-10


@given(T=st.integers(1, 40), chunk=st.integers(1, 48), seed=st.integers(0, 2**31 - 1))
def test_chunking_is_invisible(T, chunk, seed):
    g = torch.Generator().manual_seed(seed)
    x, dt, A, B, C, h0 = random_scan_instance(g, T, 2, 2, 3)
    y_ref, h_ref = recurrent_scan(x, dt, A, B, C, h0)
    y, states = chunked_scan(x, dt, A, B, C, h0, chunk)
    assert float((y - y_ref).abs().max()) < 1e-11
    assert float((states[-1] - h_ref).abs().max()) < 1e-11


def test_boundary_callback_sees_every_chunk_including_partial(gen):
    x, dt, A, B, C, h0 = random_scan_instance(gen, 20, 2, 3, 4)
    seen = []

    def boundary(c, y_chunk, h):
        seen.append((c, y_chunk.shape[-3]))
        return h

    chunked_scan(x, dt, A, B, C, h0, 8, boundary=boundary)
    assert seen == [(0, 8), (1, 8), (2, 4)]


def test_boundary_rotation_applies_before_next_chunk(gen):
    # flipping the state sign at chunk 0 must flip only the carried part of chunk 1
    x, dt, A, B, C, h0 = random_scan_instance(gen, 16, 1, 2, 3)
    y, _ = chunked_scan(x, dt, A, B, C, h0, 8, boundary=lambda c, y, h: -h if c == 0 else h)
    y_ref, h8 = recurrent_scan(x[:8], dt[:8], A, B[:8], C[:8], h0)
    y_second, _ = recurrent_scan(x[8:], dt[8:], A, B[8:], C[8:], -h8)
    torch.testing.assert_close(y[8:], y_second, atol=1e-12, rtol=0)


# --- causal conv ----------------------------------------------------------------

def test_identity_kernel_is_silu(gen):
    x = torch.randn(7, 5, generator=gen, dtype=torch.float64)
    k = torch.zeros(4, 5, dtype=torch.float64)
    k[-1] = 1.0
    y, carry = causal_conv(x, k, ConvCarry.zeros(4, 5, dtype=torch.float64))
    torch.testing.assert_close(y, torch.nn.functional.silu(x))
    torch.testing.assert_close(carry.tail, x[-3:])


@given(split=st.integers(0, 12), d_conv=st.integers(1, 5))
def test_conv_carry_concatenation(split, d_conv):
    g = torch.Generator().manual_seed(split * 7 + d_conv)
    x = torch.randn(12, 3, generator=g, dtype=torch.float64)
    k = torch.randn(d_conv, 3, generator=g, dtype=torch.float64)
    bias = torch.randn(3, generator=g, dtype=torch.float64)
    full, _ = causal_conv(x, k, ConvCarry.zeros(d_conv, 3, dtype=torch.float64), bias)
    a, carry = causal_conv(x[:split], k, ConvCarry.zeros(d_conv, 3, dtype=torch.float64), bias)
    b, _ = causal_conv(x[split:], k, carry, bias)
    # vectorized and scalar SiLU kernels may differ in the last ulp
    torch.testing.assert_close(torch.cat([a, b]), full, atol=1e-14, rtol=0)


def test_conv_carry_row_count_enforced(gen):
    x = torch.randn(5, 3, generator=gen)
    with pytest.raises(ContractError):
        causal_conv(x, torch.randn(4, 3), ConvCarry(torch.zeros(2, 3)))
    assert ConvCarry.zeros(4, 3).tail.shape == (3, 3)
