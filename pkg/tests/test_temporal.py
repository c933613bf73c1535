import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cetus.model import init_weights
from cetus.temporal import (
    BlockState,
    ChunkOrderError,
    HeadParams,
    StateShapeError,
    StreamState,
    block_forward,
    classifier_head,
    pad_history_logits,
    predict,
    selective_scan,
    softplus,
    ssm_scan,
    stack_forward,
    stack_forward_streaming,
)

from conftest import SMALL_HP, SMALL_SP, randomize


def _model(seed=0):
    return randomize(init_weights(SMALL_SP, SMALL_HP, seed), seed + 100)


def _stream_in_chunks(blocks, x, sizes, hp=SMALL_HP):
    state = StreamState.zeros(hp)
    out, i, j = [], 0, 0
    while i < len(x):
        s = sizes[j % len(sizes)]
        y, state = stack_forward_streaming(blocks, x[i : i + s], state, chunk_index=state.chunks)
        out.append(y)
        i += s
        j += 1
    return np.concatenate(out), state


# -- scan ----------------------------------------------------------------------


def test_scalar_recurrence_hand_values():
    u = np.array([[1.0], [0.0], [0.0]])
    y, h = selective_scan(u, np.ones((3, 1)), np.array([[-1.0]]), np.ones((3, 1)), np.ones((3, 1)), np.zeros(1), np.zeros((1, 1)))
    np.testing.assert_allclose(y[:, 0], [1.0, math.exp(-1), math.exp(-2)], rtol=1e-12)
    assert h[0, 0] == pytest.approx(math.exp(-2), rel=1e-12)


def test_scan_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    xs = rng.standard_normal(300)  # crosses a slab boundary
    a, dlt, b, c, d = -0.7, 0.3, 1.3, -0.4, 0.25
    L = len(xs)
    y, _ = selective_scan(
        xs[:, None], np.full((L, 1), dlt), np.array([[a]]), np.full((L, 1), b), np.full((L, 1), c), np.array([d]), np.zeros((1, 1))
    )
    _, ref = oracles.scalar_ssm(xs, a, dlt, b, c, d)
    np.testing.assert_allclose(y[:, 0], ref, rtol=1e-10, atol=1e-12)


def test_zero_input_zero_state_gives_zero():
    m = _model()
    for blk in m.blocks:
        blk.conv_b[:] = 0.0
        blk.ln_beta[:] = 0.0
    out = stack_forward(m.blocks, np.zeros((10, SMALL_HP.dim)), SMALL_HP)
    np.testing.assert_array_equal(out, 0.0)


def test_discretised_decay_in_unit_interval():
    m = init_weights(SMALL_SP, SMALL_HP, 0)
    rng = np.random.default_rng(1)
    for blk in m.blocks:
        delta = softplus(rng.standard_normal((50, blk.dt_rank)) * 5 @ blk.W_dt + blk.b_dt)
        dA = np.exp(delta[:, :, None] * blk.A)
        assert np.all((dA > 0) & (dA < 1))


# -- streaming -----------------------------------------------------------------


def test_sixty_four_steps_chunked_equal():
    m = _model(1)
    x = np.random.default_rng(2).standard_normal((64, SMALL_HP.dim))
    full = stack_forward(m.blocks, x, SMALL_HP)
    chunked, _ = _stream_in_chunks(m.blocks, x, [16])
    np.testing.assert_allclose(chunked, full, rtol=1e-5, atol=1e-8)


def test_unit_chunks_match_full():
    m = _model(2)
    x = np.random.default_rng(3).standard_normal((40, SMALL_HP.dim))
    chunked, state = _stream_in_chunks(m.blocks, x, [1])
    np.testing.assert_allclose(chunked, stack_forward(m.blocks, x, SMALL_HP), rtol=1e-9, atol=1e-10)
    assert state.chunks == 40


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=1, max_size=10), st.integers(0, 1000))
def test_any_partition_matches_full(sizes, seed):
    m = _model(seed % 7)
    x = np.random.default_rng(seed).standard_normal((50, SMALL_HP.dim))
    chunked, _ = _stream_in_chunks(m.blocks, x, sizes)
    np.testing.assert_allclose(chunked, stack_forward(m.blocks, x, SMALL_HP), rtol=1e-9, atol=1e-10)


def test_empty_chunk_leaves_state():
    m = _model()
    state = StreamState.zeros(SMALL_HP)
    _, state = stack_forward_streaming(m.blocks, np.ones((3, SMALL_HP.dim)), state)
    y, state2 = stack_forward_streaming(m.blocks, np.zeros((0, SMALL_HP.dim)), state, chunk_index=1)
    assert y.shape == (0, SMALL_HP.dim)
    assert state2.chunks == 1
    for a, b in zip(state.blocks, state2.blocks):
        np.testing.assert_array_equal(a.h, b.h)


def test_streams_do_not_share_state():
    m = _model()
    rng = np.random.default_rng(4)
    xa, xb = rng.standard_normal((20, 16)), rng.standard_normal((20, 16))
    sa, sb = StreamState.zeros(SMALL_HP), StreamState.zeros(SMALL_HP)
    outa = []
    for i in range(0, 20, 5):
        ya, sa = stack_forward_streaming(m.blocks, xa[i : i + 5], sa)
        _, sb = stack_forward_streaming(m.blocks, xb[i : i + 5], sb)
        outa.append(ya)
    np.testing.assert_allclose(np.concatenate(outa), stack_forward(m.blocks, xa, SMALL_HP), atol=1e-10)


def test_input_state_not_mutated():
    m = _model()
    st0 = StreamState.zeros(SMALL_HP)
    stack_forward_streaming(m.blocks, np.ones((4, 16)), st0)
    assert all(not b.h.any() and not b.conv_tail.any() for b in st0.blocks)


def test_chunk_order_enforced():
    m = _model()
    with pytest.raises(ChunkOrderError):
        stack_forward_streaming(m.blocks, np.ones((2, 16)), StreamState.zeros(SMALL_HP), chunk_index=1)


def test_state_shape_checked():
    m = _model()
    bad = StreamState([BlockState.zeros(SMALL_HP.d_inner, SMALL_HP.state + 1, SMALL_HP.conv_kernel) for _ in range(2)])
    with pytest.raises(StateShapeError):
        stack_forward_streaming(m.blocks, np.ones((2, 16)), bad)
    with pytest.raises(StateShapeError):
        stack_forward_streaming(m.blocks, np.ones((2, 16)), StreamState(bad.blocks[:1]))


# -- residual / stacking -------------------------------------------------------


def test_zero_output_projection_is_identity():
    m = _model()
    blk = replace(m.blocks[0], W_out=np.zeros_like(m.blocks[0].W_out))
    x = np.random.default_rng(5).standard_normal((7, 16))
    y, _ = block_forward(blk, x, BlockState.zeros(SMALL_HP.d_inner, SMALL_HP.state, SMALL_HP.conv_kernel))
    np.testing.assert_array_equal(y, x)


def test_extra_block_with_zero_output_is_transparent():
    m = _model()
    x = np.random.default_rng(6).standard_normal((12, 16))
    hp1 = replace(SMALL_HP, blocks=1)
    one = stack_forward(m.blocks[:1], x, hp1)
    second = replace(m.blocks[1], W_out=np.zeros_like(m.blocks[1].W_out))
    two = stack_forward([m.blocks[0], second], x, SMALL_HP)
    np.testing.assert_array_equal(one, two)


def test_ssm_scan_returns_path_only():
    m = _model()
    x = np.random.default_rng(7).standard_normal((5, 16))
    st0 = BlockState.zeros(SMALL_HP.d_inner, SMALL_HP.state, SMALL_HP.conv_kernel)
    path, _ = ssm_scan(m.blocks[0], x, st0)
    y, _ = block_forward(m.blocks[0], x, st0)
    np.testing.assert_allclose(y - x, path, atol=1e-12)


# -- head ----------------------------------------------------------------------


def _head(D=8, C=2, seed=0):
    rng = np.random.default_rng(seed)
    return HeadParams(rng.standard_normal(D), rng.standard_normal(D), rng.standard_normal((D, D // 2)),
                      rng.standard_normal(D // 2), rng.standard_normal((D // 2, C)), rng.standard_normal(C))


def test_head_constant_bias_predicts_background():
    h = _head()
    h = replace(h, W_2=np.zeros_like(h.W_2), b_2=np.array([0.3, -0.3]))
    logits = classifier_head(h, np.random.default_rng(0).standard_normal((6, 8)))
    np.testing.assert_allclose(logits, np.tile([0.3, -0.3], (6, 1)))
    assert predict(logits).tolist() == [0] * 6


def test_head_tie_goes_to_background():
    assert predict(np.zeros((3, 2))).tolist() == [0, 0, 0]


def test_head_matches_oracle():
    h = _head(seed=3)
    x = np.random.default_rng(1).standard_normal(8)
    u = oracles.layer_norm(x, h.ln_gamma, h.ln_beta)
    ref = oracles.mlp2(u, h.W_1.tolist(), h.b_1.tolist(), h.W_2.tolist(), h.b_2.tolist())
    np.testing.assert_allclose(classifier_head(h, x[None])[0], ref, atol=1e-9)


def test_head_ignores_constant_offset():
    h = _head(seed=4)
    x = np.random.default_rng(2).standard_normal((4, 8))
    np.testing.assert_allclose(classifier_head(h, x), classifier_head(h, x + 5.0), atol=1e-6)


# -- history padding -----------------------------------------------------------


def test_pad_history_examples():
    logits = np.arange(6.0).reshape(3, 2)
    padded, ignore = pad_history_logits(logits, 2, 5)
    assert padded.shape == (5, 2)
    np.testing.assert_array_equal(padded[:2], 0.0)
    np.testing.assert_array_equal(padded[2:], logits)
    assert ignore.tolist() == [True, True, False, False, False]
    padded, ignore = pad_history_logits(logits, 0, 3)
    np.testing.assert_array_equal(padded, logits)
    assert not ignore.any()


@pytest.mark.parametrize("h_b,L,rows", [(2, 5, 4), (6, 5, 0), (-1, 3, 4)])
def test_pad_history_rejects(h_b, L, rows):
    with pytest.raises(ValueError):
        pad_history_logits(np.zeros((rows, 2)), h_b, L)
