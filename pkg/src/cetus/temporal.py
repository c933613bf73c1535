"""Stacked selective state-space blocks with carried streaming state, plus the classifier head.

Block layout (row-vector convention, ``x`` is ``(L, D)``)::

    u, g   = split(LN(x) @ W_in)                 # value and gate paths, D_inner each
    u'     = SiLU(causal_depthwise_conv(u) + conv_b)
    δ, B, C = split(u' @ W_x)                    # dt_rank, N, N
    Δ      = softplus(δ @ W_dt + b_dt)           # (L, D_inner)
    h_t    = exp(Δ_t A) h_{t-1} + Δ_t B_t u'_t   # h is (D_inner, N), A = -exp(A_log)
    y_t    = h_t C_t + D_skip u'_t
    out    = x + (y * SiLU(g)) @ W_out

Chunked processing carries ``h`` and the last ``conv_kernel - 1`` values of ``u``
per block, so any chunk partition reproduces the full-sequence result.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .spatial import layer_norm

# recurrence is evaluated in slabs of this many steps to bound the (L, D_inner, N) temporaries
_SCAN_SLAB = 256


class StateShapeError(ValueError):
    pass


class ChunkOrderError(ValueError):
    pass


@dataclass(frozen=True)
class SsmHyperparams:
    blocks: int = 2
    dim: int = 128
    state: int = 32
    expand: int = 1
    conv_kernel: int = 4
    dt_rank: int = 8
    classes: int = 2

    def __post_init__(self):
        if self.blocks < 1 or self.state < 1 or self.expand < 1:
            raise ValueError("blocks, state and expand must be >= 1")
        if self.conv_kernel < 1 or self.dt_rank < 1 or self.classes < 2:
            raise ValueError("conv_kernel, dt_rank >= 1 and classes >= 2 required")
        if self.dim < 2 or self.dim % 2:
            raise ValueError("dim must be even (head hidden width is dim/2)")

    @property
    def d_inner(self) -> int:
        return self.expand * self.dim


@dataclass
class SsmBlockParams:
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    W_in: np.ndarray  # (D, 2*Di)
    conv_w: np.ndarray  # (Di, K); last tap multiplies the current step
    conv_b: np.ndarray
    W_x: np.ndarray  # (Di, R + 2N)
    W_dt: np.ndarray  # (R, Di)
    b_dt: np.ndarray
    A_log: np.ndarray  # (Di, N)
    D_skip: np.ndarray
    W_out: np.ndarray  # (Di, D)

    @property
    def d_inner(self) -> int:
        return self.A_log.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A_log.shape[1]

    @property
    def dt_rank(self) -> int:
        return self.W_dt.shape[0]

    @property
    def conv_kernel(self) -> int:
        return self.conv_w.shape[1]

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.A_log)


@dataclass
class HeadParams:
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    W_1: np.ndarray  # (D, D/2)
    b_1: np.ndarray
    W_2: np.ndarray  # (D/2, C)
    b_2: np.ndarray


@dataclass
class BlockState:
    h: np.ndarray  # (Di, N)
    conv_tail: np.ndarray  # (K-1, Di), oldest first

    @classmethod
    def zeros(cls, d_inner: int, state: int, conv_kernel: int) -> "BlockState":
        return cls(np.zeros((d_inner, state)), np.zeros((conv_kernel - 1, d_inner)))

    def copy(self) -> "BlockState":
        return BlockState(self.h.copy(), self.conv_tail.copy())


@dataclass
class StreamState:
    blocks: list[BlockState] = field(default_factory=list)
    chunks: int = 0

    @classmethod
    def zeros(cls, hp: SsmHyperparams) -> "StreamState":
        return cls([BlockState.zeros(hp.d_inner, hp.state, hp.conv_kernel) for _ in range(hp.blocks)])

    def copy(self) -> "StreamState":
        return StreamState([b.copy() for b in self.blocks], self.chunks)


def silu(x):
    return x / (1.0 + np.exp(-x))


def softplus(x):
    return np.logaddexp(0.0, x)


def selective_scan(u, delta, A, B, C, D_skip, h0):
    """Sequential selective scan.

    ``u``, ``delta``: ``(L, Di)``; ``A``: ``(Di, N)``; ``B``, ``C``: ``(L, N)``;
    ``D_skip``: ``(Di,)``; ``h0``: ``(Di, N)``.  Returns ``(y, h_last)``.
    """
    L = u.shape[0]
    y = np.empty_like(u, dtype=np.result_type(u, delta, A, 1.0))
    h = np.array(h0, dtype=y.dtype, copy=True)
    for s0 in range(0, L, _SCAN_SLAB):
        s1 = min(s0 + _SCAN_SLAB, L)
        dA = np.exp(delta[s0:s1, :, None] * A)
        dBu = (delta[s0:s1] * u[s0:s1])[:, :, None] * B[s0:s1, None, :]
        Cs = C[s0:s1]
        for t in range(s1 - s0):
            h = dA[t] * h + dBu[t]
            y[s0 + t] = h @ Cs[t]
    y += u * D_skip
    return y, h


def _check_state(block: SsmBlockParams, st: BlockState) -> None:
    if st.h.shape != (block.d_inner, block.state_dim) or st.conv_tail.shape != (block.conv_kernel - 1, block.d_inner):
        raise StateShapeError(
            f"state shapes h={st.h.shape}, tail={st.conv_tail.shape} do not match block "
            f"(d_inner={block.d_inner}, N={block.state_dim}, K={block.conv_kernel})"
        )


def ssm_scan(block: SsmBlockParams, x: np.ndarray, state: BlockState) -> tuple[np.ndarray, BlockState]:
    """The normalised SSM path of one block over a chunk ``x`` of shape ``(L, D)``.

    Returns the path output (without the residual) and the new block state; the
    input state is not modified.
    """
    _check_state(block, state)
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[0]
    if L == 0:
        return np.zeros((0, block.W_out.shape[1])), state.copy()
    di, n, r, K = block.d_inner, block.state_dim, block.dt_rank, block.conv_kernel

    ug = layer_norm(x, block.ln_gamma, block.ln_beta) @ block.W_in
    u, g = ug[:, :di], ug[:, di:]

    padded = np.concatenate([state.conv_tail, u], axis=0)  # (K-1+L, Di)
    acc = np.zeros((L, di))
    for j in range(K):
        acc += padded[j : j + L] * block.conv_w[:, j]
    u2 = silu(acc + block.conv_b)

    proj = u2 @ block.W_x
    dlt, B, C = proj[:, :r], proj[:, r : r + n], proj[:, r + n :]
    delta = softplus(dlt @ block.W_dt + block.b_dt)

    y, h = selective_scan(u2, delta, block.A, B, C, block.D_skip, state.h)
    out = (y * silu(g)) @ block.W_out
    return out, BlockState(h, padded[L:].copy() if K > 1 else np.zeros((0, di)))


def block_forward(block: SsmBlockParams, chunk: np.ndarray, state: BlockState):
    path, new_state = ssm_scan(block, chunk, state)
    return np.asarray(chunk, dtype=np.float64) + path, new_state


def stack_forward_streaming(blocks, chunk: np.ndarray, state: StreamState, chunk_index: int | None = None):
    """Apply all blocks to one chunk; returns ``(features, new_state)``.

    ``chunk_index``, when given, must equal the number of non-empty chunks the
    state has already consumed.
    """
    if chunk_index is not None and chunk_index != state.chunks:
        raise ChunkOrderError(f"expected chunk {state.chunks}, got {chunk_index}")
    if len(state.blocks) != len(blocks):
        raise StateShapeError(f"state has {len(state.blocks)} block slots, model has {len(blocks)}")
    x = np.asarray(chunk, dtype=np.float64)
    if x.shape[0] == 0:
        return x.reshape(0, blocks[0].W_out.shape[1]), state
    new_blocks = []
    for blk, st in zip(blocks, state.blocks):
        x, st2 = block_forward(blk, x, st)
        new_blocks.append(st2)
    return x, replace(state, blocks=new_blocks, chunks=state.chunks + 1)


def stack_forward(blocks, seq: np.ndarray, hp: SsmHyperparams) -> np.ndarray:
    """Full-sequence forward from a zero state."""
    out, _ = stack_forward_streaming(blocks, seq, StreamState.zeros(hp))
    return out


def classifier_head(head: HeadParams, features: np.ndarray) -> np.ndarray:
    u = layer_norm(np.asarray(features, dtype=np.float64), head.ln_gamma, head.ln_beta)
    return np.maximum(u @ head.W_1 + head.b_1, 0.0) @ head.W_2 + head.b_2


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax over classes; exact ties resolve to the lower class (background)."""
    return np.argmax(logits, axis=-1)


def pad_history_logits(logits: np.ndarray, h_b: int, L: int):
    """Prepend ``h_b`` zero rows flagged as ignored; returns ``(padded, ignore)``."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= h_b <= L:
        raise ValueError(f"history length {h_b} outside [0, {L}]")
    if logits.shape[0] != L - h_b:
        raise ValueError(f"expected {L - h_b} logit rows, got {logits.shape[0]}")
    C = logits.shape[1] if logits.ndim == 2 else 0
    padded = np.concatenate([np.zeros((h_b, C)), logits.reshape(L - h_b, C)], axis=0)
    ignore = np.zeros(L, dtype=bool)
    ignore[:h_b] = True
    return padded, ignore


def block_param_count(hp: SsmHyperparams) -> int:
    D, Di, N, R, K = hp.dim, hp.d_inner, hp.state, hp.dt_rank, hp.conv_kernel
    return (
        2 * D  # ln
        + D * 2 * Di  # W_in
        + Di * K + Di  # conv
        + Di * (R + 2 * N)  # W_x
        + R * Di + Di  # W_dt, b_dt
        + Di * N  # A_log
        + Di  # D_skip
        + Di * D  # W_out
    )


def head_param_count(hp: SsmHyperparams) -> int:
    D, H, C = hp.dim, hp.dim // 2, hp.classes
    return 2 * D + D * H + H + H * C + C
