"""Per-event causal spatial encoder.

Each event is described by a raw 5-vector ``[u, v, t_s, log1p(R)/10, p]``
(normalised column, normalised row, seconds since stream start, scaled local
event rate, polarity).  Its k nearest *earlier* events inside a weighted
spatio-temporal radius are gathered from a bounded history ring, offset through
a small position MLP, and attended to with the event itself as the single query.

Neighbour selection depends only on geometry, never on weights, so it is split
out (``gather``) from the neural part (``encode_batch``).  That lets training
loops cache the neighbour structure of a fixed stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .events import EventStream, SensorGeometry

RAW_DIM = 5
MASK_VALUE = -1e9
LN_EPS = 1e-5


@dataclass(frozen=True)
class SpatialHyperparams:
    k: int = 16
    radius: float = 0.2
    lambda_s: float = 1.0
    lambda_t: float = 1.0
    alpha: float = 1.0
    tau: float = 0.01
    dim: int = 128
    heads: int = 4

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.radius > 0:
            raise ValueError("radius must be > 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.heads < 1 or self.dim % self.heads:
            raise ValueError("heads must divide dim")


@dataclass
class SpatialEncoderParams:
    W_c: np.ndarray  # (5, D)
    b_c: np.ndarray  # (D,)
    W_1: np.ndarray  # (4, D)
    b_1: np.ndarray
    W_2: np.ndarray  # (D, D)
    b_2: np.ndarray
    ln_gamma: np.ndarray
    ln_beta: np.ndarray

    @property
    def dim(self) -> int:
        return self.b_c.shape[0]


@dataclass(frozen=True)
class NormalizedPoint:
    u: float
    v: float
    t_s: float


def normalize(x: int, y: int, t_us: int, geometry: SensorGeometry, t0_us: int = 0) -> NormalizedPoint:
    return NormalizedPoint(x / geometry.width, y / geometry.height, (t_us - t0_us) * 1e-6)


def layer_norm(z: np.ndarray, gamma, beta) -> np.ndarray:
    mu = z.mean(axis=-1, keepdims=True)
    var = z.var(axis=-1, keepdims=True)
    return (z - mu) / np.sqrt(var + LN_EPS) * gamma + beta


def scale_rate(rate):
    return np.log1p(rate) / 10.0


class HistoryBuffer:
    """Ring of the most recent encoded events.

    Stores each event's raw feature row ``[u, v, t_s, rate_scaled, p]``, its raw
    timestamp and its global stream index (used for causal tie-breaking).
    ``resize`` keeps the newest entries and may only be called between chunks.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("history capacity must be >= 1")
        self.capacity = capacity
        self._feat = np.zeros((capacity, RAW_DIM))
        self._t_us = np.zeros(capacity, dtype=np.int64)
        self._index = np.zeros(capacity, dtype=np.int64)
        self._write = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def append(self, feat, t_us: int, index: int) -> None:
        w = self._write
        self._feat[w] = feat
        self._t_us[w] = t_us
        self._index[w] = index
        self._write = (w + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        # slots oldest -> newest
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._write) % self.capacity

    def entries(self):
        """``(features, t_us, index)`` in chronological order (copies)."""
        o = self._order()
        return self._feat[o], self._t_us[o], self._index[o]

    def resize(self, capacity: int) -> None:
        if capacity < 1:
            raise ValueError("history capacity must be >= 1")
        if capacity == self.capacity:
            return
        feat, t_us, idx = self.entries()
        keep = min(len(idx), capacity)
        self.capacity = capacity
        self._feat = np.zeros((capacity, RAW_DIM))
        self._t_us = np.zeros(capacity, dtype=np.int64)
        self._index = np.zeros(capacity, dtype=np.int64)
        self._size = keep
        self._write = keep % capacity
        if keep:
            self._feat[:keep] = feat[-keep:]
            self._t_us[:keep] = t_us[-keep:]
            self._index[:keep] = idx[-keep:]

    def copy(self) -> "HistoryBuffer":
        h = HistoryBuffer.__new__(HistoryBuffer)
        h.capacity, h._write, h._size = self.capacity, self._write, self._size
        h._feat, h._t_us, h._index = self._feat.copy(), self._t_us.copy(), self._index.copy()
        return h

    # raw views over live slots (unordered); used on the hot path
    def _live(self):
        n = self._size
        return self._feat[:n], self._index[:n]


@dataclass
class NeighborQuery:
    indices: np.ndarray  # (k,) global stream indices, -1 where masked
    mask: np.ndarray  # (k,) bool
    distances: np.ndarray  # (k,)
    offsets: np.ndarray  # (k, 3) neighbour minus centre: du, dv, dt_s
    features: np.ndarray  # (k, 5) raw features of the neighbours (zeros where masked)


def local_event_rate(history: HistoryBuffer, t_i: float, tau: float) -> float:
    """Buffered events with ``t_i - tau <= t_j < t_i``, per second."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    feat, _ = history._live()
    if not len(feat):
        return 0.0
    ts = feat[:, 2]
    return float(np.count_nonzero((ts >= t_i - tau) & (ts < t_i))) / tau


def weighted_distance(a: NormalizedPoint, b: NormalizedPoint, hp: SpatialHyperparams):
    d_s = math.hypot(a.u - b.u, a.v - b.v)
    d_t = hp.alpha * abs(a.t_s - b.t_s)
    return d_s, d_t, hp.lambda_s * d_s + hp.lambda_t * d_t


def causal_knn(center: NormalizedPoint, history: HistoryBuffer, hp: SpatialHyperparams) -> NeighborQuery:
    """k smallest weighted distances among buffered events with ``d <= radius``.

    Equal distances go to the more recent event (larger stream index).
    """
    k = hp.k
    q = NeighborQuery(
        indices=np.full(k, -1, dtype=np.int64),
        mask=np.zeros(k, dtype=bool),
        distances=np.zeros(k),
        offsets=np.zeros((k, 3)),
        features=np.zeros((k, RAW_DIM)),
    )
    feat, idx = history._live()
    if not len(feat):
        return q
    du = feat[:, 0] - center.u
    dv = feat[:, 1] - center.v
    dt = feat[:, 2] - center.t_s
    d = hp.lambda_s * np.sqrt(du * du + dv * dv) + hp.lambda_t * (hp.alpha * np.abs(dt))
    cand = np.flatnonzero(d <= hp.radius)
    if not len(cand):
        return q
    if len(cand) > k:
        # partition on distance first, then resolve the boundary exactly
        kth = np.partition(d[cand], k - 1)[k - 1]
        cand = cand[d[cand] <= kth]
    order = cand[np.lexsort((-idx[cand], d[cand]))][:k]
    n = len(order)
    q.indices[:n] = idx[order]
    q.mask[:n] = True
    q.distances[:n] = d[order]
    q.offsets[:n, 0] = du[order]
    q.offsets[:n, 1] = dv[order]
    q.offsets[:n, 2] = dt[order]
    q.features[:n] = feat[order]
    return q


def raw_feature(point: NormalizedPoint, rate: float, p: int) -> np.ndarray:
    return np.array([point.u, point.v, point.t_s, scale_rate(rate), float(p)])


def encode_center(f_raw: np.ndarray, params: SpatialEncoderParams) -> np.ndarray:
    f_raw = np.asarray(f_raw, dtype=np.float64)
    if not np.all(np.isfinite(f_raw)):
        raise ValueError("non-finite raw feature")
    return f_raw @ params.W_c + params.b_c


def position_bias(offsets: np.ndarray, distances: np.ndarray, params: SpatialEncoderParams) -> np.ndarray:
    """Two-layer ReLU MLP over ``[du, dv, dt_s, d]``; works on any leading shape."""
    z = np.concatenate([offsets, np.asarray(distances)[..., None]], axis=-1)
    return np.maximum(z @ params.W_1 + params.b_1, 0.0) @ params.W_2 + params.b_2


def local_attention(query: np.ndarray, neighbors: np.ndarray, mask: np.ndarray, heads: int) -> np.ndarray:
    """Projection-free single-query multi-head attention.

    ``query`` is ``(..., D)``, ``neighbors`` ``(..., k, D)``, ``mask`` ``(..., k)``.
    Heads are contiguous slices of D.  Rows with no valid neighbour return 0.
    """
    *lead, k, dim = neighbors.shape
    dh = dim // heads
    qh = query.reshape(*lead, heads, dh)
    kh = neighbors.reshape(*lead, k, heads, dh)
    scores = np.einsum("...hd,...khd->...hk", qh, kh) / math.sqrt(dh)
    scores = scores + np.where(mask, 0.0, MASK_VALUE)[..., None, :]
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    out = np.einsum("...hk,...khd->...hd", w, kh).reshape(*lead, dim)
    empty = ~np.any(mask, axis=-1)
    if np.any(empty):
        out[empty] = 0.0
    return out


def attention_weights(query, neighbors, mask, heads):
    """Per-head softmax weights, shape ``(heads, k)``; for inspection and tests."""
    k, dim = neighbors.shape
    dh = dim // heads
    scores = np.einsum("hd,khd->hk", query.reshape(heads, dh), neighbors.reshape(k, heads, dh)) / math.sqrt(dh)
    scores = scores + np.where(mask, 0.0, MASK_VALUE)[None, :]
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    return w / w.sum(axis=-1, keepdims=True)


def spatial_encode_event(
    event,
    history: HistoryBuffer,
    params: SpatialEncoderParams,
    hp: SpatialHyperparams,
    geometry: SensorGeometry,
    index: int,
    t0_us: int = 0,
) -> np.ndarray:
    """Encode one event against ``history`` and then append it.

    ``event`` is an ``Event`` (or ``LabeledEvent``); ``index`` is its position in
    the stream.  Dropout is never applied here.
    """
    ev = getattr(event, "event", event)
    pt = normalize(ev.x, ev.y, ev.t, geometry, t0_us)
    rate = local_event_rate(history, pt.t_s, hp.tau)
    f_raw = raw_feature(pt, rate, ev.p)
    q = causal_knn(pt, history, hp)
    f = encode_center(f_raw, params)
    h = q.features @ params.W_c + params.b_c + position_bias(q.offsets, q.distances, params)
    a = local_attention(f, h, q.mask, hp.heads)
    history.append(f_raw, ev.t, index)
    return layer_norm(f + a, params.ln_gamma, params.ln_beta)


@dataclass
class NeighborBatch:
    """Weight-independent neighbourhood structure for a run of events."""

    raw: np.ndarray  # (n, 5)
    nbr_raw: np.ndarray  # (n, k, 5)
    offsets: np.ndarray  # (n, k, 3)
    distances: np.ndarray  # (n, k)
    mask: np.ndarray  # (n, k)

    def __len__(self) -> int:
        return len(self.raw)

    @classmethod
    def concat(cls, batches) -> "NeighborBatch":
        return cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in ("raw", "nbr_raw", "offsets", "distances", "mask")))


def gather(
    chunk: EventStream,
    history: HistoryBuffer,
    hp: SpatialHyperparams,
    geometry: SensorGeometry,
    first_index: int,
    t0_us: int = 0,
) -> NeighborBatch:
    """Run the causal queries for every event of ``chunk`` in order, appending each to ``history``."""
    n, k = len(chunk), hp.k
    out = NeighborBatch(
        raw=np.zeros((n, RAW_DIM)),
        nbr_raw=np.zeros((n, k, RAW_DIM)),
        offsets=np.zeros((n, k, 3)),
        distances=np.zeros((n, k)),
        mask=np.zeros((n, k), dtype=bool),
    )
    t_us = chunk.t.astype(np.int64)
    us = chunk.x / geometry.width
    vs = chunk.y / geometry.height
    ts = (t_us - t0_us) * 1e-6
    ps = chunk.p.astype(np.float64)
    for i in range(n):
        pt = NormalizedPoint(float(us[i]), float(vs[i]), float(ts[i]))
        rate = local_event_rate(history, pt.t_s, hp.tau)
        f_raw = np.array([pt.u, pt.v, pt.t_s, scale_rate(rate), ps[i]])
        q = causal_knn(pt, history, hp)
        out.raw[i] = f_raw
        out.nbr_raw[i] = q.features
        out.offsets[i] = q.offsets
        out.distances[i] = q.distances
        out.mask[i] = q.mask
        history.append(f_raw, int(t_us[i]), first_index + i)
    return out


def encode_batch(batch: NeighborBatch, params: SpatialEncoderParams, hp: SpatialHyperparams) -> np.ndarray:
    """Neural half of the encoder over a gathered batch; returns ``(n, D)``."""
    if not len(batch):
        return np.zeros((0, params.dim))
    if not np.all(np.isfinite(batch.raw)):
        raise ValueError("non-finite raw feature")
    f = batch.raw @ params.W_c + params.b_c
    h = batch.nbr_raw @ params.W_c + params.b_c + position_bias(batch.offsets, batch.distances, params)
    a = local_attention(f, h, batch.mask, hp.heads)
    return layer_norm(f + a, params.ln_gamma, params.ln_beta)


def spatial_param_count(dim: int) -> int:
    return RAW_DIM * dim + dim + 4 * dim + dim + dim * dim + dim + 2 * dim
