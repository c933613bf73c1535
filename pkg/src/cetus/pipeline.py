"""End-to-end streaming: chunk -> spatial encode -> temporal stack -> head, with latency control."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .controller import (
    ControllerConfig,
    ControllerState,
    LatencyModel,
    LatencyRecord,
    WallClock,
    control_tick,
    estimate_rate,
)
from .events import EventStream, SensorGeometry, StreamCursor
from .model import ModelParams, check_compatible
from .spatial import HistoryBuffer, SpatialHyperparams, encode_batch, gather
from .temporal import SsmHyperparams, StreamState, classifier_head, stack_forward_streaming

LATENCY_HEADER = ["tick", "rate", "step", "hist", "L_s_ms", "L_i_ms", "L_ms"]


class StreamEngine:
    """Causal inference over one stream, fed chunk by chunk.

    Owns the KNN history ring and the carried SSM state; ``t0_us`` anchors the
    time feature (normally the stream's first timestamp).
    """

    def __init__(
        self,
        model: ModelParams,
        sp: SpatialHyperparams,
        hp: SsmHyperparams,
        geometry: SensorGeometry,
        history: int = 256,
        t0_us: int | None = None,
    ):
        check_compatible(sp, hp)
        self.model, self.sp, self.hp, self.geometry = model, sp, hp, geometry
        self.history = HistoryBuffer(history)
        self.state = StreamState.zeros(hp)
        self.t0_us = t0_us
        self.index = 0

    def step(self, chunk: EventStream) -> np.ndarray:
        """Logits ``(len(chunk), C)`` for the next chunk of the stream."""
        if len(chunk) == 0:
            return np.zeros((0, self.hp.classes))
        if self.t0_us is None:
            self.t0_us = int(chunk.t[0])
        batch = gather(chunk, self.history, self.sp, self.geometry, self.index, self.t0_us)
        y = encode_batch(batch, self.model.spatial, self.sp)
        feats, self.state = stack_forward_streaming(self.model.blocks, y, self.state, chunk_index=self.state.chunks)
        self.index += len(chunk)
        return classifier_head(self.model.head, feats)

    def resize_history(self, capacity: int) -> None:
        self.history.resize(capacity)


@dataclass
class ChunkRow:
    tick: int
    rate: float
    step: int
    hist: int
    record: LatencyRecord
    mean_wait: float  # mean over the chunk's events of (chunk close - arrival), seconds


@dataclass
class RunResult:
    logits: np.ndarray
    rows: list[ChunkRow] = field(default_factory=list)

    @property
    def records(self) -> list[LatencyRecord]:
        return [r.record for r in self.rows]


def _trailing_rate(t_us: np.ndarray, pos: int, window: float) -> float:
    now = int(t_us[pos - 1])
    # early in the stream less than a full window has been observed
    elapsed = (now - int(t_us[0])) * 1e-6
    if 0 < elapsed < window:
        window = elapsed
    lo = int(np.searchsorted(t_us, now - window * 1e6, side="right"))
    return estimate_rate((t_us[lo:pos] - now) * 1e-6, 0.0, window)


def fixed_step_for_window(stream: EventStream, window: float) -> int:
    """Events per chunk equivalent to a time window at the stream's mean rate."""
    rate = stream.mean_rate()
    return max(1, int(round(rate * window))) if rate > 0 else max(1, len(stream))


def run_stream(
    stream: EventStream,
    geometry: SensorGeometry,
    model: ModelParams,
    sp: SpatialHyperparams,
    hp: SsmHyperparams,
    mode: str = "adaptive",
    step: int | None = None,
    config: ControllerConfig | None = None,
    clock=None,
    history: int | None = None,
) -> RunResult:
    """Process a whole stream.

    ``mode="adaptive"`` lets the controller choose chunk size and history per
    tick.  ``mode="fixed"`` uses a constant ``step`` and a constant history
    (``history`` or ``config.H_base``).
    """
    config = config or ControllerConfig()
    clock = clock or WallClock()
    t_us = stream.t.astype(np.int64)
    engine = StreamEngine(model, sp, hp, geometry, history or config.H_base, int(t_us[0]) if len(t_us) else None)
    cursor = StreamCursor(stream)
    out: list[np.ndarray] = []
    rows: list[ChunkRow] = []

    if mode == "fixed":
        if step is None or step < 1:
            raise ValueError("fixed mode requires step >= 1")
        state = None
    elif mode == "adaptive":
        state = ControllerState.initial(config)
        state.H_t = max(config.H_base, sp.k) if history is None else history
        engine.resize_history(state.H_t)
        lat_model = LatencyModel(config.rls_forget)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    tick = 0
    while not cursor.exhausted:
        s = step if state is None else state.s_t
        hist = engine.history.capacity
        chunk = cursor.take_chunk(s)
        logits, t_inf = clock.measure(len(chunk), engine.step, chunk)
        out.append(logits)
        ct = chunk.t.astype(np.int64)
        close = int(ct[-1])
        L_s = (close - int(ct[0])) * 1e-6
        wait = float(np.mean(close - ct)) * 1e-6
        rate = _trailing_rate(t_us, cursor.pos, config.rate_window)
        if state is None:
            rec = LatencyRecord(0.0, L_s, t_inf)
        else:
            _, h_next, rec = control_tick(
                state, rate, t_inf, lat_model, config, k=sp.k, window_latency=L_s, events=len(chunk)
            )
            engine.resize_history(h_next)
        rows.append(ChunkRow(tick, rate, len(chunk), hist, rec, wait))
        tick += 1

    logits = np.concatenate(out) if out else np.zeros((0, hp.classes))
    return RunResult(logits, rows)


def write_latency_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LATENCY_HEADER)
        for r in rows:
            rec = r.record
            w.writerow([r.tick, repr(r.rate), r.step, r.hist, repr(rec.L_s * 1e3), repr(rec.L_i * 1e3), repr(rec.L * 1e3)])


def write_logits_csv(path, stream: EventStream, logits: np.ndarray) -> None:
    C = logits.shape[1]
    pred = np.argmax(logits, axis=1) if len(logits) else np.zeros(0, dtype=int)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "t_us"] + [f"logit_{c}" for c in range(C)] + ["pred"])
        for i in range(len(logits)):
            w.writerow([i, int(stream.t[i])] + [repr(float(v)) for v in logits[i]] + [int(pred[i])])


def read_logits_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or header[:2] != ["index", "t_us"]:
            raise ValueError(f"{path}: not a logits CSV")
        cols = [i for i, h in enumerate(header) if h.startswith("logit_")]
        rows = []
        for lineno, row in enumerate(r, 2):
            if not row:
                continue
            if int(row[0]) != len(rows):
                raise ValueError(f"{path}:{lineno}: row index {row[0]} out of sequence")
            rows.append([float(row[c]) for c in cols])
    return np.array(rows, dtype=np.float64).reshape(len(rows), len(cols))


# ---------------------------------------------------------------------------
# Benchmark


@dataclass(frozen=True)
class LatencyStats:
    mode: str
    repetition: int
    chunks: int
    mean_step: float
    L_s: tuple[float, float, float]  # mean, p50, p95 (seconds)
    L_i: tuple[float, float, float]
    L: tuple[float, float, float]
    mean_wait: float
    identity_ok: bool


def _stats(v) -> tuple[float, float, float]:
    v = np.asarray(v, dtype=np.float64)
    return float(v.mean()), float(np.percentile(v, 50)), float(np.percentile(v, 95))


def summarize(mode: str, rep: int, result: RunResult) -> LatencyStats:
    recs = result.records
    weights = np.array([r.step for r in result.rows], dtype=np.float64)
    return LatencyStats(
        mode=mode,
        repetition=rep,
        chunks=len(recs),
        mean_step=float(weights.mean()),
        L_s=_stats([r.L_s for r in recs]),
        L_i=_stats([r.L_i for r in recs]),
        L=_stats([r.L for r in recs]),
        mean_wait=float(np.average([r.mean_wait for r in result.rows], weights=weights)),
        identity_ok=all(r.L == r.L_e + r.L_s + r.L_i for r in recs),
    )


def bench(
    stream: EventStream,
    geometry: SensorGeometry,
    model: ModelParams,
    sp: SpatialHyperparams,
    hp: SsmHyperparams,
    config: ControllerConfig,
    repetitions: int = 3,
    fixed_window: float = 0.05,
) -> list[LatencyStats]:
    """Adaptive vs fixed-window latency, repetitions run sequentially on the wall clock."""
    fixed = fixed_step_for_window(stream, fixed_window)
    out = []
    for rep in range(repetitions):
        res = run_stream(stream, geometry, model, sp, hp, "adaptive", config=config, clock=WallClock())
        out.append(summarize("adaptive", rep, res))
        res = run_stream(stream, geometry, model, sp, hp, "fixed", step=fixed, config=config, clock=WallClock())
        out.append(summarize("fixed", rep, res))
    return out


BENCH_HEADER = [
    "mode", "rep", "chunks", "mean_step",
    "L_s_mean_ms", "L_s_p50_ms", "L_s_p95_ms",
    "L_i_mean_ms", "L_i_p50_ms", "L_i_p95_ms",
    "L_mean_ms", "L_p50_ms", "L_p95_ms",
    "wait_mean_ms", "identity_ok",
]


def write_bench_csv(path, stats) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_HEADER)
        for s in stats:
            w.writerow(
                [s.mode, s.repetition, s.chunks, f"{s.mean_step:.2f}"]
                + [f"{v * 1e3:.4f}" for v in (*s.L_s, *s.L_i, *s.L, s.mean_wait)]
                + [int(s.identity_ok)]
            )
