import numpy as np
import pytest

from cetus.controller import ControllerConfig, SimulatedClock
from cetus.events import EventStream, concat, iter_chunks
from cetus.model import init_weights
from cetus.pipeline import (
    StreamEngine,
    bench,
    fixed_step_for_window,
    read_logits_csv,
    run_stream,
    summarize,
    write_bench_csv,
    write_latency_csv,
    write_logits_csv,
)

from conftest import SMALL_HP, SMALL_SP, make_stream, randomize


@pytest.fixture(scope="module")
def model():
    return randomize(init_weights(SMALL_SP, SMALL_HP, 0), 9)


def _first(stream, n):
    return stream[:n]


def test_fixed_mode_chunk_count(model):
    geo, s = make_stream(seed=1, duration=0.1, bg=8000, target=2000)
    s = _first(s, 640)
    res = run_stream(s, geo, model, SMALL_SP, SMALL_HP, "fixed", step=64, clock=SimulatedClock(1e-3, 1e-6))
    assert len(res.rows) == 10
    assert res.logits.shape == (640, SMALL_HP.classes)
    assert all(r.step == 64 for r in res.rows)


def test_fixed_mode_requires_step(model):
    geo, s = make_stream(seed=1)
    with pytest.raises(ValueError):
        run_stream(s, geo, model, SMALL_SP, SMALL_HP, "fixed")
    with pytest.raises(ValueError):
        run_stream(s, geo, model, SMALL_SP, SMALL_HP, "turbo", step=4)


def test_chunking_does_not_change_logits(model):
    geo, s = make_stream(seed=2)
    big = 10_000
    a = run_stream(s, geo, model, SMALL_SP, SMALL_HP, "fixed", step=len(s), history=big, clock=SimulatedClock(0, 0))
    b = run_stream(s, geo, model, SMALL_SP, SMALL_HP, "fixed", step=7, history=big, clock=SimulatedClock(0, 0))
    np.testing.assert_allclose(a.logits, b.logits, rtol=1e-9, atol=1e-10)


def test_adaptive_deterministic_with_simulated_clock(model, tmp_path):
    geo, s = make_stream(seed=3, duration=0.03)
    cfg = ControllerConfig(s_min=4)
    runs = []
    for i in range(2):
        res = run_stream(s, geo, model, SMALL_SP, SMALL_HP, "adaptive", config=cfg, clock=SimulatedClock(5e-4, 5e-6, 1e-5, seed=1))
        write_latency_csv(tmp_path / f"lat{i}.csv", res.rows)
        write_logits_csv(tmp_path / f"log{i}.csv", s, res.logits)
        runs.append(res)
    assert (tmp_path / "lat0.csv").read_bytes() == (tmp_path / "lat1.csv").read_bytes()
    assert (tmp_path / "log0.csv").read_bytes() == (tmp_path / "log1.csv").read_bytes()
    assert sum(r.step for r in runs[0].rows) == len(s)


def test_adaptive_tracks_window_budget(model):
    geo, s = make_stream(seed=4, duration=0.05, bg=95000, target=5000, size=64)
    cfg = ControllerConfig()
    res = run_stream(s, geo, model, SMALL_SP, SMALL_HP, "adaptive", config=cfg, clock=SimulatedClock(0.5e-3, 5e-6))
    steps = [r.step for r in res.rows[10:-1]]
    assert steps and 70 <= np.mean(steps) <= 130
    for r in res.rows[:-1]:  # the final chunk holds whatever remains
        assert cfg.s_min <= r.step <= cfg.s_max
    assert all(r.record.consistent for r in res.rows)


def test_causal_under_append(model):
    geo, s = make_stream(seed=5, duration=0.02)
    n = len(s) // 2
    cut = run_stream(s[:n], geo, model, SMALL_SP, SMALL_HP, "fixed", step=16, clock=SimulatedClock(0, 0))
    full = run_stream(s, geo, model, SMALL_SP, SMALL_HP, "fixed", step=16, clock=SimulatedClock(0, 0))
    np.testing.assert_array_equal(full.logits[:n], cut.logits)


def test_engine_matches_run_stream(model):
    geo, s = make_stream(seed=6)
    eng = StreamEngine(model, SMALL_SP, SMALL_HP, geo, history=256)
    out = np.concatenate([eng.step(c) for c in iter_chunks(s, 13)])
    res = run_stream(s, geo, model, SMALL_SP, SMALL_HP, "fixed", step=13, history=256, clock=SimulatedClock(0, 0))
    np.testing.assert_array_equal(out, res.logits)
    assert eng.step(EventStream.empty()).shape == (0, 2)


def test_separate_streams_isolated(model):
    geo, a = make_stream(seed=7)
    _, b = make_stream(seed=8)
    ea = StreamEngine(model, SMALL_SP, SMALL_HP, geo)
    eb = StreamEngine(model, SMALL_SP, SMALL_HP, geo)
    outs = []
    for ca, cb in zip(iter_chunks(a, 20), iter_chunks(b, 20)):
        outs.append(ea.step(ca))
        eb.step(cb)
    solo = StreamEngine(model, SMALL_SP, SMALL_HP, geo)
    ref = np.concatenate([solo.step(c) for c in iter_chunks(a, 20)][: len(outs)])
    np.testing.assert_array_equal(np.concatenate(outs), ref)


def test_window_latency_is_chunk_span(model):
    geo, s = make_stream(seed=9)
    res = run_stream(s, geo, model, SMALL_SP, SMALL_HP, "fixed", step=10, clock=SimulatedClock(1e-3, 0))
    r0 = res.rows[0]
    assert r0.record.L_s == pytest.approx((int(s.t[9]) - int(s.t[0])) * 1e-6)
    assert r0.record.L_i == 1e-3
    assert r0.record.L_e == 0.0
    assert 0 <= r0.mean_wait <= r0.record.L_s


def test_fixed_step_for_window():
    geo, s = make_stream(seed=0, duration=0.1, bg=10000, target=0)
    assert abs(fixed_step_for_window(s, 0.05) - 500) <= 50


def test_logits_csv_round_trip(model, tmp_path):
    geo, s = make_stream(seed=1)
    res = run_stream(s, geo, model, SMALL_SP, SMALL_HP, "fixed", step=32, clock=SimulatedClock(0, 0))
    p = tmp_path / "l.csv"
    write_logits_csv(p, s, res.logits)
    np.testing.assert_array_equal(read_logits_csv(p), res.logits)
    header = p.read_text().splitlines()[0]
    assert header == "index,t_us,logit_0,logit_1,pred"


def test_latency_csv_header(model, tmp_path):
    geo, s = make_stream(seed=1)
    res = run_stream(s, geo, model, SMALL_SP, SMALL_HP, "adaptive", clock=SimulatedClock(1e-3, 1e-6))
    p = tmp_path / "lat.csv"
    write_latency_csv(p, res.rows)
    lines = p.read_text().splitlines()
    assert lines[0] == "tick,rate,step,hist,L_s_ms,L_i_ms,L_ms"
    assert len(lines) == len(res.rows) + 1


def test_bench_rows_and_identity(model, tmp_path):
    geo, s = make_stream(seed=2, duration=0.02)
    stats = bench(s, geo, model, SMALL_SP, SMALL_HP, ControllerConfig(), repetitions=2, fixed_window=0.005)
    assert [(x.mode, x.repetition) for x in stats] == [("adaptive", 0), ("fixed", 0), ("adaptive", 1), ("fixed", 1)]
    assert all(x.identity_ok for x in stats)
    p = tmp_path / "bench.csv"
    write_bench_csv(p, stats)
    assert len(p.read_text().splitlines()) == 5


def test_summarize_percentiles(model):
    geo, s = make_stream(seed=3)
    res = run_stream(s, geo, model, SMALL_SP, SMALL_HP, "fixed", step=8, clock=SimulatedClock(1e-3, 0))
    st = summarize("fixed", 0, res)
    assert st.L_i == pytest.approx((1e-3, 1e-3, 1e-3))
    assert st.L_s[1] <= st.L_s[2]
    assert st.chunks == len(res.rows)


def test_concat_chunks_cover_stream():
    geo, s = make_stream(seed=4)
    assert concat(list(iter_chunks(s, 9))) == s
