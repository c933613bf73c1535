"""Command-line entry point: ``cetus {generate,run,eval,bench,nano-fit,params}``.

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import load_run_config, parse_overrides
from .controller import make_clock
from .events import (
    GeneratorConfig,
    generate_stream,
    generator_config_from_mapping,
    load_generator_config,
    read_events,
    write_events,
)
from .fit import NANO_SPATIAL, NANO_SSM, FitProblem, SpsaConfig, separable_config, spsa_fit
from .metrics import WindowEvalConfig, focal_loss, point_metrics, window_metrics
from .model import count_parameters, init_weights, load_weights, save_weights
from .pipeline import (
    bench,
    fixed_step_for_window,
    read_logits_csv,
    run_stream,
    write_bench_csv,
    write_latency_csv,
    write_logits_csv,
)

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


def _gen_config(args) -> GeneratorConfig:
    overrides = parse_overrides(getattr(args, "gen_set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    return load_generator_config(args.gen_config, **overrides) if args.gen_config else generator_config_from_mapping(
        {**_DEFAULT_GEN, **overrides}
    )


# default synthetic stream: 1e5 ev/s total on a 64x64 sensor, one moving target
_DEFAULT_GEN = {
    "width": "64", "height": "64", "duration": "0.1", "background_rate": "95000",
    "target_rate": "5000", "start_x": "10", "start_y": "10", "velocity_x": "200",
    "velocity_y": "150", "target_sigma": "1.5",
}


def _load_stream(args):
    if getattr(args, "input", None):
        return read_events(args.input)
    cfg = _gen_config(args)
    return cfg.geometry, generate_stream(cfg)


def _run_config(args):
    overrides = parse_overrides(args.set)
    for key in ("mode", "step", "weights", "seed", "clock"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = str(v)
    if getattr(args, "window_ms", None) is not None:
        overrides["window"] = str(args.window_ms * 1e-3)
    base = NANO_DEFAULTS if getattr(args, "nano", False) else None
    return load_run_config(args.config, overrides, base=base)


def _model(rc):
    if rc.weights:
        return load_weights(rc.weights, rc.spatial, rc.ssm)
    return init_weights(rc.spatial, rc.ssm, rc.seed)


# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _gen_config(args)
    stream = generate_stream(cfg)
    write_events(args.output, cfg.geometry, stream)
    rate = len(stream) / cfg.duration
    print(f"events={len(stream)} mean_rate={rate:.1f} ev/s targets={int(stream.label.sum())} -> {args.output}")
    return EXIT_OK


def cmd_run(args) -> int:
    rc = _run_config(args)
    geo, stream = _load_stream(args)
    model = _model(rc)
    clock = make_clock(rc.clock, rc.sim_a, rc.sim_b, rc.sim_noise, rc.seed)
    step = rc.step
    if rc.mode == "fixed" and step is None:
        step = fixed_step_for_window(stream, rc.window or 0.05)
    res = run_stream(stream, geo, model, rc.spatial, rc.ssm, rc.mode, step=step, config=rc.controller, clock=clock)
    write_logits_csv(args.logits, stream, res.logits)
    if args.latency:
        write_latency_csv(args.latency, res.rows)
    if args.plot_dir:
        from .plotting import plot_latency_trace

        plot_latency_trace(res.rows, Path(args.plot_dir) / "latency_trace.png", rc.controller.L_win_star)
    mean_l = np.mean([r.L for r in res.records]) * 1e3 if res.rows else 0.0
    print(f"mode={rc.mode} events={len(stream)} chunks={len(res.rows)} mean_L={mean_l:.3f} ms")
    return EXIT_OK


def evaluate(logits, stream, geometry, bin_duration=0.05, tau_c=0.5, ignore=None) -> dict:
    if len(logits) != len(stream):
        raise ValueError(f"misaligned inputs: {len(logits)} logit rows vs {len(stream)} events")
    pred = np.argmax(logits, axis=1) if len(logits) else np.zeros(0, dtype=int)
    labels = stream.label.astype(np.int64)
    pm = point_metrics(pred, labels, ignore)
    wm = window_metrics(pred, labels, stream, WindowEvalConfig(geometry, bin_duration, tau_c), ignore)
    loss = focal_loss(logits, labels, ignore) if logits.shape[1] >= 2 else None
    t, o = pm.tally, wm.tally
    return {
        "point": {"Pd": pm.Pd, "Fa": pm.Fa, "IoU_pos": pm.IoU_pos, "Prec": pm.Prec, "ACC": pm.ACC,
                  "tally": {"TP": t.TP, "FP": t.FP, "FN": t.FN, "TN": t.TN, "N_bg": t.N_bg},
                  "degenerate": sorted(pm.degenerate)},
        "window": {"Pd": wm.Pd, "Fa_density": wm.Fa_density, "bin_duration": bin_duration, "tau_c": tau_c,
                   "tally": {"N_obj": o.N_obj, "N_det": o.N_det, "N_fp_comp": o.N_fp_comp, "N_bins": o.N_bins},
                   "degenerate": sorted(wm.degenerate)},
        "focal_loss": None if loss is None else {"value": loss.value, "count": loss.count, "degenerate": loss.degenerate},
        "events": len(stream),
    }


def format_table(summary: dict, params: int | None = None) -> str:
    w, p = summary["window"], summary["point"]
    head = ["Window Pd(%)", "Window Fa(1e-4)", "Point Pd(%)", "Point Fa(1e-4)", "IoU(%)", "ACC(%)", "#Params"]
    vals = [f"{w['Pd'] * 100:.2f}", f"{w['Fa_density'] * 1e4:.2f}", f"{p['Pd'] * 100:.2f}",
            f"{p['Fa'] * 1e4:.2f}", f"{p['IoU_pos'] * 100:.2f}", f"{p['ACC'] * 100:.2f}",
            f"{params / 1e6:.2f}M" if params else "-"]
    widths = [max(len(a), len(b)) for a, b in zip(head, vals)]
    line = lambda cells: " | ".join(c.rjust(n) for c, n in zip(cells, widths))  # noqa: E731
    return "\n".join([line(head), "-+-".join("-" * n for n in widths), line(vals)])


def cmd_eval(args) -> int:
    logits = read_logits_csv(args.logits)
    geo, stream = read_events(args.labels)
    summary = evaluate(logits, stream, geo, args.bin_ms * 1e-3, args.tau_c)
    text = json.dumps(summary, indent=2)
    if args.output:
        Path(args.output).write_text(text + "\n")
    else:
        print(text)
    if args.table:
        print(format_table(summary), file=sys.stderr if not args.output else sys.stdout)
    return EXIT_OK


def cmd_bench(args) -> int:
    rc = _run_config(args)
    geo, stream = _load_stream(args)
    model = _model(rc)
    stats = bench(stream, geo, model, rc.spatial, rc.ssm, rc.controller, args.repetitions, args.fixed_window_ms * 1e-3)
    if args.output:
        write_bench_csv(args.output, stats)
    print(f"{'mode':9}{'rep':>4}{'chunks':>8}{'step':>9}{'L_s ms':>10}{'L_i ms':>10}{'L ms':>10}{'p95 L':>10}{'wait ms':>10}  identity")
    for s in stats:
        print(f"{s.mode:9}{s.repetition:>4}{s.chunks:>8}{s.mean_step:>9.1f}{s.L_s[0] * 1e3:>10.3f}"
              f"{s.L_i[0] * 1e3:>10.3f}{s.L[0] * 1e3:>10.3f}{s.L[2] * 1e3:>10.3f}{s.mean_wait * 1e3:>10.3f}  "
              f"{'ok' if s.identity_ok else 'FAIL'}")
    if args.plot_dir:
        from .plotting import plot_latency_decomposition

        plot_latency_decomposition(stats, Path(args.plot_dir) / "latency_decomposition.png")
    return EXIT_OK if all(s.identity_ok for s in stats) else EXIT_INVALID


def cmd_nano_fit(args) -> int:
    rc = _run_config(args)
    sp, hp = rc.spatial, rc.ssm
    if args.gen_config or args.gen_set:
        cfg = _gen_config(args)
    else:
        cfg = separable_config(rc.seed)
    stream = generate_stream(cfg)
    if len(stream) <= args.warmup:
        raise ValueError("training stream shorter than the warm-up span")
    model = _model(rc)
    problem = FitProblem(stream, cfg.geometry, sp, hp, step=args.chunk, history=args.history, warmup=args.warmup)
    spsa = SpsaConfig(iterations=args.iterations, a=args.gain_a, c=args.gain_c, seed=rc.seed)
    fitted, losses = spsa_fit(model, problem, spsa)
    save_weights(args.output, fitted.astype(np.float32))
    if args.loss_csv:
        with open(args.loss_csv, "w") as fh:
            fh.write("iteration,loss\n")
            for i, v in enumerate(losses):
                fh.write(f"{i},{v!r}\n")
    if args.plot_dir:
        from .plotting import plot_loss_curve

        plot_loss_curve(losses, Path(args.plot_dir) / "loss_curve.png")
    print(f"events={len(stream)} params={count_parameters(fitted)} loss {losses[0]:.5f} -> {losses[-1]:.5f} "
          f"({losses[-1] / losses[0]:.3f}x) -> {args.output}")
    return EXIT_OK


def cmd_params(args) -> int:
    rc = _run_config(args)
    print(count_parameters(rc.spatial, rc.ssm))
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_run_options(p):
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
    p.add_argument("--weights", help="CETW weights file (default: seeded initialisation)")
    p.add_argument("--seed", type=int)


def _add_stream_options(p):
    p.add_argument("--gen-config", help="generator key = value file used when no input file is given")
    p.add_argument("--gen-set", action="append", metavar="KEY=VALUE", help="override one generator key")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cetus", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic labelled event stream")
    _add_stream_options(p)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", required=True, help=".csv or binary (.evs) event file")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser(
        "run",
        help="stream a file through the model",
        description="Fixed mode converts --window-ms to a per-chunk event count using the stream's "
        "mean rate, since chunking is event-indexed; --step sets the count directly.",
    )
    p.add_argument("input", nargs="?", help="event file; omitted -> synthetic stream")
    _add_stream_options(p)
    _add_run_options(p)
    p.add_argument("--mode", choices=("adaptive", "fixed"))
    p.add_argument("--step", type=int, help="fixed mode: events per chunk")
    p.add_argument("--window-ms", type=float, help="fixed mode: window length (default 50 ms)")
    p.add_argument("--clock", choices=("wall", "simulated"))
    p.add_argument("--logits", required=True, help="per-event logits CSV")
    p.add_argument("--latency", help="per-chunk latency CSV")
    p.add_argument("--plot-dir", help="write latency_trace.png here")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="point- and window-level metrics for a logits CSV")
    p.add_argument("logits")
    p.add_argument("labels", help="event file carrying ground-truth labels")
    p.add_argument("--bin-ms", type=float, default=50.0)
    p.add_argument("--tau-c", type=float, default=0.5)
    p.add_argument("-o", "--output", help="JSON output (default stdout)")
    p.add_argument("--table", action="store_true", help="also print a summary table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="adaptive vs fixed-window latency on the wall clock")
    p.add_argument("input", nargs="?")
    _add_stream_options(p)
    _add_run_options(p)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--fixed-window-ms", type=float, default=50.0)
    p.add_argument("-o", "--output", help="summary CSV")
    p.add_argument("--plot-dir", help="write latency_decomposition.png here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("nano-fit", help="SPSA fit of a nano-scale model on a synthetic stream")
    _add_stream_options(p)
    _add_run_options(p)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--gain-a", type=float, default=SpsaConfig.a)
    p.add_argument("--gain-c", type=float, default=SpsaConfig.c)
    p.add_argument("--chunk", type=int, default=32)
    p.add_argument("--history", type=int, default=64)
    p.add_argument("--warmup", type=int, default=32, help="leading events used as context only")
    p.add_argument("-o", "--output", required=True, help="fitted CETW weights")
    p.add_argument("--loss-csv")
    p.add_argument("--plot-dir", help="write loss_curve.png here")
    p.set_defaults(func=cmd_nano_fit, nano=True)

    p = sub.add_parser("params", help="print the learnable parameter count")
    _add_run_options(p)
    p.set_defaults(func=cmd_params)
    return ap


# nano-fit architecture unless the config file or --set says otherwise
NANO_DEFAULTS = {
    "k": NANO_SPATIAL.k, "dim": NANO_SPATIAL.dim, "heads": NANO_SPATIAL.heads,
    "blocks": NANO_SSM.blocks, "state": NANO_SSM.state, "dt_rank": NANO_SSM.dt_rank,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
