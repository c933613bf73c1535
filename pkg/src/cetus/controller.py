"""Adaptive step-size control.

Per processed chunk the controller

1. refits an affine inference-cost model ``T(s) = a + b*s`` by recursive least
   squares with forgetting,
2. computes a conservative base step from the window budget and the largest
   step whose predicted cost fits the inference budget,
3. runs a PID loop on the window-latency error ``L_win* - s/R`` (scaled by the
   current rate into event counts),
4. blends base and PID steps, and
5. shrinks the KNN history as the step grows.
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field

import numpy as np

RATE_FLOOR = 1.0
WARMUP_SAMPLES = 5
PRIOR_A = 1e-3
PRIOR_B = 1e-6


@dataclass(frozen=True)
class ControllerConfig:
    L_win_star: float = 1e-3
    L_inf_star: float = 5e-3
    K_P: float = 0.5
    K_I: float = 0.05
    K_D: float = 0.1
    lam: float = 0.5
    s_min: int = 16
    s_max: int = 8192
    H_base: int = 256
    integral_clamp: float = 1e-3
    rate_window: float = 0.01
    rls_forget: float = 0.99

    def __post_init__(self):
        if not 1 <= self.s_min <= self.s_max:
            raise ValueError("need 1 <= s_min <= s_max")
        if self.L_win_star <= 0 or self.L_inf_star <= 0:
            raise ValueError("latency budgets must be > 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not 0.9 < self.rls_forget <= 1.0:
            raise ValueError("rls_forget must lie in (0.9, 1]")
        if self.integral_clamp < 0 or self.rate_window <= 0 or self.H_base < 1:
            raise ValueError("integral_clamp >= 0, rate_window > 0, H_base >= 1 required")


class LatencyModel:
    """Online affine fit of inference time against step size.

    Until ``WARMUP_SAMPLES`` measurements have arrived, ``a`` and ``b`` report
    the priors while the RLS estimate keeps updating underneath.  ``b`` is
    projected to be non-negative.
    """

    def __init__(self, forget: float = 0.99, a0: float = PRIOR_A, b0: float = PRIOR_B, p0: float = 1e6):
        self.forget = forget
        self.theta = np.array([a0, b0])
        self.P = np.eye(2) * p0
        self.samples = 0
        self._prior = (a0, b0)

    @property
    def a(self) -> float:
        return self._prior[0] if self.samples < WARMUP_SAMPLES else float(self.theta[0])

    @property
    def b(self) -> float:
        return self._prior[1] if self.samples < WARMUP_SAMPLES else max(float(self.theta[1]), 0.0)

    def predict(self, s: float) -> float:
        return self.a + self.b * s

    def update(self, s: float, t_measured: float) -> "LatencyModel":
        if t_measured < 0:
            raise ValueError("measured time must be >= 0")
        x = np.array([1.0, float(s)])
        Px = self.P @ x
        gain = Px / (self.forget + x @ Px)
        self.theta = self.theta + gain * (t_measured - x @ self.theta)
        self.P = (self.P - np.outer(gain, Px)) / self.forget
        self.P = 0.5 * (self.P + self.P.T)
        self.samples += 1
        return self


@dataclass
class ControllerState:
    s_t: int
    H_t: int
    integral: float = 0.0
    prev_error: float = 0.0
    last_T_inf: float = 0.0
    tick: int = 0

    @classmethod
    def initial(cls, config: ControllerConfig) -> "ControllerState":
        return cls(s_t=config.s_min, H_t=config.H_base)


@dataclass(frozen=True)
class LatencyRecord:
    L_e: float
    L_s: float
    L_i: float
    L: float = field(init=False)

    def __post_init__(self):
        if self.L_e < 0 or self.L_s < 0 or self.L_i < 0:
            raise ValueError("latency components must be >= 0")
        object.__setattr__(self, "L", self.L_e + self.L_s + self.L_i)

    @property
    def consistent(self) -> bool:
        return self.L == self.L_e + self.L_s + self.L_i


def _round(x: float) -> int:
    return int(math.floor(x + 0.5))


def _clip(x, lo, hi):
    return min(max(x, lo), hi)


def estimate_rate(timestamps_s, now_s: float, rate_window: float) -> float:
    """Events in ``(now - rate_window, now]`` per second, floored at 1 ev/s."""
    if rate_window <= 0:
        raise ValueError("rate_window must be > 0")
    ts = np.asarray(timestamps_s, dtype=np.float64)
    n = int(np.count_nonzero((ts > now_s - rate_window) & (ts <= now_s)))
    return max(n / rate_window, RATE_FLOOR)


def predict_window_latency(s: float, R: float) -> float:
    return s / R


def update_latency_model(model: LatencyModel, s: float, t_measured: float) -> LatencyModel:
    return model.update(s, t_measured)


def base_step(R_t: float, model: LatencyModel, config: ControllerConfig) -> int:
    a, b = model.a, model.b
    if a >= config.L_inf_star:
        return config.s_min
    s_cap = math.floor((config.L_inf_star - a) / b) if b > 0 else config.s_max
    s0 = math.floor(min(R_t * config.L_win_star, s_cap))
    return int(_clip(s0, config.s_min, config.s_max))


def pid_step(state: ControllerState, R_t: float, config: ControllerConfig) -> int:
    """One PID update of the step size; mutates the integral and previous error."""
    e = config.L_win_star - state.s_t / R_t
    state.integral = _clip(state.integral + e, -config.integral_clamp, config.integral_clamp)
    u = config.K_P * e + config.K_I * state.integral + config.K_D * (e - state.prev_error)
    state.prev_error = e
    return int(_clip(_round(state.s_t + u * R_t), config.s_min, config.s_max))


def blend_step(s0: float, s_pid: float, lam: float, config: ControllerConfig | None = None) -> int:
    s = _round(lam * s0 + (1.0 - lam) * s_pid)
    if config is not None:
        s = int(_clip(s, config.s_min, config.s_max))
    return s


def adapt_history(s_next: int, config: ControllerConfig, k: int = 1) -> int:
    return max(_round(config.H_base * config.s_min / max(s_next, 1)), k)


def control_tick(
    state: ControllerState,
    R_t: float,
    T_measured: float,
    model: LatencyModel,
    config: ControllerConfig,
    k: int = 1,
    window_latency: float | None = None,
    events: int | None = None,
) -> tuple[int, int, LatencyRecord]:
    """Close one chunk of ``state.s_t`` events and choose the next step and history size.

    ``window_latency`` is the measured sampling latency of the chunk; when
    omitted the model prediction ``s_t / R_t`` is recorded.  ``events`` is the
    actual chunk length when the stream ran short of ``s_t``.
    """
    s_done = state.s_t if events is None else events
    update_latency_model(model, s_done, T_measured)
    s0 = base_step(R_t, model, config)
    s_pid = pid_step(state, R_t, config)
    s_next = blend_step(s0, s_pid, config.lam, config)
    h_next = adapt_history(s_next, config, k)
    L_s = predict_window_latency(s_done, R_t) if window_latency is None else window_latency
    record = LatencyRecord(0.0, L_s, T_measured)
    state.s_t, state.H_t, state.last_T_inf = s_next, h_next, T_measured
    state.tick += 1
    return s_next, h_next, record


class SimulatedClock:
    """Inference-time oracle ``T(s) = a + b*s + N(0, sigma)`` (clipped at 0)."""

    kind = "simulated"

    def __init__(self, a_true: float, b_true: float, noise_sigma: float = 0.0, seed: int = 0):
        self.a_true, self.b_true, self.noise_sigma = a_true, b_true, noise_sigma
        self._rng = random.Random(seed)

    def measure(self, s: int, fn=None, *args):
        """Run ``fn(*args)`` if given and return ``(result, simulated seconds)``."""
        result = fn(*args) if fn is not None else None
        t = self.a_true + self.b_true * s
        if self.noise_sigma:
            t += self._rng.gauss(0.0, self.noise_sigma)
        return result, max(t, 0.0)

    def __call__(self, s: int) -> float:
        return self.measure(s)[1]


class WallClock:
    """Measures real elapsed time around the inference call."""

    kind = "wall"

    def __init__(self):
        self.total = 0.0

    def measure(self, s: int, fn=None, *args):
        t0 = time.perf_counter()
        result = fn(*args) if fn is not None else None
        dt = time.perf_counter() - t0
        self.total += dt
        return result, dt

    def __call__(self, s: int) -> float:
        return self.measure(s)[1]


def make_clock(kind: str = "wall", a_true: float = 0.0, b_true: float = 0.0, noise_sigma: float = 0.0, seed: int = 0):
    if kind == "simulated":
        return SimulatedClock(a_true, b_true, noise_sigma, seed)
    if kind == "wall":
        return WallClock()
    raise ValueError(f"unknown clock kind {kind!r}")
