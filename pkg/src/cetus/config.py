"""Run configuration from ``key = value`` files with command-line overrides.

Keys are the field names of ``SpatialHyperparams``, ``SsmHyperparams`` and
``ControllerConfig`` (``dim`` is shared by the encoder and the temporal stack),
plus the run-level keys in ``RunConfig``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .controller import ControllerConfig
from .events import parse_kv
from .spatial import SpatialHyperparams
from .temporal import SsmHyperparams


@dataclass
class RunConfig:
    spatial: SpatialHyperparams = field(default_factory=SpatialHyperparams)
    ssm: SsmHyperparams = field(default_factory=SsmHyperparams)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    mode: str = "adaptive"
    step: int | None = None
    window: float | None = None  # seconds, fixed mode only
    weights: str | None = None
    seed: int = 0
    clock: str = "wall"
    sim_a: float = 5e-4
    sim_b: float = 5e-6
    sim_noise: float = 0.0

    def __post_init__(self):
        if self.mode not in ("adaptive", "fixed"):
            raise ValueError(f"mode must be 'adaptive' or 'fixed', got {self.mode!r}")
        if self.step is not None and self.step < 1:
            raise ValueError("fixed step must be >= 1")
        if self.window is not None and not self.window > 0:
            raise ValueError("window must be > 0")
        if self.spatial.dim != self.ssm.dim:
            raise ValueError("spatial and temporal dim must match")


_RUN_TYPES = {
    "mode": str, "step": int, "window": float, "weights": str, "seed": int,
    "clock": str, "sim_a": float, "sim_b": float, "sim_noise": float,
}


def _convert(value: str, default):
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def _apply(obj, values: dict, used: set):
    changes = {}
    for f in dataclasses.fields(obj):
        key = f.name
        if key in values:
            changes[key] = _convert(values[key], getattr(obj, key))
            used.add(key)
    return dataclasses.replace(obj, **changes) if changes else obj


def run_config_from_mapping(values: dict) -> RunConfig:
    values = dict(values)
    if "lambda" in values:  # blend weight alias
        values.setdefault("lam", values.pop("lambda"))
    used: set[str] = set()
    spatial = _apply(SpatialHyperparams(), values, used)
    ssm = _apply(SsmHyperparams(), values, used)
    ctrl = _apply(ControllerConfig(), values, used)
    run = {}
    for key, typ in _RUN_TYPES.items():
        if key in values:
            run[key] = typ(values[key])
            used.add(key)
    unknown = set(values) - used
    if unknown:
        raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
    return RunConfig(spatial=spatial, ssm=ssm, controller=ctrl, **run)


def load_run_config(path=None, overrides: dict | None = None, base: dict | None = None) -> RunConfig:
    """File values override ``base``; ``overrides`` (command line) override both."""
    values = {k: str(v) for k, v in (base or {}).items()}
    if path:
        values.update(parse_kv(Path(path).read_text()))
    values.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    return run_config_from_mapping(values)


def parse_overrides(pairs) -> dict[str, str]:
    """``["k=v", ...]`` from repeated ``--set`` flags."""
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise ValueError(f"--set expects KEY=VALUE, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out
