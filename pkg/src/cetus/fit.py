"""Gradient-free nano-scale fitting with SPSA.

The training stream is processed exactly as at inference (fixed chunks,
bounded KNN history), but because neighbour selection is weight independent it
is gathered once and reused for every loss evaluation.  The first ``warmup``
events serve as history context: their logits are replaced by ignored padding
rows and contribute nothing to the focal loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .events import EventStream, GeneratorConfig, SensorGeometry, Trajectory, iter_chunks
from .metrics import focal_loss
from .model import ModelParams
from .spatial import HistoryBuffer, NeighborBatch, SpatialHyperparams, encode_batch, gather
from .temporal import SsmHyperparams, classifier_head, pad_history_logits, stack_forward

NANO_SPATIAL = SpatialHyperparams(k=4, dim=16, heads=2)
NANO_SSM = SsmHyperparams(blocks=1, dim=16, state=4, dt_rank=2)


class NonFiniteLoss(RuntimeError):
    pass


@dataclass(frozen=True)
class SpsaConfig:
    iterations: int = 500
    a: float = 0.5
    c: float = 0.05
    A: float = 50.0
    alpha: float = 0.602
    gamma: float = 0.101
    seed: int = 0

    def gains(self, k: int) -> tuple[float, float]:
        return self.a / (k + 1 + self.A) ** self.alpha, self.c / (k + 1) ** self.gamma


def separable_config(seed: int = 0, duration: float = 0.1) -> GeneratorConfig:
    """32x32 sensor: sparse uniform background plus a tight, slowly moving target cluster.

    The target's local event rate is far above ten times the background's.
    """
    return GeneratorConfig(
        geometry=SensorGeometry(32, 32),
        duration=duration,
        background_rate=1500.0,
        target_rate=800.0,
        trajectory=Trajectory(start=(6.0, 6.0), velocity=(30.0, 30.0)),
        target_sigma=1.0,
        seed=seed,
    )


class FitProblem:
    """Focal loss of a model on one fixed training stream."""

    def __init__(
        self,
        stream: EventStream,
        geometry: SensorGeometry,
        sp: SpatialHyperparams,
        hp: SsmHyperparams,
        step: int = 32,
        history: int = 64,
        warmup: int = 32,
    ):
        if not 0 <= warmup <= len(stream):
            raise ValueError("warmup must lie within the stream")
        self.stream, self.sp, self.hp = stream, sp, hp
        self.labels = stream.label.astype(np.int64)
        self.warmup = warmup
        buf = HistoryBuffer(history)
        t0 = int(stream.t[0]) if len(stream) else 0
        parts, pos = [], 0
        for chunk in iter_chunks(stream, step):
            parts.append(gather(chunk, buf, sp, geometry, pos, t0))
            pos += len(chunk)
        self.batch = NeighborBatch.concat(parts) if parts else None

    def logits(self, model: ModelParams):
        """Padded logits and the ignore mask for the whole stream."""
        y = encode_batch(self.batch, model.spatial, self.sp)
        feats = stack_forward(model.blocks, y, self.hp)
        curr = classifier_head(model.head, feats[self.warmup :])
        return pad_history_logits(curr, self.warmup, len(y))

    def loss(self, model: ModelParams) -> float:
        padded, ignore = self.logits(model)
        return focal_loss(padded, self.labels, ignore).value


def spsa_fit(model: ModelParams, problem: FitProblem, cfg: SpsaConfig, callback=None):
    """Minimise ``problem.loss`` by SPSA; returns ``(fitted model, losses)``.

    ``losses[i]`` is the loss before iteration ``i``; the final entry is the
    loss of the returned model, so there are ``iterations + 1`` values.
    """
    rng = np.random.default_rng(cfg.seed)
    theta = model.flatten()

    def f(vec):
        val = problem.loss(model.unflatten(vec))
        if not math.isfinite(val):
            raise NonFiniteLoss(f"non-finite loss {val!r}")
        return val

    losses = [f(theta)]
    for k in range(cfg.iterations):
        a_k, c_k = cfg.gains(k)
        delta = rng.choice((-1.0, 1.0), size=theta.size)
        diff = f(theta + c_k * delta) - f(theta - c_k * delta)
        if a_k:
            theta = theta - a_k * diff / (2.0 * c_k) * delta
        losses.append(f(theta))
        if callback is not None:
            callback(k, losses[-1])
    fitted = model.unflatten(theta) if cfg.iterations else model
    return fitted, losses
