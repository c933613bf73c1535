"""Point-level and window-level detection metrics, and the focal loss.

Ignored rows (history padding) are dropped before anything is counted.  Ratios
with a zero denominator are reported as 0 and named in ``degenerate``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .events import EventStream, SensorGeometry


@dataclass(frozen=True)
class PointTally:
    TP: int = 0
    FP: int = 0
    FN: int = 0
    TN: int = 0

    @property
    def N_bg(self) -> int:
        return self.FP + self.TN

    def __add__(self, other: "PointTally") -> "PointTally":
        return PointTally(self.TP + other.TP, self.FP + other.FP, self.FN + other.FN, self.TN + other.TN)


@dataclass(frozen=True)
class PointMetrics:
    Pd: float
    Fa: float
    IoU_pos: float
    Prec: float
    ACC: float
    tally: PointTally
    degenerate: frozenset = frozenset()


def _ratio(num, den, name, flags):
    if den == 0:
        flags.add(name)
        return 0.0
    return num / den


def _select(pred, labels, ignore):
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise ValueError(f"length mismatch: {pred.shape} predictions vs {labels.shape} labels")
    if ignore is None:
        return pred, labels
    ignore = np.asarray(ignore, dtype=bool)
    if ignore.shape != labels.shape:
        raise ValueError("ignore mask length mismatch")
    return pred[~ignore], labels[~ignore]


def point_tally(pred, labels, ignore=None) -> PointTally:
    pred, labels = _select(pred, labels, ignore)
    p = pred != 0
    g = labels != 0
    return PointTally(
        int(np.count_nonzero(p & g)),
        int(np.count_nonzero(p & ~g)),
        int(np.count_nonzero(~p & g)),
        int(np.count_nonzero(~p & ~g)),
    )


def metrics_from_tally(t: PointTally) -> PointMetrics:
    flags: set[str] = set()
    return PointMetrics(
        Pd=_ratio(t.TP, t.TP + t.FN, "Pd", flags),
        Fa=_ratio(t.FP, t.N_bg, "Fa", flags),
        IoU_pos=_ratio(t.TP, t.TP + t.FP + t.FN, "IoU_pos", flags),
        Prec=_ratio(t.TP, t.TP + t.FP, "Prec", flags),
        ACC=_ratio(t.TP + t.TN, t.TP + t.TN + t.FP + t.FN, "ACC", flags),
        tally=t,
        degenerate=frozenset(flags),
    )


def point_metrics(pred, labels, ignore=None) -> PointMetrics:
    return metrics_from_tally(point_tally(pred, labels, ignore))


# ---------------------------------------------------------------------------
# Window level


@dataclass(frozen=True)
class WindowEvalConfig:
    geometry: SensorGeometry
    bin_duration: float = 0.05
    tau_c: float = 0.5
    connectivity: int = 8

    def __post_init__(self):
        if not self.bin_duration > 0:
            raise ValueError("bin_duration must be > 0")
        if not 0 < self.tau_c <= 1:
            raise ValueError("tau_c must lie in (0, 1]")
        if self.connectivity != 8:
            raise ValueError("only 8-connectivity is supported")


@dataclass(frozen=True)
class ObjectTally:
    N_obj: int = 0
    N_det: int = 0
    N_fp_comp: int = 0
    N_bins: int = 0

    def __add__(self, other: "ObjectTally") -> "ObjectTally":
        return ObjectTally(*(a + b for a, b in zip(
            (self.N_obj, self.N_det, self.N_fp_comp, self.N_bins),
            (other.N_obj, other.N_det, other.N_fp_comp, other.N_bins),
        )))


@dataclass(frozen=True)
class WindowMetrics:
    Pd: float
    Fa_density: float
    tally: ObjectTally
    degenerate: frozenset = frozenset()


def rasterize(x, y, selected, geometry: SensorGeometry) -> np.ndarray:
    """Binary ``(H, W)`` grid with a 1 wherever a selected event landed."""
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    sel = np.asarray(selected, dtype=bool)
    grid = np.zeros((geometry.height, geometry.width), dtype=bool)
    xs, ys = x[sel], y[sel]
    assert np.all((xs >= 0) & (xs < geometry.width) & (ys >= 0) & (ys < geometry.height)), "event outside sensor"
    grid[ys, xs] = True
    return grid


def connected_components_8(grid) -> list[np.ndarray]:
    """Maximal 8-connected components of the true pixels.

    Each component is a sorted array of linear (row-major) pixel indices;
    components are ordered by their smallest index.  Two-pass union-find.
    """
    grid = np.asarray(grid, dtype=bool)
    H, W = grid.shape
    flat = grid.ravel()
    parent = np.arange(H * W)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            if ra < rb:
                parent[rb] = ra
            else:
                parent[ra] = rb

    for idx in np.flatnonzero(flat):
        r, c = divmod(int(idx), W)
        # already-visited neighbours: W, NW, N, NE
        for dr, dc in ((0, -1), (-1, -1), (-1, 0), (-1, 1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < H and 0 <= cc < W and flat[rr * W + cc]:
                union(idx, rr * W + cc)

    groups: dict[int, list[int]] = {}
    for idx in np.flatnonzero(flat):
        groups.setdefault(find(int(idx)), []).append(int(idx))
    comps = [np.array(v, dtype=np.int64) for v in groups.values()]
    comps.sort(key=lambda a: a[0])
    return comps


def bin_tally(pred_grid, gt_grid, tau_c: float) -> ObjectTally:
    """Object counts for one time bin."""
    pred_grid = np.asarray(pred_grid, dtype=bool)
    gt_grid = np.asarray(gt_grid, dtype=bool)
    gt_objs = connected_components_8(gt_grid)
    pf = pred_grid.ravel()
    n_det = sum(1 for o in gt_objs if np.count_nonzero(pf[o]) / len(o) >= tau_c)
    gf = gt_grid.ravel()
    n_fp = sum(1 for c in connected_components_8(pred_grid) if not np.any(gf[c]))
    return ObjectTally(len(gt_objs), n_det, n_fp, 1)


def window_metrics(pred, labels, stream: EventStream, cfg: WindowEvalConfig, ignore=None) -> WindowMetrics:
    """Detection probability and false-alarm density over consecutive time bins.

    Bins start at the first event's timestamp; empty bins inside the span count
    toward ``N_bins``.  A predicted component is a false alarm only if it shares
    no pixel with any ground-truth object.
    """
    pred = np.asarray(pred) != 0
    labels = np.asarray(labels) != 0
    if not (len(pred) == len(labels) == len(stream)):
        raise ValueError("predictions, labels and stream must have equal length")
    keep = np.ones(len(stream), dtype=bool) if ignore is None else ~np.asarray(ignore, dtype=bool)
    flags: set[str] = set()
    if not np.any(keep):
        flags.update(("Pd", "Fa_density", "N_bins"))
        return WindowMetrics(0.0, 0.0, ObjectTally(), frozenset(flags))

    t = stream.t.astype(np.int64)[keep]
    x, y = stream.x[keep], stream.y[keep]
    pred, labels = pred[keep], labels[keep]
    bin_us = cfg.bin_duration * 1e6
    b = np.floor((t - t[0]) / bin_us).astype(np.int64)
    n_bins = int(b[-1]) + 1
    total = ObjectTally()
    starts = np.searchsorted(b, np.arange(n_bins + 1))
    geo = cfg.geometry
    for i in range(n_bins):
        s, e = starts[i], starts[i + 1]
        if s == e:
            total = total + ObjectTally(0, 0, 0, 1)
            continue
        pg = rasterize(x[s:e], y[s:e], pred[s:e], geo)
        gg = rasterize(x[s:e], y[s:e], labels[s:e], geo)
        total = total + bin_tally(pg, gg, cfg.tau_c)
    return WindowMetrics(
        Pd=_ratio(total.N_det, total.N_obj, "Pd", flags),
        Fa_density=_ratio(total.N_fp_comp, total.N_bins * geo.width * geo.height, "Fa_density", flags),
        tally=total,
        degenerate=frozenset(flags),
    )


# ---------------------------------------------------------------------------
# Loss


@dataclass(frozen=True)
class LossResult:
    value: float
    count: int
    degenerate: bool = field(default=False)


def focal_loss(logits, labels, ignore=None, alpha: float = 0.5, gamma: float = 2.0) -> LossResult:
    """Mean of ``-alpha * (1 - p_t)**gamma * log(p_t)`` over non-ignored events."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError("logits must be (n, C) aligned with labels")
    if ignore is not None:
        keep = ~np.asarray(ignore, dtype=bool)
        logits, labels = logits[keep], labels[keep]
    n = len(labels)
    if n == 0:
        return LossResult(0.0, 0, True)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp_t = logp[np.arange(n), labels]
    p_t = np.exp(logp_t)
    loss = -alpha * (1.0 - p_t) ** gamma * logp_t
    return LossResult(float(loss.mean()), n)
