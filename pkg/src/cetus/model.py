"""Parameter bundle, deterministic initialisation and the "CETW" weights container.

CETW layout (little-endian)::

    b"CETW" | u16 version=1 | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 dtype (0 = float32) | u8 ndims | u32 dims... | payload

Entry names are ``spatial.<field>``, ``block<i>.<field>`` and ``head.<field>``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .spatial import RAW_DIM, SpatialEncoderParams, SpatialHyperparams, spatial_param_count
from .temporal import (
    HeadParams,
    SsmBlockParams,
    SsmHyperparams,
    block_param_count,
    head_param_count,
)

WEIGHTS_MAGIC = b"CETW"
WEIGHTS_VERSION = 1
DTYPE_F32 = 0


class WeightsError(ValueError):
    """Corrupt or mismatched weights container; ``entry`` names the offending tensor when known."""

    def __init__(self, message: str, entry: str | None = None):
        super().__init__(f"{entry}: {message}" if entry else message)
        self.entry = entry


@dataclass
class ModelParams:
    spatial: SpatialEncoderParams
    blocks: list[SsmBlockParams]
    head: HeadParams

    def named_arrays(self):
        """``(name, array)`` pairs in canonical container order."""
        for f in fields(SpatialEncoderParams):
            yield f"spatial.{f.name}", getattr(self.spatial, f.name)
        for i, blk in enumerate(self.blocks):
            for f in fields(SsmBlockParams):
                yield f"block{i}.{f.name}", getattr(blk, f.name)
        for f in fields(HeadParams):
            yield f"head.{f.name}", getattr(self.head, f.name)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.named_arrays()]).astype(np.float64)

    def unflatten(self, vec: np.ndarray) -> "ModelParams":
        """A new bundle with the same shapes, filled from ``vec`` (float64)."""
        vec = np.asarray(vec, dtype=np.float64)
        arrays, pos = {}, 0
        for name, a in self.named_arrays():
            arrays[name] = vec[pos : pos + a.size].reshape(a.shape).copy()
            pos += a.size
        if pos != vec.size:
            raise ValueError(f"vector has {vec.size} entries, model has {pos}")
        return _from_named(arrays, len(self.blocks))

    def astype(self, dtype) -> "ModelParams":
        return _from_named({n: a.astype(dtype) for n, a in self.named_arrays()}, len(self.blocks))


def _from_named(arrays: dict, n_blocks: int) -> ModelParams:
    return ModelParams(
        spatial=SpatialEncoderParams(**{f.name: arrays[f"spatial.{f.name}"] for f in fields(SpatialEncoderParams)}),
        blocks=[
            SsmBlockParams(**{f.name: arrays[f"block{i}.{f.name}"] for f in fields(SsmBlockParams)})
            for i in range(n_blocks)
        ],
        head=HeadParams(**{f.name: arrays[f"head.{f.name}"] for f in fields(HeadParams)}),
    )


def check_compatible(sp: SpatialHyperparams, hp: SsmHyperparams) -> None:
    if sp.dim != hp.dim:
        raise ValueError(f"spatial dim {sp.dim} != temporal dim {hp.dim}")


def expected_shapes(sp: SpatialHyperparams, hp: SsmHyperparams) -> dict[str, tuple[int, ...]]:
    check_compatible(sp, hp)
    D, Di, N, R, K, C = hp.dim, hp.d_inner, hp.state, hp.dt_rank, hp.conv_kernel, hp.classes
    shapes = {
        "spatial.W_c": (RAW_DIM, D),
        "spatial.b_c": (D,),
        "spatial.W_1": (4, D),
        "spatial.b_1": (D,),
        "spatial.W_2": (D, D),
        "spatial.b_2": (D,),
        "spatial.ln_gamma": (D,),
        "spatial.ln_beta": (D,),
    }
    for i in range(hp.blocks):
        shapes.update({
            f"block{i}.ln_gamma": (D,),
            f"block{i}.ln_beta": (D,),
            f"block{i}.W_in": (D, 2 * Di),
            f"block{i}.conv_w": (Di, K),
            f"block{i}.conv_b": (Di,),
            f"block{i}.W_x": (Di, R + 2 * N),
            f"block{i}.W_dt": (R, Di),
            f"block{i}.b_dt": (Di,),
            f"block{i}.A_log": (Di, N),
            f"block{i}.D_skip": (Di,),
            f"block{i}.W_out": (Di, D),
        })
    shapes.update({
        "head.ln_gamma": (D,),
        "head.ln_beta": (D,),
        "head.W_1": (D, D // 2),
        "head.b_1": (D // 2,),
        "head.W_2": (D // 2, C),
        "head.b_2": (C,),
    })
    return shapes


def count_parameters(model_or_hp, hp: SsmHyperparams | None = None) -> int:
    """Number of learnable scalars.

    Accepts either a ``ModelParams`` or a ``(SpatialHyperparams, SsmHyperparams)`` pair.
    """
    if isinstance(model_or_hp, ModelParams):
        return sum(a.size for _, a in model_or_hp.named_arrays())
    check_compatible(model_or_hp, hp)
    return spatial_param_count(hp.dim) + hp.blocks * block_param_count(hp) + head_param_count(hp)


def _glorot(rng, fan_in, fan_out, shape):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_weights(sp: SpatialHyperparams, hp: SsmHyperparams, seed: int = 0) -> ModelParams:
    """Seeded initialisation; every value is float32-representable so CETW round trips are exact."""
    check_compatible(sp, hp)
    rng = np.random.default_rng(seed)
    D, Di, N, R, K, C = hp.dim, hp.d_inner, hp.state, hp.dt_rank, hp.conv_kernel, hp.classes
    f32 = np.float32

    spatial = SpatialEncoderParams(
        W_c=_glorot(rng, RAW_DIM, D, (RAW_DIM, D)).astype(f32),
        b_c=np.zeros(D, f32),
        W_1=_glorot(rng, 4, D, (4, D)).astype(f32),
        b_1=np.zeros(D, f32),
        W_2=_glorot(rng, D, D, (D, D)).astype(f32),
        b_2=np.zeros(D, f32),
        ln_gamma=np.ones(D, f32),
        ln_beta=np.zeros(D, f32),
    )
    # A = -exp(A_log) spans [-1, -1e-2] log-uniformly across the state channels
    a_mag = np.logspace(-2, 0, N) if N > 1 else np.array([0.1])
    blocks = []
    for _ in range(hp.blocks):
        dt0 = np.exp(rng.uniform(np.log(1e-2), np.log(1e-1), size=Di))
        blocks.append(SsmBlockParams(
            ln_gamma=np.ones(D, f32),
            ln_beta=np.zeros(D, f32),
            W_in=_glorot(rng, D, 2 * Di, (D, 2 * Di)).astype(f32),
            conv_w=_glorot(rng, K, K, (Di, K)).astype(f32),
            conv_b=np.zeros(Di, f32),
            W_x=_glorot(rng, Di, R + 2 * N, (Di, R + 2 * N)).astype(f32),
            W_dt=_glorot(rng, R, Di, (R, Di)).astype(f32),
            b_dt=np.log(np.expm1(dt0)).astype(f32),  # softplus(b_dt) == dt0
            A_log=np.tile(np.log(a_mag), (Di, 1)).astype(f32),
            D_skip=np.ones(Di, f32),
            W_out=_glorot(rng, Di, D, (Di, D)).astype(f32),
        ))
    head = HeadParams(
        ln_gamma=np.ones(D, f32),
        ln_beta=np.zeros(D, f32),
        W_1=_glorot(rng, D, D // 2, (D, D // 2)).astype(f32),
        b_1=np.zeros(D // 2, f32),
        W_2=_glorot(rng, D // 2, C, (D // 2, C)).astype(f32),
        b_2=np.zeros(C, f32),
    )
    return ModelParams(spatial, blocks, head)


def encode_weights(model: ModelParams) -> bytes:
    entries = list(model.named_arrays())
    names = [n for n, _ in entries]
    if len(set(names)) != len(names):
        raise WeightsError("duplicate entry names")
    parts = [WEIGHTS_MAGIC, struct.pack("<HI", WEIGHTS_VERSION, len(entries))]
    for name, arr in entries:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_weights(data: bytes) -> dict[str, np.ndarray]:
    """Parse a CETW byte string into ``{name: float32 array}`` without shape checks."""
    if data[:4] != WEIGHTS_MAGIC:
        raise WeightsError(f"bad magic {data[:4]!r}")
    try:
        version, count = struct.unpack_from("<HI", data, 4)
    except struct.error:
        raise WeightsError("truncated header") from None
    if version != WEIGHTS_VERSION:
        raise WeightsError(f"unsupported version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        name = f"#{i}"
        try:
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            raw = data[pos : pos + nlen]
            if len(raw) != nlen:
                raise struct.error
            name = raw.decode("utf-8")
            pos += nlen
            dtype, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
        except (struct.error, UnicodeDecodeError):
            raise WeightsError("truncated or corrupt entry header", name) from None
        if dtype != DTYPE_F32:
            raise WeightsError(f"unsupported dtype code {dtype}", name)
        if name in out:
            raise WeightsError("duplicate entry", name)
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(data):
            raise WeightsError("truncated payload", name)
        out[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
    if pos != len(data):
        raise WeightsError("trailing bytes after last entry")
    return out


def save_weights(path, model: ModelParams) -> None:
    Path(path).write_bytes(encode_weights(model))


def load_weights(path, sp: SpatialHyperparams, hp: SsmHyperparams) -> ModelParams:
    arrays = decode_weights(Path(path).read_bytes())
    shapes = expected_shapes(sp, hp)
    for name, shape in shapes.items():
        if name not in arrays:
            raise WeightsError("missing entry", name)
        if arrays[name].shape != shape:
            raise WeightsError(f"shape {arrays[name].shape} does not match expected {shape}", name)
        if not np.all(np.isfinite(arrays[name])):
            raise WeightsError("non-finite values", name)
    extra = set(arrays) - set(shapes)
    if extra:
        raise WeightsError("unexpected entry", sorted(extra)[0])
    return _from_named(arrays, hp.blocks)
