"""Precision-emulating dense matrices, tiling, mixed-precision GEMM and counters.

16-bit values live inside float32 storage constrained to the binary16 grid
(quantize-on-write), so one array type serves both precisions.  All GEMMs
accumulate in float32 in a fixed k-order, which makes every output element
independent of the shape of the surrounding tile: appending checksum columns
to an operand never perturbs the main product by a single bit.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

F32 = np.float32

# Rounding used for every float32 -> binary16 conversion.
ROUNDING_MODE = "round-to-nearest-even"
HALF_MAX = 65504.0


class ConfigError(ValueError):
    """Invalid geometry, shapes or parameters."""


class Storage(Enum):
    HALF_STORED = "half"
    FULL = "full"


def quantize_half(x):
    """Round to the nearest binary16 value, returned as float32.

    Overflow saturates to +-inf and NaN propagates.  Works on scalars and arrays.
    """
    arr = np.asarray(x, dtype=F32)
    with np.errstate(over="ignore"):
        out = arr.astype(np.float16).astype(F32)
    if out.ndim == 0:
        return F32(out)
    return out


def _as_f32(x) -> np.ndarray:
    if isinstance(x, Matrix):
        return x.data
    return np.asarray(x, dtype=F32)


@dataclass
class Matrix:
    """Row-major 2-D float32 tensor tagged with its storage class."""

    data: np.ndarray
    storage: Storage = Storage.FULL

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=F32)
        if data.ndim != 2:
            raise ConfigError(f"Matrix needs 2-D data, got shape {data.shape}")
        if self.storage is Storage.HALF_STORED:
            q = quantize_half(data)
            same = (q == data) | (np.isnan(q) & np.isnan(data))
            if not same.all():
                raise ConfigError("HALF_STORED matrix holds values off the 16-bit grid")
        self.data = data

    @classmethod
    def half(cls, values) -> "Matrix":
        return cls(quantize_half(np.asarray(values, dtype=F32)), Storage.HALF_STORED)

    @classmethod
    def full(cls, values) -> "Matrix":
        return cls(np.asarray(values, dtype=F32), Storage.FULL)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls(np.zeros((rows, cols), dtype=F32), Storage.FULL)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def copy(self) -> "Matrix":
        return Matrix(self.data.copy(), self.storage)

    def transpose(self) -> "Matrix":
        """Explicitly materialized transpose."""
        return Matrix(np.ascontiguousarray(self.data.T), self.storage)


@dataclass
class AttnConfig:
    """Single-head attention geometry.

    ``block`` is used for both the row and the column tiles.  ``stride`` is the
    strided-checksum group width.
    """

    seq_len: int
    head_dim: int
    block: int
    stride: int = 8
    scale: float | None = None

    def __post_init__(self):
        for name in ("seq_len", "head_dim", "block", "stride"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.seq_len % self.block:
            raise ConfigError(
                f"block {self.block} does not divide seq_len {self.seq_len}")
        if self.block % self.stride:
            raise ConfigError(f"stride {self.stride} does not divide block {self.block}")
        if self.head_dim % self.stride:
            raise ConfigError(
                f"stride {self.stride} does not divide head_dim {self.head_dim}")
        if self.scale is None:
            self.scale = 1.0 / math.sqrt(self.head_dim)

    @property
    def num_blocks(self) -> int:
        return self.seq_len // self.block

    @property
    def scale_f32(self) -> np.float32:
        return F32(self.scale)

    def lc_cols(self, width: int) -> int:
        """Loop count of strided additions for a protected tile ``width`` wide."""
        if width % self.stride:
            raise ConfigError(f"stride {self.stride} does not divide width {width}")
        return width // self.stride - 1

    def to_dict(self) -> dict:
        return {"seq_len": self.seq_len, "head_dim": self.head_dim, "block": self.block,
                "stride": self.stride, "scale": float(self.scale)}


@dataclass
class Counters:
    """Operation and memory-traffic accumulators for one run.

    ``detail`` breaks flops down by tag (``gemm1``, ``gemm1_c1``, ...);
    ``events`` counts verification events by kind.  ``hbm_intermediate`` is the
    part of reads+writes spent on materialized S/P tensors.
    """

    flops_main: int = 0
    flops_checksum: int = 0
    flops_verify: int = 0
    hbm_reads: int = 0
    hbm_writes: int = 0
    hbm_intermediate: int = 0
    detail: Counter = field(default_factory=Counter)
    events: Counter = field(default_factory=Counter)

    def add_flops(self, kind: str, tag: str, n: int) -> None:
        if kind == "main":
            self.flops_main += n
        elif kind == "checksum":
            self.flops_checksum += n
        elif kind == "verify":
            self.flops_verify += n
        else:
            raise ValueError(kind)
        self.detail[tag] += n

    def read(self, n: int, intermediate: bool = False) -> None:
        self.hbm_reads += n
        if intermediate:
            self.hbm_intermediate += n

    def write(self, n: int, intermediate: bool = False) -> None:
        self.hbm_writes += n
        if intermediate:
            self.hbm_intermediate += n

    def event(self, name: str, n: int = 1) -> None:
        self.events[name] += n

    def reset(self) -> None:
        self.flops_main = self.flops_checksum = self.flops_verify = 0
        self.hbm_reads = self.hbm_writes = self.hbm_intermediate = 0
        self.detail.clear()
        self.events.clear()

    def merge(self, other: "Counters") -> "Counters":
        self.flops_main += other.flops_main
        self.flops_checksum += other.flops_checksum
        self.flops_verify += other.flops_verify
        self.hbm_reads += other.hbm_reads
        self.hbm_writes += other.hbm_writes
        self.hbm_intermediate += other.hbm_intermediate
        self.detail.update(other.detail)
        self.events.update(other.events)
        return self

    def snapshot(self) -> "Counters":
        return Counters(self.flops_main, self.flops_checksum, self.flops_verify,
                        self.hbm_reads, self.hbm_writes, self.hbm_intermediate,
                        Counter(self.detail), Counter(self.events))

    def to_dict(self) -> dict:
        return {
            "flops_main": self.flops_main,
            "flops_checksum": self.flops_checksum,
            "flops_verify": self.flops_verify,
            "hbm_reads": self.hbm_reads,
            "hbm_writes": self.hbm_writes,
            "hbm_intermediate": self.hbm_intermediate,
            "detail": dict(sorted(self.detail.items())),
            "events": dict(sorted(self.events.items())),
        }


def _gemm_raw(A: np.ndarray, B: np.ndarray, C_init: np.ndarray | None) -> np.ndarray:
    M, K = A.shape
    Nc = B.shape[1]
    if C_init is None:
        C = np.zeros((M, Nc), dtype=F32)
    else:
        C = np.array(C_init, dtype=F32, copy=True)
    # Rank-1 updates in k order: every C[i, j] sees the same sequence of
    # correctly rounded float32 multiply and add, whatever the tile shape.
    for k in range(K):
        C += A[:, k:k + 1] * B[k:k + 1, :]
    return C


def gemm_mixed(A, B, C_init=None, counters: Counters | None = None,
               tag: str = "gemm") -> np.ndarray:
    """C = C_init + A @ B with float32 products and float32 accumulation."""
    a = _as_f32(A)
    b = _as_f32(B)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigError(f"gemm shape mismatch {a.shape} x {b.shape}")
    c0 = None
    if C_init is not None:
        c0 = _as_f32(C_init)
        if c0.shape != (a.shape[0], b.shape[1]):
            raise ConfigError(f"C_init shape {c0.shape} != {(a.shape[0], b.shape[1])}")
    out = _gemm_raw(a, b, c0)
    if counters is not None:
        counters.add_flops("main", tag, 2 * a.shape[0] * b.shape[1] * a.shape[1])
    return out


def tile_rows(M, B: int) -> list[np.ndarray]:
    """Row-block views of ``M`` (no copies)."""
    a = _as_f32(M)
    if B < 1 or a.shape[0] % B:
        raise ConfigError(f"block {B} does not divide {a.shape[0]} rows")
    return [a[k:k + B] for k in range(0, a.shape[0], B)]


def tile_cols(M, B: int) -> list[np.ndarray]:
    a = _as_f32(M)
    if B < 1 or a.shape[1] % B:
        raise ConfigError(f"block {B} does not divide {a.shape[1]} columns")
    return [a[:, k:k + B] for k in range(0, a.shape[1], B)]


def concat_rows(tiles: Sequence) -> np.ndarray:
    return np.concatenate([_as_f32(t) for t in tiles], axis=0)


def concat_cols(tiles: Sequence) -> np.ndarray:
    return np.concatenate([_as_f32(t) for t in tiles], axis=1)


def make_rng(seed: int | Iterable[int]) -> np.random.Generator:
    """All randomness in the package flows through this."""
    if isinstance(seed, (int, np.integer)):
        return np.random.default_rng(int(seed))
    return np.random.default_rng([int(s) for s in seed])


def random_qkv(cfg: AttnConfig, rng: np.random.Generator, scale: float = 1.0):
    """Standard-normal Q, K, V rounded onto the 16-bit grid."""
    shape = (cfg.seq_len, cfg.head_dim)
    return tuple(quantize_half(rng.standard_normal(shape).astype(F32) * F32(scale))
                 for _ in range(3))
