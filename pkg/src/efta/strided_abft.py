"""Checksum-based error detection and correction for tile GEMMs.

Two schemes live here:

* the traditional element checksum (one weighted pair per column or per row),
  used by the decoupled baseline, and
* the strided tensor checksum: for a tile ``T`` of width ``w = g * s``,
  ``c1[i, j] = sum_l T[i, j + s*l]`` and ``c2[i, j] = sum_l (l + 1) T[i, j + s*l]``
  for ``l = 0 .. g-1``.  Each checksum column covers ``g`` elements spaced ``s``
  apart, so a row can carry up to ``s`` independent single errors.

Group weights are 1-based, so the group of a single error is ``round(c2/c1) - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .core_tensor import ConfigError, Counters, F32, _as_f32, _gemm_raw

# GPU reference threshold for GEMM checksums (FP16 tensor cores); desk runs
# should use a calibrated value instead.
REFERENCE_ABFT_THRESHOLD = 0.48
# A located group index must be this close to an integer.
RATIO_TOLERANCE = 0.25


class Status(Enum):
    CLEAN = "clean"
    CORRECTED = "corrected"
    DETECTED_UNCORRECTABLE = "uncorrectable"
    NONFINITE = "nonfinite"


@dataclass
class ChecksumPair:
    c1: np.ndarray
    c2: np.ndarray
    stride: int
    groups: int

    def __post_init__(self):
        if self.c1.shape != self.c2.shape:
            raise ConfigError("checksum pair shapes differ")

    @property
    def width(self) -> int:
        return self.stride * self.groups

    def scaled(self, factor) -> "ChecksumPair":
        f = np.asarray(factor, dtype=F32)
        if f.ndim == 1:
            f = f[:, None]
        return ChecksumPair(self.c1 * f, self.c2 * f, self.stride, self.groups)


@dataclass
class VerificationReport:
    status: Status = Status.CLEAN
    site: str = ""
    location: tuple[int, int] | None = None
    delta: float = 0.0
    residual: float = 0.0
    locations: list = field(default_factory=list)
    detail: str = ""

    @property
    def detected(self) -> bool:
        return self.status is not Status.CLEAN

    def to_dict(self) -> dict:
        return {"status": self.status.value, "site": self.site,
                "location": list(self.location) if self.location else None,
                "delta": float(self.delta), "residual": float(self.residual),
                "detail": self.detail}


def _groups(width: int, s: int) -> int:
    if s < 1 or width % s:
        raise ConfigError(f"stride {s} does not divide width {width}")
    return width // s


def _weighted_sums(t: np.ndarray, s: int) -> tuple[np.ndarray, np.ndarray]:
    g = _groups(t.shape[1], s)
    c1 = np.zeros((t.shape[0], s), dtype=F32)
    c2 = np.zeros((t.shape[0], s), dtype=F32)
    with np.errstate(over="ignore", invalid="ignore"):
        for l in range(g):
            part = t[:, l * s:(l + 1) * s]
            c1 += part
            c2 += F32(l + 1) * part
    return c1, c2


def encode_strided(T, s: int, counters: Counters | None = None,
                   tag: str = "encode") -> ChecksumPair:
    """Strided checksums of the columns of ``T`` (unit and 1-based group weights)."""
    t = _as_f32(T)
    g = _groups(t.shape[1], s)
    c1, c2 = _weighted_sums(t, s)
    if counters is not None:
        counters.add_flops("checksum", tag, 3 * t.size)
    return ChecksumPair(c1, c2, s, g)


def strided_sums(T, s: int, counters: Counters | None = None,
                 tag: str = "strided_sums") -> tuple[np.ndarray, np.ndarray]:
    """Same arithmetic as :func:`encode_strided`, accounted as verification work."""
    t = _as_f32(T)
    _groups(t.shape[1], s)
    sums = _weighted_sums(t, s)
    if counters is not None:
        counters.add_flops("verify", tag, 3 * t.size)
    return sums


def checksum_residual(T, cp: ChecksumPair, counters: Counters | None = None) -> np.ndarray:
    """Per-row max of ``max(|c1 - sum1|, |c2 - sum2| / groups)``."""
    sum1, sum2 = strided_sums(T, cp.stride, counters)
    with np.errstate(invalid="ignore", over="ignore"):
        d = np.maximum(np.abs(cp.c1 - sum1), np.abs(cp.c2 - sum2) / F32(cp.groups))
    return d.max(axis=1)


def _finite(*arrays) -> bool:
    return all(np.isfinite(a).all() for a in arrays)


def verify_locate_correct(T, cp: ChecksumPair, eps_abs, *,
                          recompute: Callable[[int, int], float] | None = None,
                          counters: Counters | None = None,
                          site: str = "") -> tuple[np.ndarray, VerificationReport]:
    """Check ``T`` against its strided checksums and fix single errors.

    ``eps_abs`` is a scalar or a per-row array.  A checksum cell (i, j) is
    violated when ``|c1 - sum1| > eps`` or ``|c2 - sum2| > groups * eps``.  Each
    violated cell is handled independently: the ratio of the two differences
    gives the 1-based group.  The element is then rebuilt as ``c1`` minus the
    other members of its group (the same correction as adding ``c1 - sum1``,
    without the cancellation against a huge corrupted value), or recomputed
    through ``recompute(row, col)`` when given.
    """
    t = np.array(_as_f32(T), dtype=F32, copy=True)
    rep = VerificationReport(site=site)
    s, g = cp.stride, cp.groups
    if t.shape[1] != s * g or cp.c1.shape != (t.shape[0], s):
        raise ConfigError(f"checksum pair does not match tile shape {t.shape}")
    if not _finite(t, cp.c1, cp.c2):
        rep.status = Status.NONFINITE
        rep.residual = float("inf")
        rep.detail = "non-finite tile or checksum"
        return t, rep
    sum1, sum2 = strided_sums(t, s, counters)
    with np.errstate(over="ignore", invalid="ignore"):
        d1 = cp.c1 - sum1
        d2 = cp.c2 - sum2
    if not _finite(sum1, sum2, d1, d2):
        rep.status = Status.NONFINITE
        rep.residual = float("inf")
        rep.detail = "checksum arithmetic overflowed"
        return t, rep
    eps = np.asarray(eps_abs, dtype=F32)
    if eps.ndim == 1:
        eps = eps[:, None]
    a1 = np.abs(d1)
    a2 = np.abs(d2) / F32(g)
    rep.residual = float(np.maximum(a1, a2).max()) if t.size else 0.0
    viol = (a1 > eps) | (a2 > eps)
    if not viol.any():
        return t, rep

    ok = True
    for r, j in zip(*np.nonzero(viol)):
        r, j = int(r), int(j)
        if d1[r, j] == 0:
            ok = False
            continue
        rho = float(d2[r, j]) / float(d1[r, j])
        k = int(np.rint(rho))
        if not (1 <= k <= g) or abs(rho - k) > RATIO_TOLERANCE:
            ok = False
            continue
        col = j + s * (k - 1)
        if recompute is not None:
            new = F32(recompute(r, col))
        else:
            others = F32(0.0)
            for l in range(g):
                if l != k - 1:
                    others += t[r, j + s * l]
            new = F32(cp.c1[r, j] - others)
        delta = float(new) - float(t[r, col])
        t[r, col] = new
        rep.locations.append((r, col))
        if rep.location is None:
            rep.location = (r, col)
            rep.delta = delta
    rep.status = Status.CORRECTED if ok else Status.DETECTED_UNCORRECTABLE
    if counters is not None:
        counters.event("abft_corrections", len(rep.locations))
    return t, rep


def checksummed_gemm(A, Bt, s: int, counters: Counters | None = None,
                     tag: str = "gemm", C_init=None,
                     cp_init: ChecksumPair | None = None,
                     cp_B: ChecksumPair | None = None) -> tuple[np.ndarray, ChecksumPair]:
    """``A @ Bt`` together with the strided checksums of the product.

    The checksums of ``Bt`` (encoded here unless ``cp_B`` is given) are appended
    as extra columns and multiplied in the same pass.  ``C_init``/``cp_init``
    seed an accumulating GEMM (``C = C_init + A @ Bt``).
    """
    a = _as_f32(A)
    b = _as_f32(Bt)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigError(f"gemm shape mismatch {a.shape} x {b.shape}")
    M, K = a.shape
    Nc = b.shape[1]
    if cp_B is None:
        cp_B = encode_strided(b, s, counters, tag=f"{tag}_encode")
    aug = np.concatenate([b, cp_B.c1, cp_B.c2], axis=1)
    c0 = None
    if C_init is not None or cp_init is not None:
        base = np.zeros((M, Nc), dtype=F32) if C_init is None else _as_f32(C_init)
        if cp_init is None:
            cp_init = ChecksumPair(np.zeros((M, s), F32), np.zeros((M, s), F32), s, cp_B.groups)
        c0 = np.concatenate([base, cp_init.c1, cp_init.c2], axis=1)
    out = _gemm_raw(a, aug, c0)
    if counters is not None:
        counters.add_flops("main", tag, 2 * M * Nc * K)
        counters.add_flops("checksum", f"{tag}_c1", 2 * M * s * K)
        counters.add_flops("checksum", f"{tag}_c2", 2 * M * s * K)
    C = np.ascontiguousarray(out[:, :Nc])
    cp = ChecksumPair(np.ascontiguousarray(out[:, Nc:Nc + s]),
                      np.ascontiguousarray(out[:, Nc + s:]), s, cp_B.groups)
    return C, cp


# -- traditional element checksums ------------------------------------------

@dataclass
class TraditionalChecksums:
    """Weighted sums along ``axis``: axis 0 gives checksum rows (c1 A, c2 A),
    axis 1 gives checksum columns (A r1, A r2).  Weights are 1 and 1..len."""

    c1: np.ndarray
    c2: np.ndarray
    axis: int = 0


def _trad_sums(a: np.ndarray, axis: int):
    n = a.shape[axis]
    w = np.arange(1, n + 1, dtype=F32)
    if axis == 0:
        c1 = np.zeros(a.shape[1], dtype=F32)
        c2 = np.zeros(a.shape[1], dtype=F32)
        for i in range(n):
            c1 += a[i]
            c2 += w[i] * a[i]
    else:
        c1 = np.zeros(a.shape[0], dtype=F32)
        c2 = np.zeros(a.shape[0], dtype=F32)
        for i in range(n):
            c1 += a[:, i]
            c2 += w[i] * a[:, i]
    return c1, c2


def encode_traditional(A, axis: int = 0, counters: Counters | None = None,
                       tag: str = "encode_traditional") -> TraditionalChecksums:
    a = _as_f32(A)
    if axis not in (0, 1):
        raise ConfigError("axis must be 0 or 1")
    c1, c2 = _trad_sums(a, axis)
    if counters is not None:
        counters.add_flops("checksum", tag, 3 * a.size)
    return TraditionalChecksums(c1, c2, axis)


def verify_traditional(C, checks: TraditionalChecksums, eps_abs: float, *,
                       counters: Counters | None = None,
                       site: str = "") -> tuple[np.ndarray, VerificationReport]:
    """Single-error location/correction with one weighted checksum pair per line."""
    c = np.array(_as_f32(C), dtype=F32, copy=True)
    rep = VerificationReport(site=site)
    if not _finite(c, checks.c1, checks.c2):
        rep.status = Status.NONFINITE
        rep.residual = float("inf")
        return c, rep
    s1, s2 = _trad_sums(c, checks.axis)
    if counters is not None:
        counters.add_flops("verify", "verify_traditional", 3 * c.size)
    with np.errstate(over="ignore", invalid="ignore"):
        d1 = checks.c1 - s1
        d2 = checks.c2 - s2
    if not _finite(s1, s2, d1, d2):
        rep.status = Status.NONFINITE
        rep.residual = float("inf")
        return c, rep
    length = c.shape[checks.axis]
    a1, a2 = np.abs(d1), np.abs(d2) / F32(length)
    rep.residual = float(np.maximum(a1, a2).max()) if c.size else 0.0
    viol = (a1 > eps_abs) | (a2 > eps_abs)
    if not viol.any():
        return c, rep
    ok = True
    for line in np.nonzero(viol)[0]:
        line = int(line)
        if d1[line] == 0:
            ok = False
            continue
        rho = float(d2[line]) / float(d1[line])
        k = int(np.rint(rho))
        if not (1 <= k <= length) or abs(rho - k) > RATIO_TOLERANCE:
            ok = False
            continue
        pos = (k - 1, line) if checks.axis == 0 else (line, k - 1)
        others = F32(0.0)
        for idx in range(length):
            if idx != k - 1:
                others += c[idx, line] if checks.axis == 0 else c[line, idx]
        new = F32(checks.c1[line] - others)
        delta = float(new) - float(c[pos])
        c[pos] = new
        rep.locations.append(pos)
        if rep.location is None:
            rep.location = pos
            rep.delta = delta
    rep.status = Status.CORRECTED if ok else Status.DETECTED_UNCORRECTABLE
    return c, rep


def traditional_gemm(A, B, counters: Counters | None = None, tag: str = "gemm"):
    """``A @ B`` with the column checksums of the product propagated from ``A``'s
    checksum rows (c1 A, c2 A) in the same pass."""
    a = _as_f32(A)
    b = _as_f32(B)
    if a.shape[1] != b.shape[0]:
        raise ConfigError(f"gemm shape mismatch {a.shape} x {b.shape}")
    chk = encode_traditional(a, 0, counters, tag=f"{tag}_encode")
    aug = np.concatenate([a, chk.c1[None, :], chk.c2[None, :]], axis=0)
    out = _gemm_raw(aug, b, None)
    M, K = a.shape
    Nc = b.shape[1]
    if counters is not None:
        counters.add_flops("main", tag, 2 * M * Nc * K)
        counters.add_flops("checksum", f"{tag}_c1", 2 * Nc * K)
        counters.add_flops("checksum", f"{tag}_c2", 2 * Nc * K)
    return (np.ascontiguousarray(out[:M]),
            TraditionalChecksums(out[M].copy(), out[M + 1].copy(), 0))


def calibrate_tile_eps(M: int, K: int, Nc: int, s: int, n_tiles: int = 1000,
                       safety: float = 2.0, seed: int = 0) -> float:
    """Max clean checksum discrepancy of random half-precision tile GEMMs x safety."""
    from .core_tensor import make_rng, quantize_half

    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n_tiles):
        a = quantize_half(rng.standard_normal((M, K)).astype(F32))
        b = quantize_half(rng.standard_normal((K, Nc)).astype(F32))
        C, cp = checksummed_gemm(a, b, s)
        worst = max(worst, float(checksum_residual(C, cp).max()))
    return worst * safety
