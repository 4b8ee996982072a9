"""Selective neuron value restriction for the blocked softmax.

* Rowmax faults (Case 1): a shifted running max cancels between the
  numerator and the rowsum, so it is only guarded by cheap range checks.
* Subtract-max / exp faults (Case 2): the GEMM I strided checksum is carried
  through the max subtraction and the exponential.  Because
  ``exp(c1 - g*m) = prod_l exp(S[., j + s*l] - m)``, the exp stage is verified
  in the log domain: ``sum_l log P`` against ``c1 - g*m``.  An absolute
  log-domain gap is the relative error of the two products.
* Rowsum faults (Case 3): the final rowsum must lie in
  ``[sum_k exp(blockmax_k - m), seq_len]``; outside that range it is replaced
  by the lower bound.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core_tensor import ConfigError, Counters, F32, _as_f32
from .strided_abft import (
    REFERENCE_ABFT_THRESHOLD,
    ChecksumPair,
    Status,
    VerificationReport,
    verify_locate_correct,
)

# GPU reference value of the exp-stage relative threshold.
REFERENCE_EXP_REL_THRESHOLD = 7e-6
# log of the smallest positive normal float32; below it exp() has lost the
# information the multiplicative identity relies on.
LOG_TINY = float(np.log(np.finfo(np.float32).tiny))


@dataclass
class Thresholds:
    """eps1: exp stage (log domain); eps2: output stage; eps_lin: GEMM I stage."""

    eps1: float
    eps2: float
    eps_lin: float
    degenerate: bool = False
    source: str = "manual"

    def validate(self) -> "Thresholds":
        for name in ("eps1", "eps2", "eps_lin"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ConfigError(f"threshold {name} must be > 0, got {v}")
        return self

    @classmethod
    def reference_defaults(cls) -> "Thresholds":
        return cls(REFERENCE_EXP_REL_THRESHOLD, REFERENCE_ABFT_THRESHOLD, REFERENCE_ABFT_THRESHOLD,
                   source="reference")

    def to_dict(self) -> dict:
        return {"eps1": self.eps1, "eps2": self.eps2, "eps_lin": self.eps_lin,
                "degenerate": self.degenerate, "source": self.source}

    @classmethod
    def from_dict(cls, d: dict) -> "Thresholds":
        return cls(float(d["eps1"]), float(d["eps2"]), float(d["eps_lin"]),
                   bool(d.get("degenerate", False)), d.get("source", "manual"))


@dataclass
class RowmaxHistory:
    """Per-block row maxima of S plus the running (global) max."""

    block_max: list = field(default_factory=list)
    m: np.ndarray | None = None

    def append(self, bm: np.ndarray, m_running: np.ndarray) -> None:
        self.block_max.append(np.array(bm, dtype=F32))
        self.m = np.array(m_running, dtype=F32)

    def __len__(self) -> int:
        return len(self.block_max)

    def stacked(self) -> np.ndarray:
        return np.stack(self.block_max, axis=1)

    def consistent(self) -> np.ndarray:
        """Rows whose running max equals the max over recorded block maxima."""
        return self.stacked().max(axis=1) == self.m

    def lower_bound(self) -> np.ndarray:
        with np.errstate(invalid="ignore", over="ignore"):
            return np.exp(self.stacked() - self.m[:, None]).sum(axis=1, dtype=F32)


def exp_with_checksum(S_tile, cp_S: ChecksumPair, m) -> tuple[np.ndarray, np.ndarray]:
    """P = exp(S - m) and the log-domain exp checksum ``c1 - groups * m``."""
    s = _as_f32(S_tile)
    m = np.asarray(m, dtype=F32)
    with np.errstate(over="ignore", invalid="ignore"):
        P = np.exp(s - m[:, None])
        log_ck = cp_S.c1 - F32(cp_S.groups) * m[:, None]
    return P, log_ck


def exp_discrepancy(P, log_checksum, s: int):
    """Log-domain gap per checksum cell, plus masks of invalid and ambiguous cells.

    Invalid: a group holds a negative, non-finite or >1 value.  Ambiguous: the
    group product and the checksum both underflowed (consistent, but a fault
    may hide behind the zero), or the checksum is not finite.  A group that
    underflowed while its checksum did not is a plain violation.
    """
    p = _as_f32(P)
    rows, width = p.shape
    g = width // s
    p3 = p.reshape(rows, g, s)
    bad = ~np.isfinite(p3) | (p3 < 0) | (p3 > 1)
    invalid = bad.any(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.log(np.where(bad, F32(1.0), p3))
        lhs = np.zeros((rows, s), dtype=F32)
        for l in range(g):
            lhs += logs[:, l, :]
        rhs = np.asarray(log_checksum, dtype=F32)
        gap = np.abs(lhs - rhs)
    under = np.isneginf(lhs)
    rhs_fin = np.isfinite(rhs)
    # Both sides underflowed: consistent, but a fault elsewhere in the group
    # could be hiding behind the zero.
    both_tiny = under & (np.isneginf(rhs) | (rhs_fin & (rhs < LOG_TINY)))
    ambiguous = ~invalid & (both_tiny | (~under & ~rhs_fin))
    gap = np.where(both_tiny, F32(0.0), gap)
    gap = np.where(invalid | (under & ~both_tiny) | ~rhs_fin, F32(np.inf), gap)
    return gap, invalid, ambiguous


@dataclass
class ExpStageResult:
    P: np.ndarray
    S: np.ndarray
    m: np.ndarray
    block_max: np.ndarray
    report: VerificationReport


def verify_exp_stage(P_tile, log_checksum, S_tile, cp_S: ChecksumPair, m_prev, m,
                     thr: Thresholds, *,
                     recompute_s: Callable[[int, int], float] | None = None,
                     recompute_tile: Callable[[], np.ndarray] | None = None,
                     counters: Counters | None = None,
                     site: str = "exp") -> ExpStageResult:
    """Verify P = exp(S - m) against the carried checksum and repair it.

    On a violation the GEMM I output is re-verified with its own strided
    checksum first; a linear fault is corrected there (``recompute_s`` rebuilds
    one located element, ``recompute_tile`` the whole tile when location
    fails).  The row maxima and P are then recomputed from the repaired S and
    ``m_prev`` (the running max before this block; -inf for the first block).
    """
    s = cp_S.stride
    P = _as_f32(P_tile)
    S = _as_f32(S_tile)
    m = np.asarray(m, dtype=F32)
    m_prev = np.asarray(m_prev, dtype=F32)
    rep = VerificationReport(site=site)
    gap, invalid, ambiguous = exp_discrepancy(P, log_checksum, s)
    if counters is not None:
        counters.add_flops("verify", "verify_exp", 3 * P.size + 2 * gap.size)
        counters.event("exp_verifications")
    finite_gap = gap[np.isfinite(gap)]
    rep.residual = float(finite_gap.max()) if finite_gap.size else 0.0
    viol = (gap > F32(thr.eps1)) & ~ambiguous
    viol |= ~np.isfinite(m)[:, None]
    if not viol.any() and not ambiguous.any():
        return ExpStageResult(P, S, m, S.max(axis=1), rep)

    S_fixed, lin = verify_locate_correct(S, cp_S, thr.eps_lin, recompute=recompute_s,
                                         counters=counters, site="gemm1")
    if lin.status in (Status.NONFINITE, Status.DETECTED_UNCORRECTABLE):
        if recompute_tile is None:
            rep.status = lin.status
            rep.detail = f"linear stage {lin.status.value}"
            return ExpStageResult(P, S, m, S.max(axis=1), rep)
        S_fixed = np.array(recompute_tile(), dtype=F32)
        lin.detail = "tile recomputed"
    if lin.status is Status.CLEAN and not viol.any():
        # Underflow ambiguity only, and GEMM I checks out: nothing to fix.
        return ExpStageResult(P, S, m, S.max(axis=1), rep)

    bm = S_fixed.max(axis=1)
    m_new = np.maximum(m_prev, bm)
    with np.errstate(over="ignore", invalid="ignore"):
        P_new = np.exp(S_fixed - m_new[:, None])
    if counters is not None:
        counters.event("exp_recomputations")
    if lin.status is Status.CLEAN and recompute_tile is not None:
        # A sub-threshold GEMM I error can leave the identity violated after
        # the exp recompute; fall back to recomputing the tile.
        log_ck = cp_S.c1 - F32(cp_S.groups) * m_new[:, None]
        gap2, _, amb2 = exp_discrepancy(P_new, log_ck, s)
        if ((gap2 > F32(thr.eps1)) & ~amb2).any():
            S_fixed = np.array(recompute_tile(), dtype=F32)
            bm = S_fixed.max(axis=1)
            m_new = np.maximum(m_prev, bm)
            P_new = np.exp(S_fixed - m_new[:, None])
            lin.detail = "tile recomputed"
    rep.status = Status.CORRECTED
    rows = sorted({int(r) for r in np.nonzero(viol | ambiguous)[0]})
    if lin.status is Status.CORRECTED:
        rep.location = lin.location
        rep.locations = lin.locations
        rep.delta = lin.delta
        rep.detail = "linear stage corrected by checksum; exp recomputed"
    elif lin.detail == "tile recomputed":
        rep.detail = "GEMM I tile recomputed; exp recomputed"
    else:
        rep.location = (rows[0], -1) if rows else None
        rep.locations = [(r, -1) for r in rows]
        rep.detail = "exp recomputed"
    return ExpStageResult(P_new, S_fixed, m_new, bm, rep)


def restrict_rowsum(l, hist: RowmaxHistory, seq_len: int, *,
                    counters: Counters | None = None,
                    site: str = "rowsum") -> tuple[np.ndarray, VerificationReport]:
    """Keep each rowsum inside ``[sum_k exp(blockmax_k - m), seq_len]`` (inclusive).

    Out-of-range or non-finite values are replaced by the lower bound.
    """
    l = np.array(l, dtype=F32, copy=True)
    lower = hist.lower_bound()
    if counters is not None:
        counters.add_flops("verify", "verify_rowsum", 2 * lower.size * (len(hist) + 1))
        counters.event("rowsum_checks")
    with np.errstate(invalid="ignore"):
        bad = ~np.isfinite(l) | (l < lower) | (l > F32(seq_len))
    rep = VerificationReport(site=site)
    if bad.any():
        rows = [int(r) for r in np.nonzero(bad)[0]]
        rep.status = Status.CORRECTED
        rep.location = (rows[0], -1)
        rep.locations = [(r, -1) for r in rows]
        rep.delta = float(lower[rows[0]]) - float(l[rows[0]]) if np.isfinite(l[rows[0]]) else float("inf")
        rep.detail = "rowsum replaced by lower-bound approximation"
        l[bad] = lower[bad]
    return l, rep


def perturb_rowmax(m, delta) -> np.ndarray:
    """m + delta (delta broadcast per row); used to exercise rowmax cancellation."""
    return (np.asarray(m, dtype=F32) + np.asarray(delta, dtype=F32)).astype(F32)
