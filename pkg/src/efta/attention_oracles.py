"""Reference attention: two-pass standard softmax and unprotected flash attention.

Both paths apply the softmax scale to GEMM I's output before the max
subtraction and normalize late (divide the accumulated ``exp(S - m) V`` by the
rowsum), so that a single-block flash run reproduces the standard path bit for
bit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core_tensor import AttnConfig, ConfigError, Counters, F32, _as_f32, gemm_mixed

RowmaxHook = Callable[[int, np.ndarray], np.ndarray]


@dataclass
class SoftmaxState:
    """Running max ``m`` and running sum ``l`` for the rows of one row-block."""

    m: np.ndarray
    l: np.ndarray

    @classmethod
    def initial(cls, rows: int) -> "SoftmaxState":
        return cls(np.full(rows, -np.inf, dtype=F32), np.zeros(rows, dtype=F32))


def _check_qkv(Q, K, V, cfg: AttnConfig):
    q, k, v = _as_f32(Q), _as_f32(K), _as_f32(V)
    want = (cfg.seq_len, cfg.head_dim)
    for name, a in (("Q", q), ("K", k), ("V", v)):
        if a.shape != want:
            raise ConfigError(f"{name} has shape {a.shape}, expected {want}")
    return q, k, v


def standard_attention(Q, K, V, cfg: AttnConfig, counters: Counters | None = None) -> np.ndarray:
    """O = diag(rowsum(e^(S - m)))^-1 e^(S - m) V with S = scale * Q K^T."""
    q, k, v = _check_qkv(Q, K, V, cfg)
    S = gemm_mixed(q, np.ascontiguousarray(k.T), counters=counters, tag="gemm1") * cfg.scale_f32
    m = S.max(axis=1)
    P = np.exp(S - m[:, None])
    l = P.sum(axis=1)
    O = gemm_mixed(P, v, counters=counters, tag="gemm2")
    return O / l[:, None]


def flash_row_block(Qi: np.ndarray, K: np.ndarray, V: np.ndarray, cfg: AttnConfig,
                    i: int = 0, order: Sequence[int] | None = None,
                    rowmax_hook: RowmaxHook | None = None,
                    counters: Counters | None = None,
                    return_state: bool = False):
    """Online-softmax recurrence for one row-block of queries.

    ``rowmax_hook(j, m_new)`` may replace the running max after the reduce-max
    of iteration ``j`` (used to study rowmax perturbations).
    """
    B, n = cfg.block, cfg.num_blocks
    scale = cfg.scale_f32
    rows = Qi.shape[0]
    state = SoftmaxState.initial(rows)
    O = np.zeros((rows, cfg.head_dim), dtype=F32)
    if counters is not None:
        counters.read(Qi.size)
    for j in (range(n) if order is None else order):
        Kj = K[j * B:(j + 1) * B]
        Vj = V[j * B:(j + 1) * B]
        if counters is not None:
            counters.read(Kj.size + Vj.size)
        S = gemm_mixed(Qi, np.ascontiguousarray(Kj.T), counters=counters, tag="gemm1") * scale
        m_new = np.maximum(state.m, S.max(axis=1))
        if rowmax_hook is not None:
            m_new = np.asarray(rowmax_hook(j, m_new), dtype=F32)
        P = np.exp(S - m_new[:, None])
        alpha = np.exp(state.m - m_new)
        state.l = alpha * state.l + P.sum(axis=1)
        O = gemm_mixed(P, Vj, C_init=alpha[:, None] * O, counters=counters, tag="gemm2")
        state.m = m_new
    O = O / state.l[:, None]
    if counters is not None:
        counters.write(O.size)
    if return_state:
        return O, state
    return O


def flash_attention(Q, K, V, cfg: AttnConfig, order: Sequence[int] | None = None,
                    rowmax_hook: Callable[[int, int, np.ndarray], np.ndarray] | None = None,
                    counters: Counters | None = None) -> np.ndarray:
    """Blocked attention with running max/sum rescaling and late normalization.

    ``order`` permutes the visitation order of the K/V blocks;
    ``rowmax_hook(i, j, m_new)`` is forwarded per row-block.
    """
    q, k, v = _check_qkv(Q, K, V, cfg)
    if order is not None and sorted(order) != list(range(cfg.num_blocks)):
        raise ConfigError(f"order must be a permutation of range({cfg.num_blocks})")
    B = cfg.block
    out = []
    for i in range(cfg.num_blocks):
        hook = None
        if rowmax_hook is not None:
            hook = (lambda j, m, _i=i: rowmax_hook(_i, j, m))
        out.append(flash_row_block(q[i * B:(i + 1) * B], k, v, cfg, i=i, order=order,
                                   rowmax_hook=hook, counters=counters))
    return np.concatenate(out, axis=0)


def flash_softmax_stats(Q, K, cfg: AttnConfig):
    """Final (m, l) per query row plus per-block row maxima, from the flash recurrence."""
    q, k, _ = _check_qkv(Q, K, K, cfg)
    B, n = cfg.block, cfg.num_blocks
    scale = cfg.scale_f32
    ms, ls, hists = [], [], []
    for i in range(n):
        Qi = q[i * B:(i + 1) * B]
        st = SoftmaxState.initial(B)
        hist = []
        for j in range(n):
            S = gemm_mixed(Qi, np.ascontiguousarray(k[j * B:(j + 1) * B].T)) * scale
            bm = S.max(axis=1)
            hist.append(bm)
            m_new = np.maximum(st.m, bm)
            P = np.exp(S - m_new[:, None])
            st.l = np.exp(st.m - m_new) * st.l + P.sum(axis=1)
            st.m = m_new
        ms.append(st.m)
        ls.append(st.l)
        hists.append(np.stack(hist, axis=1))
    return np.concatenate(ms), np.concatenate(ls), np.concatenate(hists, axis=0)
