import numpy as np
import pytest

from efta.core_tensor import ConfigError, Counters, make_rng, quantize_half
from efta.snvr_softmax import (
    REFERENCE_EXP_REL_THRESHOLD, RowmaxHistory, Thresholds, exp_discrepancy, exp_with_checksum,
    perturb_rowmax, restrict_rowsum, verify_exp_stage,
)
from efta.strided_abft import Status, checksummed_gemm

THR = Thresholds(1e-5, 1e-5, 1e-5)


def scores(seed=0, rows=8, cols=16, d=32):
    rng = make_rng(seed)
    Q = quantize_half(rng.standard_normal((rows, d)).astype(np.float32))
    KT = quantize_half(rng.standard_normal((d, cols)).astype(np.float32))
    S, cp = checksummed_gemm(Q, KT, 8)
    scale = np.float32(1 / np.sqrt(d))
    return Q, KT, S * scale, cp.scaled(scale), scale


def test_thresholds_roundtrip_and_validation():
    t = Thresholds.reference_defaults()
    assert t.eps1 == REFERENCE_EXP_REL_THRESHOLD and t.eps2 == 0.48
    assert Thresholds.from_dict(t.to_dict()) == t
    with pytest.raises(ConfigError):
        Thresholds(0.0, 1.0, 1.0).validate()


def test_log_identity_holds_on_clean_tile():
    _, _, S, cp, _ = scores()
    m = S.max(axis=1)
    P, log_ck = exp_with_checksum(S, cp, m)
    gap, invalid, amb = exp_discrepancy(P, log_ck, 8)
    assert not invalid.any() and not amb.any()
    assert gap.max() < 5e-6


def test_clean_stage_untouched():
    _, _, S, cp, _ = scores(1)
    m = S.max(axis=1)
    P, log_ck = exp_with_checksum(S, cp, m)
    res = verify_exp_stage(P, log_ck, S, cp, np.full(8, -np.inf, np.float32), m, THR)
    assert res.report.status is Status.CLEAN and res.P is P


@pytest.mark.parametrize("where", ["S", "P", "P_sign"])
def test_exp_stage_fault_repaired(where):
    Q, KT, S, cp, scale = scores(2)
    m = S.max(axis=1)
    P_ref = np.exp(S - m[:, None])
    S_bad = S.copy()
    if where == "S":
        S_bad[3, 5] += np.float32(0.75)
    m_bad = S_bad.max(axis=1)
    P, log_ck = exp_with_checksum(S_bad, cp, m_bad)
    if where == "P":
        P[2, 9] *= np.float32(0.5)
    if where == "P_sign":
        P[2, 9] = -P[2, 9]
    res = verify_exp_stage(P, log_ck, S_bad, cp, np.full(8, -np.inf, np.float32), m_bad, THR,
                           recompute_s=lambda r, c: float(np.dot(Q[r], KT[:, c])) * scale)
    assert res.report.status is Status.CORRECTED
    assert np.abs(res.P - P_ref).max() < 1e-6
    assert np.array_equal(res.m, m)


def test_huge_score_fault_found_through_underflow():
    _, _, S, cp, _ = scores(3)
    m = S.max(axis=1)
    S_bad = S.copy()
    S_bad[0, 0] = np.float32(1e30)
    m_bad = S_bad.max(axis=1)
    P, log_ck = exp_with_checksum(S_bad, cp, m_bad)
    res = verify_exp_stage(P, log_ck, S_bad, cp, np.full(8, -np.inf, np.float32), m_bad, THR)
    assert res.report.status is Status.CORRECTED
    assert np.allclose(res.m, m, atol=1e-5)


def test_history_and_lower_bound():
    h = RowmaxHistory()
    h.append(np.array([1.0, 2.0], np.float32), np.array([1.0, 2.0], np.float32))
    h.append(np.array([3.0, 0.0], np.float32), np.array([3.0, 2.0], np.float32))
    assert h.consistent().all()
    assert np.allclose(h.lower_bound(), [np.exp(-2) + 1, 1 + np.exp(-2)])
    h.m = np.array([3.5, 2.0], np.float32)
    assert list(h.consistent()) == [False, True]


def test_restrict_rowsum_replaces_out_of_range():
    h = RowmaxHistory()
    h.append(np.zeros(3, np.float32), np.zeros(3, np.float32))
    l = np.array([5.0, 0.5, np.nan], np.float32)
    c = Counters()
    out, rep = restrict_rowsum(l, h, 16, counters=c)
    assert list(out) == [5.0, 1.0, 1.0]
    assert rep.status is Status.CORRECTED and len(rep.locations) == 2
    out, rep = restrict_rowsum(np.array([17.0, 1.0, 16.0], np.float32), h, 16)
    assert list(out) == [1.0, 1.0, 16.0]
    assert c.events["rowsum_checks"] == 1


def test_perturb_rowmax():
    assert np.array_equal(perturb_rowmax([1.0, 2.0], [0.5, -1.0]), np.array([1.5, 1.0], np.float32))
