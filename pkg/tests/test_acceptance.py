"""End-to-end acceptance criteria; each test prints one PASS/FAIL line."""
import numpy as np
import pytest

from efta import (
    AttnConfig, FTMode, FaultPlan, FaultSpec, Site, decoupled_ft_forward, efta_forward,
    flash_attention, overhead_report, random_qkv, standard_attention,
)
from efta.attention_oracles import flash_softmax_stats
from efta.campaign import (
    REFERENCE_STRIDED_COVERAGE, REFERENCE_TRADITIONAL_COVERAGE, FixedPlan, NoFaults,
    calibrate_thresholds, is_non_increasing, run_campaign, run_trial, threshold_sweep,
    two_error_coverage,
)
from efta.core_tensor import Counters, make_rng
from efta.fault_injector import flip_bit
from efta.snvr_softmax import REFERENCE_EXP_REL_THRESHOLD, RowmaxHistory, perturb_rowmax
from efta.strided_abft import REFERENCE_ABFT_THRESHOLD

CFG = AttnConfig(64, 32, 16, 8)
TARGET_BITS = (31, 30, 29, 22, 21)  # sign, top-2 exponent, top-2 mantissa


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {number:>2}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def calibrated():
    return calibrate_thresholds(CFG, 1000, 2.0, seed=2024)


def test_01_oracle_equivalence(capsys):
    worst = 0.0
    for N in (64, 256):
        for d in (32, 64):
            for B in (16, 64):
                cfg = AttnConfig(N, d, B, 8)
                for seed in range(50):
                    Q, K, V = random_qkv(cfg, make_rng([1, N, d, B, seed]))
                    diff = np.abs(flash_attention(Q, K, V, cfg) - standard_attention(Q, K, V, cfg))
                    worst = max(worst, float(diff.max()))
    verdict(capsys, 1, worst <= 1e-3, f"max |flash - standard| = {worst:.3e} over 400 runs (tol 1e-3)")


def test_02_side_band_invariance(capsys, calibrated):
    mismatches = 0
    for seed in range(100):
        Q, K, V = random_qkv(CFG, make_rng([2, seed]))
        ref = flash_attention(Q, K, V, CFG)
        for mode in (FTMode.EFTA, FTMode.EFTA_OPTIMIZED):
            O, _ = efta_forward(Q, K, V, CFG, calibrated, mode)
            mismatches += not np.array_equal(O, ref)
    verdict(capsys, 2, mismatches == 0, f"{mismatches} of 200 clean protected runs differ from flash")


def test_03_calibrated_false_alarms(capsys, calibrated):
    st = run_campaign(CFG, FTMode.EFTA_OPTIMIZED, NoFaults(), 1000, calibrated, seed=3)
    verdict(capsys, 3, st.false_alarms <= 1,
            f"{st.false_alarms} false alarms in 1000 fresh clean runs "
            f"(eps1={calibrated.eps1:.2e}, eps2={calibrated.eps2:.2e}, eps_lin={calibrated.eps_lin:.2e})")


def _criterion4_specs():
    rng = make_rng(4)
    n = CFG.num_blocks
    specs = []
    for site in Site:
        rows, cols = {Site.GEMM2_ACC: (16, 32), Site.NORMALIZE_OUT: (16, 32)}.get(
            site, (16, 1) if site in (Site.REDUCE_MAX, Site.REDUCE_SUM, Site.RESCALE_FACTOR) else (16, 16))
        for bit in TARGET_BITS:
            for _ in range(20):
                i = int(rng.integers(n))
                j = n - 1 if site is Site.NORMALIZE_OUT else int(rng.integers(n))
                specs.append(FaultSpec(site, i, j, int(rng.integers(rows)), int(rng.integers(cols)), bit))
    return specs


def test_04_single_fault_correction(capsys, calibrated):
    specs = _criterion4_specs()
    failures, detected, worst, total = [], 0, 0.0, 0
    for mode in (FTMode.EFTA_OPTIMIZED, FTMode.EFTA):
        for t, spec in enumerate(specs):
            rec = run_trial(CFG, mode, calibrated, FixedPlan(FaultPlan([spec])), 4, t)
            total += 1
            if not rec.fired or rec.outcome not in ("corrected", "masked_benign"):
                failures.append((mode.value, spec.to_line(), rec.outcome, rec.residual))
            if rec.detected:
                detected += 1
                worst = max(worst, rec.residual)
    ok = not failures and worst <= calibrated.eps2
    verdict(capsys, 4, ok,
            f"{total - len(failures)}/{total} corrected or masked benign "
            f"(8 sites x 5 bits x 20 cells x 2 modes); {detected} detected, "
            f"max detected residual {worst:.2e} <= eps2 {calibrated.eps2:.2e}"
            + (f"; first failures {failures[:3]}" if failures else ""))


def test_05_two_error_coverage(capsys):
    res = two_error_coverage(64, 8)
    ok = (res.strided_matches_distinct and res.strided_corrected == res.distinct_column_pairs
          and res.traditional_corrected == 0 and res.coverage_ratio >= 7)
    verdict(capsys, 5, ok,
            f"{res.pairs} pairs: strided corrected {res.strided_corrected} "
            f"(distinct checksum columns {res.distinct_column_pairs}), traditional corrected "
            f"{res.traditional_corrected}; uncorrectable ratio {res.coverage_ratio:.2f} (>= 7)")


def test_06_rowmax_perturbation_cancels(capsys):
    worst = 0.0
    for t in range(200):
        rng = make_rng([6, t])
        Q, K, V = random_qkv(CFG, rng)
        deltas = rng.uniform(-4, 4, (CFG.num_blocks, CFG.num_blocks, CFG.block)).astype(np.float32)
        ref = flash_attention(Q, K, V, CFG)
        out = flash_attention(Q, K, V, CFG,
                              rowmax_hook=lambda i, j, m: perturb_rowmax(m, deltas[i, j]))
        worst = max(worst, float(np.abs(out - ref).max() / np.abs(ref).max()))
    verdict(capsys, 6, worst <= 1e-2, f"max relative deviation {worst:.2e} over 200 trials, |delta| <= 4")


def test_07a_rowsum_bounds_fault_free(capsys):
    violations = 0
    for t in range(1000):
        Q, K, V = random_qkv(CFG, make_rng([7, t]))
        m, l, bm = flash_softmax_stats(Q, K, CFG)
        hist = RowmaxHistory([bm[:, k] for k in range(bm.shape[1])], m)
        lower = hist.lower_bound()
        violations += int(((l < lower) | (l > CFG.seq_len)).sum())
    verdict(capsys, "7a", violations == 0, f"{violations} rows outside [lower bound, N] in 1000 trials")


def test_07b_rowsum_faults_out_of_range(capsys, calibrated):
    n = CFG.num_blocks
    out_of_range = detected = argmax_ok = 0
    for t in range(600):
        rng = make_rng([71, t])
        Q, K, V = random_qkv(CFG, rng)
        i, row, bit = int(rng.integers(n)), int(rng.integers(CFG.block)), int(rng.integers(32))
        m, l, bm = flash_softmax_stats(Q, K, CFG)
        r = i * CFG.block + row
        bad = float(flip_bit(l[r], 32, bit))
        lower = float(np.exp(bm[r] - m[r]).sum(dtype=np.float32))
        if np.isfinite(bad) and lower <= bad <= CFG.seq_len:
            continue
        out_of_range += 1
        plan = FaultPlan([FaultSpec(Site.REDUCE_SUM, i, n - 1, row, 0, bit)])
        # Range restriction alone, without duplicate computation of the rowsum.
        O, rep = efta_forward(Q, K, V, CFG, calibrated, FTMode.EFTA_OPTIMIZED, plan, strict=False)
        detected += any(s.site.startswith("rowsum") for s in rep.stages)
        clean = flash_attention(Q, K, V, CFG)
        argmax_ok += bool(np.array_equal(np.argmax(O, axis=1), np.argmax(clean, axis=1)))
    ok = out_of_range > 0 and detected == out_of_range and argmax_ok >= 0.99 * out_of_range
    verdict(capsys, "7b", ok, f"{detected}/{out_of_range} out-of-range rowsum faults detected; "
                              f"argmax preserved in {argmax_ok}/{out_of_range}")


def test_08_overhead_accounting(capsys):
    cfg = AttnConfig(128, 64, 64, 8)
    c = Counters()
    thr = calibrate_thresholds(cfg, 100, 2.0, seed=8)
    efta_forward(*random_qkv(cfg, make_rng(8)), cfg, thr, FTMode.EFTA_OPTIMIZED, counters=c)
    rep = overhead_report(c, cfg, FTMode.EFTA_OPTIMIZED)
    m = rep["measured"]
    ok = rep["matches"] and m["gemm1_c1"] == m["gemm1_c2"] == rep["predicted"]["gemm1_c1"]
    verdict(capsys, 8, ok, f"GEMM I per checksum {m['gemm1_c1']} (closed form {cfg.stride}/{cfg.block}), "
                           f"GEMM II per checksum {m['gemm2_c1']} (closed form {cfg.stride}/{cfg.head_dim})")


def test_09_memory_traffic(capsys):
    dec, fused = [], []
    for N in (512, 1024):
        cfg = AttnConfig(N, 64, 64, 8)
        Q, K, V = random_qkv(cfg, make_rng(9))
        thr = calibrate_thresholds(AttnConfig(128, 64, 64, 8), 100, 2.0, seed=9, mode="decoupled")
        _, rd = decoupled_ft_forward(Q, K, V, cfg, thr)
        _, rf = efta_forward(Q, K, V, cfg, thr, FTMode.EFTA_OPTIMIZED, verify=False)
        dec.append(rd.counters.hbm_intermediate)
        fused.append(rf.counters.hbm_intermediate)
    ratio = dec[1] / dec[0]
    ok = dec[1] == 4 * dec[0] and fused == [0, 0]
    verdict(capsys, 9, ok, f"decoupled intermediate {dec[0]} -> {dec[1]} ({ratio:.3f}x); fused {fused}")


def test_10_threshold_tradeoff_shape(capsys):
    assert (REFERENCE_ABFT_THRESHOLD, REFERENCE_EXP_REL_THRESHOLD) == (0.48, 7e-6)
    assert (REFERENCE_STRIDED_COVERAGE, REFERENCE_TRADITIONAL_COVERAGE) == (0.925, 0.48)
    curves = {}
    ok = True
    for kind in ("abft", "exp"):
        pts = threshold_sweep(CFG, np.logspace(-8, 1, 10), 300, seed=10, kind=kind)
        det = [p.detection_rate for p in pts]
        fa = [p.false_alarm_rate for p in pts]
        ok &= is_non_increasing(det) and is_non_increasing(fa)
        ok &= fa[0] > fa[-1]
        curves[kind] = (det[0], det[-1], fa[0], fa[-1])
    verdict(capsys, 10, ok, "both curves monotone non-increasing; (det first, det last, fa first, fa last) "
                            + ", ".join(f"{k}={tuple(round(x, 3) for x in v)}" for k, v in curves.items()))
