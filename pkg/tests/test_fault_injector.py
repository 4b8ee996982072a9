import struct
from collections import Counter

import numpy as np
import pytest

from efta import AttnConfig
from efta.core_tensor import ConfigError
from efta.fault_injector import (
    ALL_SITES, FaultPlan, FaultSpec, Injector, Site, flip_bit, parse_site,
    sample_random_plan, site_shape,
)

CFG = AttnConfig(64, 32, 16, 8)


def bits_oracle(x: float, bit: int) -> float:
    (u,) = struct.unpack("<I", struct.pack("<f", x))
    return struct.unpack("<f", struct.pack("<I", u ^ (1 << bit)))[0]


def test_sign_bit():
    assert flip_bit(1.0, 32, 31) == -1.0


@pytest.mark.parametrize("x", [1.0, 0.3, -7.25, 1e-20])
@pytest.mark.parametrize("bit", [0, 21, 22, 23, 29, 30, 31])
def test_flip_matches_bit_pattern_oracle(x, bit):
    got = flip_bit(x, 32, bit)
    want = bits_oracle(float(np.float32(x)), bit)
    assert np.float32(got).tobytes() == np.float32(want).tobytes()


def test_exponent_flip_of_one_is_huge():
    assert flip_bit(1.0, 32, 30) > 1e38 or np.isinf(flip_bit(1.0, 32, 30))
    assert flip_bit(0.5, 32, 30) > 1e37


@pytest.mark.parametrize("width,bit", [(32, 5), (16, 14), (16, 15)])
def test_flip_is_involution(width, bit):
    x = np.float32(0.75)
    assert flip_bit(flip_bit(x, width, bit), width, bit) == x


def test_half_flip_uses_16_bit_image():
    assert flip_bit(1.0, 16, 15) == -1.0
    assert flip_bit(1.0, 16, 10) == 0.5  # 0x3C00 -> 0x3800


@pytest.mark.parametrize("width,bit", [(32, 32), (16, 16), (8, 0), (32, -1)])
def test_invalid_bits(width, bit):
    with pytest.raises(ConfigError):
        flip_bit(1.0, width, bit)


def test_spec_validation():
    with pytest.raises(ConfigError):
        FaultSpec(Site.GEMM1_OUT, 0, 0, 0, 0, 32)
    with pytest.raises(ConfigError):
        FaultSpec("NOPE", 0, 0, 0, 0, 1)
    with pytest.raises(ConfigError):
        FaultSpec(Site.GEMM1_OUT, 0, 0, 0, 16, 1).check_bounds(CFG)
    FaultSpec(Site.GEMM2_ACC, 0, 0, 0, 31, 1).check_bounds(CFG)


def test_plan_text_roundtrip():
    plan = FaultPlan([FaultSpec(Site.GEMM1_OUT, 0, 1, 3, 13, 30),
                      FaultSpec(Site.REDUCE_SUM, 2, 3, 4, 0, 22, trigger=2)], seed=9)
    back = FaultPlan.from_text(plan.to_text())
    assert back.specs == plan.specs and back.seed == 9


def test_seu_rejects_two_faults_in_one_cycle():
    with pytest.raises(ConfigError):
        FaultPlan([FaultSpec(Site.GEMM1_OUT, 1, 0, 0, 0, 30),
                   FaultSpec(Site.EXP_OUT, 1, 2, 0, 0, 30)]).validate()


def test_injector_trigger_count():
    inj = Injector(FaultPlan([FaultSpec(Site.EXP_OUT, 0, 1, 0, 0, 31, trigger=2)]))
    a = np.ones((2, 2), np.float32)
    inj.apply(Site.EXP_OUT, 0, 1, a)
    assert a[0, 0] == 1.0
    inj.apply(Site.EXP_OUT, 0, 0, a)
    assert a[0, 0] == 1.0
    inj.apply(Site.EXP_OUT, 0, 1, a)
    assert a[0, 0] == -1.0 and len(inj.fired) == 1
    inj.apply(Site.EXP_OUT, 0, 1, a)
    assert a[0, 0] == -1.0


def test_injector_vector_site():
    inj = Injector(FaultPlan([FaultSpec(Site.REDUCE_MAX, 0, 0, 2, 0, 31)]))
    v = np.ones(4, np.float32)
    inj.apply(Site.REDUCE_MAX, 0, 0, v)
    assert list(v) == [1, 1, -1, 1]


def test_sample_deterministic_and_in_range():
    a = sample_random_plan(CFG, ALL_SITES, 42)
    b = sample_random_plan(CFG, ALL_SITES, 42)
    assert a.specs == b.specs
    for seed in range(200):
        spec = sample_random_plan(CFG, ALL_SITES, seed).specs[0]
        spec.check_bounds(CFG)
        if spec.site is Site.NORMALIZE_OUT:
            assert spec.j == CFG.num_blocks - 1


def test_empty_site_set():
    with pytest.raises(ConfigError):
        sample_random_plan(CFG, [], 0)


def test_site_frequencies_uniform():
    counts = Counter(sample_random_plan(CFG, ALL_SITES, s).specs[0].site for s in range(10_000))
    p = 1 / len(ALL_SITES)
    sigma = (10_000 * p * (1 - p)) ** 0.5
    for site in ALL_SITES:
        assert abs(counts[site] - 10_000 * p) <= 3 * sigma
    chi2 = sum((counts[s] - 10_000 * p) ** 2 / (10_000 * p) for s in ALL_SITES)
    assert chi2 < 24.3  # 99.9% quantile, 7 degrees of freedom


def test_parse_site_and_shapes():
    assert parse_site("gemm1_out") is Site.GEMM1_OUT
    assert site_shape(Site.REDUCE_SUM, CFG) == (16, 1)
    assert site_shape(Site.NORMALIZE_OUT, CFG) == (16, 32)
