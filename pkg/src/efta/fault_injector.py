"""Deterministic single-bit-flip injection at attention pipeline sites.

Faults hit computed values at stage boundaries (after the operation that
produced them).  Memory and interconnect faults are out of the model: ECC and
the message layer are assumed to handle those.

Plan text format, one spec per line (``#`` starts a comment)::

    site,i,j,row,col,bit,trigger
    GEMM1_OUT,0,1,3,13,30,1
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np

from .core_tensor import AttnConfig, ConfigError, F32, make_rng, quantize_half


class Site(Enum):
    GEMM1_OUT = "GEMM1_OUT"
    SUB_MAX = "SUB_MAX"
    EXP_OUT = "EXP_OUT"
    REDUCE_MAX = "REDUCE_MAX"
    REDUCE_SUM = "REDUCE_SUM"
    RESCALE_FACTOR = "RESCALE_FACTOR"
    GEMM2_ACC = "GEMM2_ACC"
    NORMALIZE_OUT = "NORMALIZE_OUT"


ALL_SITES = tuple(Site)
# Every site carries a float32 compute result.
SITE_WIDTH = {site: 32 for site in Site}
SCORE_SITES = {Site.GEMM1_OUT, Site.SUB_MAX, Site.EXP_OUT}
VECTOR_SITES = {Site.REDUCE_MAX, Site.REDUCE_SUM, Site.RESCALE_FACTOR}
OUTPUT_SITES = {Site.GEMM2_ACC, Site.NORMALIZE_OUT}


def parse_site(name) -> Site:
    if isinstance(name, Site):
        return name
    try:
        return Site[str(name).strip().upper()]
    except KeyError:
        raise ConfigError(f"unknown fault site {name!r}; choose from "
                          f"{', '.join(s.name for s in Site)}") from None


def site_shape(site: Site, cfg: AttnConfig) -> tuple[int, int]:
    if site in SCORE_SITES:
        return cfg.block, cfg.block
    if site in VECTOR_SITES:
        return cfg.block, 1
    return cfg.block, cfg.head_dim


def flip_bit(x, width: int, bit: int) -> np.float32:
    """XOR one bit of the binary16/binary32 image of ``x``."""
    if width not in (16, 32):
        raise ConfigError(f"width must be 16 or 32, got {width}")
    if not 0 <= bit < width:
        raise ConfigError(f"bit {bit} out of range for width {width}")
    if width == 32:
        u = np.array([x], dtype=F32).view(np.uint32)
        u ^= np.uint32(1 << bit)
        return u.view(F32)[0]
    h = np.array([quantize_half(x)], dtype=F32).astype(np.float16).view(np.uint16)
    h ^= np.uint16(1 << bit)
    return F32(h.view(np.float16)[0])


@dataclass(frozen=True)
class FaultSpec:
    site: Site
    i: int
    j: int
    row: int
    col: int
    bit: int
    trigger: int = 1

    def __post_init__(self):
        object.__setattr__(self, "site", parse_site(self.site))
        width = SITE_WIDTH[self.site]
        if not 0 <= self.bit < width:
            raise ConfigError(f"bit {self.bit} out of range for {width}-bit site {self.site.name}")
        if self.trigger < 1:
            raise ConfigError("trigger count must be >= 1")
        if min(self.i, self.j, self.row, self.col) < 0:
            raise ConfigError("fault coordinates must be non-negative")

    @property
    def width(self) -> int:
        return SITE_WIDTH[self.site]

    def check_bounds(self, cfg: AttnConfig) -> None:
        n = cfg.num_blocks
        rows, cols = site_shape(self.site, cfg)
        if self.i >= n or self.j >= n:
            raise ConfigError(f"block ({self.i},{self.j}) outside {n}x{n} grid")
        if self.row >= rows or self.col >= cols:
            raise ConfigError(
                f"cell ({self.row},{self.col}) outside {rows}x{cols} tile of {self.site.name}")

    def to_line(self) -> str:
        return f"{self.site.name},{self.i},{self.j},{self.row},{self.col},{self.bit},{self.trigger}"

    @classmethod
    def from_line(cls, line: str, sep: str = ",") -> "FaultSpec":
        parts = [p.strip() for p in line.strip().split(sep)]
        if len(parts) not in (6, 7):
            raise ConfigError(f"fault spec needs site,i,j,row,col,bit[,trigger]: {line!r}")
        try:
            nums = [int(p) for p in parts[1:]]
        except ValueError:
            raise ConfigError(f"non-integer field in fault spec {line!r}") from None
        return cls(parse_site(parts[0]), *nums)


@dataclass
class FaultPlan:
    specs: list = field(default_factory=list)
    seed: int | None = None

    def validate(self, cfg: AttnConfig | None = None) -> "FaultPlan":
        # A row-block is one detection/correction cycle: at most one fault per cycle.
        seen = Counter(s.i for s in self.specs)
        dup = [i for i, c in seen.items() if c > 1]
        if dup:
            raise ConfigError(f"more than one fault in detection cycle (row-block) {dup[0]}")
        if cfg is not None:
            for s in self.specs:
                s.check_bounds(cfg)
        return self

    def __len__(self) -> int:
        return len(self.specs)

    def to_text(self) -> str:
        head = "# site,i,j,row,col,bit,trigger"
        if self.seed is not None:
            head += f"\n# seed={self.seed}"
        return "\n".join([head] + [s.to_line() for s in self.specs]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FaultPlan":
        specs, seed = [], None
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line[1:].strip().startswith("seed="):
                    seed = int(line[1:].strip()[5:])
                continue
            specs.append(FaultSpec.from_line(line))
        return cls(specs, seed).validate()


class Injector:
    """Runtime side of a plan: counts evaluations per (site, i, j) and flips
    the targeted bit on the ``trigger``-th one."""

    def __init__(self, plan: FaultPlan | None = None):
        self.plan = plan or FaultPlan()
        self.plan.validate()
        self._by_key: dict = {}
        for s in self.plan.specs:
            self._by_key.setdefault((s.site, s.i, s.j), []).append(s)
        self._evals: Counter = Counter()
        self.fired: list = []

    def __bool__(self) -> bool:
        return bool(self._by_key)

    def apply(self, site: Site, i: int, j: int, arr: np.ndarray) -> np.ndarray:
        key = (site, i, j)
        specs = self._by_key.get(key)
        if not specs:
            return arr
        self._evals[key] += 1
        count = self._evals[key]
        for s in specs:
            if s.trigger != count:
                continue
            if arr.ndim == 1:
                if s.row >= arr.shape[0]:
                    continue
                before = arr[s.row]
                arr[s.row] = flip_bit(before, s.width, s.bit)
                after = arr[s.row]
            else:
                if s.row >= arr.shape[0] or s.col >= arr.shape[1]:
                    continue
                before = arr[s.row, s.col]
                arr[s.row, s.col] = flip_bit(before, s.width, s.bit)
                after = arr[s.row, s.col]
            self.fired.append((s, float(before), float(after)))
        return arr


def _bits_for(site: Site, bits: Iterable[int] | None) -> list:
    if bits is None:
        return list(range(SITE_WIDTH[site]))
    out = [b for b in bits if 0 <= b < SITE_WIDTH[site]]
    if not out:
        raise ConfigError(f"no valid bit for site {site.name}")
    return out


def sample_spec(cfg: AttnConfig, sites, rng: np.random.Generator,
                bits: Iterable[int] | None = None) -> FaultSpec:
    sites = [parse_site(s) for s in sites]
    if not sites:
        raise ConfigError("empty site set")
    site = sites[int(rng.integers(len(sites)))]
    n = cfg.num_blocks
    i = int(rng.integers(n))
    j = n - 1 if site is Site.NORMALIZE_OUT else int(rng.integers(n))
    rows, cols = site_shape(site, cfg)
    row = int(rng.integers(rows))
    col = int(rng.integers(cols))
    choices = _bits_for(site, bits)
    bit = int(choices[int(rng.integers(len(choices)))])
    return FaultSpec(site, i, j, row, col, bit)


def sample_random_plan(cfg: AttnConfig, sites, seed: int,
                       bits: Iterable[int] | None = None) -> FaultPlan:
    """One uniformly drawn site, in-range block/cell and bit; deterministic per seed."""
    sites = list(sites)
    if not sites:
        raise ConfigError("empty site set")
    rng = make_rng(seed)
    return FaultPlan([sample_spec(cfg, sites, rng, bits)], seed=seed).validate(cfg)
