"""Command-line driver for protected-attention fault-injection campaigns.

Examples::

    efta --seq-len 512 --head-dim 64 --block 64 --mode efta-opt --trials 100 --seed 7
    efta --seq-len 64 --head-dim 32 --block 16 --inject GEMM1_OUT:0:1:3:13:30
    efta --seq-len 64 --head-dim 32 --block 16 --inject random:GEMM1_OUT,EXP_OUT --out runs/a

Exit codes: 0 success, 1 when uncorrectable trials outnumber corrected plus
masked ones, 2 on configuration or I/O errors.

Thresholds: ``--eps1/--eps2/--eps-lin`` all given are used as is; otherwise
they are calibrated on ``--calibrate N`` clean runs (default 100).  Each head
is an independent attention call with its own inputs and fault draw.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from .campaign import (
    CampaignStats,
    FixedPlan,
    NoFaults,
    RandomSites,
    calibrate_thresholds,
    run_campaign,
    summary_dict,
    write_csv,
    write_json,
)
from .core_tensor import AttnConfig, ConfigError, Counters, make_rng, random_qkv
from .fault_injector import ALL_SITES, FaultPlan, FaultSpec, parse_site
from .kernel import FTMode, efta_forward, overhead_report
from .snvr_softmax import Thresholds

EXIT_OK, EXIT_UNCORRECTABLE, EXIT_CONFIG = 0, 1, 2
DEFAULT_CALIBRATION_TRIALS = 100


@dataclass
class RunManifest:
    seq_len: int = 512
    head_dim: int = 64
    block: int = 64
    stride: int = 8
    heads: int = 1
    mode: str = "efta-opt"
    trials: int = 100
    seed: int = 0
    calibrate: int | None = None
    thresholds: dict | None = None
    inject: str | None = None
    strict: bool = True
    out: str | None = None
    format: str = "csv"
    jobs: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> "RunManifest":
        self.config()
        FTMode.parse(self.mode)
        if self.heads < 1 or self.trials < 0 or self.jobs < 1:
            raise ConfigError("--heads and --jobs must be >= 1, --trials >= 0")
        if self.format not in ("csv", "json"):
            raise ConfigError("--format must be csv or json")
        if self.thresholds is not None:
            Thresholds.from_dict(self.thresholds).validate()
        if self.calibrate is not None and self.calibrate < 100:
            raise ConfigError("--calibrate needs at least 100 clean runs")
        self.plan_generator()
        return self

    def config(self) -> AttnConfig:
        return AttnConfig(self.seq_len, self.head_dim, self.block, self.stride)

    def ft_mode(self) -> FTMode:
        return FTMode.parse(self.mode)

    def plan_generator(self):
        if not self.inject:
            return NoFaults()
        if self.inject.startswith("random:"):
            names = self.inject[len("random:"):]
            if names.strip().lower() in ("", "all"):
                return RandomSites(ALL_SITES)
            return RandomSites(tuple(parse_site(n) for n in names.split(",")))
        spec = FaultSpec.from_line(self.inject, sep=":")
        plan = FaultPlan([spec]).validate(self.config())
        return FixedPlan(plan)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        data = json.loads(text)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**data)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="efta", description="Fault-injection campaigns on protected attention.")
    p.add_argument("--seq-len", type=int, default=512)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--block", type=int, default=64)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--mode", choices=[m.value for m in FTMode], default="efta-opt")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--calibrate", type=int, metavar="N", default=None,
                   help=f"calibrate thresholds on N clean runs (default {DEFAULT_CALIBRATION_TRIALS})")
    p.add_argument("--inject", default=None,
                   help="SITE:i:j:row:col:bit[:trigger] or random:<site,site,...|all>")
    p.add_argument("--eps1", type=float, default=None, help="exp-stage threshold (log domain)")
    p.add_argument("--eps2", type=float, default=None, help="output-stage threshold")
    p.add_argument("--eps-lin", type=float, default=None, help="GEMM I threshold")
    p.add_argument("--range-only", action="store_true",
                   help="drop duplicate computation of the rescale factor and rowsum")
    p.add_argument("--out", default=None, help="directory for report files")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--manifest", default=None, help="load the run from a manifest JSON file")
    p.add_argument("--save-manifest", default=None, help="write the parsed manifest here")
    return p


def parse_args(argv=None) -> RunManifest:
    args = build_parser().parse_args(argv)
    if args.manifest:
        try:
            with open(args.manifest) as fh:
                man = RunManifest.from_json(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read manifest {args.manifest}: {exc.strerror}") from None
    else:
        eps = (args.eps1, args.eps2, args.eps_lin)
        if any(e is not None for e in eps) and not all(e is not None for e in eps):
            raise ConfigError("--eps1, --eps2 and --eps-lin must be given together")
        if all(e is not None for e in eps) and args.calibrate is not None:
            raise ConfigError("--calibrate conflicts with explicit thresholds")
        thresholds = None
        if all(e is not None for e in eps):
            thresholds = Thresholds(*eps).to_dict()
        man = RunManifest(args.seq_len, args.head_dim, args.block, args.stride, args.heads,
                          args.mode, args.trials, args.seed, args.calibrate, thresholds,
                          args.inject, not args.range_only, args.out, args.format, args.jobs)
    if args.save_manifest:
        try:
            with open(args.save_manifest, "w") as fh:
                fh.write(man.to_json() + "\n")
        except OSError as exc:
            raise ConfigError(f"cannot write manifest {args.save_manifest}: {exc.strerror}") from None
    return man


def resolve_thresholds(man: RunManifest) -> Thresholds:
    cfg, mode = man.config(), man.ft_mode()
    if man.thresholds is not None:
        return Thresholds.from_dict(man.thresholds)
    if mode is FTMode.NONE:
        return Thresholds(1.0, 1.0, 1.0, source="unused")
    n = man.calibrate or DEFAULT_CALIBRATION_TRIALS
    thr = calibrate_thresholds(cfg, n, 2.0, seed=man.seed, mode=mode)
    if thr.degenerate:
        raise ConfigError("calibration produced zero thresholds; pass --eps1/--eps2/--eps-lin")
    return thr


def execute(man: RunManifest):
    """Run calibration, the campaign for every head, and one accounting pass."""
    cfg, mode = man.config(), man.ft_mode()
    thr = resolve_thresholds(man)
    gen = man.plan_generator()
    per_head = [run_campaign(cfg, mode, gen, man.trials, thr, man.seed, jobs=man.jobs,
                             strict=man.strict, head=h) for h in range(man.heads)]
    stats = CampaignStats.from_records([r for st in per_head for r in st.records])
    counters = Counters()
    Q, K, V = random_qkv(cfg, make_rng([man.seed, 0, 0]))
    efta_forward(Q, K, V, cfg, thr if mode is not FTMode.NONE else None, mode,
                 strict=man.strict, counters=counters)
    return thr, stats, overhead_report(counters, cfg, mode)


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}%"


def format_summary(man: RunManifest, thr: Thresholds, stats: CampaignStats, ovh: dict) -> str:
    inj = stats.injected
    lines = [
        f"mode={man.mode} N={man.seq_len} d={man.head_dim} B={man.block} s={man.stride} "
        f"heads={man.heads} trials={stats.trials} seed={man.seed}",
        f"thresholds eps1={thr.eps1:.3g} eps2={thr.eps2:.3g} eps_lin={thr.eps_lin:.3g} ({thr.source})",
        f"faults injected: {inj}",
        f"detection: {_pct(stats.detected / inj) if inj else 'n/a'}"
        f"  correction: {_pct(stats.corrected / inj) if inj else 'n/a'}"
        f"  masked benign: {stats.masked_benign}  uncorrectable: {stats.uncorrectable}",
        f"false alarms: {stats.false_alarms}",
        f"residual max: {stats.residual_error['max']:.3g}  argmax preserved: {_pct(stats.argmax_preserved)}",
        f"checksum-FLOP overhead: {_pct(ovh['checksum_fraction'])}",
        f"verification events: {sum(ovh['verification_events'].values())}",
        f"intermediate traffic (elements): {ovh['hbm_intermediate']}",
    ]
    return "\n".join(lines)


def write_reports(man: RunManifest, thr: Thresholds, stats: CampaignStats, ovh: dict) -> list:
    os.makedirs(man.out, exist_ok=True)
    extra = {"manifest": asdict(man),
             "overhead": {k: (str(v) if not isinstance(v, (int, float, str, bool, dict)) else v)
                          for k, v in ovh.items() if k not in ("measured", "predicted")}}
    summary = summary_dict(stats, man.config(), man.mode, thr, extra)
    paths = []
    if man.format == "csv":
        path = os.path.join(man.out, "trials.csv")
        write_csv(stats.records, path)
        paths.append(path)
    else:
        summary["stats"] = stats.to_dict(records=True)
    path = os.path.join(man.out, "summary.json")
    write_json(summary, path)
    paths.append(path)
    return paths


def exit_code(stats: CampaignStats) -> int:
    if stats.uncorrectable > stats.corrected + stats.masked_benign:
        return EXIT_UNCORRECTABLE
    return EXIT_OK


def main(argv=None) -> int:
    try:
        man = parse_args(argv)
        thr, stats, ovh = execute(man)
    except ConfigError as exc:
        print(f"efta: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(format_summary(man, thr, stats, ovh))
    if man.out:
        try:
            for path in write_reports(man, thr, stats, ovh):
                print(f"wrote {path}")
        except OSError as exc:
            print(f"efta: error: cannot write {exc.filename}: {exc.strerror}", file=sys.stderr)
            return EXIT_CONFIG
    return exit_code(stats)


if __name__ == "__main__":
    sys.exit(main())
