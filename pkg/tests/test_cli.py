import json

import pytest

from efta.cli import RunManifest, main, parse_args
from efta.core_tensor import ConfigError
from efta.fault_injector import Site

SMALL = ["--seq-len", "64", "--head-dim", "32", "--block", "16"]
EPS = ["--eps1", "4e-6", "--eps2", "3e-6", "--eps-lin", "4e-6"]


def test_medium_setting_manifest():
    man = parse_args("--seq-len 512 --head-dim 64 --block 64 --mode efta-opt --trials 100 --seed 7".split())
    assert (man.seq_len, man.head_dim, man.block, man.mode, man.trials, man.seed) == (
        512, 64, 64, "efta-opt", 100, 7)


def test_divisibility_rejected():
    with pytest.raises(ConfigError):
        parse_args("--seq-len 100 --block 64".split())
    assert main("--seq-len 100 --block 64".split()) == 2


def test_inject_syntax():
    man = parse_args(SMALL + ["--inject", "GEMM1_OUT:0:1:3:13:30"])
    spec = man.plan_generator().plan.specs[0]
    assert (spec.site, spec.i, spec.j, spec.row, spec.col, spec.bit) == (Site.GEMM1_OUT, 0, 1, 3, 13, 30)


@pytest.mark.parametrize("bad", ["GEMM1_OUT:0:1:3:13:40", "BOGUS:0:0:0:0:1", "GEMM1_OUT:9:0:0:0:1",
                                 "random:NOPE"])
def test_bad_inject_rejected(bad):
    assert main(SMALL + ["--inject", bad]) == 2


def test_unknown_flag_and_partial_eps():
    assert main(["--frobnicate"]) == 2
    assert main(SMALL + ["--eps1", "1e-5"]) == 2


def test_manifest_roundtrip(tmp_path):
    path = tmp_path / "m.json"
    man = parse_args(SMALL + EPS + ["--inject", "random:all", "--save-manifest", str(path)])
    again = parse_args(["--manifest", str(path)])
    assert again == man
    assert RunManifest.from_json(man.to_json()) == man


def test_manifest_drives_identical_run(tmp_path):
    m = tmp_path / "m.json"
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(SMALL + EPS + ["--trials", "6", "--inject", "random:all", "--out", str(a),
                               "--save-manifest", str(m)]) == 0
    data = json.loads(m.read_text())
    data["out"] = str(b)
    m.write_text(json.dumps(data))
    assert main(["--manifest", str(m)]) == 0
    assert (a / "trials.csv").read_bytes() == (b / "trials.csv").read_bytes()


def test_clean_none_mode_summary(capsys):
    assert main(SMALL + ["--mode", "none", "--trials", "2"]) == 0
    out = capsys.readouterr().out
    assert "checksum-FLOP overhead: 0.00%" in out and "faults injected: 0" in out


def test_efta_opt_has_fewer_verification_events(capsys):
    events = {}
    for mode in ("efta", "efta-opt"):
        main(SMALL + EPS + ["--mode", mode, "--trials", "1"])
        line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("verification events")][0]
        events[mode] = int(line.split(":")[1])
    assert events["efta-opt"] < events["efta"]


def test_decoupled_traffic_grows_fourfold(capsys):
    vals = []
    for n in ("512", "1024"):
        main(["--seq-len", n, "--head-dim", "64", "--block", "64", "--mode", "decoupled",
              "--trials", "0"] + EPS)
        line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("intermediate")][0]
        vals.append(int(line.split(":")[1]))
    assert vals[1] == 4 * vals[0]


def test_uncorrectable_dominated_exit_code():
    # Unprotected mode: every visible fault is uncorrectable.
    assert main(SMALL + ["--mode", "none", "--trials", "3", "--inject", "GEMM2_ACC:0:0:0:0:30"]) == 1


def test_json_format_and_heads(tmp_path):
    assert main(SMALL + EPS + ["--heads", "2", "--trials", "2", "--format", "json",
                               "--inject", "random:EXP_OUT", "--out", str(tmp_path)]) == 0
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["stats"]["trials"] == 4 and len(s["stats"]["records"]) == 4


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(SMALL + EPS + ["--trials", "1", "--out", str(blocker / "sub")]) == 2
