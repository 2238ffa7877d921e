import re
import subprocess
import sys

import numpy as np
import pytest

from collusion_lab.cli import build_parser, main
from collusion_lab.codes import load_matrix_csv

SUBCOMMANDS = ("gen", "attack", "detect", "bounds", "experiment", "reproduce")


def subparsers():
    parser = build_parser()
    action = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    return action.choices


@pytest.mark.parametrize("name", SUBCOMMANDS)
def test_help_lists_every_flag(name, capsys):
    sub = subparsers()[name]
    flags = {opt for a in sub._actions for opt in a.option_strings if opt.startswith("--")}
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([name, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in flags:
        assert re.search(rf"{re.escape(flag)}\b", text), flag


def test_run_flags_documented():
    for name in ("experiment", "reproduce"):
        flags = {o for a in subparsers()[name]._actions for o in a.option_strings}
        assert {"--seed", "--out", "--workers", "--trials"} <= flags
    assert "--spec" in {o for a in subparsers()["experiment"]._actions for o in a.option_strings}


def test_bounds_rtf_min_coalition(capsys):
    assert main(["bounds", "lemma2", "--N", "729", "--delta", "0.1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "name,value,side,confidence,params"
    assert lines[1].startswith("lemma2_min_coalition,34,lower-bound-on-K,0.9")


def test_bounds_missing_parameter_exit_1(capsys):
    assert main(["bounds", "thm2", "--N", "10"]) == 1
    assert "error" in capsys.readouterr().err


def test_missing_seed_exit_1(tmp_path, capsys):
    assert main(["reproduce", "fig8", "--out", str(tmp_path)]) == 1
    assert "--seed" in capsys.readouterr().err
    spec = tmp_path / "s.ini"
    spec.write_text("[experiment]\nid=x\nprotocol=failure_curve\n[code]\nfamily=rtf\nN=5\nM=5\np=0.25\n[sweep]\nK=2\n")
    assert main(["experiment", "--spec", str(spec)]) == 1
    assert "--seed" in capsys.readouterr().err


def test_bad_arguments_exit_1():
    assert main(["bounds", "nope"]) == 1
    assert main([]) == 1


def test_missing_file_exit_2(tmp_path):
    assert main(["experiment", "--spec", str(tmp_path / "none.ini"), "--seed", "1"]) == 2


def test_invalid_spec_exit_1(tmp_path, capsys):
    spec = tmp_path / "s.ini"
    spec.write_text("[experiment]\nid=x\nprotocol=failure_curve\nsurprise=1\n[code]\nfamily=rtf\n[sweep]\nK=2\n")
    assert main(["experiment", "--spec", str(spec), "--seed", "1"]) == 1
    assert "experiment.surprise" in capsys.readouterr().err


def test_gen_attack_detect_pipeline(tmp_path):
    d = tmp_path / "rtf"
    assert main(["gen", "--family", "rtf", "--N", "30", "--M", "12", "--p", "1/3", "--seed", "4", "--out", str(d)]) == 0
    F = load_matrix_csv(d / "fingerprints.csv")
    scale = 1 / np.abs(F[F != 0]).min()
    out = tmp_path / "atk"
    rc = main(["attack", "--copies", str(d / "copies.csv"), "--coalition", ",".join(map(str, range(12))),
               "--attack", "finite", "--symbols=-1,0,1", "--scale", repr(float(scale)), "--out", str(out)])
    assert rc == 0
    host = load_matrix_csv(d / "host.csv").ravel()
    assert np.allclose(load_matrix_csv(out / "host_estimate.csv").ravel(), host, atol=1e-9)
    y = out / "y.csv"
    np.savetxt(y, host + F[:, 3])
    rc = main(["detect", "--forgery", str(y), "--code", str(d / "fingerprints.csv"), "--host", str(d / "host.csv"),
               "--detector", "focused", "--threshold", "0.9", "--out", str(tmp_path / "det")])
    assert rc == 0
    lines = (tmp_path / "det" / "accusation.csv").read_text().splitlines()
    assert lines[0] == "user,score,accused" and lines[4].endswith(",1")


def test_tardos_pipeline(tmp_path):
    d = tmp_path / "t"
    assert main(["gen", "--family", "tardos", "--K-design", "2", "--epsilon", "0.5", "--M", "10", "--host", "zero",
                 "--seed", "1", "--out", str(d)]) == 0
    assert (d / "rho.csv").exists()
    assert main(["attack", "--copies", str(d / "copies.csv"), "--coalition", "0,1,2", "--attack", "tardos",
                 "--out", str(tmp_path / "a")]) == 1
    assert main(["attack", "--copies", str(d / "copies.csv"), "--coalition", "0,1,2", "--attack", "tardos",
                 "--seed", "2", "--out", str(tmp_path / "a")]) == 0
    for attack in ("majority", "minority", "average"):
        assert main(["attack", "--copies", str(d / "copies.csv"), "--coalition", "0,1", "--attack", attack,
                     "--out", str(tmp_path / attack)]) == 0
    assert main(["detect", "--forgery", str(tmp_path / "majority" / "forgery.csv"), "--code",
                 str(d / "fingerprints.csv"), "--detector", "tardos", "--rho", str(d / "rho.csv"),
                 "--K-design", "2", "--epsilon", "0.5", "--out", str(tmp_path / "det")]) == 0


def test_gen_other_families(tmp_path):
    assert main(["gen", "--family", "etf", "--h", "3", "--n", "7", "--m0", "4", "--out", str(tmp_path / "e")]) == 0
    assert main(["gen", "--family", "cwc", "--N", "20", "--M", "5", "--t", "pi/1000", "--seed", "1",
                 "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "p.csv").exists()
    assert main(["gen", "--family", "gaussian", "--N", "20", "--M", "5", "--seed", "1",
                 "--out", str(tmp_path / "g")]) == 0
    assert main(["attack", "--copies", str(tmp_path / "g" / "copies.csv"), "--coalition", "0,1,2",
                 "--attack", "gaussian", "--seed", "3", "--out", str(tmp_path / "ga")]) == 0
    assert main(["attack", "--copies", str(tmp_path / "c" / "copies.csv"), "--coalition", "0,1,2,3,4",
                 "--attack", "cwc", "--seed", "3", "--out", str(tmp_path / "ca")]) == 0


def test_reproduce_writes_only_under_out(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    out = tmp_path / "o"
    assert main(["reproduce", "fig8", "--seed", "7", "--trials", "2", "--workers", "1", "--out", str(out)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["o"]
    assert sorted(p.name for p in out.iterdir()) == ["fig8_tardos_fraction_summary.csv",
                                                    "fig8_tardos_fraction_trials.csv"]


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "collusion_lab", "bounds", "thm1", "--N", "195", "--delta", "0.1"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and ",18," in r.stdout
