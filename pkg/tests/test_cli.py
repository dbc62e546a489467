import json

import pytest

from hetshadow.cli import main
from hetshadow.model import ck_model, model_to_dict


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr()


def test_verify_model_ck(tmp_path, capsys):
    code, out = run(capsys, "verify-model", "--model", "ck", "--n", "4", "--out", str(tmp_path))
    assert code == 0 and "PASS" in out.out
    assert json.loads((tmp_path / "model_report.json").read_text())["passed"]


def test_verify_model_broken_hermitian(tmp_path, capsys):
    d = model_to_dict(ck_model(3))
    d["A"][0][1] = "-2.0,0.5"
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(d))
    code, out = run(capsys, "verify-model", "--model", str(p), "--out", str(tmp_path))
    assert code == 1 and "hermitian" in out.out.splitlines()[-1]


def test_missing_model_file(tmp_path, capsys):
    code, out = run(capsys, "verify-model", "--model", str(tmp_path / "nope.json"))
    assert code == 2 and "no such file" in out.err


def test_bad_thread_setting(monkeypatch, capsys):
    monkeypatch.setenv("HETSHADOW_THREADS", "0")
    assert run(capsys, "classify")[0] == 2


def test_portrait_command(tmp_path, capsys):
    code, out = run(capsys, "portrait", "--j", "1", "--k", "2", "--out", str(tmp_path))
    assert code == 0 and "'saddle': 5" in out.out
    assert (tmp_path / "portrait_j1_k2.svg").exists() and (tmp_path / "portrait_j1_k2.csv").exists()
    assert run(capsys, "portrait", "--j", "2", "--k", "2", "--out", str(tmp_path))[0] == 2


def test_classify_command(tmp_path, capsys):
    code, out = run(capsys, "classify", "--out", str(tmp_path))
    assert code == 0
    rows = [line for line in out.out.splitlines() if line.startswith("potentially suitable")]
    assert rows == ["potentially suitable: x- <- y-*x+^2", "potentially suitable: y+ <- y-^2*x+"]
    assert (tmp_path / "classification.json").exists()


def test_enclosure_command(tmp_path, capsys):
    code, out = run(capsys, "enclosure", "--out", str(tmp_path))
    assert code == 0 and out.out.strip().endswith("PASS")
    data = json.loads((tmp_path / "enclosure.json").read_text())
    assert data["tubes"]["passed"] and data["center"]["passed"]


def test_covering_fails_at_tiny_T(tmp_path, capsys):
    code, out = run(capsys, "covering", "--T", "2", "--out", str(tmp_path))
    last = out.out.strip().splitlines()[-1]
    assert code == 1 and last.startswith("FAIL at T=2:") and "phi_T" in last
    assert json.loads((tmp_path / "chain_report.json").read_text())["passed"] is False


def test_covering_passes(tmp_path, capsys):
    code, out = run(capsys, "covering", "--T", "8", "--sigma", "0.05", "--out", str(tmp_path))
    assert code == 0 and "PASS at T=8" in out.out


@pytest.mark.slow
def test_shadow_command_three_modes(tmp_path, capsys):
    code, out = run(capsys, "shadow", "--n", "3", "--T", "8", "--sigma", "0.05", "--out", str(tmp_path))
    assert code == 0 and "dominance [1, 2, 3]" in out.out
    for name in ("masses.csv", "mass_cascade.svg", "shadow.json"):
        assert (tmp_path / name).exists()
