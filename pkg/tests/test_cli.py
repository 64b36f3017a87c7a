import csv
import json
from pathlib import Path

import pytest

from torus_qve import cli

MANIFESTS = sorted((Path(__file__).resolve().parent.parent / "manifests").glob("*.json"))


def write(tmp_path, m, name="m.json"):
    p = tmp_path / name
    p.write_text(json.dumps(m))
    return p


def base(**kw):
    m = {"schema": cli.SCHEMA_VERSION, "kernel": {"preset": "delta"}, "sizes": [32], "analyses": []}
    m.update(kw)
    return m


def test_list_presets(capsys):
    assert cli.main(["list-presets"]) == 0
    out = capsys.readouterr().out
    for name in ("delta", "factorized_exp", "power_law", "custom_table"):
        assert name in out


@pytest.mark.parametrize("path", MANIFESTS, ids=lambda p: p.stem)
def test_shipped_manifests_validate(path):
    assert cli.main(["validate", str(path)]) == 0


def test_validate_gamma_diagnostic(tmp_path, capsys):
    p = write(tmp_path, base(solver={"gamma": 0.0}))
    assert cli.main(["validate", str(p)]) == 2
    assert "tolerance exponent γ ∈ (0,1)" in capsys.readouterr().err


def test_schema_error_names_path(tmp_path, capsys):
    p = write(tmp_path, base(sizes=[1]))
    assert cli.main(["validate", str(p)]) == 2
    assert "sizes/0" in capsys.readouterr().err


def test_locallaw_with_zero_count_names_sample_stage(tmp_path, capsys):
    p = write(tmp_path, base(analyses=["locallaw"], sampling={"count": 0, "seed": 1}))
    assert cli.main(["run", str(p), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "sample" in err and "locallaw" in err


def test_plan_orders_prerequisites():
    plan = cli.resolve_plan(["universality", "locallaw"])
    for a, pre in cli.PREREQUISITES.items():
        if a in plan:
            for p in pre:
                assert plan.index(p) < plan.index(a)
    assert set(plan) == {"qve", "density", "sample", "locallaw", "universality"}


def test_manifest_roundtrip(tmp_path):
    m = base(analyses=["qve"], solver={"tau": {"start": -1, "stop": 1, "step": 0.5}})
    assert json.loads(json.dumps(m)) == m
    p = write(tmp_path, m)
    assert cli.load_manifest(p) == m


def test_empty_analyses_bundle(tmp_path):
    p = write(tmp_path, base(name="empty"))
    assert cli.main(["run", str(p), "--out", str(tmp_path / "out")]) == 0
    d = tmp_path / "out" / "empty"
    assert json.loads((d / "manifest.json").read_text())["name"] == "empty"
    assert json.loads((d / "summary.json").read_text())["checks"] == []


def test_semicircle_bundle(tmp_path):
    m = base(name="sc", sizes=[256], analyses=["qve", "density"], solver={"tau": {"start": -3, "stop": 3, "step": 0.01}})
    p = write(tmp_path, m)
    assert cli.main(["run", str(p), "--out", str(tmp_path)]) == 0
    d = tmp_path / "sc"
    summary = json.loads((d / "summary.json").read_text())
    assert summary["passed"]
    res = summary["results"][0]
    assert res["rho0"] == pytest.approx(1 / 3.141592653589793, abs=1e-4)
    assert res["beta"] == pytest.approx(2.0, abs=0.01)
    rows = list(csv.DictReader(open(d / "N256" / "density.csv")))
    zero = [r for r in rows if abs(float(r["tau"])) < 1e-9][0]
    assert float(zero["rho"]) == pytest.approx(0.3183, abs=1e-4)
    prov = json.loads((d / "provenance.json").read_text())
    assert {"seed", "version", "started", "finished"} <= set(prov)


def test_rerun_reproduces_csv_exactly(tmp_path, monkeypatch):
    m = base(name="rep", sizes=[16], analyses=["delocalization", "locallaw"], sampling={"count": 4, "seed": 2}, solver={"gamma": 0.5})
    p = write(tmp_path, m)
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "a"))
    assert cli.main(["run", str(p)]) in (0, 1)
    assert cli.main(["run", str(p), "--out", str(tmp_path / "b")]) in (0, 1)
    for f in ("locallaw.csv", "delocalization.csv"):
        assert (tmp_path / "a" / "rep" / "N16" / f).read_bytes() == (tmp_path / "b" / "rep" / "N16" / f).read_bytes()


def test_seed_override_recorded(tmp_path):
    m = base(name="seeded", sizes=[16], analyses=["sample"], sampling={"count": 2, "seed": 1})
    p = write(tmp_path, m)
    assert cli.main(["run", str(p), "--out", str(tmp_path), "--seed", "99"]) == 0
    assert json.loads((tmp_path / "seeded" / "manifest.json").read_text())["sampling"]["seed"] == 99
    assert json.loads((tmp_path / "seeded" / "provenance.json").read_text())["seed"] == 99


def test_failed_check_exit_one(tmp_path, capsys):
    # a Bochner-violating custom table fails the certify check
    N = 8
    a = [[[0.0, 0.0] for _ in range(N)] for _ in range(N)]
    a[0][0] = [1.0, 0.0]
    for x, y in ((1, 0), (N - 1, 0), (0, 1), (0, N - 1)):
        a[x][y] = [0.5, 0.0]
    m = base(name="bad", sizes=[N], kernel={"preset": "custom_table", "params": {"a": a}}, analyses=["certify"])
    p = write(tmp_path, m)
    assert cli.main(["run", str(p), "--out", str(tmp_path)]) == 1
    assert "certify.bochner" in capsys.readouterr().err


def test_jobs_flag_matches_serial(tmp_path):
    m = base(name="par", sizes=[16, 32], analyses=["qprofile"])
    p = write(tmp_path, m)
    assert cli.main(["run", str(p), "--out", str(tmp_path / "s")]) == 0
    assert cli.main(["run", str(p), "--out", str(tmp_path / "p"), "--jobs", "2"]) == 0
    for N in (16, 32):
        f = Path("par") / f"N{N}" / "qprofile.csv"
        assert (tmp_path / "s" / f).read_bytes() == (tmp_path / "p" / f).read_bytes()


def test_unreadable_manifest(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert cli.main(["validate", str(p)]) == 2
