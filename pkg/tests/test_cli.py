import json
import subprocess
import sys
from pathlib import Path

import jsonschema
import pytest

from afree import __version__
from afree.cli import (
    SpecError,
    apply_override,
    load_schema,
    main,
    run,
    spec_hash,
    validate_spec,
)
from afree.fieldio import load_field

RUNSPECS = Path(__file__).resolve().parents[1] / "runspecs"
CURL22 = {"tag": "curl", "d": 2, "m": 2}


def spec_file(tmp_path, spec, name="spec.json"):
    path = tmp_path / name
    path.write_text(json.dumps(spec))
    return path


def garding_spec(**extra):
    spec = {"command": "garding", "operator": CURL22, "grid": {"d": 2, "n": 9},
            "density": {"name": "quadratic", "params": {"N": 4}}, "seed": 1,
            "params": {"n_fields": 6, "band": 3}}
    spec.update(extra)
    return spec


def test_schema_is_valid_draft():
    jsonschema.Draft202012Validator.check_schema(load_schema())


@pytest.mark.parametrize("path", sorted(RUNSPECS.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_runspecs_validate(path):
    validate_spec(json.loads(path.read_text()))


def test_validation_messages():
    with pytest.raises(SpecError, match="n must be odd"):
        validate_spec(garding_spec(grid={"d": 2, "n": 8}))
    with pytest.raises(SpecError, match="bogus"):
        validate_spec(garding_spec(bogus=1))
    with pytest.raises(SpecError, match="/params"):
        validate_spec(garding_spec(params={"n_feilds": 3}))
    with pytest.raises(SpecError, match="/command"):
        validate_spec({"command": "plot"})


def test_apply_override():
    spec = garding_spec()
    apply_override(spec, "params.band=2")
    apply_override(spec, "grid.n=11")
    apply_override(spec, "density.name=frobenius_det")
    assert spec["params"]["band"] == 2 and spec["grid"]["n"] == 11
    assert spec["density"]["name"] == "frobenius_det"
    with pytest.raises(SpecError):
        apply_override(spec, "novalue")
    with pytest.raises(SpecError):
        apply_override(spec, "seed.x=1")


def test_spec_hash_ignores_key_order():
    a = {"command": "symbol", "seed": 1}
    assert spec_hash(a) == spec_hash({"seed": 1, "command": "symbol"})
    assert spec_hash(a) != spec_hash({"command": "symbol", "seed": 2})


def test_garding_pass(tmp_path):
    code = main(["--spec", str(spec_file(tmp_path, garding_spec())), "--out",
                 str(tmp_path / "o"), "--quiet"])
    assert code == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["status"] == "pass"
    assert report["result"]["C1_fit"] == 0.0
    assert report["result"]["C0_fit"] == pytest.approx(4.0, abs=1e-8)
    assert report["toolkit_version"] == __version__
    assert report["spec_sha256"] == spec_hash(garding_spec())
    assert (tmp_path / "o" / "rows.csv").read_text().startswith("id,lhs,excess,penalty")
    assert "status=pass" in (tmp_path / "o" / "summary.txt").read_text()


def test_aqc_violation_writes_certificate(tmp_path):
    spec = json.loads((RUNSPECS / "aqc_negative.json").read_text())
    code = run(spec, tmp_path / "o", quiet=True)
    assert code == 2
    cert = load_field(tmp_path / "o" / "certificate.fld")
    assert cert.N == 4 and cert.grid.n == 9
    assert json.loads((tmp_path / "o" / "report.json").read_text())["status"] == "violation"


def test_even_grid_is_an_error(tmp_path, capsys):
    path = spec_file(tmp_path, garding_spec())
    code = main(["--spec", str(path), "--set", "grid.n=8", "--out", str(tmp_path / "o")])
    assert code == 1
    assert "n must be odd" in capsys.readouterr().err
    assert not (tmp_path / "o" / "report.json").exists()


def test_errors_exit_one(tmp_path):
    assert main(["--spec", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["--spec", str(bad)]) == 1
    assert run({"command": "garding", "grid": {"d": 2, "n": 9}}, tmp_path / "o", True) == 1
    spec = garding_spec(density={"name": "no_such_density"})
    assert run(spec, tmp_path / "o", True) == 1


def test_dynamics_cfl_violation_is_an_error(tmp_path):
    spec = json.loads((RUNSPECS / "dynamics_psystem.json").read_text())
    spec["params"]["dt"] = 0.5
    assert run(spec, tmp_path / "o", True) == 1


@pytest.mark.parametrize("command,extra", [
    ("symbol", {"params": {"n_samples": 200}}),
    ("wavecone", {"params": {"n_dirs": 16}, "density": {"name": "frobenius_det",
                                                      "params": {"c": 1, "gamma": 4}}}),
    ("project", {"grid": {"d": 2, "n": 9}, "params": {"n_fields": 3}}),
    ("primitive", {"grid": {"d": 2, "n": 9}, "params": {"n_fields": 3}}),
    ("decompose", {"grid": {"d": 2, "n": 9}, "params": {"n_fields": 3}}),
    ("statics", {"grid": {"d": 2, "n": 9}, "density": {"name": "quadratic", "params": {"N": 4}},
                 "params": {"n_samples": 4}}),
])
def test_every_command_runs(tmp_path, command, extra):
    spec = {"command": command, "operator": CURL22, "seed": 0, **extra}
    assert run(spec, tmp_path / "o", quiet=True) == 0
    assert json.loads((tmp_path / "o" / "report.json").read_text())["command"] == command


def test_dynamics_evolve_writes_final_state(tmp_path):
    spec = {"command": "dynamics", "grid": {"d": 2, "n": 9},
            "system": {"tag": "elasticity2d"}, "seed": 0,
            "params": {"dt": 0.002, "T": 0.02, "stride": 5}}
    assert run(spec, tmp_path / "o", quiet=True) == 0
    assert load_field(tmp_path / "o" / "final_state.fld").N == 6
    spec["write_fields"] = False
    assert run(spec, tmp_path / "p", quiet=True) == 0
    assert not (tmp_path / "p" / "final_state.fld").exists()


@pytest.mark.parametrize("name", ["garding_quadratic", "dynamics_psystem", "statics_quadratic"])
def test_csv_byte_identical_on_repeat(tmp_path, name):
    spec = json.loads((RUNSPECS / f"{name}.json").read_text())
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        run(spec, o, quiet=True)
    for fname in ("rows.csv", "report.json", "summary.txt"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()


def test_seed_flag_changes_hash(tmp_path):
    path = spec_file(tmp_path, garding_spec())
    main(["--spec", str(path), "--out", str(tmp_path / "a"), "--quiet"])
    main(["--spec", str(path), "--out", str(tmp_path / "b"), "--seed", "5", "--quiet"])
    ra = json.loads((tmp_path / "a" / "report.json").read_text())
    rb = json.loads((tmp_path / "b" / "report.json").read_text())
    assert rb["spec"]["seed"] == 5 and ra["spec_sha256"] != rb["spec_sha256"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "afree", "--version"],
                          capture_output=True, text=True, check=True)
    assert __version__ in proc.stdout
