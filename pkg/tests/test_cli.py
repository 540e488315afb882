import json

import pytest

from revkam.cli import (DEFAULTS, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, EXIT_PRECONDITION,
                        EXIT_VALIDATION, config_hash, load_config, main, strip_header)

SMALL_CFG = {"lattice": {"d": 1, "radius": 3, "tangential1": [[0], [1]],
                         "tangential2": [[0], [-1]]},
             "resonance": {"samples": 200, "gammas": [0.0, 1e-1, 1e-2, 1e-3]},
             "sim": {"T": 5.0, "stability_T": 10.0}}


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL_CFG))
    return str(p)


def _write(tmp_path, name, cfg):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_defaults_printed(capsys):
    assert main(["defaults"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out) == DEFAULTS


def test_config_errors(tmp_path):
    assert main(["build", "-c", _write(tmp_path, "a.json", {"kam": {"tau": 1}})]) == EXIT_CONFIG
    assert main(["build", "-c", _write(tmp_path, "b.json", {"nope": 1})]) == EXIT_CONFIG
    assert main(["build", "-c", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    bad = {"resonance": {"samples": 10}}
    assert main(["measure", "-c", _write(tmp_path, "c.json", bad)]) == EXIT_CONFIG
    with pytest.raises(ValueError):
        load_config(_write(tmp_path, "d.json", {"sim": {"order": 3}}))


def test_config_hash_depends_on_content():
    a = load_config(None)
    b = json.loads(json.dumps(a))
    assert config_hash(a) == config_hash(b)
    b["seed"] = 1
    assert config_hash(a) != config_hash(b)


def test_iterate_validate_pipeline(small, tmp_path, capsys):
    out = str(tmp_path / "run")
    assert main(["iterate", "-c", small, "-o", out]) == EXIT_OK
    norms = (tmp_path / "run" / "norms.csv").read_text()
    assert norms.startswith("# config_hash: ")
    assert norms.splitlines()[1].startswith("# manifest: ")
    rows = strip_header(norms).splitlines()
    assert rows[0] == "zeta_index,nu,eps" and len(rows) == 5
    eps = [float(r.split(",")[2]) for r in rows[1:]]
    assert all(b < a for a, b in zip(eps, eps[1:]))
    assert (tmp_path / "run" / "embedding.json").exists()
    assert main(["validate", "-c", small, "-o", out]) == EXIT_OK
    diag = strip_header((tmp_path / "run" / "diagnostics.csv").read_text()).splitlines()
    assert diag[0] == "quantity,value,expected,deviation,passed"
    assert any(r.startswith("max_growth_exponent") for r in diag)


def test_outputs_are_byte_identical(small, tmp_path):
    texts = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert main(["iterate", "-c", small, "-o", out]) == EXIT_OK
        assert main(["measure", "-c", small, "-o", out]) == EXIT_OK
        texts.append([(tmp_path / name / f).read_bytes()
                      for f in ("norms.csv", "steps.csv", "scaling.csv", "embedding.json")])
    assert texts[0] == texts[1]


def test_measure_scaling_file(small, tmp_path):
    out = tmp_path / "m"
    assert main(["measure", "-c", small, "-o", str(out), "--seed", "1"]) == EXIT_OK
    rows = strip_header((out / "scaling.csv").read_text()).splitlines()
    assert rows[0].startswith("gamma,fraction,ci_lo,ci_hi")
    assert len(rows) == 1 + 4 + 1
    assert rows[1].split(",")[1] == "0.0"
    assert rows[-1].startswith("fit_exponent,")


def test_build_refuses_failed_assumption(small, tmp_path):
    # the d = 1 test config violates the regularity margin at the default amplitude
    assert main(["build", "-c", small, "-o", str(tmp_path / "b")]) == EXIT_PRECONDITION
    assert (tmp_path / "b" / "assumptions.csv").exists()


def test_numerical_failure_exit(tmp_path):
    cfg = dict(SMALL_CFG, domain={"s": 0.05})
    assert main(["iterate", "-c", _write(tmp_path, "big.json", cfg),
                 "-o", str(tmp_path / "x")]) == EXIT_NUMERICAL


def test_negative_control_fails_validation(small, tmp_path):
    out = str(tmp_path / "n")
    assert main(["validate", "-c", small, "-o", out, "--random-state", "0",
                 "--skip-stability"]) == EXIT_VALIDATION


def test_dump_load_roundtrip(small, tmp_path, capsys):
    f = str(tmp_path / "field.txt")
    assert main(["dump", "-c", small, f]) == EXIT_OK
    capsys.readouterr()
    assert main(["load", "-c", small, f]) == EXIT_OK
    text = capsys.readouterr().out
    assert "momentum_violations 0" in text
    assert "reversibility_defect 0.000e+00" in text
    (tmp_path / "junk.txt").write_text("not a field\n")
    assert main(["load", "-c", small, str(tmp_path / "junk.txt")]) == EXIT_CONFIG
