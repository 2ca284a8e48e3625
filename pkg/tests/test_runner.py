"""Config validation, experiment drivers, determinism, CLI exit codes."""

import json
import os

import numpy as np
import pytest

from homolab.cli import main as cli_main
from homolab.errors import ConfigParseError
from homolab.runner import parse_config, run, validate

EXPAND_CFG = """
[experiment]
kind = expand
seed = 11

[field]
model = laminate
d = 2
L = 1
mid = 1.5
amp = 0.4

[grid]
domain = 1.0
m = 8
tol = 1e-10

[ladder]
eps = 0.25, 0.125
dt = 0.002

[probes]
t = 0.25
x = 0.31 0.57

[datum]
kind = cosine
modes = 1.0, 1 0, 0.0

[ensemble]
n_env = 1
"""

HOMOGENIZE_CFG = """
[experiment]
kind = homogenize
seed = 5

[field]
model = constant
d = 2
value = 2.25

[grid]
n = 16
with_flux = true

[ensemble]
n_env = 2
"""


def test_validate_minimal_config_clean():
    cfg = parse_config(EXPAND_CFG)
    assert validate(cfg) == []


def test_validate_missing_seed():
    text = EXPAND_CFG.replace("seed = 11\n", "")
    problems = validate(parse_config(text))
    assert len(problems) == 1
    assert "experiment.seed" in problems[0]


def test_validate_unknown_kind_lists_allowed():
    text = EXPAND_CFG.replace("kind = expand", "kind = mystery")
    problems = validate(parse_config(text))
    assert any("mystery" in p and "homogenize" in p for p in problems)


def test_validate_incommensurate_eps_names_keys():
    text = EXPAND_CFG.replace("eps = 0.25, 0.125", "eps = 0.3")
    problems = validate(parse_config(text))
    assert any("ladder.eps" in p and "grid.m" in p for p in problems)


def test_parse_error_carries_line():
    with pytest.raises(ConfigParseError):
        parse_config("not a section header\n[experiment]\n")


def test_run_homogenize_constant_field(tmp_path):
    cfg = parse_config(HOMOGENIZE_CFG)
    manifest = run(cfg, out_dir=str(tmp_path))
    summary = json.loads((tmp_path / "summary.json").read_text())
    A = np.array(summary["A_bar_mean"])
    np.testing.assert_allclose(A, 2.25 * np.eye(2), atol=1e-12)
    assert summary["max_abs_c"] == 0.0
    assert (tmp_path / "manifest.json").exists()
    assert (tmp_path / "homogenize.png").exists()
    assert "homogenize.csv" in manifest["artifacts"]
    assert len(manifest["config_hash"]) == 64


def test_run_expand_row_count_contract(tmp_path):
    cfg = parse_config(EXPAND_CFG)
    run(cfg, out_dir=str(tmp_path))
    lines = (tmp_path / "expand.csv").read_text().strip().split("\n")
    # 2 eps x 1 probe x 1 env rows plus header
    assert len(lines) == 1 + 2 * 1 * 1
    assert lines[0].startswith("env,eps,t,x0,x1,u_eps,u_hom")


def test_run_deterministic_across_workers(tmp_path):
    text = EXPAND_CFG.replace("n_env = 1", "n_env = 2").replace(
        "model = laminate", "model = periodic-smooth").replace("mid = 1.5\namp = 0.4\n", "")
    out1, out2 = tmp_path / "w1", tmp_path / "w2"
    run(parse_config(text), out_dir=str(out1), workers=1)
    run(parse_config(text), out_dir=str(out2), workers=2)
    assert (out1 / "expand.csv").read_bytes() == (out2 / "expand.csv").read_bytes()
    m1 = json.loads((out1 / "manifest.json").read_text())
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert m1["config_hash"] == m2["config_hash"]


def test_run_rerun_bit_identical(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    run(parse_config(EXPAND_CFG), out_dir=str(out1))
    run(parse_config(EXPAND_CFG), out_dir=str(out2))
    assert (out1 / "expand.csv").read_bytes() == (out2 / "expand.csv").read_bytes()
    assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()


def test_cli_roundtrip(tmp_path):
    cfg_path = tmp_path / "run.ini"
    cfg_path.write_text(HOMOGENIZE_CFG)
    out = tmp_path / "out"
    rc = cli_main(["homogenize", "--config", str(cfg_path), "--out", str(out)])
    assert rc == 0
    assert (out / "manifest.json").exists()


def test_cli_validation_exit_code(tmp_path):
    cfg_path = tmp_path / "bad.ini"
    cfg_path.write_text(HOMOGENIZE_CFG.replace("seed = 5", "seed = nope"))
    rc = cli_main(["homogenize", "--config", str(cfg_path), "--out", str(tmp_path / "o")])
    assert rc == 2


def test_cli_kind_mismatch(tmp_path):
    cfg_path = tmp_path / "run.ini"
    cfg_path.write_text(HOMOGENIZE_CFG)
    rc = cli_main(["expand", "--config", str(cfg_path), "--out", str(tmp_path / "o")])
    assert rc == 2


def test_cli_missing_config():
    rc = cli_main(["homogenize", "--config", "/nonexistent/x.ini"])
    assert rc == 2


def test_run_decay_and_decorr_smoke(tmp_path):
    decay_cfg = """
[experiment]
kind = decay
seed = 3

[field]
model = poisson-bump
d = 2
L = 4
intensity = 1.0

[ensemble]
n_env = 3
n_paths = 8
times = 0.5, 1.0, 2.0, 4.0
dt = 0.05
grid_n_per_unit = 4
window = 0.5 4.0
"""
    out = tmp_path / "decay"
    run(parse_config(decay_cfg), out_dir=str(out))
    assert (out / "decay.csv").exists() and (out / "decay.png").exists()

    decorr_cfg = """
[experiment]
kind = decorr
seed = 4

[field]
model = poisson-bump
d = 2
L = 8
intensity = 1.0

[ensemble]
n_env = 3
lags = 0.25 0.5 1.0 1.5 2.0
grid_n_per_unit = 4
window = 0.25 2.0
"""
    out2 = tmp_path / "decorr"
    run(parse_config(decorr_cfg), out_dir=str(out2))
    summary = json.loads((out2 / "summary.json").read_text())
    assert "exponent" in summary


def test_run_conv_lemma_smoke(tmp_path):
    cfg = """
[experiment]
kind = conv-lemma
seed = 1

[lemma]
cases = 3 2
x = 8, 12, 16, 24
radius = 50
"""
    out = tmp_path / "conv"
    run(parse_config(cfg), out_dir=str(out))
    lines = (out / "conv_lemma.csv").read_text().strip().split("\n")
    assert len(lines) == 5
