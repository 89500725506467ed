"""Config resolution, CSV emission, and exit codes of the experiment CLI."""

from __future__ import annotations

import json
import math

import pytest

from admlmc.cli import LEVELS_HEADER, main
from admlmc.config import (
    build_experiment,
    load_config,
    manifest_for,
    parse_config_text,
    settings_hash,
)
from admlmc.core import PHASE_DIAG, fit_rates, sample_level
from admlmc.errors import ConfigurationError
from admlmc.synthetic import mu_for_target

# ------------------------------------------------------------ config parsing


def test_parse_config_basics():
    text = """
    # experiment knobs
    epsilon = 1e-3   # inline comment
    n0 = 32

    sigma_mode = sample
    """
    assert parse_config_text(text) == {
        "epsilon": "1e-3", "n0": "32", "sigma_mode": "sample",
    }


def test_parse_config_reports_line_numbers():
    with pytest.raises(ConfigurationError, match="line 2"):
        parse_config_text("a = 1\nnot a pair\n")
    with pytest.raises(ConfigurationError, match="line 3"):
        parse_config_text("a = 1\n\nb =\n")
    with pytest.raises(ConfigurationError, match="line 1"):
        parse_config_text("= 5\n")


def test_parse_config_duplicate_key():
    with pytest.raises(ConfigurationError, match="line 3: duplicate key 'a'"):
        parse_config_text("a = 1\nb = 2\na = 3\n")


def test_load_config_roundtrip(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epsilon = 2e-3\nadaptive = off\n", encoding="utf-8")
    assert load_config(str(path)) == {"epsilon": "2e-3", "adaptive": "off"}


# ------------------------------------------------------- experiment building


def test_build_nested_defaults():
    exp = build_experiment("nested", {})
    assert exp.problem_name == "nested"
    assert exp.seed == 0
    assert exp.params.adaptive is True
    assert exp.params.c == pytest.approx(3.0 / math.sqrt(16))
    assert exp.engine.epsilon == 1e-2
    assert exp.engine.m_min == 32
    assert not exp.auto_start
    # defaults are materialized so the manifest pins them
    assert exp.settings["n0"] == "16"
    assert exp.settings["sigma_mode"] == "sample"
    assert exp.settings["adaptive"] == "on"


def test_build_rejects_unknown_keys():
    with pytest.raises(ConfigurationError, match="unknown config keys: n_zero"):
        build_experiment("nested", {"n_zero": "16"})


def test_build_rejects_unknown_problem():
    with pytest.raises(ConfigurationError, match="unknown problem"):
        build_experiment("poisson", {})


def test_build_flag_overrides_win():
    exp = build_experiment("nested", {"seed": "9", "adaptive": "on"},
                           seed=4, adaptive=False)
    assert exp.seed == 4
    assert exp.settings["seed"] == "4"
    assert exp.params.adaptive is False
    assert exp.settings["adaptive"] == "off"


def test_build_start_level_auto():
    exp = build_experiment("synthetic", {"start_level": "auto"})
    assert exp.auto_start
    assert exp.engine.start_level == 0  # placeholder until selection runs
    with pytest.raises(ConfigurationError, match="start_level"):
        build_experiment("synthetic", {"start_level": "soon"})


def test_build_validates_values():
    with pytest.raises(ConfigurationError, match="seed"):
        build_experiment("nested", {"seed": "-3"})
    with pytest.raises(ConfigurationError, match="epsilon"):
        build_experiment("nested", {"epsilon": "tiny"})
    with pytest.raises(ConfigurationError, match="sigma_mode"):
        build_experiment("nested", {"sigma_mode": "frozen"})
    with pytest.raises(ConfigurationError, match="adaptive"):
        build_experiment("nested", {"adaptive": "maybe"})


def test_build_nested_sigma_constant():
    exp = build_experiment("nested", {"sigma_mode": "0.25"})
    assert exp.problem.spec.sigma_constant == 0.25


def test_build_synthetic_target():
    exp = build_experiment("synthetic", {"target_p": "0.1"})
    assert exp.constants["mu"] == pytest.approx(mu_for_target(0.1))
    assert exp.constants["truth"] == pytest.approx(0.1)


def test_build_gbm_fixed_params():
    exp = build_experiment("gbm", {"K": "0.6"})
    spec = exp.problem.spec
    assert spec.d == 1 and spec.strike == 0.6
    assert spec.a == (0.05,) and spec.b == (0.4,)
    assert 0.0 < exp.constants["truth"] < 1.0


def test_build_gbm_auto_strike_d1():
    exp = build_experiment("gbm", {"K": "auto:0.025"})
    assert exp.constants["truth"] == 0.025
    assert exp.problem.spec.strike > 0.0


def test_build_gbm_sampled_params_deterministic():
    raw = {"params_mode": "sampled", "d": "3", "rho": "0.2", "K": "0.5"}
    one = build_experiment("gbm", dict(raw), seed=11)
    two = build_experiment("gbm", dict(raw), seed=11)
    other = build_experiment("gbm", dict(raw), seed=12)
    assert len(one.constants["a"]) == 3
    assert one.constants["a"] == two.constants["a"]
    assert one.constants["a"] != other.constants["a"]
    assert one.problem.spec.rho == 0.2


def test_build_gbm_bad_modes():
    with pytest.raises(ConfigurationError, match="params_mode"):
        build_experiment("gbm", {"params_mode": "fixed:1,2"})
    with pytest.raises(ConfigurationError, match="params_mode"):
        build_experiment("gbm", {"params_mode": "random"})
    with pytest.raises(ConfigurationError, match="K"):
        build_experiment("gbm", {"K": "auto:1.5"})
    with pytest.raises(ConfigurationError, match="K"):
        build_experiment("gbm", {"K": "strike"})


def test_settings_hash_pins_content():
    base = build_experiment("nested", {})
    same = build_experiment("nested", {"n0": "16"})
    other = build_experiment("nested", {"n0": "32"})
    assert settings_hash(base.settings) == settings_hash(same.settings)
    assert settings_hash(base.settings) != settings_hash(other.settings)
    manifest = manifest_for(base)
    assert manifest.config_hash == settings_hash(base.settings)
    assert len(manifest.config_hash) == 40


# ------------------------------------------------------------- levels + rates


def run_cli(*argv: str) -> int:
    return main(list(argv))


def read_rows(path) -> list[list[str]]:
    lines = path.read_text(encoding="utf-8").splitlines()
    return [line.split() for line in lines]


def test_levels_csv_schema_and_rerun(tmp_path):
    args = ("--problem", "synthetic", "--seed", "3", "levels",
            "--first", "0", "--last", "3", "--samples", "200")
    one, two = tmp_path / "one", tmp_path / "two"
    assert run_cli("--out", str(one), *args) == 0
    assert run_cli("--out", str(two), *args) == 0

    rows = read_rows(one / "levels.csv")
    assert rows[0] == LEVELS_HEADER.split()
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3"]
    assert all(int(r[1]) == 200 for r in rows[1:])
    assert all(float(r[2]) > 0 for r in rows[1:])

    assert (one / "levels.csv").read_bytes() == (two / "levels.csv").read_bytes()
    assert (one / "levels-manifest.json").read_bytes() == \
        (two / "levels-manifest.json").read_bytes()

    manifest = json.loads((one / "levels-manifest.json").read_text())
    assert manifest["problem"] == "synthetic"
    assert manifest["seed"] == 3
    assert manifest["command"] == {
        "name": "levels", "first": 0, "last": 3, "samples": 200, "start_level": 0,
    }
    assert manifest["config_hash"] == settings_hash(manifest["settings"])


def test_levels_usage_errors(tmp_path):
    out = str(tmp_path)
    assert run_cli("--out", out, "levels", "--samples", "0") == 1
    assert run_cli("--out", out, "levels", "--first", "3", "--last", "1") == 1
    cfg = tmp_path / "run.cfg"
    cfg.write_text("start_level = 2\n", encoding="utf-8")
    assert run_cli("--config", str(cfg), "--out", out, "levels", "--first", "1") == 1


def test_rates_roundtrip_matches_in_process(tmp_path, capsys):
    seed, samples = 3, 400
    assert run_cli("--problem", "synthetic", "--seed", str(seed), "--out",
                   str(tmp_path), "levels", "--first", "0", "--last", "4",
                   "--samples", str(samples)) == 0
    assert run_cli("rates", str(tmp_path / "levels.csv")) == 0
    printed = {line.split()[0]: [float(v) for v in line.split()[1:]]
               for line in capsys.readouterr().out.splitlines() if line}

    exp = build_experiment("synthetic", {}, seed=seed)
    stats = [sample_level(exp.problem, ell, 0, exp.params, seed, samples,
                          phase=PHASE_DIAG) for ell in range(5)]
    fit = fit_rates(stats, [s.level for s in stats])
    assert printed["alpha"][0] == pytest.approx(fit.alpha_ind, rel=1e-12)
    assert printed["beta"][0] == pytest.approx(fit.beta_ind, rel=1e-12)
    assert printed["gamma"][0] == pytest.approx(fit.gamma, rel=1e-12)
    assert printed["levels"] == list(range(5))


def write_levels(path, rows):
    lines = [LEVELS_HEADER] + [" ".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def test_rates_noiseless_planted_slopes(tmp_path, capsys):
    # V = 2^-l, |m| = 0.2 * 2^-l, unit work doubling per level
    path = tmp_path / "levels.csv"
    write_levels(path, [
        (ell, 1000, 1000.0 * 2.0**ell, 2.0**-ell, 0.2 * 2.0**-ell)
        for ell in range(6)
    ])
    assert run_cli("rates", str(path)) == 0
    out = {line.split()[0]: float(line.split()[1])
           for line in capsys.readouterr().out.splitlines() if line}
    assert out["alpha"] == pytest.approx(1.0, abs=1e-9)
    assert out["beta"] == pytest.approx(1.0, abs=1e-9)
    assert out["gamma"] == pytest.approx(1.0, abs=1e-9)


def test_rates_window_excludes_levels(tmp_path, capsys):
    path = tmp_path / "levels.csv"
    rows = [(0, 1000, 1000.0, 0.9, 0.05)] + [
        (ell, 1000, 1000.0 * 2.0**ell, 2.0**-ell, 0.2 * 2.0**-ell)
        for ell in range(1, 6)
    ]
    write_levels(path, rows)
    assert run_cli("rates", str(path), "--first", "1") == 0
    out = {line.split()[0]: float(line.split()[1])
           for line in capsys.readouterr().out.splitlines() if line}
    assert out["beta"] == pytest.approx(1.0, abs=1e-9)


def test_rates_file_errors(tmp_path, capsys):
    assert run_cli("rates", str(tmp_path / "missing.csv")) == 1

    bad_header = tmp_path / "bad.csv"
    bad_header.write_text("lvl n w v m\n0 10 1.0 0.1 0.2\n", encoding="utf-8")
    assert run_cli("rates", str(bad_header)) == 1
    assert "expected header" in capsys.readouterr().err

    short_row = tmp_path / "short.csv"
    short_row.write_text(LEVELS_HEADER + "\n0 10 1.0 0.1\n", encoding="utf-8")
    assert run_cli("rates", str(short_row)) == 1
    assert "line 2" in capsys.readouterr().err

    # a single usable level cannot pin a slope: runtime failure
    one_row = tmp_path / "one.csv"
    write_levels(one_row, [(0, 100, 100.0, 0.5, 0.2)])
    assert run_cli("rates", str(one_row)) == 2


# ---------------------------------------------------------------- mlmc sweeps


def test_mlmc_csv_schema_and_rerun(tmp_path):
    args = ("--problem", "synthetic", "--seed", "5", "mlmc", "--eps", "0.06,0.04")
    one, two = tmp_path / "one", tmp_path / "two"
    assert run_cli("--out", str(one), *args) == 0
    assert run_cli("--out", str(two), *args) == 0

    rows = read_rows(one / "mlmc.csv")
    assert rows[0] == ["tol", "cost", "estimate", "levels", "flags"]
    assert len(rows) == 3
    assert [float(r[0]) for r in rows[1:]] == [0.06, 0.04]
    for row in rows[1:]:
        assert float(row[1]) > 0
        assert 0.0 <= float(row[2]) <= 1.0
        assert int(row[3]) >= 0
        assert row[4] == "-"
    assert (one / "mlmc.csv").read_bytes() == (two / "mlmc.csv").read_bytes()

    manifest = json.loads((one / "mlmc-manifest.json").read_text())
    assert manifest["command"]["eps"] == [0.06, 0.04]
    assert manifest["command"]["start_levels"] == [0, 0]


def test_mlmc_eps_validation(tmp_path):
    out = str(tmp_path)
    assert run_cli("--out", out, "mlmc", "--eps", "0.01,0.02") == 1
    assert run_cli("--out", out, "mlmc", "--eps", "0.01,-0.02") == 1
    assert run_cli("--out", out, "mlmc", "--eps", "fast") == 1
    assert run_cli("--out", out, "mlmc", "--eps", ",") == 1


def test_mlmc_flags_unresolved_bias(tmp_path):
    # capping the hierarchy below the bias requirement must exit 3
    cfg = tmp_path / "capped.cfg"
    cfg.write_text("max_level = 3\n", encoding="utf-8")
    code = run_cli("--config", str(cfg), "--problem", "nested", "--adaptive",
                   "off", "--seed", "1", "--out", str(tmp_path),
                   "mlmc", "--eps", "5e-3")
    assert code == 3
    rows = read_rows(tmp_path / "mlmc.csv")
    assert "bias_unresolved" in rows[1][4]


# ---------------------------------------------------------------- sigma sweep


def test_sigma_sweep_schema(tmp_path):
    code = run_cli("--seed", "2", "--out", str(tmp_path), "sigma-sweep",
                   "--sigmas", "1.0", "--eps", "0.06,0.05,0.04")
    assert code == 0
    rows = read_rows(tmp_path / "sigma-sweep.csv")
    assert rows[0] == ["sigma", "worksmall", "workmid", "workbig"]
    assert len(rows) == 2
    assert float(rows[1][0]) == 1.0
    assert all(float(v) > 0 for v in rows[1][1:])

    manifest = json.loads((tmp_path / "sigma-sweep-manifest.json").read_text())
    assert manifest["command"]["sigmas"] == [1.0]
    assert len(manifest["command"]["baseline_costs"]) == 3
    assert manifest["settings"]["sigma_mode"] == "sample"


def test_sigma_sweep_usage_errors(tmp_path):
    out = str(tmp_path)
    assert run_cli("--problem", "gbm", "--out", out, "sigma-sweep",
                   "--sigmas", "1.0") == 1
    assert run_cli("--out", out, "sigma-sweep", "--sigmas", "1.0",
                   "--eps", "0.05,0.04") == 1
    assert run_cli("--out", out, "sigma-sweep", "--sigmas", "-1.0") == 1


# ----------------------------------------------------------------- exit codes


def test_usage_exit_codes():
    assert run_cli("--problem", "bogus", "levels") == 1
    assert run_cli() == 1  # missing subcommand


def test_runtime_failure_exit_code(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x", encoding="utf-8")
    code = run_cli("--problem", "synthetic", "--out", str(blocker / "sub"),
                   "levels", "--last", "1", "--samples", "50")
    assert code == 2
