from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from flossim import cli
from flossim.cli import (
    ConfigError,
    QueryError,
    ResultRow,
    configs_equal,
    default_experiment_config,
    dsep_check,
    parse_config,
    run_cell,
    run_sweep,
    serialize_config,
    write_csv,
)
from flossim.mdag import GraphParseError
from flossim.orchestrator import Mode
from flossim.synth import load_population


def tiny_config_text(rounds=2, modes="uncorrected", n_counts="30", seeds="0"):
    return "\n".join(
        [
            "population.n_users = 30",
            "train.rounds = %d" % rounds,
            "train.k = 4",
            "train.max_iterations = 2",
            f"experiment.modes = {modes}",
            f"experiment.client_counts = {n_counts}",
            f"experiment.seeds = {seeds}",
            "experiment.test_users = 40",
        ]
    )


def packaged(name: str) -> Path:
    return Path(str(resources.files("flossim").joinpath(name)))


# -- config parsing ------------------------------------------------------------


def test_defaults_round_trip():
    cfg = default_experiment_config()
    again = parse_config(serialize_config(cfg))
    assert configs_equal(cfg, again)
    third = parse_config(serialize_config(again))
    assert configs_equal(again, third)
    assert np.array_equal(again.population.true_theta, cfg.population.true_theta)
    assert again.train == cfg.train
    assert again.dp == cfg.dp


def test_shipped_default_config_matches_code_defaults():
    text = packaged("configs/default.cfg").read_text(encoding="utf-8")
    cfg = parse_config(text)
    assert configs_equal(cfg, default_experiment_config())


def test_shipped_dp_variant_parses():
    cfg = parse_config(packaged("configs/dp_enabled.cfg").read_text(encoding="utf-8"))
    assert cfg.dp.noise_sigma > 0
    assert np.isfinite(cfg.dp.clip_norm)


def test_partial_config_uses_defaults():
    cfg = parse_config(tiny_config_text())
    assert cfg.population.n_users == 30
    assert cfg.train.rounds == 2
    assert cfg.modes == (Mode.UNCORRECTED_MNAR,)
    assert cfg.population.dim_x == default_experiment_config().population.dim_x


def test_comments_and_blanks_are_ignored():
    cfg = parse_config("# hello\n\npopulation.n_users = 12  # trailing\n")
    assert cfg.population.n_users == 12


@pytest.mark.parametrize(
    "text,fragment",
    [
        ("population.bogus = 1", "unknown key"),
        ("cheese.n_users = 1", "unknown section"),
        ("population.n_users 1", "expected"),
        ("population.n_users = twelve", "cannot parse"),
        ("population.n_users = 5\npopulation.n_users = 6", "duplicate"),
        ("experiment.modes = warp", "unknown mode"),
        ("train.eta = -1.0", "train"),
        ("population.dim_x = 3", "explicitly"),
        ("experiment.client_counts = ", "client_counts"),
    ],
)
def test_config_errors_name_the_problem(text, fragment):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert fragment in str(err.value)


def test_s_metric_round_trips():
    cfg = parse_config("population.s_metric = log_loss\n")
    assert cfg.population.s_metric == "log_loss"
    assert "log_loss" in serialize_config(cfg)
    with pytest.raises(ConfigError):
        parse_config("population.s_metric = vibes\n")


# -- sweep and output ------------------------------------------------------------


def test_single_cell_row_count_and_shape():
    cfg = parse_config(tiny_config_text(rounds=3))
    rows = run_cell(cfg, Mode.UNCORRECTED_MNAR, 30, 0)
    assert len(rows) == 3
    for t, row in enumerate(rows, start=1):
        assert row.round == t
        assert row.mode == "uncorrected"
        assert 0.0 <= row.accuracy <= 1.0
        assert row.solver_converged is None


def test_sweep_row_count_and_sorting():
    cfg = parse_config(tiny_config_text(rounds=2, modes="floss, uncorrected", n_counts="30, 50", seeds="0, 1"))
    result = run_sweep(cfg)
    assert len(result.rows) == 2 * 2 * 2 * 2
    assert list(result.rows) == sorted(result.rows, key=ResultRow.sort_key)
    floss_rows = [r for r in result.rows if r.mode == "floss"]
    assert all(r.solver_converged is not None for r in floss_rows)


def test_sweep_output_is_byte_identical(tmp_path):
    cfg = parse_config(tiny_config_text(rounds=2, modes="floss, full", seeds="0, 3"))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_csv(run_sweep(cfg), a)
    write_csv(run_sweep(cfg), b)
    assert a.read_bytes() == b.read_bytes()


def test_csv_schema_and_header(tmp_path):
    cfg = parse_config(tiny_config_text())
    path = tmp_path / "out.csv"
    write_csv(run_sweep(cfg), path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#") and "flossim-results" in lines[0]
    assert lines[1] == "mode,n_clients,seed,round,accuracy,full_risk,observed_risk,m_responsive,solver_converged"
    assert len(lines) == 2 + 2  # schema + header + rounds


# -- d-separation queries ----------------------------------------------------------


def test_dsep_check_gradient_graph():
    out = dsep_check(packaged("graphs/gradient_missingness.graph"), "R;G;")
    assert out.splitlines()[0] == "not d-separated"
    assert out.splitlines()[1].startswith("open path: ")


def test_dsep_check_shadow_graph():
    out = dsep_check(packaged("graphs/shadow_variable.graph"), "Z;R;S,Dp")
    assert out == "d-separated"


def test_dsep_check_conditioning_changes_verdict():
    graph = packaged("graphs/gradient_missingness.graph")
    assert dsep_check(graph, "R;G;D").splitlines()[0] == "not d-separated"


def test_dsep_query_errors():
    graph = packaged("graphs/shadow_variable.graph")
    with pytest.raises(QueryError):
        dsep_check(graph, "Z;R")
    with pytest.raises(QueryError):
        dsep_check(graph, ";R;S")


def test_dsep_malformed_graph_reports_line(tmp_path):
    bad = tmp_path / "bad.graph"
    bad.write_text("vertex A observed\nedge A\n")
    with pytest.raises(GraphParseError) as err:
        dsep_check(bad, "A;B;")
    assert "line 2" in str(err.value)


# -- command line ---------------------------------------------------------------------


def test_main_dsep_check(capsys):
    rc = cli.main(["dsep-check", str(packaged("graphs/shadow_variable.graph")), "Z;R;S,Dp"])
    assert rc == 0
    assert "d-separated" in capsys.readouterr().out


def test_main_run_writes_csv(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(tiny_config_text())
    out = tmp_path / "rows.csv"
    rc = cli.main(["run", "--config", str(cfg_path), "--mode", "oracle", "--seed", "1", "--out", str(out)])
    assert rc == 0
    assert out.exists()
    assert "wrote" in capsys.readouterr().out


def test_main_gen_population_round_trips(tmp_path):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(tiny_config_text())
    out = tmp_path / "pop.tsv"
    rc = cli.main(["gen-population", "--config", str(cfg_path), "--seed", "5", "--n", "25", "--out", str(out)])
    assert rc == 0
    users = load_population(out)
    assert len(users) == 25


def test_main_error_codes(tmp_path, capsys):
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("population.bogus = 1\n")
    assert cli.main(["sweep", "--config", str(bad_cfg), "--out", str(tmp_path / "x.csv")]) == 2
    assert "error[config]" in capsys.readouterr().err

    assert cli.main(["dsep-check", str(tmp_path / "missing.graph"), "A;B;"]) == 3
    assert "error[io]" in capsys.readouterr().err

    bad_graph = tmp_path / "bad.graph"
    bad_graph.write_text("vortex A observed\n")
    assert cli.main(["dsep-check", str(bad_graph), "A;B;"]) == 4
    assert "error[graph]" in capsys.readouterr().err

    graph = packaged("graphs/shadow_variable.graph")
    assert cli.main(["dsep-check", str(graph), "Z;R"]) == 4
    assert "error[query]" in capsys.readouterr().err

    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(tiny_config_text())
    assert cli.main(["run", "--config", str(cfg_path), "--mode", "warp", "--seed", "0"]) == 1
    assert "error[runtime]" in capsys.readouterr().err
