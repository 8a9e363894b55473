import filecmp
import json
import os

import numpy as np
import pytest

from signedbary import Grid, GridMeasure, Potential, gaussian_on_grid, ingest_density, read_binary
from signedbary.cli import (
    EXIT_INPUT,
    EXIT_NOT_CONVERGED,
    EXIT_OK,
    EXIT_UNVERIFIED,
    RunConfig,
    emit_heatmap,
    main,
    read_pgm,
)
from signedbary.errors import InputError
from signedbary.oracle import wasserstein_1d

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def read_report(path):
    with open(os.path.join(path, "report.txt"), encoding="utf-8") as fh:
        return dict(line.rstrip("\n").split("=", 1) for line in fh)


def write_config(tmp_path, cfg, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def small_config(**overrides):
    cfg = {
        "grid": {"lower": [0.0], "upper": [1.0], "resolution": [101]},
        "weights": [0.5, 0.5],
        "marginals": [{"gaussian": {"mean": [0.3], "sd": 0.06}}, {"gaussian": {"mean": [0.7], "sd": 0.06}}],
        "solver": {"max_iters": 150},
    }
    cfg.update(overrides)
    return cfg


# solve ------------------------------------------------------------------------


def test_classical_config(tmp_path):
    out = tmp_path / "classical"
    assert main(["solve", "--config", os.path.join(CONFIGS, "classical.json"), "--out", str(out)]) == EXIT_OK
    rep = read_report(out)
    assert rep["result.status"] == "converged" and rep["diagnostics.hard_gates_pass"] == "true"
    g = Grid([0.0], [1.0], [256])
    nu = read_binary(out / "barycenter.sbgd")
    assert wasserstein_1d(nu, gaussian_on_grid(g, [0.5], 0.05)) <= 2 * g.h
    np.testing.assert_array_equal(ingest_density(str(out / "barycenter.csv"), g).mass, nu.mass)
    for name in ("potential_1.csv", "potential_2.csv", "history.csv"):
        assert (out / name).exists()
    with open(out / "history.csv") as fh:
        assert fh.readline().strip() == "sweep,dual_value,max_residual,step_size"
        assert sum(1 for _ in fh) == int(rep["result.sweeps"]) + 1


def test_weights_must_sum_to_one(tmp_path, capsys):
    path = write_config(tmp_path, small_config(weights=[0.5, 0.4]))
    assert main(["solve", "--config", path, "--out", str(tmp_path / "o")]) == EXIT_INPUT
    err = capsys.readouterr().err
    assert "AffineSumViolation" in err and err.count("\n") == 1


@pytest.mark.parametrize("bad", [
    {"grid": {"lower": [0.0], "upper": [1.0], "resolution": [101]}, "weights": [1.0]},
    {"solver": {"max_iters": 10, "stepsize": 2.0}},
    {"marginals": [{"csv": "missing.csv"}, {"gaussian": {"mean": [0.7], "sd": 0.06}}]},
    {"colour": "blue"},
])
def test_input_errors(tmp_path, bad):
    cfg = small_config()
    cfg.update(bad)
    assert main(["solve", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path / "o")]) == EXIT_INPUT


def test_missing_config_file(tmp_path):
    assert main(["solve", "--config", str(tmp_path / "nope.json")]) == EXIT_INPUT


def test_dirac_config_reports_collapse(tmp_path):
    out = tmp_path / "dirac"
    code = main(["solve", "--config", os.path.join(CONFIGS, "dirac.json"), "--out", str(out)])
    assert code in (EXIT_OK, EXIT_UNVERIFIED)
    rep = read_report(out)
    assert rep["result.singular_collapse"] == "true"
    assert rep["config.output"] == str(out)


def test_unfinished_run_exits_three(tmp_path):
    out = tmp_path / "short"
    assert main(["solve", "--config", write_config(tmp_path, small_config()), "--out", str(out)]) == EXIT_NOT_CONVERGED
    assert read_report(out)["result.status"] == "max_iters"


def test_no_diagnostics_is_unverified(tmp_path):
    mu = {"gaussian": {"mean": [0.45], "sd": 0.08}}
    cfg = small_config(weights=[0.7, 0.5, -0.2], marginals=[mu, mu, mu])
    path = write_config(tmp_path, cfg)
    assert main(["solve", "--config", path, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["solve", "--config", path, "--out", str(tmp_path / "b"), "--no-diagnostics"]) == EXIT_UNVERIFIED


def test_report_materialises_defaults(tmp_path):
    out = tmp_path / "o"
    main(["solve", "--config", write_config(tmp_path, small_config()), "--out", str(out), "--seed", "7"])
    rep = read_report(out)
    assert rep["config.solver.step_size"] == "1.0"
    assert rep["config.solver.precond_shift"] == "0.001"
    assert rep["config.solver.tol_residual"] == "0.0001"
    assert rep["config.cost.kind"] == "quadratic"
    assert rep["config.diagnostics.seed"] == "7"


def test_csv_marginals_resolve_next_to_the_config(tmp_path, monkeypatch):
    g = Grid([0.0], [1.0], [101])
    data = tmp_path / "data"
    data.mkdir()
    for name, m in (("a.csv", 0.3), ("b.csv", 0.7)):
        rows = np.column_stack([g.points[:, 0], gaussian_on_grid(g, [m], 0.06).flat])
        np.savetxt(data / name, rows, delimiter=",")
    path = write_config(data, small_config(marginals=[{"csv": "a.csv"}, {"csv": "b.csv"}]))
    monkeypatch.chdir(tmp_path)
    assert main(["solve", "--config", path, "--out", "o"]) == EXIT_NOT_CONVERGED
    assert (tmp_path / "o" / "barycenter.csv").exists()


def test_outputs_are_deterministic(tmp_path):
    path = write_config(tmp_path, small_config())
    for d in ("a", "b"):
        main(["solve", "--config", path, "--out", str(tmp_path / d), "--seed", "3"])
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == sorted(os.listdir(tmp_path / "b"))
    for name in names:
        if name == "report.txt":
            continue  # records its own output directory
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False), name
    ra, rb = read_report(tmp_path / "a"), read_report(tmp_path / "b")
    ra.pop("config.output"), rb.pop("config.output")
    assert ra == rb


def test_two_dimensional_outputs(tmp_path):
    cfg = {
        "grid": {"lower": [0.0, 0.0], "upper": [1.0, 1.0], "resolution": [16, 16]},
        "weights": [0.5, 0.5],
        "marginals": [{"gaussian": {"mean": [0.4, 0.4], "sd": 0.12}}, {"gaussian": {"mean": [0.6, 0.6], "sd": 0.12}}],
        "solver": {"max_iters": 5},
    }
    out = tmp_path / "o"
    assert main(["solve", "--config", write_config(tmp_path, cfg), "--out", str(out)]) == EXIT_NOT_CONVERGED
    for name in ("barycenter.pgm", "barycenter_grid.csv", "potential_1.pgm", "potential_2.pgm"):
        assert (out / name).exists(), name
    assert read_pgm(out / "barycenter.pgm").shape == (16, 16)


def test_bad_thread_count(tmp_path, monkeypatch):
    monkeypatch.setenv("SB_THREADS", "many")
    assert main(["solve", "--config", write_config(tmp_path, small_config())]) == EXIT_INPUT


def test_config_rejects_unknown_keys():
    with pytest.raises(InputError):
        RunConfig.from_dict({**small_config(), "weigths": [1.0]})


# heatmaps ------------------------------------------------------------------------


def test_constant_field_is_mid_grey(tmp_path):
    path = str(tmp_path / "c.pgm")
    emit_heatmap(np.full((4, 6), 3.5), path)
    pix = read_pgm(path)
    assert pix.shape == (4, 6) and np.all(pix == 128)
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "c_grid.csv", delimiter=","), np.full((4, 6), 3.5))


def test_dirac_is_one_bright_pixel(tmp_path):
    g = Grid([0.0, 0.0], [1.0, 1.0], [8, 8])
    mass = np.zeros((8, 8))
    mass[2, 5] = 1.0
    path = str(tmp_path / "d.pgm")
    emit_heatmap(GridMeasure(g, mass), path)
    pix = read_pgm(path)
    assert pix[2, 5] == 255 and np.count_nonzero(pix) == 1


def test_checker_ordering_survives(tmp_path):
    g = Grid([0.0, 0.0], [1.0, 1.0], [6, 5])
    i, j = np.indices(g.shape)
    field = ((i + j) % 2) * (1.0 + 0.1 * i) - 0.05 * j
    path = str(tmp_path / "k.pgm")
    emit_heatmap(Potential(g, field), path)
    pix = read_pgm(path).astype(float)
    order = np.argsort(field.ravel(), kind="stable")
    assert np.all(np.diff(pix.ravel()[order]) >= 0)
    assert pix.min() == 0 and pix.max() == 255
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "k_grid.csv", delimiter=","), field)


def test_heatmap_needs_2d(tmp_path):
    with pytest.raises(InputError):
        emit_heatmap(gaussian_on_grid(Grid([0.0], [1.0], [8]), [0.5], 0.2), str(tmp_path / "x.pgm"))


# other subcommands --------------------------------------------------------------------


@pytest.mark.filterwarnings("ignore::signedbary.errors.DomainClampWarning")
def test_oracle_subcommand(capsys, tmp_path):
    out = tmp_path / "bary.csv"
    assert main(["oracle", "--a", "2,-1", "--gauss", "0.5,0.05", "--gauss", "0.4,0.05", "--out", str(out)]) == EXIT_OK
    lines = dict(line.split("=") for line in capsys.readouterr().out.split())
    assert float(lines["mean"]) == pytest.approx(0.6)
    assert float(lines["sd"]) == pytest.approx(0.05)
    assert lines["monotone"] == "true"
    assert out.exists()


def test_oracle_subcommand_non_monotone(capsys):
    assert main(["oracle", "--a", "2,-1", "--gauss", "0.5,0.05", "--gauss", "0.5,0.15"]) == EXIT_UNVERIFIED
    assert "monotone=false" in capsys.readouterr().out


def test_oracle_subcommand_bad_input(capsys):
    assert main(["oracle", "--a", "2,-1", "--gauss", "0.5"]) == EXIT_INPUT


def test_check_transform_subcommand(capsys):
    assert main(["check-transform", "--n", "32", "--dim", "1", "--count", "8"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)
