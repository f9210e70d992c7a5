"""End-to-end command-line pipeline runs, in process via main(argv)."""

import csv
import dataclasses
import json

import numpy as np
import pytest

from kmeoc import EstimatedOperators, load, save
from kmeoc.cli import main
from kmeoc.systems import load_dataset_csv


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A directory holding one generated dataset and one fitted model."""
    d = tmp_path_factory.mktemp("cli")
    assert (
        main(
            [
                "generate", "--system", "s1", "--n", "400", "--seed", "3",
                "--epsilon", "0", "--out", str(d),
            ]
        )
        == 0
    )
    dataset = d / "s1_n400_seed3.csv"
    assert dataset.exists()
    assert (
        main(
            [
                "identify", "--dataset", str(dataset), "--sigma", "1.2",
                "--markov-enforce", "true", "--out", str(d),
            ]
        )
        == 0
    )
    return d


@pytest.fixture(scope="module")
def model_path(work):
    return work / "s1_n400_seed3_model.bin"


class TestGenerate:
    def test_reruns_are_byte_identical(self, tmp_path, capsys):
        args = [
            "generate", "--system", "s4", "--n", "12", "--seed", "1",
            "--out", str(tmp_path),
        ]
        assert main(args) == 0
        path = tmp_path / "s4_n12_seed1.csv"
        first = path.read_bytes()
        assert main(args) == 0
        assert path.read_bytes() == first
        assert "12 samples" in capsys.readouterr().out

    def test_unknown_system_exits_2(self, tmp_path, capsys):
        rc = main(
            ["generate", "--system", "nope", "--n", "5", "--out", str(tmp_path)]
        )
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_written_dataset_loads(self, work):
        ds = load_dataset_csv(work / "s1_n400_seed3.csv")
        assert ds.N == 400 and ds.system == "s1" and ds.seed == 3


class TestIdentify:
    def test_model_artifact_and_summary(self, work, model_path):
        ops = load(model_path)
        assert isinstance(ops, EstimatedOperators)
        assert ops.N == 400
        summary = json.loads((work / "s1_n400_seed3_fit.json").read_text())
        assert summary["sigma"] == 1.2
        assert summary["markov_enforced"] is True
        assert np.isfinite(summary["fit_residual_fro"])
        assert np.isfinite(summary["departure_from_normality"])

    def test_sigma_grid_selection_written(self, work, tmp_path, capsys):
        dataset = work / "s1_n400_seed3.csv"
        rc = main(
            [
                "identify", "--dataset", str(dataset),
                "--sigma-grid", "0.8,1.6", "--out", str(tmp_path),
            ]
        )
        assert rc == 0
        summary = json.loads(
            (tmp_path / "s1_n400_seed3_fit.json").read_text()
        )
        assert summary["sigma"] in (0.8, 1.6)
        assert len(summary["sigma_grid_scores"]) == 2
        for entry in summary["sigma_grid_scores"]:
            assert set(entry) == {
                "sigma", "validation_error",
                "departure_from_normality", "combined",
            }

    def test_needs_sigma_or_grid(self, work, tmp_path, capsys):
        rc = main(
            [
                "identify", "--dataset", str(work / "s1_n400_seed3.csv"),
                "--out", str(tmp_path),
            ]
        )
        assert rc == 2
        assert "sigma" in capsys.readouterr().err

    def test_singular_gram_with_zero_gamma_exits_3(self, tmp_path, capsys):
        # A dataset of identical rows with regularization disabled: the
        # fit must fail as a runtime error that points at gamma.
        lines = ["# dt=0.01 epsilon=0 seed=0 system=", "x1,u1,y1,cost"]
        lines += ["1,0.5,1,0.01"] * 10
        bad = tmp_path / "dup.csv"
        bad.write_text("\n".join(lines) + "\n")
        rc = main(
            [
                "identify", "--dataset", str(bad), "--sigma", "1.0",
                "--gamma", "0", "--out", str(tmp_path),
            ]
        )
        assert rc == 3
        assert "gamma" in capsys.readouterr().err


class TestControl:
    def test_policy_table_and_solution(self, work, model_path, capsys):
        rc = main(
            [
                "control", "--model", str(model_path), "--horizon", "200",
                "--save-solution", "true", "--query", "1.0;-2.0",
                "--out", str(work),
            ]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "pi(1.0)" in out and "pi(-2.0)" in out

        sol = load(work / "s1_n400_seed3_model_solution.bin")
        assert sol.horizon == 200

        with open(work / "s1_n400_seed3_model_policy.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["k", "t", "i", "x1", "v", "u1"]
        assert len(rows) == 1 + 400  # stationary row only
        assert all(r[0] == str(sol.stationary_step) for r in rows[1:])

        with open(work / "s1_n400_seed3_model_queries.csv", newline="") as fh:
            qrows = list(csv.reader(fh))
        assert qrows[0] == ["x1", "u1"]
        assert len(qrows) == 3
        assert float(qrows[1][0]) == 1.0
        # The learned gain is negative feedback, so signs flip.
        assert float(qrows[1][1]) < 0 < float(qrows[2][1])

    def test_single_step_value_equals_stage_cost(
        self, work, model_path, tmp_path
    ):
        rc = main(
            [
                "control", "--model", str(model_path), "--horizon", "1",
                "--export-steps", "all", "--out", str(tmp_path),
            ]
        )
        assert rc == 0
        ds = load_dataset_csv(work / "s1_n400_seed3.csv")
        with open(
            tmp_path / "s1_n400_seed3_model_policy.csv", newline=""
        ) as fh:
            rows = list(csv.reader(fh))[1:]
        got = np.array([float(r[4]) for r in rows])
        np.testing.assert_allclose(got, ds.cost, atol=1e-15)

    def test_unstable_model_exits_3(self, model_path, tmp_path, capsys):
        ops = load(model_path)
        N = ops.N
        bad = dataclasses.replace(
            ops, A_hat=10.0 * np.eye(N), B_hat_blocks=[np.zeros((N, N))]
        )
        bad_path = tmp_path / "unstable_model.bin"
        save(bad, bad_path)
        rc = main(
            [
                "control", "--model", str(bad_path), "--horizon", "500",
                "--out", str(tmp_path),
            ]
        )
        assert rc == 3
        assert "sigma" in capsys.readouterr().err

    def test_bad_export_steps_exits_2(self, model_path, tmp_path):
        rc = main(
            [
                "control", "--model", str(model_path), "--horizon", "5",
                "--export-steps", "everything", "--out", str(tmp_path),
            ]
        )
        assert rc == 2


class TestPredict:
    def test_constant_observable_mass_is_conserved(
        self, model_path, tmp_path
    ):
        rc = main(
            [
                "predict", "--model", str(model_path), "--x0", "0.5",
                "--observable", "one", "--steps", "30",
                "--out", str(tmp_path),
            ]
        )
        assert rc == 0
        with open(
            tmp_path / "s1_n400_seed3_model_forecast.csv", newline=""
        ) as fh:
            vals = [float(r[2]) for r in list(csv.reader(fh))[1:]]
        assert len(vals) == 31
        # Markov enforcement preserves total mass step to step.
        for v in vals:
            assert v == pytest.approx(vals[0], abs=1e-9)

    def test_learned_policy_needs_solution(self, model_path, tmp_path, capsys):
        rc = main(
            [
                "predict", "--model", str(model_path), "--x0", "0.5",
                "--policy", "learned", "--out", str(tmp_path),
            ]
        )
        assert rc == 2
        assert "solution" in capsys.readouterr().err

    def test_learned_policy_runs_with_solution(self, work, model_path, tmp_path):
        sol_path = work / "s1_n400_seed3_model_solution.bin"
        assert sol_path.exists()  # written by the control test above
        rc = main(
            [
                "predict", "--model", str(model_path), "--x0", "1.0",
                "--policy", "learned", "--solution", str(sol_path),
                "--steps", "10", "--out", str(tmp_path),
            ]
        )
        assert rc == 0

    def test_model_artifact_rejected_as_solution(
        self, model_path, tmp_path, capsys
    ):
        rc = main(
            [
                "predict", "--model", str(model_path), "--x0", "1.0",
                "--policy", "learned", "--solution", str(model_path),
                "--out", str(tmp_path),
            ]
        )
        assert rc == 2
        assert "value-solution" in capsys.readouterr().err

    def test_x0_xor_init_csv(self, model_path, tmp_path, capsys):
        base = ["predict", "--model", str(model_path), "--out", str(tmp_path)]
        assert main(base) == 2
        init = tmp_path / "init.csv"
        init.write_text("0.1\n0.2\n-0.3\n")
        assert main(base + ["--init-csv", str(init)]) == 0
        assert main(base + ["--x0", "0.1", "--init-csv", str(init)]) == 2

    def test_missing_model_file_exits_3(self, tmp_path):
        rc = main(
            [
                "predict", "--model", str(tmp_path / "ghost.bin"),
                "--x0", "0.0", "--out", str(tmp_path),
            ]
        )
        assert rc == 3


class TestBench:
    def test_small_run_writes_reports(self, tmp_path, capsys):
        rc = main(
            [
                "bench", "--system", "s1", "--reps", "2", "--n", "150",
                "--horizon", "60", "--out", str(tmp_path),
            ]
        )
        assert rc == 0
        assert "rmse_mean" in capsys.readouterr().out
        assert (tmp_path / "bench_s1.csv").exists()
        data = json.loads((tmp_path / "bench_s1.json").read_text())
        assert data["reps"] == 2 and data["N"] == 150

    def test_zero_reps_exits_2(self, tmp_path):
        rc = main(
            ["bench", "--system", "s1", "--reps", "0", "--out", str(tmp_path)]
        )
        assert rc == 2


class TestSweep:
    def test_two_point_sweep_reports_slope(self, tmp_path, capsys):
        rc = main(
            [
                "sweep", "--system", "s1", "--n-grid", "60,120",
                "--reps", "1", "--horizon", "60", "--out", str(tmp_path),
            ]
        )
        assert rc == 0
        assert "slope" in capsys.readouterr().out
        with open(tmp_path / "sweep_s1.csv") as fh:
            lines = fh.read().splitlines()
        assert lines[0] == "N,rmse_mean"
        assert len(lines) == 3
        data = json.loads((tmp_path / "sweep_s1.json").read_text())
        assert data["loglog_slope"] is not None
        assert len(data["points"]) == 2


class TestConfigPlumbing:
    def test_help_lists_settings(self, capsys):
        with pytest.raises(SystemExit) as exc_info:
            main(["identify", "--help"])
        assert exc_info.value.code == 0
        text = capsys.readouterr().out
        assert "--sigma-grid" in text and "--gamma" in text

    def test_config_file_supplies_values(self, work, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "sigma = 1.0  # kernel scale\nout = {}\n".format(tmp_path)
        )
        rc = main(
            [
                "identify", "--dataset", str(work / "s1_n400_seed3.csv"),
                "--config", str(cfg),
            ]
        )
        assert rc == 0
        summary = json.loads((tmp_path / "s1_n400_seed3_fit.json").read_text())
        assert summary["sigma"] == 1.0

    def test_flag_overrides_config_file(self, work, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"sigma=0.5\nout={tmp_path}\n")
        rc = main(
            [
                "identify", "--dataset", str(work / "s1_n400_seed3.csv"),
                "--config", str(cfg), "--sigma", "2.0",
            ]
        )
        assert rc == 0
        summary = json.loads((tmp_path / "s1_n400_seed3_fit.json").read_text())
        assert summary["sigma"] == 2.0

    def test_unknown_config_key_exits_2(self, work, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("bandwidth=1.0\n")
        rc = main(
            [
                "identify", "--dataset", str(work / "s1_n400_seed3.csv"),
                "--config", str(cfg), "--sigma", "1.0",
                "--out", str(tmp_path),
            ]
        )
        assert rc == 2
        assert "bandwidth" in capsys.readouterr().err

    def test_malformed_config_line_exits_2(self, work, tmp_path):
        cfg = tmp_path / "bad2.cfg"
        cfg.write_text("sigma\n")
        rc = main(
            [
                "identify", "--dataset", str(work / "s1_n400_seed3.csv"),
                "--config", str(cfg), "--out", str(tmp_path),
            ]
        )
        assert rc == 2
