import json

import pytest

from spderep.cli import main
from spderep.simstudy import SimScenario


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def targets_file(workdir):
    path = workdir / "targets.json"
    path.write_text(
        json.dumps(
            {
                "rho_median": 150,
                "rho_q": 500,
                "sigma_median": 0.2,
                "sigma_q": 2.0,
                "q_level": 0.9,
                "h0": 0.4,
                "c_rho": 0.8,
                "c_sigma": 1.3,
                "mode": "nonstationary",
            }
        )
    )
    return path


@pytest.fixture(scope="module")
def scenario_file(workdir):
    scenario = SimScenario(
        truth_mode="nonstationary",
        theta_true=(3.9, -1.3, -5.9, 3.1),
        n_datasets=1,
        r_values=(2,),
        n_stations=25,
        extent=(0.0, 200.0, 0.0, 200.0),
        resolution=50.0,
        field_recovery_r=(2,),
        base_seed=7,
    )
    path = workdir / "scenario.json"
    path.write_text(json.dumps(scenario.to_dict()))
    return path


@pytest.fixture(scope="module")
def dataset_dir(workdir, scenario_file):
    out = workdir / "sim"
    rc = main(
        ["simulate", "--scenario", str(scenario_file), "--r", "2", "--out", str(out)]
    )
    assert rc == 0
    return out


class TestPriorSolve:
    def test_reference_values_in_output(self, workdir, targets_file):
        out = workdir / "prior.json"
        rc = main(["prior", "solve", "--targets", str(targets_file), "--out", str(out)])
        assert rc == 0
        doc = json.loads(out.read_text())
        assert doc["mu_kappa"] == pytest.approx(-3.97, abs=0.01)
        assert doc["var_kappa"] == pytest.approx(0.88, abs=0.01)
        assert doc["var_tau_h"] == pytest.approx(3.09, abs=0.01)
        assert doc["var_kappa_h"] == pytest.approx(3.09, abs=0.01)
        assert "manifest" in doc and doc["manifest"]["config_hash"]

    def test_infeasible_coefficients_exit_code_two(self, workdir, capsys):
        path = workdir / "bad_targets.json"
        path.write_text(
            json.dumps(
                {
                    "rho_median": 150,
                    "rho_q": 500,
                    "sigma_median": 0.2,
                    "sigma_q": 2.0,
                    "h0": 0.4,
                    "c_rho": 0.8,
                    "c_sigma": 0.5,
                    "mode": "nonstationary",
                }
            )
        )
        rc = main(
            ["prior", "solve", "--targets", str(path), "--out", str(workdir / "x.json")]
        )
        assert rc == 2
        assert "c_sigma > c_rho" in capsys.readouterr().err

    def test_batch_table(self, workdir):
        rows = {
            "NS-1": (0.4, 0.6, 0.99, 0.93),
            "NS-2": (0.8, 1.3, 3.09, 3.09),
            "NS-3": (1.6, 3.4, 7.88, 7.94),
            "NS-4": (0.8, 1.0, 1.24, 3.09),
            "NS-5": (0.8, 2.0, 6.97, 3.09),
            "NS-6": (3.5, 13.0, 15.95, 16.15),
        }
        batch = {
            "batch": {
                name: {
                    "rho_median": 150,
                    "rho_q": 500,
                    "sigma_median": 0.2,
                    "sigma_q": 2.0,
                    "h0": 0.4,
                    "c_rho": c_rho,
                    "c_sigma": c_sigma,
                    "mode": "nonstationary",
                }
                for name, (c_rho, c_sigma, _, _) in rows.items()
            }
        }
        path = workdir / "batch.json"
        path.write_text(json.dumps(batch))
        out = workdir / "batch_out.json"
        rc = main(["prior", "solve", "--targets", str(path), "--out", str(out)])
        assert rc == 0
        doc = json.loads(out.read_text())
        for name, (_, _, want_tau_h, want_kappa_h) in rows.items():
            got = doc["priors"][name]
            assert got["var_tau_h"] == pytest.approx(want_tau_h, abs=0.01)
            assert got["var_kappa_h"] == pytest.approx(want_kappa_h, abs=0.01)


class TestSimulate:
    def test_outputs_exist_with_manifest(self, dataset_dir):
        obs = (dataset_dir / "observations.csv").read_text()
        assert obs.startswith("# manifest: ")
        assert "station_id" in obs
        truth = json.loads((dataset_dir / "truth.json").read_text())
        assert "manifest" in truth and truth["manifest"]["seed"] == 7

    def test_byte_identical_rerun(self, workdir, scenario_file, dataset_dir):
        out2 = workdir / "sim_repeat"
        rc = main(
            [
                "simulate",
                "--scenario",
                str(scenario_file),
                "--r",
                "2",
                "--out",
                str(out2),
            ]
        )
        assert rc == 0
        for name in ("observations.csv", "truth.json", "mesh.json"):
            assert (out2 / name).read_bytes() == (dataset_dir / name).read_bytes()


class TestFit:
    def test_fit_outputs_schema(self, workdir, dataset_dir, targets_file):
        out = workdir / "fit"
        rc = main(
            [
                "fit",
                "--mesh",
                str(dataset_dir / "mesh.json"),
                "--obs",
                str(dataset_dir / "observations.csv"),
                "--mode",
                "nonstationary",
                "--targets",
                str(targets_file),
                "--strategy",
                "ccd",
                "--out",
                str(out),
            ]
        )
        assert rc == 0
        summary = json.loads((out / "fit_summary.json").read_text())
        assert summary["mode"] == "nonstationary"
        assert {"dic", "d_bar", "p_d"} <= set(summary["dic"])
        params = summary["parameters"]
        for name in (
            "beta_0",
            "beta_h",
            "tau_eps",
            "theta_tau_1",
            "theta_tau_h",
            "theta_kappa_1",
            "theta_kappa_h",
        ):
            assert name in params
            quantiles = params[name]["quantiles"]
            assert set(quantiles) == {"0.025", "0.25", "0.5", "0.75", "0.975"}
            assert (
                quantiles["0.025"]
                <= quantiles["0.5"]
                <= quantiles["0.975"]
            )
        grid = json.loads((out / "hyperposterior.json").read_text())
        assert len(grid["points"]) == len(grid["weights"])
        assert abs(sum(grid["weights"]) - 1.0) < 1e-9
        pred_lines = (out / "predictive.csv").read_text().strip().splitlines()
        assert pred_lines[1] == "target_id,year,mean,sd_eta,sd_y"
        # one row per station-year
        assert len(pred_lines) == 2 + 25 * 2

    def test_rerun_is_byte_identical(self, workdir, dataset_dir, targets_file):
        out1 = workdir / "fit_a"
        out2 = workdir / "fit_b"
        args = [
            "fit",
            "--mesh",
            str(dataset_dir / "mesh.json"),
            "--obs",
            str(dataset_dir / "observations.csv"),
            "--mode",
            "stationary",
            "--targets",
            str(targets_file),
            "--strategy",
            "ccd",
        ]
        assert main(args + ["--out", str(out1)]) == 0
        assert main(args + ["--out", str(out2)]) == 0
        for name in ("fit_summary.json", "hyperposterior.json", "predictive.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_invalid_obs_row_line_numbered(self, workdir, dataset_dir, targets_file, capsys):
        bad = workdir / "bad_obs.csv"
        bad.write_text(
            "station_id,x_km,y_km,elevation_km,year,value_m\n"
            "s1,10,10,0.2,2008,1.0\n"
            "s2,oops,20,0.1,2008,1.1\n"
        )
        rc = main(
            [
                "fit",
                "--mesh",
                str(dataset_dir / "mesh.json"),
                "--obs",
                str(bad),
                "--mode",
                "stationary",
                "--targets",
                str(targets_file),
                "--out",
                str(workdir / "fit_bad"),
            ]
        )
        assert rc == 2
        assert "bad_obs.csv:3" in capsys.readouterr().err


class TestPredict:
    def test_predict_at_targets(self, workdir, dataset_dir, targets_file):
        tf = workdir / "targets.csv"
        tf.write_text("target_id,x_km,y_km\nt1,100,100\nt2,55,145\n")
        out = workdir / "pred"
        rc = main(
            [
                "predict",
                "--mesh",
                str(dataset_dir / "mesh.json"),
                "--obs",
                str(dataset_dir / "observations.csv"),
                "--mode",
                "nonstationary",
                "--targets",
                str(targets_file),
                "--targets-file",
                str(tf),
                "--strategy",
                "ccd",
                "--out",
                str(out),
            ]
        )
        assert rc == 0
        lines = (out / "predictive.csv").read_text().strip().splitlines()
        assert len(lines) == 2 + 2 * 2  # manifest + header + 2 targets x 2 years


class TestCv:
    def test_cv_outputs(self, workdir, dataset_dir, targets_file):
        out = workdir / "cv"
        rc = main(
            [
                "cv",
                "--mesh",
                str(dataset_dir / "mesh.json"),
                "--obs",
                str(dataset_dir / "observations.csv"),
                "--mode",
                "stationary",
                "--targets",
                str(targets_file),
                "--cv-mode",
                "fixed",
                "--strategy",
                "ccd",
                "--out",
                str(out),
            ]
        )
        assert rc == 0
        summary = json.loads((out / "cv_summary.json").read_text())
        assert summary["n_rows"] == 25 * 2
        rows = (out / "cv_scores.csv").read_text().strip().splitlines()
        assert rows[1] == "station_id,year,crps,sq_error,pred_mean,pred_sd"
        assert len(rows) == 2 + 25 * 2


class TestStudy:
    def test_study_outputs_and_jobs_determinism(self, workdir, scenario_file):
        out1 = workdir / "study1"
        out2 = workdir / "study2"
        assert main(
            ["study", "--scenario", str(scenario_file), "--out", str(out1)]
        ) == 0
        assert main(
            [
                "study",
                "--scenario",
                str(scenario_file),
                "--jobs",
                "2",
                "--out",
                str(out2),
            ]
        ) == 0
        names = [
            "study_report.json",
            "fig8_delta_dic.csv",
            "fig9_posterior_means.csv",
            "fig10_coverage_rmse.csv",
            "fig11_field_scores.csv",
            "fig12_score_maps.csv",
        ]
        for name in names:
            assert (out1 / name).exists(), name
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name
        report = json.loads((out1 / "study_report.json").read_text())
        assert report["misclassification"]
        fig11 = (out1 / "fig11_field_scores.csv").read_text().splitlines()
        assert fig11[1] == "r,fit_mode,rmse_avg,crps_avg,coverage_avg"
