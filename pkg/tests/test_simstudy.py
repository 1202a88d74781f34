import json
import math

import numpy as np
import pytest

from spderep.mesh import assemble_fem, build_structured_mesh, project
from spderep.simstudy import (
    SimScenario,
    StudyInfra,
    place_stations,
    ridge_elevation,
    run_study,
    sample_dataset,
)
from spderep.spde import matern_variance


TINY = SimScenario(
    truth_mode="nonstationary",
    theta_true=(3.9, -1.3, -5.9, 3.1),
    n_datasets=1,
    r_values=(2,),
    n_stations=25,
    extent=(0.0, 200.0, 0.0, 200.0),
    resolution=50.0,
    field_recovery_r=(2,),
    base_seed=99,
)


class TestScenario:
    def test_json_roundtrip(self, tmp_path):
        path = tmp_path / "scenario.json"
        path.write_text(json.dumps(TINY.to_dict()))
        again = SimScenario.load(path)
        assert again == TINY

    def test_theta_dimension_validated(self):
        with pytest.raises(ValueError, match="theta_true"):
            SimScenario(truth_mode="stationary", theta_true=(1.0, 2.0, 3.0, 4.0))

    def test_truth_hyperparams(self):
        hp = TINY.truth_hyperparams()
        assert hp.theta_tau.tolist() == [3.9, -1.3]
        assert hp.theta_kappa.tolist() == [-5.9, 3.1]
        assert hp.noise_precision == pytest.approx(40.0)


class TestInfra:
    def test_ridge_elevation_range(self):
        mesh = build_structured_mesh((0, 500, 0, 700), 25.0)
        cov = ridge_elevation(mesh)
        assert cov.values.min() == pytest.approx(0.0, abs=1e-12)
        assert cov.values.max() == pytest.approx(1.5, abs=1e-12)

    def test_station_placement_biased_low(self):
        mesh = build_structured_mesh((0, 500, 0, 700), 25.0)
        cov = ridge_elevation(mesh)
        stations = place_stations(mesh, cov, 233, np.random.SeedSequence(3))
        assert stations.shape == (233, 2)
        proj = project(mesh, stations)
        assert proj.inside.all()
        station_h = proj.interpolate(cov.values)
        # biased towards valleys: mean station elevation well below the
        # area-weighted mean elevation
        assert station_h.mean() < cov.values.mean()

    def test_placement_deterministic(self):
        mesh = build_structured_mesh((0, 300, 0, 300), 50.0)
        cov = ridge_elevation(mesh)
        a = place_stations(mesh, cov, 20, np.random.SeedSequence(5))
        b = place_stations(mesh, cov, 20, np.random.SeedSequence(5))
        np.testing.assert_array_equal(a, b)


@pytest.fixture(scope="module")
def tiny_infra():
    return StudyInfra.build(TINY)


class TestSampleDataset:
    @pytest.fixture()
    def infra(self, tiny_infra):
        return tiny_infra

    def test_constraints_satisfied(self, infra):
        fem = assemble_fem(infra.mesh)
        obs, truth = sample_dataset(
            TINY, infra.mesh, infra.covariate, infra.stations, 3,
            np.random.SeedSequence(1),
        )
        c = fem.C_diag
        hc = infra.covariate.values * c
        for w in truth["w"]:
            assert abs(c @ w) < 1e-10 * np.abs(w).max()
        joint = sum(float(hc @ w) for w in truth["w"])
        assert abs(joint) < 1e-9 * np.abs(truth["w"]).max()

    def test_near_noiseless_limit(self, infra):
        quiet = SimScenario.from_dict({**TINY.to_dict(), "tau_eps": 1e12})
        obs, truth = sample_dataset(
            quiet, infra.mesh, infra.covariate, infra.stations, 2,
            np.random.SeedSequence(2),
        )
        proj = project(infra.mesh, infra.stations)
        h = proj.interpolate(infra.covariate.values)
        for j in range(2):
            expected = quiet.beta0 + quiet.beta_h * h + proj.A @ truth["w"][j]
            assert np.abs(obs.y[:, j] - expected).max() < 1e-3

    def test_seed_reproducibility(self, infra):
        a, _ = sample_dataset(
            TINY, infra.mesh, infra.covariate, infra.stations, 2,
            np.random.SeedSequence(7),
        )
        b, _ = sample_dataset(
            TINY, infra.mesh, infra.covariate, infra.stations, 2,
            np.random.SeedSequence(7),
        )
        np.testing.assert_array_equal(a.y, b.y)

    def test_truth_eta_composition(self, infra):
        obs, truth = sample_dataset(
            TINY, infra.mesh, infra.covariate, infra.stations, 2,
            np.random.SeedSequence(11),
        )
        expected = (
            TINY.beta0
            + TINY.beta_h * infra.covariate.values[None, :]
            + truth["w"]
        )
        np.testing.assert_allclose(truth["eta"], expected, rtol=1e-12)


class TestSampledFieldVariance:
    def test_interior_variance_matches_analytic(self):
        # Stationary truth on a domain of 6 ranges with edge length rho/10;
        # the empirical variance of constrained samples at interior nodes
        # must match the analytic marginal variance within 5%.
        theta_tau, theta_kappa = 1.0, math.log(math.sqrt(8.0) / 100.0)
        scenario = SimScenario(
            truth_mode="stationary",
            theta_true=(theta_tau, theta_kappa),
            tau_eps=1e8,
            n_datasets=1,
            r_values=(1,),
            n_stations=4,
            extent=(0.0, 600.0, 0.0, 600.0),
            resolution=10.0,
            base_seed=5,
        )
        mesh = build_structured_mesh(scenario.extent, scenario.resolution)
        cov = ridge_elevation(mesh)
        stations = np.array(
            [[100.0, 100.0], [500.0, 100.0], [100.0, 500.0], [500.0, 500.0]]
        )
        n_draws = 1200
        _, truth = sample_dataset(
            scenario, mesh, cov, stations, n_draws, np.random.SeedSequence(17)
        )
        xy = mesh.nodes
        rho = 100.0
        interior = (
            (xy[:, 0] >= rho)
            & (xy[:, 0] <= 600 - rho)
            & (xy[:, 1] >= rho)
            & (xy[:, 1] <= 600 - rho)
        )
        emp_var = truth["w"][:, interior].var(axis=0).mean()
        sig2 = matern_variance(math.exp(theta_kappa), math.exp(theta_tau))
        assert abs(emp_var / sig2 - 1.0) < 0.05


class TestRunStudy:
    def test_single_dataset_report_well_formed(self):
        report = run_study(TINY)
        assert report["schema_version"] == 1
        assert set(report["cells"]) == {"2:stationary", "2:nonstationary"}
        cell = report["cells"]["2:nonstationary"]
        assert cell["n_ok"] == 1
        for name in ("theta_tau_1", "theta_kappa_h", "beta_0", "beta_h", "tau_eps"):
            assert name in cell["params"]
            stats = cell["params"][name]
            assert stats["mean_q10"] <= stats["mean_avg"] <= stats["mean_q90"]
            assert 0.0 <= stats["coverage95"] <= 1.0
        assert "field" in cell
        assert report["delta_dic"]["2"]
        assert "2" in report["misclassification"]
        assert "2" in report["field_maps"]
        assert len(report["elevation"]) == 25  # 5x5 nodes

    def test_seed_determinism_bytes(self):
        a = json.dumps(run_study(TINY), sort_keys=True)
        b = json.dumps(run_study(TINY), sort_keys=True)
        assert a == b

    def test_jobs_do_not_change_results(self):
        a = json.dumps(run_study(TINY, jobs=1), sort_keys=True)
        b = json.dumps(run_study(TINY, jobs=2), sort_keys=True)
        assert a == b
