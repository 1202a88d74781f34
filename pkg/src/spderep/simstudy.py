"""Synthetic replicate datasets and the factorial simulation study.

Datasets are sampled from the discrete replicate model itself (constrained
spatial fields plus fixed effects and iid noise), so fitting the true model
class is exactly on-model and admits calibration checks. The study sweeps
replicate counts, fits stationary and non-stationary dependence structures
to every dataset, and aggregates parameter recovery, DIC-based model
selection, and node-level field recovery.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.stats import spearmanr

from .gmrf import FactorizationError, factorize, sample
from .inference import (
    InferenceError,
    explore_hyperposterior,
    posterior_marginals,
    predict,
)
from .mesh import TriangleMesh, assemble_fem, build_structured_mesh, project
from .model import ModelConfig, ObservationSet
from .priors import CoherenceInputs, GaussianPrior, QuantileTargets, \
    solve_nonstationary_prior, stationary_prior
from .scores import dic, field_recovery_scores
from .spde import (
    CovariateField,
    HyperParams,
    NONSTATIONARY,
    STATIONARY,
    SpdeConfig,
    assemble_precision,
    local_params,
)

STUDY_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SimScenario:
    """Truth configuration and study design for the simulation harness.

    theta_true holds the dependence weights ((tau, kappa) intercepts, plus
    slopes in non-stationary mode); the noise precision is separate. In
    calibration mode the per-dataset truth is drawn from the fitting prior
    instead of being fixed.
    """

    truth_mode: str = NONSTATIONARY
    theta_true: tuple[float, ...] = (3.9, -1.3, -5.9, 3.1)
    beta0: float = 0.6
    beta_h: float = 0.4
    tau_eps: float = 40.0
    r_values: tuple[int, ...] = (1, 2, 5, 10)
    n_datasets: int = 50
    base_seed: int = 20240901
    extent: tuple[float, float, float, float] = (0.0, 500.0, 0.0, 700.0)
    resolution: float = 25.0
    n_stations: int = 233
    fit_modes: tuple[str, ...] = (STATIONARY, NONSTATIONARY)
    rho_median: float = 150.0
    rho_q: float = 500.0
    sigma_median: float = 0.2
    sigma_q: float = 2.0
    q_level: float = 0.9
    h0: float = 0.4
    c_rho: float = 0.8
    c_sigma: float = 1.3
    field_recovery_r: tuple[int, ...] = (1, 2, 5, 10)
    calibration: bool = False
    nonstationary_strategy: str = "ccd"
    warm_start_at_truth: bool = True

    def __post_init__(self):
        if self.truth_mode not in (STATIONARY, NONSTATIONARY):
            raise ValueError(f"unknown truth mode {self.truth_mode!r}")
        want = 2 if self.truth_mode == STATIONARY else 4
        if len(self.theta_true) != want:
            raise ValueError(
                f"theta_true must have {want} entries for {self.truth_mode} truth"
            )
        if self.n_datasets < 1:
            raise ValueError("n_datasets must be at least 1")

    def targets(self) -> QuantileTargets:
        return QuantileTargets(
            rho_median=self.rho_median,
            rho_q=self.rho_q,
            sigma_median=self.sigma_median,
            sigma_q=self.sigma_q,
            q_level=self.q_level,
        )

    def prior_for(self, mode: str) -> GaussianPrior:
        if mode == STATIONARY:
            return stationary_prior(self.targets())
        return solve_nonstationary_prior(
            self.targets(),
            CoherenceInputs(h0=self.h0, c_rho=self.c_rho, c_sigma=self.c_sigma),
        )

    def truth_hyperparams(self) -> HyperParams:
        t = self.theta_true
        if self.truth_mode == STATIONARY:
            return HyperParams([t[0]], [t[1]], math.log(self.tau_eps))
        return HyperParams([t[0], t[1]], [t[2], t[3]], math.log(self.tau_eps))

    def to_dict(self) -> dict:
        doc = {"schema_version": STUDY_SCHEMA_VERSION}
        doc.update(asdict(self))
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "SimScenario":
        fields = {k: v for k, v in doc.items() if k != "schema_version"}
        for key in ("theta_true", "r_values", "fit_modes", "field_recovery_r", "extent"):
            if key in fields and isinstance(fields[key], list):
                fields[key] = tuple(fields[key])
        return SimScenario(**fields)

    @staticmethod
    def load(path) -> "SimScenario":
        with open(path) as fh:
            return SimScenario.from_dict(json.load(fh))


def ridge_elevation(mesh: TriangleMesh, peak: float = 1.5) -> CovariateField:
    """Smooth synthetic mountain profile over the rectangle, scaled to [0, peak] km.

    A broad flattened ridge (plateau) with gentle along-axis modulation:
    lowlands on one side, a wide high-elevation interior, mimicking a
    coast-to-mountain transect. The exponent flattens the crest so a
    substantial share of the domain sits at mid-to-high elevation.
    """
    xy = mesh.nodes
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    width, height = hi - lo
    dx = (xy[:, 0] - lo[0] - 0.38 * width) / (0.18 * width)
    raw = np.exp(-0.5 * dx**2) * (
        0.7 + 0.3 * np.sin(np.pi * (xy[:, 1] - lo[1]) / height)
    )
    raw -= raw.min()
    return CovariateField(peak * raw / raw.max())


def place_stations(
    mesh: TriangleMesh, covariate: CovariateField, n: int, seed
) -> np.ndarray:
    """Seeded station placement, uniform in space but biased to low elevation.

    Candidates are proposed uniformly strictly inside the mesh bounding box
    and accepted with probability exp(-2 h), mimicking gauges concentrated
    in valleys.
    """
    rng = np.random.default_rng(seed)
    lo = mesh.nodes.min(axis=0)
    hi = mesh.nodes.max(axis=0)
    margin = 0.01 * (hi - lo)
    points = []
    proj_batch = 4 * n
    while len(points) < n:
        cand = np.column_stack(
            [
                rng.uniform(lo[0] + margin[0], hi[0] - margin[0], proj_batch),
                rng.uniform(lo[1] + margin[1], hi[1] - margin[1], proj_batch),
            ]
        )
        proj = project(mesh, cand)
        h = proj.interpolate(covariate.values)
        accept = rng.uniform(size=proj_batch) < np.exp(-2.0 * h)
        keep = cand[proj.inside & accept]
        for p in keep:
            points.append(p)
            if len(points) == n:
                break
    return np.array(points)


@dataclass(frozen=True)
class StudyInfra:
    """Shared mesh, covariate and stations for every dataset of a study."""

    mesh: TriangleMesh
    covariate: CovariateField
    stations: np.ndarray

    @staticmethod
    def build(scenario: SimScenario) -> "StudyInfra":
        mesh = build_structured_mesh(scenario.extent, scenario.resolution)
        covariate = ridge_elevation(mesh)
        stations = place_stations(
            mesh,
            covariate,
            scenario.n_stations,
            np.random.SeedSequence(scenario.base_seed, spawn_key=(0,)),
        )
        return StudyInfra(mesh=mesh, covariate=covariate, stations=stations)


def sample_dataset(
    scenario: SimScenario,
    mesh: TriangleMesh,
    covariate: CovariateField,
    stations: np.ndarray,
    r: int,
    seed,
    truth: HyperParams | None = None,
    beta: tuple[float, float] | None = None,
):
    """Draw one synthetic replicate dataset and its node-level truth.

    The r spatial fields are sampled from the GMRF prior and corrected onto
    the identifiability constraints (per-field zero integral; covariate
    orthogonality summed over fields, applied to the stacked field jointly).
    Returns (ObservationSet, truth dict with 'w', 'eta', 'theta').
    """
    rng = np.random.default_rng(seed)
    fem = assemble_fem(mesh)
    m = mesh.node_count
    if truth is None:
        truth = scenario.truth_hyperparams()
    beta0, beta_h = beta if beta is not None else (scenario.beta0, scenario.beta_h)
    config = (
        SpdeConfig.stationary(m)
        if truth.theta_tau.size == 1
        else SpdeConfig.elevation(covariate)
    )
    tau_field, kappa_field = local_params(config, truth)
    Q = assemble_precision(fem, tau_field, kappa_field)
    F = factorize(Q)
    w = sample(F, np.zeros(m), rng.integers(2**63), n_samples=r).T  # (r, m)

    # Conditioning by kriging on the stacked field: per-field zero-integral
    # rows plus one joint covariate row, using per-block solves only.
    c = fem.C_diag
    hc = covariate.values * c
    sol = F.solve(np.column_stack([c, hc]))
    tc, thc = sol.T
    nb = r + 1
    W = np.zeros((nb, nb))
    for j in range(r):
        W[j, j] = float(c @ tc)
        W[j, r] = W[r, j] = float(c @ thc)
    W[r, r] = r * float(hc @ thc)
    resid = np.empty(nb)
    for j in range(r):
        resid[j] = float(c @ w[j])
    resid[r] = sum(float(hc @ w[j]) for j in range(r))
    gamma = np.linalg.solve(W, resid)
    for j in range(r):
        w[j] -= gamma[j] * tc + gamma[r] * thc

    proj = project(mesh, stations)
    if not proj.inside.all():
        raise ValueError("stations must lie inside the mesh")
    h_st = proj.interpolate(covariate.values)
    n = len(stations)
    noise_sd = 1.0 / math.sqrt(truth.noise_precision)
    y = np.empty((n, r))
    for j in range(r):
        y[:, j] = (
            beta0
            + beta_h * h_st
            + proj.A @ w[j]
            + noise_sd * rng.standard_normal(n)
        )
    years = tuple(f"y{j + 1:02d}" for j in range(r))
    obs = ObservationSet(
        station_ids=tuple(f"s{i + 1:03d}" for i in range(n)),
        locations=stations,
        elevations=h_st,
        years=years,
        y=y,
    )
    eta = beta0 + beta_h * covariate.values[None, :] + w
    return obs, {"w": w, "eta": eta, "theta": truth, "beta": (beta0, beta_h)}


# -- fitting one dataset -------------------------------------------------------

#: For each fitted-model parameter, the truth attribute it estimates.
_TRUTH_KEYS = {
    "theta_tau": "theta_tau_1",
    "theta_kappa": "theta_kappa_1",
    "theta_tau_1": "theta_tau_1",
    "theta_tau_h": "theta_tau_h",
    "theta_kappa_1": "theta_kappa_1",
    "theta_kappa_h": "theta_kappa_h",
    "beta_0": "beta_0",
    "beta_h": "beta_h",
    "tau_eps": "tau_eps",
}

REPORT_PARAMS = tuple(_TRUTH_KEYS)


def truth_values(truth: HyperParams, beta0: float, beta_h: float) -> dict[str, float]:
    out = {
        "theta_tau_1": float(truth.theta_tau[0]),
        "theta_kappa_1": float(truth.theta_kappa[0]),
        "theta_tau_h": float(truth.theta_tau[1]) if truth.theta_tau.size > 1 else 0.0,
        "theta_kappa_h": (
            float(truth.theta_kappa[1]) if truth.theta_kappa.size > 1 else 0.0
        ),
        "beta_0": beta0,
        "beta_h": beta_h,
        "tau_eps": float(truth.noise_precision),
    }
    return out


def fit_dataset(
    scenario: SimScenario,
    infra: StudyInfra,
    obs: ObservationSet,
    mode: str,
    x0: np.ndarray | None,
    want_field: bool,
    truth_eta: np.ndarray | None,
):
    """Fit one model mode to one dataset; returns a plain record dict."""
    cfg = ModelConfig.create(infra.mesh, infra.covariate, mode, scenario.prior_for(mode))
    model = cfg.build(obs)
    strategy = "grid" if mode == STATIONARY else scenario.nonstationary_strategy
    hp = explore_hyperposterior(model, strategy=strategy, x0=x0)
    marg = posterior_marginals(hp, model)
    record = {"mode": mode, "params": {}}
    for name, summary in marg.items():
        if name.startswith("beta_") and name not in ("beta_0", "beta_h"):
            continue
        lo, hi = summary.interval(0.95)
        record["params"][name] = {
            "mean": summary.mean,
            "lo": lo,
            "hi": hi,
        }
    d = dic(hp, model)
    record["dic"] = d.dic
    record["d_bar"] = d.d_bar
    record["p_d"] = d.p_d
    if want_field:
        pred = predict(hp, model, targets="nodes")
        scores = field_recovery_scores(pred.eta_mean, pred.eta_sd, truth_eta.T)
        record["field"] = {
            "rmse_avg": scores.rmse_avg,
            "crps_avg": scores.crps_avg,
            "coverage_avg": scores.coverage_avg,
            "rmse_per_node": scores.rmse_per_node,
            "crps_per_node": scores.crps_per_node,
        }
    hp.drop_systems()
    return record


def run_one_cell(args):
    """Worker: sample dataset (r, d) and fit every configured mode."""
    scenario, infra, r, d = args
    seq = np.random.SeedSequence(scenario.base_seed, spawn_key=(1, r, d))
    truth_seq, data_seq = seq.spawn(2)
    if scenario.calibration:
        truth, beta = _draw_truth_from_prior(scenario, truth_seq)
    else:
        truth, beta = scenario.truth_hyperparams(), (scenario.beta0, scenario.beta_h)
    obs, truth_fields = sample_dataset(
        scenario,
        infra.mesh,
        infra.covariate,
        infra.stations,
        r,
        data_seq,
        truth=truth,
        beta=beta,
    )
    want_field = r in scenario.field_recovery_r
    truths = truth_values(truth, beta[0], beta[1])
    out = {"r": r, "dataset": d, "truths": truths, "fits": {}}
    for mode in scenario.fit_modes:
        x0 = None
        if scenario.warm_start_at_truth:
            x0 = _warm_start(scenario, truth, mode)
        try:
            out["fits"][mode] = fit_dataset(
                scenario, infra, obs, mode, x0, want_field, truth_fields["eta"]
            )
        except (InferenceError, FactorizationError, ValueError) as exc:
            out["fits"][mode] = {"error": f"{type(exc).__name__}: {exc}"}
    return out


def _warm_start(scenario, truth: HyperParams, mode: str) -> np.ndarray:
    log_tau_eps = truth.log_noise_precision
    tt, tk = truth.theta_tau, truth.theta_kappa
    if mode == STATIONARY:
        return np.array([tt[0], tk[0], log_tau_eps])
    if tt.size == 1:
        return np.array([tt[0], 0.0, tk[0], 0.0, log_tau_eps])
    return np.array([tt[0], tt[1], tk[0], tk[1], log_tau_eps])


def _draw_truth_from_prior(scenario: SimScenario, seed_seq):
    rng = np.random.default_rng(seed_seq)
    prior = scenario.prior_for(scenario.truth_mode)
    tau_eps = rng.gamma(prior.noise_shape, 1.0 / prior.noise_rate)
    if scenario.truth_mode == STATIONARY:
        theta = HyperParams(
            [rng.normal(prior.mu_tau, math.sqrt(prior.var_tau))],
            [rng.normal(prior.mu_kappa, math.sqrt(prior.var_kappa))],
            math.log(tau_eps),
        )
    else:
        theta = HyperParams(
            [
                rng.normal(prior.mu_tau, math.sqrt(prior.var_tau)),
                rng.normal(0.0, math.sqrt(prior.var_tau_h)),
            ],
            [
                rng.normal(prior.mu_kappa, math.sqrt(prior.var_kappa)),
                rng.normal(0.0, math.sqrt(prior.var_kappa_h)),
            ],
            math.log(tau_eps),
        )
    beta = (
        float(rng.normal(0.0, prior.beta_sd)),
        float(rng.normal(0.0, prior.beta_sd)),
    )
    return theta, beta


# -- aggregation ---------------------------------------------------------------


def run_study(scenario: SimScenario, jobs: int = 1, progress=None) -> dict:
    """Run the full factorial study and aggregate a JSON-ready report.

    Fully reproducible from the scenario's base seed; dataset-level tasks
    are independent and may run in parallel without changing any output.
    """
    infra = StudyInfra.build(scenario)
    tasks = [
        (scenario, infra, r, d)
        for r in scenario.r_values
        for d in range(scenario.n_datasets)
    ]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_one_cell, tasks, chunksize=1))
    else:
        results = []
        for i, task in enumerate(tasks):
            results.append(run_one_cell(task))
            if progress is not None:
                progress(i + 1, len(tasks))

    report = aggregate_study(scenario, infra, results)
    return report


def _interval_covers(rec, truth):
    return rec["lo"] <= truth <= rec["hi"]


def aggregate_study(scenario: SimScenario, infra: StudyInfra, results) -> dict:
    m = infra.mesh.node_count
    cells = {}
    delta_dic: dict[int, list] = {r: [] for r in scenario.r_values}
    failures = {}
    field_maps = {}

    for r in scenario.r_values:
        recs = [res for res in results if res["r"] == r]
        for mode in scenario.fit_modes:
            ok = [
                res
                for res in recs
                if "error" not in res["fits"].get(mode, {"error": "missing"})
            ]
            failures[f"{r}:{mode}"] = len(recs) - len(ok)
            params_stats = {}
            for name in REPORT_PARAMS:
                entries = [
                    (res["fits"][mode]["params"].get(name), res["truths"])
                    for res in ok
                ]
                entries = [(p, t) for p, t in entries if p is not None]
                if not entries:
                    continue
                means = np.array([p["mean"] for p, _ in entries])
                truths = np.array([t[_TRUTH_KEYS[name]] for _, t in entries])
                coverage = float(
                    np.mean([_interval_covers(p, t[_TRUTH_KEYS[name]]) for p, t in entries])
                )
                params_stats[name] = {
                    "truth": (
                        float(truths[0]) if not scenario.calibration else None
                    ),
                    "mean_avg": float(means.mean()),
                    "mean_q10": float(np.quantile(means, 0.1)),
                    "mean_q90": float(np.quantile(means, 0.9)),
                    "coverage95": coverage,
                    "rmse": float(np.sqrt(np.mean((means - truths) ** 2))),
                    "n": len(entries),
                }
            cell = {"params": params_stats, "n_ok": len(ok), "n_total": len(recs)}
            if r in scenario.field_recovery_r:
                field_ok = [res for res in ok if "field" in res["fits"][mode]]
                if field_ok:
                    cell["field"] = {
                        key: float(
                            np.mean(
                                [res["fits"][mode]["field"][key] for res in field_ok]
                            )
                        )
                        for key in ("rmse_avg", "crps_avg", "coverage_avg")
                    }
            cells[f"{r}:{mode}"] = cell

        if STATIONARY in scenario.fit_modes and NONSTATIONARY in scenario.fit_modes:
            for res in recs:
                fs = res["fits"].get(STATIONARY, {})
                fn = res["fits"].get(NONSTATIONARY, {})
                if "dic" in fs and "dic" in fn:
                    delta_dic[r].append(fs["dic"] - fn["dic"])

        # Node-level score difference maps (stationary minus non-stationary).
        if (
            r in scenario.field_recovery_r
            and STATIONARY in scenario.fit_modes
            and NONSTATIONARY in scenario.fit_modes
        ):
            acc_rmse = np.zeros(m)
            acc_crps = np.zeros(m)
            count = 0
            for res in recs:
                fs = res["fits"].get(STATIONARY, {})
                fn = res["fits"].get(NONSTATIONARY, {})
                if "field" in fs and "field" in fn:
                    acc_rmse += (
                        fs["field"]["rmse_per_node"] - fn["field"]["rmse_per_node"]
                    )
                    acc_crps += (
                        fs["field"]["crps_per_node"] - fn["field"]["crps_per_node"]
                    )
                    count += 1
            if count:
                d_rmse = acc_rmse / count
                d_crps = acc_crps / count
                corr = spearmanr(d_rmse, infra.covariate.values).statistic
                field_maps[str(r)] = {
                    "delta_rmse": d_rmse.tolist(),
                    "delta_crps": d_crps.tolist(),
                    "rank_corr_delta_rmse_elevation": float(corr),
                    "n_datasets": count,
                }

    misclassification = {}
    for r, values in delta_dic.items():
        if not values:
            continue
        arr = np.asarray(values)
        if scenario.truth_mode == NONSTATIONARY:
            mis = float(np.mean(arr <= 10.0))
        else:
            mis = float(np.mean(arr > 10.0))
        misclassification[str(r)] = mis

    return {
        "schema_version": STUDY_SCHEMA_VERSION,
        "scenario": scenario.to_dict(),
        "cells": cells,
        "delta_dic": {str(r): v for r, v in delta_dic.items()},
        "misclassification": misclassification,
        "failures": failures,
        "field_maps": field_maps,
        "node_x": infra.mesh.nodes[:, 0].tolist(),
        "node_y": infra.mesh.nodes[:, 1].tolist(),
        "elevation": infra.covariate.values.tolist(),
    }
