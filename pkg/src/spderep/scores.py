"""Model evaluation: DIC, Gaussian CRPS, leave-one-out CV, field recovery."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .inference import (
    HyperPosterior,
    LatentSystem,
    explore_hyperposterior,
    predict,
)
from .model import ModelConfig, ObservationSet, ReplicateModel, fnum
from .spde import HyperParams

LOG_2PI = math.log(2.0 * math.pi)
_SQRT_PI = math.sqrt(math.pi)
_Z95 = float(ndtri(0.975))


@dataclass(frozen=True)
class DicResult:
    """Deviance information criterion with its two components."""

    dic: float
    d_bar: float
    p_d: float


def dic(hp: HyperPosterior, model: ReplicateModel) -> DicResult:
    """DIC = D_bar + p_D for a fitted replicate model.

    D_bar is the posterior expectation of the deviance, computed in closed
    form per grid point (the deviance is quadratic in the Gaussian latent
    state); the plug-in deviance is evaluated at the posterior mean of the
    latent state and noise precision jointly.
    """
    n = model.n_obs
    d_bar = 0.0
    w_mean = np.zeros((model.r, model.m))
    beta_mean = np.zeros(model.nb_dim())
    tau_mean = 0.0
    for p in hp.points:
        system = p.ensure_system(model)
        resid_sq, trace = system.fit_summaries()
        d_k = -n * (math.log(p.tau_eps) - LOG_2PI) + p.tau_eps * (resid_sq + trace)
        d_bar += p.weight * d_k
        w_mean += p.weight * p.w_mean
        beta_mean += p.weight * p.beta_mean
        tau_mean += p.weight * p.tau_eps
    resid_hat = model.residual_sumsq(w_mean, beta_mean)
    d_hat = -n * (math.log(tau_mean) - LOG_2PI) + tau_mean * resid_hat
    p_d = d_bar - d_hat
    return DicResult(dic=d_bar + p_d, d_bar=d_bar, p_d=p_d)


def crps_gaussian(mean, sd, y):
    """Closed-form CRPS of a Gaussian predictive distribution.

    crps = sd * (z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi)), z = (y - mean)/sd.
    Vectorized; requires sd > 0.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(sd <= 0):
        raise ValueError("sd must be positive")
    z = (y - mean) / sd
    phi = np.exp(-0.5 * z**2) / math.sqrt(2.0 * math.pi)
    val = sd * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * phi - 1.0 / _SQRT_PI)
    return val[()]


@dataclass
class ScoreReport:
    """Cross-validation scores with their per-station-year breakdown."""

    years: tuple[str, ...]
    rows: list[tuple[str, str, float, float, float, float]]
    rmse_per_year: dict[str, float]
    rmse_avg: float
    crps_avg: float
    skipped_stations: tuple[str, ...] = ()
    dic: DicResult | None = None

    def summary_dict(self) -> dict:
        out = {
            "rmse_avg": self.rmse_avg,
            "crps_avg": self.crps_avg,
            "rmse_per_year": dict(self.rmse_per_year),
            "n_rows": len(self.rows),
            "skipped_stations": list(self.skipped_stations),
        }
        if self.dic is not None:
            out.update(
                {"dic": self.dic.dic, "d_bar": self.dic.d_bar, "p_d": self.dic.p_d}
            )
        return out

    def write_rows_csv(self, path, manifest_line: str | None = None):
        with open(path, "w") as fh:
            if manifest_line is not None:
                fh.write(f"# {manifest_line}\n")
            fh.write("station_id,year,crps,sq_error,pred_mean,pred_sd\n")
            for sid, year, crps, sq, mean, sd in self.rows:
                fh.write(
                    f"{sid},{year},{fnum(crps)},{fnum(sq)},{fnum(mean)},{fnum(sd)}\n"
                )


def _fold_prediction(
    cfg: ModelConfig,
    y: ObservationSet,
    station: int,
    cv_mode: str,
    strategy: str,
    full_hp: HyperPosterior | None,
    warm_mode: np.ndarray | None,
):
    """Predictive mean/sd for all observed years of one held-out station."""
    reduced = y.drop_station(station)
    model = cfg.build(reduced)
    location = y.locations[station][None, :]
    if cv_mode == "refit":
        hp = explore_hyperposterior(model, strategy=strategy, x0=warm_mode)
        pred = predict(hp, model, targets=location)
        noise_var = hp.expected_noise_variance()
        mode_theta = hp.mode_theta
    elif cv_mode == "fixed":
        # Keep the full-data hyperposterior grid and weights; refresh only
        # the latent conditionals with the reduced data.
        assert full_hp is not None
        from .mesh import project

        proj = project(cfg.mesh, location)
        if not proj.inside.all():
            raise ValueError("held-out station outside the mesh")
        h_t = proj.interpolate(cfg.covariate.values)
        mean_acc = np.zeros((1, model.r))
        m2_acc = np.zeros((1, model.r))
        for p in full_hp.points:
            system = LatentSystem(
                model, HyperParams.from_vector(p.theta, model.spde)
            )
            means, variances = system.target_stats(proj.A, h_t)
            mean_acc += p.weight * means
            m2_acc += p.weight * (variances + means**2)
        eta_var = np.maximum(m2_acc - mean_acc**2, 0.0)
        noise_var = full_hp.expected_noise_variance()
        pred = None
        mode_theta = full_hp.mode_theta
        return mean_acc[0], np.sqrt(eta_var[0] + noise_var), mode_theta
    else:
        raise ValueError(f"unknown cv mode {cv_mode!r}")
    return pred.eta_mean[0], pred.y_sd[0], mode_theta


def loo_cv(
    cfg: ModelConfig,
    y: ObservationSet,
    cv_mode: str = "refit",
    strategy: str = "auto",
    jobs: int = 1,
    with_dic: bool = False,
) -> ScoreReport:
    """Leave-one-station-out cross-validation.

    All annual observations of one station are held out at a time; the
    predictive distribution at its location uses the Gaussian approximation
    with variance equal to the posterior variance of the linear predictor
    plus the posterior expectation of the noise variance. cv_mode 'refit'
    re-explores the hyperposterior per fold (warm-started at the full-data
    mode); 'fixed' reuses the full-data grid and weights.
    """
    if y.n_stations < 2:
        raise ValueError("leave-one-out needs at least 2 stations")
    full_model = cfg.build(y)
    full_hp = explore_hyperposterior(full_model, strategy=strategy)
    dic_result = dic(full_hp, full_model) if with_dic else None
    warm = full_hp.mode_theta
    full_hp.drop_systems()

    observed = y.observed
    skipped = tuple(
        y.station_ids[i] for i in range(y.n_stations) if not observed[i].any()
    )
    for sid in skipped:
        warnings.warn(f"station {sid} has no observations; skipped in CV")
    folds = [i for i in range(y.n_stations) if observed[i].any()]

    def run_fold(i):
        mean, sd, _ = _fold_prediction(
            cfg, y, i, cv_mode, strategy, full_hp, warm
        )
        return mean, sd

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(
                pool.map(
                    _fold_worker,
                    [(cfg, y, i, cv_mode, strategy, full_hp, warm) for i in folds],
                )
            )
    else:
        results = [run_fold(i) for i in folds]

    rows = []
    sq_by_year: dict[str, list[float]] = {year: [] for year in y.years}
    crps_by_year: dict[str, list[float]] = {year: [] for year in y.years}
    for i, (mean, sd) in zip(folds, results):
        for j, year in enumerate(y.years):
            if not observed[i, j]:
                continue
            obs_val = y.y[i, j]
            sq = float((mean[j] - obs_val) ** 2)
            crps = float(crps_gaussian(mean[j], sd[j], obs_val))
            rows.append(
                (y.station_ids[i], year, crps, sq, float(mean[j]), float(sd[j]))
            )
            sq_by_year[year].append(sq)
            crps_by_year[year].append(crps)
    rmse_per_year = {
        year: math.sqrt(float(np.mean(v))) for year, v in sq_by_year.items() if v
    }
    rmse_avg = float(np.mean(list(rmse_per_year.values())))
    crps_avg = float(
        np.mean([np.mean(v) for v in crps_by_year.values() if v])
    )
    return ScoreReport(
        years=y.years,
        rows=rows,
        rmse_per_year=rmse_per_year,
        rmse_avg=rmse_avg,
        crps_avg=crps_avg,
        skipped_stations=skipped,
        dic=dic_result,
    )


def _fold_worker(args):
    cfg, y, i, cv_mode, strategy, full_hp, warm = args
    mean, sd, _ = _fold_prediction(cfg, y, i, cv_mode, strategy, full_hp, warm)
    return mean, sd


@dataclass
class FieldRecovery:
    """Node-level recovery scores of the latent linear predictor.

    Per-node arrays are averaged over replicates; the scalar averages pool
    all (node, replicate) pairs.
    """

    rmse_per_node: np.ndarray
    crps_per_node: np.ndarray
    coverage_per_node: np.ndarray
    rmse_avg: float
    crps_avg: float
    coverage_avg: float


def field_recovery_scores(
    eta_mean: np.ndarray, eta_sd: np.ndarray, truth: np.ndarray
) -> FieldRecovery:
    """Compare nodewise predictions (mean, sd) against simulated truth.

    All arrays are (n_nodes, r). Coverage counts nodes whose central 95%
    predictive interval contains the true linear predictor.
    """
    eta_mean = np.asarray(eta_mean, dtype=float)
    eta_sd = np.asarray(eta_sd, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if eta_mean.shape != truth.shape or eta_sd.shape != truth.shape:
        raise ValueError("prediction and truth arrays must share a shape")
    err = eta_mean - truth
    sq = err**2
    covered = np.abs(err) <= _Z95 * eta_sd
    crps = crps_gaussian(eta_mean, np.maximum(eta_sd, 1e-300), truth)
    return FieldRecovery(
        rmse_per_node=np.sqrt(sq.mean(axis=1)),
        crps_per_node=crps.mean(axis=1),
        coverage_per_node=covered.mean(axis=1),
        rmse_avg=float(np.sqrt(sq.mean())),
        crps_avg=float(crps.mean()),
        coverage_avg=float(covered.mean()),
    )
