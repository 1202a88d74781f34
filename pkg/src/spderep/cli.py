"""Command-line front end: prior elicitation, fitting, prediction, CV, simulation.

Every output file carries a manifest (config hash over the resolved
arguments and input file digests, the seed, and the code version) and is
byte-reproducible from the same inputs regardless of the parallelism
degree.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .inference import (
    InferenceError,
    explore_hyperposterior,
    posterior_marginals,
    predict,
)
from .mesh import (
    MeshError,
    build_structured_mesh,
    read_covariate_csv,
    read_mesh_json,
    write_mesh_json,
)
from .model import ModelConfig, ObservationSet, fnum
from .priors import (
    CoherenceInputs,
    ElicitationError,
    GaussianPrior,
    QuantileTargets,
    solve_nonstationary_prior,
    stationary_prior,
)
from .scores import dic, loo_cv
from .simstudy import SimScenario, StudyInfra, run_study, sample_dataset
from .spde import CovariateField, NONSTATIONARY, STATIONARY

SCHEMA_VERSION = 1


def _hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def make_manifest(command: str, args: dict, input_paths: dict, seed=None) -> dict:
    resolved = {
        "command": command,
        "args": {k: v for k, v in sorted(args.items())},
        "inputs": {
            name: _hash_file(path)
            for name, path in sorted(input_paths.items())
            if path is not None
        },
    }
    digest = hashlib.sha256(
        json.dumps(resolved, sort_keys=True).encode()
    ).hexdigest()
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config_hash": digest,
        "seed": seed,
        "code_version": __version__,
    }


def write_json(path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def manifest_line(manifest: dict) -> str:
    return "manifest: " + json.dumps(manifest, sort_keys=True)


def _load_mesh_and_covariate(args):
    if args.mesh:
        mesh, covariate = read_mesh_json(args.mesh)
    else:
        if args.extent is None or args.resolution is None:
            raise ValueError("provide --mesh or both --extent and --resolution")
        mesh = build_structured_mesh(tuple(args.extent), args.resolution)
        covariate = None
    if args.covariate:
        covariate = read_covariate_csv(args.covariate, mesh.node_count)
    if covariate is None:
        raise ValueError(
            "no covariate: supply --covariate or a mesh JSON with a "
            "'covariate' field"
        )
    return mesh, CovariateField(covariate)


def _load_prior(args, mode: str) -> GaussianPrior:
    if args.prior:
        return GaussianPrior.load(args.prior)
    if args.targets:
        doc = json.loads(Path(args.targets).read_text())
        return _prior_from_targets_doc(doc, mode)
    raise ValueError("provide --prior or --targets")


def _prior_from_targets_doc(doc: dict, mode: str) -> GaussianPrior:
    targets = QuantileTargets(
        rho_median=doc["rho_median"],
        rho_q=doc["rho_q"],
        sigma_median=doc["sigma_median"],
        sigma_q=doc["sigma_q"],
        q_level=doc.get("q_level", 0.9),
    )
    if mode == NONSTATIONARY:
        coherence = CoherenceInputs(
            h0=doc["h0"], c_rho=doc["c_rho"], c_sigma=doc["c_sigma"]
        )
        return solve_nonstationary_prior(targets, coherence)
    return stationary_prior(targets)


def _default_jobs(args) -> int:
    if getattr(args, "jobs", None):
        return args.jobs
    env = os.environ.get("SPDEREP_JOBS")
    return int(env) if env else 1


# -- subcommands --------------------------------------------------------------


def cmd_prior_solve(args) -> int:
    doc = json.loads(Path(args.targets).read_text())
    manifest = make_manifest(
        "prior solve", {"targets": args.targets}, {"targets": args.targets}
    )
    if "batch" in doc:
        out = {"schema_version": SCHEMA_VERSION, "manifest": manifest, "priors": {}}
        for name, sub in doc["batch"].items():
            mode = sub.get("mode", NONSTATIONARY)
            out["priors"][name] = _prior_from_targets_doc(sub, mode).to_dict()
    else:
        mode = doc.get("mode", NONSTATIONARY if "h0" in doc else STATIONARY)
        prior = _prior_from_targets_doc(doc, mode)
        out = prior.to_dict()
        out["manifest"] = manifest
    write_json(args.out, out)
    print(f"wrote {args.out}")
    return 0


def _build_model(args):
    mesh, covariate = _load_mesh_and_covariate(args)
    obs = ObservationSet.from_csv(args.obs)
    prior = _load_prior(args, args.mode)
    cfg = ModelConfig.create(mesh, covariate, args.mode, prior)
    return cfg, obs


def cmd_fit(args) -> int:
    cfg, obs = _build_model(args)
    manifest = make_manifest(
        "fit",
        {
            "mode": args.mode,
            "strategy": args.strategy,
            "obs": args.obs,
            "mesh": args.mesh,
        },
        {"obs": args.obs, "mesh": args.mesh, "covariate": args.covariate,
         "prior": args.prior, "targets": args.targets},
        seed=args.seed,
    )
    model = cfg.build(obs)
    hp = explore_hyperposterior(model, strategy=args.strategy)
    marginals = posterior_marginals(hp, model)
    d = dic(hp, model)

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "manifest": manifest,
        "mode": args.mode,
        "years": list(obs.years),
        "n_stations": obs.n_stations,
        "n_observations": obs.n_observations,
        "parameters": {k: v.to_dict() for k, v in sorted(marginals.items())},
        "dic": {"dic": d.dic, "d_bar": d.d_bar, "p_d": d.p_d},
    }
    write_json(outdir / "fit_summary.json", summary)
    grid = hp.grid_dump()
    grid["manifest"] = manifest
    grid["schema_version"] = SCHEMA_VERSION
    write_json(outdir / "hyperposterior.json", grid)

    pred = predict(hp, model, targets=obs.locations)
    with open(outdir / "predictive.csv", "w") as fh:
        fh.write(f"# {manifest_line(manifest)}\n")
        fh.write("target_id,year,mean,sd_eta,sd_y\n")
        for i, sid in enumerate(obs.station_ids):
            for j, year in enumerate(obs.years):
                fh.write(
                    f"{sid},{year},{fnum(pred.eta_mean[i, j])},"
                    f"{fnum(pred.eta_sd[i, j])},{fnum(pred.y_sd[i, j])}\n"
                )
    print(f"fit complete: DIC={d.dic:.2f} (d_bar={d.d_bar:.2f}, p_d={d.p_d:.2f})")
    print(f"wrote {outdir}/fit_summary.json, hyperposterior.json, predictive.csv")
    return 0


def cmd_predict(args) -> int:
    cfg, obs = _build_model(args)
    manifest = make_manifest(
        "predict",
        {"mode": args.mode, "strategy": args.strategy, "targets_file": args.targets_file},
        {"obs": args.obs, "mesh": args.mesh, "covariate": args.covariate,
         "prior": args.prior, "targets": args.targets,
         "targets_file": args.targets_file},
        seed=args.seed,
    )
    model = cfg.build(obs)
    hp = explore_hyperposterior(model, strategy=args.strategy)

    if args.at_nodes:
        ids = [f"node{i}" for i in range(model.m)]
        pred = predict(hp, model, targets="nodes")
    else:
        if not args.targets_file:
            raise ValueError("provide --targets-file or --at-nodes")
        ids, coords = [], []
        with open(args.targets_file) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#") or line.startswith("target_id"):
                    continue
                parts = line.split(",")
                if len(parts) < 3:
                    raise ValueError(
                        f"{args.targets_file}:{lineno}: expected target_id,x_km,y_km"
                    )
                ids.append(parts[0])
                coords.append((float(parts[1]), float(parts[2])))
        pred = predict(hp, model, targets=np.asarray(coords))

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "predictive.csv", "w") as fh:
        fh.write(f"# {manifest_line(manifest)}\n")
        fh.write("target_id,year,mean,sd_eta,sd_y\n")
        for i, tid in enumerate(ids):
            for j, year in enumerate(model.obs.years):
                fh.write(
                    f"{tid},{year},{fnum(pred.eta_mean[i, j])},"
                    f"{fnum(pred.eta_sd[i, j])},{fnum(pred.y_sd[i, j])}\n"
                )
    print(f"wrote {outdir}/predictive.csv ({len(ids)} targets)")
    return 0


def cmd_cv(args) -> int:
    cfg, obs = _build_model(args)
    jobs = _default_jobs(args)
    manifest = make_manifest(
        "cv",
        {"mode": args.mode, "cv_mode": args.cv_mode, "strategy": args.strategy},
        {"obs": args.obs, "mesh": args.mesh, "covariate": args.covariate,
         "prior": args.prior, "targets": args.targets},
        seed=args.seed,
    )
    report = loo_cv(
        cfg, obs, cv_mode=args.cv_mode, strategy=args.strategy, jobs=jobs,
        with_dic=True,
    )
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    report.write_rows_csv(outdir / "cv_scores.csv", manifest_line(manifest))
    summary = {
        "schema_version": SCHEMA_VERSION,
        "manifest": manifest,
    }
    summary.update(report.summary_dict())
    write_json(outdir / "cv_summary.json", summary)
    print(
        f"cv complete: rmse_avg={report.rmse_avg:.5f} crps_avg={report.crps_avg:.5f}"
    )
    return 0


def cmd_simulate(args) -> int:
    scenario = SimScenario.load(args.scenario)
    if args.seed is not None:
        scenario = SimScenario.from_dict(
            {**scenario.to_dict(), "base_seed": args.seed}
        )
    manifest = make_manifest(
        "simulate",
        {"scenario": args.scenario, "r": args.r},
        {"scenario": args.scenario},
        seed=scenario.base_seed,
    )
    infra = StudyInfra.build(scenario)
    r = args.r if args.r is not None else scenario.r_values[0]
    obs, truth = sample_dataset(
        scenario,
        infra.mesh,
        infra.covariate,
        infra.stations,
        r,
        np.random.SeedSequence(scenario.base_seed, spawn_key=(1, r, 0)),
    )
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    obs.to_csv(outdir / "observations.csv", manifest_line(manifest))
    write_mesh_json(
        outdir / "mesh.json", infra.mesh, infra.covariate.values, manifest=manifest
    )
    truth_doc = {
        "schema_version": SCHEMA_VERSION,
        "manifest": manifest,
        "theta": truth["theta"].theta_vector().tolist(),
        "beta": list(truth["beta"]),
        "w": truth["w"].tolist(),
        "eta": truth["eta"].tolist(),
    }
    write_json(outdir / "truth.json", truth_doc)
    print(f"wrote {outdir}/observations.csv, mesh.json, truth.json (r={r})")
    return 0


def cmd_study(args) -> int:
    scenario = SimScenario.load(args.scenario)
    if args.seed is not None:
        scenario = SimScenario.from_dict(
            {**scenario.to_dict(), "base_seed": args.seed}
        )
    jobs = _default_jobs(args)
    manifest = make_manifest(
        "study",
        {"scenario": args.scenario},
        {"scenario": args.scenario},
        seed=scenario.base_seed,
    )

    def progress(done, total):
        if args.verbose:
            print(f"  dataset task {done}/{total}", flush=True)

    report = run_study(scenario, jobs=jobs, progress=progress)
    report["manifest"] = manifest
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_json(outdir / "study_report.json", report)
    _write_fig_tables(outdir, report, manifest)
    print(f"study complete; wrote {outdir}/study_report.json and fig8..fig12 CSVs")
    return 0


def _write_fig_tables(outdir: Path, report: dict, manifest: dict):
    head = f"# {manifest_line(manifest)}\n"
    with open(outdir / "fig8_delta_dic.csv", "w") as fh:
        fh.write(head + "r,dataset,delta_dic\n")
        for r, values in sorted(report["delta_dic"].items(), key=lambda kv: int(kv[0])):
            for d, v in enumerate(values):
                fh.write(f"{r},{d},{fnum(v)}\n")
    with open(outdir / "fig9_posterior_means.csv", "w") as fh:
        fh.write(head + "r,fit_mode,param,truth,mean_avg,mean_q10,mean_q90\n")
        for cell_key, cell in sorted(report["cells"].items()):
            r, mode = cell_key.split(":")
            for name, st in sorted(cell["params"].items()):
                truth = "" if st["truth"] is None else fnum(st["truth"])
                fh.write(
                    f"{r},{mode},{name},{truth},{fnum(st['mean_avg'])},"
                    f"{fnum(st['mean_q10'])},{fnum(st['mean_q90'])}\n"
                )
    with open(outdir / "fig10_coverage_rmse.csv", "w") as fh:
        fh.write(head + "r,fit_mode,param,coverage95,rmse\n")
        for cell_key, cell in sorted(report["cells"].items()):
            r, mode = cell_key.split(":")
            for name, st in sorted(cell["params"].items()):
                fh.write(
                    f"{r},{mode},{name},{fnum(st['coverage95'])},"
                    f"{fnum(st['rmse'])}\n"
                )
    with open(outdir / "fig11_field_scores.csv", "w") as fh:
        fh.write(head + "r,fit_mode,rmse_avg,crps_avg,coverage_avg\n")
        for cell_key, cell in sorted(report["cells"].items()):
            if "field" not in cell:
                continue
            r, mode = cell_key.split(":")
            f = cell["field"]
            fh.write(
                f"{r},{mode},{fnum(f['rmse_avg'])},{fnum(f['crps_avg'])},"
                f"{fnum(f['coverage_avg'])}\n"
            )
    with open(outdir / "fig12_score_maps.csv", "w") as fh:
        fh.write(head + "r,node,x_km,y_km,elevation_km,delta_rmse,delta_crps\n")
        xs, ys, elev = report["node_x"], report["node_y"], report["elevation"]
        for r, m in sorted(report["field_maps"].items(), key=lambda kv: int(kv[0])):
            for i, (dr, dc) in enumerate(zip(m["delta_rmse"], m["delta_crps"])):
                fh.write(
                    f"{r},{i},{fnum(xs[i])},{fnum(ys[i])},{fnum(elev[i])},"
                    f"{fnum(dr)},{fnum(dc)}\n"
                )


# -- argument parsing ----------------------------------------------------------


def _add_model_args(p):
    p.add_argument("--mesh", help="mesh JSON file")
    p.add_argument("--extent", type=float, nargs=4, metavar=("X0", "X1", "Y0", "Y1"))
    p.add_argument("--resolution", type=float, help="structured mesh edge length (km)")
    p.add_argument("--covariate", help="per-node covariate CSV (node_index,value)")
    p.add_argument("--obs", required=True, help="observation CSV")
    p.add_argument(
        "--mode", choices=[STATIONARY, NONSTATIONARY], default=NONSTATIONARY
    )
    p.add_argument("--prior", help="prior JSON (from 'prior solve')")
    p.add_argument("--targets", help="quantile targets JSON (elicit on the fly)")
    p.add_argument("--strategy", choices=["auto", "grid", "ccd"], default="auto")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spderep",
        description=(
            "Bayesian non-stationary SPDE spatial modelling with replicated "
            "fields"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_prior = sub.add_parser("prior", help="prior elicitation")
    prior_sub = p_prior.add_subparsers(dest="prior_command", required=True)
    p_solve = prior_sub.add_parser("solve", help="solve hyperpriors from targets")
    p_solve.add_argument("--targets", required=True, help="targets JSON file")
    p_solve.add_argument("--out", required=True, help="output prior JSON path")
    p_solve.set_defaults(func=cmd_prior_solve)

    p_fit = sub.add_parser("fit", help="fit the replicate model")
    _add_model_args(p_fit)
    p_fit.add_argument("--jobs", type=int, default=None)
    p_fit.set_defaults(func=cmd_fit)

    p_pred = sub.add_parser("predict", help="predict at target locations")
    _add_model_args(p_pred)
    p_pred.add_argument("--targets-file", help="CSV target_id,x_km,y_km")
    p_pred.add_argument(
        "--at-nodes", action="store_true", help="predict at every mesh node"
    )
    p_pred.set_defaults(func=cmd_predict)

    p_cv = sub.add_parser("cv", help="leave-one-station-out cross-validation")
    _add_model_args(p_cv)
    p_cv.add_argument("--cv-mode", choices=["refit", "fixed"], default="refit")
    p_cv.add_argument("--jobs", type=int, default=None)
    p_cv.set_defaults(func=cmd_cv)

    p_sim = sub.add_parser("simulate", help="sample a synthetic dataset")
    p_sim.add_argument("--scenario", required=True, help="scenario JSON")
    p_sim.add_argument("--r", type=int, default=None, help="replicate count")
    p_sim.add_argument("--seed", type=int, default=None, help="override base seed")
    p_sim.add_argument("--out", required=True)
    p_sim.set_defaults(func=cmd_simulate)

    p_study = sub.add_parser("study", help="run the factorial simulation study")
    p_study.add_argument("--scenario", required=True, help="scenario JSON")
    p_study.add_argument("--seed", type=int, default=None, help="override base seed")
    p_study.add_argument("--jobs", type=int, default=None)
    p_study.add_argument("--verbose", action="store_true")
    p_study.add_argument("--out", required=True)
    p_study.set_defaults(func=cmd_study)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ElicitationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MeshError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InferenceError as exc:
        print(f"inference error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
