"""Observation data and the replicated latent Gaussian model structure.

Observations are a station-by-year response matrix with missing entries
allowed; the latent vector stacks one spatial weight block per year followed
by the year intercepts and the common covariate slope:

    u = (w_1, ..., w_r, beta_1, ..., beta_r, beta_h).

Identifiability constraints make each field integrate to zero (lumped
quadrature) and the covariate-weighted integrals sum to zero across years.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gmrf import ConstraintSet
from .mesh import TriangleMesh, FemMatrices, Projector, assemble_fem, project
from .priors import GaussianPrior
from .spde import (
    CovariateField,
    SpdeConfig,
    STATIONARY,
    NONSTATIONARY,
)

OBS_CSV_HEADER = "station_id,x_km,y_km,elevation_km,year,value_m"


def fnum(v) -> str:
    """Shortest round-trip decimal representation of a float for CSV output."""
    return repr(float(v))


@dataclass(frozen=True)
class ObservationSet:
    """Station locations/elevations and the station-by-year response matrix.

    y is (n_stations, n_years) with NaN marking missing station-years.
    Elevations here are the file-provided station elevations; model fitting
    uses the mesh covariate interpolated to the stations instead, so the two
    only coincide when the data were generated from the mesh covariate.
    """

    station_ids: tuple[str, ...]
    locations: np.ndarray
    elevations: np.ndarray
    years: tuple[str, ...]
    y: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float)
        elev = np.asarray(self.elevations, dtype=float)
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "station_ids", tuple(self.station_ids))
        object.__setattr__(self, "years", tuple(str(v) for v in self.years))
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "elevations", elev)
        object.__setattr__(self, "y", y)
        n, r = len(self.station_ids), len(self.years)
        if loc.shape != (n, 2) or elev.shape != (n,) or y.shape != (n, r):
            raise ValueError("observation arrays have inconsistent shapes")
        if np.any(np.isinf(y)):
            raise ValueError("observed values must be finite (NaN marks missing)")
        observed = ~np.isnan(y)
        if r and not observed.any(axis=0).all():
            missing = [self.years[j] for j in np.flatnonzero(~observed.any(axis=0))]
            raise ValueError(f"years with no observations: {missing}")

    @property
    def n_stations(self) -> int:
        return len(self.station_ids)

    @property
    def n_years(self) -> int:
        return len(self.years)

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.y)

    @property
    def n_observations(self) -> int:
        return int(self.observed.sum())

    def drop_station(self, index: int) -> "ObservationSet":
        """Return a copy with one station removed (leave-one-out folds)."""
        keep = np.ones(self.n_stations, dtype=bool)
        keep[index] = False
        return ObservationSet(
            station_ids=tuple(s for i, s in enumerate(self.station_ids) if keep[i]),
            locations=self.locations[keep],
            elevations=self.elevations[keep],
            years=self.years,
            y=self.y[keep],
        )

    def to_csv(self, path, manifest_line: str | None = None):
        with open(path, "w") as fh:
            if manifest_line is not None:
                fh.write(f"# {manifest_line}\n")
            fh.write(OBS_CSV_HEADER + "\n")
            for i, sid in enumerate(self.station_ids):
                for j, year in enumerate(self.years):
                    v = self.y[i, j]
                    if np.isnan(v):
                        continue
                    fh.write(
                        f"{sid},{fnum(self.locations[i, 0])},"
                        f"{fnum(self.locations[i, 1])},"
                        f"{fnum(self.elevations[i])},{year},{fnum(v)}\n"
                    )

    @staticmethod
    def from_csv(path) -> "ObservationSet":
        """Parse the observation CSV; malformed rows raise with line numbers."""
        stations: dict[str, tuple[float, float, float]] = {}
        records: dict[tuple[str, str], float] = {}
        years: set[str] = set()
        with open(path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if line == OBS_CSV_HEADER:
                    continue
                parts = line.split(",")
                if len(parts) != 6:
                    raise ValueError(
                        f"{path}:{lineno}: expected 6 fields, got {len(parts)}"
                    )
                sid, xs, ys, es, year, vs = (p.strip() for p in parts)
                try:
                    x, ycoord, elev, value = (
                        float(xs),
                        float(ys),
                        float(es),
                        float(vs),
                    )
                except ValueError:
                    raise ValueError(
                        f"{path}:{lineno}: non-numeric coordinate or value"
                    ) from None
                if not np.isfinite(value):
                    raise ValueError(f"{path}:{lineno}: non-finite value")
                if sid in stations:
                    if not np.allclose(
                        stations[sid], (x, ycoord, elev), rtol=0, atol=1e-9
                    ):
                        raise ValueError(
                            f"{path}:{lineno}: station {sid} location/elevation "
                            "contradicts an earlier row"
                        )
                else:
                    stations[sid] = (x, ycoord, elev)
                if (sid, year) in records:
                    raise ValueError(
                        f"{path}:{lineno}: duplicate observation for station "
                        f"{sid}, year {year}"
                    )
                records[(sid, year)] = value
                years.add(year)
        if not records:
            raise ValueError(f"{path}: no observations")
        station_ids = tuple(stations.keys())
        year_list = tuple(sorted(years))
        n, r = len(station_ids), len(year_list)
        y = np.full((n, r), np.nan)
        sindex = {s: i for i, s in enumerate(station_ids)}
        yindex = {v: j for j, v in enumerate(year_list)}
        for (sid, year), value in records.items():
            y[sindex[sid], yindex[year]] = value
        coords = np.array([stations[s][:2] for s in station_ids])
        elevs = np.array([stations[s][2] for s in station_ids])
        return ObservationSet(
            station_ids=station_ids,
            locations=coords,
            elevations=elevs,
            years=year_list,
            y=y,
        )


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to build a replicate model for a given dataset."""

    mesh: TriangleMesh
    fem: FemMatrices
    covariate: CovariateField
    mode: str
    prior: GaussianPrior

    def __post_init__(self):
        if self.mode not in (STATIONARY, NONSTATIONARY):
            raise ValueError(f"unknown mode {self.mode!r}")
        if len(self.covariate.values) != self.mesh.node_count:
            raise ValueError("covariate length does not match mesh")
        if self.mode == NONSTATIONARY and not self.prior.nonstationary:
            raise ValueError("non-stationary mode requires covariate-slope priors")

    @staticmethod
    def create(mesh, covariate, mode, prior) -> "ModelConfig":
        return ModelConfig(
            mesh=mesh,
            fem=assemble_fem(mesh),
            covariate=covariate,
            mode=mode,
            prior=prior,
        )

    def spde_config(self) -> SpdeConfig:
        if self.mode == STATIONARY:
            return SpdeConfig.stationary(self.mesh.node_count)
        return SpdeConfig.elevation(self.covariate)

    def build(self, obs: ObservationSet) -> "ReplicateModel":
        return ReplicateModel(config=self, obs=obs)


class ReplicateModel:
    """Latent Gaussian model with one spatial replicate per year.

    Builds the station projector, the per-year observation structure, and
    the identifiability constraints; the latent dimension is
    r * m + (r + 1).
    """

    def __init__(self, config: ModelConfig, obs: ObservationSet):
        self.config = config
        self.obs = obs
        self.mesh = config.mesh
        self.fem = config.fem
        self.covariate = config.covariate
        self.prior = config.prior
        self.spde = config.spde_config()

        proj = project(self.mesh, obs.locations)
        if not proj.inside.all():
            outside = [obs.station_ids[i] for i in proj.outside_records()]
            raise ValueError(f"stations outside the mesh: {outside}")
        self.projector: Projector = proj
        # Station covariate values come from the mesh covariate through the
        # projector so the mean effect and the dependence structure share one
        # covariate representation.
        self.station_h = proj.interpolate(self.covariate.values)

        self.m = self.mesh.node_count
        self.r = obs.n_years
        self.n_beta = self.r + 1
        self.latent_dim = self.r * self.m + self.n_beta

        observed = obs.observed
        self.year_rows = [np.flatnonzero(observed[:, j]) for j in range(self.r)]
        self.year_proj = [proj.A[rows] for rows in self.year_rows]
        self.year_h = [self.station_h[rows] for rows in self.year_rows]
        self.year_y = [obs.y[rows, j] for j, rows in enumerate(self.year_rows)]
        self.n_obs = int(observed.sum())

        # Keys identifying years that share the same observed station set,
        # letting downstream solvers factor each distinct block only once.
        self.block_keys = [rows.tobytes() for rows in self.year_rows]
        self.block_gram: dict[bytes, object] = {}
        for j, key in enumerate(self.block_keys):
            if key not in self.block_gram:
                A = self.year_proj[j].tocsr()
                gram = (A.T @ A).tocsc()
                self.block_gram[key] = ((gram + gram.T) * 0.5).tocsc()

    def nb_dim(self) -> int:
        """Number of fixed effects (r year intercepts plus the slope)."""
        return self.n_beta

    def constraint_set(self) -> ConstraintSet:
        """Zero-integral rows per replicate plus the joint covariate row."""
        m, r = self.m, self.r
        c = self.fem.C_diag
        hc = self.covariate.values * c
        A = np.zeros((r + 1, self.latent_dim))
        for j in range(r):
            A[j, j * m : (j + 1) * m] = c
            A[r, j * m : (j + 1) * m] = hc
        return ConstraintSet(A=A, e=np.zeros(r + 1))

    def constraint_vectors(self) -> tuple[np.ndarray, np.ndarray]:
        """The per-block constraint vectors (c, hc) used by block solvers."""
        c = self.fem.C_diag
        return c, self.covariate.values * c

    def split_latent(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split a latent vector into the (r, m) field block and the betas."""
        u = np.asarray(u, dtype=float)
        w = u[: self.r * self.m].reshape(self.r, self.m)
        return w, u[self.r * self.m :]

    def join_latent(self, w: np.ndarray, beta: np.ndarray) -> np.ndarray:
        return np.concatenate([np.asarray(w).ravel(), np.asarray(beta)])

    def linear_predictor(self, u: np.ndarray) -> list[np.ndarray]:
        """Per-year linear predictor at the observed stations."""
        w, beta = self.split_latent(u)
        out = []
        for j in range(self.r):
            out.append(
                self.year_proj[j] @ w[j] + beta[j] + self.year_h[j] * beta[self.r]
            )
        return out

    def residual_sumsq(self, w: np.ndarray, beta: np.ndarray) -> float:
        """Sum of squared data residuals at a latent state (w, beta)."""
        total = 0.0
        for j in range(self.r):
            resid = (
                self.year_y[j]
                - self.year_proj[j] @ w[j]
                - beta[j]
                - self.year_h[j] * beta[self.r]
            )
            total += float(resid @ resid)
        return total
