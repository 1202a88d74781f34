import math

import numpy as np
import pytest

from spderep.mesh import build_structured_mesh
from spderep.model import ModelConfig, ObservationSet
from spderep.priors import (
    CoherenceInputs,
    QuantileTargets,
    solve_nonstationary_prior,
    stationary_prior,
)
from spderep.spde import CovariateField, HyperParams


PAPER_TARGETS = QuantileTargets(
    rho_median=150.0, rho_q=500.0, sigma_median=0.2, sigma_q=2.0, q_level=0.9
)
PAPER_COHERENCE = CoherenceInputs(h0=0.4, c_rho=0.8, c_sigma=1.3)


@pytest.fixture(scope="session")
def ns_prior():
    return solve_nonstationary_prior(PAPER_TARGETS, PAPER_COHERENCE)


@pytest.fixture(scope="session")
def s_prior():
    return stationary_prior(PAPER_TARGETS)


@pytest.fixture(scope="session")
def small_mesh():
    return build_structured_mesh((0.0, 100.0, 0.0, 80.0), 20.0)


@pytest.fixture(scope="session")
def small_covariate(small_mesh):
    xy = small_mesh.nodes
    vals = 0.75 + 0.75 * np.sin(xy[:, 0] / 40.0) * np.cos(xy[:, 1] / 30.0)
    return CovariateField(vals)


def make_obs(rng, n_stations=12, years=("2008", "2009"), missing=()):
    locs = np.column_stack(
        [rng.uniform(5.0, 95.0, n_stations), rng.uniform(5.0, 75.0, n_stations)]
    )
    y = rng.normal(1.0, 0.5, (n_stations, len(years)))
    for i, j in missing:
        y[i, j] = np.nan
    return ObservationSet(
        station_ids=tuple(f"s{i}" for i in range(n_stations)),
        locations=locs,
        elevations=np.zeros(n_stations),
        years=years,
        y=y,
    )


@pytest.fixture()
def small_obs():
    return make_obs(np.random.default_rng(42), missing=((3, 0), (7, 1)))


@pytest.fixture()
def small_ns_model(small_mesh, small_covariate, ns_prior, small_obs):
    cfg = ModelConfig.create(small_mesh, small_covariate, "nonstationary", ns_prior)
    return cfg.build(small_obs)


@pytest.fixture()
def small_s_model(small_mesh, small_covariate, s_prior, small_obs):
    cfg = ModelConfig.create(small_mesh, small_covariate, "stationary", s_prior)
    return cfg.build(small_obs)


@pytest.fixture()
def ns_theta():
    return HyperParams([-1.2, 0.4], [-2.5, 0.6], math.log(30.0))


@pytest.fixture()
def s_theta():
    return HyperParams([-1.2], [-2.5], math.log(30.0))
