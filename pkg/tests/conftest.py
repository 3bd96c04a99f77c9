import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from neutrodose.pkpd import (
    DoseRegimen,
    PatientCovariates,
    PopulationModel,
    individualize,
    simulate,
)


@pytest.fixture(scope="session")
def model():
    return PopulationModel()


@pytest.fixture(scope="session")
def ref_cov():
    """Reference covariates: every covariate factor equals one."""
    return PatientCovariates(sex=0, age=56.0, bsa=1.8, bili=7.0, anc0=5.0)


@pytest.fixture(scope="session")
def ref_params(ref_cov, model):
    return individualize(ref_cov, model, n_cycles=6)


@pytest.fixture(scope="session")
def standard_regimen():
    return DoseRegimen.cycle_doses([200.0 * 1.8] * 6)


@pytest.fixture(scope="session")
def ref_trajectory(ref_params, standard_regimen):
    return simulate(ref_params, standard_regimen)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
