import json
from pathlib import Path

import numpy as np
import pytest

from dyndisc.bss_anova import DiscrepancyModel, build_kl_basis
from dyndisc.data_io import gen_profiles, gen_synthetic
from dyndisc.dynamics import RealityParams, SolverConfig, SorbentParams

REFERENCE = json.loads((Path(__file__).parent / "oracles" / "reference.json").read_text())

#: sorbent parameters used for the frozen trajectories and the truth-recovery experiment
THETA_A = SorbentParams(*REFERENCE["sorbent_theta"])


@pytest.fixture(scope="session")
def reference():
    return REFERENCE


@pytest.fixture(scope="session")
def basis():
    return build_kl_basis(512, 25)


@pytest.fixture(scope="session")
def layout(basis):
    return DiscrepancyModel.zeros(basis)


@pytest.fixture
def random_disc(layout):
    rng = np.random.default_rng(7)
    return layout.with_beta(rng.normal(0.0, 0.3, layout.n_beta))


@pytest.fixture(scope="session")
def reality_data():
    return gen_synthetic(RealityParams.default(), gen_profiles(), 1e-4, seed=11)


def make_sorbent_data(theta=THETA_A, noise_sd=1e-4, seed=0, profiles=None):
    """Observations generated by the sorbent model itself (no model-form error)."""
    from dyndisc.data_io import ExperimentSeries
    from dyndisc.dynamics import solve_sorbent

    rng = np.random.default_rng(seed)
    out = []
    for prof in profiles or gen_profiles():
        w = solve_sorbent(theta, None, prof, solver_cfg=SolverConfig(substeps=4)).w
        out.append(ExperimentSeries(prof, w + rng.normal(0.0, noise_sd, len(prof)), f"p={prof.p[-1]:g}", w))
    return out


@pytest.fixture(scope="session")
def sorbent_data():
    return make_sorbent_data(seed=21)
