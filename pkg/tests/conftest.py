import pytest

from engines.model_core import ModelParams, ProfileSpec, VacuumRegime, VelocityProfile, make_initial_data
from engines.solver import LagrangianState, StepControl

MINIMAL_CONFIG = """
[model]
gamma = 2
beta = 1
"""

# c = Q = 1 with u0 = xi - 1/2: every cell expands like V = 1 + t
HOMOGENEOUS_CONFIG = """
[model]
gamma = 2
beta = 1

[profile]
u0_kind = linear
u0_amplitude = 1.0

[grid]
cells = 16

[step]
dt_init = 1e-3
t_end = 1.0

[samples]
count = 51

[output]
directory = {out}
"""


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the desk-scale benchmarks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def params_21():
    return ModelParams(gamma=2.0, beta=1.0)


@pytest.fixture
def discontinuous():
    return VacuumRegime.discontinuous()


@pytest.fixture
def homogeneous_initial(params_21, discontinuous):
    profile = ProfileSpec.constant(0.5, 0.5, u=VelocityProfile(kind="linear", amplitude=1.0))
    return make_initial_data(params_21, discontinuous, profile, 16)


@pytest.fixture
def homogeneous_state(homogeneous_initial):
    return LagrangianState.from_initial(homogeneous_initial)


@pytest.fixture
def fast_control():
    return StepControl(dt_init=1e-3, t_end=0.5)


@pytest.fixture
def homogeneous_config_text(tmp_path):
    return HOMOGENEOUS_CONFIG.format(out=tmp_path / "out")


@pytest.fixture
def write_config(tmp_path):
    def _write(text, name="run.ini"):
        path = tmp_path / name
        path.write_text(text)
        return path
    return _write
