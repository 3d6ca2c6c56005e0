import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from qmcns.mesh_fem import build_mesh, build_space  # noqa: E402
from qmcns.random_field import MaternParams, build_kl  # noqa: E402

settings.register_profile("ci", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture(scope="session")
def space4():
    return build_space(build_mesh(4))


@pytest.fixture(scope="session")
def space8():
    return build_space(build_mesh(8))


@pytest.fixture(scope="session")
def kl16():
    """KL basis on the 16x16 mesh, nested in the 4x4 solver mesh."""
    return build_kl(16, MaternParams(2.5, 0.25, 1.0), 64)


@pytest.fixture(scope="session")
def kl32():
    """KL basis on the 32x32 mesh, nested in the 8x8 solver mesh."""
    return build_kl(32, MaternParams(2.5, 0.25, 1.0), 128)


def random_interior_field(space, rng, scale=1.0):
    u = np.zeros(space.velocity_dim)
    u[space.interior_velocity_dofs] = scale * rng.standard_normal(len(space.interior_velocity_dofs))
    return u


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
