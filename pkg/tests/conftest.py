import sys

import numpy as np
import pytest

from regbound.regmodel import (
    AffineTransform,
    ControlPointSet,
    FeatureSpec,
    IsotropicWeightedCovariance,
    RegistrationScenario,
    rotation,
)

SQUARE = np.array([[1.0, 1.0, -1.0, -1.0], [1.0, -1.0, 1.0, -1.0]])


@pytest.fixture
def rng():
    return np.random.default_rng(20150629)


@pytest.fixture
def unit_square():
    """Four CPs at (+-1, +-1), unit isotropic noise, identity transform, feature at origin."""
    return RegistrationScenario(
        AffineTransform(np.eye(2), [3.0, -2.0]),
        ControlPointSet(SQUARE),
        IsotropicWeightedCovariance(np.ones(4), 1.0, 1.0),
        FeatureSpec.isotropic([0.0, 0.0], 1.0),
    )


@pytest.fixture
def rotation_scenario():
    from regbound.montecarlo import make_grid_scenario

    return make_grid_scenario("rotation", 9, np.random.default_rng(1))


@pytest.fixture
def rot30():
    return AffineTransform(rotation(30.0), [4800.0, 4800.0])


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
