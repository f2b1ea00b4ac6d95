import os
import sys

import numpy as np
import pytest

# Add project root to PYTHONPATH
project_root = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
sys.path.insert(0, project_root)

from src.core.numerics import TANH  # noqa: E402
from tests.builders import IDENTITY, random_model  # noqa: E402


@pytest.fixture
def rng():
    """Fresh seeded generator for each test"""
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def identity_activation():
    """Linear activation hook: sigma(x) = x"""
    return IDENTITY


@pytest.fixture
def restricted_model(rng):
    """Random restricted tanh model, n=2, N=4"""
    return random_model("restricted", 2, 4, 0.5, TANH, rng)


@pytest.fixture
def scalar_restricted_layer_model():
    """One layer with X=1, W=1, b=0, eta=0, h=0.5, tanh"""
    from src.core.hamiltonian import HdnnModel, LayerParams, StructureTag
    layer = LayerParams.restricted([[1.0]], [[1.0]], [0.0], [0.0])
    return HdnnModel(1, 1, 0.5, TANH, (layer,), StructureTag.RESTRICTED)
