import os

# テスト中はログファイルを作らない
os.environ.setdefault("LOG_TO_FILE", "false")

import numpy as np
import pytest

from app.schemas.experiment import SimSettings
from app.schemas.synthesis import Plant, SynthesisSpec
from app.schemas.topology import Digraph
from app.services.lab import LabService, EXAMPLE_B_VALUES, EXAMPLE_LAPLACIAN
from app.services.synthesis import SynthesisService
from app.services.topology import TopologyService


def example_adjacency() -> np.ndarray:
    L = np.array(EXAMPLE_LAPLACIAN, dtype=float)
    return np.diag(np.diag(L)) - L


@pytest.fixture(scope="session")
def example_plant() -> Plant:
    return Plant.second_order(EXAMPLE_B_VALUES)


@pytest.fixture(scope="session")
def example_graph() -> Digraph:
    return Digraph(weights=example_adjacency())


@pytest.fixture(scope="session")
def example_bundle(example_graph):
    L = TopologyService.build_laplacian(example_graph)
    return TopologyService.reduce(L, None, 2)


@pytest.fixture(scope="session")
def example_synthesis(example_plant, example_bundle):
    return SynthesisService.synthesize(example_plant, example_bundle, SynthesisSpec(zeta=0.4, delta=0.02))


@pytest.fixture(scope="session")
def example_simulation(example_plant, example_bundle, example_synthesis):
    return LabService.simulate(example_plant, example_bundle, example_synthesis, SimSettings())


@pytest.fixture
def pair_plant() -> Plant:
    """単位入力の二重積分器2台"""
    return Plant.second_order([1.0, 1.0])


@pytest.fixture
def pair_bundle():
    return TopologyService.reduce(np.array([[1.0, -1.0], [-1.0, 1.0]]), None, 2)
