import json
import pytest
import numpy as np
from e2tfa import influence
from e2tfa.material import PhaseProps, elastic_constants
from e2tfa.rvefe import generate_mesh

# fiber/matrix data used throughout: glass fiber in epoxy
FIBER = {"elastic_modulus": 80000.0, "poissons_ratio": 0.3}
MATRIX = {
    "elastic_modulus": 2670.0,
    "poissons_ratio": 0.3,
    "yield_strength": 26.0,
    "hardening_modulus": 500.0,
    "damage_initiation_strain": 0.009,
    "damage_failure_strain": 0.0315,
}
FIBER_FRACTION = 0.41

# elastic-only data for homogenized constants
STIFF_FIBER = {"elastic_modulus": 80000.0, "poissons_ratio": 0.3}
SOFT_MATRIX = {"elastic_modulus": 2670.0, "poissons_ratio": 0.3}
STIFF_FRACTION = 0.5


@pytest.fixture
def fiber() -> PhaseProps:
    return PhaseProps.from_dict(FIBER)


@pytest.fixture
def matrix() -> PhaseProps:
    return PhaseProps.from_dict(MATRIX)


@pytest.fixture
def phases(fiber, matrix):
    return {"fiber": fiber, "matrix": matrix}


def phase_L(phases):
    return {name: elastic_constants(p.E, p.nu).L for name, p in phases.items()}


@pytest.fixture(scope="session")
def mesh2d():
    return generate_mesh(2, 12, FIBER_FRACTION)


@pytest.fixture(scope="session")
def banded2d():
    return generate_mesh(2, 12, FIBER_FRACTION, partition_scheme="radial-bands")


@pytest.fixture(scope="session")
def pp2d(mesh2d):
    props = {"fiber": PhaseProps.from_dict(FIBER), "matrix": PhaseProps.from_dict(MATRIX)}
    return influence.preprocess(mesh2d, phase_L(props))


@pytest.fixture
def homogeneous3d(matrix):
    return influence.homogeneous_preprocess(elastic_constants(matrix.E, matrix.nu).L, 3)


@pytest.fixture
def homogeneous2d(matrix):
    return influence.homogeneous_preprocess(elastic_constants(matrix.E, matrix.nu).L, 2)


@pytest.fixture
def run_config(tmpdir):
    """Small elastic run config written next to its outputs"""
    doc = {
        "mesh": {"dim": 2, "n_divisions": 8, "v_f": STIFF_FRACTION},
        "phases": {"fiber": STIFF_FIBER, "matrix": MATRIX},
        "model": "elastic",
        "history": {"legs": [{"target": [0.002, 0, 0, 0, 0, 0], "substeps": 4}]},
    }
    path = tmpdir.join("run.json")
    with open(path, "w") as file:
        json.dump(doc, file)
    return str(path)


def random_strain(rng: np.random.Generator, scale: float, active=(0, 1, 2, 3, 4, 5)):
    eps = np.zeros(6)
    eps[list(active)] = rng.uniform(-scale, scale, len(active))
    return eps
