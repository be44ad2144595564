"""Shared fixtures: sensor worlds and precomputed inverse operators are
expensive enough to build once per session."""

import numpy as np
import pytest

from eitskin import fem, phantoms as ph, reconstruction as rec


@pytest.fixture(scope="session")
def default_model():
    return ph.SensorModel.default()


@pytest.fixture(scope="session")
def coarse_model():
    return ph.SensorModel.default(target_elem_size=10.0)


@pytest.fixture(scope="session")
def default_jacobian(default_model):
    m = default_model
    return fem.compute_jacobian(m.mesh, m.layout, m.protocol, m.sigma0)


@pytest.fixture(scope="session")
def coarse_jacobian(coarse_model):
    m = coarse_model
    return fem.compute_jacobian(m.mesh, m.layout, m.protocol, m.sigma0)


@pytest.fixture(scope="session")
def default_reconstructor(default_model, default_jacobian):
    reg = fem.noser_regularizer(default_jacobian)
    return rec.build_reconstructor(default_jacobian, rec.DEFAULT_LAMBDA, reg,
                                   default_model.mesh)


@pytest.fixture(scope="session")
def coarse_reconstructor(coarse_model, coarse_jacobian):
    reg = fem.noser_regularizer(coarse_jacobian)
    return rec.build_reconstructor(coarse_jacobian, rec.DEFAULT_LAMBDA, reg,
                                   coarse_model.mesh)


@pytest.fixture(scope="session")
def default_reference(default_model):
    return default_model.clean_reference()


@pytest.fixture(scope="session")
def coarse_reference(coarse_model):
    return coarse_model.clean_reference()
