from __future__ import annotations

import functools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parametrix.flow import PhasePoint, PreconditionError, flow_map
from parametrix.phase import (OmegaDomain, check_imphase, eikonal_residual, eval_phase, free_phase,
                              transport_phase_batch, transport_phase_jet)
from parametrix.symbols import builtin_family, free_perturbation


@functools.lru_cache(maxsize=None)
def _bump1():
    return builtin_family("isotropic-bump", dim=1, epsilon=0.05)


@settings(max_examples=20, deadline=None)
@given(st.floats(-2, 2), st.floats(0.6, 1.9), st.floats(-10, 10), st.floats(-0.05, 0.05))
def test_free_phase_matches_closed_form(ax, axi, theta, dx):
    free = free_perturbation(1)
    a = PhasePoint(np.array([ax]), np.array([axi]))
    span = (min(theta, 0.0), max(theta, 0.0))
    beam = transport_phase_jet(free, a, span, order=4)
    x = beam.ray_point(theta).reshape(1, 1) + dx * np.sqrt(1 + theta ** 2)
    got = eval_phase(beam, theta, x, enforce_domain=False)
    ref = free_phase(theta, x, a.alpha_x.reshape(1, 1), a.alpha_xi.reshape(1, 1))
    assert np.allclose(got, ref, atol=1e-9)


def test_ray_point_follows_hamilton_flow():
    pert = _bump1()
    a = PhasePoint(np.array([0.2]), np.array([1.3]))
    beam = transport_phase_jet(pert, a, (-5.0, 5.0))
    for theta in (-5.0, 2.5, 5.0):
        x, xi = flow_map(pert, a, theta, 1e-12)
        assert np.allclose(beam.ray_point(theta).reshape(-1), x.reshape(-1), atol=1e-8)
        assert np.allclose(beam.momentum(theta).reshape(-1), xi.reshape(-1), atol=1e-8)


def test_batch_agrees_with_dense_route():
    pert = _bump1()
    a = PhasePoint(np.array([[-0.4, 0.7]]), np.array([[1.0, -1.5]]))
    batch = transport_phase_batch(pert, a, 3.0, order=4, tol=1e-12)
    for k in range(2):
        single = transport_phase_jet(pert, PhasePoint(a.alpha_x[:, k], a.alpha_xi[:, k]), (0.0, 3.0), order=4,
                                     tol=1e-12)
        assert np.allclose(batch.coeffs[:, k], single.jet(3.0).coeffs, atol=1e-8)


def test_series_residual_agrees_with_direct_evaluation_away_from_ray():
    pert = _bump1()
    a = PhasePoint(np.array([0.1]), np.array([1.2]))
    beam = transport_phase_jet(pert, a, (0.0, 2.0), order=4, tol=1e-12)
    x = beam.ray_point(1.0).reshape(1, 1) + np.array([[0.05, 0.1]])
    s = eikonal_residual(beam, 1.0, x, method="series")
    d = eikonal_residual(beam, 1.0, x, method="direct")
    assert np.allclose(s, d, rtol=0.05, atol=1e-10)


def test_preconditions():
    pert = _bump1()
    with pytest.raises(PreconditionError):
        transport_phase_jet(pert, PhasePoint(np.array([0.0]), np.array([3.0])))
    with pytest.raises(PreconditionError):
        transport_phase_jet(pert, PhasePoint(np.array([0.0]), np.array([1.0])), order=1)
    with pytest.raises(PreconditionError):
        transport_phase_jet(pert, PhasePoint(np.array([0.0]), np.array([1.0])), theta_span=(1.0, 2.0))


def test_imphase_rejects_points_outside_domain():
    pert = _bump1()
    a = PhasePoint(np.array([[0.0]]), np.array([[1.0]]))
    beam = transport_phase_jet(pert, a, (0.0, 2.0))
    dom = OmegaDomain(a, beam)
    with pytest.raises(PreconditionError):
        check_imphase(beam, dom, np.array([1.0]), beam.ray_point(1.0).reshape(1, 1) + 1.0)
