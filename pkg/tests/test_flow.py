from __future__ import annotations

import functools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parametrix.flow import (PhasePoint, PreconditionError, classify_point, finite_difference_jacobian, flow_map,
                             in_s_minus, in_s_plus, integrate_flow, nontrapping_probe, outgoing_decomposition,
                             outgoing_seeds, random_seeds, variational_jacobian)
from parametrix.symbols import builtin_family, free_perturbation

coord = st.floats(-5, 5)
mom = st.floats(0.5, 2.0)


@functools.lru_cache(maxsize=None)
def _bump1():
    return builtin_family("isotropic-bump", dim=1, epsilon=0.05)


@functools.lru_cache(maxsize=None)
def _offdiag2():
    return builtin_family("off-diagonal-bump", dim=2, epsilon=0.01)


@settings(max_examples=30, deadline=None)
@given(coord, coord, st.floats(-2, 2), st.floats(-2, 2), st.floats(-20, 20))
def test_free_flow_is_straight_line(x0, x1, k0, k1, t):
    free = free_perturbation(2)
    alpha = PhasePoint(np.array([[x0], [x1]]), np.array([[k0], [k1]]))
    x, xi = flow_map(free, alpha, t, 1e-11)
    assert np.allclose(x, alpha.alpha_x + 2 * t * alpha.alpha_xi, atol=1e-8)
    assert np.allclose(xi, alpha.alpha_xi, atol=1e-10)


@settings(max_examples=8, deadline=None)
@given(coord, coord, mom, st.floats(0, 2 * np.pi), st.floats(-15, 15))
def test_energy_and_symplecticity_in_two_dimensions(x0, x1, r, ang, t):
    pert = _offdiag2()
    alpha = PhasePoint(np.array([[x0], [x1]]), r * np.array([[np.cos(ang)], [np.sin(ang)]]))
    traj = integrate_flow(pert, alpha, (0.0, t), 1e-10)
    assert traj.energy_drift(pert).max() <= 1e-9
    assert variational_jacobian(pert, alpha, t, 1e-10).symplectic_defect().max() <= 1e-6


@pytest.mark.parametrize("t", [-7.0, 3.0, 12.0])
def test_variational_jacobian_matches_finite_differences(t):
    pert = _offdiag2()
    alpha = PhasePoint(np.array([0.4, -1.1]), np.array([0.9, 0.6]))
    var = variational_jacobian(pert, alpha, t, 1e-12)
    fd = finite_difference_jacobian(pert, alpha, t, tol=1e-12)
    assert np.allclose(np.squeeze(var.matrix()), np.squeeze(fd.matrix()), atol=1e-5)


def test_tolerance_range_enforced():
    with pytest.raises(ValueError):
        flow_map(_bump1(), random_seeds(1, 2, rng=0), 1.0, 1e-3)


@settings(max_examples=60, deadline=None)
@given(coord, st.floats(-2, 2).filter(lambda v: abs(v) > 1e-3))
def test_classification_consistent_with_outgoing_sets(x0, k0):
    a = PhasePoint(np.array([[x0]]), np.array([[k0]]))
    c = classify_point(a)
    assert c.s_plus == bool(in_s_plus(a.alpha_x, a.alpha_xi)[0])
    assert c.s_minus == bool(in_s_minus(a.alpha_x, a.alpha_xi)[0])
    assert c.s_plus or c.s_minus
    assert 1 <= len(c.cases) <= 2


def test_outgoing_decomposition_rejects_incoming_seed():
    a = PhasePoint(np.array([[5.0]]), np.array([[-1.0]]))
    with pytest.raises(PreconditionError):
        outgoing_decomposition(_bump1(), a, (0.0, 10.0))


def test_outgoing_seeds_lie_in_forward_set():
    s = outgoing_seeds(2, 50, rng=0)
    assert np.all(in_s_plus(s.alpha_x, s.alpha_xi))
    b = outgoing_seeds(2, 50, rng=0, sign=-1.0)
    assert np.all(in_s_minus(b.alpha_x, b.alpha_xi))


def test_rays_escape():
    rep = nontrapping_probe(_bump1(), random_seeds(1, 40, radius=3.0, rng=5))
    assert rep.all_escape
