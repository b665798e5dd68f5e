from __future__ import annotations

import functools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parametrix.fbi import SpatialGrid
from parametrix.reference import (InadmissiblePairError, StrichartzPair, WaveFunction, WraparoundError,
                                  evolve_reference, free_gaussian_peak_ratio, regrid, strichartz_time_nodes)
from parametrix.symbols import builtin_family, free_perturbation


@functools.lru_cache(maxsize=None)
def _bump1():
    return builtin_family("isotropic-bump", dim=1, epsilon=0.05)


def _gaussian(hw=40.0, nodes=1024, width=1.0):
    g = SpatialGrid.uniform(1, hw, nodes)
    x = g.mesh()[0]
    return WaveFunction(g, np.exp(-x ** 2 / (2 * width ** 2)))


@pytest.mark.parametrize("t", [0.5, 2.0, 4.0])
def test_free_gaussian_peak_decay(t):
    psi = _gaussian()
    out = evolve_reference(free_perturbation(1), psi, t)
    assert out.norm(np.inf) == pytest.approx(free_gaussian_peak_ratio(t, 1.0), rel=1e-10)


def test_mass_conserved_and_reversible():
    psi = _gaussian()
    pert = _bump1()
    out = evolve_reference(pert, psi, 2.0, tol=1e-10)
    assert out.report.mass_drift <= 1e-10
    back = evolve_reference(pert, out, -2.0, tol=1e-10)
    assert np.max(np.abs(back.lab_values() - psi.lab_values())) <= 1e-8


def test_moving_frame_matches_lab_frame():
    lam = 16.0
    g = SpatialGrid.uniform(1, 30.0, 2048)
    x = g.mesh()[0]
    u0 = np.exp(-lam * (x + 3) ** 2 / 2) * np.exp(1j * lam * x)
    pert = _bump1()
    lab = evolve_reference(pert, WaveFunction(g, u0), 0.3, tol=1e-11)
    moving = evolve_reference(pert, WaveFunction.from_lab(g, u0, kappa=[lam]), 0.3, tol=1e-11)
    assert np.max(np.abs(lab.lab_values() - regrid(moving, lab.grid).lab_values())) <= 1e-9


def test_wraparound_guard():
    psi = _gaussian(hw=8.0, nodes=256, width=0.5)
    with pytest.raises(WraparoundError):
        evolve_reference(free_perturbation(1), psi, 5.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(2.5, 40.0), st.sampled_from([1, 2]))
def test_admissible_pairs(r, dim):
    q = 2.0 / (dim / 2.0 - dim / r)
    pair = StrichartzPair(q, r, dim)
    assert pair.q > 2.0
    with pytest.raises(InadmissiblePairError):
        StrichartzPair(q, r * 1.1, dim)


def test_endpoint_and_infinite_exponents_rejected():
    with pytest.raises(InadmissiblePairError):
        StrichartzPair(2.0, np.inf, 2)
    with pytest.raises(InadmissiblePairError):
        StrichartzPair(4.0, np.inf, 1)


def test_time_nodes_cover_interval():
    nodes = strichartz_time_nodes(1.0, 64.0)
    assert nodes[0] == 0.0 and nodes[-1] == pytest.approx(1.0)
    assert np.all(np.diff(nodes) > 0)
