from __future__ import annotations

import functools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parametrix.flow import PhasePoint
from parametrix.phase import transport_phase_jet
from parametrix.symbols import builtin_family, free_perturbation
from parametrix.transport import (amplitude_terms, build_transport_field, direct_amplitude, free_amplitude,
                                  straighten, taylorize, transport_amplitude_batch)


@functools.lru_cache(maxsize=None)
def _bump1():
    return builtin_family("isotropic-bump", dim=1, epsilon=0.05)


@functools.lru_cache(maxsize=None)
def _routes(kind: str):
    pert = free_perturbation(1) if kind == "free" else _bump1()
    alpha = PhasePoint(np.array([-0.5]), np.array([1.1]))
    beam = transport_phase_jet(pert, alpha, (0.0, 10.0), order=5)
    chart = straighten(taylorize(build_transport_field(pert, beam), 4), 10.0)
    return pert, alpha, amplitude_terms(chart, n_terms=2), direct_amplitude(pert, alpha, (0.0, 10.0), n_terms=2)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 10.0))
def test_free_leading_amplitude_closed_form(theta):
    _, _, _, direct = _routes("free")
    terms = direct.terms(theta)
    expect = np.sqrt(1 + theta ** 2) ** 0.5 * free_amplitude(theta, 1)
    assert terms[0].value == pytest.approx(expect, abs=1e-9)
    assert abs(terms[1].value) <= 1e-12 and abs(terms[2].value) <= 1e-12


@pytest.mark.parametrize("kind", ["free", "bump"])
@pytest.mark.parametrize("theta", [0.5, 4.0, 10.0])
def test_straightened_and_direct_routes_agree(kind, theta):
    _, _, straight, direct = _routes(kind)
    for a, b in zip(straight.terms(theta), direct.terms(theta)):
        k = min(a.coeffs.shape[0], b.coeffs.shape[0])
        assert np.allclose(a.coeffs[:k], b.coeffs[:k], atol=1e-8)


def test_batch_route_matches_single_beam():
    pert, alpha, _, direct = _routes("bump")
    batch = transport_amplitude_batch(pert, PhasePoint(alpha.alpha_x[:, None], alpha.alpha_xi[:, None]), 4.0,
                                      n_terms=2, tol=1e-11)
    for l, ref in enumerate(direct.terms(4.0)):
        assert batch.term(l).coeffs[0, 0] == pytest.approx(ref.value, abs=1e-8)


def test_initial_data():
    _, _, straight, direct = _routes("bump")
    for route in (straight, direct):
        terms = route.terms(0.0)
        assert terms[0].value == pytest.approx(1.0)
        assert np.allclose(terms[0].coeffs[1:], 0.0)
        for t in terms[1:]:
            assert np.allclose(t.coeffs, 0.0)


def test_higher_terms_lose_two_orders_each():
    _, _, _, direct = _routes("bump")
    orders = [t.order for t in direct.terms(1.0)]
    assert orders == sorted(orders, reverse=True)
    assert all(a - b == 2 for a, b in zip(orders[:-1], orders[1:]) if b > 0)
