from __future__ import annotations

import functools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parametrix.symbols import (CertificationError, builtin_family, eval_symbol, free_perturbation, grad_symbol,
                                symbol_hessian, verify_decay)

FAMILIES_2D = ["isotropic-bump", "anisotropic-bump", "off-diagonal-bump"]
vec2 = st.tuples(st.floats(-4, 4), st.floats(-4, 4))


@functools.lru_cache(maxsize=None)
def _pert(name, dim=2, eps=0.01):
    return builtin_family(name, dim=dim, epsilon=eps)


@pytest.mark.parametrize("name", FAMILIES_2D)
def test_families_certify(name):
    pert = _pert(name)
    assert pert.certified
    assert pert.report.ok


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_isotropic_certifies_in_each_dimension(dim):
    assert builtin_family("isotropic-bump", dim=dim, epsilon=0.002).certified


def test_slow_decay_field_fails_at_order_zero():
    pert = builtin_family("radial-power", dim=1, epsilon=0.05)
    assert not pert.certified
    assert pert.report.first_failure == 0
    with pytest.raises(Exception):
        pert.require_certified()


def test_inadmissible_epsilon_rejected():
    with pytest.raises(CertificationError):
        builtin_family("isotropic-bump", dim=1, epsilon=5.0)
    with pytest.raises(CertificationError):
        builtin_family("isotropic-bump", dim=1, epsilon=-0.1)


def test_unknown_family_rejected():
    with pytest.raises(ValueError):
        builtin_family("no-such-family", dim=1)


def test_free_perturbation_is_flat():
    free = free_perturbation(2)
    assert free.is_flat
    xi = np.array([[1.0], [2.0]])
    assert eval_symbol(free, np.zeros((2, 1)), xi)[0] == pytest.approx(5.0)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(FAMILIES_2D), vec2, vec2)
def test_gradient_matches_finite_differences(name, x, xi):
    pert = _pert(name)
    x = np.array(x).reshape(2, 1)
    xi = np.array(xi).reshape(2, 1)
    gx, gxi = grad_symbol(pert, x, xi)
    h = 1e-6
    for k in range(2):
        e = np.zeros((2, 1))
        e[k] = h
        fdx = (eval_symbol(pert, x + e, xi) - eval_symbol(pert, x - e, xi)) / (2 * h)
        fdxi = (eval_symbol(pert, x, xi + e) - eval_symbol(pert, x, xi - e)) / (2 * h)
        assert gx[k, 0] == pytest.approx(fdx[0], abs=1e-6)
        assert gxi[k, 0] == pytest.approx(fdxi[0], abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(FAMILIES_2D), vec2, vec2)
def test_hessian_matches_finite_differences(name, x, xi):
    pert = _pert(name)
    x = np.array(x).reshape(2, 1)
    xi = np.array(xi).reshape(2, 1)
    pxx, pxxi, pxixi = symbol_hessian(pert, x, xi)
    h = 1e-5
    for l in range(2):
        e = np.zeros((2, 1))
        e[l] = h
        gp, gpi = grad_symbol(pert, x + e, xi)
        gm, gmi = grad_symbol(pert, x - e, xi)
        assert np.allclose(pxx[l, :, 0], ((gp - gm) / (2 * h))[:, 0], atol=1e-6)
        assert np.allclose(pxxi[l, :, 0], ((gpi - gmi) / (2 * h))[:, 0], atol=1e-6)
    assert np.allclose(pxixi[..., 0], pxixi[..., 0].T)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(FAMILIES_2D), vec2, vec2)
def test_symbol_is_elliptic_and_coefficients_symmetric(name, x, xi):
    pert = _pert(name)
    xa = np.array(x).reshape(2, 1)
    xia = np.array(xi).reshape(2, 1)
    p = eval_symbol(pert, xa, xia)[0]
    r2 = float(np.sum(xia ** 2))
    assert 0.9 * r2 - 1e-12 <= p <= 1.1 * r2 + 1e-12
    b = pert.coefficients(xa)[..., 0]
    assert np.allclose(b, b.T)


def test_verify_decay_reports_sandwich():
    pert = _pert("isotropic-bump")
    rep = verify_decay(pert)
    assert rep.ok
    assert 0.0 < rep.sandwich_min <= rep.sandwich_max
