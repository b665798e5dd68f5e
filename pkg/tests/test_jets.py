from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parametrix.jets import (JetError, TaylorJet, almost_analytic_extend, bracket_power_field, jet_compose, jet_exp,
                            jet_power, jet_reciprocal, jet_sqrt, multi_index_table, plateau_cutoff, smooth_step)

coord = st.floats(-2.0, 2.0, allow_nan=False)
small = st.floats(-0.05, 0.05, allow_nan=False)


def test_graded_table_sizes():
    for dim, order in [(1, 5), (2, 4), (3, 3)]:
        table = multi_index_table(dim, order)
        assert table.size == math.comb(dim + order, order)
        degrees = [sum(g) for g in table.indices]
        assert degrees == sorted(degrees)


def test_wrong_coefficient_count_rejected():
    with pytest.raises(JetError):
        TaylorJet(np.zeros(4), 2, 2)


@settings(max_examples=40, deadline=None)
@given(coord)
def test_exp_jet_derivatives_equal_exp(x0):
    u = TaylorJet.variable(0, 1, 6, np.array([x0]))
    e = jet_exp(u)
    for k in range(7):
        assert e.derivative_value((k,)) == pytest.approx(math.exp(x0), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(coord, coord, small, small)
def test_product_matches_pointwise_product_of_polynomials(a, b, dx, dy):
    x, y = TaylorJet.variables(2, 4, np.array([a, b]))
    p = x * x + 3.0 * y
    q = x * y - 1.0
    off = np.array([dx, dy])
    assert (p * q)(off) == pytest.approx(p(off) * q(off), rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.3, 3.0), st.floats(0.3, 3.0))
def test_reciprocal_and_sqrt_invert(a, b):
    x, y = TaylorJet.variables(2, 5, np.array([a, b]))
    u = x * x + y + 1.0
    one = jet_reciprocal(u) * u
    assert np.allclose(one.coeffs[1:], 0.0, atol=1e-10)
    assert one.value == pytest.approx(1.0)
    r = jet_sqrt(u)
    assert np.allclose((r * r).coeffs, u.coeffs, atol=1e-10)
    assert np.allclose(jet_power(u, 2.0).coeffs, (u * u).coeffs, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(coord, small)
def test_composition_with_exp(x0, dx):
    inner = TaylorJet.variable(0, 1, 6, np.array([x0])) * 0.5 + 0.1
    outer = jet_exp(TaylorJet.variable(0, 1, 6, np.array([inner.value])))
    composed = jet_compose(outer, [inner])
    direct = jet_exp(inner)
    assert np.allclose(composed.coeffs, direct.coeffs, rtol=1e-11, atol=1e-13)
    assert composed(np.array([dx])) == pytest.approx(math.exp(0.5 * (x0 + dx) + 0.1), rel=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.floats(-1.0, 2.0), st.floats(-1.0, 2.0))
def test_smooth_step_monotone_and_bounded(s, t):
    lo, hi = sorted((s, t))
    a, b = smooth_step(lo), smooth_step(hi)
    assert 0.0 <= a <= b <= 1.0
    if lo <= 0.0:
        assert a == 0.0
    if hi >= 1.0:
        assert b == 1.0


def test_plateau_cutoff_regions():
    s = np.array([0.0, 0.5, 0.75, 1.0, 3.0])
    v = plateau_cutoff(s)
    assert v[0] == 1.0 and v[1] == 1.0 and 0.0 < v[2] < 1.0 and v[3] == 0.0 and v[4] == 0.0


@pytest.mark.parametrize("dim", [1, 2])
def test_extension_restricts_to_field(dim):
    field = bracket_power_field(dim, 1.0)
    ext = almost_analytic_extend(field, 4)
    x = np.linspace(-2, 2, 7)[None].repeat(dim, axis=0)
    vals = ext(x, np.zeros_like(x))
    expect = (1.0 + np.sum(x * x, axis=0)) ** -0.5
    assert np.allclose(vals, expect, rtol=1e-12)


def test_analytic_dbar_matches_finite_differences():
    field = bracket_power_field(1, 1.0)
    ext = almost_analytic_extend(field, 4)
    x = np.array([[0.7]])
    y = np.array([[0.05]])
    h = 1e-5
    dx = (ext(x + h, y) - ext(x - h, y)) / (2 * h)
    dy = (ext(x, y + h) - ext(x, y - h)) / (2 * h)
    fd = 0.5 * (dx + 1j * dy)
    assert np.abs(ext.dbar(x, y).reshape(-1)[0] - fd.reshape(-1)[0]) <= 1e-6 * max(1.0, abs(fd.reshape(-1)[0]))
