from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parametrix.fbi import (CutoffParameterError, ResolutionError, SpatialGrid, band, check_inversion, coherent_state,
                            fbi_adjoint, fbi_forward, frequency_axis, frequency_separation_margin, gaussian_transform,
                            isometry_error, make_cutoffs, random_band_limited)


def _grid(lam=32.0, hw=4.0):
    return SpatialGrid.for_lambda(1, hw, lam)


def test_gaussian_closed_form():
    lam = 32.0
    grid = _grid(lam)
    x = grid.axes()[0]
    u = np.exp(-0.5 * lam * x * x)
    xi = frequency_axis(lam, 2.0)
    field = fbi_forward(u, grid, lam, [xi])
    ax, axi = np.meshgrid(x, xi, indexing="ij")
    ref = gaussian_transform(lam, ax[None], axi[None])
    assert np.max(np.abs(field.values - ref)) <= 1e-10 * np.max(np.abs(ref))


def test_fourier_and_direct_routes_agree():
    lam = 16.0
    grid = SpatialGrid.for_lambda(1, 3.0, lam)
    u = coherent_state(grid, lam, [0.2], [0.7])
    xi = frequency_axis(lam, 1.5)
    a = fbi_forward(u, grid, lam, [xi], method="fourier")
    b = fbi_forward(u, grid, lam, [xi], method="direct")
    assert np.max(np.abs(a.values - b.values)) <= 1e-9


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_random_fields_invert(seed):
    lam = 64.0
    grid = _grid(lam, 6.0)
    u = random_band_limited(grid, lam, np.random.default_rng(seed))
    assert check_inversion(u, grid, lam) <= 1e-6
    assert isometry_error(u, grid, lam) <= 1e-5


def test_adjoint_identity():
    lam = 16.0
    grid = _grid(lam, 3.0)
    rng = np.random.default_rng(1)
    u = random_band_limited(grid, lam, rng)
    v = fbi_forward(random_band_limited(grid, lam, rng), grid, lam)
    lhs = v.weighted_inner(fbi_forward(u, grid, lam))
    rhs = grid.inner(fbi_adjoint(v), u)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_under_resolved_grid_rejected():
    grid = SpatialGrid.uniform(1, 4.0, 64)
    with pytest.raises(ResolutionError):
        fbi_forward(np.zeros(64), grid, 256.0)


def test_cutoff_family_declarations():
    fam = make_cutoffs([1.0], 0.1, 0.01)
    assert all(all(v) for v in fam.verify().values())
    assert frequency_separation_margin(fam) >= 0.0


def test_strict_delta2_limit():
    with pytest.raises(CutoffParameterError):
        make_cutoffs([1.0], 0.1, 0.05)
    fam = make_cutoffs([1.0], 0.1, 0.05, strict=False)
    assert fam.delta2 == 0.05


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3))
def test_band_profile(v):
    val = float(band(v, -1.0, -0.5, 0.5, 1.0))
    assert 0.0 <= val <= 1.0
    if abs(v) <= 0.5:
        assert val == 1.0
    if abs(v) >= 1.0:
        assert val == 0.0
