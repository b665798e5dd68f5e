from __future__ import annotations

import functools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parametrix.fbi import make_cutoffs
from parametrix.flow import PhasePoint
from parametrix.kernel import (KernelPhaseF, critical_point, free_F, free_F_gradient, free_kernel_oracle,
                               kernel_samples, regime_tag, short_time_case)
from parametrix.symbols import builtin_family, free_perturbation


@functools.lru_cache(maxsize=None)
def _family():
    return make_cutoffs([1.0], 0.1, 0.01)


@settings(max_examples=10, deadline=None)
@given(st.floats(-3, 3), st.floats(-1, 1), st.floats(-1, 1), st.floats(0.6, 1.8))
def test_transported_phase_matches_free_closed_form(theta, y, ax, axi):
    free = free_perturbation(1)
    x = np.array([y + 2 * theta * axi + 0.1])
    a = PhasePoint(np.array([[ax]]), np.array([[axi]]))
    K = KernelPhaseF(free, theta, x, [y])
    ref = free_F(theta, x[:, None], np.array([[y]]), a.alpha_x, a.alpha_xi)
    assert np.allclose(K.value(a), ref, atol=1e-10)
    grad, noise = K.gradient(a)
    gref = free_F_gradient(theta, x[:, None], np.array([[y]]), a.alpha_x, a.alpha_xi)
    assert np.all(np.abs(grad - gref) <= noise + 1e-8)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(-1, 1), st.floats(0.6, 1.8))
def test_free_critical_point_is_straight_line_momentum(theta, y, speed):
    x = np.array([y + 2 * theta * speed])
    cp = critical_point(free_perturbation(1), theta, x, [y])
    assert cp.momentum[0] == pytest.approx(speed, abs=1e-9)


def test_perturbed_critical_point_hits_target():
    pert = builtin_family("isotropic-bump", dim=1, epsilon=0.05)
    cp = critical_point(pert, 0.4, [1.1], [0.3], fam=_family())
    assert cp.residual <= 1e-9
    assert cp.contraction < 1.0


def test_regime_tags():
    fam = _family()
    assert regime_tag(fam, 0.5, 64.0, [0.0], [0.0]) == "forward"
    assert regime_tag(fam, -0.5, 64.0, [0.0], [0.0]) == "backward"
    theta = 0.5
    for speed, case in ((0.2, 1), (1.0, 3), (2.5, 2)):
        x = np.array([[2 * theta * speed]])
        assert int(short_time_case(fam, theta, x, np.zeros((1, 1)))[0]) == case
        assert regime_tag(fam, theta / 64.0, 64.0, x[:, 0], [0.0]) == f"case{case}"


def test_free_kernel_matches_composition_oracle():
    fam = _family()
    lam, t = 128.0, 0.05
    theta = lam * t
    xs = np.array([[2 * theta * s for s in (1.0, 1.2, 1.5)]])
    samples = kernel_samples(free_perturbation(1), fam, t, lam, xs, np.zeros_like(xs))
    oracle = free_kernel_oracle(fam, t, lam, xs[0], 0.0)
    for s, o in zip(samples, oracle):
        assert s.converged
        assert abs(s.value - o) <= 1e-5 * abs(o)
        # stationary phase at full cutoff weight: |k| sqrt(t) equals 1/sqrt(4 pi)
        assert s.scaled == pytest.approx(1.0 / math.sqrt(4 * math.pi), rel=1e-3)
