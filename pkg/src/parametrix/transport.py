"""Transport equations for the beam amplitude.

Writing the amplitude as ``a = <theta>^{-n/2} e(theta, z)`` with the rescaled
offset ``z = (x - x(theta)) / <theta>``, conjugating the evolution operator
by the beam phase gives

    e^{-i lam phi} (i lam d_theta - i lam (n/2) theta/(1+theta^2) - P)(e^{i lam phi} e)
        = -lam^2 (d_theta phi + p(x, d_x phi)) e + i lam L e + Q e,

    L = d_theta|_z + h . grad_z + d,        Q = <theta>^{-2} div_z(g grad_z),
    h = (2 g(x) Phi - xdot) / <theta> - theta/(1+theta^2) z,
    d = div_x(g Phi) - (n/2) theta/(1+theta^2).

Expanding ``e = sum_l lam^{-l} A_l`` gives the hierarchy ``L A_0 = 0``,
``L A_l = i Q A_{l-1}`` with ``A_0(0) = 1`` and ``A_l(0) = 0``.

Two independent solvers are provided.  The straightening route Taylorizes
the coefficients, integrates the characteristic map of ``h`` as a jet in the
initial point, inverts it by series reversion and integrates the hierarchy as
quadratures along characteristics.  The direct route integrates the
hierarchy as z-jets jointly with the phase; it is cheaper and is what the
kernel uses for lattices of beams.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .flow import PhasePoint, PreconditionError
from .jets import TaylorJet, jet_compose, jet_exp, multi_index_table
from .phase import (BeamPhase, _PhaseSystem, group_velocity, initial_phase_jet, momentum_from_jet,
                    phase_rhs, residual_jet)
from .symbols import MetricPerturbation

logger = logging.getLogger(__name__)

DEFAULT_N0 = 4
DEFAULT_TERMS = 2


class TransportError(RuntimeError):
    """Raised when a quadrature or characteristic integration fails."""


# ---------------------------------------------------------------------------
# jet helpers
# ---------------------------------------------------------------------------


def _rescale(jet: TaylorJet, w) -> TaylorJet:
    """Substitute ``y = w z``: coefficient of degree ``k`` is multiplied by ``w^k``."""
    factor = np.asarray(w, dtype=float) ** jet.table.degree.reshape((-1,) + (1,) * np.ndim(w))
    factor = factor.reshape(factor.shape + (1,) * (jet.coeffs.ndim - factor.ndim))
    return TaylorJet(jet.coeffs * factor, jet.dim, jet.order)


def _truncate_degree(jet: TaylorJet, max_degree: int, order: int) -> TaylorJet:
    """Zero all coefficients above ``max_degree`` and re-express at ``order``."""
    out = jet.extend(max(order, jet.order)) if order > jet.order else jet.truncate(order)
    c = out.coeffs.copy()
    c[out.table.degree > max_degree] = 0.0
    return TaylorJet(c, out.dim, out.order)


def _zero_jet(dim: int, order: int, batch=()) -> TaylorJet:
    return TaylorJet(np.zeros((multi_index_table(dim, order).size,) + tuple(batch), dtype=complex), dim, order)


def _variable_like(axis: int, dim: int, order: int, batch=()) -> TaylorJet:
    table = multi_index_table(dim, order)
    c = np.zeros((table.size,) + tuple(batch))
    c[table.position[tuple(1 if k == axis else 0 for k in range(dim))]] = 1.0
    return TaylorJet(c, dim, order)


def _one_jet(dim: int, order: int, batch=()) -> TaylorJet:
    return TaylorJet.constant(np.ones(batch, dtype=complex), dim, order)


# ---------------------------------------------------------------------------
# transport field
# ---------------------------------------------------------------------------


@dataclass
class FieldJets:
    """Coefficient jets in ``z`` at one ``theta`` (possibly batched).

    ``h`` is a list of ``n`` jets, ``d`` a jet and ``g`` an ``(n, n)`` nested
    list of jets for the metric in the rescaled coordinate.
    """

    theta: float
    h: list
    d: TaylorJet
    g: list
    weight: float

    def apply_q(self, amp: TaylorJet) -> TaylorJet:
        """``Q A = <theta>^{-2} div_z(g grad_z A)``."""
        n = amp.dim
        grad = amp.gradient()
        total = None
        for j in range(n):
            flux = None
            for k in range(n):
                t = self.g[j][k] * grad[k]
                flux = t if flux is None else flux + t
            t = flux.derivative(j)
            total = t if total is None else total + t
        return total * (1.0 / self.weight**2)

    def apply_l_spatial(self, amp: TaylorJet) -> TaylorJet:
        """``h . grad_z A + d A`` (the part of ``L`` without the time derivative)."""
        out = self.d * amp
        for j, hj in enumerate(self.h):
            out = out + hj * amp.derivative(j)
        return out


def field_jets(pert: MetricPerturbation, theta: float, x: np.ndarray, psi: TaylorJet,
               order: int, n0: int | None = None) -> FieldJets:
    """Transport coefficients as ``z``-jets of order ``order``.

    With ``n0`` given, every coefficient is truncated to degree ``n0 - 1``;
    otherwise to the highest degree the phase jet supports.
    """
    n, P = psi.dim, psi.order
    w = math.sqrt(1.0 + theta * theta)
    damp = theta / (1.0 + theta * theta)
    base = TaylorJet(psi.coeffs, n, P)
    grad = base.gradient()
    if pert.is_flat:
        gy = None
        flux = grad
    else:
        gcoef = pert.metric_jets(x, P)
        gy = [[TaylorJet(gcoef[j, k], n, P) for k in range(n)] for j in range(n)]
        flux = []
        for j in range(n):
            acc = None
            for k in range(n):
                t = gy[j][k] * grad[k]
                acc = t if acc is None else acc + t
            flux.append(acc)
    div = flux[0].derivative(0)
    for j in range(1, n):
        div = div + flux[j].derivative(j)
    xdot = group_velocity(pert, x, momentum_from_jet(psi))
    h_deg = P - 1 if n0 is None else min(P - 1, n0 - 1)
    d_deg = P - 2 if n0 is None else min(P - 2, n0 - 1)
    g_deg = P if n0 is None else min(P, n0 - 1)
    if n0 is not None and P < n0 + 1:
        raise PreconditionError(f"phase order {P} too low for coefficient truncation {n0}")
    h = []
    for j in range(n):
        hj = _rescale(flux[j] * 2.0, w) - xdot[j]
        hj = hj * (1.0 / w)
        hj = hj - _variable_like(j, n, P, psi.batch_shape) * damp
        h.append(_truncate_degree(hj, h_deg, order))
    d = _truncate_degree(_rescale(div, w) - 0.5 * n * damp, d_deg, order)
    g = []
    for j in range(n):
        row = []
        for k in range(n):
            if gy is None:
                gj = TaylorJet.constant(np.full(psi.batch_shape, 1.0 if j == k else 0.0), n, order)
            else:
                gj = _truncate_degree(_rescale(gy[j][k], w), g_deg, order)
            row.append(gj)
        g.append(row)
    return FieldJets(theta=theta, h=h, d=d, g=g, weight=w)


@dataclass
class TransportField:
    """Transport coefficients attached to a transported beam (single base point)."""

    pert: MetricPerturbation
    beam: BeamPhase
    n0: int | None = None

    @property
    def dim(self) -> int:
        return self.beam.dim

    def jets(self, theta: float, order: int | None = None) -> FieldJets:
        psi = self.beam.jet(theta)
        if order is None:
            order = psi.order
        return field_jets(self.pert, theta, psi.base, psi, order, self.n0)

    def drift_jacobian(self, theta: float) -> np.ndarray:
        """``H(theta) = d_z h(theta, 0)``."""
        fj = self.jets(theta, 1)
        n = self.dim
        out = np.zeros((n, n), dtype=complex)
        for j in range(n):
            for k in range(n):
                out[j, k] = fj.h[j].coefficient(tuple(1 if i == k else 0 for i in range(n)))
        return out

    def h(self, theta: float, z) -> np.ndarray:
        """Drift at points ``z`` of shape ``(n, S)`` (full or truncated per ``n0``)."""
        fj = self.jets(theta)
        return np.stack([hj(np.asarray(z)) for hj in fj.h])

    def d(self, theta: float, z) -> np.ndarray:
        return self.jets(theta).d(np.asarray(z))


def build_transport_field(pert: MetricPerturbation, beam: BeamPhase) -> TransportField:
    """Transport field with coefficients at the full order the beam supports."""
    if beam.order < 3:
        raise PreconditionError("transport needs a phase jet of order at least 3")
    return TransportField(pert=pert, beam=beam, n0=None)


def taylorize(field: TransportField, n0: int) -> TransportField:
    """Truncate the coefficients to degree ``n0 - 1`` in ``z``."""
    if n0 < 1:
        raise ValueError("n0 must be at least 1")
    if field.beam.order < n0 + 1:
        raise PreconditionError(f"phase order {field.beam.order} insufficient for n0 = {n0}")
    return TransportField(pert=field.pert, beam=field.beam, n0=n0)


# ---------------------------------------------------------------------------
# fundamental matrix and straightening
# ---------------------------------------------------------------------------


def fundamental_matrix(H: Callable[[float], np.ndarray], theta0: float, theta: float,
                       tol: float = 1e-12) -> np.ndarray:
    """Solution of ``dY/dtheta = H(theta) Y`` with ``Y(theta0) = I``."""
    h0 = np.asarray(H(theta0))
    n = h0.shape[0]
    if theta == theta0:
        return np.eye(n, dtype=complex)

    def rhs(t, y):
        return (np.asarray(H(t)) @ y.reshape(n, n)).ravel()

    sol = solve_ivp(rhs, (theta0, theta), np.eye(n, dtype=complex).ravel(), method="DOP853",
                    rtol=tol, atol=tol * 1e-2)
    if not sol.success:
        raise TransportError(f"fundamental matrix integration failed: {sol.message}")
    return sol.y[:, -1].reshape(n, n)


def _reverse_series(zmap: list, order: int) -> list:
    """Compositional inverse of a jet map ``y -> z`` with ``z(0) = 0``."""
    n = len(zmap)
    lin = np.zeros((n, n), dtype=complex)
    for j in range(n):
        for k in range(n):
            lin[j, k] = zmap[j].coefficient(tuple(1 if i == k else 0 for i in range(n)))
    inv = np.linalg.inv(lin)
    ident = [TaylorJet.variable(j, n, order) for j in range(n)]
    kappa = [sum((ident[k] * inv[j, k] for k in range(n)), _zero_jet(n, order)) for j in range(n)]
    for _ in range(order):
        comp = [jet_compose(zj, kappa) for zj in zmap]
        resid = [ident[j] - comp[j] for j in range(n)]
        kappa = [kappa[j] + sum((resid[k] * inv[j, k] for k in range(n)), _zero_jet(n, order))
                 for j in range(n)]
    return kappa


@dataclass
class StraightenedChart:
    """Characteristic map of the truncated drift, with dense output in ``theta``.

    ``zmap(theta)`` is the list of ``n`` jets ``z_j(theta, y)`` in the initial
    point ``y``; ``kappa(theta)`` its compositional inverse.
    """

    field: TransportField
    order: int
    theta_span: tuple[float, float]
    eta: float
    m0: float
    _sol: object = field(default=None, repr=False)

    def zmap(self, theta: float) -> list:
        n = self.field.dim
        size = multi_index_table(n, self.order).size
        y = self._sol(theta)
        return [TaylorJet(y[j * size:(j + 1) * size], n, self.order) for j in range(n)]

    def kappa(self, theta: float) -> list:
        return _reverse_series(self.zmap(theta), self.order)

    def fundamental(self, theta: float) -> np.ndarray:
        """``Y(theta, 0)``, read off the linear part of the characteristic map."""
        zm = self.zmap(theta)
        n = len(zm)
        return np.array([[zm[j].coefficient(tuple(1 if i == k else 0 for i in range(n)))
                          for k in range(n)] for j in range(n)])


def straightening_radius(field: TransportField, theta_max: float, delta: float,
                         probes: int = 50, grid: int = 121, seed: int = 0) -> tuple[float, float]:
    """Largest dyadic ``eta <= delta`` making the straightening map a contraction.

    The contraction constant ``M0 * int_0^T sup_{|z| <= 2 M0 eta} |d_z h - H|``
    is estimated with ``probes`` random points per time node.  Returns
    ``(eta, M0)``.
    """
    n = field.dim
    thetas = np.linspace(0.0, theta_max, grid)
    hs = [field.drift_jacobian(t) for t in thetas]
    Hf = lambda t: _interp_matrix(thetas, hs, t)
    ys = [np.eye(n)]
    for k in range(1, grid):
        ys.append(fundamental_matrix(Hf, thetas[k - 1], thetas[k]) @ ys[-1])
    m0 = max(1.0, max(float(np.linalg.norm(y, 2)) for y in ys))
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n, probes))
    dirs /= np.linalg.norm(dirs, axis=0)
    radial = rng.uniform(0.0, 1.0, probes) ** (1.0 / n)
    eta = float(2.0 ** math.floor(math.log2(delta)))
    while eta > 1e-8:
        pts = dirs * radial * 2.0 * m0 * eta
        sup = []
        for t, hm in zip(thetas, hs):
            fj = field.jets(t)
            worst = 0.0
            for j in range(n):
                for k in range(n):
                    djk = fj.h[j].derivative(k)(pts)
                    worst = max(worst, float(np.max(np.abs(djk - hm[j, k]))))
            sup.append(worst * n)
        const = m0 * float(np.trapezoid(sup, thetas))
        if const < 1.0:
            return eta, m0
        eta /= 2.0
    raise TransportError("no contraction radius found")


def _interp_matrix(ts, mats, t):
    k = int(np.clip(np.searchsorted(ts, t) - 1, 0, len(ts) - 2))
    s = (t - ts[k]) / (ts[k + 1] - ts[k])
    return (1 - s) * mats[k] + s * mats[k + 1]


def straighten(field: TransportField, theta_max: float, order: int = 8, eta: float | None = None,
               m0: float | None = None, tol: float = 1e-11) -> StraightenedChart:
    """Integrate the characteristic map of the (truncated) drift as a jet in the initial point."""
    if field.n0 is None:
        raise PreconditionError("straightening requires a Taylorized field")
    n = field.dim
    size = multi_index_table(n, order).size
    if eta is None or m0 is None:
        eta, m0 = straightening_radius(field, theta_max, field.beam.delta)

    def rhs(t, y):
        zs = [TaylorJet(y[j * size:(j + 1) * size], n, order) for j in range(n)]
        fj = field.jets(t, order)
        return np.concatenate([jet_compose(hj, zs).coeffs for hj in fj.h])

    y0 = np.concatenate([TaylorJet.variable(j, n, order).coeffs.astype(complex) for j in range(n)])
    sol = solve_ivp(rhs, (0.0, theta_max), y0, method="DOP853", rtol=tol, atol=tol * 1e-2,
                    dense_output=True)
    if not sol.success:
        raise TransportError(f"characteristic integration failed: {sol.message}")
    return StraightenedChart(field=field, order=order, theta_span=(0.0, theta_max), eta=eta, m0=m0,
                             _sol=sol.sol)


def characteristic(field: TransportField, y, theta: float, eta: float | None = None,
                   tol: float = 1e-12) -> np.ndarray:
    """Pointwise characteristic ``z(theta, y)`` of the drift (no jets)."""
    y = np.asarray(y, dtype=float).reshape(field.dim)
    if eta is not None and np.linalg.norm(y) > eta * (1 + 1e-12):
        raise PreconditionError(f"|y| = {np.linalg.norm(y):.3g} exceeds the validity radius {eta:.3g}")
    sol = solve_ivp(lambda t, z: field.h(t, z.reshape(-1, 1))[:, 0], (0.0, theta), y.astype(complex),
                    method="DOP853", rtol=tol, atol=tol * 1e-2)
    return sol.y[:, -1]


def invert_characteristic(chart: StraightenedChart, theta: float, z, iters: int = 30) -> np.ndarray:
    """Solve ``z(theta, y) = z`` for ``y`` by Newton iteration on the forward map."""
    zm = chart.zmap(theta)
    n = len(zm)
    z = np.asarray(z, dtype=complex).reshape(n, -1)
    yf = np.linalg.solve(chart.fundamental(theta), z)
    for _ in range(iters):
        fval = np.stack([zj(yf) for zj in zm])
        jac = np.stack([[zm[j].derivative(k)(yf) for k in range(n)] for j in range(n)])
        step = np.linalg.solve(np.moveaxis(jac, -1, 0), np.moveaxis(fval - z, -1, 0)[..., None])[..., 0].T
        yf = yf - step
        if np.max(np.abs(step)) < 1e-15:
            break
    return yf


# ---------------------------------------------------------------------------
# amplitude hierarchy
# ---------------------------------------------------------------------------


@dataclass
class AmplitudeJet:
    """Amplitude terms ``A_0..A_N`` as ``z``-jets with dense output in ``theta``."""

    beam: BeamPhase
    terms_count: int
    order: int
    theta_span: tuple[float, float]
    route: str
    _terms: Callable = field(default=None, repr=False)
    _derivative: Callable = field(default=None, repr=False)
    chart: StraightenedChart | None = None
    n0: int = DEFAULT_N0

    def terms(self, theta: float) -> list:
        """``[A_0, ..., A_N]`` at ``theta``; ``A_l`` truncated to its valid order."""
        return self._terms(theta)

    def term_values(self, theta: float, z) -> np.ndarray:
        z = np.asarray(z)
        return np.stack([a(z) for a in self.terms(theta)])

    def envelope(self, theta: float, lam: float) -> TaylorJet:
        """``e_N = sum_l lam^{-l} A_l`` as a jet of the lowest valid order."""
        terms = self.terms(theta)
        low = terms[-1].order
        total = terms[0].truncate(low)
        for l in range(1, len(terms)):
            total = total + terms[l].truncate(low) * lam ** (-l)
        return total


def _valid_order(order: int, l: int) -> int:
    return max(order - 2 * l, 0)


def amplitude_terms(chart: StraightenedChart, n_terms: int = DEFAULT_TERMS,
                    tol: float = 1e-11) -> AmplitudeJet:
    """Straightened-route hierarchy as quadratures along characteristics.

    Along ``z(theta, y)`` the operator ``L`` is ``d/dtheta + d``, so with
    ``D = int d`` one has ``A_0 = exp(-D)`` and
    ``A_l = exp(-D) int i (Q A_{l-1}) exp(D)``; the integrals are carried as
    additional ODE state.
    """
    field_ = chart.field
    n = field_.dim
    K = chart.order
    size = multi_index_table(n, K).size
    theta_max = chart.theta_span[1]

    def unpack(y):
        d_int = TaylorJet(y[:size], n, K)
        b = [TaylorJet(y[(l + 1) * size:(l + 2) * size], n, K) for l in range(n_terms)]
        return d_int, b

    def straight_terms(t, y):
        d_int, b = unpack(y)
        e_minus = jet_exp(-d_int)
        out = [e_minus]
        for l in range(n_terms):
            out.append(e_minus * b[l])
        return out, d_int

    def rhs(t, y):
        zs = chart.zmap(t)
        kappa = _reverse_series(zs, K)
        fj = field_.jets(t, K)
        dd = jet_compose(fj.d, zs)
        tilde, d_int = straight_terms(t, y)
        e_plus = jet_exp(d_int)
        parts = [dd.coeffs]
        for l in range(n_terms):
            a_prev_z = jet_compose(tilde[l], kappa)
            qa = fj.apply_q(a_prev_z)
            qa_tilde = jet_compose(qa, zs)
            parts.append((qa_tilde * e_plus * 1j).coeffs)
        return np.concatenate(parts)

    y0 = np.zeros((n_terms + 1) * size, dtype=complex)
    sol = solve_ivp(rhs, (0.0, theta_max), y0, method="DOP853", rtol=tol, atol=tol * 1e-2,
                    dense_output=True)
    if not sol.success:
        raise TransportError(f"amplitude quadrature failed: {sol.message}")

    def terms(theta):
        tilde, _ = straight_terms(theta, sol.sol(theta))
        kappa = chart.kappa(theta)
        return [jet_compose(tilde[l], kappa).truncate(_valid_order(K, l)) for l in range(n_terms + 1)]

    def derivative(theta):
        return rhs(theta, sol.sol(theta))

    return AmplitudeJet(beam=field_.beam, terms_count=n_terms, order=K, theta_span=(0.0, theta_max),
                        route="straightened", _terms=terms, _derivative=derivative, chart=chart,
                        n0=field_.n0)


def straightened_terms(ampl: AmplitudeJet, theta: float) -> list:
    """``A_l(theta, z(theta, y))`` as jets in the initial point ``y``."""
    zs = ampl.chart.zmap(theta)
    return [jet_compose(a.extend(ampl.order), zs).truncate(a.order) for a in ampl.terms(theta)]


# -- direct route (joint with the phase) -------------------------------------


class _JointSystem:
    """Phase jet and amplitude jets transported together (batched)."""

    def __init__(self, pert, dim, phase_order, amp_order, n_terms, n0, batch):
        self.pert = pert
        self.n = dim
        self.phase = _PhaseSystem(pert, dim, phase_order, batch)
        self.amp_order = amp_order
        self.n_terms = n_terms
        self.n0 = n0
        self.batch = batch
        self.asize = multi_index_table(dim, amp_order).size
        self.offset = dim * batch + self.phase.ncoef * batch

    def unpack(self, y):
        x, c = self.phase.unpack(y[: self.offset])
        amps = y[self.offset:].reshape(self.n_terms + 1, self.asize, self.batch)
        return x, c, amps

    def amp_rhs(self, t, x, psi, amps):
        fj = field_jets(self.pert, t, x, psi, self.amp_order, self.n0)
        out = np.empty_like(amps)
        prev = None
        for l in range(self.n_terms + 1):
            a = TaylorJet(amps[l], self.n, self.amp_order)
            rate = -fj.apply_l_spatial(a)
            if prev is not None:
                rate = rate + fj.apply_q(prev) * 1j
            out[l] = rate.coeffs
            prev = a
        return out

    def __call__(self, t, y):
        x, c, amps = self.unpack(y)
        psi = TaylorJet(c, self.n, self.phase.order)
        xdot, dpsi = phase_rhs(self.pert, x, psi)
        damps = self.amp_rhs(t, x, psi, amps)
        return np.concatenate([self.phase.pack(xdot, dpsi.coeffs), damps.ravel()])

    def initial(self, alpha_flat: PhasePoint):
        psi0 = initial_phase_jet(alpha_flat, self.phase.order)
        amps = np.zeros((self.n_terms + 1, self.asize, self.batch), dtype=complex)
        amps[0, 0] = 1.0
        return np.concatenate([self.phase.pack(alpha_flat.alpha_x, psi0.coeffs), amps.ravel()])


@dataclass
class BeamAmplitudeBatch:
    """Phase and amplitude jets of a batch of beams at a single ``theta``."""

    theta: float
    alpha: PhasePoint
    ray: np.ndarray
    phase_coeffs: np.ndarray
    phase_order: int
    amp_coeffs: np.ndarray
    amp_order: int
    n_terms: int

    def phase_jet(self) -> TaylorJet:
        return TaylorJet(self.phase_coeffs, self.alpha.dim, self.phase_order, self.ray)

    def term(self, l: int) -> TaylorJet:
        return TaylorJet(self.amp_coeffs[l], self.alpha.dim, self.amp_order).truncate(
            _valid_order(self.amp_order, l))

    def envelope(self, lam: float) -> TaylorJet:
        low = _valid_order(self.amp_order, self.n_terms)
        total = self.term(0).truncate(low)
        for l in range(1, self.n_terms + 1):
            total = total + self.term(l).truncate(low) * lam ** (-l)
        return total


def transport_amplitude_batch(pert: MetricPerturbation, alpha: PhasePoint, theta: float,
                              n_terms: int = DEFAULT_TERMS, phase_order: int = DEFAULT_N0 + 1,
                              amp_order: int | None = None, n0: int = DEFAULT_N0,
                              tol: float = 1e-9) -> BeamAmplitudeBatch:
    """Direct route for many beams, returning jets at a single ``theta``."""
    pert.require_certified()
    if amp_order is None:
        amp_order = 2 * n_terms + 2
    flat = alpha.flat()
    b = flat.alpha_x.shape[1]
    system = _JointSystem(pert, flat.dim, phase_order, amp_order, n_terms, n0, b)
    y0 = system.initial(flat)
    if theta != 0.0:
        sol = solve_ivp(system, (0.0, float(theta)), y0, method="DOP853", rtol=tol, atol=tol * 1e-2)
        if not sol.success:
            raise TransportError(f"joint transport failed: {sol.message}")
        y = sol.y[:, -1]
    else:
        y = y0
    x, c, amps = system.unpack(y)
    shape = alpha.batch_shape
    n = alpha.dim
    return BeamAmplitudeBatch(theta=float(theta), alpha=alpha, ray=x.reshape((n,) + shape),
                              phase_coeffs=c.reshape((c.shape[0],) + shape), phase_order=phase_order,
                              amp_coeffs=amps.reshape(amps.shape[:2] + shape), amp_order=amp_order,
                              n_terms=n_terms)


def direct_amplitude(pert: MetricPerturbation, alpha: PhasePoint, theta_span=(0.0, 1.0),
                     n_terms: int = DEFAULT_TERMS, phase_order: int = DEFAULT_N0 + 1,
                     amp_order: int | None = None, n0: int = DEFAULT_N0, tol: float = 1e-11,
                     delta: float = 0.01) -> AmplitudeJet:
    """Direct route for a single beam with dense output over ``theta_span``."""
    pert.require_certified()
    if amp_order is None:
        amp_order = 2 * n_terms + 2
    flat = alpha.flat()
    system = _JointSystem(pert, flat.dim, phase_order, amp_order, n_terms, n0, 1)
    y0 = system.initial(flat)
    lo, hi = float(theta_span[0]), float(theta_span[1])
    sols = {}
    for end in (lo, hi):
        if end != 0.0:
            sol = solve_ivp(system, (0.0, end), y0, method="DOP853", rtol=tol, atol=tol * 1e-2,
                            dense_output=True)
            if not sol.success:
                raise TransportError(f"joint transport failed: {sol.message}")
            sols[end > 0] = sol.sol

    def state(theta):
        if theta > 0 and True in sols:
            return sols[True](theta)
        if theta < 0 and False in sols:
            return sols[False](theta)
        return y0

    n = flat.dim
    beam = BeamPhase(pert=pert, alpha=alpha, order=phase_order, theta_span=(lo, hi), tol=tol, delta=delta,
                     _system=system.phase, _forward=None, _backward=None, _y0=y0[: system.offset])
    # route beam state through the joint solution
    beam._forward = (lambda t: state(t)[: system.offset]) if True in sols else None
    beam._backward = (lambda t: state(t)[: system.offset]) if False in sols else None

    def terms(theta):
        _, _, amps = system.unpack(state(theta))
        return [TaylorJet(amps[l, :, 0], n, amp_order).truncate(_valid_order(amp_order, l))
                for l in range(n_terms + 1)]

    def derivative(theta):
        return system(theta, state(theta))

    return AmplitudeJet(beam=beam, terms_count=n_terms, order=amp_order, theta_span=(lo, hi),
                        route="direct", _terms=terms, _derivative=derivative, n0=n0)


# ---------------------------------------------------------------------------
# assembly and residuals
# ---------------------------------------------------------------------------


@dataclass
class AmplitudeEvaluator:
    """``a_N(theta, x) = <theta>^{-n/2} e_N(theta, (x - x(theta)) / <theta>)``."""

    beam: BeamPhase
    ampl: AmplitudeJet
    lam: float

    def __call__(self, theta: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = self.beam.dim
        w = math.sqrt(1.0 + theta * theta)
        xr = self.beam.ray_point(theta).reshape((n,) + (1,) * (x.ndim - 1))
        z = (x - xr) / w
        return self.ampl.envelope(theta, self.lam)(z) * w ** (-n / 2.0)


def assemble_amplitude(beam: BeamPhase, ampl: AmplitudeJet, lam: float) -> AmplitudeEvaluator:
    if lam < 1:
        raise ValueError("lambda must be at least 1")
    return AmplitudeEvaluator(beam=beam, ampl=ampl, lam=lam)


def _pointwise_field(pert, beam: BeamPhase, theta: float, z: np.ndarray):
    """Non-truncated ``h``, ``d``, ``g`` and ``div g`` at points ``z`` (shape ``(n, S)``)."""
    fj = field_jets(pert, theta, beam.ray_point(theta), beam.jet(theta), beam.order, None)
    n = beam.dim
    w = fj.weight
    x = beam.ray_point(theta).reshape(n, 1) + w * z.real
    h = np.stack([hj(z) for hj in fj.h])
    d = fj.d(z)
    if pert.is_flat:
        g = np.broadcast_to(np.eye(n)[:, :, None], (n, n, z.shape[1]))
        dg = np.zeros((n, n, n, z.shape[1]))
    else:
        g, dg = pert.metric_derivatives(x, 1)
    return h, d, g, dg, w


def _jet_pointwise_ops(jet: TaylorJet, z):
    """Value, gradient and Hessian of a jet at points ``z``."""
    n = jet.dim
    val = jet(z)
    grad = np.stack([jet.derivative(j)(z) for j in range(n)])
    hess = np.stack([[jet.derivative(j).derivative(k)(z) for k in range(n)] for j in range(n)])
    return val, grad, hess


def transport_term_residuals(ampl: AmplitudeJet, theta: float, z, step: float = 1e-2) -> np.ndarray:
    """``|L A_l - i Q A_{l-1}|`` at points ``z`` with the true (untruncated) operators.

    The time derivative is taken along the characteristics of the truncated
    drift by a fourth-order central difference.  Requires the straightened route.
    """
    if ampl.chart is None:
        raise ValueError("finite differences along characteristics need the straightened chart")
    chart = ampl.chart
    pert = ampl.beam.pert
    beam = ampl.beam
    z = np.asarray(z, dtype=complex).reshape(beam.dim, -1)
    y0 = invert_characteristic(chart, theta, z)
    stencil = (-2, -1, 1, 2)
    weights = (1.0 / 12, -8.0 / 12, 8.0 / 12, -1.0 / 12)
    vals = []
    for s in stencil:
        t = theta + s * step
        tl = straightened_terms(ampl, t)
        vals.append(np.stack([a(y0) for a in tl]))
    ddt_char = sum(wt * v for wt, v in zip(weights, vals)) / step
    # along characteristics: d/dtheta = d_theta|_z + h_trunc . grad_z, so L A = ddt_char + (h - h_trunc) . grad A + d A
    h_true, d_true, g, dg, w = _pointwise_field(pert, beam, theta, z)
    fj_trunc = chart.field.jets(theta)
    h_trunc = np.stack([hj(z) for hj in fj_trunc.h])
    terms = ampl.terms(theta)
    out = []
    prev_q = None
    for l, a in enumerate(terms):
        val, grad, hess = _jet_pointwise_ops(a, z)
        la = ddt_char[l] + np.sum((h_true - h_trunc) * grad, axis=0) + d_true * val
        target = 0.0 if prev_q is None else 1j * prev_q
        out.append(np.abs(la - target))
        qa = (np.einsum("jk...,jk...->...", g, hess) + np.einsum("jkj...,k...->...", dg, grad) * w) / w**2
        prev_q = qa
    return np.stack(out)


def transport_residual(beam: BeamPhase, ampl: AmplitudeJet, lam: float, theta: float, x) -> np.ndarray:
    """Magnitude of ``b_N = e^{-i lam phi}(i lam d_theta - P)(e^{i lam phi} a_N)`` at points ``x``.

    Every contribution is assembled from transported quantities: the eikonal
    residual series, the transport right-hand sides (time derivatives of the
    amplitude jets), the untruncated coefficients and ``Q`` applied to ``e_N``.
    """
    pert = beam.pert
    n = beam.dim
    x = np.asarray(x, dtype=float).reshape(n, -1)
    w = math.sqrt(1.0 + theta * theta)
    xr = beam.ray_point(theta).reshape(n, 1)
    z = (x - xr) / w
    # eikonal residual (signed): degrees above the phase order
    rj = residual_jet(beam, theta)
    c = rj.coeffs.copy()
    c[: multi_index_table(n, beam.order).size] = 0.0
    eik = TaylorJet(c, n, rj.order)(x - xr)
    terms = ampl.terms(theta)
    rates = _term_rates(ampl, theta)
    h_true, d_true, g, dg, _ = _pointwise_field(pert, beam, theta, z.astype(complex))
    e_val = 0.0
    le = 0.0
    qe = 0.0
    for l, (a, rate) in enumerate(zip(terms, rates)):
        val, grad, hess = _jet_pointwise_ops(a, z)
        coef = lam ** (-l)
        e_val = e_val + coef * val
        le = le + coef * (rate(z) + np.sum(h_true * grad, axis=0) + d_true * val)
        qe = qe + coef * (np.einsum("jk...,jk...->...", g, hess)
                          + np.einsum("jkj...,k...->...", dg, grad) * w) / w**2
    b = -lam**2 * eik * e_val + 1j * lam * le + qe
    return np.abs(b) * w ** (-n / 2.0)


def _term_rates(ampl: AmplitudeJet, theta: float) -> list:
    """``d_theta|_z A_l`` as jets, from the transport right-hand sides."""
    if ampl.route == "direct":
        deriv = ampl._derivative(theta)
        beam = ampl.beam
        n = beam.dim
        size = multi_index_table(n, ampl.order).size
        off = len(deriv) - (ampl.terms_count + 1) * size
        amps = deriv[off:].reshape(ampl.terms_count + 1, size)
        return [TaylorJet(amps[l], n, ampl.order).truncate(_valid_order(ampl.order, l))
                for l in range(ampl.terms_count + 1)]
    # straightened: rebuild the truncated-field rates -(h.grad + d) A_l + i Q A_{l-1}
    fj = ampl.chart.field.jets(theta, ampl.order)
    terms = [a.extend(ampl.order) for a in ampl.terms(theta)]
    out = []
    for l, a in enumerate(terms):
        rate = -fj.apply_l_spatial(a)
        if l > 0:
            rate = rate + fj.apply_q(terms[l - 1]) * 1j
        out.append(rate.truncate(_valid_order(ampl.order, l)))
    return out


def on_ray_amplitude(ampl: AmplitudeJet, thetas, lam: float) -> np.ndarray:
    """``|a_N(theta, x(theta))| <theta>^{n/2}`` over ``thetas``."""
    return np.array([abs(complex(ampl.envelope(float(t), lam).value)) for t in np.atleast_1d(thetas)])


def free_amplitude(theta, dim: int = 1) -> complex:
    """Closed-form free amplitude ``(1 + 2 i theta)^{-n/2}`` (on and off the ray)."""
    return (1.0 + 2j * np.asarray(theta)) ** (-dim / 2.0)
