"""Complex eikonal phase transported as a Taylor jet along a bicharacteristic.

For a base point ``alpha`` the phase is represented through
``psi(theta, y) = phi(theta, x(theta) + y)``, a polynomial in the offset ``y``
from the moving ray point.  Substituting into the eikonal equation gives

    d psi / d theta = -p(x(theta) + y, grad_y psi) + xdot(theta) . grad_y psi,
    xdot = d_xi p(x(theta), xi(theta)),

whose degree-``k`` part only involves coefficients of degree ``<= k`` (the
top-degree contributions of the two terms cancel because ``xdot`` is the
group velocity).  The degree-1 part is Hamilton's equation for the momentum,
the degree-2 part is the complex matrix Riccati equation, and the constant
term is the on-ray action.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .flow import (Classification, PhasePoint, PreconditionError, bracket, classify_point)
from .jets import TaylorJet, multi_index_table
from .symbols import MetricPerturbation, eval_symbol, symbol_hessian

logger = logging.getLogger(__name__)

DEFAULT_ORDER = 4


class PhaseError(RuntimeError):
    """Raised when the transported phase loses positivity or integration fails."""


# ---------------------------------------------------------------------------
# jet right-hand side
# ---------------------------------------------------------------------------


def _unit(dim: int, j: int) -> tuple[int, ...]:
    return tuple(1 if k == j else 0 for k in range(dim))


def hamiltonian_jet(pert: MetricPerturbation, x: np.ndarray, grad: list[TaylorJet], order: int) -> TaylorJet:
    """Jet in ``y`` of ``p(x + y, G(y))`` for a jet-valued covector ``G``."""
    n = pert.dim
    if pert.is_flat:
        total = grad[0] * grad[0]
        for j in range(1, n):
            total = total + grad[j] * grad[j]
        return total
    gj = pert.metric_jets(x, order)
    total = None
    for j in range(n):
        h = None
        for k in range(n):
            gjk = TaylorJet(gj[j, k], n, order)
            term = gjk * grad[k]
            h = term if h is None else h + term
        term = grad[j] * h
        total = term if total is None else total + term
    return total


def group_velocity(pert: MetricPerturbation, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """``d_xi p = 2 g(x) xi``; shapes ``(n, *batch)``."""
    if pert.is_flat:
        return 2.0 * xi
    g = pert.metric_jets(x, 0)[:, :, 0]
    return 2.0 * np.einsum("jk...,k...->j...", g, xi)


def momentum_from_jet(psi: TaylorJet) -> np.ndarray:
    n = psi.dim
    return np.stack([psi.coefficient(_unit(n, j)).real for j in range(n)])


def hessian_from_jet(psi: TaylorJet) -> np.ndarray:
    """Second derivative matrix ``(n, n, *batch)`` of a jet at its base point."""
    n = psi.dim
    out = np.zeros((n, n) + psi.batch_shape, dtype=psi.coeffs.dtype)
    for j in range(n):
        for k in range(n):
            g = [0] * n
            g[j] += 1
            g[k] += 1
            out[j, k] = psi.derivative_value(g)
    return out


def phase_rhs(pert: MetricPerturbation, x: np.ndarray, psi: TaylorJet) -> tuple[np.ndarray, TaylorJet]:
    """Time derivatives ``(xdot, dpsi/dtheta)`` of the ray point and the phase jet."""
    n, order = psi.dim, psi.order
    grad = psi.gradient()
    xi = momentum_from_jet(psi)
    xdot = group_velocity(pert, x, xi)
    p = hamiltonian_jet(pert, x, grad, order)
    dpsi = -p
    for j in range(n):
        dpsi = dpsi + grad[j] * xdot[j]
    return xdot, dpsi


def riccati_rhs(pert: MetricPerturbation, x, xi, hess) -> np.ndarray:
    """``-(p_xx + p_xxi M + M p_xix + M p_xixi M)`` for a single or batched ``M``."""
    n = pert.dim
    if pert.is_flat:
        pxx = np.zeros((n, n) + hess.shape[2:])
        pxxi = np.zeros((n, n) + hess.shape[2:])
        pxixi = 2.0 * np.broadcast_to(np.eye(n).reshape((n, n) + (1,) * (hess.ndim - 2)),
                                      (n, n) + hess.shape[2:])
    else:
        pxx, pxxi, pxixi = symbol_hessian(pert, x, xi)
    pxix = np.swapaxes(pxxi, 0, 1)
    mm = lambda a, b: np.einsum("ij...,jk...->ik...", a, b)
    return -(pxx + mm(pxxi, hess) + mm(hess, pxix) + mm(mm(hess, pxixi), hess))


def initial_phase_jet(alpha: PhasePoint, order: int) -> TaylorJet:
    """Jet of ``(x - a_x).a_xi + (i/2)|x - a_x|^2 + |a_xi|^2/(2i)`` at ``x = a_x``."""
    n = alpha.dim
    table = multi_index_table(n, order)
    batch = alpha.batch_shape
    c = np.zeros((table.size,) + batch, dtype=complex)
    c[0] = -0.5j * np.sum(alpha.alpha_xi**2, axis=0)
    if order >= 1:
        for j in range(n):
            c[table.position[_unit(n, j)]] = alpha.alpha_xi[j]
    if order >= 2:
        for j in range(n):
            g = [0] * n
            g[j] = 2
            c[table.position[tuple(g)]] = 0.5j
    return TaylorJet(c, n, order, alpha.alpha_x)


class _PhaseSystem:
    def __init__(self, pert: MetricPerturbation, dim: int, order: int, batch: int):
        self.pert = pert
        self.n = dim
        self.order = order
        self.batch = batch
        self.ncoef = multi_index_table(dim, order).size

    def pack(self, x, psi_coeffs):
        return np.concatenate([x.astype(complex).ravel(), psi_coeffs.ravel()])

    def unpack(self, y):
        n, b = self.n, self.batch
        x = y[: n * b].real.reshape(n, b)
        c = y[n * b:].reshape(self.ncoef, b)
        return x, c

    def __call__(self, t, y):
        x, c = self.unpack(y)
        psi = TaylorJet(c, self.n, self.order)
        xdot, dpsi = phase_rhs(self.pert, x, psi)
        return self.pack(xdot, dpsi.coeffs)


def _solve(pert, alpha_flat: PhasePoint, order: int, t1: float, tol: float, t_eval=None, dense=True):
    n, b = alpha_flat.dim, alpha_flat.alpha_x.shape[1]
    system = _PhaseSystem(pert, n, order, b)
    y0 = system.pack(alpha_flat.alpha_x, initial_phase_jet(alpha_flat, order).coeffs)
    if t1 == 0.0:
        return system, None, y0
    sol = solve_ivp(system, (0.0, t1), y0, method="DOP853", rtol=tol, atol=tol * 1e-2,
                    dense_output=dense, t_eval=t_eval)
    if not sol.success:
        raise PhaseError(f"phase transport failed: {sol.message}")
    return system, sol, y0


# ---------------------------------------------------------------------------
# beam phase
# ---------------------------------------------------------------------------


@dataclass
class BeamPhase:
    """Transported phase jet(s) for one base point or a batch of base points.

    Use :meth:`jet` for the Taylor data at a given ``theta``; accessor helpers
    return the ray point, action, momentum and complex Hessian.
    """

    pert: MetricPerturbation
    alpha: PhasePoint
    order: int
    theta_span: tuple[float, float]
    tol: float
    delta: float = 0.01
    _system: object = field(default=None, repr=False)
    _forward: object = field(default=None, repr=False)
    _backward: object = field(default=None, repr=False)
    _y0: object = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.alpha.dim

    def _state(self, theta: float):
        lo, hi = self.theta_span
        if theta < lo - 1e-12 or theta > hi + 1e-12:
            raise ValueError(f"theta = {theta} outside beam span {self.theta_span}")
        if theta > 0 and self._forward is not None:
            y = self._forward(theta)
        elif theta < 0 and self._backward is not None:
            y = self._backward(theta)
        else:
            y = self._y0
        x, c = self._system.unpack(y)
        shape = self.alpha.batch_shape
        return x.reshape((self.dim,) + shape), c.reshape((c.shape[0],) + shape)

    def jet(self, theta: float) -> TaylorJet:
        """Phase jet in the offset ``y`` from the ray point at ``theta``."""
        x, c = self._state(theta)
        return TaylorJet(c, self.dim, self.order, x)

    def ray_point(self, theta: float) -> np.ndarray:
        return self._state(theta)[0]

    def action(self, theta: float) -> np.ndarray:
        return self.jet(theta).value

    def momentum(self, theta: float) -> np.ndarray:
        return momentum_from_jet(self.jet(theta))

    def hessian(self, theta: float) -> np.ndarray:
        return hessian_from_jet(self.jet(theta))

    def higher(self, theta: float) -> dict:
        """Taylor coefficients of degree >= 3, keyed by multi-index."""
        psi = self.jet(theta)
        return {g: psi.coeffs[i] for i, g in enumerate(psi.table.indices) if sum(g) >= 3}

    def dtheta_jet(self, theta: float) -> TaylorJet:
        """``d psi / d theta`` from the transport right-hand side."""
        psi = self.jet(theta)
        _, dpsi = phase_rhs(self.pert, psi.base, TaylorJet(psi.coeffs, psi.dim, psi.order))
        return dpsi

    def in_window(self, theta: float, x, radius: float | None = None) -> np.ndarray:
        radius = self.delta if radius is None else radius
        xr = self.ray_point(theta)
        x = np.asarray(x, dtype=float)
        xr = xr.reshape(xr.shape + (1,) * (x.ndim - xr.ndim))
        dist = np.linalg.norm(x - xr, axis=0)
        return dist <= radius * math.sqrt(1.0 + theta * theta) * (1 + 1e-12)


def transport_phase_jet(pert: MetricPerturbation, alpha: PhasePoint, theta_span=(0.0, 1.0),
                        order: int = DEFAULT_ORDER, tol: float = 1e-11,
                        delta: float = 0.01, check_positivity: bool = True) -> BeamPhase:
    """Transport the phase jet of order ``order`` along the ray through ``alpha``.

    Raises
    ------
    PreconditionError
        If ``|alpha_xi|`` is outside ``[1/2, 2]`` or ``order < 2``.
    PhaseError
        If ``Im`` of the Hessian loses positive definiteness at an output node.
    """
    pert.require_certified()
    if order < 2:
        raise PreconditionError("phase jet order must be at least 2")
    if not np.all(alpha.in_parametrix_shell()):
        raise PreconditionError("|alpha_xi| must lie in [1/2, 2]")
    lo, hi = float(theta_span[0]), float(theta_span[1])
    if lo > 0 or hi < 0:
        raise PreconditionError("theta span must contain 0")
    flat = alpha.flat()
    system, fwd, y0 = _solve(pert, flat, order, hi, tol)
    _, bwd, _ = _solve(pert, flat, order, lo, tol)
    beam = BeamPhase(pert=pert, alpha=alpha, order=order, theta_span=(lo, hi), tol=tol, delta=delta,
                     _system=system, _forward=None if fwd is None else fwd.sol,
                     _backward=None if bwd is None else bwd.sol, _y0=y0)
    if check_positivity:
        nodes = []
        for sol in (fwd, bwd):
            if sol is not None:
                nodes.extend(sol.t.tolist())
        for th in nodes:
            im = np.moveaxis(beam.hessian(th).imag, (0, 1), (-2, -1))
            if np.min(np.linalg.eigvalsh(0.5 * (im + np.swapaxes(im, -1, -2)))) <= 0:
                raise PhaseError(f"Im Hessian lost positivity at theta = {th}")
    return beam


@dataclass
class PhaseJetBatch:
    """Phase jets of many beams at a single ``theta``."""

    theta: float
    alpha: PhasePoint
    ray: np.ndarray
    coeffs: np.ndarray
    order: int

    def jet(self) -> TaylorJet:
        return TaylorJet(self.coeffs, self.alpha.dim, self.order, self.ray)


def transport_phase_batch(pert: MetricPerturbation, alpha: PhasePoint, theta: float,
                          order: int = DEFAULT_ORDER, tol: float = 1e-10) -> PhaseJetBatch:
    """Transport many beams to a single ``theta`` without dense output."""
    pert.require_certified()
    flat = alpha.flat()
    system, sol, y0 = _solve(pert, flat, order, float(theta), tol, t_eval=None, dense=False)
    y = y0 if sol is None else sol.y[:, -1]
    x, c = system.unpack(y)
    shape = alpha.batch_shape
    return PhaseJetBatch(theta=float(theta), alpha=alpha, ray=x.reshape((alpha.dim,) + shape),
                         coeffs=c.reshape((c.shape[0],) + shape), order=order)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _offsets(beam: BeamPhase, theta: float, x, enforce_domain: bool):
    x = np.asarray(x, dtype=float)
    xr = beam.ray_point(theta)
    xr = xr.reshape(xr.shape + (1,) * (x.ndim - xr.ndim))
    if enforce_domain and not np.all(beam.in_window(theta, x)):
        raise PreconditionError("evaluation point outside |x - x(theta)| <= delta <theta>")
    return x - xr


def eval_phase(beam: BeamPhase, theta: float, x, enforce_domain: bool = True) -> np.ndarray:
    """Phase value ``phi(theta, x)``; ``x`` has shape ``(n, ...)`` broadcasting against the batch."""
    y = _offsets(beam, theta, x, enforce_domain)
    psi = beam.jet(theta)
    coeffs = psi.coeffs.reshape(psi.coeffs.shape + (1,) * (y.ndim - 1 - len(psi.batch_shape)))
    return TaylorJet(coeffs, psi.dim, psi.order)(y)


def eval_grad_phase(beam: BeamPhase, theta: float, x, enforce_domain: bool = True) -> np.ndarray:
    """Spatial gradient ``Phi = d_x phi(theta, x)``; shape ``(n, ...)``."""
    y = _offsets(beam, theta, x, enforce_domain)
    psi = beam.jet(theta)
    extra = (1,) * (y.ndim - 1 - len(psi.batch_shape))
    out = []
    for g in psi.gradient():
        out.append(TaylorJet(g.coeffs.reshape(g.coeffs.shape + extra), psi.dim, psi.order)(y))
    return np.stack(out)


def free_phase(theta, x, alpha_x, alpha_xi) -> np.ndarray:
    """Closed-form phase of the flat problem (quadratic in ``x``)."""
    d = np.asarray(x) - np.asarray(alpha_x)
    axi = np.asarray(alpha_xi)
    num = np.sum(d * axi, axis=0) - theta * np.sum(axi * axi, axis=0) + 0.5j * np.sum(d * d, axis=0)
    return num / (1.0 + 2j * theta) - 0.5j * np.sum(axi * axi, axis=0)


def free_hessian(theta: float, dim: int) -> np.ndarray:
    return np.eye(dim) * (1j / (1.0 + 2j * theta))


# ---------------------------------------------------------------------------
# eikonal residual
# ---------------------------------------------------------------------------


def residual_jet(beam: BeamPhase, theta: float, extra: int = 12) -> TaylorJet:
    """Jet of ``d_theta phi + p(x, d_x phi)`` in ``y`` to order ``order + extra``.

    Coefficients of degree ``<= order`` vanish by construction of the
    transport equation; the remaining ones form the residual's Taylor series.
    """
    psi = beam.jet(theta)
    n, order = psi.dim, psi.order
    high = order + extra
    x = psi.base
    dpsi = beam.dtheta_jet(theta).extend(high)
    psi_h = TaylorJet(psi.coeffs, n, order).extend(high)
    grad = psi_h.gradient()
    xdot = group_velocity(beam.pert, x, momentum_from_jet(psi))
    p = hamiltonian_jet(beam.pert, x, grad, high)
    res = dpsi + p
    for j in range(n):
        res = res - grad[j] * xdot[j]
    return res


def eikonal_residual(beam: BeamPhase, theta: float, x, method: str = "series",
                     enforce_domain: bool = False) -> np.ndarray:
    """``|d_theta phi + p(x, d_x phi)|`` at points ``x`` (single beam).

    ``method="series"`` sums the residual's Taylor series from degree
    ``order + 1`` on (no cancellation at small offsets).  ``method="direct"``
    evaluates every term pointwise with the exact metric and serves as an
    independent check away from the ray.
    """
    y = _offsets(beam, theta, x, enforce_domain)
    if method == "series":
        res = residual_jet(beam, theta)
        c = res.coeffs.copy()
        c[: multi_index_table(res.dim, beam.order).size] = 0.0
        return np.abs(TaylorJet(c, res.dim, res.order)(y))
    if method == "direct":
        x = np.asarray(x, dtype=float)
        psi = beam.jet(theta)
        dpsi = beam.dtheta_jet(theta)
        xdot = group_velocity(beam.pert, psi.base, momentum_from_jet(psi))
        grad = np.stack([g(y) for g in psi.gradient()])
        xdot = xdot.reshape(xdot.shape + (1,) * (grad.ndim - xdot.ndim))
        dphi = dpsi(y) - np.sum(xdot * grad, axis=0)
        flat_x = x.reshape(beam.dim, -1)
        flat_g = grad.reshape(beam.dim, -1)
        if beam.pert.is_flat:
            p = np.sum(flat_g * flat_g, axis=0)
        else:
            gm = beam.pert.metric_jets(flat_x, 0)[:, :, 0]
            p = np.einsum("jk...,j...,k...->...", gm, flat_g, flat_g)
        return np.abs(dphi + p.reshape(dphi.shape))
    raise ValueError(f"unknown residual method '{method}'")


def residual_slope(beam: BeamPhase, theta: float, direction=None, ratios=None,
                   method: str = "series") -> float:
    """Log-log slope of the eikonal residual versus ``|x - x(theta)| / <theta>``."""
    n = beam.dim
    if direction is None:
        direction = np.eye(n)[0]
    direction = np.asarray(direction, dtype=float) / np.linalg.norm(direction)
    if ratios is None:
        ratios = np.geomspace(1e-3, 1e-1, 21)
    w = math.sqrt(1.0 + theta * theta)
    xr = beam.ray_point(theta).reshape(n)
    pts = xr[:, None] + np.outer(direction, np.asarray(ratios) * w)
    vals = eikonal_residual(beam, theta, pts, method=method)
    slope, _ = np.polyfit(np.log(ratios), np.log(vals), 1)
    return float(slope)


# ---------------------------------------------------------------------------
# domain and imaginary-part checks
# ---------------------------------------------------------------------------


@dataclass
class OmegaDomain:
    """Neighbourhood of the projected ray on which the phase is controlled."""

    alpha: PhasePoint
    beam: BeamPhase
    delta: float = 0.01
    c0: float = 0.1
    c1: float = 0.01
    classification: Classification | None = None

    def __post_init__(self):
        if self.classification is None:
            self.classification = classify_point(self.alpha, self.c0)

    @property
    def case(self) -> int:
        return self.classification.cases[0]


def phase_domain(domain: OmegaDomain, theta: float, x) -> np.ndarray:
    """Membership of ``(theta, x)`` with closed inequalities."""
    x = np.asarray(x, dtype=float)
    n = domain.alpha.dim
    xr = domain.beam.ray_point(theta).reshape((n,) + (1,) * (x.ndim - 1))
    close = np.linalg.norm(x - xr, axis=0) <= domain.delta * math.sqrt(1 + theta * theta) * (1 + 1e-12)
    axi = domain.alpha.alpha_xi.reshape((n,) + (1,) * (x.ndim - 1))
    dot = np.sum(x * axi, axis=0)
    scale = domain.c1 * bracket(x) * np.linalg.norm(axi, axis=0)
    cases = domain.classification.cases
    ok = np.zeros(close.shape, dtype=bool)
    if 1 in cases:
        ok |= close
    if 2 in cases:
        ok |= close & ((theta >= 0) | (dot >= -scale))
    if 3 in cases:
        ok |= close & ((theta <= 0) | (dot <= scale))
    return ok


@dataclass
class ImPhaseReport:
    """Outcome of :func:`check_imphase`."""

    samples: int
    min_margin: float
    two_sided_constant: float
    gradient_constant: float

    @property
    def lower_bound_holds(self) -> bool:
        return self.min_margin >= 0.0


def check_imphase(beam: BeamPhase, domain: OmegaDomain, thetas, xs) -> ImPhaseReport:
    """Check the lower bound on ``Im phi`` at sample points inside the domain.

    ``thetas`` has shape ``(S,)`` and ``xs`` shape ``(n, S)``.  Reports the
    minimum of ``Im phi - |x - x(theta)|^2 / (4 (1 + 4 theta^2)) + |a_xi|^2 / 2``
    and the constants of the two-sided and gradient estimates in units of
    ``eps + sqrt(delta)``.
    """
    thetas = np.asarray(thetas, dtype=float)
    xs = np.asarray(xs, dtype=float)
    axi2 = float(np.sum(domain.alpha.alpha_xi**2))
    scale = beam.pert.epsilon + math.sqrt(domain.delta)
    margin = np.inf
    c_two = 0.0
    c_grad = 0.0
    for th in np.unique(thetas):
        sel = thetas == th
        pts = xs[:, sel]
        if not np.all(phase_domain(domain, th, pts)):
            raise PreconditionError("sample outside the phase domain")
        phi = eval_phase(beam, th, pts, enforce_domain=False)
        grad = eval_grad_phase(beam, th, pts, enforce_domain=False)
        xr = beam.ray_point(th).reshape(-1, 1)
        d2 = np.sum((pts - xr) ** 2, axis=0)
        lead = 0.5 * d2 / (1 + 4 * th * th)
        margin = min(margin, float(np.min(phi.imag - 0.5 * lead + 0.5 * axi2)))
        nz = d2 > 0
        if np.any(nz):
            dev = np.abs(phi.imag + 0.5 * axi2 - lead)[nz] / (d2[nz] / (1 + th * th))
            c_two = max(c_two, float(np.max(dev)) / scale)
        gdev = np.linalg.norm(grad - domain.alpha.alpha_xi.reshape(-1, 1), axis=0)
        c_grad = max(c_grad, float(np.max(gdev)) / scale)
    return ImPhaseReport(samples=int(thetas.size), min_margin=margin,
                         two_sided_constant=c_two, gradient_constant=c_grad)


def short_time_constant(beam: BeamPhase, thetas, xs) -> float:
    """Max of ``|phi - free closed form| / ((eps + delta)(|x - a_x|^2 + |theta|))``."""
    thetas = np.asarray(thetas, dtype=float)
    xs = np.asarray(xs, dtype=float)
    ax = beam.alpha.alpha_x.reshape(-1, 1)
    axi = beam.alpha.alpha_xi.reshape(-1, 1)
    scale = beam.pert.epsilon + beam.delta
    worst = 0.0
    for th in np.unique(thetas):
        sel = thetas == th
        pts = xs[:, sel]
        phi = eval_phase(beam, th, pts, enforce_domain=False)
        ref = free_phase(th, pts, ax, axi)
        den = scale * (np.sum((pts - ax) ** 2, axis=0) + abs(th))
        ok = den > 0
        if np.any(ok):
            worst = max(worst, float(np.max(np.abs(phi - ref)[ok] / den[ok])))
    return worst


def on_ray_action_error(beam: BeamPhase, thetas) -> float:
    """Max ``|s(theta) - theta p(alpha) - |a_xi|^2/(2i)|`` over ``thetas``."""
    p0 = eval_symbol(beam.pert, beam.alpha.alpha_x, beam.alpha.alpha_xi)
    a2 = np.sum(beam.alpha.alpha_xi**2, axis=0)
    worst = 0.0
    for th in np.atleast_1d(thetas):
        s = beam.action(float(th))
        worst = max(worst, float(np.max(np.abs(s - th * p0 + 0.5j * a2))))
    return worst
