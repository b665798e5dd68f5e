"""Hamiltonian bicharacteristic flow of the perturbed symbol.

All integrators are batched: a :class:`PhasePoint` may hold a single seed
(arrays of shape ``(n,)``) or many seeds (shape ``(n, B)``).  The flow and its
variational matrix are integrated jointly with an adaptive embedded
Runge-Kutta method (DOP853) with dense output.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .symbols import MetricPerturbation, eval_symbol, grad_symbol, symbol_hessian

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10


class FlowError(RuntimeError):
    """Raised when the integrator fails or a search does not bracket."""


class PreconditionError(ValueError):
    """Raised when an operation is called outside its geometric regime."""


def bracket(x) -> np.ndarray:
    """Japanese bracket ``sqrt(1 + |x|^2)`` over the leading axis."""
    x = np.asarray(x, dtype=float)
    return np.sqrt(1.0 + np.sum(x * x, axis=0))


@dataclass(frozen=True)
class PhasePoint:
    """A phase-space point (or batch of points) ``(alpha_x, alpha_xi)``."""

    alpha_x: np.ndarray
    alpha_xi: np.ndarray

    def __post_init__(self):
        ax = np.asarray(self.alpha_x, dtype=float)
        axi = np.asarray(self.alpha_xi, dtype=float)
        if ax.shape != axi.shape:
            raise ValueError("alpha_x and alpha_xi must have the same shape")
        if not (np.all(np.isfinite(ax)) and np.all(np.isfinite(axi))):
            raise ValueError("phase point has non-finite coordinates")
        object.__setattr__(self, "alpha_x", ax)
        object.__setattr__(self, "alpha_xi", axi)

    @property
    def dim(self) -> int:
        return self.alpha_x.shape[0]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.alpha_x.shape[1:]

    def flat(self) -> "PhasePoint":
        n = self.dim
        return PhasePoint(self.alpha_x.reshape(n, -1), self.alpha_xi.reshape(n, -1))

    def in_parametrix_shell(self) -> np.ndarray:
        r = np.linalg.norm(self.alpha_xi, axis=0)
        return (r >= 0.5) & (r <= 2.0)


# ---------------------------------------------------------------------------
# integration core
# ---------------------------------------------------------------------------


class _FlowSystem:
    """Right-hand side of Hamilton's equations, optionally with variations."""

    def __init__(self, pert: MetricPerturbation, batch: int, variational: bool):
        self.pert = pert
        self.n = pert.dim
        self.batch = batch
        self.variational = variational
        self.nflow = 2 * self.n * batch

    def unpack(self, y):
        n, b = self.n, self.batch
        x = y[: n * b].reshape(n, b)
        xi = y[n * b: 2 * n * b].reshape(n, b)
        if not self.variational:
            return x, xi, None
        m = y[2 * n * b:].reshape(2 * n, 2 * n, b)
        return x, xi, m

    def __call__(self, t, y):
        x, xi, m = self.unpack(y)
        pert = self.pert
        if pert.is_flat:
            dx = 2.0 * xi
            dxi = np.zeros_like(xi)
        else:
            px, pxi = grad_symbol(pert, x, xi)
            dx, dxi = pxi, -px
        parts = [dx.ravel(), dxi.ravel()]
        if self.variational:
            n = self.n
            if pert.is_flat:
                pxx = np.zeros((n, n, self.batch))
                pxxi = np.zeros((n, n, self.batch))
                pxixi = 2.0 * np.broadcast_to(np.eye(n)[:, :, None], (n, n, self.batch))
            else:
                pxx, pxxi, pxixi = symbol_hessian(pert, x, xi)
            # generator [[p_xi x, p_xi xi], [-p_xx, -p_x xi]]
            gen = np.empty((2 * n, 2 * n, self.batch))
            gen[:n, :n] = np.swapaxes(pxxi, 0, 1)
            gen[:n, n:] = pxixi
            gen[n:, :n] = -pxx
            gen[n:, n:] = -pxxi
            dm = np.einsum("ijb,jkb->ikb", gen, m)
            parts.append(dm.ravel())
        return np.concatenate(parts)


@dataclass
class Trajectory:
    """Sampled bicharacteristics with dense output.

    Attributes
    ----------
    t : ndarray
        Integrator time nodes, shape ``(M,)``.
    x, xi : ndarray
        States at the nodes, shape ``(M, n, *batch)``.
    """

    seeds: PhasePoint
    t: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    tol: float
    _sol: object = field(repr=False, default=None)
    _system: object = field(repr=False, default=None)
    t_span: tuple[float, float] = (0.0, 0.0)

    def at(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Positions and momenta at times ``t`` (scalar or 1-D array).

        For array input the result has shape ``(n, *batch, len(t))``.
        """
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        lo, hi = min(self.t_span), max(self.t_span)
        if np.any(t_arr < lo - 1e-12) or np.any(t_arr > hi + 1e-12):
            raise ValueError(f"time outside trajectory span [{lo}, {hi}]")
        y = self._sol(t_arr)
        sysm = self._system
        n, b = sysm.n, sysm.batch
        shape = (n,) + self.seeds.batch_shape + (len(t_arr),)
        x = y[: n * b].reshape(shape)
        xi = y[n * b: 2 * n * b].reshape(shape)
        if np.ndim(t) == 0:
            return x[..., 0], xi[..., 0]
        return x, xi

    def variational_at(self, t) -> np.ndarray:
        """The ``2n x 2n`` variational matrix at scalar ``t``; shape ``(2n, 2n, *batch)``."""
        if not self._system.variational:
            raise ValueError("trajectory was integrated without variational equations")
        y = self._sol(np.atleast_1d(float(t)))[:, 0]
        _, _, m = self._system.unpack(y)
        n = self._system.n
        return m.reshape((2 * n, 2 * n) + self.seeds.batch_shape)

    def energy_drift(self, pert: MetricPerturbation) -> np.ndarray:
        """``|p(x(t_i), xi(t_i)) - p(x(t_0), xi(t_0))|`` at the nodes; shape ``(M, *batch)``."""
        e = np.stack([eval_symbol(pert, self.x[i], self.xi[i]) for i in range(len(self.t))])
        return np.abs(e - e[0])


def _integrate(pert: MetricPerturbation, seeds: PhasePoint, t_span, tol: float,
               variational: bool, t_eval=None) -> Trajectory:
    pert.require_certified()
    if not (1e-13 <= tol <= 1e-5):
        raise ValueError(f"tolerance {tol} outside [1e-13, 1e-5]")
    flat = seeds.flat()
    n, b = flat.dim, flat.alpha_x.shape[1]
    system = _FlowSystem(pert, b, variational)
    y0 = [flat.alpha_x.ravel(), flat.alpha_xi.ravel()]
    if variational:
        y0.append(np.broadcast_to(np.eye(2 * n)[:, :, None], (2 * n, 2 * n, b)).ravel())
    y0 = np.concatenate(y0)
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t0 == t1:
        t1 = t0 + 1e-300 if t1 >= 0 else t0 - 1e-300
    sol = solve_ivp(system, (t0, t1), y0, method="DOP853", rtol=0.1 * tol, atol=1e-3 * tol,
                    dense_output=True, t_eval=t_eval)
    if not sol.success:
        raise FlowError(f"flow integration failed: {sol.message}")
    shape = (len(sol.t), n) + seeds.batch_shape
    x = sol.y[: n * b].T.reshape(shape)
    xi = sol.y[n * b: 2 * n * b].T.reshape(shape)
    return Trajectory(seeds=seeds, t=sol.t, x=x, xi=xi, tol=tol, _sol=sol.sol, _system=system,
                      t_span=(t0, t1))


def integrate_flow(pert: MetricPerturbation, alpha: PhasePoint, t_span, tol: float = DEFAULT_TOL,
                   variational: bool = False, t_eval=None) -> Trajectory:
    """Integrate Hamilton's equations from ``alpha`` over ``t_span``.

    ``t_span`` may run backward in time.  With ``variational=True`` the
    ``2n x 2n`` Jacobian of the flow map is carried along.
    """
    return _integrate(pert, alpha, t_span, tol, variational, t_eval)


def flow_map(pert: MetricPerturbation, alpha: PhasePoint, t: float, tol: float = DEFAULT_TOL):
    """End point ``(x(t), xi(t))`` of the flow."""
    traj = integrate_flow(pert, alpha, (0.0, t), tol)
    n = alpha.dim
    return traj.x[-1].reshape((n,) + alpha.batch_shape), traj.xi[-1].reshape((n,) + alpha.batch_shape)


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------


@dataclass
class JacobianBlocks:
    """Blocks of the flow Jacobian; each has shape ``(n, n, *batch)``.

    ``x_x[j, k] = d x_j(t) / d x_k`` and similarly for the other blocks.
    """

    t: float
    x_x: np.ndarray
    x_xi: np.ndarray
    xi_x: np.ndarray
    xi_xi: np.ndarray

    @classmethod
    def from_matrix(cls, t: float, m: np.ndarray) -> "JacobianBlocks":
        n = m.shape[0] // 2
        return cls(t, m[:n, :n], m[:n, n:], m[n:, :n], m[n:, n:])

    def matrix(self) -> np.ndarray:
        top = np.concatenate([self.x_x, self.x_xi], axis=1)
        bot = np.concatenate([self.xi_x, self.xi_xi], axis=1)
        return np.concatenate([top, bot], axis=0)

    def symplectic_defect(self) -> np.ndarray:
        """``max |M^T J M - J|`` per batch entry."""
        m = self.matrix()
        n = m.shape[0] // 2
        j = np.zeros((2 * n, 2 * n))
        j[:n, n:] = np.eye(n)
        j[n:, :n] = -np.eye(n)
        mt = np.swapaxes(m, 0, 1)
        prod = np.einsum("ij...,jk...,kl...->il...", mt, j, m)
        diff = prod - j.reshape(j.shape + (1,) * (m.ndim - 2))
        return np.max(np.abs(diff), axis=(0, 1))


def variational_jacobian(pert: MetricPerturbation, alpha: PhasePoint, t: float,
                         tol: float = DEFAULT_TOL) -> JacobianBlocks:
    """Jacobian of the flow map at time ``t`` from the variational equations."""
    traj = integrate_flow(pert, alpha, (0.0, t), tol, variational=True)
    return JacobianBlocks.from_matrix(t, traj.variational_at(t))


def reversal_identity_residual(pert: MetricPerturbation, alpha: PhasePoint, t: float,
                               tol: float = DEFAULT_TOL) -> np.ndarray:
    """Max blockwise defect of the Jacobian reversal identities.

    Compares ``M(t; alpha)`` with ``N = M(-t; rho(t, alpha))`` through
    ``dx/dx(t) = (dxi/dxi)^T(-t)``, ``dx/dxi(t) = -(dx/dxi)^T(-t)``,
    ``dxi/dx(t) = -(dxi/dx)^T(-t)`` and ``dxi/dxi(t) = (dx/dx)^T(-t)``.
    """
    fwd = variational_jacobian(pert, alpha, t, tol)
    x_t, xi_t = flow_map(pert, alpha, t, tol)
    back = variational_jacobian(pert, PhasePoint(x_t, xi_t), -t, tol)
    tr = lambda a: np.swapaxes(a, 0, 1)
    res = [
        np.abs(fwd.x_x - tr(back.xi_xi)),
        np.abs(fwd.x_xi + tr(back.x_xi)),
        np.abs(fwd.xi_x + tr(back.xi_x)),
        np.abs(fwd.xi_xi - tr(back.x_x)),
    ]
    return np.max(np.stack([np.max(r, axis=(0, 1)) for r in res]), axis=0)


def finite_difference_jacobian(pert: MetricPerturbation, alpha: PhasePoint, t: float,
                               step: float = 1e-5, tol: float = DEFAULT_TOL) -> JacobianBlocks:
    """Central-difference Jacobian of the flow map (single seed)."""
    n = alpha.dim
    ax = alpha.alpha_x.reshape(n)
    axi = alpha.alpha_xi.reshape(n)
    base = np.concatenate([ax, axi])
    seeds = []
    for k in range(2 * n):
        for sgn in (1.0, -1.0):
            v = base.copy()
            v[k] += sgn * step
            seeds.append(v)
    seeds = np.array(seeds).T
    xs, xis = flow_map(pert, PhasePoint(seeds[:n], seeds[n:]), t, tol)
    out = np.vstack([xs, xis])
    m = (out[:, 0::2] - out[:, 1::2]) / (2 * step)
    return JacobianBlocks.from_matrix(t, m)


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


class PointClass(str, enum.Enum):
    OUTGOING_BOTH = "OutgoingBoth"
    OUTGOING_FORWARD = "OutgoingForward"
    OUTGOING_BACKWARD = "OutgoingBackward"
    CASE_II = "CaseII"
    CASE_III = "CaseIII"


@dataclass(frozen=True)
class Classification:
    """Geometric classification of a phase-space point.

    ``s_plus`` / ``s_minus``: the trajectory is outgoing for ``t >= 0`` /
    ``t <= 0`` (threshold 1/4).  ``cases`` lists the closed regimes among
    1 (nearly transversal), 2 (outgoing forward) and 3 (incoming forward)
    for the threshold ``c0``; boundary points carry two labels.
    """

    s_plus: bool
    s_minus: bool
    cases: tuple[int, ...]
    label: PointClass

    @property
    def outgoing_label(self) -> PointClass:
        if self.s_plus and self.s_minus:
            return PointClass.OUTGOING_BOTH
        return PointClass.OUTGOING_FORWARD if self.s_plus else PointClass.OUTGOING_BACKWARD


def classify_point(alpha: PhasePoint, c0: float = 0.1) -> Classification:
    """Classify a single phase point with closed inequalities."""
    if not 0.0 < c0 <= 0.25:
        raise ValueError("c0 must lie in (0, 1/4]")
    ax = alpha.alpha_x.reshape(-1)
    axi = alpha.alpha_xi.reshape(-1)
    nxi = float(np.linalg.norm(axi))
    if nxi == 0.0:
        raise ValueError("|alpha_xi| = 0 cannot be classified")
    dot = float(ax @ axi)
    scale = float(math.sqrt(1.0 + ax @ ax)) * nxi
    s_plus = dot >= -0.25 * scale
    s_minus = dot <= 0.25 * scale
    cases = []
    if abs(dot) <= c0 * scale:
        cases.append(1)
    if dot >= c0 * scale:
        cases.append(2)
    if dot <= -c0 * scale:
        cases.append(3)
    label = {1: PointClass.OUTGOING_BOTH, 2: PointClass.CASE_II, 3: PointClass.CASE_III}[cases[0]]
    return Classification(s_plus=s_plus, s_minus=s_minus, cases=tuple(cases), label=label)


def in_s_plus(x, xi) -> np.ndarray:
    return np.sum(x * xi, axis=0) >= -0.25 * bracket(x) * np.linalg.norm(xi, axis=0)


def in_s_minus(x, xi) -> np.ndarray:
    return np.sum(x * xi, axis=0) <= 0.25 * bracket(x) * np.linalg.norm(xi, axis=0)


# ---------------------------------------------------------------------------
# outgoing decomposition and quantitative bounds
# ---------------------------------------------------------------------------


@dataclass
class OutgoingDecomposition:
    """Remainders of an outgoing trajectory.

    ``z(t) = x(t) - alpha_x - 2 t xi(t)`` and ``zeta(t) = xi(t) - alpha_xi``,
    sampled at ``t``; arrays of shape ``(len(t), n, *batch)``.
    """

    t: np.ndarray
    z: np.ndarray
    zeta: np.ndarray
    bound: float
    sandwich: np.ndarray

    @property
    def max_z(self) -> float:
        return float(np.max(np.abs(self.z)))

    @property
    def max_zeta(self) -> float:
        return float(np.max(np.abs(self.zeta)))

    @property
    def within_bounds(self) -> bool:
        return self.max_z <= self.bound and self.max_zeta <= self.bound

    @property
    def sandwich_ok(self) -> bool:
        return bool(np.all(self.sandwich >= 1.0 / 3.0) and np.all(self.sandwich <= 40.0))


def remainder_bound(pert: MetricPerturbation) -> float:
    """The uniform remainder bound ``(200 / sigma0) * eps * max(A0, A1)``."""
    a = pert.profile.seminorms
    return 200.0 / pert.sigma0 * pert.epsilon * max(a[0], a[1])


def outgoing_decomposition(pert: MetricPerturbation, alpha: PhasePoint, t_span,
                           samples: int = 201, tol: float = DEFAULT_TOL) -> OutgoingDecomposition:
    """Decompose an outgoing trajectory into free motion plus bounded remainders.

    Raises
    ------
    PreconditionError
        If a seed is not outgoing for the sign of ``t_span`` or has
        ``|alpha_xi|`` outside ``[1/2, 2]``.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t0 != 0.0:
        raise PreconditionError("decomposition is anchored at t = 0")
    forward = t1 >= 0
    ok = in_s_plus(alpha.alpha_x, alpha.alpha_xi) if forward else in_s_minus(alpha.alpha_x, alpha.alpha_xi)
    if not np.all(ok):
        raise PreconditionError("seed not outgoing for the requested time direction")
    if not np.all(alpha.in_parametrix_shell()):
        raise PreconditionError("|alpha_xi| must lie in [1/2, 2]")
    t = np.linspace(t0, t1, samples)
    traj = integrate_flow(pert, alpha, (t0, t1), tol)
    x, xi = traj.at(t)
    x = np.moveaxis(x, -1, 0)
    xi = np.moveaxis(xi, -1, 0)
    tt = t.reshape((-1,) + (1,) * (x.ndim - 1))
    z = x - alpha.alpha_x - 2.0 * tt * xi
    zeta = xi - alpha.alpha_xi
    num = 1.0 + np.sum(x * x, axis=1)
    den = 1.0 + np.sum(alpha.alpha_x**2, axis=0) + t.reshape((-1,) + (1,) * (num.ndim - 1)) ** 2
    return OutgoingDecomposition(t=t, z=z, zeta=zeta, bound=remainder_bound(pert), sandwich=num / den)


def virial_remainder(pert: MetricPerturbation, alpha: PhasePoint, t: np.ndarray,
                     tol: float = DEFAULT_TOL) -> np.ndarray:
    """``x(t) . xi(t) - x . xi - 2 t p(x, xi)`` sampled at times ``t`` (same sign).

    Result has shape ``(len(t), *batch)``.
    """
    t = np.asarray(t, dtype=float)
    traj = integrate_flow(pert, alpha, (0.0, float(t[np.argmax(np.abs(t))])), tol)
    x, xi = traj.at(t)
    p0 = eval_symbol(pert, alpha.alpha_x, alpha.alpha_xi)
    dot = np.sum(x * xi, axis=0)
    base = np.sum(alpha.alpha_x * alpha.alpha_xi, axis=0)
    res = dot - base[..., None] - 2.0 * t * p0[..., None]
    return np.moveaxis(res, -1, 0)


def incoming_representation_residual(pert: MetricPerturbation, alpha: PhasePoint, t: float,
                                     tol: float = DEFAULT_TOL) -> np.ndarray:
    """Defect of ``x(t) = alpha_x + 2 t alpha_xi - z(-t, rho(t))`` (per seed)."""
    x_t, xi_t = flow_map(pert, alpha, t, tol)
    x_back, xi_back = flow_map(pert, PhasePoint(x_t, xi_t), -t, tol)
    z_back = x_back - x_t + 2.0 * t * xi_back
    rep = alpha.alpha_x + 2.0 * t * alpha.alpha_xi - z_back
    return np.max(np.abs(rep - x_t), axis=0)


def incoming_window(pert: MetricPerturbation, alpha: PhasePoint, t_max: float,
                    samples: int = 401, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Sampled times ``t in [0, t_max]`` at which the flow lies in the backward-outgoing set."""
    t = np.linspace(0.0, t_max, samples)
    traj = integrate_flow(pert, alpha, (0.0, t_max), tol)
    x, xi = traj.at(t)
    mask = in_s_minus(x, xi)
    return t[mask.reshape(-1)] if mask.ndim == 1 else t[np.all(mask, axis=tuple(range(mask.ndim - 1)))]


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


@dataclass
class DecayProbeReport:
    """Measured ratios ``<x>^{|A|+s} |d^A_x d^B_xi z| / eps`` keyed by ``(|A|, |B|)``."""

    z_ratios: dict
    zeta_ratios: dict


def _remainder_derivatives(pert, alpha: PhasePoint, t: float, tol: float, fd_step: float = 1e-4):
    """z, zeta and their first and second alpha-derivatives at time ``t`` (single seed).

    First derivatives come from the variational equations; second derivatives
    are central differences of the variational Jacobian.
    """
    n = alpha.dim
    ax = alpha.alpha_x.reshape(n)
    axi = alpha.alpha_xi.reshape(n)
    base = np.concatenate([ax, axi])
    seeds = [base]
    for k in range(2 * n):
        for sgn in (1.0, -1.0):
            v = base.copy()
            v[k] += sgn * fd_step
            seeds.append(v)
    seeds = np.array(seeds).T
    pts = PhasePoint(seeds[:n], seeds[n:])
    traj = integrate_flow(pert, pts, (0.0, t), tol, variational=True)
    m = traj.variational_at(t)
    x_t, xi_t = traj.x[-1], traj.xi[-1]
    eye = np.eye(n)
    # derivative of z = x(t) - x - 2 t xi(t) and zeta = xi(t) - xi in (x, xi)
    dz = m[:n] - 2.0 * t * m[n:]
    dz[:, :n] -= eye[:, :, None]
    dzeta = m[n:].copy()
    dzeta[:, n:] -= eye[:, :, None]
    z0 = x_t[:, 0] - ax - 2.0 * t * xi_t[:, 0]
    zeta0 = xi_t[:, 0] - axi
    d2z = (dz[:, :, 1::2] - dz[:, :, 2::2]) / (2 * fd_step)  # (n, 2n, 2n)
    d2zeta = (dzeta[:, :, 1::2] - dzeta[:, :, 2::2]) / (2 * fd_step)
    return z0, zeta0, dz[:, :, 0], dzeta[:, :, 0], d2z, d2zeta


def derivative_decay_probe(pert: MetricPerturbation, alpha: PhasePoint, t,
                           orders: Sequence[tuple[int, int]] = ((0, 0), (1, 0), (0, 1)),
                           tol: float = DEFAULT_TOL) -> DecayProbeReport:
    """Sup over times ``t`` of the weighted remainder derivatives (single seed).

    ``orders`` lists ``(|A|, |B|)`` pairs with ``|A| + |B| <= 2``.
    """
    n = alpha.dim
    sigma0 = pert.sigma0
    w = float(bracket(alpha.alpha_x.reshape(n)))
    eps = pert.epsilon if pert.epsilon > 0 else 1.0
    z_rat = {o: 0.0 for o in orders}
    zeta_rat = {o: 0.0 for o in orders}
    for tt in np.atleast_1d(t):
        z0, zeta0, dz, dzeta, d2z, d2zeta = _remainder_derivatives(pert, alpha, float(tt), tol)
        for a, b in orders:
            if a + b == 0:
                vz, vzeta = np.max(np.abs(z0)), np.max(np.abs(zeta0))
            elif a + b == 1:
                cols = slice(0, n) if a == 1 else slice(n, 2 * n)
                vz, vzeta = np.max(np.abs(dz[:, cols])), np.max(np.abs(dzeta[:, cols]))
            elif a + b == 2:
                c1 = slice(0, n) if a >= 1 else slice(n, 2 * n)
                c2 = slice(0, n) if a == 2 else slice(n, 2 * n)
                vz = np.max(np.abs(d2z[:, c1, c2]))
                vzeta = np.max(np.abs(d2zeta[:, c1, c2]))
            else:
                raise ValueError("derivative orders above 2 are not probed")
            z_rat[(a, b)] = max(z_rat[(a, b)], w ** (a + sigma0) * vz / eps)
            zeta_rat[(a, b)] = max(zeta_rat[(a, b)], w ** (1 + a + sigma0) * vzeta / eps)
    return DecayProbeReport(z_ratios=z_rat, zeta_ratios=zeta_rat)


def crossing_time(pert: MetricPerturbation, alpha: PhasePoint, tol: float = 1e-10,
                  c0: float = 0.1, t_max: float = 1e3) -> float:
    """Time at which ``x(s, alpha) . alpha_xi`` changes sign (single incoming seed)."""
    n = alpha.dim
    ax = alpha.alpha_x.reshape(n)
    axi = alpha.alpha_xi.reshape(n)
    scale = math.sqrt(1.0 + ax @ ax) * np.linalg.norm(axi)
    if not ax @ axi < -c0 * scale:
        raise PreconditionError("seed is not incoming (x . xi >= -c0 <x> |xi|)")
    itol = min(max(tol * 1e-2, 1e-13), 1e-10)
    horizon = max(4.0, 2.0 * abs(ax @ axi) / (axi @ axi))
    while True:
        traj = integrate_flow(pert, PhasePoint(ax, axi), (0.0, horizon), itol)
        vals = np.einsum("mi,i->m", traj.x.reshape(-1, n), axi)
        idx = np.nonzero(vals >= 0)[0]
        if idx.size:
            break
        if horizon >= t_max:
            raise FlowError(f"no crossing before t = {t_max}; seed may be trapped")
        horizon = min(2 * horizon, t_max)
    k = idx[0]
    lo, hi = traj.t[k - 1], traj.t[k]
    f = lambda s: float(traj.at(s)[0] @ axi)
    root = brentq(f, lo, hi, xtol=1e-14, rtol=1e-14)
    # polish with a fresh integration to the root and a Newton step
    for _ in range(2):
        x_r, xi_r = flow_map(pert, PhasePoint(ax, axi), root, itol)
        val = float(x_r @ axi)
        deriv = float(grad_symbol(pert, x_r, xi_r)[1] @ axi)
        if abs(val) <= tol * np.linalg.norm(axi) * 1e-2:
            break
        root -= val / deriv
    return float(root)


@dataclass
class NontrappingReport:
    forward: np.ndarray
    backward: np.ndarray
    trapped: np.ndarray

    @property
    def all_escape(self) -> bool:
        return not bool(np.any(self.trapped))


def nontrapping_probe(pert: MetricPerturbation, seeds: PhasePoint, t_max: float = 60.0,
                      r_escape: float = 50.0, tol: float = 1e-8, samples: int = 2001) -> NontrappingReport:
    """First escape times beyond ``r_escape`` in both time directions."""
    flat = seeds.flat()
    out = {}
    for direction, sgn in (("forward", 1.0), ("backward", -1.0)):
        t = np.linspace(0.0, sgn * t_max, samples)
        traj = integrate_flow(pert, flat, (0.0, sgn * t_max), tol)
        x, _ = traj.at(t)
        r = np.linalg.norm(x, axis=0)  # (B, samples)
        times = np.full(r.shape[0], np.nan)
        for b in range(r.shape[0]):
            hit = np.nonzero(r[b] > r_escape)[0]
            if hit.size:
                k = hit[0]
                if k == 0:
                    times[b] = 0.0
                    continue
                g = lambda s, b=b: float(np.linalg.norm(traj.at(s)[0][:, b]) - r_escape)
                times[b] = abs(brentq(g, t[k - 1], t[k], xtol=1e-10))
        out[direction] = times
    trapped = np.isnan(out["forward"]) | np.isnan(out["backward"])
    return NontrappingReport(forward=out["forward"], backward=out["backward"], trapped=trapped)


@dataclass
class ShortTimeReport:
    """Constants ``C`` with ``|d^k r| <= C eps |t|`` and ``|d_t r| <= C eps``."""

    c_r: float
    c_zeta: float
    c_dt: float
    c_derivatives: float


def short_time_probe(pert: MetricPerturbation, alpha: PhasePoint, t_max: float = 1.0,
                     samples: int = 21, tol: float = DEFAULT_TOL) -> ShortTimeReport:
    """Remainders ``r = x(t) - x - 2 t xi`` and ``zeta = xi(t) - xi`` for ``|t| <= t_max``."""
    if np.any(np.linalg.norm(alpha.alpha_xi, axis=0) > 3.0):
        raise PreconditionError("short-time probe requires |xi| <= 3")
    eps = pert.epsilon if pert.epsilon > 0 else 1.0
    c_r = c_zeta = c_dt = c_der = 0.0
    for sgn in (1.0, -1.0):
        t = np.linspace(0.0, sgn * t_max, samples)[1:]
        traj = integrate_flow(pert, alpha, (0.0, sgn * t_max), tol, variational=True)
        x, xi = traj.at(t)
        ax = alpha.alpha_x[..., None]
        axi = alpha.alpha_xi[..., None]
        r = x - ax - 2.0 * t * axi
        zeta = xi - axi
        c_r = max(c_r, float(np.max(np.abs(r) / (eps * np.abs(t)))))
        c_zeta = max(c_zeta, float(np.max(np.abs(zeta) / (eps * np.abs(t)))))
        _, pxi = grad_symbol(pert, x.reshape(alpha.dim, -1), xi.reshape(alpha.dim, -1))
        c_dt = max(c_dt, float(np.max(np.abs(pxi.reshape(x.shape) - 2.0 * axi))) / eps)
        for tt in t[:: max(1, len(t) // 5)]:
            m = traj.variational_at(tt)
            n = alpha.dim
            m = m.reshape(2 * n, 2 * n, -1)
            free = np.eye(2 * n)
            free[:n, n:] = 2.0 * tt * np.eye(n)
            c_der = max(c_der, float(np.max(np.abs(m - free[:, :, None]))) / (eps * abs(tt)))
    return ShortTimeReport(c_r=c_r, c_zeta=c_zeta, c_dt=c_dt, c_derivatives=c_der)


def random_seeds(dim: int, count: int, radius: float = 10.0, rng=None,
                 xi_range: tuple[float, float] = (0.5, 2.0)) -> PhasePoint:
    """Random seeds with ``|alpha_x| <= radius`` and ``|alpha_xi|`` in ``xi_range``."""
    rng = np.random.default_rng(rng)
    ax = rng.uniform(-radius, radius, size=(dim, count))
    d = rng.normal(size=(dim, count))
    d /= np.linalg.norm(d, axis=0)
    axi = d * rng.uniform(*xi_range, size=count)
    return PhasePoint(ax, axi)


def outgoing_seeds(dim: int, count: int, radius: float = 10.0, rng=None, sign: float = 1.0) -> PhasePoint:
    """Random seeds in the forward (``sign > 0``) or backward outgoing set."""
    rng = np.random.default_rng(rng)
    chunks_x, chunks_xi = [], []
    have = 0
    while have < count:
        s = random_seeds(dim, 4 * count, radius, rng)
        keep = in_s_plus(s.alpha_x, s.alpha_xi) if sign > 0 else in_s_minus(s.alpha_x, s.alpha_xi)
        chunks_x.append(s.alpha_x[:, keep])
        chunks_xi.append(s.alpha_xi[:, keep])
        have += int(keep.sum())
    return PhasePoint(np.concatenate(chunks_x, axis=1)[:, :count],
                      np.concatenate(chunks_xi, axis=1)[:, :count])
