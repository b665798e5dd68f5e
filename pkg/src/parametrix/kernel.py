"""Wave-packet parametrix kernel, its phase, stationary points and dispersion sweeps.

Orientation.  For the propagator ``exp(-itP)`` sandwiched between cutoffs
the kernel is assembled as

    k(t, x, y) = c_n^2 lam^{3n/2} sum_alpha  B(x; alpha) W(alpha) G(alpha; y),

where ``G(alpha; y) = exp(i lam (y - a_x).a_xi - lam |y - a_x|^2 / 2)`` is the
transform window at the input point, ``W`` holds the quadrature weights times
the phase-space cutoffs ``chi3(a_x) psi3(a_xi)`` and ``B`` is the Gaussian beam
launched from the conjugate window, i.e. the beam with base point ``a_x`` and
momentum ``-a_xi``, evaluated at the output point at ``theta = lam t``.  With
the transform convention used in :mod:`parametrix.fbi` (frequency ``s`` sits
at ``a_xi = -s/lam``) this makes ``psi3`` a cone around ``-xi0``.

The combined phase is

    F(theta, x, y, alpha) = phi(theta, x, a_x, -a_xi) + (y - a_x).a_xi
                            + (i/2)|y - a_x|^2 + (i/2)|a_xi|^2,

so that the integrand is ``exp(i lam F) a``.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .fbi import CutoffFamily, FBIField, SpatialGrid, band, fbi_adjoint, fbi_forward, normalization_constant
from .flow import PhasePoint, PreconditionError, flow_map
from .jets import TaylorJet
from .phase import transport_phase_batch
from .reference import WaveFunction, delocalize, localize
from .symbols import MetricPerturbation
from .transport import BeamAmplitudeBatch, transport_amplitude_batch

logger = logging.getLogger(__name__)

LAMBDA_CUT = 36.0
FLOOR = 1e-8
PHASE_ORDER = 5


class SolverError(RuntimeError):
    """Raised when the stationary-point iteration fails to contract."""


# ---------------------------------------------------------------------------
# regimes
# ---------------------------------------------------------------------------


def speed_ratio(theta: float, x, y) -> np.ndarray:
    """``|x - y| / (2 |theta|)``."""
    d = np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(y, dtype=float), axis=0)
    return d / (2.0 * abs(theta))


def short_time_case(fam: CutoffFamily, theta: float, x, y) -> np.ndarray:
    """Case 1 (slow), 2 (fast) or 3 (matched speed) of a short-time geometry."""
    s = speed_ratio(theta, x, y)
    lo = fam.shell_inner - 5.0 * fam.delta2
    hi = fam.shell_outer + 5.0 * fam.delta2
    return np.where(s <= lo, 1, np.where(s >= hi, 2, 3))


def regime_tag(fam: CutoffFamily, t: float, lam: float, x, y) -> str:
    theta = lam * t
    if abs(theta) >= 1.0:
        return "forward" if t > 0 else "backward"
    return f"case{int(short_time_case(fam, theta, np.reshape(x, (-1, 1)), np.reshape(y, (-1, 1)))[0])}"


# ---------------------------------------------------------------------------
# phase F
# ---------------------------------------------------------------------------


def _beam_point(alpha: PhasePoint) -> PhasePoint:
    """Beam launched from the conjugate window at ``alpha``: momentum ``-a_xi``."""
    return PhasePoint(alpha.alpha_x, -alpha.alpha_xi)


def _eval_jet(coeffs: np.ndarray, dim: int, order: int, offset: np.ndarray) -> np.ndarray:
    """Evaluate jets with coefficients ``(ncoef, *B)`` at offsets ``(n, ..., *B)``."""
    return TaylorJet(coeffs, dim, order)(offset)


def free_F(theta: float, x, y, alpha_x, alpha_xi) -> np.ndarray:
    """Closed form of ``F`` for the flat metric."""
    dx = np.asarray(x) - np.asarray(alpha_x)
    dy = np.asarray(y) - np.asarray(alpha_x)
    axi = np.asarray(alpha_xi)
    num = -np.sum(dx * axi, axis=0) - theta * np.sum(axi * axi, axis=0) + 0.5j * np.sum(dx * dx, axis=0)
    return num / (1.0 + 2j * theta) + np.sum(dy * axi, axis=0) + 0.5j * np.sum(dy * dy, axis=0)


def free_F_gradient(theta: float, x, y, alpha_x, alpha_xi) -> np.ndarray:
    """``(dF/da_x, dF/da_xi)`` of :func:`free_F`; shape ``(2n, ...)``."""
    dx = np.asarray(x) - np.asarray(alpha_x)
    dy = np.asarray(y) - np.asarray(alpha_x)
    axi = np.asarray(alpha_xi)
    q = 1.0 + 2j * theta
    gx = (axi - 1j * dx) / q - axi - 1j * dy
    gxi = (-dx - 2.0 * theta * axi) / q + dy
    return np.concatenate([gx, gxi], axis=0)


@dataclass
class KernelPhaseF:
    """Evaluator of ``F(theta, x, y, alpha)`` from transported phase jets.

    ``x`` is the output point (where the beam is read) and ``y`` the input
    point (where the transform window sits); both have shape ``(n,)``.
    """

    pert: MetricPerturbation
    theta: float
    x: np.ndarray
    y: np.ndarray
    order: int = PHASE_ORDER
    tol: float = 1e-11

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)

    @property
    def dim(self) -> int:
        return self.x.size

    def beams(self, alpha: PhasePoint):
        return transport_phase_batch(self.pert, _beam_point(alpha), self.theta, order=self.order, tol=self.tol)

    def ray_offset(self, alpha: PhasePoint) -> np.ndarray:
        """``(x - x(theta, alpha)) / <theta>`` for a batch ``alpha``."""
        b = self.beams(alpha)
        return (self.x.reshape((-1,) + (1,) * len(alpha.batch_shape)) - b.ray) / math.sqrt(1 + self.theta**2)

    def value(self, alpha: PhasePoint) -> np.ndarray:
        n = self.dim
        b = self.beams(alpha)
        extra = (1,) * len(alpha.batch_shape)
        off = self.x.reshape((n,) + extra) - b.ray
        phi = _eval_jet(b.coeffs, n, b.order, off)
        ax, axi = alpha.alpha_x, alpha.alpha_xi
        dy = self.y.reshape((n,) + extra) - ax
        return phi + np.sum(dy * axi, axis=0) + 0.5j * np.sum(dy * dy, axis=0) + 0.5j * np.sum(axi * axi, axis=0)

    def gradient(self, alpha: PhasePoint, step: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
        """Central-difference gradient over a beam lattice and its noise estimate.

        Returns ``(grad, noise)`` with ``grad`` of shape ``(2n, *B)`` ordered
        ``(d/da_x, d/da_xi)``; ``noise`` is the difference between steps
        ``h`` and ``2h`` plus the transport tolerance over the step.
        """
        n = self.dim
        flat = alpha.flat()
        m = flat.alpha_x.shape[1]
        base = np.concatenate([flat.alpha_x, flat.alpha_xi], axis=0)
        shifts = []
        for h in (step, 2.0 * step):
            for j in range(2 * n):
                for s in (1.0, -1.0):
                    p = base.copy()
                    p[j] += s * h
                    shifts.append(p)
        pts = np.concatenate(shifts, axis=1)
        vals = self.value(PhasePoint(pts[:n], pts[n:])).reshape(2, 2 * n, 2, m)
        d1 = (vals[0, :, 0] - vals[0, :, 1]) / (2.0 * step)
        d2 = (vals[1, :, 0] - vals[1, :, 1]) / (4.0 * step)
        noise = np.abs(d1 - d2) + self.tol / step
        shape = (2 * n,) + alpha.batch_shape
        return d1.reshape(shape), noise.reshape(shape)


def phase_F(pert: MetricPerturbation, theta: float, x, y, alpha: PhasePoint) -> np.ndarray:
    return KernelPhaseF(pert, theta, x, y).value(alpha)


# ---------------------------------------------------------------------------
# stationary points
# ---------------------------------------------------------------------------


@dataclass
class CriticalPoint:
    """Momentum carrying the input point to the output point in time ``theta``."""

    momentum: np.ndarray
    alpha: PhasePoint
    residual: float
    iterations: int
    contraction: float


def critical_point(pert: MetricPerturbation, theta: float, x, y, fam: CutoffFamily | None = None,
                   rho0: float = 0.2, tol: float = 1e-10, max_iter: int = 50) -> CriticalPoint:
    """Solve ``x(theta; y, beta) = x`` for ``beta`` near ``(x - y) / (2 theta)``.

    The iteration ``beta <- beta - (x(theta; y, beta) - x) / (2 theta)`` is a
    contraction for small ``eps``; leaving the ball of radius ``rho0`` or a
    non-contracting step raises :class:`SolverError`.  The returned ``alpha``
    is the transform-side point ``(y, -beta)``.
    """
    if theta == 0.0:
        raise PreconditionError("theta must be nonzero")
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if fam is not None and int(short_time_case(fam, theta, x[:, None], y[:, None])[0]) != 3:
        raise PreconditionError("geometry outside the matched-speed case")
    beta0 = (x - y) / (2.0 * theta)
    beta = beta0.copy()
    prev_step = None
    ratio = 0.0
    res = np.inf
    for it in range(1, max_iter + 1):
        xt, _ = flow_map(pert, PhasePoint(y[:, None], beta[:, None]), theta, tol=max(1e-13, tol * 1e-2))
        miss = xt[:, 0] - x
        res = float(np.linalg.norm(miss))
        if res <= tol * max(1.0, float(np.linalg.norm(x))):
            return CriticalPoint(beta, PhasePoint(y[:, None], -beta[:, None]), res, it, ratio)
        step = miss / (2.0 * theta)
        size = float(np.linalg.norm(step))
        if prev_step is not None and prev_step > 0:
            ratio = size / prev_step
            if ratio >= 1.0:
                raise SolverError(f"fixed-point iteration does not contract (ratio {ratio:.3g})")
        prev_step = size
        beta = beta - step
        if np.linalg.norm(beta - beta0) > rho0:
            raise SolverError("iterate left the admissible ball")
    raise SolverError(f"no convergence in {max_iter} iterations (residual {res:.3e})")


# ---------------------------------------------------------------------------
# coercivity
# ---------------------------------------------------------------------------


@dataclass
class CoercivityReport:
    case: int
    theta: float
    min_ratio: float
    samples: int
    free_min_ratio: float | None = None

    @property
    def relative(self) -> float | None:
        if self.free_min_ratio is None or self.free_min_ratio == 0:
            return None
        return self.min_ratio / self.free_min_ratio


def _psi3_momentum_interval(fam: CutoffFamily) -> tuple[float, float]:
    d2 = fam.delta2
    return fam.shell_inner - 4.0 * d2, fam.shell_outer + 4.0 * d2


def coercivity_samples(pert: MetricPerturbation, fam: CutoffFamily, theta: float, x, y, count: int,
                       rng: np.random.Generator, window: float | None = None) -> PhasePoint:
    """Transform-side points with ``psi3(a_xi) > 0``, ``chi3(a_x) > 0`` and the beam
    reaching ``x`` within ``window <theta>`` (``fam.delta`` by default)."""
    n = fam.dim
    window = fam.delta if window is None else window
    x = np.asarray(x, dtype=float).reshape(n, 1)
    lo, hi = _psi3_momentum_interval(fam)
    w = math.sqrt(1.0 + theta * theta)
    kept = []
    total = 0
    for _ in range(20):
        m = 4 * count
        speed = rng.uniform(lo, hi, size=m)
        if n == 1:
            direction = -np.sign(fam.xi0[0]) * np.ones((1, m))
        else:
            v = rng.normal(size=(n, m)) * 2.0 * fam.delta2 - fam.xi0[:, None]
            direction = v / np.linalg.norm(v, axis=0)
        axi = speed * direction
        u = rng.uniform(-1.0, 1.0, size=(n, m))
        ax = x + 2.0 * theta * axi + u * window * w
        alpha = PhasePoint(ax, axi)
        ok = (fam.psi3(axi) > 0) & (fam.chi3(ax) > 0)
        if np.any(ok):
            alpha = PhasePoint(ax[:, ok], axi[:, ok])
            xt, _ = flow_map(pert, _beam_point(alpha), theta)
            if not pert.is_flat:
                # re-aim base points at the window (the landing point moves with a_x at unit rate to leading order)
                for _ in range(2):
                    target = x + u[:, ok] * window * w
                    alpha = PhasePoint(alpha.alpha_x + (target - xt), alpha.alpha_xi)
                    xt, _ = flow_map(pert, _beam_point(alpha), theta)
                keep = (fam.chi3(alpha.alpha_x) > 0)
                alpha = PhasePoint(alpha.alpha_x[:, keep], alpha.alpha_xi[:, keep])
                xt = xt[:, keep]
            inside = np.linalg.norm(x - xt, axis=0) <= window * w
            kept.append(PhasePoint(alpha.alpha_x[:, inside], alpha.alpha_xi[:, inside]))
            total += int(np.sum(inside))
        if total >= count:
            break
    if total == 0:
        raise PreconditionError("no samples survive the support filters")
    ax = np.concatenate([k.alpha_x for k in kept], axis=1)[:, :count]
    axi = np.concatenate([k.alpha_xi for k in kept], axis=1)[:, :count]
    return PhasePoint(ax, axi)


def coercivity_probe(pert: MetricPerturbation, fam: CutoffFamily, theta: float, x, y, samples: int = 2000,
                     seed: int = 0, step: float = 1e-3, alpha: PhasePoint | None = None) -> CoercivityReport:
    """Minimum of the normalized gradient quantity over admissible samples.

    ``Q = |dF/da_x|^2 + |dF/da_xi|^2 / D`` with ``D = |theta|`` in cases 1 and 3
    and ``D = |x - y|`` in case 2.  ``Q`` is divided by ``|y - a_x|^2 + |theta|``
    in cases 1 and 2, and by ``|X|^2 + |theta| |Y|^2`` in case 3 where ``X``
    and ``Y`` are the offsets from the stationary point.
    """
    n = fam.dim
    x = np.asarray(x, dtype=float).reshape(n)
    y = np.asarray(y, dtype=float).reshape(n)
    case = int(short_time_case(fam, theta, x[:, None], y[:, None])[0])
    if alpha is None:
        alpha = coercivity_samples(pert, fam, theta, x, y, samples, np.random.default_rng(seed))
    F = KernelPhaseF(pert, theta, x, y)
    grad, _ = F.gradient(alpha, step)
    gx = np.sum(np.abs(grad[:n]) ** 2, axis=0)
    gxi = np.sum(np.abs(grad[n:]) ** 2, axis=0)
    D = abs(theta) if case in (1, 3) else float(np.linalg.norm(x - y))
    Q = gx + gxi / D
    if case == 3:
        cp = critical_point(pert, theta, x, y)
        X = alpha.alpha_x - y[:, None]
        Y = alpha.alpha_xi - cp.alpha.alpha_xi
        comp = np.sum(X * X, axis=0) + abs(theta) * np.sum(Y * Y, axis=0)
    else:
        comp = np.sum((alpha.alpha_x - y[:, None]) ** 2, axis=0) + abs(theta)
    keep = comp >= 1e-6
    if not np.any(keep):
        raise PreconditionError("every sample is degenerate")
    return CoercivityReport(case=case, theta=theta, min_ratio=float(np.min(Q[keep] / comp[keep])),
                            samples=int(np.sum(keep)))


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


def damping_radius(lam: float, cut: float = LAMBDA_CUT) -> float:
    """Distance beyond which the input window is below ``exp(-cut)``."""
    return math.sqrt(2.0 * cut / lam)


def beam_window_radius(lam: float, cut: float = LAMBDA_CUT) -> float:
    """Plateau radius (in ``z`` units) of the beam window."""
    return math.sqrt(8.0 * cut / lam)


def default_spacing(lam: float) -> float:
    return 0.25 / math.sqrt(lam)


@dataclass
class BeamLattice:
    """Transported beams on a tensor lattice in transform variables."""

    lam: float
    theta: float
    alpha: PhasePoint
    weights: np.ndarray
    coarse_weights: np.ndarray
    beams: BeamAmplitudeBatch
    spacing: float
    window: float
    sign: int
    fam: CutoffFamily

    @property
    def size(self) -> int:
        return self.weights.size

    def output_factor(self, x: np.ndarray) -> tuple[np.ndarray, float]:
        """Beam values ``exp(i lam phi - lam |a_xi|^2/2) a chi2 chi5`` at points ``x``
        of shape ``(n, Nx)``; returns ``(Nx, M)`` and the least value of
        ``Im phi + |a_xi|^2 / 2`` inside the window (a damping diagnostic)."""
        n = self.alpha.dim
        lam, theta = self.lam, self.theta
        w = math.sqrt(1.0 + theta * theta)
        b = self.beams
        off = x[:, :, None] - b.ray[:, None, :]
        z = off / w
        r = np.sqrt(np.sum(z * z, axis=0))
        win = band(r, -np.inf, -np.inf, self.window, 1.25 * self.window)
        live = win > 0
        out = np.zeros(r.shape, dtype=complex)
        if not np.any(live):
            return out, math.inf
        cols = np.nonzero(np.any(live, axis=0))[0]
        offc = off[:, :, cols]
        zc = z[:, :, cols]
        phi = _eval_jet(b.phase_coeffs[:, cols], n, b.phase_order, offc)
        axi2 = np.sum(self.alpha.alpha_xi[:, cols] ** 2, axis=0)
        damp = phi.imag + 0.5 * axi2
        margin = float(np.min(np.where(live[:, cols], damp, np.inf)))
        amp = np.zeros(phi.shape, dtype=complex)
        for l in range(b.n_terms + 1):
            term = b.term(l)
            amp += _eval_jet(term.coeffs[:, cols], n, term.order, zc) * lam ** (-l)
        amp *= w ** (-n / 2.0)
        expo = np.where(live[:, cols], 1j * lam * phi.real - lam * damp, -np.inf)
        vals = np.exp(expo) * amp * win[:, cols]
        vals *= self.fam.chi2(x, self.sign)[:, None]
        out[:, cols] = vals
        return out, margin

    def input_factor(self, y: np.ndarray) -> np.ndarray:
        """Transform windows ``exp(i lam (y - a_x).a_xi - lam |y - a_x|^2/2)``; shape ``(M, Ny)``."""
        d = y[:, None, :] - self.alpha.alpha_x[:, :, None]
        axi = self.alpha.alpha_xi[:, :, None]
        return np.exp(1j * self.lam * np.sum(d * axi, axis=0) - 0.5 * self.lam * np.sum(d * d, axis=0))

    @property
    def prefactor(self) -> float:
        n = self.alpha.dim
        return normalization_constant(n) ** 2 * self.lam ** (1.5 * n)


def build_lattice(pert: MetricPerturbation, fam: CutoffFamily, lam: float, t: float, ax_lo, ax_hi,
                  spacing: float | None = None, sign: int = 1, n_terms: int = 2, amp_order: int | None = None,
                  window_cut: float = LAMBDA_CUT, tol: float = 1e-9) -> BeamLattice:
    """Lattice over ``[ax_lo, ax_hi] x supp psi3`` with beams transported to ``theta = lam t``.

    Node counts per axis are odd so that every other node forms the coarse
    lattice used for the refinement error estimate.
    """
    if lam < 1:
        raise ValueError("lambda must be at least 1")
    n = fam.dim
    h = default_spacing(lam) if spacing is None else spacing
    ax_lo = np.broadcast_to(np.asarray(ax_lo, dtype=float), (n,))
    ax_hi = np.broadcast_to(np.asarray(ax_hi, dtype=float), (n,))
    lo, hi = _psi3_momentum_interval(fam)
    axes, coarse = [], []
    for j in range(n):
        m = 2 * int(math.ceil((ax_hi[j] - ax_lo[j]) / (2 * h))) + 1
        axes.append(ax_lo[j] + h * np.arange(m))
        coarse.append(np.arange(m) % 2 == 0)
    if n == 1:
        m = 2 * int(math.ceil((hi - lo) / (2 * h))) + 1
        start = -hi if fam.xi0[0] > 0 else lo
        axes.append(start + h * np.arange(m))
        coarse.append(np.arange(m) % 2 == 0)
    else:
        for _ in range(n):
            m = 2 * int(math.ceil(hi / h)) + 1
            axes.append(-hi + h * np.arange(m))
            coarse.append(np.arange(m) % 2 == 0)
    mesh = np.stack(np.meshgrid(*axes, indexing="ij")).reshape(2 * n, -1)
    cmask = np.ones(mesh.shape[1], dtype=bool)
    for j, c in enumerate(np.meshgrid(*coarse, indexing="ij")):
        cmask &= c.ravel()
    ax, axi = mesh[:n], mesh[n:]
    wts = fam.chi3(ax, sign) * fam.psi3(axi) * h ** (2 * n)
    keep = wts > 0
    alpha = PhasePoint(ax[:, keep], axi[:, keep])
    weights = wts[keep]
    coarse_w = np.where(cmask[keep], weights * 2 ** (2 * n), 0.0)
    theta = lam * t
    if amp_order is None:
        amp_order = 2 * n_terms + 2
    beams = transport_amplitude_batch(pert, _beam_point(alpha), theta, n_terms=n_terms,
                                      phase_order=PHASE_ORDER, amp_order=amp_order, tol=tol)
    return BeamLattice(lam=lam, theta=theta, alpha=alpha, weights=weights, coarse_weights=coarse_w, beams=beams,
                       spacing=h, window=beam_window_radius(lam, window_cut), sign=sign, fam=fam)


@dataclass
class KernelSample:
    """One kernel value with its quadrature error estimate and regime tag."""

    t: float
    x: np.ndarray
    y: np.ndarray
    lam: float
    value: complex
    error: float
    regime: str
    phase_margin: float = math.inf

    @property
    def converged(self) -> bool:
        return self.error <= 0.05 * abs(self.value) or abs(self.value) < FLOOR

    @property
    def scaled(self) -> float:
        return abs(self.value) * abs(self.t) ** (self.x.size / 2.0)


def kernel_matrix(lattice: BeamLattice, xs: np.ndarray, ys: np.ndarray, chunk: int = 256):
    """Fine and coarse kernel values on all pairs; each of shape ``(Nx, Ny)``."""
    G = lattice.input_factor(ys)
    fine = np.zeros((xs.shape[1], ys.shape[1]), dtype=complex)
    coarse = np.zeros_like(fine)
    margin = math.inf
    for s in range(0, xs.shape[1], chunk):
        B, m = lattice.output_factor(xs[:, s:s + chunk])
        margin = min(margin, m)
        fine[s:s + chunk] = (B * lattice.weights) @ G
        coarse[s:s + chunk] = (B * lattice.coarse_weights) @ G
    return lattice.prefactor * fine, lattice.prefactor * coarse, margin


def kernel_samples(pert: MetricPerturbation, fam: CutoffFamily, t: float, lam: float, xs, ys,
                   spacing: float | None = None, sign: int = 1, tol: float = 1e-9,
                   cut: float = LAMBDA_CUT) -> list[KernelSample]:
    """Kernel values at paired points ``xs[:, i], ys[:, i]`` sharing one lattice."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    R = damping_radius(lam, cut)
    lattice = build_lattice(pert, fam, lam, t, ys.min(axis=1) - R, ys.max(axis=1) + R, spacing, sign, tol=tol,
                            window_cut=cut)
    uy, inv = np.unique(ys, axis=1, return_inverse=True)
    inv = np.asarray(inv).reshape(-1)
    out = []
    for j in range(uy.shape[1]):
        sel = np.nonzero(inv == j)[0]
        fine, coarse, margin = kernel_matrix(lattice, xs[:, sel], uy[:, j:j + 1])
        for i, s in enumerate(sel):
            out.append((s, KernelSample(t=t, x=xs[:, s], y=ys[:, s], lam=lam, value=complex(fine[i, 0]),
                                        error=float(abs(fine[i, 0] - coarse[i, 0])),
                                        regime=regime_tag(fam, t, lam, xs[:, s], ys[:, s]), phase_margin=margin)))
    out.sort(key=lambda p: p[0])
    return [p[1] for p in out]


def kernel_quadrature(pert: MetricPerturbation, fam: CutoffFamily, t: float, x, y, lam: float,
                      spacing: float | None = None, sign: int = 1, tol: float = 1e-9) -> KernelSample:
    """Single kernel value ``k(t, x, y)``."""
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    y = np.asarray(y, dtype=float).reshape(-1, 1)
    return kernel_samples(pert, fam, t, lam, x, y, spacing, sign, tol)[0]


# ---------------------------------------------------------------------------
# free-case oracle
# ---------------------------------------------------------------------------


def free_kernel_oracle(fam: CutoffFamily, t: float, lam: float, xs, y, sign: int = 1,
                       half_width: float | None = None) -> np.ndarray:
    """Free kernel by discrete composition: transform, phase-space cutoffs,
    adjoint transform and the exact free propagator, applied to a
    band-limited point source at ``y`` (one dimension)."""
    if fam.dim != 1:
        raise ValueError("the composition oracle is implemented in one dimension")
    xs = np.asarray(xs, dtype=float).reshape(-1)
    y = float(np.asarray(y).reshape(-1)[0])
    theta = lam * t
    top = fam.shell_outer + 5 * fam.delta2
    reach = 2.0 * abs(theta) * top
    margin = 14.0 * math.sqrt(1.0 + 4 * theta * theta) / math.sqrt(lam) + 2.0
    centre = 0.5 * (xs.min() + xs.max())
    if half_width is None:
        half_width = max(abs(xs - y).max(), reach) + margin + abs(centre - y)
    grid = SpatialGrid.for_lambda(1, half_width, lam, max_frequency=top, margin=14.0).shifted(centre)
    x0 = grid.axes()[0][0]
    dx = grid.spacing[0]
    k = grid.frequency_axes()[0]
    src = np.fft.ifft(np.exp(1j * k * (x0 - y)) / dx)
    lo, hi = _psi3_momentum_interval(fam)
    h = default_spacing(lam) / 2.0
    xi_axis = -hi + h * np.arange(int(math.ceil((hi - lo) / h)) + 1)
    # the adjoint is linear in the field, so frequency blocks are summed to bound memory
    block = max(2, int(2 ** 24 // max(k.size, 1)))
    starts = list(range(0, xi_axis.size, block))
    if xi_axis.size - starts[-1] < 2 and len(starts) > 1:
        starts.pop()
    back = np.zeros(k.size, dtype=complex)
    for i, s in enumerate(starts):
        part = xi_axis[s:starts[i + 1] if i + 1 < len(starts) else None]
        field = fbi_forward(src, grid, lam, [part], check_resolution=False)
        field = field.multiply_x(lambda ax: fam.chi3(ax, sign)).multiply_xi(fam.psi3)
        back += fbi_adjoint(field)
    spec = np.fft.fft(back) * np.exp(-1j * t * k * k)
    # trigonometric interpolation at the requested points
    phase = np.exp(1j * np.outer(xs - x0, k))
    return phase @ spec / k.size


# ---------------------------------------------------------------------------
# dispersion sweep
# ---------------------------------------------------------------------------


def stationary_pairs(ys, speeds, theta: float, xi0) -> tuple[np.ndarray, np.ndarray]:
    """Output points ``y + 2 theta s xi0`` for every input ``y`` and speed ``s``."""
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    xi0 = np.asarray(xi0, dtype=float).reshape(-1, 1)
    speeds = np.asarray(speeds, dtype=float)
    X, Y = [], []
    for j in range(ys.shape[1]):
        X.append(ys[:, j:j + 1] + 2.0 * theta * speeds[None, :] * xi0)
        Y.append(np.repeat(ys[:, j:j + 1], speeds.size, axis=1))
    return np.concatenate(X, axis=1), np.concatenate(Y, axis=1)


@dataclass
class DispersionRow:
    t: float
    lam: float
    sup_scaled: float
    x: np.ndarray
    y: np.ndarray
    regime: str
    flagged: int
    samples: list = field(default_factory=list, repr=False)


@dataclass
class DispersionTable:
    rows: list

    @property
    def values(self) -> np.ndarray:
        return np.array([r.sup_scaled for r in self.rows])

    @property
    def max_over_median(self) -> float:
        v = self.values
        return float(np.max(v) / np.median(v))

    @property
    def verdict(self) -> str:
        return "PASS" if self.max_over_median <= 3.0 else "FAIL"

    @property
    def flagged(self) -> int:
        return sum(r.flagged for r in self.rows)

    def by_regime(self) -> dict:
        out: dict = {}
        for r in self.rows:
            out.setdefault(r.regime, []).append(r.sup_scaled)
        return {k: (min(v), max(v)) for k, v in out.items()}


def default_speeds(fam: CutoffFamily, count: int = 25) -> np.ndarray:
    return np.linspace(0.0, fam.shell_outer + 0.3, count)


def _dispersion_item(args):
    pert, fam, t, lam, ys, speeds, spacing, tol = args
    theta = lam * t
    xs, yy = stationary_pairs(ys, speeds, theta, fam.xi0)
    samples = kernel_samples(pert, fam, t, lam, xs, yy, spacing, tol=tol)
    good = [s for s in samples if s.converged]
    flagged = len(samples) - len(good)
    best = max(good, key=lambda s: s.scaled) if good else None
    if best is None:
        return DispersionRow(t, lam, float("nan"), np.full(fam.dim, np.nan), np.full(fam.dim, np.nan), "none",
                             flagged, samples)
    return DispersionRow(t, lam, best.scaled, best.x, best.y, best.regime, flagged, samples)


def dispersion_sweep(pert: MetricPerturbation, fam: CutoffFamily, t_grid, lam_grid: Sequence[float], ys,
                     speeds=None, spacing: float | None = None, tol: float = 1e-9, workers: int = 1) -> DispersionTable:
    """``M(t, lam) = sup |k| |t|^{n/2}`` over stationary-line pairs for each ``(t, lam)``.

    ``t_grid`` is either one sequence shared by all ``lam`` or a mapping
    ``lam -> sequence``.
    """
    speeds = default_speeds(fam) if speeds is None else speeds
    items = []
    for lam in lam_grid:
        ts = t_grid[lam] if isinstance(t_grid, dict) else t_grid
        for t in ts:
            items.append((pert, fam, float(t), float(lam), ys, speeds, spacing, tol))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_dispersion_item, items))
    else:
        rows = [_dispersion_item(it) for it in items]
    return DispersionTable(rows)


def dispersion_times(lam: float, T: float = 1.0) -> list[float]:
    """Times covering ``|lam t| <= 1`` and ``|lam t| >= 1`` up to ``T``."""
    short = [0.25 / lam, 0.5 / lam, 1.0 / lam]
    long = [4.0 / lam, 16.0 / lam, T / 4.0, T]
    return sorted(set(t for t in short + long if t <= T))


# ---------------------------------------------------------------------------
# parametrix applied to data
# ---------------------------------------------------------------------------


@dataclass
class ParametrixResult:
    state: WaveFunction
    coarse: WaveFunction
    lattice_size: int
    phase_margin: float

    @property
    def quadrature_error(self) -> float:
        return self.state.grid.norm(self.state.values - self.coarse.values) / max(self.state.norm(), 1e-300)


def apply_parametrix(pert: MetricPerturbation, fam: CutoffFamily, psi0: WaveFunction, t: float, lam: float,
                     sign: int = 1, spacing: float | None = None, n_terms: int = 2, tol: float = 1e-9,
                     cut: float = LAMBDA_CUT, chunk: int = 512, support_tol: float = 1e-7) -> ParametrixResult:
    """``chi1 psi2(D/lam) chi2`` applied to the kernel integral of ``psi2(D/lam) chi1 psi0``.

    Input nodes where the localized data falls below ``support_tol`` times
    its maximum are dropped (the smooth cutoffs leave a small floor).

    The output lives on the grid the reference solver would use at time
    ``t`` (shifted by ``2 kappa t``) in the same frame as ``psi0``.
    """
    v = localize(psi0, fam, lam, sign)
    grid = v.grid
    n = grid.dim
    lab = v.lab_values()
    mag = np.abs(lab)
    active = mag > support_tol * max(float(mag.max()), 1e-300)
    ys = grid.mesh().reshape(n, -1)[:, active.ravel()]
    vy = lab.ravel()[active.ravel()] * grid.cell_volume
    out_grid = grid.shifted(2.0 * t * psi0.kappa)
    zero = WaveFunction(out_grid, np.zeros(out_grid.shape), psi0.time + t, psi0.kappa)
    if ys.shape[1] == 0:
        return ParametrixResult(zero, zero, 0, math.inf)
    R = damping_radius(lam, cut)
    lattice = build_lattice(pert, fam, lam, t, ys.min(axis=1) - R, ys.max(axis=1) + R, spacing, sign,
                            n_terms=n_terms, tol=tol, window_cut=cut)
    coeff = lattice.input_factor(ys) @ vy
    xs = out_grid.mesh().reshape(n, -1)
    # restrict to nodes any beam window can reach
    w = math.sqrt(1.0 + lattice.theta**2)
    reach = 1.25 * lattice.window * w
    lo = lattice.beams.ray.min(axis=1) - reach
    hi = lattice.beams.ray.max(axis=1) + reach
    near = np.all((xs >= lo[:, None]) & (xs <= hi[:, None]), axis=0)
    idx = np.nonzero(near)[0]
    fine = np.zeros(xs.shape[1], dtype=complex)
    coarse = np.zeros_like(fine)
    margin = math.inf
    for s in range(0, idx.size, chunk):
        sel = idx[s:s + chunk]
        B, m = lattice.output_factor(xs[:, sel])
        margin = min(margin, m)
        fine[sel] = B @ (lattice.weights * coeff)
        coarse[sel] = B @ (lattice.coarse_weights * coeff)
    pref = lattice.prefactor
    res = []
    for vals in (fine, coarse):
        psi = WaveFunction.from_lab(out_grid, pref * vals.reshape(out_grid.shape), psi0.kappa, psi0.time + t)
        psi = psi.apply_spatial(lambda x: fam.chi2(x, sign))
        res.append(delocalize(psi, fam, lam, sign))
    return ParametrixResult(res[0], res[1], lattice.size, margin)


@dataclass
class CompareRow:
    t: float
    lam: float
    relative_error: float
    reference_norm: float
    parametrix_norm: float
    quadrature_error: float


def compare_parametrix(pert: MetricPerturbation, fam: CutoffFamily, psi0: WaveFunction, t_list, lam: float,
                       sign: int = 1, tol: float = 1e-10, spacing: float | None = None, n_terms: int = 2,
                       support_tol: float = 1e-7) -> list[CompareRow]:
    """Relative L2 distance between the parametrix and the sandwiched reference propagator.

    ``support_tol`` sets the input magnitude below which beams are dropped; the
    default leaves a floor near ``2e-8`` in the relative error, ``1e-10``
    removes it at roughly twice the cost.
    """
    from .reference import evolve_many

    v = localize(psi0, fam, lam, sign)
    ts = np.asarray(t_list, dtype=float)
    rows = []
    for sgn in (1.0, -1.0):
        sel = ts * sgn > 0
        if not np.any(sel):
            continue
        states, _ = evolve_many(pert, v, ts[sel], tol)
        for t, st in zip(ts[sel], states):
            ref = delocalize(st, fam, lam, sign)
            par = apply_parametrix(pert, fam, psi0, float(t), lam, sign, spacing, n_terms=n_terms,
                                   support_tol=support_tol)
            diff = ref.grid.norm(par.state.values - ref.values)
            rn = ref.norm()
            rows.append(CompareRow(float(t), lam, diff / rn if rn > 0 else diff, rn, par.state.norm(),
                                   par.quadrature_error))
    rows.sort(key=lambda r: r.t)
    return rows


def compare_packet(lam: float, fam: CutoffFamily, speed: float | None = None, center: float = 0.6,
                   half_width: float = 6.0) -> WaveFunction:
    """Wave packet at frequency ``lam speed xi0`` on a frame grid covering the cutoff band."""
    from .reference import _frame_grid

    n = fam.dim
    speed = 0.5 * (fam.shell_inner + fam.shell_outer) if speed is None else speed
    kappa = lam * speed * fam.xi0
    band_width = lam * (fam.shell_outer - fam.shell_inner) / 2 + lam * 6 * fam.delta2
    grid = _frame_grid(n, half_width, lam, band_width)
    c = center * fam.xi0
    grid = grid.shifted(c)
    x = grid.mesh()
    d = x - c.reshape((-1,) + (1,) * n)
    w = np.exp(-0.5 * lam * np.sum(d * d, axis=0))
    psi = WaveFunction(grid, w, 0.0, kappa)
    return replace(psi, values=psi.values / psi.norm())


def compare_box(lam: float, t_max: float, fam: CutoffFamily) -> float:
    """Half width that keeps a spreading packet clear of the periodic edges."""
    spread = math.sqrt(1.0 + 4.0 * (lam * t_max) ** 2) / math.sqrt(lam)
    return max(2.0, 9.0 * spread + 1.0)


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1) - 1)
