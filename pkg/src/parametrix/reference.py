"""Spectral reference solver for ``i u_t = P u`` with ``P = -div(g grad)``.

States are stored in a Galilean frame with momentum ``kappa``:

    u(t, x) = exp(i kappa.x - i |kappa|^2 t) w(t, x),

on a periodic grid whose centre moves with velocity ``2 kappa``.  The free
part is integrated exactly through the integrating factor
``exp(-i t |k|^2)``; the variable-coefficient part
``eps Q w = -eps (grad + i kappa).(b (grad + i kappa) w)`` is applied
pseudo-spectrally (Fourier differentiation, pointwise coefficients at the
lab-frame node positions) and integrated with an adaptive eighth-order
Runge-Kutta method.  With ``kappa = 0`` this is the plain lab-frame scheme.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.integrate import simpson, solve_ivp

from .fbi import CutoffFamily, SpatialGrid
from .symbols import MetricPerturbation

logger = logging.getLogger(__name__)

WRAP_LIMIT = 1e-8


class WraparoundError(RuntimeError):
    """Raised when a state carries too much mass near the periodic boundary."""


class InadmissiblePairError(ValueError):
    """Raised for exponents violating the admissibility relation."""


@dataclass
class WaveFunction:
    """Nodal values ``w`` of a state on ``grid`` in the frame with momentum ``kappa``."""

    grid: SpatialGrid
    values: np.ndarray
    time: float = 0.0
    kappa: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values of shape {self.values.shape} do not match grid {self.grid.shape}")
        if self.kappa.size == 0:
            self.kappa = np.zeros(self.grid.dim)
        self.kappa = np.asarray(self.kappa, dtype=float).reshape(self.grid.dim)

    @classmethod
    def from_lab(cls, grid: SpatialGrid, u, kappa=None, time: float = 0.0) -> "WaveFunction":
        """Wrap lab-frame values ``u`` (removing the frame phase)."""
        kappa = np.zeros(grid.dim) if kappa is None else np.asarray(kappa, dtype=float).reshape(grid.dim)
        return cls(grid, np.asarray(u) * np.conj(_frame_phase(grid, kappa, time)), time, kappa)

    def lab_values(self) -> np.ndarray:
        return self.values * _frame_phase(self.grid, self.kappa, self.time)

    def norm(self, p: float = 2.0) -> float:
        return self.grid.norm(self.values, p)

    def edge_mass(self) -> float:
        return self.grid.edge_mass(self.values)

    def wavenumbers(self) -> np.ndarray:
        """Lab-frame wavenumbers ``k + kappa`` on the FFT layout."""
        k = self.grid.frequencies()
        return k + self.kappa.reshape((-1,) + (1,) * self.grid.dim)

    def apply_multiplier(self, symbol, lam: float) -> "WaveFunction":
        """``symbol(D / lam)`` in lab frequencies."""
        m = np.asarray(symbol(self.wavenumbers() / lam))
        return replace(self, values=np.fft.ifftn(m * np.fft.fftn(self.values)))

    def apply_spatial(self, func) -> "WaveFunction":
        return replace(self, values=self.values * np.asarray(func(self.grid.mesh())))

    def inner(self, other: "WaveFunction") -> complex:
        return complex(np.sum(self.lab_values() * np.conj(other.lab_values())) * self.grid.cell_volume)


def _frame_phase(grid: SpatialGrid, kappa: np.ndarray, time: float) -> np.ndarray:
    if not np.any(kappa):
        return np.ones(grid.shape)
    x = grid.mesh()
    return np.exp(1j * (np.tensordot(kappa, x, axes=(0, 0)) - float(kappa @ kappa) * time))


def check_wraparound(psi: WaveFunction, limit: float = WRAP_LIMIT) -> float:
    mass = psi.edge_mass()
    if mass > limit:
        raise WraparoundError(f"edge mass {mass:.3e} exceeds {limit:.1e} at t = {psi.time:.6g} "
                              f"(grid centre {psi.grid.center}, half width {psi.grid.half_width})")
    return mass


class _SpectralOperator:
    def __init__(self, pert: MetricPerturbation, grid: SpatialGrid, kappa: np.ndarray):
        self.pert = pert
        self.grid = grid
        self.kappa = kappa
        self.n = grid.dim
        self.k = grid.frequencies()
        self.k2 = np.sum(self.k**2, axis=0)
        self.kk = self.k + kappa.reshape((-1,) + (1,) * self.n)
        self.x0 = grid.mesh()
        self.flat = pert.is_flat or pert.epsilon == 0.0

    def coefficients(self, tau: float) -> np.ndarray:
        x = self.x0 + 2.0 * tau * self.kappa.reshape((-1,) + (1,) * self.n)
        pts = x.reshape(self.n, -1)
        b = self.pert.coefficients(pts) * self.pert.epsilon
        return b.reshape((self.n, self.n) + self.grid.shape)

    def apply_q(self, what: np.ndarray, tau: float) -> np.ndarray:
        """Spectrum of ``eps Q w`` given the spectrum of ``w``."""
        n = self.n
        axes = tuple(range(n))
        grads = [np.fft.ifftn(1j * self.kk[k] * what, axes=axes) for k in range(n)]
        b = self.coefficients(tau)
        out = np.zeros_like(what)
        for j in range(n):
            flux = sum(b[j, k] * grads[k] for k in range(n))
            out -= 1j * self.kk[j] * np.fft.fftn(flux, axes=axes)
        return out

    def energy(self, what: np.ndarray, tau: float) -> float:
        """``<P u, u>`` from the spectrum of ``w`` at elapsed time ``tau``."""
        n = self.n
        vol = self.grid.cell_volume
        kin = float(np.sum(np.sum(self.kk**2, axis=0) * np.abs(what) ** 2)) * vol / what.size
        if self.flat:
            return kin
        grads = [np.fft.ifftn(1j * self.kk[k] * what) for k in range(n)]
        b = self.coefficients(tau)
        pot = 0.0
        for j in range(n):
            for k in range(n):
                pot += float(np.real(np.sum(np.conj(grads[j]) * b[j, k] * grads[k]))) * vol
        return kin + pot


@dataclass
class EvolutionReport:
    """Diagnostics attached to a reference evolution."""

    mass_drift: float
    energy_drift: float
    edge_mass: float
    steps: int


def evolve_many(pert: MetricPerturbation, psi0: WaveFunction, times: Sequence[float], tol: float = 1e-10,
                check: bool = True) -> tuple[list[WaveFunction], EvolutionReport]:
    """Evolve ``psi0`` by ``exp(-i t P)`` to each elapsed time in ``times`` (same sign)."""
    pert.require_certified()
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        return [], EvolutionReport(0.0, 0.0, 0.0, 0)
    if np.any(times > 0) and np.any(times < 0):
        raise ValueError("times must share one sign; call twice for both directions")
    if check:
        check_wraparound(psi0)
    grid, kappa = psi0.grid, psi0.kappa
    op = _SpectralOperator(pert, grid, kappa)
    w0hat = np.fft.fftn(psi0.values)
    m0 = psi0.norm()
    e0 = op.energy(w0hat, 0.0)
    order = np.argsort(np.abs(times))
    if op.flat:
        hats = {i: np.exp(-1j * times[i] * op.k2) * w0hat for i in order}
        steps = 0
    else:
        shape = grid.shape

        def rhs(tau, c):
            phase = np.exp(-1j * tau * op.k2)
            qw = op.apply_q(phase * c.reshape(shape), tau)
            return (-1j * np.conj(phase) * qw).ravel()

        end = float(times[order[-1]])
        t_eval = np.sort(times) if end > 0 else np.sort(times)[::-1]
        sol = solve_ivp(rhs, (0.0, end), w0hat.ravel(), method="DOP853", rtol=tol, atol=tol * 1e-3 * np.max(np.abs(w0hat)),
                        t_eval=t_eval)
        if not sol.success:
            raise RuntimeError(f"reference evolution failed: {sol.message}")
        steps = int(sol.t.size)
        hats = {}
        for col, tau in enumerate(sol.t):
            i = int(np.where(times == tau)[0][0])
            hats[i] = np.exp(-1j * tau * op.k2) * sol.y[:, col].reshape(shape)
    out = []
    mass_drift = 0.0
    energy_drift = 0.0
    edge = 0.0
    for i in range(times.size):
        tau = float(times[i])
        what = hats[i]
        psi = WaveFunction(grid.shifted(2.0 * tau * kappa), np.fft.ifftn(what), psi0.time + tau, kappa)
        mass_drift = max(mass_drift, abs(psi.norm() - m0))
        energy_drift = max(energy_drift, abs(op.energy(what, tau) - e0) / max(abs(e0), 1e-300))
        edge = max(edge, psi.edge_mass())
        if check:
            check_wraparound(psi)
        out.append(psi)
    return out, EvolutionReport(mass_drift=mass_drift, energy_drift=energy_drift, edge_mass=edge, steps=steps)


def evolve_reference(pert: MetricPerturbation, psi0: WaveFunction, t: float, tol: float = 1e-10,
                     check: bool = True) -> WaveFunction:
    """``exp(-i t P) psi0``."""
    if t == 0.0:
        return replace(psi0)
    (psi,), report = evolve_many(pert, psi0, [t], tol, check)
    psi.report = report
    return psi


def free_gaussian_peak_ratio(t: float, width: float, dim: int = 1) -> float:
    """``||u(t)||_inf / ||u0||_inf`` for ``u0 = exp(-|x|^2 / (2 width^2))`` under the free flow."""
    return (1.0 + (2.0 * t / width**2) ** 2) ** (-dim / 4.0)


# ---------------------------------------------------------------------------
# sandwiched propagators
# ---------------------------------------------------------------------------


def localize(psi: WaveFunction, fam: CutoffFamily, lam: float, sign: int = 1) -> WaveFunction:
    """``psi2(D/lam) chi1(x) psi``."""
    return psi.apply_spatial(lambda x: fam.chi1(x, sign)).apply_multiplier(fam.psi2, lam)


def delocalize(psi: WaveFunction, fam: CutoffFamily, lam: float, sign: int = 1) -> WaveFunction:
    """``chi1(x) psi2(D/lam) psi``."""
    return psi.apply_multiplier(fam.psi2, lam).apply_spatial(lambda x: fam.chi1(x, sign))


def sandwiched_propagator(pert: MetricPerturbation, psi0: WaveFunction, t: float, lam: float,
                          fam: CutoffFamily, sign: int = 1, tol: float = 1e-10) -> WaveFunction:
    """``chi1 psi2(D/lam) exp(-i t P) psi2(D/lam) chi1`` applied to ``psi0``."""
    v = localize(psi0, fam, lam, sign)
    return delocalize(evolve_reference(pert, v, t, tol), fam, lam, sign)


def tt_star_residual(pert: MetricPerturbation, f: WaveFunction, g: WaveFunction, t1: float, t2: float,
                     lam: float, fam: CutoffFamily, sign: int = 1, tol: float = 1e-10) -> float:
    """``|<U(t1) U(t2)^* f, g> - <K(t1 - t2) f, g>|`` with ``U(t) = chi1 psi2(D/lam) exp(-itP)``."""
    v = localize(f, fam, lam, sign)
    back = evolve_reference(pert, v, -t2, tol)
    composed = delocalize(evolve_reference(pert, back, t1, tol), fam, lam, sign)
    direct = sandwiched_propagator(pert, f, t1 - t2, lam, fam, sign, tol)
    lhs = _inner_on(composed, g)
    rhs = _inner_on(direct, g)
    return abs(lhs - rhs)


def _inner_on(a: WaveFunction, b: WaveFunction) -> complex:
    """Inner product of lab values; ``b`` is resampled spectrally onto ``a``'s grid if shifted."""
    if a.grid != b.grid:
        b = regrid(b, a.grid)
    return a.inner(b)


def regrid(psi: WaveFunction, grid: SpatialGrid) -> WaveFunction:
    """Translate ``psi`` onto a grid with equal spacing and node count (trigonometric interpolation)."""
    if grid.nodes != psi.grid.nodes or not np.allclose(grid.spacing, psi.grid.spacing):
        raise ValueError("regrid only supports translated grids")
    shift = np.asarray(grid.center) - np.asarray(psi.grid.center)
    k = psi.grid.frequencies()
    phase = np.exp(1j * np.tensordot(shift, k, axes=(0, 0)))
    w = np.fft.ifftn(np.fft.fftn(psi.values) * phase)
    return WaveFunction(grid, w, psi.time, psi.kappa)


def narrow_bump(grid: SpatialGrid, center, width: float) -> np.ndarray:
    """L1-normalized Gaussian bump."""
    x = grid.mesh()
    c = np.asarray(center, dtype=float).reshape((-1,) + (1,) * grid.dim)
    u = np.exp(-np.sum((x - c) ** 2, axis=0) / (2.0 * width**2))
    return u / grid.norm(u, 1.0)


def operator_dispersion(pert: MetricPerturbation, fam: CutoffFamily, lam: float, times: Sequence[float],
                        centers: Sequence, width: float, half_width: float, tol: float = 1e-9,
                        sign: int = 1) -> np.ndarray:
    """``sup_u ||K(t) u||_inf |t|^{n/2} / ||u||_1`` over narrow bumps, for each ``t``."""
    n = fam.dim
    kappa = sign * 0.5 * (fam.shell_inner + fam.shell_outer) * lam * fam.xi0
    rel = 0.7 * lam
    grid = _frame_grid(n, half_width, lam, rel)
    out = np.zeros(len(times))
    for c in centers:
        u = narrow_bump(grid, c, width)
        psi0 = WaveFunction.from_lab(grid, u, kappa)
        l1 = grid.norm(u, 1.0)
        v = localize(psi0, fam, lam, sign)
        for i, t in enumerate(times):
            w = delocalize(evolve_reference(pert, v, float(t), tol), fam, lam, sign)
            out[i] = max(out[i], w.norm(np.inf) * abs(t) ** (n / 2.0) / l1)
    return out


def _frame_grid(dim: int, half_width: float, lam: float, band: float) -> SpatialGrid:
    """Grid whose Nyquist band covers ``band`` plus Gaussian margin in the frame."""
    need = band + 12.0 * math.sqrt(lam)
    nodes = 2 ** math.ceil(math.log2(2.0 * half_width * need / math.pi))
    return SpatialGrid.uniform(dim, half_width, nodes)


# ---------------------------------------------------------------------------
# Strichartz norms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StrichartzPair:
    """Exponents with ``2/q = n/2 - n/r``, ``q > 2`` and finite ``r``."""

    q: float
    r: float
    dim: int

    def __post_init__(self):
        if not self.q > 2 or not math.isfinite(self.r) or self.r < 2:
            raise InadmissiblePairError(f"need q > 2 and 2 <= r < inf, got ({self.q}, {self.r})")
        if abs(2.0 / self.q - (self.dim / 2.0 - self.dim / self.r)) > 1e-14:
            raise InadmissiblePairError(f"(q, r) = ({self.q}, {self.r}) violates 2/q = n/2 - n/r in dimension {self.dim}")


def strichartz_time_nodes(T: float, scale: float, per_decade: int = 24, first: float | None = None) -> np.ndarray:
    """Nonnegative time nodes from 0 to ``T``: uniform up to ``first``, geometric beyond."""
    if first is None:
        first = 0.25 / scale
    first = min(first, T)
    head = np.linspace(0.0, first, 17)
    if first >= T:
        return head
    decades = math.log10(T / first)
    tail = np.geomspace(first, T, max(int(math.ceil(decades * per_decade)) + 1, 3))
    return np.concatenate([head, tail[1:]])


def strichartz_norm(pert: MetricPerturbation, psi0: WaveFunction, pair: StrichartzPair, T: float,
                    nodes: np.ndarray | None = None, scale: float = 1.0, tol: float = 1e-9) -> float:
    """``|| exp(-itP) u0 ||_{L^q([-T, T], L^r)}`` by Simpson's rule over graded time nodes."""
    if nodes is None:
        nodes = strichartz_time_nodes(T, scale)
    total = 0.0
    for sgn in (1.0, -1.0):
        ts = nodes[1:] * sgn
        states, _ = evolve_many(pert, psi0, ts, tol)
        vals = np.concatenate([[psi0.norm(pair.r)], [s.norm(pair.r) for s in states]]) ** pair.q
        total += simpson(vals, x=nodes)
    return float(total ** (1.0 / pair.q))


def wave_packet(lam: float, dim: int, direction, half_width: float, center=None) -> WaveFunction:
    """L2-normalized coherent state at frequency ``lam * direction`` in its own frame."""
    direction = np.asarray(direction, dtype=float).reshape(dim)
    kappa = lam * direction
    grid = _frame_grid(dim, half_width, lam, 0.0)
    x = grid.mesh()
    c = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
    d = x - c.reshape((-1,) + (1,) * dim)
    w = np.exp(-0.5 * lam * np.sum(d * d, axis=0))
    psi = WaveFunction(grid, w, 0.0, kappa)
    return replace(psi, values=psi.values / psi.norm())


def strichartz_ratio(pert: MetricPerturbation, lam: float, pair: StrichartzPair, T: float = 1.0,
                     direction=None, half_width: float | None = None, tol: float = 1e-9) -> float:
    """Mixed norm over ``||u0||_2`` for a frequency-``lam`` wave packet."""
    n = pair.dim
    direction = np.eye(n)[0] if direction is None else direction
    if half_width is None:
        half_width = max(6.0, 6.0 * 2.0 * math.sqrt(lam) * T)
    psi0 = wave_packet(lam, n, direction, half_width)
    return strichartz_norm(pert, psi0, pair, T, scale=lam, tol=tol) / psi0.norm()
