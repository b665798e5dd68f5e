"""Gaussian-windowed phase-space transform, Fourier multipliers and cutoffs.

Conventions
-----------
For a semiclassical parameter ``lam`` the transform of ``u`` is

    T u(a_x, a_xi) = c_n lam^{3n/4} int exp(i lam (y - a_x).a_xi - lam/2 |y - a_x|^2
                                            + lam/2 |a_xi|^2) u(y) dy,

with ``c_n = 2^{-n/2} pi^{-3n/4}``, and its adjoint is taken with respect to
the weight ``exp(-lam |a_xi|^2)``.  Because the raw transform grows like
``exp(lam |a_xi|^2 / 2)``, fields are stored in weighted form
``w = exp(-lam |a_xi|^2 / 2) T u``; in that form ``T`` is an isometry onto its
range and ``T^* T = Id``.  A physical frequency ``sigma`` lands at
``a_xi = -sigma / lam``.

Spatial fields live on a periodic box (:class:`SpatialGrid`); Fourier
multipliers and the Fourier route of the transform act on the periodized
grid, so test states must decay inside the box.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .jets import smooth_step

logger = logging.getLogger(__name__)

SHELL_INNER = 0.6
SHELL_OUTER = 1.9


class ResolutionError(ValueError):
    """Raised when a grid does not resolve the semiclassical scale."""


class CutoffParameterError(ValueError):
    """Raised when cutoff parameters are inconsistent."""


def normalization_constant(dim: int) -> float:
    return 2.0 ** (-dim / 2.0) * math.pi ** (-3.0 * dim / 4.0)


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform periodic grid on ``prod_j [c_j - half_width_j, c_j + half_width_j)``."""

    half_width: tuple[float, ...]
    nodes: tuple[int, ...]
    center: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.half_width) != len(self.nodes):
            raise ValueError("half_width and nodes must have the same length")
        if self.center is None:
            object.__setattr__(self, "center", (0.0,) * len(self.nodes))
        if any(n < 2 for n in self.nodes) or any(h <= 0 for h in self.half_width):
            raise ValueError("grid needs positive extent and at least two nodes per axis")

    @classmethod
    def uniform(cls, dim: int, half_width: float, nodes: int) -> "SpatialGrid":
        return cls((float(half_width),) * dim, (int(nodes),) * dim)

    def shifted(self, offset) -> "SpatialGrid":
        """Same grid translated by ``offset``."""
        off = np.broadcast_to(np.asarray(offset, dtype=float), (self.dim,))
        return SpatialGrid(self.half_width, self.nodes, tuple(float(c + o) for c, o in zip(self.center, off)))

    @classmethod
    def for_lambda(cls, dim: int, half_width: float, lam: float, max_frequency: float = 3.0,
                   margin: float = 12.0) -> "SpatialGrid":
        """Smallest power-of-two grid whose Nyquist band covers ``lam * max_frequency``
        plus ``margin`` Gaussian widths and resolves ``1/sqrt(lam)`` by 6 nodes."""
        need = lam * max_frequency + margin * math.sqrt(lam)
        spacing = min(math.pi / need, 1.0 / (6.0 * math.sqrt(lam)))
        nodes = 2 ** math.ceil(math.log2(2.0 * half_width / spacing))
        return cls.uniform(dim, half_width, nodes)

    @property
    def dim(self) -> int:
        return len(self.nodes)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(2.0 * h / n for h, n in zip(self.half_width, self.nodes))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.nodes)

    def axes(self) -> list[np.ndarray]:
        return [c - h + d * np.arange(n)
                for c, h, d, n in zip(self.center, self.half_width, self.spacing, self.nodes)]

    def mesh(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"))

    def frequency_axes(self) -> list[np.ndarray]:
        return [2.0 * np.pi * np.fft.fftfreq(n, d) for n, d in zip(self.nodes, self.spacing)]

    def frequencies(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.frequency_axes(), indexing="ij"))

    def resolves(self, lam: float) -> bool:
        return max(self.spacing) <= 1.0 / (6.0 * math.sqrt(lam)) * (1 + 1e-12)

    def require_resolution(self, lam: float) -> None:
        if not self.resolves(lam):
            raise ResolutionError(f"grid spacing {max(self.spacing):.3g} does not resolve 1/sqrt({lam}) by 6 nodes")

    def norm(self, u, p: float = 2.0) -> float:
        u = np.abs(np.asarray(u))
        if math.isinf(p):
            return float(np.max(u))
        return float((np.sum(u**p) * self.cell_volume) ** (1.0 / p))

    def inner(self, u, v) -> complex:
        return complex(np.sum(np.asarray(u) * np.conj(v)) * self.cell_volume)

    def edge_mass(self, u, fraction: float = 0.1) -> float:
        """Fraction of ``|u|^2`` in the outer shell of relative width ``fraction``."""
        mask = np.zeros(self.shape, dtype=bool)
        for j, ax in enumerate(self.axes()):
            edge = np.abs(ax - self.center[j]) >= self.half_width[j] * (1.0 - fraction)
            shape = [1] * self.dim
            shape[j] = -1
            mask |= edge.reshape(shape)
        total = np.sum(np.abs(u) ** 2)
        return float(np.sum(np.abs(u[mask]) ** 2) / total) if total > 0 else 0.0


def frequency_axis(lam: float, extent: float = 3.0, spacing: float | None = None) -> np.ndarray:
    """Uniform ``a_xi`` nodes on ``[-extent, extent]`` (default spacing ``0.25/sqrt(lam)``)."""
    if spacing is None:
        spacing = 0.25 / math.sqrt(lam)
    count = int(math.ceil(extent / spacing))
    return spacing * np.arange(-count, count + 1)


# ---------------------------------------------------------------------------
# transform pair
# ---------------------------------------------------------------------------


@dataclass
class FBIField:
    """Phase-space field on ``(a_x grid) x (a_xi grid)``.

    ``values`` has shape ``grid.shape + tuple(len(ax) for ax in xi_axes)`` and
    holds ``exp(-lam |a_xi|^2 / 2) v`` when ``weighted`` is true.
    """

    grid: SpatialGrid
    xi_axes: list
    lam: float
    values: np.ndarray
    weighted: bool = True

    @property
    def xi_spacing(self) -> tuple[float, ...]:
        return tuple(float(ax[1] - ax[0]) for ax in self.xi_axes)

    @property
    def cell_volume(self) -> float:
        return self.grid.cell_volume * float(np.prod(self.xi_spacing))

    def xi_mesh(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.xi_axes, indexing="ij"))

    def _weight(self) -> np.ndarray:
        xi2 = np.sum(self.xi_mesh() ** 2, axis=0)
        return np.exp(-0.5 * self.lam * xi2).reshape((1,) * self.grid.dim + xi2.shape)

    def as_weighted(self) -> "FBIField":
        if self.weighted:
            return self
        return FBIField(self.grid, self.xi_axes, self.lam, self.values * self._weight(), True)

    def raw(self) -> np.ndarray:
        """Unweighted values (may overflow for large ``lam |a_xi|^2``)."""
        return self.values / self._weight() if self.weighted else self.values

    def weighted_norm(self) -> float:
        w = self.as_weighted().values
        return float(np.sqrt(np.sum(np.abs(w) ** 2) * self.cell_volume))

    def weighted_inner(self, other: "FBIField") -> complex:
        a = self.as_weighted().values
        b = other.as_weighted().values
        return complex(np.sum(a * np.conj(b)) * self.cell_volume)

    def multiply_xi(self, func: Callable[[np.ndarray], np.ndarray]) -> "FBIField":
        """Multiply by a function of ``a_xi`` (evaluated on the ``(n, ...)`` mesh)."""
        m = np.asarray(func(self.xi_mesh()))
        return FBIField(self.grid, self.xi_axes, self.lam,
                        self.values * m.reshape((1,) * self.grid.dim + m.shape), self.weighted)

    def multiply_x(self, func: Callable[[np.ndarray], np.ndarray]) -> "FBIField":
        m = np.asarray(func(self.grid.mesh()))
        return FBIField(self.grid, self.xi_axes, self.lam,
                        self.values * m.reshape(m.shape + (1,) * len(self.xi_axes)), self.weighted)


def _gaussian_symbol(grid: SpatialGrid, xi_axes, lam: float) -> list[np.ndarray]:
    """Per-axis ``sqrt(2 pi/lam) exp(-(k + lam a_xi)^2 / (2 lam))`` of shape ``(N_j, M_j)``."""
    out = []
    for k, ax in zip(grid.frequency_axes(), xi_axes):
        out.append(math.sqrt(2.0 * math.pi / lam) * np.exp(-((k[:, None] + lam * ax[None, :]) ** 2) / (2.0 * lam)))
    return out


def _outer_symbol(parts: list[np.ndarray]) -> np.ndarray:
    """Tensor product of per-axis symbols: shape ``(N_1..N_n, M_1..M_n)``."""
    n = len(parts)
    total = None
    for j, p in enumerate(parts):
        shape = [1] * (2 * n)
        shape[j] = p.shape[0]
        shape[n + j] = p.shape[1]
        term = p.reshape(shape)
        total = term if total is None else total * term
    return total


def fbi_forward(u, grid: SpatialGrid, lam: float, xi_axes=None, method: str = "fourier",
                check_resolution: bool = True) -> FBIField:
    """Weighted transform ``exp(-lam |a_xi|^2/2) T u`` on the grid ``a_x = x``.

    ``method="fourier"`` multiplies the spectrum of ``u`` by the Gaussian
    symbol of each window; ``method="direct"`` sums the defining integral
    node by node and serves as an independent check.
    """
    if check_resolution:
        grid.require_resolution(lam)
    u = np.asarray(u, dtype=complex)
    if u.shape != grid.shape:
        raise ValueError(f"field shape {u.shape} does not match grid {grid.shape}")
    n = grid.dim
    if xi_axes is None:
        xi_axes = [frequency_axis(lam)] * n
    xi_axes = [np.asarray(ax, dtype=float) for ax in xi_axes]
    pref = normalization_constant(n) * lam ** (0.75 * n)
    if method == "fourier":
        uhat = np.fft.fftn(u)
        sym = _outer_symbol(_gaussian_symbol(grid, xi_axes, lam))
        vals = np.fft.ifftn(uhat.reshape(uhat.shape + (1,) * n) * sym, axes=tuple(range(n)))
        return FBIField(grid, xi_axes, lam, pref * vals, True)
    if method == "direct":
        axes = grid.axes()
        xi_shape = tuple(len(ax) for ax in xi_axes)
        vals = np.zeros(grid.shape + xi_shape, dtype=complex)
        # separable kernel: product over axes of exp(i lam (y - a) xi - lam/2 (y - a)^2)
        for idx in itertools.product(*[range(m) for m in xi_shape]):
            acc = u
            for j in range(n):
                y = axes[j]
                d = y[None, :] - y[:, None]
                kern = np.exp(1j * lam * d * xi_axes[j][idx[j]] - 0.5 * lam * d * d)
                acc = np.moveaxis(np.tensordot(kern, acc, axes=([1], [j])), 0, j)
            vals[(Ellipsis,) + idx] = acc
        return FBIField(grid, xi_axes, lam, pref * grid.cell_volume * vals, True)
    raise ValueError(f"unknown method '{method}'")


def fbi_adjoint(v: FBIField, method: str = "fourier") -> np.ndarray:
    """``T^* v`` on the spatial grid, using the weighted values of ``v``."""
    grid, lam = v.grid, v.lam
    n = grid.dim
    w = v.as_weighted().values
    pref = normalization_constant(n) * lam ** (0.75 * n) * float(np.prod(v.xi_spacing))
    if method == "fourier":
        what = np.fft.fftn(w, axes=tuple(range(n)))
        sym = _outer_symbol(_gaussian_symbol(grid, v.xi_axes, lam))
        spec = np.sum(what * sym, axis=tuple(range(n, 2 * n)))
        return pref * np.fft.ifftn(spec)
    if method == "direct":
        axes = grid.axes()
        out = np.zeros(grid.shape, dtype=complex)
        xi_shape = w.shape[n:]
        for idx in itertools.product(*[range(m) for m in xi_shape]):
            acc = w[(Ellipsis,) + idx]
            for j in range(n):
                x = axes[j]
                d = x[:, None] - x[None, :]
                kern = np.exp(-1j * lam * d * v.xi_axes[j][idx[j]] - 0.5 * lam * d * d)
                acc = np.moveaxis(np.tensordot(kern, acc, axes=([1], [j])), 0, j)
            out += acc
        return pref * grid.cell_volume * out
    raise ValueError(f"unknown method '{method}'")


def gaussian_transform(lam: float, alpha_x, alpha_xi) -> np.ndarray:
    """Closed-form weighted transform of ``exp(-lam |y|^2 / 2)``; arrays of shape ``(n, ...)``."""
    ax = np.asarray(alpha_x, dtype=float)
    axi = np.asarray(alpha_xi, dtype=float)
    n = ax.shape[0]
    pref = normalization_constant(n) * lam ** (0.25 * n) * math.pi ** (n / 2.0)
    return pref * np.exp(-0.25 * lam * np.sum(ax**2 + axi**2, axis=0) - 0.5j * lam * np.sum(ax * axi, axis=0))


def check_inversion(u, grid: SpatialGrid, lam: float, xi_axes=None) -> float:
    """Relative error ``||T^* T u - u|| / ||u||``."""
    u = np.asarray(u, dtype=complex)
    nu = grid.norm(u)
    if nu == 0.0:
        return 0.0
    back = fbi_adjoint(fbi_forward(u, grid, lam, xi_axes))
    return grid.norm(back - u) / nu


def isometry_error(u, grid: SpatialGrid, lam: float, xi_axes=None) -> float:
    """``| ||weighted T u|| - ||u|| | / ||u||``."""
    nu = grid.norm(u)
    return abs(fbi_forward(u, grid, lam, xi_axes).weighted_norm() - nu) / nu


def coherent_state(grid: SpatialGrid, lam: float, center, frequency) -> np.ndarray:
    """L2-normalized ``exp(i lam eta.(y - c) - lam |y - c|^2 / 2)``."""
    x = grid.mesh()
    c = np.asarray(center, dtype=float).reshape((-1,) + (1,) * grid.dim)
    eta = np.asarray(frequency, dtype=float).reshape((-1,) + (1,) * grid.dim)
    d = x - c
    u = np.exp(1j * lam * np.sum(eta * d, axis=0) - 0.5 * lam * np.sum(d * d, axis=0))
    return u / grid.norm(u)


def random_band_limited(grid: SpatialGrid, lam: float, rng: np.random.Generator, band: float = 2.0,
                        width: float | None = None) -> np.ndarray:
    """Random field with spectrum in ``|k| <= lam * band``, windowed to decay inside the box."""
    k = grid.frequencies()
    kk = np.sqrt(np.sum(k * k, axis=0))
    spec = (rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape)) * (kk <= lam * band)
    u = np.fft.ifftn(spec)
    if width is None:
        width = 0.25 * min(grid.half_width)
    x = grid.mesh()
    window = np.exp(-np.sum(x * x, axis=0) / (2.0 * width * width))
    u = u * window
    # re-band-limit after windowing (the window spreads the spectrum by ~1/width)
    u = np.fft.ifftn(np.fft.fftn(u) * (kk <= lam * band + 40.0 / width))
    return u / grid.norm(u)


# ---------------------------------------------------------------------------
# Fourier multipliers
# ---------------------------------------------------------------------------


def frequency_cutoff_apply(symbol: Callable[[np.ndarray], np.ndarray], lam: float, u,
                           grid: SpatialGrid) -> np.ndarray:
    """``symbol(D / lam) u`` by discrete Fourier multiplication on the periodic grid."""
    u = np.asarray(u, dtype=complex)
    k = grid.frequencies() / lam
    return np.fft.ifftn(np.asarray(symbol(k)) * np.fft.fftn(u))


# ---------------------------------------------------------------------------
# cutoff family
# ---------------------------------------------------------------------------


def _rise(v, start, end):
    """0 for ``v <= start``, 1 for ``v >= end`` (canonical smooth step)."""
    return smooth_step((np.asarray(v, dtype=float) - start) / (end - start))


def band(v, support_lo, plateau_lo, plateau_hi, support_hi):
    """Smooth band: 1 on ``[plateau_lo, plateau_hi]``, 0 outside ``(support_lo, support_hi)``.

    Infinite limits give one-sided steps.
    """
    v = np.asarray(v, dtype=float)
    out = np.ones_like(v)
    if math.isfinite(plateau_lo):
        out = out * _rise(v, support_lo, plateau_lo)
    if math.isfinite(plateau_hi):
        out = out * (1.0 - _rise(v, plateau_hi, support_hi))
    return out


def chi0(s):
    """1 for ``s <= 3/4``, 0 for ``s >= 1``."""
    return band(s, -np.inf, -np.inf, 0.75, 1.0)


def _direction_distance(xi, target) -> np.ndarray:
    """``|xi/|xi| - target|`` (``inf`` at ``xi = 0``)."""
    xi = np.asarray(xi, dtype=float)
    t = np.asarray(target, dtype=float).reshape((-1,) + (1,) * (xi.ndim - 1))
    r = np.sqrt(np.sum(xi * xi, axis=0))
    safe = np.where(r > 0, r, 1.0)
    d = np.sqrt(np.sum((xi / safe - t) ** 2, axis=0))
    return np.where(r > 0, d, np.inf)


@dataclass(frozen=True)
class Declared:
    """Declared plateau and support of one cutoff, as predicates on sample points."""

    plateau: Callable[[np.ndarray], np.ndarray]
    support: Callable[[np.ndarray], np.ndarray]


@dataclass
class CutoffFamily:
    """Spatial and frequency cutoffs attached to a direction ``xi0``.

    Spatial cutoffs act on points of shape ``(n, ...)``; frequency cutoffs
    on frequencies ``xi`` (already divided by ``lam``) of the same shape.
    ``delta`` is the beam window radius used by ``chi5`` and ``c0`` the
    outgoing-test constant used by ``chi4``.
    """

    xi0: np.ndarray
    delta1: float
    delta2: float
    delta: float = 0.01
    c0: float = 0.1
    shell_inner: float = SHELL_INNER
    shell_outer: float = SHELL_OUTER
    strict: bool = True
    declared: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.xi0 = np.asarray(self.xi0, dtype=float).reshape(-1)
        if abs(np.linalg.norm(self.xi0) - 1.0) > 1e-12:
            raise CutoffParameterError("xi0 must be a unit vector")
        if self.delta1 <= 0 or self.delta2 <= 0 or self.delta <= 0:
            raise CutoffParameterError("cutoff parameters must be positive")
        if self.strict and self.delta2 > 0.01:
            raise CutoffParameterError(f"delta2 = {self.delta2} exceeds 1/100")
        if self.shell_inner - 4 * self.delta2 <= 0:
            raise CutoffParameterError("delta2 too large: frequency shells reach the origin")
        self.declared = self._declare()

    def __getstate__(self):
        # declared holds closures; rebuild them on unpickle
        state = dict(self.__dict__)
        state.pop("declared", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self.declared = self._declare()

    @property
    def dim(self) -> int:
        return self.xi0.size

    def _dot(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.tensordot(self.xi0, x, axes=(0, 0))

    # -- spatial ---------------------------------------------------------

    def chi1(self, x, sign: int = 1):
        return chi0(-sign * self._dot(x) / self.delta1)

    def chi2(self, x, sign: int = 1):
        return chi0(-sign * self._dot(x) / (2.0 * self.delta1))

    def chi3(self, x, sign: int = 1):
        return chi0(-sign * self._dot(x) / (3.0 * self.delta1))

    def chi4(self, y, alpha_x, alpha_xi, sign: int = 1):
        """Identically 1 near non-radial base points, a half-space cutoff otherwise."""
        ax = np.asarray(alpha_x, dtype=float)
        axi = np.asarray(alpha_xi, dtype=float)
        radial = np.abs(np.sum(ax * axi, axis=0)) > 0.5 * self.c0 * np.sqrt(1 + np.sum(ax * ax, axis=0)) \
            * np.sqrt(np.sum(axi * axi, axis=0))
        cut = chi0(-sign * self._dot(y) / (5.0 * self.delta1))
        return np.where(radial, cut, 1.0)

    def chi5(self, y):
        r = np.sqrt(np.sum(np.asarray(y, dtype=float) ** 2, axis=0))
        return band(r, -np.inf, -np.inf, 0.5 * self.delta, self.delta)

    def chi6(self, x):
        r = np.sqrt(np.sum(np.asarray(x, dtype=float) ** 2, axis=0))
        return band(r, -np.inf, -np.inf, 0.5, 1.0)

    def chi6_plus(self, beta_x):
        s = -self._dot(beta_x)
        d1 = self.delta1
        return band(s, 3.4 * d1, 3.5 * d1, 6.0 * d1, 7.0 * d1)

    # -- frequency --------------------------------------------------------

    def _radius(self, xi):
        return np.sqrt(np.sum(np.asarray(xi, dtype=float) ** 2, axis=0))

    def psi0(self, xi):
        d2 = self.delta2
        ang = _direction_distance(xi, self.xi0)
        ang = np.where(np.isfinite(ang), ang, 10.0)
        return band(ang, -np.inf, -np.inf, d2, 2 * d2) * band(self._radius(xi), d2, 2 * d2, np.inf, np.inf)

    def psi1(self, xi):
        d2, a, b = self.delta2, self.shell_inner, self.shell_outer
        return band(self._radius(xi), a - 2 * d2, a - d2, b + d2, b + 2 * d2)

    def psi2(self, xi):
        return self.psi0(xi) * self.psi1(xi)

    def _reflected_shell(self, xi, k: int):
        """1 within ``k delta2`` of the reflected cone and shell, support within ``k + 1``."""
        d2, a, b = self.delta2, self.shell_inner, self.shell_outer
        ang = _direction_distance(xi, -self.xi0)
        ang = np.where(np.isfinite(ang), ang, 10.0)
        return band(ang, -np.inf, -np.inf, k * d2, (k + 1) * d2) * \
            band(self._radius(xi), a - (k + 1) * d2, a - k * d2, b + k * d2, b + (k + 1) * d2)

    def psi3(self, xi):
        return self._reflected_shell(xi, 3)

    def psi4(self, xi):
        return self._reflected_shell(xi, 5)

    def psi5(self, xi):
        return self._reflected_shell(xi, 7)

    # -- declared shells --------------------------------------------------

    def _declare(self) -> dict:
        d1, d2, a, b = self.delta1, self.delta2, self.shell_inner, self.shell_outer
        r = lambda v: np.sqrt(np.sum(np.asarray(v, dtype=float) ** 2, axis=0))
        dot = self._dot
        ang_p = lambda v: np.nan_to_num(_direction_distance(v, self.xi0), posinf=10.0)
        ang_m = lambda v: np.nan_to_num(_direction_distance(v, -self.xi0), posinf=10.0)
        out = {
            "chi1+": Declared(lambda x: -dot(x) <= 0.75 * d1, lambda x: -dot(x) < d1),
            "chi1-": Declared(lambda x: dot(x) <= 0.75 * d1, lambda x: dot(x) < d1),
            "chi2+": Declared(lambda x: -dot(x) <= 1.5 * d1, lambda x: -dot(x) < 2 * d1),
            "chi2-": Declared(lambda x: dot(x) <= 1.5 * d1, lambda x: dot(x) < 2 * d1),
            "chi3+": Declared(lambda x: -dot(x) <= 2.25 * d1, lambda x: -dot(x) < 3 * d1),
            "chi3-": Declared(lambda x: dot(x) <= 2.25 * d1, lambda x: dot(x) < 3 * d1),
            "chi5": Declared(lambda y: r(y) <= 0.5 * self.delta, lambda y: r(y) < self.delta),
            "chi6": Declared(lambda x: r(x) <= 0.5, lambda x: r(x) < 1.0),
            "chi6+": Declared(lambda x: (-dot(x) >= 3.5 * d1) & (-dot(x) <= 6 * d1),
                              lambda x: (-dot(x) > 3.4 * d1) & (-dot(x) < 7 * d1)),
            "psi0": Declared(lambda v: (ang_p(v) <= d2) & (r(v) >= 2 * d2),
                             lambda v: (ang_p(v) < 2 * d2) & (r(v) > d2)),
            "psi1": Declared(lambda v: (r(v) >= a - d2) & (r(v) <= b + d2),
                             lambda v: (r(v) > a - 2 * d2) & (r(v) < b + 2 * d2)),
        }
        out["psi2"] = Declared(lambda v: out["psi0"].plateau(v) & out["psi1"].plateau(v),
                               lambda v: out["psi0"].support(v) & out["psi1"].support(v))
        for name, k in (("psi3", 3), ("psi4", 5), ("psi5", 7)):
            out[name] = Declared(
                (lambda k: lambda v: (ang_m(v) <= k * d2) & (r(v) >= a - k * d2) & (r(v) <= b + k * d2))(k),
                (lambda k: lambda v: (ang_m(v) < (k + 1) * d2) & (r(v) > a - (k + 1) * d2)
                 & (r(v) < b + (k + 1) * d2))(k))
        return out

    def function(self, name: str) -> Callable:
        table = {
            "chi1+": lambda x: self.chi1(x, 1), "chi1-": lambda x: self.chi1(x, -1),
            "chi2+": lambda x: self.chi2(x, 1), "chi2-": lambda x: self.chi2(x, -1),
            "chi3+": lambda x: self.chi3(x, 1), "chi3-": lambda x: self.chi3(x, -1),
            "chi5": self.chi5, "chi6": self.chi6, "chi6+": self.chi6_plus,
            "psi0": self.psi0, "psi1": self.psi1, "psi2": self.psi2, "psi3": self.psi3,
            "psi4": self.psi4, "psi5": self.psi5,
        }
        return table[name]

    def verify(self, points: np.ndarray | None = None) -> dict:
        """Check every declared plateau (exactly 1), support (exactly 0 outside) and range.

        Returns a mapping ``name -> (plateau_ok, support_ok, range_ok)``.
        """
        if points is None:
            points = verification_points(self.dim, 2.5, 20001 if self.dim == 1 else 401)
        report = {}
        for name, dec in self.declared.items():
            pts = points
            if name in ("chi5",):
                pts = points * (self.delta / 2.5) * 1.5
            elif name.startswith("chi") and name != "chi6":
                pts = points * (8 * self.delta1 / 2.5)
            vals = np.asarray(self.function(name)(pts))
            plat = dec.plateau(pts)
            supp = dec.support(pts)
            report[name] = (bool(np.all(vals[plat] == 1.0)), bool(np.all(vals[~supp] == 0.0)),
                            bool(np.all((vals >= 0.0) & (vals <= 1.0))))
        return report


def verification_points(dim: int, extent: float, per_axis: int) -> np.ndarray:
    axes = [np.linspace(-extent, extent, per_axis)] * dim
    return np.stack(np.meshgrid(*axes, indexing="ij")).reshape(dim, -1)


def make_cutoffs(xi0, delta1: float, delta2: float, delta: float = 0.01, c0: float = 0.1,
                 strict: bool = True) -> CutoffFamily:
    """Build and verify a cutoff family; ``strict=False`` allows ``delta2 > 1/100``."""
    fam = CutoffFamily(xi0=np.asarray(xi0, dtype=float), delta1=delta1, delta2=delta2, delta=delta, c0=c0,
                       strict=strict)
    bad = {k: v for k, v in fam.verify().items() if not all(v)}
    if bad:
        raise CutoffParameterError(f"cutoff shells violated: {bad}")
    return fam


def frequency_separation_margin(fam: CutoffFamily, samples: int = 20000, seed: int = 0) -> float:
    """Min of ``|xi + a_xi| - delta2 |a_xi| / 2`` over random samples in
    ``supp psi2(xi) (1 - psi3(a_xi))`` (nonnegative when the separation holds)."""
    rng = np.random.default_rng(seed)
    n = fam.dim
    a, b, d2 = fam.shell_inner, fam.shell_outer, fam.delta2
    # xi near the cone around xi0 within the psi2 support
    xi = fam.xi0[:, None] * rng.uniform(a - 2 * d2, b + 2 * d2, samples)
    if n > 1:
        xi = xi + rng.normal(size=(n, samples)) * d2 * np.linalg.norm(xi, axis=0)
    axi = rng.uniform(-3.0, 3.0, size=(n, samples))
    keep = (fam.psi2(xi) > 0) & (fam.psi3(axi) < 1)
    if not np.any(keep):
        raise ValueError("no samples in the separation region")
    xi, axi = xi[:, keep], axi[:, keep]
    return float(np.min(np.linalg.norm(xi + axi, axis=0) - 0.5 * d2 * np.linalg.norm(axi, axis=0)))


# ---------------------------------------------------------------------------
# microlocal mismatch
# ---------------------------------------------------------------------------


@dataclass
class MismatchReport:
    """Fitted exponential decay rate of the frequency-mismatch norm ratio."""

    lams: np.ndarray
    ratios: np.ndarray
    slope: float
    intercept: float
    delta2: float
    bound_slope: float

    @property
    def passes(self) -> bool:
        return self.slope <= 0.7 * self.bound_slope


def mismatch_ratio(fam: CutoffFamily, lam: float, offset: float = 5.0, half_width: float = 1.0) -> float:
    """``||psi2(D/lam) T^*[(1 - psi3) T u]|| / ||weighted T u||`` for a coherent state.

    The test state has frequency ``lam (b + offset delta2) xi0``: its transform
    sits outside the plateau of ``psi3`` while its spectrum leaves the
    support of ``psi2`` by ``(offset - 2) delta2``.
    """
    n = fam.dim
    eta = (fam.shell_outer + offset * fam.delta2) * fam.xi0
    grid = SpatialGrid.for_lambda(n, half_width, lam, max_frequency=float(np.linalg.norm(eta)) + 0.5)
    u = coherent_state(grid, lam, np.zeros(n), eta)
    extent = float(np.linalg.norm(eta)) + 12.0 / math.sqrt(lam)
    xi_axes = [frequency_axis(lam, extent)] * n
    v = fbi_forward(u, grid, lam, xi_axes)
    den = v.weighted_norm()
    masked = v.multiply_xi(lambda m: 1.0 - fam.psi3(m))
    num = grid.norm(frequency_cutoff_apply(fam.psi2, lam, fbi_adjoint(masked), grid))
    return num / den


def microlocal_mismatch(fam: CutoffFamily, lams: Sequence[float], offset: float = 5.0) -> MismatchReport:
    """Fit ``log(ratio) = slope * lam + c`` over ``lams`` (at least four values)."""
    lams = np.asarray(sorted(lams), dtype=float)
    if lams.size < 4:
        raise ValueError("need at least four lambda samples")
    ratios = np.array([mismatch_ratio(fam, lam, offset) for lam in lams])
    slope, intercept = np.polyfit(lams, np.log(ratios), 1)
    return MismatchReport(lams=lams, ratios=ratios, slope=float(slope), intercept=float(intercept),
                          delta2=fam.delta2, bound_slope=-fam.delta2**2 / 8.0)
