"""Asymptotically flat metric perturbations and their certification.

The principal symbol is ``p(x, xi) = xi . g(x) xi`` with ``g = I + eps * b`` and
``b`` a symmetric matrix of smooth coefficients decaying like
``<x>^{-(1 + sigma0)}`` together with its derivatives.  Coefficients are
closed-form families evaluated through Taylor jets, so exact partial
derivatives of every order are available.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .jets import CapabilityError, TaylorJet, jet_power, multi_index_table

logger = logging.getLogger(__name__)

DEFAULT_KMAX = 6


class CertificationError(ValueError):
    """Raised when a perturbation fails admissibility or certification."""


@dataclass(frozen=True)
class DecayProfile:
    """Decay exponent and derivative seminorm bounds of a coefficient family."""

    sigma0: float
    seminorms: tuple[float, ...]

    def __post_init__(self):
        if not 0.0 < self.sigma0 < 1.0:
            raise CertificationError(f"sigma0 must lie in (0, 1), got {self.sigma0}")
        if len(self.seminorms) == 0:
            raise CertificationError("seminorm list is empty")
        if any(a < 0 or not math.isfinite(a) for a in self.seminorms):
            raise CertificationError("seminorms must be finite and nonnegative")

    @property
    def kmax(self) -> int:
        return len(self.seminorms) - 1

    def seminorm(self, order: int) -> float:
        if order > self.kmax:
            raise CapabilityError(f"no certified seminorm of order {order} (Kmax={self.kmax})")
        return self.seminorms[order]


@dataclass(frozen=True)
class CoefficientTerm:
    """One additive term ``amplitude * (1 + |stretch * x|^2)^(-exponent / 2)``
    placed in entry ``(row, col)`` (and its mirror)."""

    row: int
    col: int
    amplitude: float
    exponent: float
    stretch: tuple[float, ...]

    def jet(self, x: np.ndarray, order: int) -> TaylorJet:
        dim = x.shape[0]
        coords = TaylorJet.variables(dim, order, x)
        u = 1.0
        for s, c in zip(self.stretch, coords):
            u = u + (s * s) * (c * c)
        return jet_power(u, -self.exponent / 2.0) * self.amplitude


@dataclass
class CertificationReport:
    """Outcome of :func:`verify_decay`."""

    ratios: list[float]
    bounds: list[float]
    passed: list[bool]
    sandwich_min: float = float("nan")
    sandwich_max: float = float("nan")

    @property
    def ok(self) -> bool:
        return all(self.passed)

    @property
    def first_failure(self) -> int | None:
        for k, p in enumerate(self.passed):
            if not p:
                return k
        return None

    def as_dict(self) -> dict:
        return {
            "ratios": self.ratios,
            "bounds": self.bounds,
            "passed": self.passed,
            "ok": self.ok,
            "first_failure": self.first_failure,
            "sandwich_min": self.sandwich_min,
            "sandwich_max": self.sandwich_max,
        }


@dataclass
class MetricPerturbation:
    """Symmetric coefficient matrix ``b(x)`` with coupling ``epsilon``.

    Instances are treated as immutable once built.  Use :func:`builtin_family`
    to construct certified instances.
    """

    dim: int
    epsilon: float
    terms: tuple[CoefficientTerm, ...]
    profile: DecayProfile
    name: str = "custom"
    params: dict = field(default_factory=dict)
    certified: bool = False
    report: CertificationReport | None = None
    strictly_small: bool = True

    @property
    def sigma0(self) -> float:
        return self.profile.sigma0

    @property
    def kmax(self) -> int:
        return self.profile.kmax

    @property
    def is_flat(self) -> bool:
        return self.epsilon == 0.0 or len(self.terms) == 0

    def require_certified(self) -> None:
        if not self.certified:
            raise CertificationError(
                f"perturbation '{self.name}' is not certified"
                + (f" (fails at order {self.report.first_failure})" if self.report else "")
            )

    # -- coefficient jets -------------------------------------------------

    def coefficient_jets(self, x, order: int) -> np.ndarray:
        """Taylor coefficients of ``b_jk`` at points ``x``.

        Returns an array of shape ``(n, n, ncoef, *batch)``.
        """
        x = np.asarray(x, dtype=float)
        table = multi_index_table(self.dim, order)
        out = np.zeros((self.dim, self.dim, table.size) + x.shape[1:])
        for term in self.terms:
            c = term.jet(x, order).coeffs
            out[term.row, term.col] += c
            if term.row != term.col:
                out[term.col, term.row] += c
        return out

    def metric_jets(self, x, order: int) -> np.ndarray:
        """Taylor coefficients of ``g = I + eps b``; shape ``(n, n, ncoef, *batch)``."""
        b = self.coefficient_jets(x, order) * self.epsilon
        for j in range(self.dim):
            b[j, j, 0] += 1.0
        return b

    def metric_derivatives(self, x, order: int = 2) -> list[np.ndarray]:
        """Dense derivative tensors of ``g`` up to ``order`` (at most 2).

        Element ``k`` has shape ``(n, n) + (n,) * k + batch``.
        """
        x = np.asarray(x, dtype=float)
        n = self.dim
        jets = self.metric_jets(x, order)
        table = multi_index_table(n, order)
        out = [jets[:, :, 0]]
        if order >= 1:
            d1 = np.zeros((n, n, n) + x.shape[1:])
            for k in range(n):
                unit = tuple(1 if i == k else 0 for i in range(n))
                d1[:, :, k] = jets[:, :, table.position[unit]]
            out.append(d1)
        if order >= 2:
            d2 = np.zeros((n, n, n, n) + x.shape[1:])
            for k in range(n):
                for l in range(n):
                    g = [0] * n
                    g[k] += 1
                    g[l] += 1
                    pos = table.position[tuple(g)]
                    d2[:, :, k, l] = jets[:, :, pos] * table.factorial[pos]
            out.append(d2)
        if order > 2:
            raise CapabilityError("dense derivative tensors are provided to order 2")
        return out

    def coefficients(self, x) -> np.ndarray:
        """Values ``b_jk(x)``; shape ``(n, n, *batch)``."""
        return self.coefficient_jets(x, 0)[:, :, 0]


# ---------------------------------------------------------------------------
# symbol evaluation
# ---------------------------------------------------------------------------


def eval_symbol(pert: MetricPerturbation, x, xi) -> np.ndarray:
    """``p(x, xi) = |xi|^2 + eps * sum_jk b_jk(x) xi_j xi_k`` (batched on trailing axes)."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if pert.is_flat:
        return np.sum(xi * xi, axis=0)
    b = pert.coefficients(x)
    return np.sum(xi * xi, axis=0) + pert.epsilon * np.einsum("jk...,j...,k...->...", b, xi, xi)


def grad_symbol(pert: MetricPerturbation, x, xi) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients ``(d_x p, d_xi p)``, each of shape ``(n, *batch)``."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if pert.kmax < 1:
        raise CapabilityError("first derivatives are not certified")
    g, dg = pert.metric_derivatives(x, 1)
    dxi = 2.0 * np.einsum("jk...,k...->j...", g, xi)
    dx = np.einsum("jkl...,j...,k...->l...", dg, xi, xi)
    return dx, dxi


def symbol_hessian(pert: MetricPerturbation, x, xi):
    """Second derivatives ``(p_xx, p_xxi, p_xixi)`` with ``p_xxi[l, j] = d_{x_l} d_{xi_j} p``."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    g, dg, d2g = pert.metric_derivatives(x, 2)
    pxx = np.einsum("jklm...,j...,k...->lm...", d2g, xi, xi)
    pxxi = 2.0 * np.einsum("jkl...,k...->lj...", dg, xi)
    pxixi = 2.0 * g
    return pxx, pxxi, pxixi


# ---------------------------------------------------------------------------
# certification
# ---------------------------------------------------------------------------


def fibonacci_sphere(count: int) -> np.ndarray:
    """Nearly uniform unit vectors in three dimensions; shape ``(3, count)``."""
    i = np.arange(count) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / count)
    azim = np.pi * (1.0 + math.sqrt(5.0)) * i
    return np.stack([np.cos(azim) * np.sin(polar), np.sin(azim) * np.sin(polar), np.cos(polar)])


def certification_grid(dim: int, extent: float = 20.0, per_axis: int | None = None,
                       far_points: int = 200, far_radius: float = 200.0,
                       seed: int = 0) -> np.ndarray:
    """Tensor grid on ``[-extent, extent]^n`` plus random far points.

    ``per_axis`` defaults to 81 in one and two dimensions and 41 in three.
    """
    if per_axis is None:
        per_axis = 81 if dim <= 2 else 41
    axis = np.linspace(-extent, extent, per_axis)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    grid = np.stack([m.ravel() for m in mesh])
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(dim, far_points))
    dirs /= np.linalg.norm(dirs, axis=0)
    radii = far_radius * rng.uniform(0.0, 1.0, far_points) ** (1.0 / dim)
    return np.concatenate([grid, dirs * radii], axis=1)


def decay_ratios(pert: MetricPerturbation, points, max_order: int, sigma0: float | None = None,
                 chunk: int = 20_000) -> np.ndarray:
    """Per order ``l``: max of ``<x>^{1 + l + sigma0} sum_{|a|=l} sum_jk |d^a b_jk|``.

    Points are processed in blocks of ``chunk`` to bound memory in three dimensions.
    """
    points = np.asarray(points, dtype=float)
    sigma0 = pert.sigma0 if sigma0 is None else sigma0
    table = multi_index_table(pert.dim, max_order)
    out = np.zeros(max_order + 1)
    for s in range(0, points.shape[1], chunk):
        block = points[:, s:s + chunk]
        jets = pert.coefficient_jets(block, max_order)
        bracket = np.sqrt(1.0 + np.sum(block**2, axis=0))
        for l in range(max_order + 1):
            sl = table.degree_slice(l)
            total = np.abs(jets[:, :, sl] * table.factorial[sl][:, None]).sum(axis=(0, 1, 2))
            out[l] = max(out[l], float(np.max(bracket ** (1 + l + sigma0) * total)))
    return out


def verify_decay(pert: MetricPerturbation, grid=None, max_order: int | None = None,
                 sandwich_directions: int = 16) -> CertificationReport:
    """Check the decay bounds and the ellipticity sandwich on a point set.

    Parameters
    ----------
    grid : array, optional
        Points of shape ``(n, npts)``; defaults to :func:`certification_grid`.
    max_order : int, optional
        Highest derivative order checked; defaults to ``Kmax``.
    """
    if max_order is None:
        max_order = pert.kmax
    if max_order > pert.kmax:
        raise CapabilityError(f"max_order {max_order} exceeds Kmax {pert.kmax}")
    if grid is None:
        grid = certification_grid(pert.dim)
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("certification grid is empty")
    ratios = decay_ratios(pert, grid, max_order)
    bounds = [pert.profile.seminorms[l] for l in range(max_order + 1)]
    passed = [bool(r <= a * (1 + 1e-12) + 1e-300) for r, a in zip(ratios, bounds)]
    # sandwich: eigenvalues of g over the grid bound p / |xi|^2
    g = pert.metric_jets(grid, 0)[:, :, 0]
    eig = np.linalg.eigvalsh(np.moveaxis(g, (0, 1), (-2, -1)))
    report = CertificationReport(
        ratios=[float(r) for r in ratios],
        bounds=[float(b) for b in bounds],
        passed=passed,
        sandwich_min=float(eig.min()),
        sandwich_max=float(eig.max()),
    )
    if not (0.9 <= report.sandwich_min and report.sandwich_max <= 1.1):
        report.passed.append(False)
    logger.debug("certification of %s: %s", pert.name, report.as_dict())
    return report


def measured_seminorms(terms: Sequence[CoefficientTerm], dim: int, sigma0: float,
                       kmax: int, margin: float = 1.05) -> tuple[float, ...]:
    """Seminorm bounds from a dense log-radial sweep, inflated by ``margin``."""
    probe = MetricPerturbation(dim=dim, epsilon=1.0, terms=tuple(terms),
                               profile=DecayProfile(sigma0, (1.0,)))
    if dim <= 2:
        radii = np.concatenate([[0.0], np.geomspace(1e-3, 1e6, 2000)])
        dirs = [np.eye(dim)[0]]
        if dim == 2:
            dirs = [np.array([math.cos(a), math.sin(a)]) for a in np.linspace(0.0, np.pi, 37)]
        dirs = np.array(dirs + [-d for d in dirs]).T
    else:
        # mixed derivatives peak off the coordinate planes, so cover the whole sphere
        radii = np.concatenate([[0.0], np.geomspace(1e-3, 1e6, 600)])
        dirs = fibonacci_sphere(200)
    pts = (dirs[:, :, None] * radii).reshape(dim, -1)
    ratios = decay_ratios(probe, pts, kmax, sigma0)
    return tuple(float(margin * r) for r in ratios)


def admissibility(epsilon: float, profile: DecayProfile, dim: int) -> tuple[bool, bool, str]:
    """Smallness conditions on ``epsilon``.

    Returns ``(hard, strict, message)``.  ``hard`` is the ellipticity
    condition ``eps * A0 * n^2 <= 0.1`` that constructors enforce.  ``strict``
    is the stronger ``eps * max(A0, A1) * 200 / sigma0 <= 0.2`` under which the
    flow remainder bounds are small in absolute terms; it is recorded, not
    enforced, since the remainder bounds themselves are checked directly.
    """
    a0 = profile.seminorms[0]
    a1 = profile.seminorms[1] if profile.kmax >= 1 else a0
    first = epsilon * a0 * dim**2
    second = epsilon * max(a0, a1) * 200.0 / profile.sigma0
    hard = first <= 0.1 + 1e-15
    strict = second <= 0.2 + 1e-15
    msg = f"eps*A0*n^2 = {first:.4g} (limit 0.1); eps*max(A0,A1)*200/sigma0 = {second:.4g} (limit 0.2)"
    return hard, strict, msg


FAMILIES = ("isotropic-bump", "anisotropic-bump", "off-diagonal-bump", "zero", "radial-power")


def _family_terms(name: str, dim: int, sigma0: float, params: dict) -> list[CoefficientTerm]:
    exponent = 1.0 + sigma0
    ones = tuple([1.0] * dim)
    if name == "zero":
        return []
    if name == "isotropic-bump":
        amp = float(params.get("amplitude", 1.0))
        return [CoefficientTerm(j, j, amp, exponent, ones) for j in range(dim)]
    if name == "anisotropic-bump":
        weights = params.get("weights", [1.0 / (1.0 + j) for j in range(dim)])
        stretch = tuple(float(s) for s in params.get("stretch", [1.0 + 0.5 * k for k in range(dim)]))
        if len(weights) != dim or len(stretch) != dim:
            raise ValueError("anisotropic-bump needs one weight and one stretch per axis")
        return [CoefficientTerm(j, j, float(weights[j]), exponent, stretch) for j in range(dim)]
    if name == "off-diagonal-bump":
        if dim != 2:
            raise ValueError("off-diagonal-bump is defined for n = 2")
        amp = float(params.get("amplitude", 1.0))
        return [CoefficientTerm(0, 1, amp, exponent, ones)]
    if name == "radial-power":
        power = float(params.get("power", 1.0))
        amp = float(params.get("amplitude", 1.0))
        return [CoefficientTerm(0, 0, amp, power, ones)]
    raise ValueError(f"unknown family '{name}'; expected one of {FAMILIES}")


def builtin_family(name: str, dim: int = 1, epsilon: float = 0.0, sigma0: float = 0.5,
                   kmax: int = DEFAULT_KMAX, seminorms: Sequence[float] | None = None,
                   check_admissible: bool = True, **params) -> MetricPerturbation:
    """Construct a closed-form coefficient family and certify it.

    Parameters
    ----------
    name : str
        One of ``isotropic-bump``, ``anisotropic-bump``, ``off-diagonal-bump``,
        ``zero`` or ``radial-power`` (a deliberately slow-decaying field used to
        exercise the failure path).
    seminorms : sequence of float, optional
        Declared bounds ``A_0..A_Kmax``.  Measured from the closed form when
        omitted.  For ``radial-power`` the default declaration is that of the
        isotropic bump, which the field violates.
    check_admissible : bool
        Enforce the smallness conditions on ``epsilon``.

    Raises
    ------
    CertificationError
        If ``epsilon`` is not admissible.
    """
    if dim not in (1, 2, 3):
        raise ValueError("dimension must be 1, 2 or 3")
    if epsilon < 0:
        raise CertificationError("epsilon must be nonnegative")
    terms = _family_terms(name, dim, sigma0, params)
    if seminorms is None:
        if name == "radial-power":
            reference = _family_terms("isotropic-bump", dim, sigma0, {})[:1]
            seminorms = measured_seminorms(reference, dim, sigma0, kmax)
        elif terms:
            seminorms = measured_seminorms(terms, dim, sigma0, kmax)
        else:
            seminorms = tuple([0.0] * (kmax + 1))
    profile = DecayProfile(sigma0=sigma0, seminorms=tuple(float(a) for a in seminorms))
    if check_admissible:
        hard, strict, why = admissibility(epsilon, profile, dim)
        if not hard:
            raise CertificationError(f"epsilon = {epsilon} not admissible for '{name}': {why}")
    pert = MetricPerturbation(dim=dim, epsilon=float(epsilon), terms=tuple(terms), profile=profile,
                              name=name, params=dict(params))
    pert.strictly_small = admissibility(epsilon, profile, dim)[1]
    pert.report = verify_decay(pert)
    pert.certified = pert.report.ok
    if not pert.certified:
        logger.info("family %s failed certification at order %s", name, pert.report.first_failure)
    return pert


def free_perturbation(dim: int = 1) -> MetricPerturbation:
    """The flat Laplacian, certified trivially."""
    return builtin_family("zero", dim=dim)
