"""Truncated multivariate Taylor jets and almost-analytic extensions.

A :class:`TaylorJet` stores normalized Taylor coefficients ``d^g f / g!`` for
all multi-indices ``|g| <= order`` in graded order.  Coefficient arrays carry
trailing batch axes, so a single jet object can hold many jets at once and all
algebra is vectorized over the batch.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class JetError(ValueError):
    """Raised on incompatible jet operands."""


class CapabilityError(RuntimeError):
    """Raised when a requested derivative order or seminorm is unavailable."""


# ---------------------------------------------------------------------------
# multi-index bookkeeping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MultiIndexTable:
    """Graded enumeration of multi-indices with product and derivative tables."""

    dim: int
    order: int
    indices: tuple[tuple[int, ...], ...]
    degree: np.ndarray
    position: dict
    factorial: np.ndarray
    mul_matrix: np.ndarray
    mul_left: np.ndarray
    mul_right: np.ndarray

    @property
    def size(self) -> int:
        return len(self.indices)

    def degree_slice(self, k: int) -> slice:
        start = int(np.searchsorted(self.degree, k, side="left"))
        stop = int(np.searchsorted(self.degree, k, side="right"))
        return slice(start, stop)


def _graded_indices(dim: int, order: int) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = []
    for k in range(order + 1):
        level = [g for g in itertools.product(range(k + 1), repeat=dim) if sum(g) == k]
        level.sort(reverse=True)
        out.extend(level)
    return out


@lru_cache(maxsize=None)
def multi_index_table(dim: int, order: int) -> MultiIndexTable:
    """Return the cached multi-index table for ``dim`` variables up to ``order``."""
    if dim < 1 or order < 0:
        raise JetError(f"invalid jet shape dim={dim}, order={order}")
    indices = _graded_indices(dim, order)
    position = {g: i for i, g in enumerate(indices)}
    degree = np.array([sum(g) for g in indices], dtype=int)
    factorial = np.array([math.prod(math.factorial(v) for v in g) for g in indices], dtype=float)
    left, right, out = [], [], []
    for i, a in enumerate(indices):
        for j, b in enumerate(indices):
            if degree[i] + degree[j] <= order:
                left.append(i)
                right.append(j)
                out.append(position[tuple(x + y for x, y in zip(a, b))])
    mul = np.zeros((len(indices), len(left)))
    mul[out, np.arange(len(left))] = 1.0
    return MultiIndexTable(
        dim=dim,
        order=order,
        indices=tuple(indices),
        degree=degree,
        position=position,
        factorial=factorial,
        mul_matrix=mul,
        mul_left=np.array(left, dtype=int),
        mul_right=np.array(right, dtype=int),
    )


# ---------------------------------------------------------------------------
# jet type
# ---------------------------------------------------------------------------


class TaylorJet:
    """Truncated Taylor expansion of a (batched) function of ``dim`` variables.

    Parameters
    ----------
    coeffs : array_like
        Array of shape ``(ncoef, *batch)`` with normalized coefficients
        ``d^g f(base) / g!`` in graded multi-index order.
    dim, order : int
        Number of variables and truncation degree.
    base : array_like, optional
        Expansion point of shape ``(dim, *batch)``.  Only used for bookkeeping
        and compatibility checks.
    """

    __array_priority__ = 100

    def __init__(self, coeffs, dim: int, order: int, base=None):
        self.table = multi_index_table(dim, order)
        coeffs = np.asarray(coeffs)
        if coeffs.shape[0] != self.table.size:
            raise JetError(
                f"coefficient table has {coeffs.shape[0]} rows, expected {self.table.size}"
            )
        self.coeffs = coeffs
        self.dim = dim
        self.order = order
        self.base = None if base is None else np.asarray(base, dtype=float)

    # -- constructors -----------------------------------------------------

    @classmethod
    def constant(cls, value, dim: int, order: int, base=None) -> "TaylorJet":
        value = np.asarray(value)
        table = multi_index_table(dim, order)
        coeffs = np.zeros((table.size,) + value.shape, dtype=np.result_type(value, float))
        coeffs[0] = value
        return cls(coeffs, dim, order, base)

    @classmethod
    def variable(cls, axis: int, dim: int, order: int, base=None) -> "TaylorJet":
        """Jet of the coordinate function ``x_axis`` expanded at ``base``."""
        table = multi_index_table(dim, order)
        if base is None:
            batch: tuple[int, ...] = ()
            value = np.asarray(0.0)
        else:
            base = np.asarray(base, dtype=float)
            batch = base.shape[1:]
            value = base[axis]
        coeffs = np.zeros((table.size,) + batch)
        coeffs[0] = value
        if order >= 1:
            unit = tuple(1 if k == axis else 0 for k in range(dim))
            coeffs[table.position[unit]] = 1.0
        return cls(coeffs, dim, order, base)

    @classmethod
    def variables(cls, dim: int, order: int, base=None) -> list["TaylorJet"]:
        return [cls.variable(k, dim, order, base) for k in range(dim)]

    @classmethod
    def from_derivatives(cls, derivs: dict, dim: int, order: int, base=None) -> "TaylorJet":
        """Build a jet from a mapping ``multi-index -> partial derivative``."""
        table = multi_index_table(dim, order)
        sample = np.asarray(next(iter(derivs.values())))
        coeffs = np.zeros((table.size,) + sample.shape, dtype=np.result_type(sample, float))
        for g, val in derivs.items():
            coeffs[table.position[tuple(g)]] = np.asarray(val) / table.factorial[table.position[tuple(g)]]
        return cls(coeffs, dim, order, base)

    # -- basic access -----------------------------------------------------

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.coeffs.shape[1:]

    @property
    def value(self) -> np.ndarray:
        return self.coeffs[0]

    def coefficient(self, multi_index: Sequence[int]) -> np.ndarray:
        return self.coeffs[self.table.position[tuple(multi_index)]]

    def derivative_value(self, multi_index: Sequence[int]) -> np.ndarray:
        """Partial derivative ``d^g f`` at the base point."""
        pos = self.table.position[tuple(multi_index)]
        return self.coeffs[pos] * self.table.factorial[pos]

    def copy(self) -> "TaylorJet":
        return TaylorJet(self.coeffs.copy(), self.dim, self.order, self.base)

    def _like(self, coeffs) -> "TaylorJet":
        return TaylorJet(coeffs, self.dim, self.order, self.base)

    def nilpotent(self) -> "TaylorJet":
        """The jet with its constant term removed."""
        c = self.coeffs.copy()
        c[0] = 0
        return self._like(c)

    def homogeneous_part(self, k: int) -> np.ndarray:
        return self.coeffs[self.table.degree_slice(k)]

    def truncate(self, order: int) -> "TaylorJet":
        """Re-express at a lower (or equal) truncation order."""
        if order > self.order:
            return self.extend(order)
        table = multi_index_table(self.dim, order)
        return TaylorJet(self.coeffs[: table.size], self.dim, order, self.base)

    def extend(self, order: int) -> "TaylorJet":
        """Embed in a higher order jet with zero coefficients above ``self.order``."""
        table = multi_index_table(self.dim, order)
        c = np.zeros((table.size,) + self.batch_shape, dtype=self.coeffs.dtype)
        c[: self.table.size] = self.coeffs
        return TaylorJet(c, self.dim, order, self.base)

    def _check(self, other: "TaylorJet") -> None:
        if other.dim != self.dim or other.order != self.order:
            raise JetError(
                f"jet mismatch: (dim={self.dim}, order={self.order}) vs "
                f"(dim={other.dim}, order={other.order})"
            )
        if self.base is not None and other.base is not None:
            if self.base.shape != other.base.shape or not np.allclose(self.base, other.base):
                raise JetError("jets expanded at different base points")

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, TaylorJet):
            self._check(other)
            return self._like(self.coeffs + other.coeffs)
        c = self.coeffs.astype(np.result_type(self.coeffs, np.asarray(other)), copy=True)
        c[0] = c[0] + other
        return self._like(c)

    __radd__ = __add__

    def __neg__(self):
        return self._like(-self.coeffs)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, TaylorJet):
            return jet_multiply(self, other)
        return self._like(self.coeffs * np.asarray(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, TaylorJet):
            return jet_multiply(self, jet_reciprocal(other))
        return self._like(self.coeffs / np.asarray(other))

    def __rtruediv__(self, other):
        return jet_reciprocal(self) * other

    def __pow__(self, k: int):
        if not isinstance(k, (int, np.integer)) or k < 0:
            raise JetError("only nonnegative integer powers are supported; use jet_power")
        out = TaylorJet.constant(np.ones(self.batch_shape), self.dim, self.order, self.base)
        for _ in range(int(k)):
            out = out * self
        return out

    def conj(self) -> "TaylorJet":
        return self._like(np.conj(self.coeffs))

    @property
    def real(self) -> "TaylorJet":
        return self._like(self.coeffs.real)

    @property
    def imag(self) -> "TaylorJet":
        return self._like(self.coeffs.imag)

    # -- calculus ---------------------------------------------------------

    def derivative(self, axis: int) -> "TaylorJet":
        """Jet of ``d f / d x_axis``; the top-degree coefficients become zero."""
        table = self.table
        c = np.zeros_like(self.coeffs)
        for pos, g in enumerate(table.indices):
            if table.degree[pos] == self.order:
                continue
            up = list(g)
            up[axis] += 1
            c[pos] = (g[axis] + 1) * self.coeffs[table.position[tuple(up)]]
        return self._like(c)

    def gradient(self) -> list["TaylorJet"]:
        return [self.derivative(k) for k in range(self.dim)]

    def __call__(self, offset) -> np.ndarray:
        """Evaluate the truncated polynomial at ``base + offset``.

        ``offset`` has shape ``(dim, *shape)`` where ``shape`` broadcasts
        against the batch shape.
        """
        offset = np.asarray(offset)
        table = self.table
        # powers[k][p] = offset_k ** p
        powers = [[np.ones_like(offset[k])] for k in range(self.dim)]
        for k in range(self.dim):
            for _ in range(self.order):
                powers[k].append(powers[k][-1] * offset[k])
        total = 0.0
        for pos, g in enumerate(table.indices):
            mono = powers[0][g[0]]
            for k in range(1, self.dim):
                mono = mono * powers[k][g[k]]
            total = total + self.coeffs[pos] * mono
        return total

    def monomials(self, offset) -> np.ndarray:
        """Array of ``offset**g`` for every retained multi-index ``g``."""
        offset = np.asarray(offset)
        powers = [[np.ones_like(offset[k])] for k in range(self.dim)]
        for k in range(self.dim):
            for _ in range(self.order):
                powers[k].append(powers[k][-1] * offset[k])
        rows = []
        for g in self.table.indices:
            mono = powers[0][g[0]]
            for k in range(1, self.dim):
                mono = mono * powers[k][g[k]]
            rows.append(mono)
        return np.stack(rows)

    def __repr__(self) -> str:
        return f"TaylorJet(dim={self.dim}, order={self.order}, batch={self.batch_shape})"


# ---------------------------------------------------------------------------
# algebra
# ---------------------------------------------------------------------------


def jet_multiply(a: TaylorJet, b: TaylorJet) -> TaylorJet:
    """Truncated Cauchy product of two jets with matching dimension and order."""
    a._check(b)
    table = a.table
    prod = a.coeffs[table.mul_left] * b.coeffs[table.mul_right]
    shape = prod.shape
    out = table.mul_matrix @ prod.reshape(shape[0], -1)
    return TaylorJet(out.reshape((table.size,) + shape[1:]), a.dim, a.order, a.base)


def jet_apply_series(inner: TaylorJet, series) -> TaylorJet:
    """Compose a univariate Taylor series with a jet.

    ``series[k]`` is ``g^{(k)}(u0) / k!`` where ``u0`` is the value of ``inner``;
    trailing axes broadcast against the jet batch.  Evaluated by Horner's rule
    on the nilpotent part, which is exact after truncation.
    """
    series = np.asarray(series)
    nil = inner.nilpotent()
    nterms = min(series.shape[0], inner.order + 1)
    result = TaylorJet.constant(np.broadcast_to(series[nterms - 1], inner.batch_shape).copy(),
                                inner.dim, inner.order, inner.base)
    for k in range(nterms - 2, -1, -1):
        result = result * nil + series[k]
    return result


def jet_exp(u: TaylorJet) -> TaylorJet:
    order = u.order
    e0 = np.exp(u.value)
    series = np.stack([e0 / math.factorial(k) for k in range(order + 1)])
    return jet_apply_series(u, series)


def jet_power(u: TaylorJet, exponent: float) -> TaylorJet:
    """Jet of ``u**exponent`` for real exponent; requires ``u`` nonzero at the base."""
    u0 = u.value
    series = []
    coef = 1.0
    for k in range(u.order + 1):
        series.append(coef * u0 ** (exponent - k))
        coef = coef * (exponent - k) / (k + 1)
    return jet_apply_series(u, np.stack(series))


def jet_reciprocal(u: TaylorJet) -> TaylorJet:
    u0 = u.value
    series = np.stack([(-1.0) ** k / u0 ** (k + 1) for k in range(u.order + 1)])
    return jet_apply_series(u, series)


def jet_sqrt(u: TaylorJet) -> TaylorJet:
    return jet_power(u, 0.5)


def jet_compose(outer: TaylorJet, inner: Sequence[TaylorJet]) -> TaylorJet:
    """Truncated composition ``outer(inner_1, ..., inner_k)``.

    Every retained coefficient of the result equals the Faa di Bruno sum over
    partitions.  Here it is obtained by expanding ``outer`` in powers of the
    nilpotent parts of the inner jets, which collects exactly the same terms.

    Parameters
    ----------
    outer : TaylorJet
        Jet in ``k`` variables, expanded at the values of the inner jets, with
        order at least the inner order.
    inner : sequence of TaylorJet
        ``k`` jets in ``m`` variables sharing dimension, order and base.
    """
    inner = list(inner)
    if len(inner) != outer.dim:
        raise JetError(f"outer jet has {outer.dim} variables but {len(inner)} inner jets given")
    first = inner[0]
    for other in inner[1:]:
        first._check(other)
    if outer.order < first.order:
        raise JetError("outer jet order must be at least the inner order")
    if outer.base is not None:
        values = np.stack([np.broadcast_to(j.value, first.batch_shape) for j in inner])
        target = np.broadcast_to(outer.base, values.shape)
        if not np.allclose(values, target, rtol=1e-12, atol=1e-12):
            raise JetError("inner jet values differ from the outer expansion point")
    order = first.order
    nil = [j.nilpotent() for j in inner]
    one = TaylorJet.constant(np.ones(first.batch_shape), first.dim, order, first.base)
    powers = []
    for v in nil:
        p = [one]
        for _ in range(order):
            p.append(p[-1] * v)
        powers.append(p)
    out_table = outer.table
    result = TaylorJet.constant(np.zeros(first.batch_shape, dtype=outer.coeffs.dtype),
                                first.dim, order, first.base)
    for pos, g in enumerate(out_table.indices):
        if out_table.degree[pos] > order:
            break
        term = powers[0][g[0]]
        for k in range(1, outer.dim):
            term = term * powers[k][g[k]]
        result = result + term * outer.coeffs[pos]
    return result


def jet_from_function(func: Callable, base, order: int) -> TaylorJet:
    """Jet of a function evaluated on jets (automatic Taylor propagation).

    ``func`` receives the list of coordinate jets at ``base`` and must return a
    :class:`TaylorJet` built only from jet operations.
    """
    base = np.asarray(base, dtype=float)
    dim = base.shape[0]
    return func(TaylorJet.variables(dim, order, base))


# ---------------------------------------------------------------------------
# smooth cutoff profile
# ---------------------------------------------------------------------------


def _h(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def smooth_step(t):
    """C-infinity step equal to 0 for ``t <= 0`` and 1 for ``t >= 1``."""
    t = np.asarray(t, dtype=float)
    a = _h(t)
    b = _h(1.0 - t)
    return a / (a + b)


def smooth_step_derivative(t):
    t = np.asarray(t, dtype=float)
    a = _h(t)
    b = _h(1.0 - t)
    out = np.zeros_like(t)
    inside = (t > 0) & (t < 1)
    ti = t[inside]
    da = a[inside] / ti**2
    db = b[inside] / (1.0 - ti) ** 2
    den = a[inside] + b[inside]
    out[inside] = (da * b[inside] + a[inside] * db) / den**2
    return out


def plateau_cutoff(s, inner: float = 0.5, outer: float = 1.0):
    """Radial cutoff equal to 1 for ``|s| <= inner`` and 0 for ``|s| >= outer``."""
    s = np.abs(np.asarray(s, dtype=float))
    return 1.0 - smooth_step((s - inner) / (outer - inner))


def plateau_cutoff_derivative(s, inner: float = 0.5, outer: float = 1.0):
    """Derivative in ``|s|`` of :func:`plateau_cutoff`."""
    s = np.abs(np.asarray(s, dtype=float))
    return -smooth_step_derivative((s - inner) / (outer - inner)) / (outer - inner)


# ---------------------------------------------------------------------------
# almost-analytic extension
# ---------------------------------------------------------------------------


@dataclass
class JetField:
    """A real field on R^m with derivatives to a fixed order.

    Parameters
    ----------
    dim : int
        Number of variables.
    jet : callable
        ``jet(x, order)`` returns the :class:`TaylorJet` of the field at points
        ``x`` of shape ``(dim, *batch)``.
    weight_exponent : float
        Decay exponent ``s`` such that ``<x>^{|g| + s} |d^g f|`` is bounded.
    """

    dim: int
    jet: Callable[[np.ndarray, int], TaylorJet]
    weight_exponent: float = 0.0

    def __call__(self, x) -> np.ndarray:
        return self.jet(np.asarray(x, dtype=float), 0).value


def measure_seminorms(field: JetField, max_order: int, radius: float = 1e4,
                      samples: int = 400, seed: int = 0) -> np.ndarray:
    """Sampled suprema ``M_k = sup <x>^{k + s} sum_{|g|=k} |d^g f(x)|``.

    Sample points combine a log-radial sweep along coordinate and diagonal
    directions with random points, which is adequate for the decaying fields
    the extension is applied to.
    """
    rng = np.random.default_rng(seed)
    radii = np.concatenate([[0.0], np.geomspace(1e-3, radius, samples)])
    dirs = [np.eye(field.dim)[k] for k in range(field.dim)]
    dirs.append(np.ones(field.dim) / math.sqrt(field.dim))
    for _ in range(4):
        v = rng.normal(size=field.dim)
        dirs.append(v / np.linalg.norm(v))
    pts = np.concatenate([np.outer(d, radii) for d in dirs] + [-np.outer(d, radii) for d in dirs], axis=1)
    jet = field.jet(pts, max_order)
    weight = np.sqrt(1.0 + np.sum(pts**2, axis=0))
    out = np.zeros(max_order + 1)
    for k in range(max_order + 1):
        sl = jet.table.degree_slice(k)
        derivs = np.abs(jet.coeffs[sl] * jet.table.factorial[sl][:, None])
        out[k] = np.max(weight ** (k + field.weight_exponent) * derivs.sum(axis=0))
    return out


def default_scales(seminorms: Sequence[float], order: int, safety: float = 2.0) -> np.ndarray:
    """Increasing cutoff scales ``L_1..L_order`` from measured seminorms.

    ``L_k = max(1, (safety * M_k)^{1/k})`` made nondecreasing, so every
    term of the truncated extension stays bounded on its cutoff support.
    """
    scales = np.ones(order)
    for k in range(1, order + 1):
        m = seminorms[k] if k < len(seminorms) else seminorms[-1]
        scales[k - 1] = max(1.0, (safety * m) ** (1.0 / k))
    return np.maximum.accumulate(scales)


class AlmostAnalyticExtension:
    """Truncated almost-analytic extension of a decaying real field.

    ``F(x, y) = sum_{|g| <= N} f_g(x) (i y)^g chi(L_{|g|} |y| / <x>)`` where
    ``f_g`` are normalized Taylor coefficients and ``chi`` is the plateau
    cutoff (1 on ``[0, 1/2]``, 0 beyond 1).  The ``g = 0`` term is left
    uncut so ``F(x, 0) = f(x)`` identically.
    """

    def __init__(self, field: JetField, order: int, scales: Sequence[float] | None = None,
                 seminorms: Sequence[float] | None = None):
        if order < 1:
            raise JetError("extension order must be at least 1")
        self.field = field
        self.order = order
        if scales is None:
            if seminorms is None:
                seminorms = measure_seminorms(field, order)
            scales = default_scales(seminorms, order)
        scales = np.asarray(scales, dtype=float)
        if scales.shape != (order,):
            raise JetError(f"need {order} scales, got {scales.shape}")
        if np.any(scales < 1.0) or np.any(np.diff(scales) < 0):
            raise JetError("cutoff scales must be >= 1 and nondecreasing")
        self.scales = scales
        self.seminorms = None if seminorms is None else np.asarray(seminorms, dtype=float)

    def _scale_for_degree(self, degree: np.ndarray) -> np.ndarray:
        # degree 0 is never cut; give it a dummy scale
        return np.concatenate([[0.0], self.scales])[degree]

    def __call__(self, x, y) -> np.ndarray:
        """Evaluate ``F(x + i y)``; ``x`` and ``y`` have shape ``(dim, *batch)``."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        jet = self.field.jet(x, self.order)
        table = jet.table
        bracket = np.sqrt(1.0 + np.sum(x**2, axis=0))
        ynorm = np.sqrt(np.sum(y**2, axis=0))
        mono = jet.monomials(1j * y)
        total = np.zeros(jet.batch_shape, dtype=complex)
        for pos in range(table.size):
            deg = table.degree[pos]
            term = jet.coeffs[pos] * mono[pos]
            if deg > 0:
                term = term * plateau_cutoff(self.scales[deg - 1] * ynorm / bracket)
            total = total + term
        return total

    def dbar(self, x, y) -> np.ndarray:
        """Analytic ``dbar_j F = (d_{x_j} + i d_{y_j}) F / 2`` for all ``j``.

        Returns an array of shape ``(dim, *batch)``.  The Taylor sums telescope,
        leaving only cutoff transition terms and the top-degree remainder, so
        the value is accurate even when it is far below rounding level of F.
        """
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        dim = self.field.dim
        n = self.order
        jet = self.field.jet(x, n + 1)
        table = jet.table
        low = multi_index_table(dim, n)
        bracket = np.sqrt(1.0 + np.sum(x**2, axis=0))
        ynorm = np.sqrt(np.sum(y**2, axis=0))
        iy = 1j * y
        mono = TaylorJet(np.zeros((low.size,) + x.shape[1:]), dim, n).monomials(iy)
        chi = [np.ones_like(ynorm)]
        dchi = [np.zeros_like(ynorm)]
        for k in range(1, n + 1):
            v = self.scales[k - 1] * ynorm / bracket
            chi.append(plateau_cutoff(v))
            dchi.append(plateau_cutoff_derivative(v))
        safe_y = np.where(ynorm > 0, ynorm, 1.0)
        out = np.zeros((dim,) + jet.batch_shape, dtype=complex)
        for j in range(dim):
            acc = np.zeros(jet.batch_shape, dtype=complex)
            for pos, g in enumerate(low.indices):
                deg = low.degree[pos]
                up = list(g)
                up[j] += 1
                up_pos = table.position[tuple(up)]
                # the Taylor coefficient of d_j f at multi-index g
                fj = jet.coeffs[up_pos] * (g[j] + 1)
                weight = chi[deg] - chi[deg + 1] if deg < n else chi[n]
                acc = acc + fj * mono[pos] * weight
                if deg == 0:
                    continue
                cpos = table.position[tuple(g)]
                lk = self.scales[deg - 1]
                v = lk * ynorm / bracket
                dv_dx = -v * x[j] / bracket**2
                dv_dy = lk * y[j] / (safe_y * bracket)
                acc = acc + jet.coeffs[cpos] * mono[pos] * dchi[deg] * (dv_dx + 1j * dv_dy)
            out[j] = 0.5 * acc
        return out


def almost_analytic_extend(field: JetField, order: int, scales=None,
                           seminorms=None) -> AlmostAnalyticExtension:
    """Construct the truncated almost-analytic extension of ``field``.

    Raises
    ------
    CapabilityError
        If the field cannot supply derivatives up to ``order + 1`` (needed for
        the analytic ``dbar``).
    """
    probe = np.zeros((field.dim, 1))
    try:
        jet = field.jet(probe, order + 1)
    except Exception as exc:  # pragma: no cover - defensive
        raise CapabilityError(f"field cannot supply derivatives to order {order + 1}") from exc
    if jet.order < order + 1:
        raise CapabilityError(f"field returned order {jet.order} < {order + 1}")
    return AlmostAnalyticExtension(field, order, scales=scales, seminorms=seminorms)


def bracket_power_field(dim: int, exponent: float) -> JetField:
    """The field ``<x>^{-exponent}`` with exact jets."""

    def jet(x, order):
        x = np.asarray(x, dtype=float)
        coords = TaylorJet.variables(dim, order, x)
        u = 1.0 + sum(c * c for c in coords)
        return jet_power(u, -exponent / 2.0)

    return JetField(dim=dim, jet=jet, weight_exponent=exponent)


def fit_dbar_order(ext: AlmostAnalyticExtension, x, direction=None,
                   ratios=None) -> float:
    """Log-log slope of ``|dbar F(x, y)|`` versus ``|y|``.

    ``|y|`` runs over ``ratios * <x>`` (default ``[1e-3, 1e-1]``) along
    ``direction`` (default: first axis).
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    dim = x.shape[0]
    if direction is None:
        direction = np.eye(dim)[0]
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    if ratios is None:
        ratios = np.geomspace(1e-3, 1e-1, 25)
    bracket = math.sqrt(1.0 + float(x @ x))
    mags = np.asarray(ratios) * bracket
    ys = np.outer(direction, mags)
    xs = np.repeat(x[:, None], len(mags), axis=1)
    vals = np.linalg.norm(ext.dbar(xs, ys), axis=0)
    good = vals > 0
    if good.sum() < 3:
        return math.inf
    slope, _ = np.polyfit(np.log(mags[good]), np.log(vals[good]), 1)
    return float(slope)
