"""Sparse multivariate polynomials, semialgebraic sets and region moments.

Everything here is immutable once built. A :class:`Polynomial` lives over a
:class:`Registry` of named variables; registries also flag which variable
pairs live on the unit circle and which quadruples on the unit 3-sphere, so
that manifold equalities and moments can be generated without being spelled
out by hand.
"""

from __future__ import annotations

import itertools
import logging
import re
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import numpy as np
from scipy.special import gammaln

from hjb.errors import UnsupportedRegionError, UsageError
from lib.cache import threadsafe_lru_cache

logger = logging.getLogger(__name__)

DROP_TOL = 1e-14
MEMBERSHIP_TOL = 1e-9

Scalar = int | float


class Monomial(tuple):  # type: ignore[type-arg]
    """Sorted ``(variable index, power)`` pairs; zero powers are never stored."""

    __slots__ = ()

    def __new__(cls, pairs: Iterable[tuple[int, int]] = ()) -> Monomial:
        merged: dict[int, int] = {}
        for var, power in pairs:
            if power < 0:
                raise UsageError(f"negative power {power} for variable {var}")
            if power:
                merged[var] = merged.get(var, 0) + int(power)
        return tuple.__new__(cls, tuple(sorted(merged.items())))

    @classmethod
    def _sorted(cls, items: tuple[tuple[int, int], ...]) -> Monomial:
        return tuple.__new__(cls, items)

    @classmethod
    def from_exponents(cls, exponents: Sequence[int]) -> Monomial:
        return cls((i, int(e)) for i, e in enumerate(exponents) if e)

    @property
    def degree(self) -> int:
        return sum(p for _, p in self)

    @property
    def variables(self) -> tuple[int, ...]:
        return tuple(v for v, _ in self)

    def exponent(self, var: int) -> int:
        for v, p in self:
            if v == var:
                return p
        return 0

    def degree_in(self, variables: Iterable[int]) -> int:
        wanted = set(variables)
        return sum(p for v, p in self if v in wanted)

    def sort_key(self) -> tuple[int, tuple[tuple[int, int], ...]]:
        return (self.degree, tuple(self))

    def __mul__(self, other: Any) -> Monomial:  # type: ignore[override]
        if not isinstance(other, Monomial):
            return NotImplemented
        if not other:
            return self
        if not self:
            return other
        merged = dict(self)
        for v, p in other:
            merged[v] = merged.get(v, 0) + p
        return Monomial._sorted(tuple(sorted(merged.items())))

    __rmul__ = __mul__

    def derivative(self, var: int) -> tuple[int, Monomial]:
        """Return ``(power, monomial)`` with d/dvar self = power * monomial."""
        for i, (v, p) in enumerate(self):
            if v == var:
                rest = self[:i] + (((v, p - 1),) if p > 1 else ()) + self[i + 1 :]
                return p, Monomial._sorted(rest)
        return 0, ONE

    def evaluate(self, x: np.ndarray) -> Any:
        """Evaluate at a point (1-D) or at each row of a batch (2-D)."""
        x = np.asarray(x, dtype=float)
        value: Any = 1.0 if x.ndim == 1 else np.ones(x.shape[0])
        for v, p in self:
            value = value * (x[..., v] ** p)
        return value

    def to_text(self, names: Sequence[str]) -> str:
        if not self:
            return "1"
        return "*".join(names[v] if p == 1 else f"{names[v]}^{p}" for v, p in self)

    def __repr__(self) -> str:
        return f"Monomial({tuple(self)!r})"


ONE = Monomial()


def monomials_up_to(variables: Sequence[int], degree: int) -> list[Monomial]:
    """All monomials of total degree <= ``degree`` in ``variables``, graded order."""
    result: list[Monomial] = []
    for total in range(max(degree, -1) + 1):
        for combo in itertools.combinations_with_replacement(sorted(variables), total):
            result.append(Monomial((v, 1) for v in combo))
    return sorted(result, key=Monomial.sort_key)


@dataclass(frozen=True)
class Registry:
    """Ordered variable names plus the manifold structure among them.

    ``circles`` holds ``(s, c)`` index pairs constrained to s^2 + c^2 = 1 and
    ``spheres`` holds index quadruples constrained to unit norm.
    """

    names: tuple[str, ...]
    circles: tuple[tuple[int, int], ...] = ()
    spheres: tuple[tuple[int, int, int, int], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "circles", tuple(tuple(c) for c in self.circles))
        object.__setattr__(self, "spheres", tuple(tuple(s) for s in self.spheres))
        if len(set(self.names)) != len(self.names):
            raise UsageError(f"duplicate variable names in {self.names}")
        flagged = [i for group in (*self.circles, *self.spheres) for i in group]
        if len(set(flagged)) != len(flagged):
            raise UsageError("a variable belongs to more than one manifold")
        if any(i < 0 or i >= len(self.names) for i in flagged):
            raise UsageError("manifold index out of range")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str | int) -> int:
        if isinstance(name, int):
            if not 0 <= name < len(self.names):
                raise UsageError(f"variable index {name} out of range")
            return name
        try:
            return self.names.index(name)
        except ValueError as e:
            raise UsageError(f"unknown variable '{name}'") from e

    def extend(self, names: Iterable[str]) -> Registry:
        return Registry(self.names + tuple(names), self.circles, self.spheres)

    def is_prefix_of(self, other: Registry) -> bool:
        return (
            other.names[: len(self.names)] == self.names
            and other.circles == self.circles
            and other.spheres == self.spheres
        )

    @cached_property
    def manifold_vars(self) -> frozenset[int]:
        return frozenset(i for group in (*self.circles, *self.spheres) for i in group)

    @property
    def manifold_groups(self) -> tuple[tuple[int, ...], ...]:
        return (*self.circles, *self.spheres)

    def variable(self, name: str | int) -> Polynomial:
        return Polynomial(self, {Monomial(((self.index(name), 1),)): 1.0})

    def variables(self) -> list[Polynomial]:
        return [self.variable(i) for i in range(len(self))]

    def manifold_equalities(self) -> list[Polynomial]:
        """Unit-norm equalities for every flagged circle and sphere."""
        result = []
        for group in self.manifold_groups:
            terms = {Monomial(((i, 2),)): 1.0 for i in group}
            terms[ONE] = -1.0
            result.append(Polynomial(self, terms))
        return result

    def project(self, x: np.ndarray) -> np.ndarray:
        """Rescale each manifold group of ``x`` back to unit norm."""
        y = np.array(x, dtype=float)
        for group in self.manifold_groups:
            idx = list(group)
            norm = np.linalg.norm(y[..., idx], axis=-1, keepdims=True)
            y[..., idx] = y[..., idx] / np.where(norm > 0, norm, 1.0)
        return y

    def manifold_residual(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        residual = 0.0
        for group in self.manifold_groups:
            residual = max(residual, float(np.max(np.abs(np.sum(x[..., list(group)] ** 2, axis=-1) - 1.0))))
        return residual


def _as_float(value: Any) -> float | None:
    if isinstance(value, (int, float, np.integer, np.floating)):
        return float(value)
    return None


@dataclass(frozen=True, eq=False)
class Polynomial:
    """Sparse polynomial: a map from :class:`Monomial` to a real coefficient."""

    registry: Registry
    terms: Mapping[Monomial, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        cleaned = {m: float(c) for m, c in self.terms.items() if abs(c) > DROP_TOL}
        object.__setattr__(self, "terms", cleaned)

    @classmethod
    def constant(cls, registry: Registry, value: float) -> Polynomial:
        return cls(registry, {ONE: float(value)})

    @classmethod
    def zero(cls, registry: Registry) -> Polynomial:
        return cls(registry, {})

    @classmethod
    def from_monomial(cls, registry: Registry, monomial: Monomial, coefficient: float = 1.0) -> Polynomial:
        return cls(registry, {monomial: coefficient})

    # -- structure ---------------------------------------------------------

    @property
    def degree(self) -> int:
        return max((m.degree for m in self.terms), default=0)

    def degree_in(self, variables: Iterable[int]) -> int:
        wanted = list(variables)
        return max((m.degree_in(wanted) for m in self.terms), default=0)

    @property
    def variables(self) -> frozenset[int]:
        return frozenset(v for m in self.terms for v in m.variables)

    def is_zero(self) -> bool:
        return not self.terms

    def coefficient(self, monomial: Monomial) -> float:
        return self.terms.get(monomial, 0.0)

    def monomials(self) -> list[Monomial]:
        return sorted(self.terms, key=Monomial.sort_key)

    def max_abs_coefficient(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    def lift(self, registry: Registry) -> Polynomial:
        """Rebind onto a registry that extends this one's variables."""
        if registry == self.registry:
            return self
        if not self.registry.is_prefix_of(registry):
            raise UsageError(f"cannot lift {self.registry.names} onto {registry.names}")
        return Polynomial(registry, self.terms)

    # -- arithmetic --------------------------------------------------------

    def _coerce(self, other: Any) -> Polynomial | None:
        if isinstance(other, Polynomial):
            if other.registry != self.registry:
                raise UsageError(f"registry mismatch: {self.registry.names} vs {other.registry.names}")
            return other
        value = _as_float(other)
        if value is None:
            return None
        return Polynomial.constant(self.registry, value)

    def __add__(self, other: Any) -> Polynomial:
        rhs = self._coerce(other)
        if rhs is None:
            return NotImplemented
        terms = dict(self.terms)
        for m, c in rhs.terms.items():
            terms[m] = terms.get(m, 0.0) + c
        return Polynomial(self.registry, terms)

    __radd__ = __add__

    def __neg__(self) -> Polynomial:
        return Polynomial(self.registry, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other: Any) -> Polynomial:
        rhs = self._coerce(other)
        if rhs is None:
            return NotImplemented
        return self + (-rhs)

    def __rsub__(self, other: Any) -> Polynomial:
        return (-self) + other

    def __mul__(self, other: Any) -> Polynomial:
        value = _as_float(other)
        if value is not None:
            return Polynomial(self.registry, {m: c * value for m, c in self.terms.items()})
        rhs = self._coerce(other)
        if rhs is None:
            return NotImplemented
        terms: dict[Monomial, float] = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in rhs.terms.items():
                m = m1 * m2
                terms[m] = terms.get(m, 0.0) + c1 * c2
        return Polynomial(self.registry, terms)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> Polynomial:
        value = _as_float(other)
        if value is None:
            return NotImplemented
        return self * (1.0 / value)

    def __pow__(self, power: int) -> Polynomial:
        if not isinstance(power, (int, np.integer)) or power < 0:
            raise UsageError(f"polynomial power must be a nonnegative integer, got {power}")
        result = Polynomial.constant(self.registry, 1.0)
        base = self
        k = int(power)
        while k:
            if k & 1:
                result = result * base
            k >>= 1
            if k:
                base = base * base
        return result

    def differentiate(self, var: str | int) -> Polynomial:
        index = self.registry.index(var)
        terms: dict[Monomial, float] = {}
        for m, c in self.terms.items():
            power, reduced = m.derivative(index)
            if power:
                terms[reduced] = terms.get(reduced, 0.0) + c * power
        return Polynomial(self.registry, terms)

    def gradient(self, variables: Iterable[str | int] | None = None) -> list[Polynomial]:
        indices = range(len(self.registry)) if variables is None else variables
        return [self.differentiate(v) for v in indices]

    def substitute(self, mapping: Mapping[str | int, Polynomial | float]) -> Polynomial:
        """Replace variables by polynomials (or numbers) over the same registry."""
        subs: dict[int, Polynomial] = {}
        for key, value in mapping.items():
            index = self.registry.index(key)
            if isinstance(value, Polynomial):
                subs[index] = value.lift(self.registry) if value.registry != self.registry else value
            else:
                subs[index] = Polynomial.constant(self.registry, float(value))
        powers: dict[tuple[int, int], Polynomial] = {}

        def power_of(var: int, p: int) -> Polynomial:
            if (var, p) not in powers:
                powers[(var, p)] = subs[var] ** p
            return powers[(var, p)]

        total: dict[Monomial, float] = {}
        for m, c in self.terms.items():
            kept = Monomial._sorted(tuple((v, p) for v, p in m if v not in subs))
            piece = Polynomial(self.registry, {kept: c})
            for v, p in m:
                if v in subs:
                    piece = piece * power_of(v, p)
            for mm, cc in piece.terms.items():
                total[mm] = total.get(mm, 0.0) + cc
        return Polynomial(self.registry, total)

    # -- evaluation --------------------------------------------------------

    @cached_property
    def _compiled(self) -> tuple[np.ndarray, np.ndarray]:
        monomials = list(self.terms)
        exponents = np.zeros((len(monomials), len(self.registry)), dtype=float)
        for row, m in enumerate(monomials):
            for v, p in m:
                exponents[row, v] = p
        coefficients = np.array([self.terms[m] for m in monomials], dtype=float)
        return exponents, coefficients

    def evaluate(self, x: Any) -> Any:
        """Value at a point (returns float) or at every row of a batch."""
        x = np.asarray(x, dtype=float)
        exponents, coefficients = self._compiled
        if x.ndim == 1:
            if not len(coefficients):
                return 0.0
            return float(coefficients @ np.prod(x**exponents, axis=1))
        if not len(coefficients):
            return np.zeros(x.shape[0])
        return np.prod(x[:, None, :] ** exponents[None, :, :], axis=2) @ coefficients

    __call__ = evaluate

    # -- comparison and text -----------------------------------------------

    def allclose(self, other: Polynomial, tol: float = 1e-9) -> bool:
        diff = self - other
        return diff.max_abs_coefficient() <= tol

    def to_text(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for m in self.monomials():
            c = repr(self.terms[m])
            parts.append(c if not m else f"{c}*{m.to_text(self.registry.names)}")
        return " + ".join(parts)

    @classmethod
    def parse(cls, text: str, registry: Registry) -> Polynomial:
        return _Parser(text, registry).parse()

    def __repr__(self) -> str:
        return f"Polynomial({self.to_text()})"


class PolynomialArray:
    """Several polynomials over one registry, evaluated together.

    All monomials are stacked into one exponent matrix, so a single power and
    product pass serves every entry; simulation inner loops rely on this.
    """

    def __init__(self, polynomials: Sequence[Polynomial], shape: tuple[int, ...] | None = None) -> None:
        if not polynomials:
            raise UsageError("PolynomialArray needs at least one polynomial")
        registry = polynomials[0].registry
        index: dict[Monomial, int] = {}
        for p in polynomials:
            if p.registry != registry:
                raise UsageError("PolynomialArray entries must share a registry")
            for m in p.terms:
                index.setdefault(m, len(index))
        self.registry = registry
        self.shape = shape or (len(polynomials),)
        self.exponents = np.zeros((max(len(index), 1), len(registry)))
        for m, row in index.items():
            for v, p in m:
                self.exponents[row, v] = p
        self.coefficients = np.zeros((len(polynomials), max(len(index), 1)))
        for i, p in enumerate(polynomials):
            for m, c in p.terms.items():
                self.coefficients[i, index[m]] = c

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            values = self.coefficients @ np.prod(x**self.exponents, axis=1)
            return values.reshape(self.shape)
        basis = np.prod(x[:, None, :] ** self.exponents[None, :, :], axis=2)
        return (basis @ self.coefficients.T).reshape((x.shape[0], *self.shape))


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*^]))"
)


class _Parser:
    """Recursive-descent reader for ``coef*var^k*var2 + ...`` strings."""

    def __init__(self, text: str, registry: Registry) -> None:
        self.text = text
        self.registry = registry
        self.tokens = list(self._tokenize(text))
        self.pos = 0

    def _tokenize(self, text: str) -> Iterator[tuple[str, str]]:
        pos = 0
        stripped = text.rstrip()
        while pos < len(stripped):
            match = _TOKEN.match(stripped, pos)
            if not match or match.end() == pos:
                raise UsageError(f"cannot parse polynomial near '{stripped[pos:pos + 10]}'")
            kind = match.lastgroup or ""
            yield kind, match.group(kind)
            pos = match.end()

    def _peek(self) -> tuple[str, str] | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _take(self) -> tuple[str, str]:
        token = self._peek()
        if token is None:
            raise UsageError(f"unexpected end of polynomial '{self.text}'")
        self.pos += 1
        return token

    def parse(self) -> Polynomial:
        if not self.tokens:
            raise UsageError("empty polynomial text")
        total = Polynomial.zero(self.registry)
        sign = 1.0
        while True:
            token = self._peek()
            while token is not None and token[0] == "op" and token[1] in "+-":
                if token[1] == "-":
                    sign = -sign
                self.pos += 1
                token = self._peek()
            total = total + self._term() * sign
            sign = 1.0
            token = self._peek()
            if token is None:
                return total
            if token[0] != "op" or token[1] not in "+-":
                raise UsageError(f"expected '+' or '-' in '{self.text}'")

    def _term(self) -> Polynomial:
        coefficient = 1.0
        pairs: list[tuple[int, int]] = []
        while True:
            kind, value = self._take()
            if kind == "num":
                coefficient *= float(value)
            elif kind == "name":
                power = 1
                nxt = self._peek()
                if nxt == ("op", "^"):
                    self.pos += 1
                    kind_p, value_p = self._take()
                    if kind_p != "num" or not value_p.isdigit():
                        raise UsageError(f"bad exponent '{value_p}' in '{self.text}'")
                    power = int(value_p)
                pairs.append((self.registry.index(value), power))
            else:
                raise UsageError(f"unexpected '{value}' in '{self.text}'")
            if self._peek() != ("op", "*"):
                return Polynomial(self.registry, {Monomial(pairs): coefficient})
            self.pos += 1


@dataclass(frozen=True, eq=False)
class SemialgebraicSet:
    """``{x : equalities == 0, inequalities <= 0, lower <= x <= upper}``."""

    registry: Registry
    equalities: tuple[Polynomial, ...] = ()
    inequalities: tuple[Polynomial, ...] = ()
    lower: tuple[float, ...] = ()
    upper: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        n = len(self.registry)
        lower = tuple(float(v) for v in self.lower) or (-np.inf,) * n
        upper = tuple(float(v) for v in self.upper) or (np.inf,) * n
        if len(lower) != n or len(upper) != n:
            raise UsageError(f"box bounds must have {n} entries")
        if any(lo > hi for lo, hi in zip(lower, upper, strict=True)):
            raise UsageError("box lower bound exceeds upper bound")
        for p in (*self.equalities, *self.inequalities):
            if p.registry != self.registry:
                raise UsageError("set constraints must share the set's registry")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "equalities", tuple(self.equalities))
        object.__setattr__(self, "inequalities", tuple(self.inequalities))

    @classmethod
    def box_set(
        cls,
        registry: Registry,
        bounds: Mapping[str, tuple[float, float]] | None = None,
        manifold: bool = True,
        equalities: Sequence[Polynomial] = (),
        inequalities: Sequence[Polynomial] = (),
    ) -> SemialgebraicSet:
        """Box over named variables, optionally with the registry's manifolds."""
        n = len(registry)
        lower = [-np.inf] * n
        upper = [np.inf] * n
        for name, (lo, hi) in (bounds or {}).items():
            i = registry.index(name)
            lower[i], upper[i] = float(lo), float(hi)
        eqs = (registry.manifold_equalities() if manifold else []) + list(equalities)
        return cls(registry, tuple(eqs), tuple(inequalities), tuple(lower), tuple(upper))

    # -- derived sets ------------------------------------------------------

    def lift(self, registry: Registry) -> SemialgebraicSet:
        extra = len(registry) - len(self.registry)
        return SemialgebraicSet(
            registry,
            tuple(p.lift(registry) for p in self.equalities),
            tuple(p.lift(registry) for p in self.inequalities),
            self.lower + (-np.inf,) * extra,
            self.upper + (np.inf,) * extra,
        )

    def with_constraints(
        self,
        equalities: Sequence[Polynomial] = (),
        inequalities: Sequence[Polynomial] = (),
        bounds: Mapping[str | int, tuple[float, float]] | None = None,
    ) -> SemialgebraicSet:
        lower, upper = list(self.lower), list(self.upper)
        for name, (lo, hi) in (bounds or {}).items():
            i = self.registry.index(name)
            lower[i], upper[i] = max(lower[i], lo), min(upper[i], hi)
        return SemialgebraicSet(
            self.registry,
            self.equalities + tuple(equalities),
            self.inequalities + tuple(inequalities),
            tuple(lower),
            tuple(upper),
        )

    def intersect(self, other: SemialgebraicSet) -> SemialgebraicSet:
        if other.registry != self.registry:
            raise UsageError("cannot intersect sets over different registries")
        known = list(self.equalities)
        extra_eqs = [p for p in other.equalities if not any(p.allclose(q, 0.0) for q in known)]
        return SemialgebraicSet(
            self.registry,
            self.equalities + tuple(extra_eqs),
            self.inequalities + other.inequalities,
            tuple(max(a, b) for a, b in zip(self.lower, other.lower, strict=True)),
            tuple(min(a, b) for a, b in zip(self.upper, other.upper, strict=True)),
        )

    def face(self, var: str | int, side: str) -> SemialgebraicSet:
        """The part of the set where ``var`` sits on its lower or upper bound."""
        i = self.registry.index(var)
        value = self.lower[i] if side == "lower" else self.upper[i]
        if not np.isfinite(value):
            raise UsageError(f"variable {self.registry.names[i]} has no finite {side} bound")
        lower, upper = list(self.lower), list(self.upper)
        lower[i] = upper[i] = value
        pin = self.registry.variable(i) - value
        return SemialgebraicSet(self.registry, self.equalities + (pin,), self.inequalities, tuple(lower), tuple(upper))

    def boundary_faces(self) -> list[tuple[int, str]]:
        """``(var, side)`` for every finite box side of a non-manifold variable."""
        faces = []
        for i in range(len(self.registry)):
            if i in self.registry.manifold_vars or self.lower[i] == self.upper[i]:
                continue
            if np.isfinite(self.lower[i]):
                faces.append((i, "lower"))
            if np.isfinite(self.upper[i]):
                faces.append((i, "upper"))
        return faces

    # -- constraint views --------------------------------------------------

    def _implied_by_manifold(self, i: int) -> bool:
        return i in self.registry.manifold_vars and self.lower[i] <= -1.0 and self.upper[i] >= 1.0

    def box_inequalities(self) -> list[Polynomial]:
        """Box bounds as polynomial ``<= 0`` constraints, one per bounded variable."""
        result = []
        for i in range(len(self.registry)):
            lo, hi = self.lower[i], self.upper[i]
            if lo == hi or self._implied_by_manifold(i):
                continue
            x = self.registry.variable(i)
            if np.isfinite(lo) and np.isfinite(hi):
                result.append((x - hi) * (x - lo))
            elif np.isfinite(hi):
                result.append(x - hi)
            elif np.isfinite(lo):
                result.append(lo - x)
        return result

    def as_inequalities(self) -> list[Polynomial]:
        return list(self.inequalities) + self.box_inequalities()

    @property
    def is_bounded(self) -> bool:
        return all(
            i in self.registry.manifold_vars or (np.isfinite(self.lower[i]) and np.isfinite(self.upper[i]))
            for i in range(len(self.registry))
        )

    def contains(self, x: Any, tol: float = MEMBERSHIP_TOL) -> Any:
        """Membership of a point (bool) or of each row of a batch (bool array)."""
        x = np.asarray(x, dtype=float)
        batch = x if x.ndim == 2 else x[None, :]
        ok = np.all(batch >= np.array(self.lower) - tol, axis=1) & np.all(batch <= np.array(self.upper) + tol, axis=1)
        for p in self.inequalities:
            ok &= np.asarray(p.evaluate(batch)) <= tol
        for p in self.equalities:
            ok &= np.abs(np.asarray(p.evaluate(batch))) <= tol
        return ok if x.ndim == 2 else bool(ok[0])

    # -- sampling ----------------------------------------------------------

    def sample(self, n: int, rng: np.random.Generator, max_rounds: int = 50) -> np.ndarray:
        """Draw ``n`` points of the set.

        Box variables are uniform, circles uniform in angle and spheres
        normalised Gaussians; remaining constraints are met by rejection.
        """
        registry = self.registry
        for i in range(len(registry)):
            if i not in registry.manifold_vars and not (np.isfinite(self.lower[i]) and np.isfinite(self.upper[i])):
                raise UsageError(f"cannot sample unbounded variable {registry.names[i]}")
        manifold_eqs = registry.manifold_equalities()
        for p in self.equalities:
            if not any(p.allclose(q, 1e-12) for q in manifold_eqs):
                raise UsageError("sampling supports manifold equalities only")
        chunks: list[np.ndarray] = []
        have = 0
        for _ in range(max_rounds):
            batch = self._raw_sample(max(n, 64), rng)
            keep = batch[self.contains(batch, tol=1e-9)]
            chunks.append(keep)
            have += len(keep)
            if have >= n:
                return np.concatenate(chunks)[:n]
        raise UsageError(f"rejection sampling produced {have} of {n} points")

    def _raw_sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        registry = self.registry
        x = np.zeros((n, len(registry)))
        for i in range(len(registry)):
            if i not in registry.manifold_vars:
                x[:, i] = rng.uniform(self.lower[i], self.upper[i], size=n)
        for s, c in registry.circles:
            angle = rng.uniform(-np.pi, np.pi, size=n)
            x[:, s], x[:, c] = np.sin(angle), np.cos(angle)
        for group in registry.spheres:
            g = rng.standard_normal((n, 4))
            x[:, list(group)] = g / np.linalg.norm(g, axis=1, keepdims=True)
        return x

    # -- serialization -----------------------------------------------------

    def to_model(self) -> Any:
        from hjb.models import SetModel  # pylint: disable=import-outside-toplevel

        return SetModel(
            variables=list(self.registry.names),
            circles=[list(c) for c in self.registry.circles],
            spheres=[list(s) for s in self.registry.spheres],
            equalities=[p.to_text() for p in self.equalities],
            inequalities=[p.to_text() for p in self.inequalities],
            lower=[None if not np.isfinite(v) else v for v in self.lower],
            upper=[None if not np.isfinite(v) else v for v in self.upper],
        )

    @classmethod
    def from_model(cls, model: Any) -> SemialgebraicSet:
        registry = Registry(
            tuple(model.variables),
            tuple(tuple(c) for c in model.circles),
            tuple(tuple(s) for s in model.spheres),
        )
        return cls(
            registry,
            tuple(Polynomial.parse(t, registry) for t in model.equalities),
            tuple(Polynomial.parse(t, registry) for t in model.inequalities),
            tuple(-np.inf if v is None else v for v in model.lower),
            tuple(np.inf if v is None else v for v in model.upper),
        )


# -- moments ----------------------------------------------------------------


@threadsafe_lru_cache
def box_moment(power: int, lower: float, upper: float) -> float:
    """Integral of t^power over [lower, upper]."""
    k = power + 1
    return (upper**k - lower**k) / k


@threadsafe_lru_cache
def sphere_moment(exponents: tuple[int, ...]) -> float:
    """Surface integral of prod x_i^a_i over the unit sphere in len(exponents) dims.

    With two coordinates this is the arc-length moment of the unit circle.
    """
    if any(a % 2 for a in exponents):
        return 0.0
    halves = [(a + 1) / 2 for a in exponents]
    return float(2.0 * np.exp(sum(gammaln(h) for h in halves) - gammaln(sum(halves))))


def circle_moment(a: int, b: int) -> float:
    return sphere_moment((a, b))


def _is_manifold_equality(p: Polynomial) -> bool:
    return any(p.allclose(q, 1e-12) for q in p.registry.manifold_equalities())


def region_tag(region: SemialgebraicSet) -> str:
    """Product shape of a region, e.g. ``box×circle``; raises if unsupported."""
    registry = region.registry
    if region.inequalities:
        raise UnsupportedRegionError("moments need a plain box: explicit inequalities are not supported")
    if any(not _is_manifold_equality(p) for p in region.equalities):
        raise UnsupportedRegionError("moments support circle and sphere equalities only")
    if len(region.equalities) != len(registry.manifold_groups):
        raise UnsupportedRegionError("every flagged manifold must be constrained for moments")
    for i in range(len(registry)):
        if i in registry.manifold_vars:
            continue
        if not (np.isfinite(region.lower[i]) and np.isfinite(region.upper[i])):
            raise UnsupportedRegionError(f"variable {registry.names[i]} is unbounded")
    parts = ["box"] + ["circle"] * len(registry.circles) + ["3-sphere"] * len(registry.spheres)
    return "×".join(parts)


def moment(m: Monomial, region: SemialgebraicSet) -> float:
    """Exact integral of ``m`` over a box × circles × 3-spheres region.

    Circles use arc-length and spheres surface measure; box bounds placed on
    manifold coordinates are ignored here.
    """
    region_tag(region)
    return _moment_value(m, region)


def _moment_value(m: Monomial, region: SemialgebraicSet) -> float:
    registry = region.registry
    value = 1.0
    for i in range(len(registry)):
        if i not in registry.manifold_vars:
            value *= box_moment(m.exponent(i), region.lower[i], region.upper[i])
            if value == 0.0:
                return 0.0
    for group in registry.manifold_groups:
        value *= sphere_moment(tuple(m.exponent(i) for i in group))
        if value == 0.0:
            return 0.0
    return value


@dataclass(frozen=True, eq=False)
class MomentTable:
    """Moments of a region for a fixed set of monomials."""

    region: SemialgebraicSet
    moments: Mapping[Monomial, float]
    tag: str

    @classmethod
    def build(cls, region: SemialgebraicSet, monomials: Iterable[Monomial]) -> MomentTable:
        tag = region_tag(region)
        table = {m: _moment_value(m, region) for m in {ONE, *monomials}}
        dropped = [
            region.registry.names[i]
            for i in region.registry.manifold_vars
            if region.lower[i] > -1.0 or region.upper[i] < 1.0
        ]
        if dropped:
            logger.debug(f"moments ignore box bounds on manifold coordinates {dropped}")
        return cls(region, table, tag)

    @property
    def measure(self) -> float:
        return self.moments[ONE]

    def integrate(self, p: Polynomial) -> float:
        missing = [m for m in p.terms if m not in self.moments]
        if missing:
            raise UsageError(f"moment table lacks {len(missing)} monomials of the integrand")
        return float(sum(c * self.moments[m] for m, c in p.terms.items()))

    def average(self, p: Polynomial) -> float:
        return self.integrate(p) / self.measure


def region_measure(region: SemialgebraicSet) -> float:
    return moment(ONE, region)


def monte_carlo_moment(
    m: Monomial, region: SemialgebraicSet, n: int, rng: np.random.Generator
) -> tuple[float, float]:
    """Monte-Carlo estimate of :func:`moment` and its standard error."""
    measure = region_measure(region)
    values = m.evaluate(region.sample(n, rng))
    return float(measure * np.mean(values)), float(measure * np.std(values, ddof=1) / np.sqrt(n))
