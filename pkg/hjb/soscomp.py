"""Sum-of-squares programs compiled to block-diagonal conic problems.

Decision polynomials are :class:`PolyExpr` objects, polynomials in the state
whose coefficients are affine in the decision variables. A nonnegativity
constraint on a semialgebraic set is turned into an SOS condition with the
S-procedure: SOS multipliers for every ``g <= 0`` and free multipliers for
every ``h == 0``. Each SOS condition becomes one Gram block plus coefficient
matching rows.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Any, Literal

import numpy as np
import scipy.sparse as sp

from hjb.config import SolverSettings
from hjb.errors import CorruptionError, DegreeError, UsageError
from hjb.models import CertificateModel, GramBlockModel, VerificationEntry, VerificationModel
from hjb.poly import DROP_TOL, ONE, MomentTable, Monomial, Polynomial, Registry, SemialgebraicSet, monomials_up_to
from hjb.sdp import ConicProblem, Solution, solve
from lib.utils import rounddown_even, roundup_even

logger = logging.getLogger(__name__)

CONST = -1
"""Key of the decision-independent part inside a :class:`PolyExpr` coefficient"""

CLIP_EIGENVALUE = 1e-9
RESIDUAL_TOL = 1e-6
EIGENVALUE_TOL = 1e-7

Coefficients = dict[int, float]


def _add_into(target: Coefficients, source: Mapping[int, float], scale: float = 1.0) -> None:
    for v, a in source.items():
        target[v] = target.get(v, 0.0) + scale * a


def _clean(terms: Mapping[Monomial, Coefficients]) -> dict[Monomial, Coefficients]:
    out = {}
    for m, coeffs in terms.items():
        kept = {v: a for v, a in coeffs.items() if abs(a) > DROP_TOL}
        if kept:
            out[m] = kept
    return out


class PolyExpr:
    """A polynomial whose coefficients are affine functions of decision variables."""

    __slots__ = ("registry", "terms")

    def __init__(self, registry: Registry, terms: Mapping[Monomial, Coefficients] | None = None) -> None:
        self.registry = registry
        self.terms = _clean(terms or {})

    @classmethod
    def from_polynomial(cls, p: Polynomial) -> PolyExpr:
        return cls(p.registry, {m: {CONST: c} for m, c in p.terms.items()})

    @classmethod
    def constant(cls, registry: Registry, value: float) -> PolyExpr:
        return cls(registry, {ONE: {CONST: float(value)}})

    # -- structure ---------------------------------------------------------

    @property
    def degree(self) -> int:
        return max((m.degree for m in self.terms), default=0)

    @property
    def variables(self) -> frozenset[int]:
        return frozenset(v for m in self.terms for v in m.variables)

    @property
    def decision_ids(self) -> frozenset[int]:
        return frozenset(v for coeffs in self.terms.values() for v in coeffs if v != CONST)

    def is_constant(self) -> bool:
        """True when no decision variable appears."""
        return all(set(coeffs) <= {CONST} for coeffs in self.terms.values())

    def constant_part(self) -> Polynomial:
        return Polynomial(self.registry, {m: coeffs.get(CONST, 0.0) for m, coeffs in self.terms.items()})

    def lift(self, registry: Registry) -> PolyExpr:
        if registry == self.registry:
            return self
        if not self.registry.is_prefix_of(registry):
            raise UsageError(f"cannot lift {self.registry.names} onto {registry.names}")
        return PolyExpr(registry, self.terms)

    # -- arithmetic --------------------------------------------------------

    def _coerce(self, other: Any) -> PolyExpr | None:
        if isinstance(other, PolyExpr):
            expr = other
        elif isinstance(other, Polynomial):
            expr = PolyExpr.from_polynomial(other)
        elif isinstance(other, (int, float, np.integer, np.floating)):
            return PolyExpr.constant(self.registry, float(other))
        else:
            return None
        if expr.registry != self.registry:
            raise UsageError(f"registry mismatch: {self.registry.names} vs {expr.registry.names}")
        return expr

    def __add__(self, other: Any) -> PolyExpr:
        rhs = self._coerce(other)
        if rhs is None:
            return NotImplemented
        terms = {m: dict(c) for m, c in self.terms.items()}
        for m, coeffs in rhs.terms.items():
            _add_into(terms.setdefault(m, {}), coeffs)
        return PolyExpr(self.registry, terms)

    __radd__ = __add__

    def __neg__(self) -> PolyExpr:
        return self * -1.0

    def __sub__(self, other: Any) -> PolyExpr:
        rhs = self._coerce(other)
        if rhs is None:
            return NotImplemented
        return self + (-rhs)

    def __rsub__(self, other: Any) -> PolyExpr:
        return (-self) + other

    def __mul__(self, other: Any) -> PolyExpr:
        if isinstance(other, (int, float, np.integer, np.floating)):
            s = float(other)
            return PolyExpr(self.registry, {m: {v: a * s for v, a in c.items()} for m, c in self.terms.items()})
        if isinstance(other, PolyExpr):
            if other.is_constant():
                return self * other.constant_part()
            if self.is_constant():
                return other * self.constant_part()
            raise UsageError("product of two decision-dependent expressions is not affine")
        if not isinstance(other, Polynomial):
            return NotImplemented
        if other.registry != self.registry:
            raise UsageError(f"registry mismatch: {self.registry.names} vs {other.registry.names}")
        out: dict[Monomial, Coefficients] = {}
        for m1, coeffs in self.terms.items():
            for m2, c in other.terms.items():
                _add_into(out.setdefault(m1 * m2, {}), coeffs, c)
        return PolyExpr(self.registry, out)

    __rmul__ = __mul__

    # -- calculus and substitution -----------------------------------------

    def differentiate(self, var: str | int) -> PolyExpr:
        index = self.registry.index(var)
        out: dict[Monomial, Coefficients] = {}
        for m, coeffs in self.terms.items():
            power, reduced = m.derivative(index)
            if power:
                _add_into(out.setdefault(reduced, {}), coeffs, float(power))
        return PolyExpr(self.registry, out)

    def gradient(self, variables: Iterable[str | int] | None = None) -> list[PolyExpr]:
        indices = range(len(self.registry)) if variables is None else variables
        return [self.differentiate(v) for v in indices]

    def _by_decision(self) -> dict[int, Polynomial]:
        split: dict[int, dict[Monomial, float]] = {}
        for m, coeffs in self.terms.items():
            for v, a in coeffs.items():
                split.setdefault(v, {})[m] = a
        return {v: Polynomial(self.registry, terms) for v, terms in split.items()}

    @classmethod
    def _join(cls, registry: Registry, parts: Mapping[int, Polynomial]) -> PolyExpr:
        out: dict[Monomial, Coefficients] = {}
        for v, p in parts.items():
            for m, c in p.terms.items():
                target = out.setdefault(m, {})
                target[v] = target.get(v, 0.0) + c
        return cls(registry, out)

    def substitute(self, mapping: Mapping[str | int, Polynomial | float]) -> PolyExpr:
        parts = {v: p.substitute(mapping) for v, p in self._by_decision().items()}
        return PolyExpr._join(self.registry, parts)

    def at_point(self, x: Sequence[float]) -> PolyExpr:
        """Evaluate the state at ``x``; the result is constant in the state."""
        point = np.asarray(x, dtype=float)
        parts = {v: Polynomial.constant(self.registry, p.evaluate(point)) for v, p in self._by_decision().items()}
        return PolyExpr._join(self.registry, parts)

    def integrate(self, table: MomentTable, normalize: bool = True) -> PolyExpr:
        """Moment functional: the integral (or average) of the expression over the table's region."""
        total: Coefficients = {}
        for m, coeffs in self.terms.items():
            if m not in table.moments:
                raise UsageError("moment table lacks a monomial of the expression")
            _add_into(total, coeffs, table.moments[m])
        if normalize:
            total = {v: a / table.measure for v, a in total.items()}
        return PolyExpr(self.registry, {ONE: total})

    def evaluate_at(self, values: np.ndarray) -> Polynomial:
        """The polynomial obtained by fixing the decision variables."""
        terms = {}
        for m, coeffs in self.terms.items():
            terms[m] = sum(a * (1.0 if v == CONST else float(values[v])) for v, a in coeffs.items())
        return Polynomial(self.registry, terms)

    def __repr__(self) -> str:
        return f"PolyExpr({len(self.terms)} terms, {len(self.decision_ids)} decisions)"


# -- Gram blocks -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GramBlock:
    """PSD Gram matrix over ``basis``; ``ids[i, j]`` is the decision id of entry (i, j)."""

    name: str
    basis: tuple[Monomial, ...]
    ids: np.ndarray

    @property
    def size(self) -> int:
        return len(self.basis)

    @property
    def is_scalar(self) -> bool:
        return self.size == 1


def gram_basis(expr: PolyExpr, prune: bool = True) -> list[Monomial]:
    """Half-degree monomial basis for an SOS representation of ``expr``.

    With ``prune`` the basis is reduced by diagonal elimination: ``z`` goes
    when ``z^2`` is absent from the support and cannot arise as ``z_j z_k``
    for two other basis monomials.
    """
    support = set(expr.terms)
    half = roundup_even(expr.degree) // 2
    basis = monomials_up_to(sorted(expr.variables), half)
    if not prune:
        return basis
    while True:
        cross = {a * b for i, a in enumerate(basis) for b in basis[i + 1 :]}
        removable = {z for z in basis if (z * z) not in support and (z * z) not in cross}
        if not removable:
            return basis
        basis = [z for z in basis if z not in removable]


def _divides(lead: Monomial, m: Monomial) -> bool:
    return all(m.exponent(v) >= e for v, e in lead)


def quotient_leads(equalities: Sequence[Polynomial]) -> list[Monomial | None]:
    """Lead term per equality for reducing bases modulo the ideal they generate.

    A lead is a top-degree pure power ``v^k`` whose variable appears with a lower
    power in every other term (circles, spheres, pinned coordinates), or the only
    term of a monomial equality. Equalities sharing a variable with an earlier
    lead get None.
    """
    used: set[int] = set()
    leads: list[Monomial | None] = []
    for h in equalities:
        lead: Monomial | None = None
        if h.degree > 0 and not used & h.variables:
            top = [m for m in h.terms if m.degree == h.degree]
            powers = [
                m for m in top if len(m) == 1 and all(t.exponent(m[0][0]) < m[0][1] for t in h.terms if t != m)
            ]
            lead = top[0] if len(h.terms) == 1 else max(powers, key=Monomial.sort_key, default=None)
        if lead is not None:
            used |= h.variables
        leads.append(lead)
    return leads


def reduce_basis(basis: Iterable[Monomial], leads: Iterable[Monomial | None]) -> list[Monomial]:
    """Drop basis monomials divisible by any lead."""
    chosen = [lead for lead in leads if lead is not None]
    return [m for m in basis if not any(_divides(lead, m) for lead in chosen)]


@dataclass
class SosConstraint:
    name: str
    expr: PolyExpr
    multipliers: dict[str, PolyExpr] = field(default_factory=dict)
    leads: tuple[Monomial, ...] = ()
    """Lead terms of the domain equalities; Gram basis monomials they divide are dropped"""


@dataclass(frozen=True, eq=False)
class Certificate:
    """Numerical values of every decision variable plus the Gram matrices."""

    registry: Registry
    values: np.ndarray
    blocks: tuple[tuple[str, tuple[Monomial, ...], np.ndarray], ...]
    free_values: np.ndarray
    lp_values: np.ndarray

    def gram(self, name: str) -> np.ndarray:
        for block_name, _, matrix in self.blocks:
            if block_name == name:
                return matrix
        raise KeyError(name)

    def to_model(self, multipliers: Mapping[str, Polynomial] | None = None) -> CertificateModel:
        return CertificateModel(
            variables=list(self.registry.names),
            blocks=[
                GramBlockModel(
                    name=name,
                    basis=[[list(pair) for pair in m] for m in basis],
                    gram_lower=[[float(v) for v in matrix[i, : i + 1]] for i in range(len(basis))],
                )
                for name, basis, matrix in self.blocks
            ],
            free_values=[float(v) for v in self.free_values],
            lp_values=[float(v) for v in self.lp_values],
            multipliers={k: p.to_text() for k, p in (multipliers or {}).items()},
        )


@dataclass(frozen=True, eq=False)
class CompiledProgram:
    """A conic problem plus the bookkeeping to map its solution back."""

    registry: Registry
    problem: ConicProblem
    blocks: tuple[GramBlock, ...]
    kinds: np.ndarray
    """Per decision id: 0 free, 1 LP, 2 PSD entry"""
    local: np.ndarray
    """Per decision id: column index for free and LP variables, -1 for PSD entries"""
    constraints: tuple[SosConstraint, ...]
    main_blocks: tuple[int, ...]
    """Index into ``blocks`` of the Gram block certifying each SOS constraint"""
    sense: str
    objective: PolyExpr | None
    row_labels: tuple[tuple[str, Monomial], ...]

    def certificate(self, solution: Solution) -> Certificate:
        n = len(self.kinds)
        values = np.zeros(n)
        psd_blocks = [b for b in self.blocks if not b.is_scalar]
        psd_index = {id(b): k for k, b in enumerate(psd_blocks)}
        if len(solution.x_blocks) != len(psd_blocks):
            raise CorruptionError(f"solution has {len(solution.x_blocks)} PSD blocks, program has {len(psd_blocks)}")
        if len(solution.x_free) != self.problem.n_free or len(solution.x_lin) != self.problem.n_lin:
            raise CorruptionError("solution scalar sizes do not match the program")
        free = self.kinds == 0
        lin = self.kinds == 1
        values[free] = solution.x_free[self.local[free]]
        values[lin] = solution.x_lin[self.local[lin]]
        grams = []
        for block in self.blocks:
            if block.is_scalar:
                matrix = np.array([[values[block.ids[0, 0]]]])
            else:
                matrix = solution.x_blocks[psd_index[id(block)]]
                if matrix.shape != (block.size, block.size):
                    raise CorruptionError(f"Gram block {block.name} has shape {matrix.shape}")
                values[block.ids] = matrix
            grams.append((block.name, block.basis, np.array(matrix)))
        return Certificate(self.registry, values, tuple(grams), solution.x_free.copy(), solution.x_lin.copy())

    def certificate_from_model(self, model: CertificateModel) -> Certificate:
        """Rebuild a certificate stored in a bundle; raises CorruptionError on mismatch."""
        if tuple(model.variables) != self.registry.names:
            raise CorruptionError("certificate variables differ from the program's")
        if len(model.blocks) != len(self.blocks):
            raise CorruptionError(f"certificate has {len(model.blocks)} blocks, program has {len(self.blocks)}")
        if len(model.free_values) != self.problem.n_free or len(model.lp_values) != self.problem.n_lin:
            raise CorruptionError("certificate scalar sizes do not match the program")
        values = np.zeros(len(self.kinds))
        free = self.kinds == 0
        lin = self.kinds == 1
        values[free] = np.asarray(model.free_values)[self.local[free]]
        values[lin] = np.asarray(model.lp_values)[self.local[lin]] if self.problem.n_lin else 0.0
        grams = []
        for stored, block in zip(model.blocks, self.blocks, strict=True):
            basis = tuple(Monomial(tuple(tuple(pair) for pair in m)) for m in stored.basis)
            if stored.name != block.name or basis != block.basis:
                raise CorruptionError(f"Gram block {stored.name} does not match program block {block.name}")
            if len(stored.gram_lower) != block.size or any(len(r) != i + 1 for i, r in enumerate(stored.gram_lower)):
                raise CorruptionError(f"Gram block {stored.name} is not lower-triangular of size {block.size}")
            matrix = np.zeros((block.size, block.size))
            for i, row in enumerate(stored.gram_lower):
                matrix[i, : i + 1] = row
                matrix[: i + 1, i] = row
            values[block.ids] = matrix
            grams.append((block.name, block.basis, matrix))
        return Certificate(
            self.registry, values, tuple(grams), np.asarray(model.free_values), np.asarray(model.lp_values)
        )

    def value(self, expr: PolyExpr, certificate: Certificate) -> Polynomial:
        return expr.evaluate_at(certificate.values)

    def objective_value(self, certificate: Certificate) -> float:
        if self.objective is None:
            return 0.0
        return self.value(self.objective, certificate).coefficient(ONE)


class SosProgram:
    """Builder for an SOS program over one variable registry."""

    def __init__(self, registry: Registry, name: str = "sos") -> None:
        self.registry = registry
        self.name = name
        self._kinds: list[int] = []
        self._local: list[int] = []
        self._n_free = 0
        self._n_lin = 0
        self._blocks: list[GramBlock] = []
        self._equalities: list[tuple[str, PolyExpr]] = []
        self._sos: list[SosConstraint] = []
        self._objective: PolyExpr | None = None
        self._sense: Literal["min", "max"] = "min"

    # -- decision variables --------------------------------------------------

    def _new_free(self) -> int:
        self._kinds.append(0)
        self._local.append(self._n_free)
        self._n_free += 1
        return len(self._kinds) - 1

    def _new_lin(self, kinds: list[int], local: list[int], counter: list[int]) -> int:
        kinds.append(1)
        local.append(counter[0])
        counter[0] += 1
        return len(kinds) - 1

    def _basis(
        self, degree: int | None, variables: Iterable[str | int] | None, monomials: Iterable[Monomial] | None
    ) -> list[Monomial]:
        if monomials is not None:
            return sorted(set(monomials), key=Monomial.sort_key)
        if degree is None or degree < 0:
            raise DegreeError(f"degree must be a nonnegative integer, got {degree}")
        if variables is None:
            indices = list(range(len(self.registry)))
        else:
            indices = sorted({self.registry.index(v) for v in variables})
        return monomials_up_to(indices, degree)

    def new_free_poly(
        self,
        name: str,
        degree: int | None = None,
        variables: Iterable[str | int] | None = None,
        monomials: Iterable[Monomial] | None = None,
    ) -> PolyExpr:
        """A polynomial with one free coefficient per basis monomial."""
        basis = self._basis(degree, variables, monomials)
        logger.debug(f"{self.name}: free polynomial {name} with {len(basis)} coefficients")
        return PolyExpr(self.registry, {m: {self._new_free(): 1.0} for m in basis})

    def new_sos_poly(
        self,
        name: str,
        degree: int | None = None,
        variables: Iterable[str | int] | None = None,
        monomials: Iterable[Monomial] | None = None,
    ) -> PolyExpr:
        """An SOS polynomial ``z' G z`` of even ``degree`` with its own Gram block."""
        if monomials is None:
            if degree is None or degree < 0 or degree % 2:
                raise DegreeError(f"SOS polynomial {name} needs an even nonnegative degree, got {degree}")
            basis = self._basis(degree // 2, variables, None)
        else:
            basis = self._basis(None, None, monomials)
        counter = [self._n_lin]
        expr, block = self._gram(name, basis, self._kinds, self._local, counter)
        self._n_lin = counter[0]
        self._blocks.append(block)
        return expr

    def _gram(
        self, name: str, basis: Sequence[Monomial], kinds: list[int], local: list[int], lin_counter: list[int]
    ) -> tuple[PolyExpr, GramBlock]:
        n = len(basis)
        ids = np.zeros((n, n), dtype=int)
        if n == 1:
            ids[0, 0] = self._new_lin(kinds, local, lin_counter)
        else:
            for i, j in combinations_with_replacement(range(n), 2):
                kinds.append(2)
                local.append(-1)
                ids[i, j] = ids[j, i] = len(kinds) - 1
        terms: dict[Monomial, Coefficients] = {}
        for i, j in combinations_with_replacement(range(n), 2):
            _add_into(terms.setdefault(basis[i] * basis[j], {}), {int(ids[i, j]): 1.0 if i == j else 2.0})
        return PolyExpr(self.registry, terms), GramBlock(name, tuple(basis), ids)

    # -- constraints ---------------------------------------------------------

    def _own(self, expr: PolyExpr | Polynomial) -> PolyExpr:
        if isinstance(expr, Polynomial):
            expr = PolyExpr.from_polynomial(expr)
        return expr.lift(self.registry)

    def add_equality(self, expr: PolyExpr | Polynomial, name: str = "eq") -> None:
        """Every coefficient of ``expr`` must vanish."""
        self._equalities.append((name, self._own(expr)))

    def add_sos(self, expr: PolyExpr | Polynomial, name: str = "sos") -> SosConstraint:
        constraint = SosConstraint(name, self._own(expr))
        self._sos.append(constraint)
        return constraint

    def add_nonneg_on_set(
        self,
        operand: PolyExpr | Polynomial,
        domain: SemialgebraicSet,
        multiplier_degree: int | None = None,
        name: str = "nonneg",
    ) -> SosConstraint:
        """Require ``operand >= 0`` on ``domain`` through the S-procedure."""
        operand = self._own(operand)
        if domain.registry != self.registry:
            domain = domain.lift(self.registry)
        if multiplier_degree is not None and (multiplier_degree < 0 or multiplier_degree % 2):
            raise DegreeError(f"multiplier degree must be even and nonnegative, got {multiplier_degree}")
        inequalities = domain.as_inequalities()
        equalities = list(domain.equalities)
        variables = set(operand.variables)
        for p in (*inequalities, *equalities):
            variables |= p.variables
        variables_sorted = sorted(variables)
        target = roundup_even(operand.degree)
        if multiplier_degree is not None and inequalities:
            target = max(target, roundup_even(multiplier_degree + max(g.degree for g in inequalities)))

        expr = operand
        multipliers: dict[str, PolyExpr] = {}
        leads = quotient_leads(equalities)
        chosen = tuple(lead for lead in leads if lead is not None)
        for k, g in enumerate(inequalities):
            degree = multiplier_degree if multiplier_degree is not None else rounddown_even(max(0, target - g.degree))
            basis = reduce_basis(self._basis(degree // 2, variables_sorted, None), chosen)
            sigma = self.new_sos_poly(f"{name}.sigma{k}", monomials=basis or [ONE])
            multipliers[f"{name}.sigma{k}"] = sigma
            expr = expr + sigma * g
        for k, h in enumerate(equalities):
            # no monomial of tau_k is divisible by the lead of an earlier equality
            earlier = chosen if leads[k] is None else tuple(lead for lead in leads[:k] if lead is not None)
            basis = reduce_basis(self._basis(max(0, target - h.degree), variables_sorted, None), earlier)
            tau = self.new_free_poly(f"{name}.tau{k}", monomials=basis)
            multipliers[f"{name}.tau{k}"] = tau
            expr = expr + tau * h
        constraint = SosConstraint(name, expr, multipliers, chosen)
        self._sos.append(constraint)
        return constraint

    def set_objective(self, expr: PolyExpr | Polynomial | float, sense: Literal["min", "max"] = "min") -> None:
        if not isinstance(expr, (PolyExpr, Polynomial)):
            expr = PolyExpr.constant(self.registry, float(expr))
        expr = self._own(expr)
        if any(m != ONE for m in expr.terms):
            raise UsageError("objective must not depend on the state variables")
        if sense not in ("min", "max"):
            raise UsageError(f"unknown objective sense {sense!r}")
        self._objective = expr
        self._sense = sense

    # -- compilation ---------------------------------------------------------

    def compile(self, prune: bool = True) -> CompiledProgram:
        if not self._sos and not self._equalities:
            raise UsageError(f"{self.name}: program has no constraints")
        kinds = list(self._kinds)
        local = list(self._local)
        counter = [self._n_lin]
        blocks = list(self._blocks)
        equalities = list(self._equalities)
        main_blocks = []
        for constraint in self._sos:
            basis = reduce_basis(gram_basis(constraint.expr, prune), constraint.leads) or [ONE]
            gram, block = self._gram(f"{constraint.name}.gram", basis, kinds, local, counter)
            main_blocks.append(len(blocks))
            blocks.append(block)
            equalities.append((constraint.name, constraint.expr - gram))
        kinds_arr = np.asarray(kinds, dtype=int)
        local_arr = np.asarray(local, dtype=int)

        psd_blocks = [b for b in blocks if not b.is_scalar]
        placement: dict[int, tuple[int, int, int]] = {}
        for k, block in enumerate(psd_blocks):
            for i, j in combinations_with_replacement(range(block.size), 2):
                placement[int(block.ids[i, j])] = (k, i, j)

        b_values: list[float] = []
        labels: list[tuple[str, Monomial]] = []
        free_rows: list[int] = []
        free_cols: list[int] = []
        free_vals: list[float] = []
        lin_rows: list[int] = []
        lin_cols: list[int] = []
        lin_vals: list[float] = []
        psd_entries: list[tuple[list[int], list[int], list[float]]] = [([], [], []) for _ in psd_blocks]

        def scatter(row: int, v: int, a: float) -> None:
            kind = kinds_arr[v]
            if kind == 0:
                free_rows.append(row)
                free_cols.append(local_arr[v])
                free_vals.append(a)
            elif kind == 1:
                lin_rows.append(row)
                lin_cols.append(local_arr[v])
                lin_vals.append(a)
            else:
                k, i, j = placement[v]
                n = psd_blocks[k].size
                rows, cols, vals = psd_entries[k]
                if i == j:
                    rows.append(row)
                    cols.append(i * n + i)
                    vals.append(a)
                else:
                    rows += [row, row]
                    cols += [i * n + j, j * n + i]
                    vals += [a / 2.0, a / 2.0]

        for label, expr in equalities:
            for m in sorted(expr.terms, key=Monomial.sort_key):
                coeffs = expr.terms[m]
                row = len(b_values)
                b_values.append(-coeffs.get(CONST, 0.0))
                labels.append((label, m))
                for v, a in coeffs.items():
                    if v != CONST:
                        scatter(row, v, a)

        m_rows = len(b_values)
        n_free, n_lin = self._n_free, counter[0]
        c_free = np.zeros(n_free)
        c_lin = np.zeros(n_lin)
        c_blocks = [np.zeros((b.size, b.size)) for b in psd_blocks]
        if self._objective is not None:
            sign = -1.0 if self._sense == "max" else 1.0
            for v, a in self._objective.terms.get(ONE, {}).items():
                if v == CONST:
                    continue
                a = sign * a
                if kinds_arr[v] == 0:
                    c_free[local_arr[v]] += a
                elif kinds_arr[v] == 1:
                    c_lin[local_arr[v]] += a
                else:
                    k, i, j = placement[v]
                    if i == j:
                        c_blocks[k][i, i] += a
                    else:
                        c_blocks[k][i, j] += a / 2.0
                        c_blocks[k][j, i] += a / 2.0

        problem = ConicProblem.build(
            b=np.asarray(b_values),
            c_blocks=c_blocks,
            a_blocks=[
                sp.csr_matrix((vals, (rows, cols)), shape=(m_rows, b.size * b.size))
                for (rows, cols, vals), b in zip(psd_entries, psd_blocks, strict=True)
            ],
            c_lin=c_lin,
            a_lin=sp.csr_matrix((lin_vals, (lin_rows, lin_cols)), shape=(m_rows, n_lin)),
            c_free=c_free,
            a_free=sp.csr_matrix((free_vals, (free_rows, free_cols)), shape=(m_rows, n_free)),
        )
        logger.info(
            f"{self.name}: {m_rows} rows, {n_free} free, {n_lin} LP, PSD blocks {[b.size for b in psd_blocks]}"
        )
        return CompiledProgram(
            registry=self.registry,
            problem=problem,
            blocks=tuple(blocks),
            kinds=kinds_arr,
            local=local_arr,
            constraints=tuple(self._sos),
            main_blocks=tuple(main_blocks),
            sense=self._sense,
            objective=self._objective,
            row_labels=tuple(labels),
        )


# -- verification --------------------------------------------------------------


def _clip(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    eigenvalues, vectors = np.linalg.eigh(0.5 * (matrix + matrix.T))
    smallest = float(eigenvalues[0]) if len(eigenvalues) else 0.0
    clipped = np.where((eigenvalues < 0) & (eigenvalues >= -CLIP_EIGENVALUE), 0.0, eigenvalues)
    return (vectors * clipped) @ vectors.T, smallest


def gram_polynomial(registry: Registry, basis: Sequence[Monomial], matrix: np.ndarray) -> Polynomial:
    terms: dict[Monomial, float] = {}
    for i, j in combinations_with_replacement(range(len(basis)), 2):
        m = basis[i] * basis[j]
        terms[m] = terms.get(m, 0.0) + (1.0 if i == j else 2.0) * float(matrix[i, j])
    return Polynomial(registry, terms)


def verify(program: CompiledProgram, certificate: Certificate) -> VerificationModel:
    """Check every Gram block for PSD-ness and every SOS identity for its residual."""
    if len(certificate.blocks) != len(program.blocks):
        raise CorruptionError(f"certificate has {len(certificate.blocks)} blocks, program has {len(program.blocks)}")
    entries = []
    main = dict(zip(program.main_blocks, program.constraints, strict=True))
    for k, ((name, basis, matrix), block) in enumerate(zip(certificate.blocks, program.blocks, strict=True)):
        if name != block.name or tuple(basis) != block.basis or matrix.shape != (block.size, block.size):
            raise CorruptionError(f"certificate block {name} does not match program block {block.name}")
        clipped, smallest = _clip(matrix)
        scale = float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (matrix + matrix.T))), initial=0.0))
        eigen_limit = -EIGENVALUE_TOL * max(scale, 1.0)
        residual, residual_limit = 0.0, RESIDUAL_TOL
        if k in main:
            target = program.value(main[k].expr, certificate)
            difference = target - gram_polynomial(program.registry, basis, clipped)
            residual = difference.max_abs_coefficient()
            residual_limit = RESIDUAL_TOL * (1.0 + target.max_abs_coefficient())
        passed = residual <= residual_limit and smallest >= eigen_limit
        if not passed:
            logger.warning(f"verification failed for {name}: residual={residual:.3e} min_eig={smallest:.3e}")
        entries.append(
            VerificationEntry(
                name=name,
                residual=residual,
                residual_limit=residual_limit,
                min_eigenvalue=smallest,
                eigenvalue_limit=eigen_limit,
                passed=passed,
            )
        )
    return VerificationModel(passed=all(e.passed for e in entries), entries=entries)


@dataclass(frozen=True, eq=False)
class SosResult:
    program: CompiledProgram
    solution: Solution
    certificate: Certificate | None

    @property
    def objective(self) -> float:
        """Objective value in the program's own sense."""
        if self.certificate is None:
            return float("nan")
        return self.program.objective_value(self.certificate)

    def value(self, expr: PolyExpr) -> Polynomial:
        if self.certificate is None:
            raise UsageError("no certificate available")
        return self.program.value(expr, self.certificate)


def solve_program(program: SosProgram, settings: SolverSettings | None = None, prune: bool = True) -> SosResult:
    """Compile, solve and decode; the certificate is None when the solve is unusable."""
    settings = settings or SolverSettings()
    compiled = program.compile(prune)
    solution = solve(compiled.problem, settings)
    certificate = compiled.certificate(solution) if solution.acceptable(settings.accept_tol) else None
    if certificate is not None and solution.status != "optimal":
        logger.warning(f"{program.name}: accepting inaccurate solution ({solution.status})")
    return SosResult(compiled, solution, certificate)
