"""Synthesis of value-function under- and over-approximations.

The under-approximation maximises the moment integral of J over X subject to
``d l + grad J . (n1 + n2 u) >= 0`` on X^h x U. The over-approximation
minimises it subject to the reversed inequality along a fixed saturating
controller, split into the saturation cases of every input coordinate.
Both require J(x_d) = 0 and J nonnegative on X^h.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np

from hjb.config import SimulationSettings, SolverSettings
from hjb.control import SaturatingController, ValueController
from hjb.dynamics import CostSpec, RationalControlAffineSystem, reduced_monomials
from hjb.errors import DegreeError, InitialControllerError, SynthesisError, UsageError
from hjb.models import SolverReport, ValueApproxModel, VerificationModel
from hjb.poly import MomentTable, Polynomial, PolynomialArray, Registry, SemialgebraicSet
from hjb.soscomp import Certificate, CompiledProgram, PolyExpr, SosProgram, SosResult, solve_program, verify
from lib.utils import roundup_even

logger = logging.getLogger(__name__)

Kind = Literal["under", "over"]


def _limits(bounds: np.ndarray) -> list[float | None]:
    return [float(b) if np.isfinite(b) else None for b in bounds]


def _bounds(limits: Sequence[float | None] | None, n_u: int, missing: float) -> np.ndarray:
    if limits is None:
        return np.full(n_u, missing)
    return np.array([missing if b is None else b for b in limits], dtype=float)


@dataclass(frozen=True, eq=False)
class ValueApprox:
    """A synthesized J together with how it was obtained."""

    J: Polynomial
    kind: Kind
    degree: int
    X: SemialgebraicSet
    Xh: SemialgebraicSet
    objective: float
    report: SolverReport
    verification: VerificationModel
    certificate: Certificate | None = None
    program: CompiledProgram | None = None
    initial_controller: SaturatingController | None = None
    seconds: float = 0.0

    def controller(self, system: RationalControlAffineSystem, cost: CostSpec) -> ValueController:
        return ValueController(self.J, system, cost.R)

    def to_model(self) -> ValueApproxModel:
        registry = self.J.registry
        return ValueApproxModel(
            kind=self.kind,
            degree=self.degree,
            variables=list(registry.names),
            circles=[list(c) for c in registry.circles],
            spheres=[list(s) for s in registry.spheres],
            J=self.J.to_text(),
            objective=self.objective,
            X=self.X.to_model(),
            Xh=self.Xh.to_model(),
            solver=self.report,
            verification=self.verification,
            initial_controller=self.initial_controller.to_text() if self.initial_controller else None,
            u_min=_limits(self.initial_controller.u_min) if self.initial_controller else None,
            u_max=_limits(self.initial_controller.u_max) if self.initial_controller else None,
        )

    @classmethod
    def from_model(cls, model: ValueApproxModel) -> ValueApprox:
        registry = Registry(
            tuple(model.variables), tuple(tuple(c) for c in model.circles), tuple(tuple(s) for s in model.spheres)
        )
        X = SemialgebraicSet.from_model(model.X)
        Xh = SemialgebraicSet.from_model(model.Xh)
        controller = None
        if model.initial_controller is not None:
            policy = tuple(Polynomial.parse(t, registry) for t in model.initial_controller)
            n_u = len(policy)
            controller = SaturatingController(
                policy, _bounds(model.u_min, n_u, -np.inf), _bounds(model.u_max, n_u, np.inf)
            )
        return cls(
            J=Polynomial.parse(model.J, registry),
            kind=model.kind,  # type: ignore[arg-type]
            degree=model.degree,
            X=X,
            Xh=Xh,
            objective=model.objective,
            report=model.solver,
            verification=model.verification,
            initial_controller=controller,
        )


def check_degree(degree: int) -> None:
    if degree < 2 or degree % 2:
        raise DegreeError(f"value function degree must be even and at least 2, got {degree}")


def input_box_inequalities(system: RationalControlAffineSystem, registry: Registry) -> list[Polynomial]:
    """``(u_j - u_max)(u_j - u_min) <= 0`` per input with finite limits, one-sided otherwise."""
    result = []
    for j in range(system.n_u):
        u = registry.variable(system.n_x + j)
        lo, hi = float(system.u_min[j]), float(system.u_max[j])
        if np.isfinite(lo) and np.isfinite(hi):
            result.append((u - hi) * (u - lo))
        elif np.isfinite(hi):
            result.append(u - hi)
        elif np.isfinite(lo):
            result.append(lo - u)
    return result


def value_decision(program: SosProgram, registry: Registry, x_d: np.ndarray, degree: int) -> PolyExpr:
    """Free J over the manifold-reduced monomials of `registry`, pinned to zero at the goal."""
    J = program.new_free_poly("J", monomials=reduced_monomials(registry, degree))
    point = np.concatenate([x_d, np.zeros(len(program.registry) - len(x_d))])
    program.add_equality(J.at_point(point), "J(x_d)")
    return J


def lie_derivative(J: PolyExpr, rows: Sequence[Polynomial]) -> PolyExpr:
    total = PolyExpr(J.registry)
    for i, row in enumerate(rows):
        total = total + J.differentiate(i) * row
    return total


def moment_objective(J: PolyExpr, X: SemialgebraicSet) -> PolyExpr:
    """Average of J over X (moments normalised by the region measure)."""
    table = MomentTable.build(X, J.terms)
    return J.integrate(table)


def _restrict(p: Polynomial, registry: Registry) -> Polynomial:
    """Drop trailing input indeterminates that ``p`` does not use."""
    if any(v >= len(registry) for v in p.variables):
        raise UsageError("value function depends on input variables")
    return Polynomial(registry, p.terms)


def timed_solve(program: SosProgram, settings: SolverSettings) -> tuple[SosResult, float]:
    start = time.perf_counter()
    result = solve_program(program, settings)
    return result, time.perf_counter() - start


def finish_value(
    result: SosResult,
    J: PolyExpr,
    name: str,
    registry: Registry,
    kind: Kind,
    degree: int,
    X: SemialgebraicSet,
    Xh: SemialgebraicSet,
    seconds: float,
    controller: SaturatingController | None = None,
) -> ValueApprox:
    assert result.certificate is not None
    verification = verify(result.program, result.certificate)
    value = _restrict(result.value(J), registry)
    objective = result.objective
    logger.info(
        f"{name}: {kind} J of degree {degree}, objective {objective:.6g}, "
        f"verified={verification.passed}, {seconds:.2f}s"
    )
    if not verification.passed:
        logger.warning(f"{name}: {kind} certificate failed verification")
    return ValueApprox(
        J=value,
        kind=kind,
        degree=degree,
        X=X,
        Xh=Xh,
        objective=objective,
        report=result.solution.report(result.program.problem),
        verification=verification,
        certificate=result.certificate,
        program=result.program,
        initial_controller=controller,
        seconds=seconds,
    )


def under_program(
    system: RationalControlAffineSystem,
    cost: CostSpec,
    X: SemialgebraicSet,
    Xh: SemialgebraicSet,
    degree: int,
    multiplier_degree: int | None = None,
) -> tuple[SosProgram, PolyExpr]:
    """Build (without solving) the under-approximation SOS program."""
    check_degree(degree)
    registry = system.xu_registry
    program = SosProgram(registry, f"{system.name}.under")
    J = value_decision(program, system.registry, system.x_d, degree)
    rows = system.numerators(registry)
    running = cost.running_polynomial(registry, system.n_x) * system.d.lift(registry)
    domain = Xh.lift(registry).with_constraints(inequalities=input_box_inequalities(system, registry))
    program.add_nonneg_on_set(lie_derivative(J, rows) + running, domain, multiplier_degree, "hjb")
    program.add_nonneg_on_set(J, Xh.lift(registry), multiplier_degree, "J>=0")
    program.set_objective(moment_objective(J, X), "max")
    return program, J


def synth_under(
    system: RationalControlAffineSystem,
    cost: CostSpec,
    X: SemialgebraicSet,
    Xh: SemialgebraicSet,
    degree: int,
    settings: SolverSettings | None = None,
    multiplier_degree: int | None = None,
) -> ValueApprox:
    settings = settings or SolverSettings()
    program, J = under_program(system, cost, X, Xh, degree, multiplier_degree)
    result, seconds = timed_solve(program, settings)
    if result.certificate is None:
        raise SynthesisError(f"{system.name}: under-approximation solve ended with {result.solution.status}")
    return finish_value(result, J, system.name, system.registry, "under", degree, X, Xh, seconds)


def _case_operand(
    J: PolyExpr,
    system: RationalControlAffineSystem,
    cost: CostSpec,
    inputs: Sequence[Polynomial],
) -> PolyExpr:
    """``d l(x, u) + grad J . (n1 + n2 u)`` with u replaced by polynomials in x."""
    registry = system.registry
    rows = []
    for i in range(system.n_x):
        row = system.n1[i]
        for j, u in enumerate(inputs):
            row = row + system.n2[i][j] * u
        rows.append(row)
    running = cost.q(registry)
    for j, u in enumerate(inputs):
        running = running + float(cost.R[j]) * u * u
    return lie_derivative(J, rows) + running * system.d


def saturation_cases(
    policy: Polynomial, u_min: float, u_max: float
) -> list[tuple[str, Polynomial | float, list[Polynomial]]]:
    """``(name, applied input, region inequalities <= 0)`` for one input coordinate."""
    if not np.isfinite(u_min) and not np.isfinite(u_max):
        return [("free", policy, [])]
    cases: list[tuple[str, Polynomial | float, list[Polynomial]]] = []
    if np.isfinite(u_min) and np.isfinite(u_max):
        cases.append(("linear", policy, [(policy - u_max) * (policy - u_min)]))
    elif np.isfinite(u_max):
        cases.append(("linear", policy, [policy - u_max]))
    else:
        cases.append(("linear", policy, [u_min - policy]))
    if np.isfinite(u_max):
        cases.append(("upper", u_max, [u_max - policy]))
    if np.isfinite(u_min):
        cases.append(("lower", u_min, [policy - u_min]))
    return cases


def over_program(
    system: RationalControlAffineSystem,
    cost: CostSpec,
    X: SemialgebraicSet,
    Xh: SemialgebraicSet,
    degree: int,
    controller: SaturatingController,
    multiplier_degree: int | None = None,
) -> tuple[SosProgram, PolyExpr]:
    """Build the over-approximation SOS program for a fixed saturating controller."""
    check_degree(degree)
    if controller.n_u != system.n_u:
        raise UsageError(f"controller has {controller.n_u} inputs, system has {system.n_u}")
    registry = system.registry
    program = SosProgram(registry, f"{system.name}.over")
    J = value_decision(program, system.registry, system.x_d, degree)
    policy = [p.lift(registry) for p in controller.policy]
    per_input = [
        saturation_cases(p, float(lo), float(hi)) for p, lo, hi in zip(policy, system.u_min, system.u_max, strict=True)
    ]

    if system.n_u <= 1:
        cases = per_input[0] if per_input else [("free", None, [])]
        for name, applied, region in cases:
            if applied is None:
                inputs = []
            else:
                inputs = [Polynomial.constant(registry, applied) if isinstance(applied, float) else applied]
            operand = _case_operand(J, system, cost, inputs)
            domain = Xh.with_constraints(inequalities=region)
            program.add_nonneg_on_set(-operand, domain, multiplier_degree, f"hjb.{name}")
    else:
        # decoupled per input: a + sum_j w_j <= 0 and phi_j(case) <= w_j on every case region
        base = _case_operand(J, system, cost, [Polynomial.zero(registry)] * system.n_u)
        grad_terms = [J.differentiate(i) for i in range(system.n_x)]
        phis: list[list[tuple[str, PolyExpr, list[Polynomial]]]] = []
        for j, cases in enumerate(per_input):
            entries = []
            for name, applied, region in cases:
                u = Polynomial.constant(registry, applied) if isinstance(applied, float) else applied
                phi = PolyExpr(registry)
                for i in range(system.n_x):
                    phi = phi + grad_terms[i] * (system.n2[i][j] * u)
                phi = phi + system.d * (float(cost.R[j]) * u * u)
                entries.append((name, phi, region))
            phis.append(entries)
        slack_degree = roundup_even(max(phi.degree for entries in phis for _, phi, _ in entries))
        slacks = [program.new_free_poly(f"w{j}", slack_degree) for j in range(system.n_u)]
        total = base
        for w in slacks:
            total = total + w
        program.add_nonneg_on_set(-total, Xh, multiplier_degree, "hjb.base")
        for j, entries in enumerate(phis):
            for name, phi, region in entries:
                program.add_nonneg_on_set(
                    slacks[j] - phi, Xh.with_constraints(inequalities=region), multiplier_degree, f"hjb.u{j}.{name}"
                )
    program.add_nonneg_on_set(J, Xh, multiplier_degree, "J>=0")
    program.set_objective(moment_objective(J, X), "min")
    return program, J


def synth_over(
    system: RationalControlAffineSystem,
    cost: CostSpec,
    X: SemialgebraicSet,
    Xh: SemialgebraicSet,
    degree: int,
    controller: SaturatingController,
    settings: SolverSettings | None = None,
    multiplier_degree: int | None = None,
) -> ValueApprox:
    settings = settings or SolverSettings()
    program, J = over_program(system, cost, X, Xh, degree, controller, multiplier_degree)
    result, seconds = timed_solve(program, settings)
    if result.certificate is None:
        raise InitialControllerError(str(result.solution.status))
    return finish_value(result, J, system.name, system.registry, "over", degree, X, Xh, seconds, controller)


def refine_over_with_under(
    system: RationalControlAffineSystem,
    cost: CostSpec,
    X: SemialgebraicSet,
    Xh: SemialgebraicSet,
    degree: int,
    under: ValueApprox | None = None,
    settings: SolverSettings | None = None,
    multiplier_degree: int | None = None,
) -> ValueApprox:
    """Over-approximation seeded with the clamped controller of an under-approximation."""
    if under is None:
        under = synth_under(system, cost, X, Xh, degree, settings, multiplier_degree)
    controller = ValueController(under.J, system, cost.R).saturating()
    return synth_over(system, cost, X, Xh, degree, controller, settings, multiplier_degree)


# -- sampled checks --------------------------------------------------------------


@dataclass(frozen=True)
class ResidualReport:
    values: np.ndarray
    scale: float

    @property
    def minimum(self) -> float:
        return float(np.min(self.values))

    @property
    def maximum(self) -> float:
        return float(np.max(self.values))


def _pointwise_minimum(
    J: Polynomial, system: RationalControlAffineSystem, cost: CostSpec, x: np.ndarray, grid: int
) -> np.ndarray:
    """min over u of the Hamiltonian, per input coordinate on a grid plus the clamped argmin."""
    grad = PolynomialArray(J.gradient())(x)
    drift = np.sum(grad * system.f1(x), axis=1)
    total = cost.running(x, np.zeros((len(x), system.n_u))) + drift
    if not system.n_u:
        return total
    gains = np.einsum("ni,nij->nj", grad, system.f2(x))
    argmin = ValueController(J, system, cost.R).eval_many(x)
    for j in range(system.n_u):
        candidates = [argmin[:, j : j + 1]]
        lo, hi = system.u_min[j], system.u_max[j]
        if np.isfinite(lo) and np.isfinite(hi):
            candidates.append(np.broadcast_to(np.linspace(lo, hi, grid), (len(x), grid)))
        u = np.concatenate(candidates, axis=1)
        total = total + np.min(cost.R[j] * u * u + gains[:, j : j + 1] * u, axis=1)
    return total


def under_residual(
    J: Polynomial, system: RationalControlAffineSystem, cost: CostSpec, samples: np.ndarray, grid: int = 21
) -> ResidualReport:
    """``min_u l + grad J . f`` at each sample; nonnegative for a valid under-approximation."""
    samples = np.atleast_2d(samples)
    values = _pointwise_minimum(J, system, cost, samples, grid)
    scale = 1.0 + float(np.max(np.abs(cost.running(samples, np.zeros((len(samples), system.n_u))))))
    return ResidualReport(values, scale)


def over_residual(
    J: Polynomial,
    system: RationalControlAffineSystem,
    cost: CostSpec,
    controller: SaturatingController,
    samples: np.ndarray,
) -> ResidualReport:
    """``l + grad J . f`` under the clamped controller; nonpositive for a valid over-approximation."""
    samples = np.atleast_2d(samples)
    u = controller.eval_many(samples)
    grad = PolynomialArray(J.gradient())(samples)
    values = cost.running(samples, u) + np.sum(grad * system.dynamics(samples, u), axis=1)
    scale = 1.0 + float(np.max(np.abs(cost.running(samples, u))))
    return ResidualReport(values, scale)


def precheck_controller(
    system: RationalControlAffineSystem,
    controller: SaturatingController,
    Xh: SemialgebraicSet,
    settings: SimulationSettings | None = None,
) -> float:
    """Fraction of sampled X^h starts that the controller brings to the goal."""
    from hjb.sim import simulate  # pylint: disable=import-outside-toplevel

    settings = settings or SimulationSettings()
    rng = np.random.default_rng(settings.seed)
    starts = Xh.sample(settings.precheck_samples, rng)
    converged = sum(simulate(system, controller, x0, settings, region=Xh).converged for x0 in starts)
    fraction = converged / len(starts)
    if fraction < 1.0:
        logger.warning(f"{system.name}: initial controller reaches the goal from {fraction:.0%} of sampled starts")
    return fraction
