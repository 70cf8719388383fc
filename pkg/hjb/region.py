"""Regional analysis of synthesized value functions.

Three certificates are produced: the guaranteed-performance region of an
over-approximation (boundary minimum of J over X), the region where an
under-approximation acts as a Lyapunov function (bisection on an SOS
feasibility program) and an inner estimate of the region of attraction.
"""

from __future__ import annotations

import itertools
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import pandas as pd
from scipy import ndimage, optimize

from hjb.config import RegionSettings, SolverSettings
from hjb.control import SaturatingController
from hjb.dynamics import RationalControlAffineSystem
from hjb.errors import UsageError
from hjb.models import RegionCertificateModel
from hjb.poly import Polynomial, PolynomialArray, Registry, SemialgebraicSet, monomials_up_to
from hjb.soscomp import SosProgram, solve_program
from hjb.synth import saturation_cases

logger = logging.getLogger(__name__)

RegionKind = Literal["rogcp-over", "rogcp-under", "roa"]


@dataclass(frozen=True, eq=False)
class RegionCertificate:
    """A certified sublevel set ``{J < level}`` (its component holding x_d)."""

    kind: RegionKind
    J: Polynomial
    level: float
    feasible: bool
    multiplier: Polynomial | None = None
    epsilon: float | None = None
    m_basis: tuple[Polynomial, ...] | None = None
    exponent: int | None = None
    sos_lower_bound: float | None = None
    trace: list[tuple[float, bool]] = field(default_factory=list)
    diagnostic: str = ""

    def contains(self, x: np.ndarray) -> np.ndarray | bool:
        values = np.asarray(self.J.evaluate(x))
        inside = values < self.level
        return bool(inside) if inside.ndim == 0 else inside

    def to_model(self) -> RegionCertificateModel:
        return RegionCertificateModel(
            kind=self.kind,
            level=self.level,
            feasible=self.feasible,
            multiplier=self.multiplier.to_text() if self.multiplier is not None else None,
            epsilon=self.epsilon,
            m_basis=[m.to_text() for m in self.m_basis] if self.m_basis is not None else None,
            exponent=self.exponent,
            sos_lower_bound=self.sos_lower_bound,
            trace=list(self.trace),
            diagnostic=self.diagnostic,
        )


# -- boundary minimum ------------------------------------------------------------


def boundary_faces(X: SemialgebraicSet) -> list[tuple[int, str, float]]:
    """Box faces of X, including bounds that cut a circle or sphere."""
    faces = [(i, side, X.lower[i] if side == "lower" else X.upper[i]) for i, side in X.boundary_faces()]
    for i in sorted(X.registry.manifold_vars):
        if -1.0 < X.lower[i] < X.upper[i]:
            faces.append((i, "lower", X.lower[i]))
        if X.lower[i] < X.upper[i] < 1.0:
            faces.append((i, "upper", X.upper[i]))
    return faces


def _group_of(registry: Registry, i: int) -> tuple[int, ...] | None:
    for group in registry.manifold_groups:
        if i in group:
            return group
    return None


def face_samples(X: SemialgebraicSet, i: int, value: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Points of X with coordinate ``i`` pinned to ``value``."""
    lower, upper = list(X.lower), list(X.upper)
    group = _group_of(X.registry, i)
    if group is None:
        lower[i] = upper[i] = value
    else:
        lower[i], upper[i] = -1.0, 1.0
    base = SemialgebraicSet(X.registry, X.equalities, X.inequalities, tuple(lower), tuple(upper))
    points = base.sample(n, rng)
    if group is not None:
        others = [g for g in group if g != i]
        points[:, i] = value
        norm = np.linalg.norm(points[:, others], axis=1, keepdims=True)
        points[:, others] *= np.sqrt(max(0.0, 1.0 - value * value)) / np.where(norm > 0, norm, 1.0)
        points = points[X.contains(points, tol=1e-7)]
    return points


def _polish(J: Polynomial, X: SemialgebraicSet, x0: np.ndarray, pinned: int) -> np.ndarray:
    """Local L-BFGS-B descent of J over the free box coordinates of a face."""
    free = [
        k
        for k in range(len(X.registry))
        if k != pinned and k not in X.registry.manifold_vars and X.lower[k] < X.upper[k]
    ]
    if not free:
        return x0
    gradient = PolynomialArray([J.differentiate(k) for k in free])

    def full(z: np.ndarray) -> np.ndarray:
        x = np.array(x0)
        x[free] = z
        return x

    def objective(z: np.ndarray) -> tuple[float, np.ndarray]:
        x = full(z)
        return float(J.evaluate(x)), np.asarray(gradient(x), dtype=float)

    bounds = [(X.lower[k], X.upper[k]) for k in free]
    result = optimize.minimize(objective, x0[free], jac=True, method="L-BFGS-B", bounds=bounds)
    candidate = full(result.x)
    return candidate if X.contains(candidate, tol=1e-7) else x0


def boundary_minimum(
    J: Polynomial, X: SemialgebraicSet, samples_per_face: int, rng: np.random.Generator
) -> tuple[float, np.ndarray | None]:
    """Sampled-and-polished ``min J`` over the boundary of X, with its minimiser."""
    faces = boundary_faces(X)
    if not faces:
        raise UsageError("region has no finite boundary faces")
    best, argmin = np.inf, None
    for i, side, value in faces:
        points = face_samples(X, i, value, samples_per_face, rng)
        if not len(points):
            logger.debug(f"face {X.registry.names[i]}={value} ({side}) yielded no samples")
            continue
        values = np.asarray(J.evaluate(points))
        k = int(np.argmin(values))
        x = _polish(J, X, points[k], i)
        face_min = min(float(values[k]), float(J.evaluate(x)))
        logger.debug(f"face {X.registry.names[i]}={value:g}: min J = {face_min:.6g}")
        if face_min < best:
            best, argmin = face_min, x
    return best, argmin


def boundary_lower_bound(J: Polynomial, X: SemialgebraicSet, settings: SolverSettings | None = None) -> float | None:
    """SOS lower bound of J over the boundary: the smallest face value of ``max g s.t. J - g >= 0``."""
    bound = np.inf
    for i, side, value in boundary_faces(X):
        program = SosProgram(X.registry, f"boundary.{X.registry.names[i]}.{side}")
        gamma = program.new_free_poly("gamma", 0)
        face = X.with_constraints(bounds={i: (value, value)}, equalities=[X.registry.variable(i) - value])
        program.add_nonneg_on_set(J - gamma, face, name="J-gamma")
        program.set_objective(gamma, "max")
        result = solve_program(program, settings)
        if result.certificate is None:
            logger.warning(f"SOS boundary bound failed on face {X.registry.names[i]} ({result.solution.status})")
            return None
        bound = min(bound, result.objective)
    return float(bound)


def rogcp_over(
    J: Polynomial,
    X: SemialgebraicSet,
    settings: RegionSettings | None = None,
    solver: SolverSettings | None = None,
    seed: int = 0,
) -> RegionCertificate:
    settings = settings or RegionSettings()
    rng = np.random.default_rng(seed)
    level, _ = boundary_minimum(J, X, settings.samples_per_face, rng)
    sos_bound = boundary_lower_bound(J, X, solver) if settings.sos_boundary_bound else None
    feasible = level > 0
    diagnostic = ""
    if not feasible:
        diagnostic = f"boundary minimum {level:.3g} is not positive; the sublevel set is empty"
        logger.warning(diagnostic)
    else:
        logger.info(f"guaranteed-performance level of the over-approximation: {level:.6g}")
    return RegionCertificate("rogcp-over", J, float(level), feasible, sos_lower_bound=sos_bound, diagnostic=diagnostic)


# -- bisection programs ----------------------------------------------------------


ClosedLoopCase = tuple[str, Polynomial, list[Polynomial]]


def closed_loop_cases(
    J: Polynomial, system: RationalControlAffineSystem, controller: SaturatingController | None
) -> list[ClosedLoopCase]:
    """``(name, grad J . (n1 + n2 u), region <= 0)`` per joint saturation case."""
    registry = system.registry
    gradient = J.gradient()
    if controller is None or not system.n_u:
        numerator = Polynomial.zero(registry)
        for i, g in enumerate(gradient):
            numerator = numerator + g * system.n1[i]
        return [("autonomous", numerator, [])]
    per_input = [
        saturation_cases(p.lift(registry), float(lo), float(hi))
        for p, lo, hi in zip(controller.policy, controller.u_min, controller.u_max, strict=True)
    ]
    cases = []
    for combo in itertools.product(*per_input):
        inputs = [Polynomial.constant(registry, u) if isinstance(u, float) else u for _, u, _ in combo]
        numerator = Polynomial.zero(registry)
        for i, g in enumerate(gradient):
            row = system.n1[i]
            for j, u in enumerate(inputs):
                row = row + system.n2[i][j] * u
            numerator = numerator + g * row
        name = "/".join(c[0] for c in combo)
        cases.append((name, numerator, [q for c in combo for q in c[2]]))
    return cases


def bisect(
    check: Callable[[float], tuple[bool, Polynomial | None]],
    upper: float,
    settings: RegionSettings,
) -> tuple[float | None, Polynomial | None, list[tuple[float, bool]]]:
    """Largest level in ``(0, upper]`` accepted by ``check``; feasibility is assumed monotone."""
    trace: list[tuple[float, bool]] = []
    ok, multiplier = check(upper)
    trace.append((upper, ok))
    if ok:
        return upper, multiplier, trace
    lo, hi = 0.0, upper
    best: float | None = None
    best_multiplier = None
    for _ in range(settings.bisection_iterations):
        if best is not None and hi - lo <= settings.bisection_rel_tol * hi:
            break
        mid = 0.5 * (lo + hi)
        ok, multiplier = check(mid)
        trace.append((mid, ok))
        logger.debug(f"bisection level {mid:.6g}: {'feasible' if ok else 'infeasible'}")
        if ok:
            lo, best, best_multiplier = mid, mid, multiplier
        else:
            hi = mid
    return best, best_multiplier, trace


def m_basis(registry: Registry, degree: int) -> tuple[Polynomial, ...]:
    """Non-constant monomials up to ``degree`` used in the decrease margin."""
    return tuple(
        Polynomial.from_monomial(registry, m) for m in monomials_up_to(range(len(registry)), degree) if m.degree
    )


def _margin(registry: Registry, basis: Sequence[Polynomial], x_d: np.ndarray) -> Polynomial:
    total = Polynomial.zero(registry)
    for m in basis:
        shifted = m - float(m.evaluate(x_d))
        total = total + shifted * shifted
    return total


def rogcp_under(
    J: Polynomial,
    system: RationalControlAffineSystem,
    controller: SaturatingController | None,
    X: SemialgebraicSet,
    settings: RegionSettings | None = None,
    solver: SolverSettings | None = None,
    epsilon: float | None = None,
    seed: int = 0,
) -> RegionCertificate:
    """Largest level where J decreases with margin along the clamped closed loop inside X."""
    settings = settings or RegionSettings()
    epsilon = settings.epsilon if epsilon is None else epsilon
    if epsilon <= 0:
        raise UsageError(f"decrease margin epsilon must be positive, got {epsilon}")
    registry = system.registry
    basis = m_basis(registry, settings.m_degree)
    margin = _margin(registry, basis, system.x_d) * system.d
    cases = closed_loop_cases(J, system, controller)
    faces = boundary_faces(X)
    upper, _ = boundary_minimum(J, X, settings.samples_per_face, np.random.default_rng(seed))

    def check(level: float) -> tuple[bool, Polynomial | None]:
        program = SosProgram(registry, f"rogcp_under@{level:.6g}")
        for i, side, value in faces:
            face = X.with_constraints(bounds={i: (value, value)}, equalities=[registry.variable(i) - value])
            program.add_nonneg_on_set(J - level, face, name=f"boundary.{registry.names[i]}.{side}")
        lam = program.new_sos_poly("lambda", settings.lambda_degree)
        for name, numerator, region in cases:
            operand = lam * (J - level) - numerator - epsilon * margin
            program.add_nonneg_on_set(operand, X.with_constraints(inequalities=region), name=f"decrease.{name}")
        result = solve_program(program, solver)
        if result.certificate is None:
            return False, None
        return True, result.value(lam)

    if upper <= 0:
        return RegionCertificate(
            "rogcp-under", J, 0.0, False, epsilon=epsilon, m_basis=basis, diagnostic="boundary minimum is not positive"
        )
    level, multiplier, trace = bisect(check, upper, settings)
    if level is None:
        diagnostic = "no positive level certified; J is not a local Lyapunov function at this degree"
        logger.warning(diagnostic)
        return RegionCertificate(
            "rogcp-under", J, 0.0, False, epsilon=epsilon, m_basis=basis, trace=trace, diagnostic=diagnostic
        )
    logger.info(f"under-approximation Lyapunov level: {level:.6g} (boundary minimum {upper:.6g})")
    return RegionCertificate(
        "rogcp-under", J, level, True, multiplier=multiplier, epsilon=epsilon, m_basis=basis, trace=trace
    )


def roa(
    J: Polynomial,
    system: RationalControlAffineSystem,
    controller: SaturatingController | None,
    settings: RegionSettings | None = None,
    solver: SolverSettings | None = None,
    upper: float | None = None,
) -> RegionCertificate:
    """Inner estimate of the region of attraction as a certified sublevel set of J.

    For a fixed level the program asks for a free ``lambda`` with
    ``|x - x_d|^(2k) (J - level) + lambda * grad J . f >= 0`` on every
    saturation case of the controller.
    """
    settings = settings or RegionSettings()
    registry = system.registry
    exponent = settings.roa_exponent
    if exponent < 1:
        raise UsageError("region-of-attraction exponent must be a positive integer")
    distance = Polynomial.zero(registry)
    for i in range(system.n_x):
        shifted = registry.variable(i) - float(system.x_d[i])
        distance = distance + shifted * shifted
    weight = distance**exponent
    cases = closed_loop_cases(J, system, controller)
    manifold = SemialgebraicSet(registry, tuple(registry.manifold_equalities()))

    def check(level: float) -> tuple[bool, Polynomial | None]:
        program = SosProgram(registry, f"roa@{level:.6g}")
        lam = program.new_free_poly("lambda", settings.lambda_degree)
        for name, numerator, region in cases:
            operand = lam * numerator + weight * (J - level)
            program.add_nonneg_on_set(operand, manifold.with_constraints(inequalities=region), name=f"roa.{name}")
        result = solve_program(program, solver)
        if result.certificate is None:
            return False, None
        return True, result.value(lam)

    top = settings.rho_max if upper is None else upper
    level, multiplier, trace = bisect(check, top, settings)
    if level is None:
        diagnostic = "no positive level certified for the region of attraction"
        logger.warning(diagnostic)
        return RegionCertificate("roa", J, 0.0, False, exponent=exponent, trace=trace, diagnostic=diagnostic)
    if level == top:
        logger.info(f"region-of-attraction level reached the bracket maximum {top:g}")
    logger.info(f"region-of-attraction level: {level:.6g}")
    return RegionCertificate("roa", J, level, True, multiplier=multiplier, exponent=exponent, trace=trace)


# -- sample clouds ---------------------------------------------------------------


@dataclass(frozen=True)
class _Chart:
    """Grid coordinates: one per bounded plain variable, one angle per circle."""

    registry: Registry
    plain: list[int]
    circles: list[tuple[int, int]]
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def of(cls, region: SemialgebraicSet) -> _Chart:
        plain = [i for i in range(len(region.registry)) if i not in region.registry.manifold_vars]
        circles = list(region.registry.circles)
        lower = [region.lower[i] for i in plain] + [-np.pi] * len(circles)
        upper = [region.upper[i] for i in plain] + [np.pi] * len(circles)
        return cls(region.registry, plain, circles, np.array(lower), np.array(upper))

    @property
    def dimension(self) -> int:
        return len(self.plain) + len(self.circles)

    def to_state(self, params: np.ndarray) -> np.ndarray:
        x = np.zeros((len(params), len(self.registry)))
        x[:, self.plain] = params[:, : len(self.plain)]
        for k, (s, c) in enumerate(self.circles):
            angle = params[:, len(self.plain) + k]
            x[:, s], x[:, c] = np.sin(angle), np.cos(angle)
        return x

    def to_params(self, x: np.ndarray) -> np.ndarray:
        angles = [np.arctan2(x[s], x[c]) for s, c in self.circles]
        return np.concatenate([x[self.plain], np.array(angles)])


def sublevel_cloud(
    J: Polynomial,
    level: float,
    region: SemialgebraicSet,
    x_d: np.ndarray,
    budget: int = 200_000,
    seed: int = 0,
) -> np.ndarray:
    """Grid points of ``{J < level}`` inside ``region`` connected to the goal.

    Regions with spheres are sampled instead, without the connectivity filter.
    """
    chart = _Chart.of(region)
    if region.registry.spheres or not np.all(np.isfinite(chart.lower)) or not np.all(np.isfinite(chart.upper)):
        points = region.sample(budget, np.random.default_rng(seed))
        return points[np.asarray(J.evaluate(points)) < level]
    per_axis = max(3, int(budget ** (1.0 / chart.dimension)))
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(chart.lower, chart.upper, strict=True)]
    params = np.stack([g.reshape(-1) for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    states = chart.to_state(params)
    mask = (np.asarray(J.evaluate(states)) < level) & region.contains(states, tol=1e-7)
    labels, count = ndimage.label(mask.reshape((per_axis,) * chart.dimension))
    if not count:
        return np.zeros((0, len(region.registry)))
    goal = chart.to_params(np.asarray(x_d, dtype=float))
    index = tuple(int(np.argmin(np.abs(axis - g))) for axis, g in zip(axes, goal, strict=True))
    label = labels[index]
    if label == 0:
        logger.warning("goal is outside the sublevel set; no connected component reported")
        return np.zeros((0, len(region.registry)))
    return states[labels.reshape(-1) == label]


def slice_grid(
    region: SemialgebraicSet, x_d: np.ndarray, axes: Sequence[str], grid: int
) -> tuple[np.ndarray, np.ndarray]:
    """A 2-D slice through the goal: returns (slice parameters, states).

    An axis naming the first coordinate of a circle pair sweeps its angle over
    [-pi, pi]; other axes sweep their box bounds. The remaining coordinates
    stay at the goal.
    """
    if len(axes) != 2:
        raise UsageError("a slice needs exactly two axes")
    registry = region.registry
    circle_of = {s: (s, c) for s, c in registry.circles}
    ranges = []
    for name in axes:
        i = registry.index(name)
        if i in circle_of:
            ranges.append(np.linspace(-np.pi, np.pi, grid))
        elif i in registry.manifold_vars:
            raise UsageError(f"axis {name} is constrained by a manifold; use the first coordinate of its circle")
        elif not (np.isfinite(region.lower[i]) and np.isfinite(region.upper[i])):
            raise UsageError(f"axis {name} is unbounded")
        else:
            ranges.append(np.linspace(region.lower[i], region.upper[i], grid))
    a, b = np.meshgrid(*ranges, indexing="ij")
    params = np.stack([a.reshape(-1), b.reshape(-1)], axis=1)
    states = np.tile(np.asarray(x_d, dtype=float), (len(params), 1))
    for k, name in enumerate(axes):
        i = registry.index(name)
        if i in circle_of:
            s, c = circle_of[i]
            states[:, s], states[:, c] = np.sin(params[:, k]), np.cos(params[:, k])
        else:
            states[:, i] = params[:, k]
    return params, states


def gap_slice(
    under: Polynomial, over: Polynomial, region: SemialgebraicSet, x_d: np.ndarray, axes: Sequence[str], grid: int = 50
) -> pd.DataFrame:
    """Relative gap ``(J_over - J_under) / J_over`` on a 2-D slice through the goal."""
    params, states = slice_grid(region, x_d, axes, grid)
    lo = np.asarray(under.evaluate(states))
    hi = np.asarray(over.evaluate(states))
    with np.errstate(divide="ignore", invalid="ignore"):
        gap = np.where(np.abs(hi) > 1e-12, (hi - lo) / hi, 0.0)
    return pd.DataFrame(
        {axes[0]: params[:, 0], axes[1]: params[:, 1], "J_under": lo, "J_over": hi, "relative_gap": gap}
    )
