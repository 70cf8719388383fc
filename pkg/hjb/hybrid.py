"""Planar pusher: a four-mode hybrid system with frictional contact.

State ``[px, py, x, y, s, c]``: pusher contact point in the slider frame,
slider position, and slider orientation on the unit circle. Mode k means the
pusher touches face k (1 left, 2 bottom, 3 right, 4 top). The continuous
input is ``[vn, vt]``: normal push and tangential pusher velocity along the
face. Quasi-static pushing with an ellipsoidal limit surface and unit
admittance makes the normal contact force equal to ``vn``; the tangential
force ``lt`` is an extra indeterminate restricted by Coulomb complementarity.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np
from scipy import optimize

from hjb.config import SolverSettings
from hjb.dynamics import CostSpec, Regions
from hjb.errors import SynthesisError, UsageError
from hjb.poly import MomentTable, Polynomial, PolynomialArray, Registry, SemialgebraicSet
from hjb.soscomp import PolyExpr, SosProgram
from hjb.synth import ValueApprox, check_degree, finish_value, lie_derivative, timed_solve, value_decision

logger = logging.getLogger(__name__)

Branch = Literal["stick", "slide+", "slide-"]
BRANCHES: tuple[Branch, ...] = ("stick", "slide+", "slide-")
STATE_NAMES = ("px", "py", "x", "y", "s", "c")
EXTRA_NAMES = ("vn", "vt", "lt", "qx", "qy")


@dataclass(frozen=True)
class Face:
    mode: int
    name: str
    axis: int
    """Pusher coordinate pinned on this face (0 for px, 1 for py)"""
    sign: float
    normal: tuple[float, float]
    """Inward unit normal: direction of the normal contact force"""
    tangent: tuple[float, float]


FACES = (
    Face(1, "left", 0, -1.0, (1.0, 0.0), (0.0, 1.0)),
    Face(2, "bottom", 1, -1.0, (0.0, 1.0), (-1.0, 0.0)),
    Face(3, "right", 0, 1.0, (-1.0, 0.0), (0.0, -1.0)),
    Face(4, "top", 1, 1.0, (0.0, -1.0), (1.0, 0.0)),
)


@dataclass(frozen=True)
class PusherParams:
    """Slider geometry, friction and actuation. Lengths in metres."""

    a: float = 0.05
    """Half side length of the square slider"""
    mu: float = 0.3
    c_ls: float | None = None
    """Limit-surface constant, defaults to 0.6 a"""
    vn_max: float = 0.5
    vt_max: float = 0.5
    epsilon_m: float | None = None
    """Smallest squared jump distance of the pusher, defaults to (0.05 a)^2"""
    allowed_faces: tuple[int, ...] = (1, 2, 3, 4)
    enforce_complementarity_equality: bool = True
    slider_bound: float = 0.3
    slider_bound_h: float = 0.4
    q_diag: tuple[float, ...] = (0.0, 0.0, 10.0, 10.0, 1.0, 1.0)
    r_diag: tuple[float, ...] = (1.0, 1.0)

    def __post_init__(self) -> None:
        if self.a <= 0 or self.mu < 0:
            raise UsageError("pusher needs a > 0 and mu >= 0")
        if not self.allowed_faces or any(k not in (1, 2, 3, 4) for k in self.allowed_faces):
            raise UsageError(f"allowed faces must be a non-empty subset of 1..4, got {self.allowed_faces}")
        if self.c_ls is None:
            object.__setattr__(self, "c_ls", 0.6 * self.a)
        if self.epsilon_m is None:
            object.__setattr__(self, "epsilon_m", (0.05 * self.a) ** 2)


@dataclass(frozen=True)
class ContactAction:
    mode: int
    branch: Branch
    vn: float
    vt: float
    lambda_t: float
    value: float
    """Minimised ``l + grad J . f`` at the state"""

    @property
    def lambda_n(self) -> float:
        return self.vn


@dataclass(frozen=True)
class SwitchAction:
    mode: int
    tau: float
    """Tangential coordinate of the new contact point on the target face"""
    target: np.ndarray
    jump_cost: float
    value: float
    """``l_m + J(target) - J(x)``"""


@dataclass(frozen=True)
class HybridAction:
    kind: Literal["continuous", "switch"]
    continuous: ContactAction
    switch: SwitchAction | None = None


@dataclass(frozen=True, eq=False)
class HybridPusherSystem:
    params: PusherParams = field(default_factory=PusherParams)
    name: str = "pusher"

    @cached_property
    def registry(self) -> Registry:
        return Registry(STATE_NAMES, circles=((4, 5),))

    @property
    def n_x(self) -> int:
        return len(STATE_NAMES)

    @property
    def x_d(self) -> np.ndarray:
        return np.array([-self.params.a, 0.0, 0.0, 0.0, 0.0, 1.0])

    @property
    def goal_indices(self) -> tuple[int, ...]:
        return (2, 3, 4, 5)

    @property
    def cost(self) -> CostSpec:
        return CostSpec.diagonal(self.params.q_diag, self.params.r_diag, self.x_d)

    @property
    def faces(self) -> list[Face]:
        return [f for f in FACES if f.mode in self.params.allowed_faces]

    @staticmethod
    def face(mode: int) -> Face:
        if mode not in (1, 2, 3, 4):
            raise UsageError(f"unknown pusher mode {mode}")
        return FACES[mode - 1]

    # -- geometry -----------------------------------------------------------

    def contact_point(self, mode: int, tau: float) -> np.ndarray:
        f = self.face(mode)
        point = tau * np.asarray(f.tangent)
        point[f.axis] = f.sign * self.params.a
        return point

    def tangential(self, x: np.ndarray, mode: int) -> float:
        return float(np.dot(np.asarray(x[:2]), self.face(mode).tangent))

    def on_face(self, x: np.ndarray, mode: int, tol: float = 1e-6) -> bool:
        f = self.face(mode)
        a = self.params.a
        return abs(x[f.axis] - f.sign * a) <= tol and abs(self.tangential(x, mode)) <= a + tol

    def mode_of(self, x: np.ndarray) -> int | None:
        for f in self.faces:
            if self.on_face(x, f.mode):
                return f.mode
        return None

    def square_equality(self, registry: Registry, first: int = 0) -> Polynomial:
        """``(px + a)(px - a)(py + a)(py - a)`` for the pusher coordinates at ``first``."""
        a = self.params.a
        px, py = registry.variable(first), registry.variable(first + 1)
        return (px + a) * (px - a) * (py + a) * (py - a)

    def regions(self) -> Regions:
        registry = self.registry
        a = self.params.a

        def region(bound: float) -> SemialgebraicSet:
            box = {"px": (-a, a), "py": (-a, a), "x": (-bound, bound), "y": (-bound, bound)}
            return SemialgebraicSet.box_set(registry, box, equalities=[self.square_equality(registry)])

        return Regions(region(self.params.slider_bound), region(self.params.slider_bound_h))

    def mode_domain(self, mode: int, region: SemialgebraicSet | None = None) -> SemialgebraicSet:
        """The face-k part of ``region`` (X^h by default) as a box with the pinned coordinate."""
        region = region or self.regions().Xh
        f = self.face(mode)
        value = f.sign * self.params.a
        equalities = [p for p in region.equalities if not p.allclose(self.square_equality(region.registry), 1e-12)]
        lower, upper = list(region.lower), list(region.upper)
        lower[f.axis] = upper[f.axis] = value
        equalities.append(region.registry.variable(f.axis) - value)
        return SemialgebraicSet(region.registry, tuple(equalities), region.inequalities, tuple(lower), tuple(upper))

    # -- continuous dynamics -----------------------------------------------

    def _twist(self, px, py, s, c, vn, vt, lt, f: Face):  # type: ignore[no-untyped-def]
        fx = vn * f.normal[0] + lt * f.tangent[0]
        fy = vn * f.normal[1] + lt * f.tangent[1]
        omega = (px * fy - py * fx) * (1.0 / self.params.c_ls**2)  # type: ignore[operator]
        return [
            vt * f.tangent[0],
            vt * f.tangent[1],
            c * fx - s * fy,
            s * fx + c * fy,
            c * omega,
            -1.0 * s * omega,
        ]

    def rows(self, mode: int, registry: Registry) -> list[Polynomial]:
        """Face-k vector field over a registry that appends ``vn, vt, lt`` to the state."""
        v = registry.variable
        return self._twist(v(0), v(1), v(4), v(5), v("vn"), v("vt"), v("lt"), self.face(mode))

    def dynamics(self, x: np.ndarray, mode: int, vn: float, vt: float, lt: float) -> np.ndarray:
        px, py, _, _, s, c = (float(v) for v in x)
        return np.array(self._twist(px, py, s, c, vn, vt, lt, self.face(mode)), dtype=float)

    def input_directions(self, x: np.ndarray, mode: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """The field is linear in ``(vn, lt, vt)``; returns its three columns at ``x``."""
        return (
            self.dynamics(x, mode, 1.0, 0.0, 0.0),
            self.dynamics(x, mode, 0.0, 0.0, 1.0),
            self.dynamics(x, mode, 0.0, 1.0, 0.0),
        )

    # -- jumps -------------------------------------------------------------

    def jump(self, x: np.ndarray, mode: int, tau: float) -> np.ndarray:
        """Relocate the pusher to face ``mode``; the slider stays where it is."""
        x_next = np.array(x, dtype=float)
        x_next[:2] = self.contact_point(mode, tau)
        return x_next

    @staticmethod
    def transition_cost(x: np.ndarray, x_next: np.ndarray) -> float:
        return float(np.sum((np.asarray(x_next[:2]) - np.asarray(x[:2])) ** 2))


def pusher(**overrides: float | tuple[int, ...] | bool) -> HybridPusherSystem:
    return HybridPusherSystem(PusherParams(**overrides))  # type: ignore[arg-type]


# -- friction set ----------------------------------------------------------------


def in_friction_set(vt: float, ln: float, lt: float, mu: float, tol: float = 1e-9) -> bool:
    cone = mu * mu * ln * ln - lt * lt
    return vt * lt <= tol and cone >= -tol and abs(cone * vt) <= tol


def classify_contact(vt: float, ln: float, lt: float, mu: float, tol: float = 1e-9) -> Branch | None:
    """Which friction branch a complementarity point belongs to, None outside the set."""
    if not in_friction_set(vt, ln, lt, mu, tol):
        return None
    if abs(vt) <= tol:
        return "stick"
    if vt > 0 and abs(lt + mu * ln) <= tol:
        return "slide+"
    if vt < 0 and abs(lt - mu * ln) <= tol:
        return "slide-"
    return None


def friction_constraints(
    registry: Registry, mu: float, equality: bool = True
) -> tuple[list[Polynomial], list[Polynomial]]:
    """``(equalities, inequalities <= 0)`` describing the complementarity set D."""
    vt, ln, lt = registry.variable("vt"), registry.variable("vn"), registry.variable("lt")
    cone = mu * mu * ln * ln - lt * lt
    equalities = [cone * vt] if equality else []
    return equalities, [vt * lt, -1.0 * cone]


# -- synthesis -------------------------------------------------------------------


def _face_objective(J: PolyExpr, system: HybridPusherSystem, X: SemialgebraicSet) -> PolyExpr:
    """Average of J over the faces of X (surface measure on the square boundary)."""
    total = PolyExpr(J.registry)
    measure = 0.0
    base = X.lift(J.registry)
    for f in system.faces:
        pinned = J.substitute({f.axis: f.sign * system.params.a})
        lower, upper = list(base.lower), list(base.upper)
        lower[f.axis], upper[f.axis] = 0.0, 1.0
        eqs = tuple(p for p in base.equalities if p.degree == 2)
        for k in range(len(system.registry), len(base.registry)):
            lower[k], upper[k] = 0.0, 1.0
        box = SemialgebraicSet(base.registry, eqs, (), tuple(lower), tuple(upper))
        table = MomentTable.build(box, pinned.terms)
        total = total + pinned.integrate(table, normalize=False)
        measure += table.measure
    return total * (1.0 / measure)


def _jump_domain(
    system: HybridPusherSystem, registry: Registry, source: Face, target: Face, Xh: SemialgebraicSet
) -> SemialgebraicSet:
    a = system.params.a
    lifted = system.mode_domain(source.mode, Xh).lift(registry)
    q = registry.index("qx") + target.axis
    other = registry.index("qx") + 1 - target.axis
    return lifted.with_constraints(
        equalities=[registry.variable(q) - target.sign * a],
        bounds={q: (target.sign * a, target.sign * a), other: (-a, a)},
    )


def synth_under_hybrid(
    system: HybridPusherSystem,
    degree: int = 2,
    settings: SolverSettings | None = None,
    multiplier_degree: int | None = None,
    regions: Regions | None = None,
) -> ValueApprox:
    """Under-approximation of the hybrid value function.

    One HJB constraint per allowed face over X_k x U x D, one jump constraint
    ``|q - p|^2 + J(q, slider) - J(p, slider) >= 0`` per ordered pair of faces,
    J nonnegative on X^h and pinned to zero at the goal.
    """
    check_degree(degree)
    settings = settings or SolverSettings()
    X, Xh = regions or system.regions()
    params = system.params
    registry = system.registry.extend(EXTRA_NAMES)
    program = SosProgram(registry, f"{system.name}.under")
    J = value_decision(program, system.registry, system.x_d, degree)

    vn, vt = registry.variable("vn"), registry.variable("vt")
    inputs = [(vn - params.vn_max) * vn, (vt - params.vt_max) * (vt + params.vt_max)]
    eqs, ineqs = friction_constraints(registry, params.mu, params.enforce_complementarity_equality)
    running = system.cost.running_polynomial(registry, system.n_x)
    for f in system.faces:
        face = system.mode_domain(f.mode, Xh).lift(registry)
        domain = face.with_constraints(equalities=eqs, inequalities=inputs + ineqs)
        operand = lie_derivative(J, system.rows(f.mode, registry)) + running
        program.add_nonneg_on_set(operand, domain, multiplier_degree, f"hjb.{f.name}")

    qx, qy = registry.variable("qx"), registry.variable("qy")
    px, py = registry.variable(0), registry.variable(1)
    jumped = J.substitute({0: qx, 1: qy})
    jump_cost = (qx - px) * (qx - px) + (qy - py) * (qy - py)
    for source in system.faces:
        for target in system.faces:
            domain = _jump_domain(system, registry, source, target, Xh)
            name = f"jump.{source.name}.{target.name}"
            program.add_nonneg_on_set(jump_cost + jumped - J, domain, multiplier_degree, name)

    for f in system.faces:
        program.add_nonneg_on_set(J, system.mode_domain(f.mode, Xh).lift(registry), multiplier_degree, f"J>=0.{f.name}")
    program.set_objective(_face_objective(J, system, X), "max")
    result, seconds = timed_solve(program, settings)
    if result.certificate is None:
        raise SynthesisError(f"{system.name}: hybrid under-approximation solve ended with {result.solution.status}")
    return finish_value(result, J, system.name, system.registry, "under", degree, X, Xh, seconds)


# -- online control --------------------------------------------------------------


def continuous_action(J: Polynomial, system: HybridPusherSystem, x: np.ndarray, mode: int) -> ContactAction:
    """Minimise ``l + grad J . f_k`` over the input box and the friction set.

    The field is linear in ``(vn, lt, vt)`` and the cost separable, so each
    friction branch reduces to clamped scalar quadratics.
    """
    x = np.asarray(x, dtype=float)
    if not system.on_face(x, mode):
        raise UsageError(f"state is not on face {mode} of the slider")
    params = system.params
    cost = system.cost
    rn, rt = (float(r) for r in cost.R)
    grad = PolynomialArray(J.gradient())(x)
    along_n, along_t, along_v = system.input_directions(x, mode)
    an, at, b = float(grad @ along_n), float(grad @ along_t), float(grad @ along_v)
    state_cost = float(cost.running(x, np.zeros(2)))

    def normal(linear: float) -> float:
        return float(np.clip(-linear / (2.0 * rn), 0.0, params.vn_max))

    candidates = []
    vn = normal(an - params.mu * abs(at))
    candidates.append(("stick", vn, 0.0, -params.mu * vn * np.sign(at)))
    vn = normal(an - params.mu * at)
    candidates.append(("slide+", vn, float(np.clip(-b / (2.0 * rt), 0.0, params.vt_max)), -params.mu * vn))
    vn = normal(an + params.mu * at)
    candidates.append(("slide-", vn, float(np.clip(-b / (2.0 * rt), -params.vt_max, 0.0)), params.mu * vn))

    best: ContactAction | None = None
    for branch, vn, vt, lt in candidates:
        value = state_cost + rn * vn * vn + rt * vt * vt + an * vn + at * lt + b * vt
        if best is None or value < best.value:
            best = ContactAction(mode, branch, vn, vt, float(lt), float(value))  # type: ignore[arg-type]
    assert best is not None
    return best


NetCost = Callable[[float, int], tuple[float, float, np.ndarray]]
"""Net switch cost, jump cost and target state for a contact parameter on a face"""


def _exclusion_edges(system: HybridPusherSystem, x: np.ndarray, mode: int, a: float) -> list[float]:
    """Contact parameters on face ``mode`` where the jump length equals epsilon_m."""
    origin = system.contact_point(mode, 0.0)
    direction = system.contact_point(mode, 1.0) - origin
    offset = origin - np.asarray(x[:2], dtype=float)
    roots = np.roots([direction @ direction, 2.0 * direction @ offset, offset @ offset - system.params.epsilon_m])
    return [float(r.real) for r in roots if abs(r.imag) < 1e-12 and -a <= r.real <= a]


def _quadratic_switch(net: NetCost, system: HybridPusherSystem, x: np.ndarray, mode: int) -> float | None:
    """Exact minimiser of a net switch cost that is quadratic in tau, outside the epsilon_m disc."""
    a = system.params.a
    low, mid, high = (net(t, mode)[0] for t in (-a, 0.0, a))
    curvature = (high + low - 2.0 * mid) / (2.0 * a * a)
    slope = (high - low) / (2.0 * a)
    taus = [-a, a, *_exclusion_edges(system, x, mode, a)]
    if curvature > 0:
        taus.append(float(np.clip(-slope / (2.0 * curvature), -a, a)))
    allowed = [t for t in taus if net(t, mode)[1] >= system.params.epsilon_m * (1.0 - 1e-9)]
    return min(allowed, key=lambda t: net(t, mode)[0], default=None)


def mode_switch_action(
    J: Polynomial, system: HybridPusherSystem, x: np.ndarray, grid: int = 101
) -> SwitchAction | None:
    """Best face and contact point to jump to, or None when every target is closer than epsilon_m.

    A J of degree at most two makes the net cost quadratic along each face and the
    clamped critical point is used; otherwise a grid search is refined locally.
    """
    x = np.asarray(x, dtype=float)
    params = system.params
    a = params.a
    here = float(J.evaluate(x))
    best: SwitchAction | None = None

    def net(tau: float, mode: int) -> tuple[float, float, np.ndarray]:
        target = system.jump(x, mode, tau)
        jump = system.transition_cost(x, target)
        return jump + float(J.evaluate(target)) - here, jump, target

    for f in system.faces:
        if J.degree <= 2:
            exact = _quadratic_switch(net, system, x, f.mode)
            if exact is None:
                continue
            value, jump, target = net(exact, f.mode)
            if best is None or value < best.value:
                best = SwitchAction(f.mode, exact, target, jump, value)
            continue

        taus = np.linspace(-a, a, grid)
        targets = np.tile(x, (grid, 1))
        targets[:, :2] = np.stack([system.contact_point(f.mode, t) for t in taus])
        jumps = np.sum((targets[:, :2] - x[:2]) ** 2, axis=1)
        values = jumps + np.asarray(J.evaluate(targets)) - here
        values[jumps < params.epsilon_m] = np.inf
        k = int(np.argmin(values))
        if not np.isfinite(values[k]):
            continue
        tau = float(taus[k])
        step = 2 * a / (grid - 1)

        def penalised(t: float, mode: int = f.mode, floor: float = float(values[k])) -> float:
            value, jump, _ = net(t, mode)
            return value if jump >= params.epsilon_m else floor + 1.0

        refined = optimize.minimize_scalar(
            penalised, bounds=(max(-a, tau - step), min(a, tau + step)), method="bounded"
        )
        value, jump, target = net(float(refined.x), f.mode)
        if jump < params.epsilon_m or value > values[k]:
            value, jump, target = net(tau, f.mode)
        else:
            tau = float(refined.x)
        if best is None or value < best.value:
            best = SwitchAction(f.mode, tau, target, jump, value)
    return best


def switch_hysteresis(J: Polynomial, x: np.ndarray) -> float:
    return 1e-3 * (1.0 + abs(float(J.evaluate(x))))


def hybrid_policy_step(J: Polynomial, system: HybridPusherSystem, x: np.ndarray, mode: int) -> HybridAction:
    """Jump when the net value change of the best switch beats the continuous action by the hysteresis margin."""
    continuous = continuous_action(J, system, x, mode)
    switch = mode_switch_action(J, system, x)
    if switch is not None and switch.value - continuous.value < -switch_hysteresis(J, x):
        logger.debug(f"switch to face {switch.mode} at tau={switch.tau:.4f} (value {switch.value:.4g})")
        return HybridAction("switch", continuous, switch)
    return HybridAction("continuous", continuous, switch)
