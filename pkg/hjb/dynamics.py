"""Rational control-affine systems, recast benchmarks and LQR seeding.

A system is ``xdot = (n1(x) + n2(x) u) / d(x)`` over a variable registry whose
circle pairs and 3-sphere quadruples carry the recast trigonometric and
quaternion coordinates. Every benchmark constructor returns a
:class:`Benchmark` named tuple ``(system, cost, regions)``.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, NamedTuple

import numpy as np
import scipy.linalg as sla
from scipy.spatial.transform import Rotation

from hjb.control import SaturatingController
from hjb.errors import SynthesisError, UsageError
from hjb.poly import Monomial, Polynomial, PolynomialArray, Registry, SemialgebraicSet, monomials_up_to
from lib.utils import make_rng

logger = logging.getLogger(__name__)

NEWTON_KLEINMAN_ITERATIONS = 50


@dataclass(frozen=True, eq=False)
class RationalControlAffineSystem:
    """Dynamics ``(n1 + n2 u) / d`` with manifold equalities taken from the registry."""

    name: str
    registry: Registry
    n1: tuple[Polynomial, ...]
    n2: tuple[tuple[Polynomial, ...], ...]
    """Row per state, column per input"""
    d: Polynomial
    u_min: np.ndarray
    u_max: np.ndarray
    x_d: np.ndarray
    input_names: tuple[str, ...] = ()
    input_offset: np.ndarray | None = None
    """Constant added to the input to obtain physical actuator values (rotor thrust at hover)"""
    goal_indices: tuple[int, ...] | None = None
    """State coordinates checked for convergence; all of them when None"""
    parameters: Mapping[str, float] = field(default_factory=dict)
    to_recast_fn: Callable[[np.ndarray], np.ndarray] | None = None
    from_recast_fn: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self) -> None:
        n = len(self.registry)
        if len(self.n1) != n or len(self.n2) != n:
            raise UsageError(f"{self.name}: dynamics need one row per state ({n})")
        n_u = len(self.input_names)
        if any(len(row) != n_u for row in self.n2):
            raise UsageError(f"{self.name}: n2 rows must have {n_u} columns")
        for name in ("u_min", "u_max", "x_d"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        if len(self.u_min) != n_u or len(self.u_max) != n_u or np.any(self.u_min > self.u_max):
            raise UsageError(f"{self.name}: input box must have {n_u} ordered entries")
        if len(self.x_d) != n:
            raise UsageError(f"{self.name}: goal must have {n} entries")
        offset = np.zeros(n_u) if self.input_offset is None else np.asarray(self.input_offset, dtype=float)
        object.__setattr__(self, "input_offset", offset)

    @property
    def n_x(self) -> int:
        return len(self.registry)

    @property
    def n_u(self) -> int:
        return len(self.input_names)

    @property
    def manifold_equalities(self) -> list[Polynomial]:
        return self.registry.manifold_equalities()

    @cached_property
    def xu_registry(self) -> Registry:
        """State registry extended with the input indeterminates."""
        return self.registry.extend(self.input_names)

    def numerators(self, registry: Registry | None = None) -> list[Polynomial]:
        """``n1 + n2 u`` per state row, as polynomials in (x, u)."""
        registry = registry or self.xu_registry
        inputs = [registry.variable(self.n_x + j) for j in range(self.n_u)]
        rows = []
        for i in range(self.n_x):
            row = self.n1[i].lift(registry)
            for j in range(self.n_u):
                row = row + self.n2[i][j].lift(registry) * inputs[j]
            rows.append(row)
        return rows

    # -- numeric evaluation ------------------------------------------------------

    @cached_property
    def _n1_array(self) -> PolynomialArray:
        return PolynomialArray(list(self.n1))

    @cached_property
    def _n2_array(self) -> PolynomialArray | None:
        if not self.n_u:
            return None
        return PolynomialArray([p for row in self.n2 for p in row], (self.n_x, self.n_u))

    def denominator(self, x: Any) -> Any:
        return self.d.evaluate(x)

    def f1(self, x: np.ndarray) -> np.ndarray:
        return self._n1_array(x) / np.expand_dims(self.d.evaluate(x), -1)

    def f2(self, x: np.ndarray) -> np.ndarray:
        """Input matrix ``n2 / d``; shape (n_x, n_u) or (N, n_x, n_u)."""
        if self._n2_array is None:
            shape = (self.n_x, 0) if np.ndim(x) == 1 else (len(x), self.n_x, 0)
            return np.zeros(shape)
        d = np.asarray(self.d.evaluate(x))
        return self._n2_array(x) / d[..., None, None]

    def n2_matrix(self, x: np.ndarray) -> np.ndarray:
        if self._n2_array is None:
            return np.zeros((self.n_x, 0))
        return self._n2_array(x)

    def dynamics(self, x: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
        """``xdot`` at a point, or at every row of a batch of states and inputs."""
        x = np.asarray(x, dtype=float)
        value = self._n1_array(x)
        if self.n_u:
            u = np.asarray(u, dtype=float)
            gain = self._n2_array(x)
            value = value + (gain @ u[..., None])[..., 0]
        return value / np.expand_dims(np.asarray(self.d.evaluate(x)), -1)

    def is_equilibrium(self, x: np.ndarray, u: np.ndarray | None = None, tol: float = 1e-12) -> bool:
        u = np.zeros(self.n_u) if u is None else u
        return bool(np.linalg.norm(self.dynamics(x, u)) <= tol)

    def check_denominator(self, region: SemialgebraicSet, n: int = 10_000, seed: int = 0) -> float:
        """Smallest sampled d(x) on ``region``; raises if it is not positive."""
        if self.d.degree == 0:
            smallest = self.d.coefficient(Monomial())
        else:
            smallest = float(np.min(self.d.evaluate(region.sample(n, make_rng(seed)))))
        if smallest <= 0:
            raise UsageError(f"{self.name}: denominator d(x) reaches {smallest:.3g} on the region")
        return smallest

    def manifold_drift(self) -> list[Polynomial]:
        """Time derivative of every manifold equality along the numerators."""
        rows = self.numerators()
        drift = []
        for h in self.manifold_equalities:
            lifted = h.lift(self.xu_registry)
            total = Polynomial.zero(self.xu_registry)
            for i, row in enumerate(rows):
                total = total + lifted.differentiate(i) * row
            drift.append(total)
        return drift

    def to_recast(self, minimal: np.ndarray) -> np.ndarray:
        if self.to_recast_fn is None:
            return np.asarray(minimal, dtype=float)
        return self.to_recast_fn(np.asarray(minimal, dtype=float))

    def from_recast(self, x: np.ndarray) -> np.ndarray:
        if self.from_recast_fn is None:
            return np.asarray(x, dtype=float)
        return self.from_recast_fn(np.asarray(x, dtype=float))


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Running cost ``(x - x_d)' Q (x - x_d) + u' diag(R) u``."""

    Q: np.ndarray
    R: np.ndarray
    x_d: np.ndarray

    def __post_init__(self) -> None:
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.asarray(self.R, dtype=float).reshape(-1)
        if Q.shape != (len(self.x_d), len(self.x_d)) or not np.allclose(Q, Q.T):
            raise UsageError("Q must be a symmetric matrix matching the state")
        if np.linalg.eigvalsh(Q)[0] < -1e-12:
            raise UsageError("Q must be positive semidefinite")
        if np.any(R <= 0):
            raise UsageError("R entries must be positive")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "x_d", np.asarray(self.x_d, dtype=float))

    @classmethod
    def diagonal(cls, q_diag: Sequence[float], r_diag: Sequence[float], x_d: Sequence[float]) -> CostSpec:
        return cls(np.diag(np.asarray(q_diag, dtype=float)), np.asarray(r_diag, dtype=float), np.asarray(x_d))

    def q(self, registry: Registry) -> Polynomial:
        shifted = [registry.variable(i) - float(self.x_d[i]) for i in range(len(self.x_d))]
        total = Polynomial.zero(registry)
        for i, j in zip(*np.nonzero(self.Q), strict=True):
            total = total + float(self.Q[i, j]) * shifted[i] * shifted[j]
        return total

    def running_polynomial(self, registry: Registry, n_x: int) -> Polynomial:
        """``l(x, u)`` over a registry whose inputs follow the ``n_x`` states."""
        total = self.q(registry)
        for j, r in enumerate(self.R):
            u = registry.variable(n_x + j)
            total = total + float(r) * u * u
        return total

    def running(self, x: np.ndarray, u: np.ndarray) -> Any:
        dx = np.asarray(x, dtype=float) - self.x_d
        u = np.asarray(u, dtype=float)
        state = np.einsum("...i,ij,...j->...", dx, self.Q, dx)
        return state + np.sum(self.R * u * u, axis=-1) if self.R.size else state


class Regions(NamedTuple):
    X: SemialgebraicSet
    Xh: SemialgebraicSet

    def with_bounds(
        self,
        X: Mapping[str, tuple[float, float]] | None = None,
        Xh: Mapping[str, tuple[float, float]] | None = None,
    ) -> Regions:
        return Regions(replace_bounds(self.X, X), replace_bounds(self.Xh, Xh))


class Benchmark(NamedTuple):
    system: RationalControlAffineSystem
    cost: CostSpec
    regions: Regions


def replace_bounds(region: SemialgebraicSet, bounds: Mapping[str, tuple[float, float]] | None) -> SemialgebraicSet:
    """Same set with the named box bounds replaced rather than intersected."""
    if not bounds:
        return region
    lower, upper = list(region.lower), list(region.upper)
    for name, (lo, hi) in bounds.items():
        i = region.registry.index(name)
        lower[i], upper[i] = float(lo), float(hi)
    return SemialgebraicSet(region.registry, region.equalities, region.inequalities, tuple(lower), tuple(upper))


def reduced_monomials(registry: Registry, degree: int) -> list[Monomial]:
    """Monomials up to ``degree`` that stay independent modulo the manifold equalities.

    ``c^2`` is rewritten as ``1 - s^2`` on circles and ``qw^2`` as ``1 - |q_v|^2`` on
    spheres, so monomials with those squares are dropped.
    """
    eliminated = [c for _, c in registry.circles] + [group[0] for group in registry.spheres]
    return [m for m in monomials_up_to(range(len(registry)), degree) if all(m.exponent(v) < 2 for v in eliminated)]


def _parse(value: Polynomial | str | float, registry: Registry) -> Polynomial:
    if isinstance(value, Polynomial):
        return value
    if isinstance(value, str):
        return Polynomial.parse(value, registry)
    return Polynomial.constant(registry, float(value))


def polynomial_system(
    name: str,
    state_names: Sequence[str],
    n1: Sequence[Polynomial | str | float],
    n2: Sequence[Sequence[Polynomial | str | float]] | None = None,
    d: Polynomial | str | float = 1.0,
    input_names: Sequence[str] = (),
    u_min: Sequence[float] | None = None,
    u_max: Sequence[float] | None = None,
    x_d: Sequence[float] | None = None,
    circles: Sequence[tuple[int, int]] = (),
    spheres: Sequence[tuple[int, int, int, int]] = (),
) -> RationalControlAffineSystem:
    """Build a system from polynomial text; used for the scalar toy systems."""
    registry = Registry(tuple(state_names), tuple(circles), tuple(spheres))
    n_u = len(input_names)
    rows_n2 = n2 if n2 is not None else [[0.0] * n_u for _ in state_names]
    return RationalControlAffineSystem(
        name=name,
        registry=registry,
        n1=tuple(_parse(p, registry) for p in n1),
        n2=tuple(tuple(_parse(p, registry) for p in row) for row in rows_n2),
        d=_parse(d, registry),
        u_min=np.full(n_u, -np.inf) if u_min is None else np.asarray(u_min, dtype=float),
        u_max=np.full(n_u, np.inf) if u_max is None else np.asarray(u_max, dtype=float),
        x_d=np.zeros(len(state_names)) if x_d is None else np.asarray(x_d, dtype=float),
        input_names=tuple(input_names),
    )


# -- benchmarks ------------------------------------------------------------------


def pendulum(
    mass: float = 1.0,
    length: float = 0.5,
    damping: float = 0.1,
    gravity: float = 9.8,
    torque_limit: float = 1.8,
    thetadot_max: float = 2 * np.pi,
    thetadot_max_h: float = 3 * np.pi,
    q_diag: Sequence[float] | None = None,
    r_diag: Sequence[float] | None = None,
) -> Benchmark:
    """Torque-limited pendulum in (s, c, thetadot) = (sin, cos, rate).

    Defaults give mgl = 4.9 with a +-1.8 torque bound; the goal is upright,
    (s, c, thetadot) = (0, -1, 0). Q defaults to 10 I and R to 1.
    """
    registry = Registry(("s", "c", "thetadot"), circles=((0, 1),))
    s, c, w = registry.variables()
    inertia = mass * length**2
    mgl = mass * gravity * length
    zero = Polynomial.zero(registry)
    system = RationalControlAffineSystem(
        name="pendulum",
        registry=registry,
        n1=(c * w, -s * w, (-damping * w - mgl * s) / inertia),
        n2=((zero,), (zero,), (Polynomial.constant(registry, 1.0 / inertia),)),
        d=Polynomial.constant(registry, 1.0),
        u_min=np.array([-torque_limit]),
        u_max=np.array([torque_limit]),
        x_d=np.array([0.0, -1.0, 0.0]),
        input_names=("u",),
        parameters={"mass": mass, "length": length, "damping": damping, "gravity": gravity},
        to_recast_fn=lambda z: np.stack([np.sin(z[..., 0]), np.cos(z[..., 0]), z[..., 1]], axis=-1),
        from_recast_fn=lambda x: np.stack([np.arctan2(x[..., 0], x[..., 1]), x[..., 2]], axis=-1),
    )
    cost = CostSpec.diagonal(q_diag or [10.0] * 3, r_diag or [1.0], system.x_d)
    regions = Regions(
        X=SemialgebraicSet.box_set(registry, {"thetadot": (-thetadot_max, thetadot_max)}),
        Xh=SemialgebraicSet.box_set(registry, {"thetadot": (-thetadot_max_h, thetadot_max_h)}),
    )
    return Benchmark(system, cost, regions)


def cartpole(
    cart_mass: float = 10.0,
    pole_mass: float = 1.0,
    length: float = 0.5,
    gravity: float = 9.81,
    force_limit: float = 100.0,
    x_bounds: Sequence[float] = (2.0, 1.0, 1.0, 5.0, 5.0),
    xh_bounds: Sequence[float] = (3.0, 1.0, 1.0, 6.0, 6.0),
    q_diag: Sequence[float] | None = None,
    r_diag: Sequence[float] | None = None,
) -> Benchmark:
    """Cart-pole in (x, s, c, xdot, thetadot), theta = 0 hanging down.

    The common denominator is d = m_c + m_p s^2. The input is a force on the
    cart bounded by ``force_limit``. Q defaults to diag(10, 10, 10, 1, 1) and
    R to 0.1.
    """
    registry = Registry(("x", "s", "c", "xdot", "thetadot"), circles=((1, 2),))
    _, s, c, v, w = registry.variables()
    mc, mp, g = cart_mass, pole_mass, gravity
    d = mc + mp * s * s
    zero = Polynomial.zero(registry)
    one = Polynomial.constant(registry, 1.0)
    n1 = (
        v * d,
        c * w * d,
        -s * w * d,
        mp * s * (length * w * w + g * c),
        (-mp * length * w * w * c * s - (mc + mp) * g * s) / length,
    )
    n2 = ((zero,), (zero,), (zero,), (one,), (-c / length,))

    def to_recast(z: np.ndarray) -> np.ndarray:
        return np.stack([z[..., 0], np.sin(z[..., 1]), np.cos(z[..., 1]), z[..., 2], z[..., 3]], axis=-1)

    def from_recast(x: np.ndarray) -> np.ndarray:
        return np.stack([x[..., 0], np.arctan2(x[..., 1], x[..., 2]), x[..., 3], x[..., 4]], axis=-1)

    system = RationalControlAffineSystem(
        name="cartpole",
        registry=registry,
        n1=n1,
        n2=n2,
        d=d,
        u_min=np.array([-force_limit]),
        u_max=np.array([force_limit]),
        x_d=np.array([0.0, 0.0, -1.0, 0.0, 0.0]),
        input_names=("u",),
        parameters={"cart_mass": mc, "pole_mass": mp, "length": length, "gravity": g},
        to_recast_fn=to_recast,
        from_recast_fn=from_recast,
    )
    names = registry.names
    cost = CostSpec.diagonal(q_diag or [10.0, 10.0, 10.0, 1.0, 1.0], r_diag or [0.1], system.x_d)
    regions = Regions(
        X=SemialgebraicSet.box_set(registry, {n: (-b, b) for n, b in zip(names, x_bounds, strict=True)}),
        Xh=SemialgebraicSet.box_set(registry, {n: (-b, b) for n, b in zip(names, xh_bounds, strict=True)}),
    )
    system.check_denominator(regions.Xh)
    return Benchmark(system, cost, regions)


QUADROTOR_STATES = ("px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz")


def _quaternion_from_euler(z: np.ndarray) -> np.ndarray:
    """(p, roll, pitch, yaw, v, omega) -> recast state with a w-first, w >= 0 quaternion."""
    z = np.atleast_2d(z)
    xyzw = Rotation.from_euler("xyz", z[:, 3:6]).as_quat()
    quat = np.concatenate([xyzw[:, 3:4], xyzw[:, :3]], axis=1)
    quat *= np.where(quat[:, :1] < 0, -1.0, 1.0)
    return np.concatenate([z[:, :3], quat, z[:, 6:]], axis=1)


def _euler_from_quaternion(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    quat = x[:, 3:7]
    euler = Rotation.from_quat(np.concatenate([quat[:, 1:], quat[:, :1]], axis=1)).as_euler("xyz")
    return np.concatenate([x[:, :3], euler, x[:, 7:]], axis=1)


def quadrotor(
    mass: float = 0.775,
    arm_length: float = 0.15,
    inertia: Sequence[float] = (0.0015, 0.0025, 0.0035),
    torque_coefficient: float = 0.0245,
    gravity: float = 9.81,
    thrust_ratio: float = 2.5,
    xh_position: float = 1.0,
    xh_angles: Sequence[float] = (0.5 * np.pi, 0.2 * np.pi, 0.5 * np.pi),
    xh_velocity: float = 1.0,
    xh_rate: float = 1.0,
    x_scale: float = 0.8,
    q_diag: Sequence[float] | None = None,
    r_diag: Sequence[float] | None = None,
) -> Benchmark:
    """Quaternion-recast quadrotor with 13 states and 4 rotor inputs.

    Inputs are rotor thrust deviations from hover, mg/4 each, so the physical
    thrust ``u + mg/4`` ranges over ``[0, thrust_ratio * mg/4]``. X^h is the box
    on position, velocity and body rate plus quaternion bounds implied by the
    roll/pitch/yaw box through half-angle sines; X scales every box by
    ``x_scale``. Q defaults to I and R to 1.
    """
    registry = Registry(QUADROTOR_STATES, spheres=((3, 4, 5, 6),))
    variables = registry.variables()
    _, _, _, qw, qx, qy, qz, vx, vy, vz, wx, wy, wz = variables
    zero = Polynomial.zero(registry)
    ixx, iyy, izz = (float(v) for v in inertia)
    L, kM, g, m = arm_length, torque_coefficient, gravity, mass

    # rotation of the body z axis into the world frame
    ez = (2 * (qx * qz + qw * qy), 2 * (qy * qz - qw * qx), qw * qw - qx * qx - qy * qy + qz * qz)
    quat_rate = (
        0.5 * (-qx * wx - qy * wy - qz * wz),
        0.5 * (qw * wx + qy * wz - qz * wy),
        0.5 * (qw * wy - qx * wz + qz * wx),
        0.5 * (qw * wz + qx * wy - qy * wx),
    )
    gyro = (
        (iyy - izz) * wy * wz / ixx,
        (izz - ixx) * wz * wx / iyy,
        (ixx - iyy) * wx * wy / izz,
    )
    n1 = (vx, vy, vz, *quat_rate, g * ez[0], g * ez[1], g * ez[2] - g, *gyro)
    # torque = [L(u2 - u4), L(u3 - u1), kM(u1 - u2 + u3 - u4)]
    torque_map = np.array([[0.0, L, 0.0, -L], [-L, 0.0, L, 0.0], [kM, -kM, kM, -kM]])
    inv_inertia = np.array([1 / ixx, 1 / iyy, 1 / izz])
    n2_rows: list[tuple[Polynomial, ...]] = [(zero,) * 4 for _ in range(7)]
    n2_rows += [tuple(e / m for _ in range(4)) for e in ez]
    for axis in range(3):
        n2_rows.append(tuple(Polynomial.constant(registry, inv_inertia[axis] * torque_map[axis, j]) for j in range(4)))

    hover = m * g / 4
    system = RationalControlAffineSystem(
        name="quadrotor",
        registry=registry,
        n1=n1,
        n2=tuple(n2_rows),
        d=Polynomial.constant(registry, 1.0),
        u_min=np.full(4, -hover),
        u_max=np.full(4, (thrust_ratio - 1.0) * hover),
        x_d=np.array([0.0, 0.0, 0.0, 1.0] + [0.0] * 9),
        input_names=("u1", "u2", "u3", "u4"),
        input_offset=np.full(4, hover),
        parameters={"mass": m, "arm_length": L, "torque_coefficient": kM, "gravity": g},
        to_recast_fn=lambda z: _quaternion_from_euler(z).reshape(z.shape[:-1] + (13,)),
        from_recast_fn=lambda x: _euler_from_quaternion(x).reshape(x.shape[:-1] + (12,)),
    )

    def box(scale: float) -> dict[str, tuple[float, float]]:
        bounds: dict[str, tuple[float, float]] = {}
        for names, value in (("px py pz", xh_position), ("vx vy vz", xh_velocity), ("wx wy wz", xh_rate)):
            for name in names.split():
                bounds[name] = (-scale * value, scale * value)
        for name, angle in zip(("qx", "qy", "qz"), xh_angles, strict=True):
            half = float(np.sin(min(scale * angle, np.pi) / 2))
            bounds[name] = (-half, half)
        bounds["qw"] = (0.0, 1.0)
        return bounds

    cost = CostSpec.diagonal(q_diag or [1.0] * 13, r_diag or [1.0] * 4, system.x_d)
    regions = Regions(
        X=SemialgebraicSet.box_set(registry, box(x_scale)),
        Xh=SemialgebraicSet.box_set(registry, box(1.0)),
    )
    return Benchmark(system, cost, regions)


def double_integrator(q_diag: Sequence[float] | None = None, r_diag: Sequence[float] | None = None) -> Benchmark:
    """``x1' = x2, x2' = u`` with q = x'x, R = 1 and no input limits."""
    system = polynomial_system("double_integrator", ("x1", "x2"), ["x2", 0.0], [[0.0], [1.0]], input_names=("u",))
    registry = system.registry
    cost = CostSpec.diagonal(q_diag or [1.0, 1.0], r_diag or [1.0], system.x_d)
    regions = Regions(
        X=SemialgebraicSet.box_set(registry, {"x1": (-1.0, 1.0), "x2": (-1.0, 1.0)}),
        Xh=SemialgebraicSet.box_set(registry),
    )
    return Benchmark(system, cost, regions)


# -- linearisation and LQR ----------------------------------------------------------


def linearize(
    system: RationalControlAffineSystem, x0: np.ndarray, u0: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians (A, B) of ``(n1 + n2 u) / d`` at (x0, u0)."""
    x0 = np.asarray(x0, dtype=float)
    u0 = np.zeros(system.n_u) if u0 is None else np.asarray(u0, dtype=float)
    rows = system.numerators()
    xu = np.concatenate([x0, u0])
    d_poly = system.d.lift(system.xu_registry)
    d = d_poly.evaluate(xu)
    grad_d = np.array([d_poly.differentiate(k).evaluate(xu) for k in range(system.n_x + system.n_u)])
    values = np.array([row.evaluate(xu) for row in rows])
    jac = np.array([[row.differentiate(k).evaluate(xu) for k in range(system.n_x + system.n_u)] for row in rows])
    full = (jac * d - np.outer(values, grad_d)) / d**2
    return full[:, : system.n_x], full[:, system.n_x :]


def _require_pd(matrix: np.ndarray, name: str) -> np.ndarray:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.shape[0] != matrix.shape[1] or not np.allclose(matrix, matrix.T):
        raise UsageError(f"{name} must be square and symmetric")
    if np.linalg.eigvalsh(matrix)[0] <= 0:
        raise UsageError(f"{name} must be positive definite")
    return matrix


def is_stabilizable(A: np.ndarray, B: np.ndarray, tol: float = 1e-9) -> bool:
    """PBH test on every eigenvalue with nonnegative real part."""
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if lam.real < -tol:
            continue
        pencil = np.hstack([A - lam * np.eye(n), B])
        if np.linalg.matrix_rank(pencil, tol=tol * max(1.0, np.abs(pencil).max())) < n:
            return False
    return True


def lqr(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Continuous-time LQR: returns (S, K) with K = R^-1 B' S.

    The Riccati solution from ``solve_continuous_are`` is polished by
    Newton-Kleinman iterations on the closed-loop Lyapunov equation.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = _require_pd(Q, "Q")
    R = _require_pd(np.diag(R) if np.ndim(R) == 1 else R, "R")
    if not is_stabilizable(A, B):
        raise SynthesisError("(A, B) is not stabilizable")
    try:
        S = sla.solve_continuous_are(A, B, Q, R)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise SynthesisError(f"Riccati solve failed: {e}") from e
    R_inv = np.linalg.inv(R)
    K = R_inv @ B.T @ S
    for _ in range(NEWTON_KLEINMAN_ITERATIONS):
        closed = A - B @ K
        S_next = sla.solve_continuous_lyapunov(closed.T, -(Q + K.T @ R @ K))
        S_next = 0.5 * (S_next + S_next.T)
        K = R_inv @ B.T @ S_next
        done = np.linalg.norm(S_next - S) <= 1e-13 * max(1.0, np.linalg.norm(S))
        S = S_next
        if done:
            break
    return S, K


@dataclass(frozen=True)
class LqrResult:
    S: np.ndarray
    K: np.ndarray
    """Gain on the full recast state, ``u = -K (x - x_d)``"""
    A: np.ndarray
    B: np.ndarray
    tangent: np.ndarray
    """Orthonormal basis of the manifold tangent space at the goal"""
    K_tangent: np.ndarray

    @property
    def closed_loop_tangent(self) -> np.ndarray:
        T = self.tangent
        return T.T @ (self.A - self.B @ self.K) @ T


def tangent_lqr(
    system: RationalControlAffineSystem,
    cost: CostSpec,
    Q: np.ndarray | None = None,
    R: np.ndarray | None = None,
) -> LqrResult:
    """LQR on the tangent space of the manifolds at the goal.

    The recast linearisation has one uncontrollable direction per manifold
    (its normal), so the Riccati equation is solved in a null-space basis of
    the manifold normals and the gain mapped back.
    """
    x_d = system.x_d
    A, B = linearize(system, x_d)
    Q = cost.Q if Q is None else np.asarray(Q, dtype=float)
    R = cost.R if R is None else np.asarray(R, dtype=float)
    normals = [
        np.array([h.differentiate(i).evaluate(x_d) for i in range(system.n_x)]) for h in system.manifold_equalities
    ]
    T = sla.null_space(np.vstack(normals)) if normals else np.eye(system.n_x)
    S_t, K_t = lqr(T.T @ A @ T, T.T @ B, T.T @ Q @ T, R)
    return LqrResult(S=T @ S_t @ T.T, K=K_t @ T.T, A=A, B=B, tangent=T, K_tangent=K_t)


def lqr_controller(system: RationalControlAffineSystem, cost: CostSpec) -> SaturatingController:
    """Clamped LQR ``u = clamp(-K (x - x_d))`` as a polynomial saturating controller."""
    gain = tangent_lqr(system, cost).K
    registry = system.registry
    shifted = [registry.variable(i) - float(system.x_d[i]) for i in range(system.n_x)]
    policy = []
    for row in gain:
        p = Polynomial.zero(registry)
        for k, value in enumerate(row):
            if abs(value) > 1e-14:
                p = p - float(value) * shifted[k]
        policy.append(p)
    logger.info(f"{system.name}: LQR gain {np.array2string(gain, precision=4)}")
    return SaturatingController(tuple(policy), system.u_min, system.u_max)
