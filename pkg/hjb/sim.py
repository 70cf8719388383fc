"""Closed-loop simulation, convergence detection and trajectory metrics."""

from __future__ import annotations

import asyncio
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd

from hjb.config import SimulationSettings
from hjb.dynamics import CostSpec, RationalControlAffineSystem
from hjb.errors import UsageError
from hjb.hybrid import HybridPusherSystem, continuous_action, hybrid_policy_step
from hjb.models import TrajectorySummary
from hjb.poly import Polynomial, SemialgebraicSet

logger = logging.getLogger(__name__)

Controller = Callable[[np.ndarray], np.ndarray]

ESCAPE_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Fixed-step samples of one closed-loop run.

    ``controls[k]`` is the input applied at ``t[k]``; ``costs`` accumulates the
    running cost plus jump costs and is non-decreasing.
    """

    t: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    costs: np.ndarray
    drift: np.ndarray
    """Manifold residual before each renormalisation"""
    converged: bool
    escaped: bool
    values: np.ndarray | None = None
    modes: np.ndarray | None = None
    switch_times: list[float] = field(default_factory=list)
    switch_costs: list[float] = field(default_factory=list)

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def final_time(self) -> float:
        return float(self.t[-1])

    @property
    def accumulated_cost(self) -> float:
        return float(self.costs[-1])

    @property
    def max_drift(self) -> float:
        return float(np.max(self.drift)) if len(self.drift) else 0.0

    def summary(self, J: Polynomial | None = None) -> TrajectorySummary:
        increment = None
        if J is not None:
            increment = max_increment(np.asarray(J.evaluate(self.states)))
        return TrajectorySummary(
            x0=[float(v) for v in self.x0],
            converged=self.converged,
            escaped=self.escaped,
            final_time=self.final_time,
            accumulated_cost=self.accumulated_cost,
            max_J_increment=increment,
            switches=len(self.switch_times),
            max_drift=self.max_drift,
        )


class _Recorder:
    KEYS = ("t", "x", "u", "cost", "drift", "mode")

    def __init__(self, record: bool) -> None:
        self.record = record
        self.rows: dict[str, list[Any]] = {key: [] for key in self.KEYS}

    def add(self, t: float, x: np.ndarray, u: np.ndarray, cost: float, drift: float, mode: int | None = None) -> None:
        """Append a sample; without recording only the first and the latest are kept."""
        row = (t, x, u, cost, drift, mode)
        replace = not self.record and len(self.rows["t"]) == 2
        for key, value in zip(self.KEYS, row, strict=True):
            if replace:
                self.rows[key][-1] = value
            else:
                self.rows[key].append(value)

    def build(
        self, converged: bool, escaped: bool, J: Polynomial | None, hybrid: bool = False, **extra: Any
    ) -> Trajectory:
        states = np.array(self.rows["x"], dtype=float)
        return Trajectory(
            t=np.array(self.rows["t"], dtype=float),
            states=states,
            controls=np.array(self.rows["u"], dtype=float),
            costs=np.array(self.rows["cost"], dtype=float),
            drift=np.array(self.rows["drift"], dtype=float),
            converged=converged,
            escaped=escaped,
            values=np.asarray(J.evaluate(states)) if J is not None else None,
            modes=np.array(self.rows["mode"], dtype=int) if hybrid else None,
            **extra,
        )


def _rk4(
    field_fn: Callable[[np.ndarray], tuple[np.ndarray, float]], x: np.ndarray, h: float
) -> tuple[np.ndarray, float]:
    """One classic Runge-Kutta step of the state and of the accumulated cost."""
    k1, c1 = field_fn(x)
    k2, c2 = field_fn(x + 0.5 * h * k1)
    k3, c3 = field_fn(x + 0.5 * h * k2)
    k4, c4 = field_fn(x + h * k3)
    return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), h / 6.0 * (c1 + 2 * c2 + 2 * c3 + c4)


def goal_distance(x: np.ndarray, x_d: np.ndarray, goal_indices: Sequence[int] | None) -> float:
    idx = list(goal_indices) if goal_indices is not None else slice(None)
    return float(np.linalg.norm(np.asarray(x)[idx] - np.asarray(x_d)[idx]))


class _Convergence:
    """``|x - x_d| <= epsilon`` held for ``hold`` seconds."""

    def __init__(self, settings: SimulationSettings) -> None:
        self.epsilon = settings.epsilon
        self.hold = settings.hold
        self.since: float | None = None

    def update(self, t: float, distance: float) -> bool:
        if distance > self.epsilon:
            self.since = None
            return False
        if self.since is None:
            self.since = t
        return t - self.since >= self.hold - 1e-12


def simulate(
    system: RationalControlAffineSystem,
    controller: Controller | None,
    x0: Sequence[float],
    settings: SimulationSettings | None = None,
    region: SemialgebraicSet | None = None,
    J: Polynomial | None = None,
    cost: CostSpec | None = None,
    record: bool = True,
) -> Trajectory:
    """RK4 integration of ``xdot = f(x, controller(x))`` with feedback inside every stage.

    ``region`` is X^h: the start must lie in it and leaving it ends the run
    with ``escaped``. ``cost`` is a CostSpec; without one the accumulated
    cost stays zero.
    """
    settings = settings or SimulationSettings()
    x = np.asarray(x0, dtype=float).copy()
    if region is not None and not region.contains(x, tol=ESCAPE_TOL):
        raise UsageError(f"initial state {x.tolist()} is outside the simulation region")
    registry = system.registry
    n_u = system.n_u

    def control(state: np.ndarray) -> np.ndarray:
        return np.asarray(controller(state), dtype=float) if controller is not None and n_u else np.zeros(n_u)

    def field_fn(state: np.ndarray) -> tuple[np.ndarray, float]:
        u = control(state)
        running = float(cost.running(state, u)) if cost is not None else 0.0
        return system.dynamics(state, u), running

    recorder = _Recorder(record)
    h = settings.step
    steps = int(round(settings.horizon / h))
    total = 0.0
    recorder.add(0.0, x.copy(), control(x), 0.0, registry.manifold_residual(x))
    at_goal = goal_distance(x, system.x_d, system.goal_indices) <= settings.epsilon
    if at_goal and system.is_equilibrium(x, control(x), 1e-12):
        return recorder.build(True, False, J)

    convergence = _Convergence(settings)
    converged = escaped = False
    for k in range(1, steps + 1):
        x, increment = _rk4(field_fn, x, h)
        total += increment
        drift = registry.manifold_residual(x)
        if settings.renormalize:
            x = registry.project(x)
        t = k * h
        if not np.all(np.isfinite(x)):
            logger.warning(f"{system.name}: state diverged at t={t:.3f}")
            escaped = True
            break
        recorder.add(t, x.copy(), control(x), total, drift)
        if region is not None and not region.contains(x, tol=ESCAPE_TOL):
            escaped = True
            logger.debug(f"{system.name}: trajectory left the region at t={t:.3f}")
            break
        if convergence.update(t, goal_distance(x, system.x_d, system.goal_indices)):
            converged = True
            break
    return recorder.build(converged, escaped, J)


def simulate_hybrid(
    system: HybridPusherSystem,
    J: Polynomial,
    x0: Sequence[float],
    mode: int | None = None,
    settings: SimulationSettings | None = None,
    region: SemialgebraicSet | None = None,
    record: bool = True,
) -> Trajectory:
    """Pusher run: a jump-or-push decision every step, inputs held over the RK4 step."""
    settings = settings or SimulationSettings()
    x = np.asarray(x0, dtype=float).copy()
    mode = system.mode_of(x) if mode is None else mode
    if mode is None or not system.on_face(x, mode):
        raise UsageError("initial pusher position is not on an allowed face of the slider")
    if region is not None and not region.contains(x, tol=ESCAPE_TOL):
        raise UsageError(f"initial state {x.tolist()} is outside the simulation region")
    cost = system.cost
    registry = system.registry
    a = system.params.a
    h = settings.step
    steps = int(round(settings.horizon / h))
    recorder = _Recorder(record)
    switch_times: list[float] = []
    switch_costs: list[float] = []
    total = 0.0
    convergence = _Convergence(settings)
    converged = escaped = False

    for k in range(steps + 1):
        t = k * h
        action = hybrid_policy_step(J, system, x, mode)
        contact = action.continuous
        if action.kind == "switch" and action.switch is not None:
            switch = action.switch
            total += switch.jump_cost
            switch_times.append(t)
            switch_costs.append(switch.jump_cost)
            x, mode = np.array(switch.target), switch.mode
            contact = continuous_action(J, system, x, mode)
        u = np.array([contact.vn, contact.vt])
        recorder.add(t, x.copy(), u, total, registry.manifold_residual(x), mode)
        if convergence.update(t, goal_distance(x, system.x_d, system.goal_indices)):
            converged = True
            break
        if k == steps:
            break

        def field_fn(
            state: np.ndarray, c: Any = contact, m: int = mode, inputs: np.ndarray = u
        ) -> tuple[np.ndarray, float]:
            return system.dynamics(state, m, c.vn, c.vt, c.lambda_t), float(cost.running(state, inputs))

        x, increment = _rk4(field_fn, x, h)
        total += increment
        face = system.face(mode)
        x[face.axis] = face.sign * a
        other = 1 - face.axis
        x[other] = np.clip(x[other], -a, a)
        if settings.renormalize:
            x = registry.project(x)
        if region is not None and not region.contains(x, tol=ESCAPE_TOL):
            escaped = True
            recorder.add(t + h, x.copy(), u, total, registry.manifold_residual(x), mode)
            break

    if switch_times:
        logger.info(f"{system.name}: {len(switch_times)} face switches, final cost {total:.4g}")
    return recorder.build(converged, escaped, J, hybrid=True, switch_times=switch_times, switch_costs=switch_costs)


# -- metrics ---------------------------------------------------------------------


def max_increment(values: np.ndarray) -> float:
    return float(np.max(np.diff(values))) if len(values) > 1 else 0.0


@dataclass(frozen=True)
class Metrics:
    max_increment: float | None
    accumulated_cost: float
    lower_bound_ok: bool | None
    """``J_under(x0) - tol <= accumulated cost``"""
    upper_bound_ok: bool | None
    """``accumulated cost <= J_over(x0) + tol``"""
    tolerance: float


def metrics(
    trajectory: Trajectory,
    J: Polynomial | None = None,
    under: Polynomial | None = None,
    over: Polynomial | None = None,
    relative_tol: float = 0.02,
) -> Metrics:
    """Monotonicity of J along the run and the cost sandwich ``J_under <= cost <= J_over``."""
    x0 = trajectory.x0
    cost = trajectory.accumulated_cost
    reference = over if over is not None else under
    scale = 1.0 + abs(float(reference.evaluate(x0))) if reference is not None else 1.0
    tol = relative_tol * scale
    increment = max_increment(np.asarray(J.evaluate(trajectory.states))) if J is not None else None
    lower = cost >= float(under.evaluate(x0)) - tol if under is not None else None
    upper = cost <= float(over.evaluate(x0)) + tol if over is not None else None
    return Metrics(increment, cost, lower, upper, tol)


# -- batches ---------------------------------------------------------------------


async def simulate_many(
    system: RationalControlAffineSystem,
    controller: Controller | None,
    starts: np.ndarray,
    settings: SimulationSettings | None = None,
    region: SemialgebraicSet | None = None,
    J: Polynomial | None = None,
    cost: CostSpec | None = None,
    record: bool = False,
) -> list[Trajectory]:
    """Simulate every start in a worker thread; results follow the order of ``starts``."""
    tasks = [
        asyncio.to_thread(simulate, system, controller, x0, settings, region, J, cost, record)
        for x0 in np.atleast_2d(starts)
    ]
    return list(await asyncio.gather(*tasks))


def run_many(*args: Any, **kwargs: Any) -> list[Trajectory]:
    return asyncio.run(simulate_many(*args, **kwargs))


def trajectory_frame(
    trajectory: Trajectory, state_names: Sequence[str], input_names: Sequence[str] = ()
) -> pd.DataFrame:
    data: dict[str, Any] = {"t": trajectory.t}
    for i, name in enumerate(state_names):
        data[name] = trajectory.states[:, i]
    controls = trajectory.controls if trajectory.controls.ndim == 2 else trajectory.controls.reshape(-1, 1)
    for j in range(controls.shape[1]):
        data[input_names[j] if j < len(input_names) else f"u{j}"] = controls[:, j]
    data["cost"] = trajectory.costs
    data["drift"] = trajectory.drift
    if trajectory.values is not None:
        data["J"] = trajectory.values
    if trajectory.modes is not None:
        data["mode"] = trajectory.modes
    return pd.DataFrame(data)
