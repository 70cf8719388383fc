from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from hjb.config import SimulationSettings
from hjb.errors import SynthesisError, UsageError
from hjb.hybrid import (
    EXTRA_NAMES,
    HybridPusherSystem,
    PusherParams,
    classify_contact,
    continuous_action,
    friction_constraints,
    hybrid_policy_step,
    in_friction_set,
    mode_switch_action,
    pusher,
    synth_under_hybrid,
)
from hjb.poly import Polynomial
from hjb.sim import simulate_hybrid

A = 0.05


@pytest.fixture
def system() -> HybridPusherSystem:
    return pusher()


@pytest.fixture
def off_center(system: HybridPusherSystem) -> np.ndarray:
    """Pusher on the left face, slider displaced and rotated"""
    theta = 0.3
    return np.array([-A, 0.01, 0.1, -0.05, np.sin(theta), np.cos(theta)])


def far_face_value(system: HybridPusherSystem) -> Polynomial:
    """Zero only with the pusher at the centre of the left face"""
    px, py = system.registry.variable("px"), system.registry.variable("py")
    return 1000 * (px + A) ** 2 + 1000 * py**2


class TestParams:
    """Tests for pusher parameters"""

    def test_defaults(self) -> None:
        params = PusherParams()
        assert params.c_ls == pytest.approx(0.6 * A)
        assert params.epsilon_m == pytest.approx((0.05 * A) ** 2)

    @pytest.mark.parametrize("overrides", [{"a": 0.0}, {"mu": -0.1}, {"allowed_faces": ()}, {"allowed_faces": (1, 5)}])
    def test_validation(self, overrides: dict) -> None:
        with pytest.raises(UsageError):
            PusherParams(**overrides)


class TestGeometry:
    """Tests for faces, contact points and jumps"""

    def test_contact_points(self, system: HybridPusherSystem) -> None:
        np.testing.assert_allclose(system.contact_point(1, 0.02), [-A, 0.02])
        np.testing.assert_allclose(system.contact_point(3, 0.02), [A, -0.02])
        np.testing.assert_allclose(system.contact_point(2, 0.01), [-0.01, -A])
        assert system.tangential(np.array([A, -0.02, 0, 0, 0, 1]), 3) == pytest.approx(0.02)

    def test_mode_of(self, system: HybridPusherSystem) -> None:
        assert system.mode_of(system.x_d) == 1
        assert system.mode_of(np.array([0.0, A, 0, 0, 0, 1])) == 4
        assert system.mode_of(np.array([0.0, 0.0, 0, 0, 0, 1])) is None
        with pytest.raises(UsageError):
            system.face(5)

    def test_regions_and_mode_domain(self, system: HybridPusherSystem) -> None:
        X, Xh = system.regions()
        assert X.contains(system.x_d)
        assert Xh.upper[2] == pytest.approx(0.4)
        assert not X.contains(np.array([0.0, 0.0, 0.0, 0.0, 0.0, 1.0]))
        domain = system.mode_domain(3)
        assert domain.lower[0] == domain.upper[0] == pytest.approx(A)
        assert domain.contains(np.array([A, 0.01, 0.2, 0.0, 0.0, 1.0]))

    def test_jump(self, system: HybridPusherSystem) -> None:
        target = system.jump(system.x_d, 3, 0.0)
        np.testing.assert_allclose(target, [A, 0.0, 0.0, 0.0, 0.0, 1.0])
        assert system.transition_cost(system.x_d, target) == pytest.approx((2 * A) ** 2)


class TestDynamics:
    """Tests for the quasi-static contact field"""

    def test_centre_push_translates(self, system: HybridPusherSystem) -> None:
        np.testing.assert_allclose(system.dynamics(system.x_d, 1, 1.0, 0.0, 0.0), [0, 0, 1, 0, 0, 0])

    def test_off_centre_push_rotates(self, system: HybridPusherSystem) -> None:
        x = np.array([-A, 0.02, 0.0, 0.0, 0.0, 1.0])
        xdot = system.dynamics(x, 1, 1.0, 0.0, 0.0)
        assert xdot[4] == pytest.approx(-0.02 / (0.6 * A) ** 2)
        assert xdot[5] == pytest.approx(0.0)

    def test_polynomial_rows_match(self, system: HybridPusherSystem, off_center: np.ndarray) -> None:
        registry = system.registry.extend(EXTRA_NAMES)
        rows = system.rows(1, registry)
        vn, vt, lt = 0.3, -0.1, 0.05
        point = np.concatenate([off_center, [vn, vt, lt, 0.0, 0.0]])
        np.testing.assert_allclose([p.evaluate(point) for p in rows], system.dynamics(off_center, 1, vn, vt, lt))

    @pytest.mark.parametrize("mode", [1, 2, 3, 4])
    def test_orientation_stays_on_circle(self, system: HybridPusherSystem, off_center: np.ndarray, mode: int) -> None:
        xdot = system.dynamics(off_center, mode, 0.4, 0.2, -0.1)
        assert off_center[4] * xdot[4] + off_center[5] * xdot[5] == pytest.approx(0.0, abs=1e-12)


class TestFriction:
    """Tests for the Coulomb complementarity set"""

    @pytest.mark.parametrize(
        ("vt", "lt", "branch"),
        [
            (0.0, 0.2, "stick"),
            (0.1, -0.3, "slide+"),
            (-0.1, 0.3, "slide-"),
            (0.1, -0.1, None),
            (0.0, 0.5, None),
            (0.1, 0.3, None),
        ],
    )
    def test_classify(self, vt: float, lt: float, branch: str | None) -> None:
        assert classify_contact(vt, 1.0, lt, 0.3) == branch
        assert in_friction_set(vt, 1.0, lt, 0.3) is (branch is not None)

    def test_constraints_vanish_on_branches(self, system: HybridPusherSystem) -> None:
        registry = system.registry.extend(EXTRA_NAMES)
        eqs, ineqs = friction_constraints(registry, 0.3)
        assert len(eqs) == 1
        assert len(ineqs) == 2
        point = np.zeros(len(registry))
        point[registry.index("vn")], point[registry.index("vt")], point[registry.index("lt")] = 1.0, 0.1, -0.3
        assert eqs[0].evaluate(point) == pytest.approx(0.0)
        assert all(g.evaluate(point) <= 1e-12 for g in ineqs)
        assert friction_constraints(registry, 0.3, equality=False)[0] == []


class TestOnlineControl:
    """Tests for the continuous action and mode switching"""

    @pytest.fixture
    def value(self, system: HybridPusherSystem) -> Polynomial:
        x, y, px, py = (system.registry.variable(n) for n in ("x", "y", "px", "py"))
        s, c = system.registry.variable("s"), system.registry.variable("c")
        return 10 * x**2 + 10 * y**2 + (1 - c) + s**2 + 5 * py**2 + 0.5 * x * s + 3 * y

    def test_matches_brute_force(self, system: HybridPusherSystem, off_center: np.ndarray, value: Polynomial) -> None:
        action = continuous_action(value, system, off_center, 1)
        params, cost = system.params, system.cost
        grad = np.array([g.evaluate(off_center) for g in value.gradient()])

        def hamiltonian(vn: float, vt: float, lt: float) -> float:
            xdot = system.dynamics(off_center, 1, vn, vt, lt)
            return float(cost.running(off_center, np.array([vn, vt])) + grad @ xdot)

        assert action.value == pytest.approx(hamiltonian(action.vn, action.vt, action.lambda_t))
        assert in_friction_set(action.vt, action.lambda_n, action.lambda_t, params.mu)

        best = np.inf
        for vn in np.linspace(0.0, params.vn_max, 41):
            for lt in np.linspace(-params.mu * vn, params.mu * vn, 21):
                best = min(best, hamiltonian(vn, 0.0, lt))
            for vt in np.linspace(-params.vt_max, params.vt_max, 41):
                if vt:
                    best = min(best, hamiltonian(vn, vt, -np.sign(vt) * params.mu * vn))
        assert action.value <= best + 1e-9
        assert best - action.value < 1e-2 * (1.0 + abs(best))

    def test_off_face_state(self, system: HybridPusherSystem, off_center: np.ndarray, value: Polynomial) -> None:
        with pytest.raises(UsageError):
            continuous_action(value, system, off_center, 3)

    def test_switch_to_cheaper_face(self, system: HybridPusherSystem) -> None:
        J = far_face_value(system)
        x = np.array([A, 0.0, 0.0, 0.0, 0.0, 1.0])
        switch = mode_switch_action(J, system, x)
        assert switch is not None
        assert switch.mode == 1
        assert switch.tau == pytest.approx(0.0, abs=1e-3)
        assert switch.jump_cost == pytest.approx((2 * A) ** 2, rel=1e-3)
        assert switch.value == pytest.approx((2 * A) ** 2 - 10.0, abs=1e-3)

        step = hybrid_policy_step(J, system, x, 3)
        assert step.kind == "switch"
        assert step.switch is not None and step.switch.mode == 1

    def test_stays_in_contact_at_goal(self, system: HybridPusherSystem) -> None:
        J = far_face_value(system)
        step = hybrid_policy_step(J, system, system.x_d, 1)
        assert step.kind == "continuous"
        assert step.continuous.mode == 1

    def test_no_target_outside_minimum_distance(self) -> None:
        system = pusher(allowed_faces=(1,), epsilon_m=1.0)
        assert mode_switch_action(far_face_value(system), system, system.x_d) is None

    def test_quadratic_switch_is_exact(self, system: HybridPusherSystem) -> None:
        px, py = system.registry.variable("px"), system.registry.variable("py")
        J = 1000 * (px + A) ** 2 + 1000 * (py - 0.02) ** 2
        x = np.array([A, 0.0, 0.0, 0.0, 0.0, 1.0])
        switch = mode_switch_action(J, system, x)
        assert switch is not None and switch.mode == 1
        # 4 A^2 + tau^2 + 1000 (tau - 0.02)^2 is smallest at tau = 20 / 1001
        assert switch.tau == pytest.approx(20.0 / 1001.0, abs=1e-9)
        taus = np.linspace(-A, A, 20001)
        here = float(J.evaluate(x))
        grid = [system.transition_cost(x, system.jump(x, 1, t)) + float(J.evaluate(system.jump(x, 1, t))) for t in taus]
        assert switch.value <= min(grid) - here + 1e-12

    def test_quadratic_switch_respects_minimum_distance(self) -> None:
        system = pusher(allowed_faces=(1,))
        x = np.array([-A, 0.0, 0.0, 0.0, 0.0, 1.0])
        switch = mode_switch_action(far_face_value(system), system, x)
        assert switch is not None
        assert abs(switch.tau) == pytest.approx(np.sqrt(system.params.epsilon_m), rel=1e-9)
        assert switch.jump_cost == pytest.approx(system.params.epsilon_m, rel=1e-9)


class TestSynthesis:
    """Tests for assembling the hybrid SOS program"""

    def test_program_layout_and_failure(self) -> None:
        system = pusher(allowed_faces=(1, 3))
        captured = {}

        def fake_solve(program, settings):  # type: ignore[no-untyped-def]
            captured["program"] = program
            return MagicMock(certificate=None), 0.0

        with patch("hjb.hybrid.timed_solve", side_effect=fake_solve), pytest.raises(SynthesisError):
            synth_under_hybrid(system, degree=2)
        names = {c.name for c in captured["program"]._sos}  # pylint: disable=protected-access
        assert {"hjb.left", "hjb.right", "J>=0.left", "J>=0.right"} <= names
        assert {"jump.left.right", "jump.right.left", "jump.left.left", "jump.right.right"} <= names
        assert not any("bottom" in name for name in names)


@pytest.mark.slow
class TestLeftFacePush:
    """Quadratic pusher value function with contact kept on the left face"""

    @pytest.fixture(scope="class")
    def solved(self):  # type: ignore[no-untyped-def]
        system = pusher(allowed_faces=(1,))
        return system, synth_under_hybrid(system, degree=2)

    def test_certificate(self, solved) -> None:  # type: ignore[no-untyped-def]
        system, approx = solved
        assert approx.certificate is not None
        assert approx.verification.passed
        assert approx.J.evaluate(system.x_d) == pytest.approx(0.0, abs=1e-6)

    def test_push_to_origin(self, solved) -> None:  # type: ignore[no-untyped-def]
        system, approx = solved
        x0 = np.array([-A, 0.0, -0.28, 0.28, 0.0, 1.0])
        settings = SimulationSettings(step=1e-2, horizon=40.0)
        run = simulate_hybrid(system, approx.J, x0, mode=1, settings=settings, region=system.regions().Xh)
        assert run.converged and not run.escaped
        assert run.switch_times == []
