from dataclasses import replace
from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from hjb.config import SimulationSettings
from hjb.control import SaturatingController
from hjb.dynamics import double_integrator, lqr_controller, pendulum
from hjb.errors import DegreeError, InitialControllerError
from hjb.models import ValueApproxModel
from hjb.sim import simulate
from hjb.synth import (
    ValueApprox,
    check_degree,
    input_box_inequalities,
    over_residual,
    refine_over_with_under,
    saturation_cases,
    synth_over,
    synth_under,
    under_residual,
)

ROOT3 = np.sqrt(3.0)
# average of x' S x over [-1, 1]^2 for the double-integrator Riccati matrix S
RICCATI_AVERAGE = 2 * ROOT3 / 3


@pytest.fixture(scope="module")
def integrator():  # type: ignore[no-untyped-def]
    return double_integrator()


@pytest.fixture
def riccati_value(integrator):  # type: ignore[no-untyped-def]
    system, _, _ = integrator
    x1, x2 = system.registry.variables()
    return ROOT3 * x1**2 + 2 * x1 * x2 + ROOT3 * x2**2


class TestHelpers:
    """Tests for the pieces the synthesis programs are assembled from"""

    @pytest.mark.parametrize("degree", [0, 1, 3, -2])
    def test_bad_degree(self, degree: int) -> None:
        with pytest.raises(DegreeError):
            check_degree(degree)

    def test_input_box(self) -> None:
        system, _, _ = pendulum()
        registry = system.xu_registry
        (box,) = input_box_inequalities(system, registry)
        assert box.evaluate([0.0, -1.0, 0.0, 0.0]) == pytest.approx(-1.8**2)
        assert box.evaluate([0.0, -1.0, 0.0, 2.0]) > 0

    def test_unbounded_input_has_no_box(self, integrator) -> None:  # type: ignore[no-untyped-def]
        system, _, _ = integrator
        assert input_box_inequalities(system, system.xu_registry) == []

    def test_saturation_cases(self, integrator) -> None:  # type: ignore[no-untyped-def]
        system, _, _ = integrator
        policy = -system.registry.variable("x1")
        assert [name for name, _, _ in saturation_cases(policy, -1.0, 1.0)] == ["linear", "upper", "lower"]
        assert [name for name, _, _ in saturation_cases(policy, -np.inf, 1.0)] == ["linear", "upper"]
        ((name, applied, region),) = saturation_cases(policy, -np.inf, np.inf)
        assert name == "free"
        assert applied is policy
        assert region == []

    def test_saturated_case_regions(self, integrator) -> None:  # type: ignore[no-untyped-def]
        system, _, _ = integrator
        policy = -system.registry.variable("x1")
        cases = {name: (applied, region) for name, applied, region in saturation_cases(policy, -1.0, 1.0)}
        applied, (region,) = cases["upper"]
        assert applied == 1.0
        # the upper case holds where the policy is above the limit
        assert region.evaluate([-2.0, 0.0]) <= 0
        assert region.evaluate([0.0, 0.0]) > 0


class TestResiduals:
    """Tests for the sampled HJB residuals"""

    def test_riccati_value_is_tight(self, integrator, riccati_value) -> None:  # type: ignore[no-untyped-def]
        system, cost, _ = integrator
        samples = np.random.default_rng(8).uniform(-1, 1, size=(50, 2))
        under = under_residual(riccati_value, system, cost, samples)
        np.testing.assert_allclose(under.values, 0.0, atol=1e-9)
        over = over_residual(riccati_value, system, cost, lqr_controller(system, cost), samples)
        np.testing.assert_allclose(over.values, 0.0, atol=1e-9)
        assert over.scale >= 1.0

    def test_scaled_value_breaks_under_residual(self, integrator, riccati_value) -> None:  # type: ignore
        system, cost, _ = integrator
        samples = np.random.default_rng(9).uniform(-1, 1, size=(50, 2))
        report = under_residual(4 * riccati_value, system, cost, samples)
        assert report.minimum < 0


class TestInitialController:
    """Tests for over-approximation failures"""

    def test_infeasible_program_blames_controller(self, integrator) -> None:  # type: ignore[no-untyped-def]
        system, cost, (X, Xh) = integrator
        failed = MagicMock(certificate=None)
        with (
            patch("hjb.synth.solve_program", return_value=failed),
            pytest.raises(InitialControllerError),
        ):
            synth_over(system, cost, X, Xh, 2, lqr_controller(system, cost))

    def test_refine_seeds_with_under_controller(self, integrator, riccati_value) -> None:  # type: ignore
        system, cost, (X, Xh) = integrator
        with patch("hjb.synth.synth_over") as synth_over_mock:
            refine_over_with_under(system, cost, X, Xh, 2, under=MagicMock(J=riccati_value))
        controller = synth_over_mock.call_args.args[5]
        np.testing.assert_allclose(controller.eval([1.0, 1.0]), [-(1 + ROOT3)])


@pytest.mark.slow
class TestDoubleIntegrator:
    """Quadratic value functions for the double integrator recover the Riccati solution"""

    @pytest.fixture(scope="class")
    def under(self, integrator) -> ValueApprox:  # type: ignore[no-untyped-def]
        system, cost, (X, Xh) = integrator
        return synth_under(system, cost, X, Xh, 2)

    @pytest.fixture(scope="class")
    def over(self, integrator) -> ValueApprox:  # type: ignore[no-untyped-def]
        system, cost, (X, Xh) = integrator
        return synth_over(system, cost, X, Xh, 2, lqr_controller(system, cost))

    def test_under(self, under: ValueApprox) -> None:
        assert under.objective == pytest.approx(RICCATI_AVERAGE, abs=1e-4)
        assert under.J.evaluate([1.0, 0.0]) == pytest.approx(ROOT3, abs=1e-3)
        assert under.J.evaluate([0.0, 0.0]) == pytest.approx(0.0, abs=1e-8)
        assert under.verification.passed

    def test_over(self, over: ValueApprox) -> None:
        assert over.objective == pytest.approx(RICCATI_AVERAGE, abs=1e-4)
        assert over.initial_controller is not None
        assert over.verification.passed

    def test_sandwich(self, under: ValueApprox, over: ValueApprox) -> None:
        assert under.objective <= over.objective + 1e-6

    def test_model_round_trip(self, under: ValueApprox) -> None:
        model = ValueApproxModel.model_validate_json(under.to_model().model_dump_json())
        back = ValueApprox.from_model(model)
        assert back.J.allclose(under.J, 0.0)
        assert back.kind == "under"
        assert back.X.upper == under.X.upper

    def test_controller_limits_round_trip(self, over: ValueApprox) -> None:
        assert over.initial_controller is not None
        clamped = replace(
            over,
            initial_controller=SaturatingController(
                over.initial_controller.policy, np.array([-2.0]), np.array([np.inf])
            ),
        )
        model = ValueApproxModel.model_validate_json(clamped.to_model().model_dump_json())
        assert model.u_min == [-2.0] and model.u_max == [None]
        back = ValueApprox.from_model(model)
        assert back.initial_controller is not None
        np.testing.assert_array_equal(back.initial_controller.u_min, [-2.0])
        np.testing.assert_array_equal(back.initial_controller.u_max, [np.inf])
        assert back.initial_controller.eval(np.array([100.0, 100.0]))[0] == pytest.approx(
            clamped.initial_controller.eval(np.array([100.0, 100.0]))[0]
        )


@pytest.mark.slow
class TestPendulum:
    """Torque-limited pendulum swing-up from quadratic value functions"""

    @pytest.fixture(scope="class")
    def bench(self):  # type: ignore[no-untyped-def]
        return pendulum()

    @pytest.fixture(scope="class")
    def under(self, bench) -> ValueApprox:  # type: ignore[no-untyped-def]
        system, cost, (X, Xh) = bench
        return synth_under(system, cost, X, Xh, 2)

    def test_under_certificate(self, bench, under: ValueApprox) -> None:  # type: ignore[no-untyped-def]
        system = bench.system
        assert under.verification.passed
        assert under.objective > 0.0
        assert under.J.evaluate(system.x_d) == pytest.approx(0.0, abs=1e-6)

    def test_over_with_free_torque(self) -> None:
        system, cost, (X, Xh) = pendulum(torque_limit=np.inf)
        under = synth_under(system, cost, X, Xh, 2)
        over = refine_over_with_under(system, cost, X, Xh, 2, under)
        assert over.verification.passed
        assert under.objective <= over.objective + 1e-6

    def test_swing_up(self, bench, under: ValueApprox) -> None:  # type: ignore[no-untyped-def]
        system, cost, (_, Xh) = bench
        x0 = system.to_recast(np.array([0.1, 0.0]))
        settings = SimulationSettings(step=1e-2, horizon=30.0)
        run = simulate(system, under.controller(system, cost), x0, settings, region=Xh, cost=cost)
        assert run.converged and not run.escaped
        assert np.all(np.abs(run.controls) <= 1.8 + 1e-12)

    def test_quartic_is_not_worse(self, bench, under: ValueApprox) -> None:  # type: ignore[no-untyped-def]
        system, cost, (X, Xh) = bench
        quartic = synth_under(system, cost, X, Xh, 4)
        assert quartic.verification.passed
        assert quartic.objective >= under.objective - 1e-5
