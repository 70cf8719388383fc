import numpy as np
import pytest

from hjb.errors import UnsupportedRegionError, UsageError
from hjb.poly import (
    ONE,
    Monomial,
    MomentTable,
    Polynomial,
    PolynomialArray,
    Registry,
    SemialgebraicSet,
    monomials_up_to,
    moment,
    monte_carlo_moment,
    region_measure,
)


@pytest.fixture
def xy() -> Registry:
    return Registry(("x", "y"))


@pytest.fixture
def pendulum_registry() -> Registry:
    """s, c on the unit circle plus an angular rate"""
    return Registry(("s", "c", "w"), circles=((0, 1),))


class TestMonomial:
    """Tests for Monomial bookkeeping"""

    def test_zero_powers_are_dropped(self) -> None:
        assert Monomial([(0, 0), (1, 2)]) == Monomial([(1, 2)])
        assert Monomial.from_exponents([0, 0]) == ONE

    def test_product_merges_powers(self) -> None:
        m = Monomial([(0, 1)]) * Monomial([(0, 2), (1, 1)])
        assert m == Monomial([(0, 3), (1, 1)])
        assert m.degree == 4

    def test_derivative(self) -> None:
        power, reduced = Monomial([(0, 3), (1, 1)]).derivative(0)
        assert power == 3
        assert reduced == Monomial([(0, 2), (1, 1)])
        assert Monomial([(1, 1)]).derivative(0) == (0, ONE)

    def test_negative_power_rejected(self) -> None:
        with pytest.raises(UsageError):
            Monomial([(0, -1)])

    def test_graded_basis(self) -> None:
        basis = monomials_up_to([0, 1], 2)
        assert len(basis) == 6
        assert basis[0] == ONE
        assert [m.degree for m in basis] == sorted(m.degree for m in basis)


class TestPolynomial:
    """Tests for polynomial arithmetic, calculus and text"""

    def test_arithmetic_and_evaluation(self, xy: Registry) -> None:
        x, y = xy.variables()
        p = (x + 2 * y) ** 2 - 3
        assert p.degree == 2
        assert p.evaluate([1.0, 1.0]) == pytest.approx(6.0)
        batch = np.array([[0.0, 0.0], [1.0, -1.0]])
        np.testing.assert_allclose(p.evaluate(batch), [-3.0, -2.0])

    def test_cancellation_leaves_zero(self, xy: Registry) -> None:
        x, _ = xy.variables()
        assert (x - x).is_zero()
        assert Polynomial.zero(xy).evaluate([3.0, 4.0]) == 0.0

    def test_gradient(self, xy: Registry) -> None:
        x, y = xy.variables()
        p = x**2 * y + 3 * y
        dx, dy = p.gradient()
        assert dx.allclose(2 * x * y)
        assert dy.allclose(x**2 + 3)

    def test_derivative_matches_finite_differences(self, pendulum_registry: Registry) -> None:
        s, c, w = pendulum_registry.variables()
        p = s**3 * w - 2 * c**2 * w**2 + 0.5 * s * c + w**4 - 1
        rng = np.random.default_rng(11)
        step = 1e-6
        for x in rng.uniform(-1.5, 1.5, size=(5, 3)):
            for i in range(3):
                shift = np.zeros(3)
                shift[i] = step
                central = (p.evaluate(x + shift) - p.evaluate(x - shift)) / (2 * step)
                assert p.differentiate(i).evaluate(x) == pytest.approx(central, rel=1e-6, abs=1e-6)

    def test_substitute(self, xy: Registry) -> None:
        x, y = xy.variables()
        p = x**2 + y
        q = p.substitute({"x": y + 1, "y": 2.0})
        assert q.allclose(y**2 + 2 * y + 3)

    def test_registry_mismatch(self, xy: Registry) -> None:
        other = Registry(("a", "b"))
        with pytest.raises(UsageError):
            _ = xy.variable("x") + other.variable("a")

    def test_lift_onto_extension(self, xy: Registry) -> None:
        extended = xy.extend(["u"])
        p = xy.variable("x") * 2
        lifted = p.lift(extended)
        assert lifted.evaluate([1.0, 0.0, 5.0]) == pytest.approx(2.0)
        with pytest.raises(UsageError):
            p.lift(Registry(("u", "x", "y")))

    def test_text_round_trip(self, pendulum_registry: Registry) -> None:
        s, c, w = pendulum_registry.variables()
        p = 0.5 * w**2 - 1e-5 * s * c + 3.25 - c
        back = Polynomial.parse(p.to_text(), pendulum_registry)
        assert back.allclose(p, 0.0)

    @pytest.mark.parametrize("text", ["", "x +", "x^y", "q", "x ** 2"])
    def test_parse_errors(self, xy: Registry, text: str) -> None:
        with pytest.raises(UsageError):
            Polynomial.parse(text, xy)

    def test_negative_power_rejected(self, xy: Registry) -> None:
        with pytest.raises(UsageError):
            _ = xy.variable("x") ** -1

    def test_array_matches_entries(self, xy: Registry) -> None:
        x, y = xy.variables()
        polys = [x * y, x + 1, y**3]
        array = PolynomialArray(polys)
        points = np.random.default_rng(0).normal(size=(7, 2))
        expected = np.stack([p.evaluate(points) for p in polys], axis=1)
        np.testing.assert_allclose(array(points), expected)
        np.testing.assert_allclose(array(points[0]), expected[0])


class TestRegistry:
    """Tests for manifold flags"""

    def test_manifold_equalities_and_projection(self, pendulum_registry: Registry) -> None:
        (eq,) = pendulum_registry.manifold_equalities()
        assert eq.evaluate([0.6, 0.8, 5.0]) == pytest.approx(0.0)
        projected = pendulum_registry.project(np.array([3.0, 4.0, 2.0]))
        np.testing.assert_allclose(projected, [0.6, 0.8, 2.0])
        assert pendulum_registry.manifold_residual(projected) < 1e-12

    def test_duplicate_names(self) -> None:
        with pytest.raises(UsageError):
            Registry(("x", "x"))

    def test_overlapping_manifolds(self) -> None:
        with pytest.raises(UsageError):
            Registry(("a", "b", "c"), circles=((0, 1), (1, 2)))


class TestSemialgebraicSet:
    """Tests for sets, membership and sampling"""

    def test_box_membership(self, xy: Registry) -> None:
        box = SemialgebraicSet.box_set(xy, {"x": (-1, 1), "y": (0, 2)})
        assert box.contains([0.5, 1.0])
        assert not box.contains([1.5, 1.0])
        np.testing.assert_array_equal(box.contains(np.array([[0.0, 0.0], [0.0, 3.0]])), [True, False])
        assert box.is_bounded

    def test_box_inequalities(self, xy: Registry) -> None:
        half = SemialgebraicSet.box_set(xy, {"x": (-1, 1), "y": (0, np.inf)})
        ineqs = half.box_inequalities()
        assert len(ineqs) == 2
        assert ineqs[0].evaluate([0.0, 0.0]) == pytest.approx(-1.0)
        assert ineqs[1].evaluate([0.0, 3.0]) == pytest.approx(-3.0)
        assert not half.is_bounded

    def test_face(self, xy: Registry) -> None:
        box = SemialgebraicSet.box_set(xy, {"x": (-1, 1), "y": (0, 2)})
        top = box.face("y", "upper")
        assert top.contains([0.3, 2.0])
        assert not top.contains([0.3, 1.9])
        assert len(box.boundary_faces()) == 4

    def test_sampling_stays_inside(self, pendulum_registry: Registry) -> None:
        region = SemialgebraicSet.box_set(pendulum_registry, {"w": (-2, 2)})
        points = region.sample(500, np.random.default_rng(1))
        assert points.shape == (500, 3)
        assert np.all(region.contains(points))

    def test_sampling_rejects_unbounded(self, xy: Registry) -> None:
        region = SemialgebraicSet.box_set(xy, {"x": (-1, 1)})
        with pytest.raises(UsageError):
            region.sample(10, np.random.default_rng(0))

    def test_model_round_trip(self, pendulum_registry: Registry) -> None:
        region = SemialgebraicSet.box_set(pendulum_registry, {"w": (-2, 2)})
        back = SemialgebraicSet.from_model(region.to_model())
        assert back.lower == region.lower
        assert back.upper == region.upper
        assert back.registry.circles == ((0, 1),)
        assert back.equalities[0].to_text() == region.equalities[0].to_text()
        assert back.contains([0.0, 1.0, 1.0])
        assert not back.contains([0.0, 1.0, 3.0])


class TestMoments:
    """Tests for exact region moments"""

    def test_box_moments(self, xy: Registry) -> None:
        box = SemialgebraicSet.box_set(xy, {"x": (-1, 1), "y": (0, 2)})
        assert region_measure(box) == pytest.approx(4.0)
        assert moment(Monomial([(0, 2)]), box) == pytest.approx(4.0 / 3.0)
        assert moment(Monomial([(0, 1)]), box) == pytest.approx(0.0)

    def test_circle_moments(self, pendulum_registry: Registry) -> None:
        region = SemialgebraicSet.box_set(pendulum_registry, {"w": (-1, 1)})
        assert region_measure(region) == pytest.approx(4 * np.pi)
        assert moment(Monomial([(0, 2)]), region) == pytest.approx(2 * np.pi)
        assert moment(Monomial([(0, 1), (1, 1)]), region) == pytest.approx(0.0)

    def test_sphere_area(self) -> None:
        registry = Registry(("a", "b", "c", "d"), spheres=((0, 1, 2, 3),))
        region = SemialgebraicSet.box_set(registry)
        assert region_measure(region) == pytest.approx(2 * np.pi**2)

    def test_matches_monte_carlo(self, pendulum_registry: Registry) -> None:
        region = SemialgebraicSet.box_set(pendulum_registry, {"w": (-1, 2)})
        m = Monomial([(1, 2), (2, 2)])
        estimate, error = monte_carlo_moment(m, region, 20_000, np.random.default_rng(3))
        assert abs(estimate - moment(m, region)) < 5 * error

    def test_table_average(self, xy: Registry) -> None:
        x, y = xy.variables()
        box = SemialgebraicSet.box_set(xy, {"x": (-1, 1), "y": (-1, 1)})
        p = x**2 + y**2
        table = MomentTable.build(box, p.monomials())
        assert table.average(p) == pytest.approx(2.0 / 3.0)

    def test_moments_are_linear(self, pendulum_registry: Registry) -> None:
        s, c, w = pendulum_registry.variables()
        region = SemialgebraicSet.box_set(pendulum_registry, {"w": (-1, 2)})
        p = s**2 * w + c
        q = w**3 - s * c + 2
        combined = 2.5 * p - q
        table = MomentTable.build(region, {*p.monomials(), *q.monomials(), *combined.monomials()})
        assert table.integrate(combined) == pytest.approx(2.5 * table.integrate(p) - table.integrate(q))
        by_term = sum(coefficient * moment(m, region) for m, coefficient in p.terms.items())
        assert table.integrate(p) == pytest.approx(by_term)

    def test_unsupported_regions(self, xy: Registry) -> None:
        x, _ = xy.variables()
        with pytest.raises(UnsupportedRegionError):
            moment(ONE, SemialgebraicSet.box_set(xy, {"x": (-1, 1)}))
        disk = SemialgebraicSet.box_set(xy, {"x": (-1, 1), "y": (-1, 1)}, inequalities=[x**2 - 1])
        with pytest.raises(UnsupportedRegionError):
            moment(ONE, disk)
