import numpy as np
import pytest

from hjb.errors import CorruptionError, DegreeError, UsageError
from hjb.poly import ONE, Monomial, MomentTable, Polynomial, Registry, SemialgebraicSet
from hjb.sdp import Status
from hjb.soscomp import (
    Certificate,
    PolyExpr,
    SosProgram,
    gram_basis,
    gram_polynomial,
    quotient_leads,
    reduce_basis,
    solve_program,
    verify,
)


@pytest.fixture
def x_only() -> Registry:
    return Registry(("x",))


@pytest.fixture
def xy() -> Registry:
    return Registry(("x", "y"))


def motzkin(registry: Registry) -> Polynomial:
    x, y = registry.variables()
    return x**4 * y**2 + x**2 * y**4 - 3 * x**2 * y**2 + 1


class TestPolyExpr:
    """Tests for decision-affine polynomial expressions"""

    def test_affine_arithmetic(self, x_only: Registry) -> None:
        program = SosProgram(x_only)
        a = program.new_free_poly("a", degree=1)
        (x,) = x_only.variables()
        expr = a * x + 2 * x - 1
        values = np.array([3.0, 5.0])
        # a = values[0] + values[1] x
        assert expr.evaluate_at(values).allclose(5 * x**2 + 5 * x - 1)
        assert expr.degree == 2
        assert expr.decision_ids == frozenset({0, 1})

    def test_nonaffine_product_rejected(self, x_only: Registry) -> None:
        program = SosProgram(x_only)
        a = program.new_free_poly("a", degree=1)
        b = program.new_free_poly("b", degree=1)
        with pytest.raises(UsageError):
            _ = a * b

    def test_at_point(self, x_only: Registry) -> None:
        program = SosProgram(x_only)
        a = program.new_free_poly("a", degree=2)
        pinned = a.at_point([2.0])
        assert set(pinned.terms) == {ONE}
        assert pinned.evaluate_at(np.array([1.0, 1.0, 1.0])).coefficient(ONE) == pytest.approx(7.0)

    def test_integrate(self, x_only: Registry) -> None:
        program = SosProgram(x_only)
        a = program.new_free_poly("a", degree=2)
        box = SemialgebraicSet.box_set(x_only, {"x": (0.0, 1.0)})
        table = MomentTable.build(box, a.terms)
        average = a.integrate(table)
        # 1 + 1/2 + 1/3 for unit coefficients
        assert average.evaluate_at(np.ones(3)).coefficient(ONE) == pytest.approx(11.0 / 6.0)


class TestGramBasis:
    """Tests for basis selection"""

    def test_diagonal_elimination(self, xy: Registry) -> None:
        x, y = xy.variables()
        basis = gram_basis(PolyExpr.from_polynomial(x**2 * y**2 + 1))
        assert basis == [ONE, Monomial([(0, 1), (1, 1)])]

    def test_unpruned_is_full(self, xy: Registry) -> None:
        x, y = xy.variables()
        assert len(gram_basis(PolyExpr.from_polynomial(x**2 * y**2 + 1), prune=False)) == 6

    def test_quotient_leads(self) -> None:
        registry = Registry(("s", "c", "p", "u", "v"), circles=((0, 1),))
        s, c, p, u, v = registry.variables()
        leads = quotient_leads([s**2 + c**2 - 1, p + 0.05, u * v, (u**2 - v**2) * p, c * u])
        assert leads == [Monomial([(1, 2)]), Monomial([(2, 1)]), Monomial([(3, 1), (4, 1)]), None, None]
        basis = [ONE, Monomial([(1, 1)]), Monomial([(1, 2)]), Monomial([(0, 1), (1, 2)]), Monomial([(2, 1)])]
        assert reduce_basis(basis, leads) == [ONE, Monomial([(1, 1)])]


class TestSosProgram:
    """Tests for compiling and solving small SOS programs"""

    def test_global_minimum(self, x_only: Registry) -> None:
        (x,) = x_only.variables()
        program = SosProgram(x_only, "min")
        gamma = program.new_free_poly("gamma", degree=0)
        program.add_sos(x**2 - 2 * x + 3 - gamma)
        program.set_objective(gamma, "max")
        result = solve_program(program)
        assert result.certificate is not None
        assert result.objective == pytest.approx(2.0, abs=1e-5)
        assert verify(result.program, result.certificate).passed

    def test_motzkin_is_not_sos(self, xy: Registry) -> None:
        program = SosProgram(xy, "motzkin")
        program.add_sos(motzkin(xy))
        result = solve_program(program)
        assert result.certificate is None
        assert result.solution.status == Status.PRIMAL_INFEASIBLE

    def test_motzkin_times_square_sum_is_sos(self, xy: Registry) -> None:
        x, y = xy.variables()
        program = SosProgram(xy, "motzkin.product")
        program.add_sos(motzkin(xy) * (x**2 + y**2 + 1))
        result = solve_program(program)
        assert result.certificate is not None

    def test_box_s_procedure(self, x_only: Registry) -> None:
        (x,) = x_only.variables()
        program = SosProgram(x_only, "box")
        gamma = program.new_free_poly("gamma", degree=0)
        box = SemialgebraicSet.box_set(x_only, {"x": (1.0, 2.0)})
        constraint = program.add_nonneg_on_set(x - gamma, box, name="lower")
        program.set_objective(gamma, "max")
        result = solve_program(program)
        assert set(constraint.multipliers) == {"lower.sigma0"}
        assert result.objective == pytest.approx(1.0, abs=1e-5)

    def test_circle_equality_multiplier(self) -> None:
        registry = Registry(("s", "c"), circles=((0, 1),))
        _, c = registry.variables()
        program = SosProgram(registry, "circle")
        gamma = program.new_free_poly("gamma", degree=0)
        constraint = program.add_nonneg_on_set(c - gamma, SemialgebraicSet.box_set(registry), name="circle")
        program.set_objective(gamma, "max")
        result = solve_program(program)
        assert set(constraint.multipliers) == {"circle.tau0"}
        assert result.objective == pytest.approx(-1.0, abs=1e-5)

    def test_objective_must_be_constant(self, x_only: Registry) -> None:
        program = SosProgram(x_only)
        a = program.new_free_poly("a", degree=1)
        with pytest.raises(UsageError):
            program.set_objective(a)

    def test_degree_checks(self, x_only: Registry) -> None:
        (x,) = x_only.variables()
        program = SosProgram(x_only)
        with pytest.raises(DegreeError):
            program.new_sos_poly("odd", degree=3)
        box = SemialgebraicSet.box_set(x_only, {"x": (0.0, 1.0)})
        with pytest.raises(DegreeError):
            program.add_nonneg_on_set(x, box, multiplier_degree=1)

    def test_random_sos_round_trip(self, xy: Registry) -> None:
        rng = np.random.default_rng(5)
        x, y = xy.variables()
        monomials = [Polynomial.constant(xy, 1.0), x, y, x * y, x**2, y**2]
        factor = rng.normal(size=(6, 6))
        gram = factor @ factor.T + np.eye(6)
        p = Polynomial.zero(xy)
        for i, a in enumerate(monomials):
            for j, b in enumerate(monomials):
                p = p + float(gram[i, j]) * a * b
        program = SosProgram(xy, "random")
        program.add_sos(p)
        result = solve_program(program)
        assert result.certificate is not None
        assert verify(result.program, result.certificate).passed
        _, basis, matrix = result.certificate.blocks[-1]
        assert gram_polynomial(xy, basis, matrix).allclose(p, 1e-6 * (1.0 + p.max_abs_coefficient()))

    def test_pruning_keeps_the_optimum(self, xy: Registry) -> None:
        x, y = xy.variables()
        objectives = []
        for prune in (True, False):
            program = SosProgram(xy, "pruned" if prune else "full")
            gamma = program.new_free_poly("gamma", degree=0)
            program.add_sos(x**2 * y**2 + x**2 + y**2 + 1 - gamma)
            program.set_objective(gamma, "max")
            result = solve_program(program, prune=prune)
            assert result.certificate is not None
            objectives.append(result.objective)
        assert objectives[0] == pytest.approx(1.0, abs=1e-5)
        assert objectives[1] == pytest.approx(objectives[0], abs=1e-4)

    def test_square_gets_scalar_block(self, x_only: Registry) -> None:
        (x,) = x_only.variables()
        program = SosProgram(x_only, "square")
        program.add_sos(x**2)
        compiled = program.compile()
        assert [block.basis for block in compiled.blocks] == [(Monomial([(0, 1)]),)]
        assert compiled.problem.block_sizes == []
        assert compiled.problem.n_lin == 1

    def test_half_line_s_procedure(self, x_only: Registry) -> None:
        (x,) = x_only.variables()
        program = SosProgram(x_only, "half_line")
        gamma = program.new_free_poly("gamma", degree=0)
        half_line = SemialgebraicSet.box_set(x_only, {"x": (0.0, np.inf)})
        constraint = program.add_nonneg_on_set(1 + x - gamma, half_line, name="shifted")
        program.set_objective(gamma, "max")
        result = solve_program(program)
        assert set(constraint.multipliers) == {"shifted.sigma0"}
        assert result.certificate is not None
        assert result.objective == pytest.approx(1.0, abs=1e-5)
        assert verify(result.program, result.certificate).passed

    def test_circle_quotient_basis(self) -> None:
        registry = Registry(("s", "c"), circles=((0, 1),))
        s, c = registry.variables()
        program = SosProgram(registry, "circle")
        gamma = program.new_free_poly("gamma", degree=0)
        constraint = program.add_nonneg_on_set(s**4 + c - gamma, SemialgebraicSet.box_set(registry), name="quartic")
        program.set_objective(gamma, "max")
        result = solve_program(program)
        c_squared = Monomial([(1, 2)])
        assert constraint.leads == (c_squared,)
        main = result.program.blocks[result.program.main_blocks[0]]
        assert main.basis and all(m.exponent(1) < 2 for m in main.basis)
        # (1 - c^2)^2 + c is smallest on the circle at c = -1
        assert result.certificate is not None
        assert result.objective == pytest.approx(-1.0, abs=1e-5)
        assert verify(result.program, result.certificate).passed

    def test_empty_program(self, x_only: Registry) -> None:
        with pytest.raises(UsageError):
            SosProgram(x_only).compile()


class TestCertificates:
    """Tests for certificate checking and persistence"""

    @pytest.fixture
    def solved(self, x_only: Registry):  # type: ignore[no-untyped-def]
        (x,) = x_only.variables()
        program = SosProgram(x_only, "bound")
        gamma = program.new_free_poly("gamma", degree=0)
        program.add_sos(x**4 - 2 * x**2 + 3 - gamma)
        program.set_objective(gamma, "max")
        result = solve_program(program)
        assert result.certificate is not None
        return result

    def test_objective(self, solved) -> None:  # type: ignore[no-untyped-def]
        assert solved.objective == pytest.approx(2.0, abs=1e-5)

    def test_tampered_gram_fails(self, solved) -> None:  # type: ignore[no-untyped-def]
        cert = solved.certificate
        name, basis, matrix = cert.blocks[-1]
        tampered = Certificate(
            cert.registry,
            cert.values,
            (*cert.blocks[:-1], (name, basis, matrix - 10.0 * np.eye(len(basis)))),
            cert.free_values,
            cert.lp_values,
        )
        report = verify(solved.program, tampered)
        assert not report.passed
        assert not report.entries[-1].passed

    def test_model_round_trip(self, solved) -> None:  # type: ignore[no-untyped-def]
        model = solved.certificate.to_model()
        rebuilt = solved.program.certificate_from_model(model)
        assert verify(solved.program, rebuilt).passed
        assert solved.program.objective_value(rebuilt) == pytest.approx(solved.objective)

    def test_model_mismatch(self, solved) -> None:  # type: ignore[no-untyped-def]
        model = solved.certificate.to_model()
        model.blocks = model.blocks[:-1]
        with pytest.raises(CorruptionError):
            solved.program.certificate_from_model(model)
