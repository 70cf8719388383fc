from unittest.mock import patch

import numpy as np
import pytest

from hjb.config import SolverSettings
from hjb.errors import UsageError
from hjb.sdp import ConicProblem, Solution, Status, solve, solve_internal


def trace_one_problem(cost: np.ndarray) -> ConicProblem:
    """min <C, X> subject to trace(X) = 1, whose optimum is the smallest eigenvalue of C"""
    n = cost.shape[0]
    return ConicProblem.build(b=[1.0], c_blocks=[cost], a_blocks=[np.eye(n).reshape(1, -1)])


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return (a + a.T) / 2


def stub_solution(status: Status, residual: float) -> Solution:
    return Solution(
        status=status,
        x_free=np.zeros(0),
        x_lin=np.zeros(0),
        x_blocks=(),
        y=np.zeros(0),
        s_lin=np.zeros(0),
        s_blocks=(),
        primal_objective=0.0,
        dual_objective=0.0,
        primal_residual=residual,
        dual_residual=residual,
        gap=residual,
        iterations=1,
    )


class TestConicProblem:
    """Tests for problem construction"""

    def test_shapes(self) -> None:
        problem = trace_one_problem(np.eye(3))
        assert problem.m == 1
        assert problem.block_sizes == [3]
        assert problem.max_block == 3
        assert problem.n_free == 0

    def test_rejects_asymmetric_cost(self) -> None:
        with pytest.raises(UsageError):
            ConicProblem.build(b=[1.0], c_blocks=[[[0.0, 1.0], [0.0, 0.0]]], a_blocks=[np.ones((1, 4))])

    def test_rejects_wrong_block_count(self) -> None:
        with pytest.raises(UsageError):
            ConicProblem.build(b=[1.0], c_blocks=[np.eye(2)], a_blocks=[])

    def test_rejects_wrong_column_count(self) -> None:
        with pytest.raises(UsageError):
            ConicProblem.build(b=[1.0], c_blocks=[np.eye(2)], a_blocks=[np.ones((1, 3))])


class TestInteriorPoint:
    """Tests for the in-repo solver on problems with known optima"""

    def test_smallest_eigenvalue(self) -> None:
        cost = np.array([[2.0, 1.0], [1.0, 3.0]])
        solution = solve_internal(trace_one_problem(cost))
        assert solution.status == Status.OPTIMAL
        assert solution.primal_objective == pytest.approx((5 - np.sqrt(5)) / 2, abs=1e-6)
        assert solution.dual_objective == pytest.approx((5 - np.sqrt(5)) / 2, abs=1e-6)
        assert np.linalg.eigvalsh(solution.x_blocks[0])[0] > -1e-8

    def test_large_block(self) -> None:
        rng = np.random.default_rng(7)
        a = rng.normal(size=(45, 45))
        cost = (a + a.T) / 2
        solution = solve_internal(trace_one_problem(cost))
        assert solution.status == Status.OPTIMAL
        assert solution.primal_objective == pytest.approx(np.linalg.eigvalsh(cost)[0], abs=1e-5)

    def test_linear_program(self) -> None:
        problem = ConicProblem.build(b=[1.0], c_lin=[1.0, 2.0], a_lin=[[1.0, 1.0]])
        solution = solve_internal(problem)
        assert solution.status == Status.OPTIMAL
        assert solution.primal_objective == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_allclose(solution.x_lin, [1.0, 0.0], atol=1e-5)

    def test_free_variable(self) -> None:
        # min x + f  s.t.  x - f = 2,  x >= 0: optimum at x = 0, f = -2
        problem = ConicProblem.build(b=[2.0], c_lin=[1.0], a_lin=[[1.0]], c_free=[1.0], a_free=[[-1.0]])
        solution = solve_internal(problem)
        assert solution.status == Status.OPTIMAL
        assert solution.primal_objective == pytest.approx(-2.0, abs=1e-6)
        assert solution.x_free[0] == pytest.approx(-2.0, abs=1e-5)

    def test_mixed_cones(self) -> None:
        # min <I, X> + t  s.t.  X_00 + t = 1,  X_11 = 0.5,  t >= 0
        a_block = np.zeros((2, 4))
        a_block[0, 0] = 1.0
        a_block[1, 3] = 1.0
        problem = ConicProblem.build(
            b=[1.0, 0.5], c_blocks=[np.eye(2)], a_blocks=[a_block], c_lin=[1.0], a_lin=[[1.0], [0.0]]
        )
        solution = solve_internal(problem)
        assert solution.status == Status.OPTIMAL
        assert solution.primal_objective == pytest.approx(1.5, abs=1e-6)

    def test_infeasible_is_never_accepted(self) -> None:
        problem = ConicProblem.build(b=[-1.0], c_blocks=[np.zeros((2, 2))], a_blocks=[np.eye(2).reshape(1, -1)])
        solution = solve_internal(problem, SolverSettings(max_iterations=60))
        assert solution.status == Status.PRIMAL_INFEASIBLE
        assert not solution.acceptable(1e-6)
        assert solution.ray is not None
        # b.y > 0 with A*(y) = y I <= 0 proves trace(X) = -1 has no PSD solution
        assert float(problem.b @ solution.ray) > 0
        assert solution.ray[0] < 0

    def test_unit_diagonal_correlation(self) -> None:
        # max t  s.t.  [[1, t], [t, 1]] >= 0
        a_block = np.zeros((3, 4))
        a_block[0, 0] = a_block[1, 3] = 1.0
        a_block[2, 1] = a_block[2, 2] = 0.5
        problem = ConicProblem.build(
            b=[1.0, 1.0, 0.0],
            c_blocks=[np.zeros((2, 2))],
            a_blocks=[a_block],
            c_free=[-1.0],
            a_free=[[0.0], [0.0], [-1.0]],
        )
        solution = solve_internal(problem)
        assert solution.status == Status.OPTIMAL
        assert solution.x_free[0] == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_allclose(solution.x_blocks[0], np.ones((2, 2)), atol=1e-6)

    def test_dependent_free_columns(self) -> None:
        # min x + f1 + f2  s.t.  x - f1 - f2 = 2,  x >= 0: only f1 + f2 is determined
        problem = ConicProblem.build(b=[2.0], c_lin=[1.0], a_lin=[[1.0]], c_free=[1.0, 1.0], a_free=[[-1.0, -1.0]])
        solution = solve_internal(problem)
        assert solution.status == Status.OPTIMAL
        assert solution.primal_objective == pytest.approx(-2.0, abs=1e-6)
        assert len(solution.x_free) == 2
        assert solution.x_free.sum() == pytest.approx(-2.0, abs=1e-5)

    def test_unbounded_dependent_columns_are_kept(self) -> None:
        problem = ConicProblem.build(b=[2.0], c_lin=[1.0], a_lin=[[1.0]], c_free=[1.0, 2.0], a_free=[[-1.0, -1.0]])
        solution = solve_internal(problem, SolverSettings(max_iterations=40))
        assert solution.status != Status.OPTIMAL
        assert not solution.acceptable(1e-6)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_weak_duality(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        n, m = 4, 5
        rows = []
        for _ in range(m):
            a = rng.normal(size=(n, n))
            rows.append(((a + a.T) / 2).ravel())
        a_block = np.array(rows)
        # b = A(X0) with X0 > 0 and C = A*(y0) + S0 with S0 > 0 make both sides strictly feasible
        g = rng.normal(size=(n, n))
        b = a_block @ (g @ g.T + np.eye(n)).ravel()
        h = rng.normal(size=(n, n))
        cost = (a_block.T @ rng.normal(size=m)).reshape(n, n) + h @ h.T + np.eye(n)
        solution = solve_internal(ConicProblem.build(b=b, c_blocks=[_symmetrize(cost)], a_blocks=[a_block]))
        assert solution.status == Status.OPTIMAL
        scale = 1.0 + abs(solution.primal_objective)
        assert solution.primal_objective >= solution.dual_objective - 1e-6 * scale
        assert solution.primal_objective - solution.dual_objective <= 1e-6 * scale

    def test_repeat_solves_are_identical(self) -> None:
        rng = np.random.default_rng(3)
        a = rng.normal(size=(6, 6))
        problem = trace_one_problem((a + a.T) / 2)
        first, second = solve_internal(problem), solve_internal(problem)
        assert first.iterations == second.iterations
        assert np.array_equal(first.x_blocks[0], second.x_blocks[0])
        assert np.array_equal(first.y, second.y)
        assert first.primal_objective == second.primal_objective

    def test_empty_row_with_nonzero_rhs(self) -> None:
        a_block = np.zeros((2, 4))
        a_block[0, 0] = 1.0
        problem = ConicProblem.build(b=[1.0, 3.0], c_blocks=[np.eye(2)], a_blocks=[a_block])
        solution = solve_internal(problem)
        assert solution.status == Status.PRIMAL_INFEASIBLE
        assert solution.ray is not None
        assert solution.ray[1] > 0

    def test_report(self) -> None:
        problem = trace_one_problem(np.eye(2))
        report = solve_internal(problem).report(problem)
        assert report.status == "optimal"
        assert report.backend == "internal"
        assert report.block_sizes == [2]


class TestAcceptance:
    """Tests for the stalled-solve acceptance rule"""

    @pytest.mark.parametrize(
        ("status", "residual", "expected"),
        [
            (Status.OPTIMAL, 1.0, True),
            (Status.MAX_ITERATIONS, 1e-7, True),
            (Status.NUMERICAL_FAILURE, 1e-7, True),
            (Status.MAX_ITERATIONS, 1e-3, False),
            (Status.PRIMAL_INFEASIBLE, 0.0, False),
            (Status.DUAL_INFEASIBLE, 0.0, False),
        ],
    )
    def test_acceptable(self, status: Status, residual: float, expected: bool) -> None:
        assert stub_solution(status, residual).acceptable(1e-6) is expected


class TestRouting:
    """Tests for backend selection"""

    def test_external_backend(self) -> None:
        problem = trace_one_problem(np.eye(2))
        stub = stub_solution(Status.OPTIMAL, 0.0)
        with patch("hjb.sdpa.run_external", return_value=stub) as run_external:
            assert solve(problem, SolverSettings(backend="external")) is stub
            run_external.assert_called_once()

    def test_auto_routes_large_blocks(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.setenv("HJBSOS_BLOCK_THRESHOLD", "1")
        problem = trace_one_problem(np.eye(2))
        stub = stub_solution(Status.OPTIMAL, 0.0)
        with patch("hjb.sdpa.run_external", return_value=stub) as run_external:
            solve(problem, SolverSettings(backend="auto"))
            run_external.assert_called_once()

    def test_auto_keeps_small_blocks_internal(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.delenv("HJBSOS_BLOCK_THRESHOLD", raising=False)
        with patch("hjb.sdpa.run_external") as run_external:
            solution = solve(trace_one_problem(np.eye(2)), SolverSettings(backend="auto"))
            run_external.assert_not_called()
        assert solution.backend == "internal"
