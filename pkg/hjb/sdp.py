"""Primal-dual interior-point solver for block-diagonal conic problems.

The kernel form handled here is::

    min  <C, X> + c_lin' x_lin + c_free' x_free
    s.t. A(X) + A_lin x_lin + A_free x_free = b,   X >= 0 (PSD), x_lin >= 0

with dual ``max b'y`` subject to ``C - A*(y) = S >= 0``, ``c_lin - A_lin' y =
s_lin >= 0`` and ``A_free' y = c_free``. Iterates use Nesterov-Todd scaling
and Mehrotra's predictor-corrector; each step solves the normal equations with
the free columns bordered on as an augmented symmetric system.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from hjb.config import SolverSettings, block_threshold
from hjb.errors import UsageError
from hjb.models import SolverReport

logger = logging.getLogger(__name__)

INFEASIBILITY_TOL = 1e-8
RUIZ_PASSES = 5
DEPENDENT_TOL = 1e-10
REFINE_STEPS = 2


class Status(StrEnum):
    OPTIMAL = "optimal"
    PRIMAL_INFEASIBLE = "primal-infeasible"
    DUAL_INFEASIBLE = "dual-infeasible"
    MAX_ITERATIONS = "max-iterations"
    NUMERICAL_FAILURE = "numerical-failure"


def _csr(matrix: Any, shape: tuple[int, int]) -> sp.csr_matrix:
    if matrix is None:
        return sp.csr_matrix(shape)
    result = sp.csr_matrix(matrix, dtype=float)
    if result.shape != shape:
        raise UsageError(f"constraint block has shape {result.shape}, expected {shape}")
    result.sum_duplicates()
    result.eliminate_zeros()
    return result


@dataclass(frozen=True, eq=False)
class ConicProblem:
    """Immutable problem data; ``a_blocks[k]`` maps row-major vec(X_k) to the rows.

    Every row of ``a_blocks[k]`` must hold a symmetric matrix (both (i, j) and
    (j, i) entries stored).
    """

    c_free: np.ndarray
    c_lin: np.ndarray
    c_blocks: tuple[np.ndarray, ...]
    a_free: sp.csr_matrix
    a_lin: sp.csr_matrix
    a_blocks: tuple[sp.csr_matrix, ...]
    b: np.ndarray

    @classmethod
    def build(
        cls,
        b: Any,
        c_blocks: Any = (),
        a_blocks: Any = (),
        c_lin: Any = None,
        a_lin: Any = None,
        c_free: Any = None,
        a_free: Any = None,
    ) -> ConicProblem:
        b = np.asarray(b, dtype=float).ravel()
        m = len(b)
        c_lin = np.zeros(0) if c_lin is None else np.asarray(c_lin, dtype=float).ravel()
        c_free = np.zeros(0) if c_free is None else np.asarray(c_free, dtype=float).ravel()
        c_blocks = tuple(np.atleast_2d(np.asarray(c, dtype=float)) for c in c_blocks)
        if len(a_blocks) != len(c_blocks):
            raise UsageError("need one constraint block per PSD cost block")
        blocks = tuple(_csr(a, (m, c.shape[0] ** 2)) for a, c in zip(a_blocks, c_blocks, strict=True))
        return cls(
            c_free=c_free,
            c_lin=c_lin,
            c_blocks=c_blocks,
            a_free=_csr(a_free, (m, len(c_free))),
            a_lin=_csr(a_lin, (m, len(c_lin))),
            a_blocks=blocks,
            b=b,
        )

    def __post_init__(self) -> None:
        for c in self.c_blocks:
            if c.shape[0] != c.shape[1] or not np.allclose(c, c.T):
                raise UsageError("PSD cost blocks must be square and symmetric")

    @property
    def m(self) -> int:
        return len(self.b)

    @property
    def n_free(self) -> int:
        return len(self.c_free)

    @property
    def n_lin(self) -> int:
        return len(self.c_lin)

    @property
    def block_sizes(self) -> list[int]:
        return [c.shape[0] for c in self.c_blocks]

    @property
    def max_block(self) -> int:
        return max(self.block_sizes, default=0)

    def apply(self, x_free: np.ndarray, x_lin: np.ndarray, x_blocks: list[np.ndarray]) -> np.ndarray:
        value = self.a_free @ x_free + self.a_lin @ x_lin
        for a, x in zip(self.a_blocks, x_blocks, strict=True):
            value = value + a @ x.ravel()
        return np.asarray(value)

    def adjoint(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
        blocks = [(a.T @ y).reshape(c.shape) for a, c in zip(self.a_blocks, self.c_blocks, strict=True)]
        return self.a_free.T @ y, self.a_lin.T @ y, blocks

    def objective(self, x_free: np.ndarray, x_lin: np.ndarray, x_blocks: list[np.ndarray]) -> float:
        value = float(self.c_free @ x_free + self.c_lin @ x_lin)
        return value + sum(float(np.sum(c * x)) for c, x in zip(self.c_blocks, x_blocks, strict=True))

    def cost_norm(self) -> float:
        return float(
            np.sqrt(
                np.sum(self.c_free**2) + np.sum(self.c_lin**2) + sum(np.sum(c**2) for c in self.c_blocks)
            )
        )


@dataclass(frozen=True, eq=False)
class Solution:
    status: Status
    x_free: np.ndarray
    x_lin: np.ndarray
    x_blocks: tuple[np.ndarray, ...]
    y: np.ndarray
    s_lin: np.ndarray
    s_blocks: tuple[np.ndarray, ...]
    primal_objective: float
    dual_objective: float
    primal_residual: float
    dual_residual: float
    gap: float
    iterations: int
    backend: str = "internal"
    ray: np.ndarray | None = field(default=None)
    """Farkas direction: y for primal infeasibility, stacked x for dual infeasibility"""

    def acceptable(self, accept_tol: float) -> bool:
        """Optimal, or stalled at residuals good enough to use with care."""
        if self.status == Status.OPTIMAL:
            return True
        if self.status in (Status.MAX_ITERATIONS, Status.NUMERICAL_FAILURE):
            return max(self.primal_residual, self.dual_residual, self.gap) <= accept_tol
        return False

    def report(self, problem: ConicProblem) -> SolverReport:
        return SolverReport(
            status=str(self.status),
            backend=self.backend,
            iterations=self.iterations,
            primal_objective=self.primal_objective,
            dual_objective=self.dual_objective,
            primal_residual=self.primal_residual,
            dual_residual=self.dual_residual,
            gap=self.gap,
            constraints=problem.m,
            block_sizes=problem.block_sizes,
            free_variables=problem.n_free,
            lp_variables=problem.n_lin,
        )


@dataclass(frozen=True)
class PointQuality:
    primal_objective: float
    dual_objective: float
    primal_residual: float
    dual_residual: float
    gap: float


def assess(
    problem: ConicProblem,
    x_free: np.ndarray,
    x_lin: np.ndarray,
    x_blocks: list[np.ndarray],
    y: np.ndarray,
    s_lin: np.ndarray,
    s_blocks: list[np.ndarray],
) -> PointQuality:
    """Relative residuals and gap of a primal-dual point, in original units."""
    r_p = problem.b - problem.apply(x_free, x_lin, x_blocks)
    at_free, at_lin, at_blocks = problem.adjoint(y)
    r_free = problem.c_free - at_free
    r_lin = problem.c_lin - at_lin - s_lin
    dual_sq = float(np.sum(r_free**2) + np.sum(r_lin**2))
    for c, at, s in zip(problem.c_blocks, at_blocks, s_blocks, strict=True):
        dual_sq += float(np.sum((c - at - s) ** 2))
    pobj = problem.objective(x_free, x_lin, x_blocks)
    dobj = float(problem.b @ y)
    complementarity = float(x_lin @ s_lin) + sum(float(np.sum(x * s)) for x, s in zip(x_blocks, s_blocks, strict=True))
    return PointQuality(
        primal_objective=pobj,
        dual_objective=dobj,
        primal_residual=float(np.linalg.norm(r_p)) / (1.0 + float(np.linalg.norm(problem.b))),
        dual_residual=np.sqrt(dual_sq) / (1.0 + problem.cost_norm()),
        gap=max(abs(pobj - dobj), abs(complementarity)) / (1.0 + abs(pobj) + abs(dobj)),
    )


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _lyap_solve(rhs: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Solve  (Lam Z + Z Lam) / 2 = rhs  for diagonal Lam."""
    return 2.0 * rhs / (lam[:, None] + lam[None, :])


def _max_step(lam: np.ndarray, direction: np.ndarray) -> float:
    """Largest alpha with Lam + alpha * direction still PSD."""
    root = 1.0 / np.sqrt(lam)
    scaled = direction * root[:, None] * root[None, :]
    smallest = float(np.linalg.eigvalsh(_sym(scaled))[0]) if scaled.size else 0.0
    return np.inf if smallest >= 0 else -1.0 / smallest


def _max_step_lin(lam: np.ndarray, direction: np.ndarray) -> float:
    ratios = direction / lam
    smallest = float(ratios.min()) if ratios.size else 0.0
    return np.inf if smallest >= 0 else -1.0 / smallest


@dataclass
class _Scaling:
    rows: np.ndarray
    free: np.ndarray
    free_cols: np.ndarray | None = None
    """Original indices of the free columns kept by the solver; None keeps all"""


def _ruiz(problem: ConicProblem) -> tuple[ConicProblem, _Scaling]:
    """Equilibrate rows of the whole constraint matrix and the free columns."""
    m = problem.m
    d = np.ones(m)
    e = np.ones(problem.n_free)
    for _ in range(RUIZ_PASSES):
        dm = sp.diags(d)
        row_max = np.zeros(m)
        for a in (*problem.a_blocks, problem.a_lin):
            if a.shape[1]:
                row_max = np.maximum(row_max, np.asarray(abs(dm @ a).max(axis=1).todense()).ravel())
        if problem.n_free:
            scaled_free = abs(dm @ problem.a_free @ sp.diags(e))
            row_max = np.maximum(row_max, np.asarray(scaled_free.max(axis=1).todense()).ravel())
            col_max = np.asarray(scaled_free.max(axis=0).todense()).ravel()
            col = np.sqrt(col_max)
            col[col == 0] = 1.0
            e = e / col
        row = np.sqrt(row_max)
        row[row == 0] = 1.0
        d = d / row
    dm = sp.diags(d)
    scaled = ConicProblem(
        c_free=problem.c_free * e,
        c_lin=problem.c_lin,
        c_blocks=problem.c_blocks,
        a_free=sp.csr_matrix(dm @ problem.a_free @ sp.diags(e)),
        a_lin=sp.csr_matrix(dm @ problem.a_lin),
        a_blocks=tuple(sp.csr_matrix(dm @ a) for a in problem.a_blocks),
        b=problem.b * d,
    )
    return scaled, _Scaling(rows=d, free=e)


def _drop_rows(problem: ConicProblem, keep: np.ndarray) -> ConicProblem:
    return ConicProblem(
        c_free=problem.c_free,
        c_lin=problem.c_lin,
        c_blocks=problem.c_blocks,
        a_free=problem.a_free[keep],
        a_lin=problem.a_lin[keep],
        a_blocks=tuple(a[keep] for a in problem.a_blocks),
        b=problem.b[keep],
    )


def _independent_free(problem: ConicProblem) -> tuple[ConicProblem, np.ndarray]:
    """Keep a maximal linearly independent subset of the free columns.

    Dropped columns are fixed at zero; their dual rows hold whenever the kept
    ones do. Nothing is dropped when ``c_free`` does not follow the dependency.
    """
    n_free = problem.n_free
    if n_free == 0:
        return problem, np.arange(0)
    dense = problem.a_free.toarray()
    r, pivots = sla.qr(dense, mode="r", pivoting=True, check_finite=False)
    diagonal = np.abs(np.diag(r))
    rank = int(np.sum(diagonal > DEPENDENT_TOL * max(float(diagonal.max(initial=0.0)), 1.0)))
    if rank == n_free:
        return problem, np.arange(n_free)
    cols = np.sort(pivots[:rank])
    dropped = np.sort(pivots[rank:])
    combination = np.linalg.lstsq(dense[:, cols], dense[:, dropped], rcond=None)[0]
    mismatch = problem.c_free[dropped] - combination.T @ problem.c_free[cols]
    if np.any(np.abs(mismatch) > 1e-8 * (1.0 + np.abs(problem.c_free[dropped]))):
        # an unbounded direction; leave it for the infeasibility check
        return problem, np.arange(n_free)
    logger.debug(f"sdp: dropping {n_free - rank} dependent free columns")
    reduced = ConicProblem(
        c_free=problem.c_free[cols],
        c_lin=problem.c_lin,
        c_blocks=problem.c_blocks,
        a_free=sp.csr_matrix(problem.a_free[:, cols]),
        a_lin=problem.a_lin,
        a_blocks=problem.a_blocks,
        b=problem.b,
    )
    return reduced, cols


def _row_nnz(problem: ConicProblem) -> np.ndarray:
    counts = np.diff(problem.a_free.indptr) + np.diff(problem.a_lin.indptr)
    for a in problem.a_blocks:
        counts = counts + np.diff(a.indptr)
    return counts


class _InteriorPoint:
    """One run of the path-following method on an equilibrated problem."""

    def __init__(
        self,
        problem: ConicProblem,
        original: ConicProblem,
        scaling: _Scaling,
        keep: np.ndarray,
        settings: SolverSettings,
    ) -> None:
        self.p = problem
        self.original = original
        self.scaling = scaling
        self.keep = keep
        self.settings = settings
        self.sizes = problem.block_sizes
        self.nu = sum(self.sizes) + problem.n_lin
        self.touched = [np.flatnonzero(np.diff(a.indptr)) for a in problem.a_blocks]
        self.a_sub = [a[rows] for a, rows in zip(problem.a_blocks, self.touched, strict=True)]
        self.a_free_dense = problem.a_free.toarray()

    # -- starting point ----------------------------------------------------

    def start(self) -> None:
        p = self.p
        b_abs = 1.0 + np.abs(p.b)
        self.x_blocks: list[np.ndarray] = []
        self.s_blocks: list[np.ndarray] = []
        for k, n in enumerate(self.sizes):
            row_norms = np.sqrt(np.asarray(p.a_blocks[k].multiply(p.a_blocks[k]).sum(axis=1)).ravel())
            xi = max(10.0, np.sqrt(n), n * float(np.max(b_abs / (1.0 + row_norms))) if p.m else 10.0)
            eta = max(10.0, np.sqrt(n), float(row_norms.max(initial=0.0)), float(np.linalg.norm(p.c_blocks[k])))
            self.x_blocks.append(xi * np.eye(n))
            self.s_blocks.append(eta * np.eye(n))
        if p.n_lin:
            lin_norms = np.sqrt(np.asarray(p.a_lin.multiply(p.a_lin).sum(axis=0)).ravel())
            xi = max(10.0, float(np.max(b_abs)) if p.m else 10.0)
            eta = max(10.0, float(lin_norms.max(initial=0.0)), float(np.abs(p.c_lin).max(initial=0.0)))
            self.x_lin = np.full(p.n_lin, xi)
            self.s_lin = np.full(p.n_lin, eta)
        else:
            self.x_lin = np.zeros(0)
            self.s_lin = np.zeros(0)
        self.x_free = np.zeros(p.n_free)
        self.y = np.zeros(p.m)

    # -- linear algebra ----------------------------------------------------

    def _schur(self, w_blocks: list[np.ndarray], w_lin: np.ndarray) -> np.ndarray:
        m = self.p.m
        schur = np.zeros((m, m))
        for rows, a, w in zip(self.touched, self.a_sub, w_blocks, strict=True):
            if not len(rows):
                continue
            n = w.shape[0]
            if n <= 40:
                kron = np.kron(w, w)
                block = np.asarray(a @ np.asarray(a @ kron).T)
            else:
                block = np.zeros((len(rows), len(rows)))
                chunk = max(1, int(2e7 // (n * n)))
                for start in range(0, len(rows), chunk):
                    dense = a[start : start + chunk].toarray().reshape(-1, n, n)
                    waw = (w @ dense @ w).reshape(dense.shape[0], n * n)
                    block[:, start : start + chunk] = np.asarray(a @ waw.T)
            schur[np.ix_(rows, rows)] += block
        if self.p.n_lin:
            lin = self.p.a_lin
            schur += np.asarray((lin @ sp.diags(w_lin) @ lin.T).todense())
        return _sym(schur)

    def _factor(self, schur: np.ndarray) -> Any:
        m, n_free = self.p.m, self.p.n_free
        scale = max(1.0, float(np.max(np.abs(np.diag(schur)), initial=0.0)))
        kkt = np.zeros((m + n_free, m + n_free))
        kkt[:m, :m] = schur
        if n_free:
            kkt[:m, m:] = self.a_free_dense
            kkt[m:, :m] = self.a_free_dense.T
        self.kkt = kkt
        regularization = np.concatenate([np.full(m, 1e-13 * scale), np.full(n_free, -1e-13 * scale)])
        return sla.lu_factor(kkt + np.diag(regularization), check_finite=False)

    def _solve_kkt(self, lu: Any, rhs: np.ndarray) -> np.ndarray:
        sol = sla.lu_solve(lu, rhs, check_finite=False)
        if not np.all(np.isfinite(sol)):
            return np.linalg.lstsq(self.kkt, rhs, rcond=None)[0]
        # iterative refinement against the unregularized system
        for _ in range(REFINE_STEPS):
            correction = sla.lu_solve(lu, rhs - self.kkt @ sol, check_finite=False)
            if not np.all(np.isfinite(correction)):
                break
            sol = sol + correction
        return sol

    # -- main loop -----------------------------------------------------------

    def run(self) -> Solution:
        p, settings = self.p, self.settings
        self.start()
        best: tuple[float, Solution] | None = None
        status = Status.MAX_ITERATIONS
        iteration = 0
        for iteration in range(settings.max_iterations + 1):
            at_free, at_lin, at_blocks = p.adjoint(self.y)
            r_p = p.b - p.apply(self.x_free, self.x_lin, self.x_blocks)
            r_free = p.c_free - at_free
            r_lin = p.c_lin - at_lin - self.s_lin
            r_blocks = [_sym(c - at - s) for c, at, s in zip(p.c_blocks, at_blocks, self.s_blocks, strict=True)]
            mu = (
                float(self.x_lin @ self.s_lin)
                + sum(float(np.sum(x * s)) for x, s in zip(self.x_blocks, self.s_blocks, strict=True))
            ) / max(self.nu, 1)

            snapshot = self._snapshot(Status.MAX_ITERATIONS, iteration)
            merit = max(
                snapshot.primal_residual / settings.feas_tol,
                snapshot.dual_residual / settings.feas_tol,
                snapshot.gap / settings.gap_tol,
            )
            if best is None or merit < best[0]:
                best = (merit, snapshot)
            logger.debug(
                f"ipm it={iteration} pobj={snapshot.primal_objective:.8e} dobj={snapshot.dual_objective:.8e} "
                f"pres={snapshot.primal_residual:.2e} dres={snapshot.dual_residual:.2e} gap={snapshot.gap:.2e}"
            )
            if merit <= 1.0:
                return self._snapshot(Status.OPTIMAL, iteration)
            infeasible = self._infeasibility(snapshot, iteration)
            if infeasible is not None:
                return infeasible
            if iteration == settings.max_iterations:
                break

            try:
                scalings = [self._nt(x, s) for x, s in zip(self.x_blocks, self.s_blocks, strict=True)]
            except np.linalg.LinAlgError:
                logger.debug("ipm: iterate left the cone interior")
                status = Status.NUMERICAL_FAILURE
                break
            w_lin = np.sqrt(self.x_lin / self.s_lin) if p.n_lin else np.zeros(0)
            lam_lin = np.sqrt(self.x_lin * self.s_lin) if p.n_lin else np.zeros(0)
            lu = self._factor(self._schur([w for _, w, _ in scalings], w_lin**2))

            # predictor
            rc_blocks = [-np.diag(lam**2) for _, _, lam in scalings]
            rc_lin = -(lam_lin**2)
            aff = self._direction(scalings, w_lin, lam_lin, rc_blocks, rc_lin, r_p, r_free, r_lin, r_blocks, lu)
            alpha_p, alpha_d = self._steps(scalings, lam_lin, aff, 1.0)
            mu_aff = self._mu_after(scalings, lam_lin, aff, alpha_p, alpha_d)
            sigma = float(np.clip((mu_aff / mu) ** 3, 0.0, 1.0)) if mu > 0 else 0.0

            # corrector
            dx_t, ds_t, dxl_t, dsl_t = aff["scaled"]
            rc_blocks = [
                sigma * mu * np.eye(len(lam)) - np.diag(lam**2) - _sym(dx @ ds)
                for (_, _, lam), dx, ds in zip(scalings, dx_t, ds_t, strict=True)
            ]
            rc_lin = sigma * mu - lam_lin**2 - dxl_t * dsl_t
            step = self._direction(scalings, w_lin, lam_lin, rc_blocks, rc_lin, r_p, r_free, r_lin, r_blocks, lu)
            alpha_p, alpha_d = self._steps(scalings, lam_lin, step, settings.step_fraction)
            if alpha_p < 1e-12 and alpha_d < 1e-12:
                logger.debug("ipm: step length collapsed")
                status = Status.NUMERICAL_FAILURE
                break

            self.x_blocks = [_sym(x + alpha_p * dx) for x, dx in zip(self.x_blocks, step["dx"], strict=True)]
            self.x_lin = self.x_lin + alpha_p * step["dxl"]
            self.x_free = self.x_free + alpha_p * step["dxf"]
            self.y = self.y + alpha_d * step["dy"]
            self.s_blocks = [_sym(s + alpha_d * ds) for s, ds in zip(self.s_blocks, step["ds"], strict=True)]
            self.s_lin = self.s_lin + alpha_d * step["dsl"]

        assert best is not None
        final = best[1]
        return Solution(**{**final.__dict__, "status": status, "iterations": iteration})

    def _nt(self, x: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nesterov-Todd scaling: returns (G, W = G G', lambda) with G'SG = G^-1 X G^-T = diag(lambda)."""
        lx = np.linalg.cholesky(x)
        ls = np.linalg.cholesky(s)
        _, sv, vt = np.linalg.svd(ls.T @ lx)
        if sv.min(initial=np.inf) <= 0:
            raise np.linalg.LinAlgError("singular scaling")
        g = (lx @ vt.T) / np.sqrt(sv)[None, :]
        return g, g @ g.T, sv

    def _direction(
        self,
        scalings: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
        w_lin: np.ndarray,
        lam_lin: np.ndarray,
        rc_blocks: list[np.ndarray],
        rc_lin: np.ndarray,
        r_p: np.ndarray,
        r_free: np.ndarray,
        r_lin: np.ndarray,
        r_blocks: list[np.ndarray],
        lu: Any,
    ) -> dict[str, Any]:
        p = self.p
        rt_blocks = [_lyap_solve(rc, lam) for rc, (_, _, lam) in zip(rc_blocks, scalings, strict=True)]
        rt_lin = rc_lin / lam_lin if p.n_lin else np.zeros(0)
        # dX = G Rt G' - W dS W and dS = Rd - A*(dy)
        base_blocks = [
            g @ rt @ g.T - w @ rd @ w for (g, w, _), rt, rd in zip(scalings, rt_blocks, r_blocks, strict=True)
        ]
        base_lin = w_lin * rt_lin - w_lin**2 * r_lin
        rhs_y = r_p - p.apply(np.zeros(p.n_free), base_lin, base_blocks)
        sol = self._solve_kkt(lu, np.concatenate([rhs_y, r_free]))
        dy, dxf = sol[: p.m], sol[p.m :]
        _, at_lin, at_blocks = p.adjoint(dy)
        ds = [_sym(rd - at) for rd, at in zip(r_blocks, at_blocks, strict=True)]
        dsl = r_lin - at_lin
        dx = [_sym(base + w @ at @ w) for base, (_, w, _), at in zip(base_blocks, scalings, at_blocks, strict=True)]
        dxl = base_lin + w_lin**2 * at_lin
        ds_t = [_sym(g.T @ d @ g) for (g, _, _), d in zip(scalings, ds, strict=True)]
        dx_t = [_sym(rt - d) for rt, d in zip(rt_blocks, ds_t, strict=True)]
        dsl_t = w_lin * dsl
        dxl_t = rt_lin - dsl_t
        return {
            "dx": dx,
            "ds": ds,
            "dxl": dxl,
            "dsl": dsl,
            "dxf": dxf,
            "dy": dy,
            "scaled": (dx_t, ds_t, dxl_t, dsl_t),
        }

    def _steps(
        self,
        scalings: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
        lam_lin: np.ndarray,
        direction: dict[str, Any],
        fraction: float,
    ) -> tuple[float, float]:
        dx_t, ds_t, dxl_t, dsl_t = direction["scaled"]
        primal = [_max_step(lam, d) for (_, _, lam), d in zip(scalings, dx_t, strict=True)]
        dual = [_max_step(lam, d) for (_, _, lam), d in zip(scalings, ds_t, strict=True)]
        if self.p.n_lin:
            primal.append(_max_step_lin(lam_lin, dxl_t))
            dual.append(_max_step_lin(lam_lin, dsl_t))
        alpha_p = min([1.0] + [fraction * a for a in primal])
        alpha_d = min([1.0] + [fraction * a for a in dual])
        return alpha_p, alpha_d

    def _mu_after(
        self,
        scalings: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
        lam_lin: np.ndarray,
        direction: dict[str, Any],
        alpha_p: float,
        alpha_d: float,
    ) -> float:
        dx_t, ds_t, dxl_t, dsl_t = direction["scaled"]
        total = float((lam_lin + alpha_p * dxl_t) @ (lam_lin + alpha_d * dsl_t)) if self.p.n_lin else 0.0
        for (_, _, lam), dx, ds in zip(scalings, dx_t, ds_t, strict=True):
            total += float(np.sum((np.diag(lam) + alpha_p * dx) * (np.diag(lam) + alpha_d * ds)))
        return total / max(self.nu, 1)

    # -- results -------------------------------------------------------------

    def _original_point(self) -> tuple[np.ndarray, ...]:
        y = np.zeros(self.original.m)
        y[self.keep] = self.y * self.scaling.rows
        cols = self.scaling.free_cols
        if cols is None:
            return self.x_free * self.scaling.free, self.x_lin.copy(), y
        x_free = np.zeros(self.original.n_free)
        x_free[cols] = self.x_free * self.scaling.free[cols]
        return x_free, self.x_lin.copy(), y

    def _snapshot(self, status: Status, iteration: int) -> Solution:
        x_free, x_lin, y = self._original_point()
        quality = assess(self.original, x_free, x_lin, self.x_blocks, y, self.s_lin, self.s_blocks)
        return Solution(
            status=status,
            x_free=x_free,
            x_lin=x_lin,
            x_blocks=tuple(x.copy() for x in self.x_blocks),
            y=y,
            s_lin=self.s_lin.copy(),
            s_blocks=tuple(s.copy() for s in self.s_blocks),
            iterations=iteration,
            **quality.__dict__,
        )

    def _infeasibility(self, snapshot: Solution, iteration: int) -> Solution | None:
        original = self.original
        dobj, pobj = snapshot.dual_objective, snapshot.primal_objective
        if dobj > 0:
            ray = snapshot.y / dobj
            at_free, at_lin, at_blocks = original.adjoint(ray)
            violation = float(np.linalg.norm(at_free)) + float(np.linalg.norm(np.maximum(at_lin, 0.0)))
            for at in at_blocks:
                violation += max(0.0, float(np.linalg.eigvalsh(_sym(at))[-1]))
            if violation < INFEASIBILITY_TOL:
                logger.info(f"primal infeasibility certified at iteration {iteration}")
                return Solution(**{**snapshot.__dict__, "status": Status.PRIMAL_INFEASIBLE, "ray": ray})
        if pobj < 0:
            scale = -pobj
            blocks = [x / scale for x in snapshot.x_blocks]
            lhs = original.apply(snapshot.x_free / scale, snapshot.x_lin / scale, blocks)
            if float(np.linalg.norm(lhs)) < INFEASIBILITY_TOL:
                logger.info(f"dual infeasibility certified at iteration {iteration}")
                ray = np.concatenate([snapshot.x_free, snapshot.x_lin, *[x.ravel() for x in snapshot.x_blocks]]) / scale
                return Solution(**{**snapshot.__dict__, "status": Status.DUAL_INFEASIBLE, "ray": ray})
        return None


def solve_internal(problem: ConicProblem, settings: SolverSettings | None = None) -> Solution:
    """Run the in-repo interior-point method; never raises on numerical trouble."""
    settings = settings or SolverSettings()
    counts = _row_nnz(problem)
    empty = counts == 0
    if np.any(empty & (np.abs(problem.b) > 0)):
        row = int(np.flatnonzero(empty & (np.abs(problem.b) > 0))[0])
        logger.info(f"constraint row {row} has no variables but a nonzero right-hand side")
        ray = np.zeros(problem.m)
        ray[row] = np.sign(problem.b[row]) / abs(problem.b[row])
        zeros = [np.zeros_like(c) for c in problem.c_blocks]
        return Solution(
            status=Status.PRIMAL_INFEASIBLE,
            x_free=np.zeros(problem.n_free),
            x_lin=np.zeros(problem.n_lin),
            x_blocks=tuple(zeros),
            y=ray,
            s_lin=np.zeros(problem.n_lin),
            s_blocks=tuple(zeros),
            primal_objective=0.0,
            dual_objective=1.0,
            primal_residual=float(np.linalg.norm(problem.b)) / (1.0 + float(np.linalg.norm(problem.b))),
            dual_residual=0.0,
            gap=0.0,
            iterations=0,
            ray=ray,
        )
    keep = np.flatnonzero(~empty)
    reduced = _drop_rows(problem, keep) if len(keep) < problem.m else problem
    scaled, scaling = _ruiz(reduced)
    scaled, cols = _independent_free(scaled)
    if len(cols) < problem.n_free:
        scaling.free_cols = cols
    solver = _InteriorPoint(scaled, problem, scaling, keep, settings)
    solution = solver.run()
    logger.info(
        f"sdp: {solution.status} after {solution.iterations} iterations, "
        f"pobj={solution.primal_objective:.8g} dobj={solution.dual_objective:.8g}"
    )
    return solution


def solve(problem: ConicProblem, settings: SolverSettings | None = None) -> Solution:
    """Solve with the backend chosen by ``settings`` and the largest block size."""
    settings = settings or SolverSettings()
    use_external = settings.backend == "external" or (
        settings.backend == "auto" and problem.max_block > block_threshold(settings)
    )
    if use_external:
        from hjb.sdpa import run_external  # pylint: disable=import-outside-toplevel

        logger.info(f"routing problem with largest block {problem.max_block} to the external solver")
        return run_external(problem, settings)
    return solve_internal(problem, settings)
