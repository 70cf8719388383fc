"""SDPA sparse format export/import and the external solver bridge.

The exported file describes the CSDP-convention problem::

    max <F0, Y>  s.t.  <Fi, Y> = ci,  Y >= 0

with ``Y = blkdiag(X_1..X_k, diag(x_lin, x_free+, x_free-))``, ``Fi = A_i``,
``ci = b_i`` and ``F0 = -blkdiag(C, diag(c_lin, c_free, -c_free))``. The first
line is a comment recording the split of the trailing diagonal block so that
``read_sdpa`` can recover free and LP columns.
"""

import logging
import re
import shutil
import subprocess
import tempfile
from collections import defaultdict
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from hjb.config import SolverSettings, solver_binary
from hjb.errors import SdpaFormatError, SynthesisError, UsageError
from hjb.sdp import ConicProblem, Solution, Status, assess

logger = logging.getLogger(__name__)

HEADER_RE = re.compile(r"hjbsos\s+free=(\d+)\s+lp=(\d+)")
SEPARATORS = re.compile(r"[,{}()]")

EXIT_STATUS = {
    0: Status.OPTIMAL,
    1: Status.PRIMAL_INFEASIBLE,
    2: Status.DUAL_INFEASIBLE,
    3: Status.OPTIMAL,
    4: Status.MAX_ITERATIONS,
}


def _fmt(value: float) -> str:
    return f"{value:.17g}"


def export_sdpa(problem: ConicProblem, path: str | Path) -> Path:
    """Write ``problem`` as an SDPA sparse file; returns the path written."""
    path = Path(path)
    n_free, n_lin = problem.n_free, problem.n_lin
    diag_size = n_lin + 2 * n_free
    sizes = problem.block_sizes + ([-diag_size] if diag_size else [])
    if not sizes:
        raise UsageError("problem has no conic variables to export")
    diag_block = len(problem.block_sizes) + 1

    lines = [
        f'"hjbsos free={n_free} lp={n_lin}',
        str(problem.m),
        str(len(sizes)),
        " ".join(str(s) for s in sizes),
        " ".join(_fmt(v) for v in problem.b) if problem.m else "0",
    ]
    for k, c in enumerate(problem.c_blocks, start=1):
        for i, j in zip(*np.nonzero(np.triu(c)), strict=True):
            lines.append(f"0 {k} {i + 1} {j + 1} {_fmt(-c[i, j])}")
    diag_cost = np.concatenate([problem.c_lin, problem.c_free, -problem.c_free])
    for i in np.flatnonzero(diag_cost):
        lines.append(f"0 {diag_block} {i + 1} {i + 1} {_fmt(-diag_cost[i])}")

    a_lin = problem.a_lin.tocsr()
    a_free = problem.a_free.tocsr()
    for row in range(problem.m):
        for k, (a, n) in enumerate(zip(problem.a_blocks, problem.block_sizes, strict=True), start=1):
            start, stop = a.indptr[row], a.indptr[row + 1]
            for idx, value in zip(a.indices[start:stop], a.data[start:stop], strict=True):
                i, j = divmod(int(idx), n)
                if i <= j and value != 0:
                    lines.append(f"{row + 1} {k} {i + 1} {j + 1} {_fmt(value)}")
        start, stop = a_lin.indptr[row], a_lin.indptr[row + 1]
        for idx, value in zip(a_lin.indices[start:stop], a_lin.data[start:stop], strict=True):
            lines.append(f"{row + 1} {diag_block} {idx + 1} {idx + 1} {_fmt(value)}")
        start, stop = a_free.indptr[row], a_free.indptr[row + 1]
        for idx, value in zip(a_free.indices[start:stop], a_free.data[start:stop], strict=True):
            plus = n_lin + idx + 1
            lines.append(f"{row + 1} {diag_block} {plus} {plus} {_fmt(value)}")
            lines.append(f"{row + 1} {diag_block} {plus + n_free} {plus + n_free} {_fmt(-value)}")

    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"wrote SDPA problem with {problem.m} constraints to {path}")
    return path


def _numbers(text: str) -> list[str]:
    return SEPARATORS.sub(" ", text).split()


def read_sdpa(path: str | Path) -> ConicProblem:
    """Parse an SDPA sparse file back into kernel form."""
    path = Path(path)
    name = str(path)
    raw = path.read_text(encoding="utf-8").splitlines()
    n_free, n_lin = None, None
    body: list[tuple[int, str]] = []
    for number, line in enumerate(raw, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped[0] in '"*':
            match = HEADER_RE.search(stripped)
            if match:
                n_free, n_lin = int(match.group(1)), int(match.group(2))
            continue
        body.append((number, stripped))
    if len(body) < 4:
        raise SdpaFormatError(name, len(raw), "file ends before the entry section")

    try:
        m = int(_numbers(body[0][1])[0])
        n_blocks = int(_numbers(body[1][1])[0])
        sizes = [int(float(t)) for t in _numbers(body[2][1])][:n_blocks]
    except (ValueError, IndexError) as e:
        raise SdpaFormatError(name, body[0][0], f"bad header: {e}") from e
    if len(sizes) != n_blocks or n_blocks <= 0:
        raise SdpaFormatError(name, body[2][0], f"expected {n_blocks} block sizes")
    try:
        b = np.array([float(t) for t in _numbers(body[3][1])][:m], dtype=float)
    except ValueError as e:
        raise SdpaFormatError(name, body[3][0], f"bad right-hand side: {e}") from e
    if len(b) != m:
        raise SdpaFormatError(name, body[3][0], f"expected {m} right-hand side values")

    psd = [(k, s) for k, s in enumerate(sizes) if s > 0]
    diag = [(k, -s) for k, s in enumerate(sizes) if s < 0]
    if len(diag) > 1:
        raise SdpaFormatError(name, body[2][0], "more than one diagonal block")
    diag_index = diag[0][0] if diag else -1
    diag_size = diag[0][1] if diag else 0
    if n_free is None:
        n_free, n_lin = 0, diag_size
    if n_lin + 2 * n_free != diag_size:
        raise SdpaFormatError(name, 1, "free/lp split does not match the diagonal block size")

    psd_pos = {k: pos for pos, (k, _) in enumerate(psd)}
    c_blocks = [np.zeros((s, s)) for _, s in psd]
    c_diag = np.zeros(diag_size)
    entries: list[dict[str, list]] = [defaultdict(list) for _ in psd]
    diag_entries: dict[str, list] = defaultdict(list)
    for number, line in body[4:]:
        tokens = _numbers(line)
        if len(tokens) != 5:
            raise SdpaFormatError(name, number, f"expected 5 fields, got {len(tokens)}")
        try:
            mat, blk, i, j = (int(t) for t in tokens[:4])
            value = float(tokens[4])
        except ValueError as e:
            raise SdpaFormatError(name, number, str(e)) from e
        if not 0 <= mat <= m or not 1 <= blk <= n_blocks:
            raise SdpaFormatError(name, number, "constraint or block index out of range")
        k, size = blk - 1, abs(sizes[blk - 1])
        if not (1 <= i <= size and 1 <= j <= size):
            raise SdpaFormatError(name, number, "entry index outside its block")
        i, j = i - 1, j - 1
        if k == diag_index:
            if i != j:
                raise SdpaFormatError(name, number, "off-diagonal entry in a diagonal block")
            if mat == 0:
                c_diag[i] = -value
            else:
                diag_entries["row"].append(mat - 1)
                diag_entries["col"].append(i)
                diag_entries["val"].append(value)
            continue
        pos = psd_pos[k]
        n = sizes[k]
        if mat == 0:
            c_blocks[pos][i, j] = c_blocks[pos][j, i] = -value
            continue
        target = entries[pos]
        pairs = {(i, j), (j, i)}
        for a, c in pairs:
            target["row"].append(mat - 1)
            target["col"].append(a * n + c)
            target["val"].append(value)

    a_blocks = [
        sp.csr_matrix((e["val"], (e["row"], e["col"])), shape=(m, s * s))
        for e, (_, s) in zip(entries, psd, strict=True)
    ]
    a_diag = sp.csr_matrix((diag_entries["val"], (diag_entries["row"], diag_entries["col"])), shape=(m, diag_size))
    return ConicProblem.build(
        b=b,
        c_blocks=c_blocks,
        a_blocks=a_blocks,
        c_lin=c_diag[:n_lin],
        a_lin=a_diag[:, :n_lin],
        c_free=c_diag[n_lin : n_lin + n_free],
        a_free=a_diag[:, n_lin : n_lin + n_free],
    )


def import_solution(path: str | Path, problem: ConicProblem, status: Status) -> Solution:
    """Read a CSDP-style solution file for a problem written by ``export_sdpa``."""
    path = Path(path)
    name = str(path)
    lines = [(n, line.strip()) for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1)]
    lines = [(n, line) for n, line in lines if line]
    if not lines:
        raise SdpaFormatError(name, 1, "empty solution file")
    try:
        y_csdp = np.array([float(t) for t in _numbers(lines[0][1])], dtype=float)
    except ValueError as e:
        raise SdpaFormatError(name, lines[0][0], f"bad dual vector: {e}") from e
    if len(y_csdp) != problem.m:
        raise SdpaFormatError(name, lines[0][0], f"expected {problem.m} dual values, got {len(y_csdp)}")

    sizes = problem.block_sizes
    diag_size = problem.n_lin + 2 * problem.n_free
    z_blocks = [np.zeros((s, s)) for s in sizes]
    x_blocks = [np.zeros((s, s)) for s in sizes]
    z_diag, x_diag = np.zeros(diag_size), np.zeros(diag_size)
    for number, line in lines[1:]:
        tokens = _numbers(line)
        if len(tokens) != 5:
            raise SdpaFormatError(name, number, f"expected 5 fields, got {len(tokens)}")
        try:
            mat, blk, i, j = (int(t) for t in tokens[:4])
            value = float(tokens[4])
        except ValueError as e:
            raise SdpaFormatError(name, number, str(e)) from e
        if mat not in (1, 2):
            raise SdpaFormatError(name, number, f"matrix selector must be 1 or 2, got {mat}")
        k, i, j = blk - 1, i - 1, j - 1
        if k < len(sizes):
            target = (z_blocks if mat == 1 else x_blocks)[k]
            if not (0 <= i < sizes[k] and 0 <= j < sizes[k]):
                raise SdpaFormatError(name, number, "entry index outside its block")
            target[i, j] = target[j, i] = value
        elif k == len(sizes) and diag_size and i == j and 0 <= i < diag_size:
            (z_diag if mat == 1 else x_diag)[i] = value
        else:
            raise SdpaFormatError(name, number, "entry does not belong to any block")

    n_lin, n_free = problem.n_lin, problem.n_free
    x_lin = x_diag[:n_lin]
    x_free = x_diag[n_lin : n_lin + n_free] - x_diag[n_lin + n_free :]
    s_lin = z_diag[:n_lin]
    y = -y_csdp
    quality = assess(problem, x_free, x_lin, x_blocks, y, s_lin, z_blocks)
    return Solution(
        status=status,
        x_free=x_free,
        x_lin=x_lin,
        x_blocks=tuple(x_blocks),
        y=y,
        s_lin=s_lin,
        s_blocks=tuple(z_blocks),
        iterations=0,
        backend="external",
        **quality.__dict__,
    )


def run_external(problem: ConicProblem, settings: SolverSettings | None = None) -> Solution:
    """Export, run an SDPA-format solver binary as ``binary problem solution`` and import."""
    settings = settings or SolverSettings()
    binary = solver_binary(settings)
    executable = shutil.which(binary)
    if executable is None:
        raise UsageError(f"external SDP solver {binary!r} not found; set HJBSOS_SDP_SOLVER")
    with tempfile.TemporaryDirectory(prefix="hjbsos-") as tmp:
        problem_path = export_sdpa(problem, Path(tmp) / "problem.dat-s")
        solution_path = Path(tmp) / "problem.sol"
        logger.info(f"running {executable} on {problem.m} constraints, blocks {problem.block_sizes}")
        result = subprocess.run(
            [executable, str(problem_path), str(solution_path)],
            capture_output=True,
            text=True,
            check=False,
        )
        logger.debug(result.stdout)
        status = EXIT_STATUS.get(result.returncode, Status.NUMERICAL_FAILURE)
        if result.returncode == 3:
            logger.warning(f"{binary} reported partial success; treating the solution as optimal")
        if not solution_path.exists():
            logger.error(f"{binary} exited with {result.returncode} and wrote no solution: {result.stderr.strip()}")
            raise SynthesisError(f"external SDP solver {binary!r} produced no solution file")
        solution = import_solution(solution_path, problem, status)
    logger.info(f"external solve: {solution.status}, pobj={solution.primal_objective:.8g}")
    return solution
