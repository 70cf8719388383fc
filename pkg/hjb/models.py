from pydantic import BaseModel, ConfigDict


class SetModel(BaseModel):
    """Semialgebraic set as stored in configs and bundles."""

    model_config = ConfigDict(extra="forbid")

    variables: list[str]
    circles: list[list[int]] = []
    """Index pairs (s, c) constrained to the unit circle"""
    spheres: list[list[int]] = []
    """Index quadruples constrained to the unit 3-sphere"""
    equalities: list[str] = []
    """Polynomials in text form, each constrained to equal zero"""
    inequalities: list[str] = []
    """Polynomials in text form, each constrained to be <= 0"""
    lower: list[float | None]
    """Per-variable lower bound, null for unbounded"""
    upper: list[float | None]
    """Per-variable upper bound, null for unbounded"""


class GramBlockModel(BaseModel):
    """One PSD block of a certificate."""

    name: str
    basis: list[list[list[int]]]
    """Monomials as lists of [variable index, power] pairs"""
    gram_lower: list[list[float]]
    """Row i holds entries (i, 0..i) of the symmetric Gram matrix"""


class CertificateModel(BaseModel):
    """Gram blocks and scalar decision values recovered from a solve."""

    variables: list[str]
    blocks: list[GramBlockModel]
    free_values: list[float]
    lp_values: list[float]
    multipliers: dict[str, str] = {}
    """Recovered multiplier polynomials by name, text form"""


class SolverReport(BaseModel):
    """Summary of one conic solve."""

    status: str
    backend: str
    iterations: int
    primal_objective: float
    dual_objective: float
    primal_residual: float
    dual_residual: float
    gap: float
    constraints: int
    block_sizes: list[int]
    free_variables: int
    lp_variables: int


class VerificationEntry(BaseModel):
    name: str
    residual: float
    residual_limit: float
    min_eigenvalue: float
    eigenvalue_limit: float
    passed: bool


class VerificationModel(BaseModel):
    passed: bool
    entries: list[VerificationEntry]


class ValueApproxModel(BaseModel):
    """A synthesized value function approximation."""

    kind: str
    degree: int
    variables: list[str]
    circles: list[list[int]] = []
    spheres: list[list[int]] = []
    J: str
    """Value function in text form"""
    objective: float
    """Normalised moment objective reached by the solver"""
    X: SetModel
    Xh: SetModel
    solver: SolverReport
    verification: VerificationModel
    initial_controller: list[str] | None = None
    """Polynomial part of the saturating controller used by the over program"""
    u_min: list[float | None] | None = None
    """Lower input limits of that controller; None entries are unbounded"""
    u_max: list[float | None] | None = None


class RegionCertificateModel(BaseModel):
    """A certified sublevel set of a value function."""

    kind: str
    level: float
    feasible: bool
    multiplier: str | None = None
    epsilon: float | None = None
    m_basis: list[str] | None = None
    exponent: int | None = None
    sos_lower_bound: float | None = None
    trace: list[tuple[float, bool]] = []
    """Bisection trace of (level, feasible) pairs in evaluation order"""
    diagnostic: str = ""


class TrajectorySummary(BaseModel):
    """Outcome of one simulated trajectory."""

    x0: list[float]
    converged: bool
    escaped: bool
    final_time: float
    accumulated_cost: float
    max_J_increment: float | None = None
    switches: int = 0
    max_drift: float = 0.0
