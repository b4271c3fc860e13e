"""Parameterized problem definition: affine coefficient expansions over the
parameter box, cost and bound data, and the explicit constants used by the
certified error bounds.

Coefficient terms are declared in a structured config file as closed-form
expressions over mu1..mup together with per-term Holder data (L, gamma) and a
spatial field (per-tet constant data). Expressions are parsed through a
whitelisted AST, so config files cannot execute arbitrary code.

The constants ledger is a pure function of the problem data and three
computable stability estimates (kernel coercivity, divergence inf-sup,
Poincare). The continuous-level stability constant of the analysis is not
available in closed form; it is replaced by the discrete Brezzi bound
max(C, C*eps_hi, (1/beta)(1 + C/sigma_lo)*C_P), which keeps every downstream
constant computable. All ledger formulas are otherwise evaluated exactly as
stated by the analysis.
"""

import ast
import importlib.resources
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .mesh import tet_volumes


class ConfigError(Exception):
    """Raised for malformed problem files or inconsistent problem data."""


class DomainError(Exception):
    """Raised when a parameter lies outside the declared parameter box."""


# ---------------------------------------------------------------------------
# expression evaluation (config-declared closed forms)

_ALLOWED_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
}
_ALLOWED_CONSTS = {"pi": math.pi, "e": math.e}
_ALLOWED_NODES = (
    ast.Expression,
    ast.BinOp,
    ast.UnaryOp,
    ast.Constant,
    ast.Name,
    ast.Call,
    ast.Load,
    ast.Add,
    ast.Sub,
    ast.Mult,
    ast.Div,
    ast.Pow,
    ast.USub,
    ast.UAdd,
)


def compile_expression(text, variables):
    """Compile a closed-form expression over the given variable names.

    Only arithmetic, the whitelisted math functions and the declared
    variables are accepted; anything else raises ConfigError.
    """
    if not isinstance(text, str):
        raise ConfigError(f"expression must be a string, got {text!r}")
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"bad expression {text!r}: {exc.msg}") from None
    known = set(variables) | set(_ALLOWED_FUNCS) | set(_ALLOWED_CONSTS)
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ConfigError(
                f"disallowed syntax {type(node).__name__} in expression {text!r}"
            )
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _ALLOWED_FUNCS:
                raise ConfigError(f"disallowed call in expression {text!r}")
            if node.keywords:
                raise ConfigError(f"keyword arguments not allowed in {text!r}")
        elif isinstance(node, ast.Name) and node.id not in known:
            raise ConfigError(f"unknown name {node.id!r} in expression {text!r}")
    return compile(tree, "<expression>", "eval")


def _evaluate(code, scope):
    full = dict(_ALLOWED_CONSTS)
    full.update(_ALLOWED_FUNCS)
    full.update(scope)
    return eval(code, {"__builtins__": {}}, full)


# ---------------------------------------------------------------------------
# domain, coefficient terms

@dataclass
class ParameterDomain:
    """Compact box of admissible parameters, optionally with a training grid."""

    lower: np.ndarray
    upper: np.ndarray
    training_grid: tuple = None

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if self.lower.ndim != 1 or self.lower.shape != self.upper.shape:
            raise ConfigError("parameter bounds must be equal-length vectors")
        if not np.all(self.lower < self.upper):
            raise ConfigError("parameter box needs lower < upper per coordinate")
        if self.training_grid is not None:
            self.training_grid = tuple(int(k) for k in self.training_grid)
            if len(self.training_grid) != self.dimension or min(self.training_grid) < 1:
                raise ConfigError("training grid must give a positive count per coordinate")

    @property
    def dimension(self):
        return self.lower.size

    def contains(self, mu, tol=1e-12):
        mu = np.asarray(mu, dtype=float)
        if mu.shape != self.lower.shape:
            return False
        slack = tol * np.maximum(1.0, np.abs(self.upper) + np.abs(self.lower))
        return bool(np.all(mu >= self.lower - slack) and np.all(mu <= self.upper + slack))

    def require(self, mu):
        if not self.contains(mu):
            raise DomainError(f"parameter {np.asarray(mu)} outside box")
        return np.asarray(mu, dtype=float)

    def training_points(self):
        """Tensor grid of training parameters in row-major (first axis slowest) order."""
        if self.training_grid is None:
            raise ConfigError("no training grid declared for this domain")
        axes = [
            np.linspace(lo, hi, k) if k > 1 else np.array([0.5 * (lo + hi)])
            for lo, hi, k in zip(self.lower, self.upper, self.training_grid)
        ]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)

    def sample(self, count, seed):
        """Uniform random parameters, reproducible for a fixed seed."""
        if count < 1:
            raise ConfigError("sample count must be positive")
        rng = np.random.default_rng(seed)
        pts = rng.random((count, self.dimension))
        return self.lower + pts * (self.upper - self.lower)


@dataclass
class ThetaTerm:
    """One affine coefficient factor: closed form over mu plus Holder data."""

    expression: str
    holder_constant: float = 1.0
    holder_exponent: float = 1.0

    def __post_init__(self):
        self.holder_constant = float(self.holder_constant)
        self.holder_exponent = float(self.holder_exponent)
        if self.holder_constant < 0 or self.holder_exponent <= 0:
            raise ConfigError(
                f"term {self.expression!r} needs L >= 0 and gamma > 0"
            )
        self._code = compile_expression(self.expression, _MU_NAMES)

    def evaluate(self, mu):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        scope = {"mu": mu}
        for i, v in enumerate(mu):
            scope[f"mu{i + 1}"] = float(v)
        try:
            return float(_evaluate(self._code, scope))
        except NameError as exc:
            raise ConfigError(
                f"expression {self.expression!r} does not fit a "
                f"{mu.size}-dimensional parameter: {exc}"
            ) from None


# generous upper bound on parameter dimension for name validation
_MU_NAMES = ("mu",) + tuple(f"mu{i}" for i in range(1, 17))


@dataclass
class AffineDecomposition:
    """Affine expansions of every mu-dependent datum.

    Scalar coefficient fields are per-tet vectors of shape (Q, T); the
    desired control is (Q, T, 3). Desired state terms carry a kind tag:
    "tet" fields are (T, 3) per-tet vectors supported on the observation
    region, "edge" fields are coefficient vectors of the edge space (used
    when the desired state is itself a finite element field).
    """

    domain: ParameterDomain
    sigma_inv_terms: list
    sigma_inv_fields: np.ndarray
    eps_terms: list
    eps_fields: np.ndarray
    rho_terms: list
    rho_fields: np.ndarray
    ud_terms: list = field(default_factory=list)
    ud_fields: np.ndarray = None
    ed_terms: list = field(default_factory=list)
    ed_fields: list = field(default_factory=list)

    def __post_init__(self):
        self.sigma_inv_fields = np.atleast_2d(np.asarray(self.sigma_inv_fields, dtype=float))
        self.eps_fields = np.atleast_2d(np.asarray(self.eps_fields, dtype=float))
        self.rho_fields = np.atleast_2d(np.asarray(self.rho_fields, dtype=float))
        if self.ud_fields is None:
            self.ud_fields = np.zeros((0, self.eps_fields.shape[1], 3))
        self.ud_fields = np.asarray(self.ud_fields, dtype=float)
        for name, terms, fields in (
            ("sigma_inv", self.sigma_inv_terms, self.sigma_inv_fields),
            ("eps", self.eps_terms, self.eps_fields),
            ("rho", self.rho_terms, self.rho_fields),
            ("ud", self.ud_terms, self.ud_fields),
            ("ed", self.ed_terms, self.ed_fields),
        ):
            if len(terms) != len(fields):
                raise ConfigError(f"{name}: {len(terms)} terms but {len(fields)} fields")
        if not (len(self.sigma_inv_terms) and len(self.eps_terms) and len(self.rho_terms)):
            raise ConfigError("sigma_inv, eps and rho each need at least one term")
        for kind, arr in self.ed_fields:
            if kind not in ("tet", "edge"):
                raise ConfigError(f"unknown desired-state field kind {kind!r}")

    def _theta(self, terms, mu):
        mu = self.domain.require(mu)
        return np.array([t.evaluate(mu) for t in terms])

    def theta_sigma_inv(self, mu):
        return self._theta(self.sigma_inv_terms, mu)

    def theta_eps(self, mu):
        return self._theta(self.eps_terms, mu)

    def theta_rho(self, mu):
        return self._theta(self.rho_terms, mu)

    def theta_ud(self, mu):
        return self._theta(self.ud_terms, mu)

    def theta_ed(self, mu):
        return self._theta(self.ed_terms, mu)

    def sigma_inv_at(self, mu):
        return self.theta_sigma_inv(mu) @ self.sigma_inv_fields

    def eps_at(self, mu):
        return self.theta_eps(mu) @ self.eps_fields

    def rho_at(self, mu):
        return self.theta_rho(mu) @ self.rho_fields

    def ud_at(self, mu):
        if not self.ud_terms:
            return np.zeros((self.eps_fields.shape[1], 3))
        return np.einsum("q,qti->ti", self.theta_ud(mu), self.ud_fields)

    def ed_term_arrays(self, espace):
        """Desired-state term fields in the layout the assembly expects."""
        for kind, arr in self.ed_fields:
            if kind == "edge" and arr.shape != (espace.num_dofs,):
                raise ConfigError("edge-kind desired-state field does not match the space")
        return self.ed_fields

    def holder_data(self, which):
        """(L, gamma) of a coefficient field: worst case over its terms."""
        terms = {
            "sigma_inv": self.sigma_inv_terms,
            "eps": self.eps_terms,
            "rho": self.rho_terms,
            "ud": self.ud_terms,
            "ed": self.ed_terms,
        }[which]
        if not terms:
            raise ConfigError(f"no terms declared for {which}")
        return (
            max(t.holder_constant for t in terms),
            min(t.holder_exponent for t in terms),
        )


def evaluate_coefficients(decomp, mu):
    """All affine coefficient vectors at one parameter."""
    return {
        "sigma_inv": decomp.theta_sigma_inv(mu),
        "eps": decomp.theta_eps(mu),
        "rho": decomp.theta_rho(mu),
        "ud": decomp.theta_ud(mu),
        "ed": decomp.theta_ed(mu),
    }


# ---------------------------------------------------------------------------
# problem data and the constants ledger

@dataclass
class ProblemData:
    """Scalar problem data: cost weights, box bounds, caps, domain measure."""

    alpha: float
    control_lower: np.ndarray
    control_upper: np.ndarray
    sigma_bounds: tuple
    eps_bounds: tuple
    rho_bounds: tuple
    ud_cap: float
    ed_cap: float
    volume: float
    d_box: np.ndarray = None

    def __post_init__(self):
        self.alpha = float(self.alpha)
        self.control_lower = np.asarray(self.control_lower, dtype=float).reshape(3)
        self.control_upper = np.asarray(self.control_upper, dtype=float).reshape(3)
        self.sigma_bounds = (float(self.sigma_bounds[0]), float(self.sigma_bounds[1]))
        self.eps_bounds = (float(self.eps_bounds[0]), float(self.eps_bounds[1]))
        self.rho_bounds = (float(self.rho_bounds[0]), float(self.rho_bounds[1]))
        self.ud_cap = float(self.ud_cap)
        self.ed_cap = float(self.ed_cap)
        self.volume = float(self.volume)
        if self.d_box is not None:
            self.d_box = np.asarray(self.d_box, dtype=float).reshape(6)
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.sigma_bounds[0] <= 0 or self.sigma_bounds[0] > self.sigma_bounds[1]:
            raise ConfigError("sigma bounds need 0 < lo <= hi")
        if self.eps_bounds[0] <= 0 or self.eps_bounds[0] > self.eps_bounds[1]:
            raise ConfigError("eps bounds need 0 < lo <= hi")
        if self.rho_bounds[0] > self.rho_bounds[1]:
            raise ConfigError("rho bounds need lo <= hi")
        if not np.all(self.control_lower <= self.control_upper):
            raise ConfigError("control bounds need lower <= upper componentwise")
        if self.ud_cap < 0 or self.ed_cap < 0:
            raise ConfigError("desired-data caps must be nonnegative")
        if self.volume <= 0:
            raise ConfigError("domain volume must be positive")

    @property
    def control_bound_norm(self):
        """Largest Euclidean norm over the corners of the control box."""
        corners = itertools.product(*zip(self.control_lower, self.control_upper))
        return max(math.sqrt(sum(c * c for c in corner)) for corner in corners)

    @property
    def rho_bound(self):
        return max(abs(self.rho_bounds[0]), abs(self.rho_bounds[1]))


@dataclass(frozen=True)
class ConstantsLedger:
    """Every explicit constant of the certified bounds.

    abs_e/abs_f weight the residual dual norms in the absolute error
    indicator; sandwich_* give the two-sided bound on the combined
    control/state/adjoint error; cost_e/cost_f bound the cost gap;
    the holder_* constants enter the parameter-continuity bound.
    """

    coercivity: float
    infsup: float
    poincare: float
    stability: float
    c_e: float
    c_f: float
    abs_e: float
    abs_f: float
    sandwich_up_e: float
    sandwich_up_f: float
    sandwich_lo_e: float
    sandwich_lo_f: float
    cost_e: float
    cost_f: float
    holder_sigma_half: float
    holder_eps_half: float
    holder_eps_one: float
    holder_ud_one: float
    holder_ed_half: float


def build_constants(data, decomp, coercivity_estimate, infsup_estimate, poincare_estimate):
    """Assemble the constants ledger from the three stability estimates.

    `coercivity_estimate` bounds the inverse of the curl-form coercivity
    constant on the discretely divergence-free kernel, `infsup_estimate`
    the divergence inf-sup constant, `poincare_estimate` the nodal
    Poincare constant; all three worst-cased over a parameter sample.
    """
    for name, val in (
        ("coercivity_estimate", coercivity_estimate),
        ("infsup_estimate", infsup_estimate),
        ("poincare_estimate", poincare_estimate),
    ):
        if not (np.isfinite(val) and val > 0):
            raise ValueError(f"{name} must be positive and finite, got {val}")

    c = float(coercivity_estimate)
    s_lo = data.sigma_bounds[0]
    e_lo, e_hi = data.eps_bounds
    a = data.alpha
    ra = math.sqrt(a)
    vol_half = math.sqrt(data.volume)
    u_norm = data.control_bound_norm
    ed, ud = data.ed_cap, data.ud_cap

    # discrete Brezzi stability bound standing in for the analytic constant:
    # state bound uses C and the multiplier branch, adjoint bound needs C*eps_hi
    stability = max(c, c * e_hi, (1.0 / infsup_estimate) * (1.0 + c / s_lo) * poincare_estimate)
    c_e = stability * vol_half * (data.rho_bound + u_norm)
    c_f = stability * (ed + c_e)

    abs_e = c * e_hi / (e_lo * ra)
    abs_f = c * e_hi / (e_lo * a)

    up_e = c * (e_hi / (e_lo * ra) + (1.0 + c * e_hi) * (c * e_hi**2 / (e_lo * ra) + 1.0))
    up_f = c * (1.0 + e_hi / (e_lo * a) + (1.0 + c * e_hi) * c * e_hi**2 / (e_lo * a))
    lo_e = s_lo / max(2.0, c * e_hi)
    lo_f = s_lo / max(1.0, 2.0 * c * e_hi)

    cost_e = c * e_hi * (
        (c_e + ed) * (c * e_hi**2 / (e_lo * ra) + 1.0)
        + ra * e_hi / e_lo * (u_norm * vol_half + ud)
    )
    cost_f = c * e_hi**2 * (
        c * e_hi / (e_lo * a) * (c_e + ed) + (u_norm * vol_half + ud) / e_lo
    )

    q_ud = max(len(decomp.ud_terms), 1)
    q_ed = max(len(decomp.ed_terms), 1)
    h_sigma = 8.0 * c * c_e * e_hi * (ed + c_e) / (a * s_lo * e_lo)
    h_eps_half = 8.0 * (c * e_hi * (ed + c_e) + c_f) * e_hi * u_norm * vol_half / (a * e_lo)
    h_eps_one = (
        4.0
        * (c**2 * e_hi**2 * (ed + c_e) ** 2 + (a * (ud + vol_half * u_norm) + c_f) ** 2)
        * e_hi**2
        / (a**2 * e_lo**2)
    )
    h_ud = 4.0 * e_hi**2 * ud**2 * q_ud / e_lo**2
    h_ed = 8.0 * c_e * e_hi * ed * math.sqrt(q_ed) / (a * e_lo)

    ledger = ConstantsLedger(
        coercivity=c,
        infsup=float(infsup_estimate),
        poincare=float(poincare_estimate),
        stability=stability,
        c_e=c_e,
        c_f=c_f,
        abs_e=abs_e,
        abs_f=abs_f,
        sandwich_up_e=up_e,
        sandwich_up_f=up_f,
        sandwich_lo_e=lo_e,
        sandwich_lo_f=lo_f,
        cost_e=cost_e,
        cost_f=cost_f,
        holder_sigma_half=h_sigma,
        holder_eps_half=h_eps_half,
        holder_eps_one=h_eps_one,
        holder_ud_one=h_ud,
        holder_ed_half=h_ed,
    )
    if not (ledger.sandwich_lo_e <= ledger.sandwich_up_e and ledger.sandwich_lo_f <= ledger.sandwich_up_f):
        raise ValueError("sandwich constants out of order; estimates are inconsistent")
    return ledger


def holder_upper_bound(mu1, mu2, ledger, decomp):
    """Explicit bound on the optimal-control distance between two parameters."""
    d_sigma = float(np.sum(np.abs(decomp.theta_sigma_inv(mu1) - decomp.theta_sigma_inv(mu2))))
    d_eps = float(np.sum(np.abs(decomp.theta_eps(mu1) - decomp.theta_eps(mu2))))
    if decomp.ud_terms:
        d_ud = float(np.linalg.norm(decomp.theta_ud(mu1) - decomp.theta_ud(mu2)))
    else:
        d_ud = 0.0
    if decomp.ed_terms:
        d_ed = float(np.linalg.norm(decomp.theta_ed(mu1) - decomp.theta_ed(mu2)))
    else:
        d_ed = 0.0
    return (
        math.sqrt(ledger.holder_sigma_half) * math.sqrt(d_sigma)
        + math.sqrt(ledger.holder_eps_half) * math.sqrt(d_eps)
        + math.sqrt(ledger.holder_eps_one) * d_eps
        + math.sqrt(ledger.holder_ud_one) * d_ud
        + math.sqrt(ledger.holder_ed_half) * math.sqrt(d_ed)
    )


def fill_distance(training_set, candidate_set):
    """Worst distance from a candidate parameter to the training set."""
    train = np.atleast_2d(np.asarray(training_set, dtype=float))
    cand = np.atleast_2d(np.asarray(candidate_set, dtype=float))
    if train.size == 0 or cand.size == 0:
        raise ValueError("fill distance needs non-empty parameter sets")
    if train.shape[1] != cand.shape[1]:
        raise ValueError("parameter sets live in different dimensions")
    dists = np.linalg.norm(cand[:, None, :] - train[None, :, :], axis=2)
    return float(dists.min(axis=1).max())


def gamma_exponent(decomp):
    """Holder exponent of the combined parameter-continuity bound."""
    g_sigma = decomp.holder_data("sigma_inv")[1]
    g_eps = decomp.holder_data("eps")[1]
    g_ud = decomp.holder_data("ud")[1]
    g_ed = decomp.holder_data("ed")[1]
    return 0.5 * min(g_sigma, g_eps, 2.0 * g_ud, g_ed)


def validate_coefficient_bounds(decomp, data, parameters, mesh):
    """Check the declared coefficient bounds and desired-data caps on a sample.

    Raises ConfigError on the first violated bound. Desired-state caps are
    only checked for per-tet fields; finite element desired states are the
    caller's responsibility.
    """
    vols = tet_volumes(mesh.nodes, mesh.tets)
    inv_lo = 1.0 / data.sigma_bounds[1]
    inv_hi = 1.0 / data.sigma_bounds[0]
    tol = 1e-10
    for mu in np.atleast_2d(np.asarray(parameters, dtype=float)):
        s = decomp.sigma_inv_at(mu)
        if s.min() < inv_lo - tol or s.max() > inv_hi + tol:
            raise ConfigError(f"sigma leaves its declared bounds at mu={mu}")
        e = decomp.eps_at(mu)
        if e.min() < data.eps_bounds[0] - tol or e.max() > data.eps_bounds[1] + tol:
            raise ConfigError(f"eps leaves its declared bounds at mu={mu}")
        r = decomp.rho_at(mu)
        if r.min() < data.rho_bounds[0] - tol or r.max() > data.rho_bounds[1] + tol:
            raise ConfigError(f"rho leaves its declared bounds at mu={mu}")
        if decomp.ud_terms:
            udf = decomp.ud_at(mu)
            norm = math.sqrt(float(np.sum(vols * np.sum(udf * udf, axis=1))))
            if norm > data.ud_cap + tol:
                raise ConfigError(f"desired control norm {norm} exceeds cap at mu={mu}")
        if decomp.ed_terms and all(kind == "tet" for kind, _ in decomp.ed_fields):
            edf = np.einsum("q,qti->ti", decomp.theta_ed(mu),
                            np.stack([arr for _, arr in decomp.ed_fields]))
            in_d = mesh.region_tags == 1
            norm = math.sqrt(float(np.sum(vols[in_d] * np.sum(edf[in_d] * edf[in_d], axis=1))))
            if norm > data.ed_cap + tol:
                raise ConfigError(f"desired state norm {norm} exceeds cap at mu={mu}")


# ---------------------------------------------------------------------------
# problem files

def load_problem_config(source):
    """Parse a problem file; the name "benchmark" resolves to the packaged one."""
    if source == "benchmark":
        text = importlib.resources.files("maxwellrb").joinpath("data/benchmark.yaml").read_text()
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"problem file not found: {source}")
        text = path.read_text()
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"problem file is not valid YAML: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("problem file must hold a mapping at top level")
    required = ("parameters", "cost", "control", "sigma_inv", "eps", "rho",
                "desired_control", "desired_state")
    for key in required:
        if key not in cfg:
            raise ConfigError(f"problem file misses section {key!r}")
    return cfg


def _scalar_field(spec, bary):
    if not isinstance(spec, dict):
        raise ConfigError(f"field spec must be a mapping, got {spec!r}")
    if "const" in spec:
        return np.full(bary.shape[0], float(spec["const"]))
    if "box" in spec:
        box = np.asarray(spec["box"], dtype=float).reshape(6)
        inside = np.all((bary >= box[:3]) & (bary <= box[3:]), axis=1)
        return np.where(inside, float(spec["inside"]), float(spec["outside"]))
    if "expr" in spec:
        code = compile_expression(spec["expr"], ("x", "y", "z"))
        vals = _evaluate(code, {"x": bary[:, 0], "y": bary[:, 1], "z": bary[:, 2]})
        return np.broadcast_to(np.asarray(vals, dtype=float), (bary.shape[0],)).copy()
    raise ConfigError(f"field spec needs const, box or expr: {spec!r}")


def _vector_field(spec, bary):
    if not isinstance(spec, dict):
        raise ConfigError(f"field spec must be a mapping, got {spec!r}")
    if "const" in spec:
        v = np.asarray(spec["const"], dtype=float).reshape(3)
        return np.tile(v, (bary.shape[0], 1))
    if "box" in spec:
        box = np.asarray(spec["box"], dtype=float).reshape(6)
        inside = np.all((bary >= box[:3]) & (bary <= box[3:]), axis=1)
        vi = np.asarray(spec["inside"], dtype=float).reshape(3)
        vo = np.asarray(spec["outside"], dtype=float).reshape(3)
        return np.where(inside[:, None], vi, vo)
    if "expr" in spec:
        exprs = spec["expr"]
        if not (isinstance(exprs, (list, tuple)) and len(exprs) == 3):
            raise ConfigError("vector expr needs three component expressions")
        cols = [_scalar_field({"expr": e}, bary) for e in exprs]
        return np.stack(cols, axis=1)
    raise ConfigError(f"field spec needs const, box or expr: {spec!r}")


def _parse_terms(section, bary, vector=False):
    terms, fields = [], []
    entries = section.get("terms")
    if not entries:
        raise ConfigError("coefficient section declares no terms")
    for entry in entries:
        if "theta" not in entry or "field" not in entry:
            raise ConfigError(f"term needs theta and field keys: {entry!r}")
        holder = entry.get("holder", (1.0, 1.0))
        terms.append(ThetaTerm(str(entry["theta"]), holder[0], holder[1]))
        builder = _vector_field if vector else _scalar_field
        fields.append(builder(entry["field"], bary))
    return terms, np.stack(fields)


def build_problem(config, mesh):
    """Build the affine decomposition and problem data on a given mesh."""
    params = config["parameters"]
    box = np.asarray(params["box"], dtype=float)
    if box.ndim != 2 or box.shape[1] != 2:
        raise ConfigError("parameters.box must be a list of [lo, hi] pairs")
    domain = ParameterDomain(box[:, 0], box[:, 1],
                             training_grid=params.get("training_grid"))

    bary = mesh.barycenters()
    vols = tet_volumes(mesh.nodes, mesh.tets)

    sig_terms, sig_fields = _parse_terms(config["sigma_inv"], bary)
    eps_terms, eps_fields = _parse_terms(config["eps"], bary)
    rho_terms, rho_fields = _parse_terms(config["rho"], bary)
    ud_terms, ud_fields = _parse_terms(config["desired_control"], bary, vector=True)
    ed_terms, ed_raw = _parse_terms(config["desired_state"], bary, vector=True)

    in_d = mesh.region_tags == 1
    ed_fields = []
    for arr in ed_raw:
        clipped = arr.copy()
        clipped[~in_d] = 0.0  # desired state lives on the observation region only
        ed_fields.append(("tet", clipped))

    decomp = AffineDecomposition(
        domain=domain,
        sigma_inv_terms=sig_terms,
        sigma_inv_fields=sig_fields,
        eps_terms=eps_terms,
        eps_fields=eps_fields,
        rho_terms=rho_terms,
        rho_fields=rho_fields,
        ud_terms=ud_terms,
        ud_fields=ud_fields,
        ed_terms=ed_terms,
        ed_fields=ed_fields,
    )

    cost = config["cost"]
    ctrl = config["control"]
    data = ProblemData(
        alpha=cost["alpha"],
        control_lower=ctrl["lower"],
        control_upper=ctrl["upper"],
        sigma_bounds=tuple(config["sigma_inv"]["sigma_range"]),
        eps_bounds=tuple(config["eps"]["range"]),
        rho_bounds=tuple(config["rho"]["range"]),
        ud_cap=config["desired_control"]["cap"],
        ed_cap=config["desired_state"]["cap"],
        volume=float(vols.sum()),
        d_box=cost.get("observation_box"),
    )
    return decomp, data
