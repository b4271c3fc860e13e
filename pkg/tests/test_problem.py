"""Problem definition tests: affine expansions, constants ledger, bounds."""

import dataclasses
import math

import numpy as np
import pytest
import scipy.linalg

from maxwellrb.fespace import assemble_blocks, build_spaces
from maxwellrb.mesh import generate_cube_mesh, tet_volumes
from maxwellrb.problem import (
    AffineDecomposition,
    ConfigError,
    DomainError,
    ParameterDomain,
    ProblemData,
    ThetaTerm,
    build_constants,
    build_problem,
    compile_expression,
    evaluate_coefficients,
    fill_distance,
    gamma_exponent,
    holder_upper_bound,
    load_problem_config,
    validate_coefficient_bounds,
)

D_BOX = (0.0, 0.0, 0.0, 0.5, 0.5, 0.5)


def unit_data(alpha=0.5, sigma=(0.5, 1.0), eps=(1.0, 2.0), ud_cap=0.45, ed_cap=0.12):
    return ProblemData(
        alpha=alpha,
        control_lower=[-1.0, -1.0, -1.0],
        control_upper=[1.0, 1.0, 1.0],
        sigma_bounds=sigma,
        eps_bounds=eps,
        rho_bounds=(0.0, 0.0),
        ud_cap=ud_cap,
        ed_cap=ed_cap,
        volume=1.0,
    )


def stub_decomp(num_tets=4, eps_expr="1", exponents=(1.0, 1.0, 1.0, 1.0)):
    """Tiny decomposition for formula tests; fields are placeholder arrays."""
    gs, ge, gu, gd = exponents
    ones = np.ones((1, num_tets))
    return AffineDecomposition(
        domain=ParameterDomain([0.0, 0.0], [1.0, 1.0]),
        sigma_inv_terms=[ThetaTerm("1", 1.0, gs)],
        sigma_inv_fields=ones,
        eps_terms=[ThetaTerm(eps_expr, 1.0, ge)],
        eps_fields=ones,
        rho_terms=[ThetaTerm("1")],
        rho_fields=np.zeros((1, num_tets)),
        ud_terms=[ThetaTerm("1", 1.0, gu)],
        ud_fields=np.zeros((1, num_tets, 3)),
        ed_terms=[ThetaTerm("1", 1.0, gd)],
        ed_fields=[("tet", np.zeros((num_tets, 3)))],
    )


# ---------------------------------------------------------------------------
# coefficient evaluation

def test_constant_theta_is_one_everywhere():
    decomp = stub_decomp()
    for mu in ([0.0, 0.0], [0.3, 0.9], [1.0, 0.2]):
        np.testing.assert_array_equal(decomp.theta_sigma_inv(mu), [1.0])


def test_theta_vector_direct_evaluation():
    decomp = stub_decomp()
    decomp.sigma_inv_terms = [ThetaTerm("1"), ThetaTerm("mu1")]
    decomp.sigma_inv_fields = np.ones((2, 4))
    np.testing.assert_allclose(decomp.theta_sigma_inv([0.3, 0.5]), [1.0, 0.3])
    coeffs = evaluate_coefficients(decomp, [0.3, 0.5])
    np.testing.assert_allclose(coeffs["sigma_inv"], [1.0, 0.3])
    assert set(coeffs) == {"sigma_inv", "eps", "rho", "ud", "ed"}


def test_outside_box_raises_domain_error():
    decomp = stub_decomp()
    with pytest.raises(DomainError):
        decomp.theta_eps([2.0, 0.5])
    with pytest.raises(DomainError):
        evaluate_coefficients(decomp, [0.5, -0.1])


def test_expression_whitelist_blocks_escape_hatches():
    for text in (
        "__import__('os').system('true')",
        "mu1.__class__",
        "(lambda: 1)()",
        "[1, 2]",
        "mu1 if mu1 > 0 else 0",
        "open('/etc/hostname')",
    ):
        with pytest.raises(ConfigError):
            compile_expression(text, ("mu1",))
    with pytest.raises(ConfigError):
        compile_expression("unknown_symbol + 1", ("mu1",))
    # syntactically fine, semantically too high-dimensional
    with pytest.raises(ConfigError):
        ThetaTerm("mu3").evaluate([0.1, 0.2])


def test_expression_math_functions_work():
    code = compile_expression("sin(pi * mu1) + sqrt(mu2)", ("mu1", "mu2"))
    term = ThetaTerm("sin(pi * mu1) + sqrt(mu2)")
    assert math.isclose(term.evaluate([0.5, 0.25]), 1.5, rel_tol=1e-14)
    assert code is not None


def test_benchmark_sigma_stays_in_declared_bounds():
    mesh = generate_cube_mesh(2, d_box=D_BOX)
    cfg = load_problem_config("benchmark")
    decomp, data = build_problem(cfg, mesh)
    rng = np.random.default_rng(7)
    lo, hi = data.sigma_bounds
    for _ in range(20):
        mu = decomp.domain.lower + rng.random(2) * (decomp.domain.upper - decomp.domain.lower)
        tet = rng.integers(mesh.num_tets)
        sigma = 1.0 / decomp.sigma_inv_at(mu)[tet]
        assert lo - 1e-12 <= sigma <= hi + 1e-12


# ---------------------------------------------------------------------------
# constants ledger

def test_lower_sandwich_constants_formula_example():
    data = unit_data(sigma=(1.0, 1.0), eps=(1.0, 1.0))
    ledger = build_constants(data, stub_decomp(), 1.0, 1.0, 1.0)
    assert ledger.sandwich_lo_e == pytest.approx(0.5)
    assert ledger.sandwich_lo_f == pytest.approx(0.5)


def test_absolute_prefactors_decay_with_alpha():
    decomp = stub_decomp()
    ledgers = [build_constants(unit_data(alpha=a), decomp, 2.0, 0.5, 1.5)
               for a in (1.0, 10.0, 100.0)]
    abs_e = [l.abs_e for l in ledgers]
    abs_f = [l.abs_f for l in ledgers]
    assert abs_e[0] > abs_e[1] > abs_e[2]
    assert abs_f[0] > abs_f[1] > abs_f[2]


def test_ledger_is_pure_function_of_inputs():
    data = unit_data()
    decomp = stub_decomp()
    a = build_constants(data, decomp, 2.0, 0.5, 1.5)
    b = build_constants(data, decomp, 2.0, 0.5, 1.5)
    assert a == b


def test_ledger_rejects_bad_estimates():
    data = unit_data()
    decomp = stub_decomp()
    for bad in (0.0, -1.0, float("nan")):
        with pytest.raises(ValueError):
            build_constants(data, decomp, bad, 0.5, 1.5)
        with pytest.raises(ValueError):
            build_constants(data, decomp, 2.0, bad, 1.5)


def test_ledger_positive_with_eigen_estimates_on_cube():
    # sigma = eps = 1 on the n=2 cube; estimates from dense eigenproblems
    mesh = generate_cube_mesh(2, d_box=D_BOX)
    espace, vspace, cspace = build_spaces(mesh)
    decomp = stub_decomp(num_tets=mesh.num_tets)
    blocks = assemble_blocks(espace, vspace, cspace, decomp)

    a = blocks.curl_q[0].toarray()
    b = blocks.div_q[0].T.toarray().T  # (nV, nE) dense
    x_curl = blocks.x_curl.toarray()
    x_grad = blocks.x_grad.toarray()
    m_nodal = blocks.mass_nodal.toarray()

    kernel = scipy.linalg.null_space(b)
    lam = scipy.linalg.eigh(kernel.T @ a @ kernel, kernel.T @ x_curl @ kernel,
                            eigvals_only=True)[0]
    coercivity = 1.0 / lam
    schur = b @ np.linalg.solve(x_curl, b.T)
    beta = math.sqrt(scipy.linalg.eigh(schur, x_grad, eigvals_only=True)[0])
    poincare = 1.0 / math.sqrt(scipy.linalg.eigh(x_grad, m_nodal, eigvals_only=True)[0])

    ledger = build_constants(unit_data(), decomp, coercivity, beta, poincare)
    for name, value in dataclasses.asdict(ledger).items():
        assert value > 0, name
    assert ledger.sandwich_lo_e <= ledger.sandwich_up_e
    assert ledger.sandwich_lo_f <= ledger.sandwich_up_f


# ---------------------------------------------------------------------------
# parameter-continuity bound

def test_holder_bound_symmetric_and_zero_at_equal_parameters():
    decomp = stub_decomp(eps_expr="mu1")
    ledger = build_constants(unit_data(), decomp, 2.0, 0.5, 1.5)
    rng = np.random.default_rng(3)
    for _ in range(5):
        mu1, mu2 = rng.random(2), rng.random(2)
        fwd = holder_upper_bound(mu1, mu2, ledger, decomp)
        bwd = holder_upper_bound(mu2, mu1, ledger, decomp)
        assert math.isclose(fwd, bwd, rel_tol=1e-14)
    mu = rng.random(2)
    assert holder_upper_bound(mu, mu, ledger, decomp) == 0.0


def test_holder_bound_single_eps_term_formula():
    decomp = stub_decomp(eps_expr="mu1")
    ledger = build_constants(unit_data(), decomp, 2.0, 0.5, 1.5)
    got = holder_upper_bound([0.0, 0.3], [1.0, 0.3], ledger, decomp)
    want = math.sqrt(ledger.holder_eps_half) + math.sqrt(ledger.holder_eps_one)
    assert math.isclose(got, want, rel_tol=1e-14)


def test_gamma_exponent_examples():
    assert gamma_exponent(stub_decomp()) == pytest.approx(0.5)
    assert gamma_exponent(stub_decomp(exponents=(1, 1, 0.25, 1))) == pytest.approx(0.25)
    assert gamma_exponent(stub_decomp(exponents=(2, 2, 2, 2))) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# fill distance

def test_fill_distance_endpoint_grid():
    train = np.array([[0.0], [1.0]])
    cand = np.linspace(0.0, 1.0, 101)[:, None]
    assert fill_distance(train, cand) == pytest.approx(0.5)


def test_fill_distance_zero_when_training_covers_candidates():
    pts = np.random.default_rng(1).random((17, 2))
    assert fill_distance(pts, pts) == 0.0


def test_fill_distance_matches_brute_force():
    rng = np.random.default_rng(11)
    train = rng.random((9, 2))
    cand = rng.random((23, 2))
    want = max(min(np.linalg.norm(c - t) for t in train) for c in cand)
    assert fill_distance(train, cand) == pytest.approx(want, rel=1e-14)
    with pytest.raises(ValueError):
        fill_distance(np.zeros((0, 2)), cand)


# ---------------------------------------------------------------------------
# problem files

def test_benchmark_file_builds_full_problem():
    mesh = generate_cube_mesh(2, d_box=D_BOX)
    cfg = load_problem_config("benchmark")
    decomp, data = build_problem(cfg, mesh)

    assert len(decomp.sigma_inv_terms) == 2
    assert len(decomp.eps_terms) == 2
    assert len(decomp.rho_terms) == 1
    assert len(decomp.ud_terms) == 1
    assert len(decomp.ed_terms) == 1
    assert data.volume == pytest.approx(1.0, abs=1e-13)
    assert data.control_bound_norm == pytest.approx(math.sqrt(3.0))
    assert data.rho_bound == 0.0

    bary = mesh.barycenters()
    mu = np.array([0.3, 0.7])
    sig = decomp.sigma_inv_at(mu)
    np.testing.assert_allclose(sig, np.where(bary[:, 0] < 0.5, 1.3, 1.0))
    eps = decomp.eps_at(mu)
    np.testing.assert_allclose(eps, np.where(bary[:, 2] < 0.5, 1.7, 1.0))

    kind, ed = decomp.ed_fields[0]
    assert kind == "tet"
    in_d = mesh.region_tags == 1
    np.testing.assert_array_equal(ed[~in_d], 0.0)
    np.testing.assert_allclose(ed[in_d], np.tile([0.0, 0.0, 0.3], (in_d.sum(), 1)))

    train = decomp.domain.training_points()
    assert train.shape == (81, 2)
    np.testing.assert_allclose(train[0], [0.1, 0.1])
    np.testing.assert_allclose(train[-1], [1.0, 1.0])
    np.testing.assert_array_equal(decomp.domain.sample(50, 42), decomp.domain.sample(50, 42))

    validate_coefficient_bounds(decomp, data, train, mesh)


def test_desired_data_caps_are_enforced():
    mesh = generate_cube_mesh(2, d_box=D_BOX)
    cfg = load_problem_config("benchmark")
    decomp, data = build_problem(cfg, mesh)
    vols = tet_volumes(mesh.nodes, mesh.tets)
    ud_norm = math.sqrt(float(vols.sum()) * (0.4**2 + 0.2**2))
    assert ud_norm <= data.ud_cap

    tight = ProblemData(
        alpha=data.alpha,
        control_lower=data.control_lower,
        control_upper=data.control_upper,
        sigma_bounds=data.sigma_bounds,
        eps_bounds=data.eps_bounds,
        rho_bounds=data.rho_bounds,
        ud_cap=0.1,
        ed_cap=data.ed_cap,
        volume=data.volume,
    )
    with pytest.raises(ConfigError, match="desired control"):
        validate_coefficient_bounds(decomp, tight, [[0.5, 0.5]], mesh)


def test_bad_config_inputs_raise():
    with pytest.raises(ConfigError):
        load_problem_config("/nonexistent/problem.yaml")
    with pytest.raises(ConfigError):
        ParameterDomain([0.0, 1.0], [1.0, 1.0])
    with pytest.raises(ConfigError):
        ProblemData(
            alpha=-1.0,
            control_lower=[0, 0, 0],
            control_upper=[1, 1, 1],
            sigma_bounds=(0.5, 1.0),
            eps_bounds=(1.0, 2.0),
            rho_bounds=(0.0, 0.0),
            ud_cap=1.0,
            ed_cap=1.0,
            volume=1.0,
        )
    mesh = generate_cube_mesh(1)
    cfg = load_problem_config("benchmark")
    cfg["sigma_inv"]["terms"] = []
    with pytest.raises(ConfigError):
        build_problem(cfg, mesh)
