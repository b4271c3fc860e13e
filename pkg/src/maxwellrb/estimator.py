"""Online residuals, dual norms and the certified error bounds.

Residual functionals are assembled in the truth space from the affine
blocks, then stripped of the component carried by the divergence multiplier
(the weighted-Laplacian solve below). That component reflects the
saddle-point formulation of the solvers, not reduced-basis error: at a
truth solution the adjoint residual tested against all edge functions
equals exactly the multiplier term, so without the removal the estimator
has an O(1) floor that no enrichment can lower. What remains is the
residual acting on the discretely divergence-free test directions, which
is the setting of the continuous theory.

Dual norms are exact Riesz solves against the full H(curl) Gram matrix;
no affine splitting of the norm is attempted because the admissible-set
projection makes the reduced control non-affine in the coefficients.
"""

import math
from dataclasses import dataclass

import numpy as np

from .control import control_norm
from .problem import build_constants

RESIDUAL_FLOOR = 0.0


class CertificationError(Exception):
    pass


@dataclass(frozen=True)
class ErrorCertificate:
    """All certified bounds at one parameter, plus validity flags."""

    mu: tuple
    residual_e: float
    residual_f: float
    delta_abs: float
    delta_rel: float      # nan when the validity condition fails
    rel_valid: bool
    lower: float
    upper: float
    cost_bound: float
    control_norm: float

    def as_row(self):
        return {
            "residual_e": self.residual_e,
            "residual_f": self.residual_f,
            "delta_abs": self.delta_abs,
            "delta_rel": self.delta_rel,
            "rel_valid": self.rel_valid,
            "lower": self.lower,
            "upper": self.upper,
            "cost_bound": self.cost_bound,
            "control_norm": self.control_norm,
        }


def _strip_multiplier_range(truth, mu, residual):
    """Remove the dual component the divergence multiplier absorbs."""
    lu, _ = truth.projector._operators(mu)
    if lu is None:
        return residual
    grad = truth.blocks.grad
    s = lu.solve(grad.T @ residual)
    return residual - truth.mass(mu) @ (grad @ s)


def residual_vectors(truth, mu, u, e_full, f_full):
    """State and adjoint residual functionals for truth-space fields."""
    u = np.asarray(u, dtype=float).ravel()
    a = truth.a_matrix(mu)
    raw_e = truth.control_coupling(mu) @ u - a @ e_full
    raw_f = truth.mass_d(mu) @ e_full - truth.desired_state_vector(mu) - a @ f_full
    return (
        _strip_multiplier_range(truth, mu, raw_e),
        _strip_multiplier_range(truth, mu, raw_f),
    )


def residuals(reduced_model, mu, solution):
    """Residual functionals of a reduced solution, in the truth space."""
    e_full = reduced_model.lift_state(solution.state)
    f_full = reduced_model.lift_state(solution.adjoint)
    return residual_vectors(reduced_model.truth, mu, solution.control, e_full, f_full)


def dual_norm(truth, residual):
    """H(curl) dual norm through one cached-factorization Riesz solve."""
    rep = truth.riesz(residual)
    return math.sqrt(max(float(residual @ rep), RESIDUAL_FLOOR))


def certify(reduced_model, mu, solution, ledger):
    """Evaluate every certified bound for one reduced solution."""
    if ledger is None:
        raise CertificationError("certification requires a constants ledger")
    truth = reduced_model.truth
    r_e, r_f = residuals(reduced_model, mu, solution)
    res_e = dual_norm(truth, r_e)
    res_f = dual_norm(truth, r_f)

    delta_abs = ledger.abs_e * res_e + ledger.abs_f * res_f
    u_norm = control_norm(truth.espace.volumes, solution.control)
    rel_valid = u_norm > 0.0 and 2.0 * delta_abs / u_norm <= 1.0
    delta_rel = 2.0 * delta_abs / u_norm if rel_valid else math.nan

    return ErrorCertificate(
        mu=tuple(float(v) for v in np.atleast_1d(mu)),
        residual_e=res_e,
        residual_f=res_f,
        delta_abs=delta_abs,
        delta_rel=delta_rel,
        rel_valid=rel_valid,
        lower=ledger.sandwich_lo_e * res_e + ledger.sandwich_lo_f * res_f,
        upper=ledger.sandwich_up_e * res_e + ledger.sandwich_up_f * res_f,
        cost_bound=ledger.cost_e * res_e + ledger.cost_f * res_f,
        control_norm=u_norm,
    )


def cost_gap(reduced_model, mu, solution, ledger, truth_solution=None):
    """Certified cost-gap bound, with the measured gap when truth is given."""
    cert = certify(reduced_model, mu, solution, ledger)
    if truth_solution is None:
        return None, cert.cost_bound
    gap = abs(truth_solution.cost - solution.cost)
    if gap > cert.cost_bound * (1.0 + 1e-9) + 1e-14:
        raise CertificationError(
            f"measured cost gap {gap:.3e} exceeds certified bound {cert.cost_bound:.3e} at mu={np.asarray(mu)}"
        )
    return gap, cert.cost_bound


def effectivity(cert, measured_control_error, floor=1e-12):
    """Ratio of the certified control bound to the measured error."""
    if measured_control_error <= floor:
        return math.inf
    return cert.delta_abs / measured_control_error


def build_ledger(truth, validation_sample, coercivity_bound=None):
    """Constants ledger with stability estimates worst-cased over a sample.

    The coercivity constant is the largest eigenvalue-based estimate seen
    on the sample (an analytic bound, when supplied, overrides it), the
    inf-sup constant the smallest; both directions are the conservative
    ones for every bound they enter.
    """
    validation_sample = np.asarray(validation_sample, dtype=float)
    coercivity = max(truth.estimate_coercivity(mu) for mu in validation_sample)
    if coercivity_bound is not None:
        coercivity = float(coercivity_bound)
    infsup = min(truth.estimate_infsup(mu) for mu in validation_sample)
    poincare = truth.estimate_poincare()
    return build_constants(truth.data, truth.decomp, coercivity, infsup, poincare)
