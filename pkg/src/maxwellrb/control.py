"""Admissible-set projections and the first-order optimal control solver.

The admissible set is the intersection of a componentwise box with the
discretely divergence-free subspace (Gauss's law applied to the current
source), both understood in the eps(mu)-weighted L2 geometry where the box
projection is a plain clamp and the subspace projection subtracts a nodal
gradient. The intersection projection runs Dykstra's scheme with correction
memory on the box step only (the subspace step needs none) and always ends
on the clamp, so box feasibility of the output is exact.

solve_ocp is a damped fixed point of u -> clamp/divfree-project(u_d - F/alpha)
and is generic over the model: anything exposing solve_state, solve_adjoint,
adjoint_control_average, cost_value, data, decomp, espace and projector can
be driven, which is how the truth and reduced solvers share this code.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as sla

log = logging.getLogger(__name__)

PROJECTION_TOL = 1e-11
FIXED_POINT_TOL = 1e-9
MAX_FIXED_POINT_ITER = 200


class OcpError(Exception):
    """Raised when the fixed-point iteration exhausts its budget."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


def clamp_box(w, lower, upper):
    """Componentwise median of lower, w, upper; infinities disable a side."""
    return np.clip(np.asarray(w, dtype=float), lower, upper)


def control_norm(volumes, w):
    """Plain L2 norm of a per-tet constant vector field."""
    w = np.asarray(w, dtype=float).reshape(-1, 3)
    return math.sqrt(float(np.sum(volumes * np.sum(w * w, axis=1))))


@dataclass
class ProjectionResult:
    u: np.ndarray
    converged: bool
    sweeps: int
    distance: float        # last successive-iterate distance, eps-weighted
    div_residual: float    # eps-weighted distance to the divergence-free subspace


@dataclass
class DivergenceProjector:
    """Projections onto the divergence constraint and the admissible set.

    Holds one weighted-Laplacian factorization per exact parameter bytes;
    safe to share between the truth and reduced models for the same spaces.
    """

    espace: object
    vspace: object
    decomp: object
    blocks: object
    _ops: dict = field(default_factory=dict, repr=False)

    def _operators(self, mu):
        key = np.asarray(mu, dtype=float).tobytes()
        if key not in self._ops:
            th = self.decomp.theta_eps(mu)
            lap = float(th[0]) * self.blocks.lap_q[0]
            div = float(th[0]) * self.blocks.ctrl_div_q[0]
            for c, l, d in zip(th[1:], self.blocks.lap_q[1:], self.blocks.ctrl_div_q[1:]):
                lap = lap + float(c) * l
                div = div + float(c) * d
            lu = sla.splu(lap.tocsc()) if self.vspace.num_dofs else None
            self._ops[key] = (lu, div.tocsr())
        return self._ops[key]

    def _nodal_gradient(self, psi):
        mesh = self.espace.mesh
        full = np.zeros(mesh.num_nodes)
        mask = self.vspace.dof_of_node >= 0
        full[mask] = psi[self.vspace.dof_of_node[mask]]
        vals = full[mesh.tets]
        return np.einsum("tj,tji->ti", vals, self.espace.grad_lambda)

    def eps_norm(self, mu, w):
        w = np.asarray(w, dtype=float).reshape(-1, 3)
        weight = self.decomp.eps_at(mu) * self.espace.volumes
        return math.sqrt(float(np.sum(weight * np.sum(w * w, axis=1))))

    def divfree(self, mu, w):
        """eps-weighted L2 projection onto the discrete divergence-free controls."""
        w = np.asarray(w, dtype=float).reshape(-1, 3)
        if self.vspace.num_dofs == 0:
            log.info("nodal space is empty; divergence projection is the identity")
            return w.copy()
        lu, div = self._operators(mu)
        rhs = div @ w.ravel()
        psi = lu.solve(rhs)
        out = w - self._nodal_gradient(psi)
        res = np.linalg.norm(div @ out.ravel())
        if res > 1e-10 * max(np.linalg.norm(rhs), 1.0):
            raise OcpError(f"divergence projection residual {res:.3e} at mu={np.asarray(mu)}")
        return out

    def uad(self, mu, w, lower, upper, tol=PROJECTION_TOL, max_sweeps=500):
        """Dykstra projection onto box-and-divergence-free in the eps geometry."""
        x = np.asarray(w, dtype=float).reshape(-1, 3)
        correction = np.zeros_like(x)
        distance = math.inf
        for sweep in range(1, max_sweeps + 1):
            y = self.divfree(mu, x)
            shifted = y + correction
            x_new = clamp_box(shifted, lower, upper)
            correction = shifted - x_new
            distance = self.eps_norm(mu, x_new - x)
            x = x_new
            if distance < tol:
                div_res = self.eps_norm(mu, x - self.divfree(mu, x))
                if div_res <= 10.0 * tol:
                    return ProjectionResult(x, True, sweep, distance, div_res)
        div_res = self.eps_norm(mu, x - self.divfree(mu, x))
        log.warning(
            "projection not converged after %d sweeps (distance %.3e, divergence %.3e)",
            max_sweeps, distance, div_res,
        )
        return ProjectionResult(x, False, max_sweeps, distance, div_res)


def project_divfree(model, mu, w):
    return model.projector.divfree(mu, w)


def project_uad(model, mu, w, tol=PROJECTION_TOL, max_sweeps=500):
    return model.projector.uad(
        mu, w, model.data.control_lower, model.data.control_upper,
        tol=tol, max_sweeps=max_sweeps,
    )


@dataclass
class OcpSolution:
    control: np.ndarray
    state: np.ndarray
    adjoint: np.ndarray
    iterations: int
    increment: float
    kkt_residual: float
    cost: float
    converged: bool
    projection_ok: bool
    trace: list = None


def kkt_residual(model, mu, u, adjoint, seed=0):
    """Worst directional violation of the optimality variational inequality.

    Directions are taken towards admissible points built from the box
    corners and random feasible perturbations of u; the inner product is
    normalized by the direction norm, so the result is scale-free.
    """
    data = model.data
    proj = model.projector
    target = model.decomp.ud_at(mu) - model.adjoint_control_average(mu, adjoint) / data.alpha
    weight = model.decomp.eps_at(mu) * model.espace.volumes
    num_tets = model.espace.mesh.num_tets

    candidates = []
    corners = itertools.product(*zip(data.control_lower, data.control_upper))
    for corner in corners:
        corner = np.asarray(corner)
        if np.all(np.isfinite(corner)):
            candidates.append(np.tile(corner, (num_tets, 1)))
    rng = np.random.default_rng(seed)
    span = np.where(
        np.isfinite(data.control_upper - data.control_lower),
        data.control_upper - data.control_lower,
        1.0,
    )
    for _ in range(4):
        candidates.append(u + rng.normal(size=(num_tets, 3)) * 0.1 * span)

    worst = -math.inf
    misfit = target - u
    for raw in candidates:
        v = proj.uad(mu, raw, data.control_lower, data.control_upper).u
        d = v - u
        norm = math.sqrt(float(np.sum(weight * np.sum(d * d, axis=1))))
        if norm < 1e-14:
            continue
        pairing = float(np.sum(weight * np.sum(d * misfit, axis=1)))
        worst = max(worst, pairing / norm)
    return worst if worst > -math.inf else 0.0


def solve_ocp(model, mu, tol=FIXED_POINT_TOL, max_iter=MAX_FIXED_POINT_ITER,
              omega=0.7, proj_tol=PROJECTION_TOL, keep_trace=False):
    """Damped projected fixed point for the control-constrained optimum.

    The undamped fixed-point residual in the eps-weighted control norm is
    the convergence measure; the damping factor halves whenever that
    residual grows, which keeps the iteration a descent scheme in practice.
    """
    data = model.data
    alpha = data.alpha
    ud = model.decomp.ud_at(mu)

    start = project_uad(model, mu, ud, tol=proj_tol)
    projection_ok = start.converged
    u = start.u
    omega_k = float(omega)
    prev_merit = math.inf
    trace = [] if keep_trace else None
    history = []

    for iteration in range(1, max_iter + 1):
        state = model.solve_state(mu, u)
        adjoint = model.solve_adjoint(mu, state)
        target = ud - model.adjoint_control_average(mu, adjoint) / alpha
        proj = project_uad(model, mu, target, tol=proj_tol)
        projection_ok = projection_ok and proj.converged

        merit = model.projector.eps_norm(mu, u - proj.u)
        history.append(merit)
        if keep_trace:
            trace.append(
                {
                    "iteration": iteration,
                    "residual": merit,
                    "omega": omega_k,
                    "cost": model.cost_value(mu, u, state),
                }
            )
        if merit <= tol:
            return OcpSolution(
                control=u,
                state=state,
                adjoint=adjoint,
                iterations=iteration,
                increment=merit,
                kkt_residual=kkt_residual(model, mu, u, adjoint),
                cost=model.cost_value(mu, u, state),
                converged=True,
                projection_ok=projection_ok,
                trace=trace,
            )
        if merit > prev_merit * (1.0 + 1e-12):
            omega_k = max(0.05, 0.5 * omega_k)
        u = (1.0 - omega_k) * u + omega_k * proj.u
        prev_merit = merit

    raise OcpError(
        f"fixed point not converged in {max_iter} iterations at mu={np.asarray(mu)} "
        f"(last residual {history[-1]:.3e}); a smaller damping factor may help",
        history=history,
    )
