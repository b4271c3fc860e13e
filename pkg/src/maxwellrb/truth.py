"""High-fidelity solvers on the edge/nodal spaces.

The constrained state and adjoint problems are solved through the bordered
saddle matrix [[A(mu), B(mu)^T], [B(mu), 0]] with a sparse LU factorization
plus one step of iterative refinement. Factorizations are cached per exact
parameter bytes, so asking for the state and the adjoint at the same mu
factors once. The Lagrange multiplier block only enforces the divergence
constraint; it is checked through the residuals and discarded.

Also here: the unit-weight discrete Helmholtz decomposition, Riesz
representatives for residual dual norms, and the dense eigenvalue estimates
for the coercivity, inf-sup and Poincare constants that feed the certified
bounds. The eigen-estimates build an explicit basis of the divergence-free
kernel, which is affordable at the intended mesh sizes.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .fespace import eval_curl_field, eval_edge_field

log = logging.getLogger(__name__)

# both saddle block equations must close to this relative tolerance
RESIDUAL_TOL = 1e-10


class SolverError(Exception):
    """Raised when a linear solve cannot meet its residual contract."""


def _combine(coeffs, mats):
    out = float(coeffs[0]) * mats[0]
    for c, m in zip(coeffs[1:], mats[1:]):
        out = out + float(c) * m
    return out


@dataclass
class TruthModel:
    """Assembled truth-space problem with parameter-wise solver caches."""

    mesh: object
    espace: object
    vspace: object
    cspace: object
    decomp: object
    data: object
    blocks: object
    _factors: dict = field(default_factory=dict, repr=False)
    _riesz_lu: object = field(default=None, repr=False)
    _grad_lu: object = field(default=None, repr=False)
    _projector: object = field(default=None, repr=False)

    # -- parameter-dependent operators ------------------------------------

    def a_matrix(self, mu):
        return _combine(self.decomp.theta_sigma_inv(mu), self.blocks.curl_q)

    def b_matrix(self, mu):
        return _combine(self.decomp.theta_eps(mu), self.blocks.div_q)

    def mass(self, mu):
        return _combine(self.decomp.theta_eps(mu), self.blocks.mass_q)

    def mass_d(self, mu):
        return _combine(self.decomp.theta_eps(mu), self.blocks.mass_d_q)

    def control_coupling(self, mu):
        return _combine(self.decomp.theta_eps(mu), self.blocks.ctrl_q)

    def control_divergence(self, mu):
        return _combine(self.decomp.theta_eps(mu), self.blocks.ctrl_div_q)

    def laplacian(self, mu):
        return _combine(self.decomp.theta_eps(mu), self.blocks.lap_q)

    def charge_vector(self, mu):
        if self.vspace.num_dofs == 0:
            return np.zeros(0)
        return _combine(self.decomp.theta_rho(mu), self.blocks.load_q)

    def desired_state_vector(self, mu):
        th_e = self.decomp.theta_eps(mu)
        if not self.decomp.ed_terms:
            return np.zeros(self.espace.num_dofs)
        th_d = self.decomp.theta_ed(mu)
        out = np.zeros(self.espace.num_dofs)
        for p, ce in enumerate(th_e):
            for q, cd in enumerate(th_d):
                out += float(ce * cd) * self.blocks.desired_state_vec[p][q]
        return out

    def desired_state_square(self, mu):
        """(eps(mu) E_d(mu), E_d(mu)) over the observation region."""
        if not self.decomp.ed_terms:
            return 0.0
        th_e = self.decomp.theta_eps(mu)
        th_d = self.decomp.theta_ed(mu)
        return float(np.einsum("p,q,r,pqr->", th_e, th_d, th_d,
                               self.blocks.desired_state_sq))

    # -- saddle solves ------------------------------------------------------

    def _bordered(self, mu):
        a = self.a_matrix(mu)
        if self.vspace.num_dofs == 0:
            return a.tocsr()
        b = self.b_matrix(mu)
        return sp.bmat([[a, b.T], [b, None]], format="csr")

    def _factor(self, mu):
        key = np.asarray(mu, dtype=float).tobytes()
        if key not in self._factors:
            mat = self._bordered(mu)
            try:
                lu = sla.splu(mat.tocsc())
            except RuntimeError as exc:
                raise SolverError(f"inf-sup failure at mu={np.asarray(mu)}: {exc}") from None
            pivot = float(np.abs(lu.U.diagonal()).min())
            if not np.isfinite(pivot) or pivot == 0.0:
                raise SolverError(
                    f"inf-sup failure at mu={np.asarray(mu)}: smallest pivot {pivot}"
                )
            self._factors[key] = (lu, mat)
        return self._factors[key]

    def _solve_saddle(self, mu, f, g):
        """Solve the bordered system, refine once, enforce the residual contract."""
        lu, mat = self._factor(mu)
        rhs = np.concatenate([f, g])
        x = lu.solve(rhs)
        x += lu.solve(rhs - mat @ x)
        res = rhs - mat @ x
        ne = f.size
        scale = max(np.linalg.norm(f), np.linalg.norm(g), 1e-300)
        rel_e = np.linalg.norm(res[:ne]) / scale if scale > 0 else 0.0
        rel_v = np.linalg.norm(res[ne:]) / scale if scale > 0 else 0.0
        if rel_e > RESIDUAL_TOL or rel_v > RESIDUAL_TOL:
            raise SolverError(
                f"saddle solve at mu={np.asarray(mu)} left relative residuals "
                f"{rel_e:.3e} / {rel_v:.3e} above {RESIDUAL_TOL}"
            )
        return x[:ne], x[ne:]

    def solve_state(self, mu, u, return_multiplier=False):
        """State solve: curl-curl equation driven by eps(mu) u under Gauss's law."""
        u = np.asarray(u, dtype=float).ravel()
        f = self.control_coupling(mu) @ u
        g = -self.charge_vector(mu)
        e, lam = self._solve_saddle(mu, f, g)
        return (e, lam) if return_multiplier else e

    def solve_adjoint(self, mu, e, return_multiplier=False):
        """Adjoint solve: same operator, driven by the observation mismatch."""
        e = np.asarray(e, dtype=float)
        f = self.mass_d(mu) @ e - self.desired_state_vector(mu)
        g = np.zeros(self.vspace.num_dofs)
        fh, lam = self._solve_saddle(mu, f, g)
        return (fh, lam) if return_multiplier else fh

    def solve_intermediate(self, mu, u, e):
        """Truth state at a given control and truth adjoint at a given state."""
        return self.solve_state(mu, u), self.solve_adjoint(mu, e)

    # -- decompositions and dual norms --------------------------------------

    def helmholtz_decompose(self, z):
        """Split z = z1 + G h with (z1, grad phi) = 0 in the unit-weight pairing."""
        z = np.asarray(z, dtype=float)
        if self.vspace.num_dofs == 0:
            log.info("nodal space is empty; Helmholtz decomposition is trivial")
            return z.copy(), np.zeros(0)
        if self._grad_lu is None:
            self._grad_lu = sla.splu(self.blocks.x_grad.tocsc())
        gt_mass = self.blocks.grad.T @ (self.blocks.mass_unit @ z)
        h = self._grad_lu.solve(gt_mass)
        z1 = z - self.blocks.grad @ h
        res = np.linalg.norm(self.blocks.grad.T @ (self.blocks.mass_unit @ z1))
        if res > 1e-10 * max(np.linalg.norm(gt_mass), 1.0):
            raise SolverError(f"Helmholtz orthogonality residual {res:.3e}")
        return z1, h

    def riesz(self, functional):
        """Representative r with (r, v)_X = functional(v) in the curl norm."""
        if self._riesz_lu is None:
            try:
                self._riesz_lu = sla.splu(self.blocks.x_curl.tocsc())
            except RuntimeError as exc:
                raise SolverError(f"curl-norm Gram factorization failed: {exc}") from None
        return self._riesz_lu.solve(np.asarray(functional, dtype=float))

    def x_norm(self, v):
        v = np.asarray(v, dtype=float)
        return float(np.sqrt(max(v @ (self.blocks.x_curl @ v), 0.0)))

    # -- eigen-estimates -----------------------------------------------------

    def divfree_kernel(self, mu):
        """Orthonormal dense basis of the discrete eps(mu)-divergence-free space."""
        if self.vspace.num_dofs == 0:
            return np.eye(self.espace.num_dofs)
        return scipy.linalg.null_space(self.b_matrix(mu).toarray())

    def estimate_coercivity(self, mu):
        """1 / smallest eigenvalue of the curl form on the divergence-free kernel."""
        kernel = self.divfree_kernel(mu)
        a = kernel.T @ (self.a_matrix(mu) @ kernel)
        x = kernel.T @ (self.blocks.x_curl @ kernel)
        lam = scipy.linalg.eigh(a, x, eigvals_only=True, subset_by_index=[0, 0])[0]
        if not lam > 0:
            raise SolverError(f"curl form lost coercivity on the kernel: {lam}")
        return 1.0 / float(lam)

    def estimate_infsup(self, mu):
        """Discrete inf-sup constant of the eps(mu) divergence form."""
        if self.vspace.num_dofs == 0:
            raise SolverError("inf-sup estimate needs a nontrivial nodal space")
        b = self.b_matrix(mu).toarray()
        if self._riesz_lu is None:
            self.riesz(np.zeros(self.espace.num_dofs))
        schur = b @ self._riesz_lu.solve(b.T)
        lam = scipy.linalg.eigh(schur, self.blocks.x_grad.toarray(),
                                eigvals_only=True, subset_by_index=[0, 0])[0]
        if not lam > 0:
            raise SolverError(f"divergence form lost inf-sup stability: {lam}")
        return float(np.sqrt(lam))

    def estimate_poincare(self):
        """Constant bounding the nodal L2 norm by the gradient seminorm."""
        if self.vspace.num_dofs == 0:
            raise SolverError("Poincare estimate needs a nontrivial nodal space")
        lam = scipy.linalg.eigh(self.blocks.x_grad.toarray(),
                                self.blocks.mass_nodal.toarray(),
                                eigvals_only=True, subset_by_index=[0, 0])[0]
        if not lam > 0:
            raise SolverError(f"gradient stiffness lost definiteness: {lam}")
        return 1.0 / float(np.sqrt(lam))

    # -- control-side helpers ---------------------------------------------

    @property
    def projector(self):
        if self._projector is None:
            from .control import DivergenceProjector

            self._projector = DivergenceProjector(
                espace=self.espace,
                vspace=self.vspace,
                decomp=self.decomp,
                blocks=self.blocks,
            )
        return self._projector

    def adjoint_control_average(self, mu, f):
        """Per-tet eps-weighted average of an edge field, as a control."""
        moments = (self.control_coupling(mu).T @ np.asarray(f, dtype=float)).reshape(-1, 3)
        weight = self.decomp.eps_at(mu) * self.espace.volumes
        return moments / weight[:, None]

    # -- cost -----------------------------------------------------------------

    def cost_value(self, mu, u, e):
        """Tracking cost: eps-weighted misfit on D plus eps-weighted control cost."""
        u = np.asarray(u, dtype=float).reshape(-1, 3)
        e = np.asarray(e, dtype=float)
        state_term = float(
            e @ (self.mass_d(mu) @ e)
            - 2.0 * (e @ self.desired_state_vector(mu))
            + self.desired_state_square(mu)
        )
        du = u - self.decomp.ud_at(mu)
        eps_t = self.decomp.eps_at(mu)
        ctrl_term = float(np.sum(eps_t * self.espace.volumes * np.sum(du * du, axis=1)))
        return 0.5 * state_term + 0.5 * self.data.alpha * ctrl_term


def build_truth_model(mesh, decomp, data, espace=None, vspace=None, cspace=None):
    """Assemble spaces and operator blocks into a ready-to-solve model."""
    from .fespace import assemble_blocks, build_spaces

    if espace is None or vspace is None or cspace is None:
        espace, vspace, cspace = build_spaces(mesh)
    blocks = assemble_blocks(espace, vspace, cspace, decomp)
    return TruthModel(
        mesh=mesh,
        espace=espace,
        vspace=vspace,
        cspace=cspace,
        decomp=decomp,
        data=data,
        blocks=blocks,
    )


def write_vtk(path, mesh, cell_vectors=None, comment="maxwellrb export"):
    """Write a legacy-VTK unstructured grid with per-tet vector data."""
    cell_vectors = cell_vectors or {}
    lines = [
        "# vtk DataFile Version 3.0",
        comment,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.num_nodes} double",
    ]
    for p in mesh.nodes:
        lines.append(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}")
    lines.append(f"CELLS {mesh.num_tets} {5 * mesh.num_tets}")
    for t in mesh.tets:
        lines.append(f"4 {int(t[0])} {int(t[1])} {int(t[2])} {int(t[3])}")
    lines.append(f"CELL_TYPES {mesh.num_tets}")
    lines.extend(["10"] * mesh.num_tets)
    if cell_vectors:
        lines.append(f"CELL_DATA {mesh.num_tets}")
        for name, arr in cell_vectors.items():
            arr = np.asarray(arr, dtype=float).reshape(mesh.num_tets, 3)
            lines.append(f"VECTORS {name} double")
            for v in arr:
                lines.append(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def state_fields_for_export(model, e):
    """Per-tet state vector and curl for visualization."""
    return {
        "field": eval_edge_field(model.espace, e),
        "curl": eval_curl_field(model.espace, e),
    }
