"""Greedy reduced-basis construction and the reduced-order control model.

Each greedy step solves the truth control problem at the worst certified
parameter, then enriches the edge basis with the optimal state, the optimal
adjoint and the gradients of their Helmholtz potentials, and the nodal basis
with the potentials themselves. Keeping those gradients in the edge space is
what lets the reduced divergence multiplier absorb the same compatibility
defect the truth saddle absorbs, so snapshots are reproduced exactly.

The control stays full-dimensional throughout; only state and adjoint are
reduced, and the reduced model reuses the truth projector (same admissible
set, same factorization cache).
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from . import control as ctl
from . import estimator as est

log = logging.getLogger(__name__)

DEFLATION_TOL = 1e-10
STABILITY_FLOOR = 1e-12
SNAPSHOT_TOL = 1e-11
SCAN_TOL = 1e-12
SCAN_PROJECTION_TOL = 1e-13


class GreedyError(Exception):
    pass


@dataclass
class ReducedBasis:
    """Orthonormal bases with every affine block projected onto them.

    z_e columns are X_curl-orthonormal, z_v columns X_grad-orthonormal.
    Projected blocks follow the affine term lists of the decomposition the
    basis was built from; ctrl_hat keeps the full control dimension.
    """

    z_e: np.ndarray
    z_v: np.ndarray
    a_hat: list
    mass_hat: list
    mass_d_hat: list
    b_hat: list
    ctrl_hat: list
    load_hat: list
    ed_hat: list
    parameters: np.ndarray
    history: list = field(default_factory=list)
    config_hash: str = ""

    @property
    def dim_e(self):
        return self.z_e.shape[1]

    @property
    def dim_v(self):
        return self.z_v.shape[1]


def _hash_config(model):
    tag = {
        "edge_dofs": int(model.espace.num_dofs),
        "nodal_dofs": int(model.vspace.num_dofs),
        "tets": int(model.mesh.num_tets),
        "sigma_terms": len(model.decomp.sigma_inv_terms),
        "eps_terms": len(model.decomp.eps_terms),
        "alpha": float(model.data.alpha),
    }
    return hashlib.sha256(json.dumps(tag, sort_keys=True).encode()).hexdigest()[:16]


def empty_basis(model):
    ne = model.espace.num_dofs
    nv = model.vspace.num_dofs
    nq_s = len(model.blocks.curl_q)
    nq_e = len(model.blocks.mass_q)
    return ReducedBasis(
        z_e=np.zeros((ne, 0)),
        z_v=np.zeros((nv, 0)),
        a_hat=[np.zeros((0, 0)) for _ in range(nq_s)],
        mass_hat=[np.zeros((0, 0)) for _ in range(nq_e)],
        mass_d_hat=[np.zeros((0, 0)) for _ in range(nq_e)],
        b_hat=[np.zeros((0, 0)) for _ in range(nq_e)],
        ctrl_hat=[np.zeros((0, b.shape[1])) for b in model.blocks.ctrl_q],
        load_hat=[np.zeros(0) for _ in model.blocks.load_q],
        ed_hat=[[np.zeros(0) for _ in row] for row in model.blocks.desired_state_vec],
        parameters=np.zeros((0, model.decomp.domain.dimension)),
        config_hash=_hash_config(model),
    )


def _orthonormalize(candidates, existing, gram, deflation_tol=DEFLATION_TOL):
    """Modified Gram-Schmidt with one reorthogonalization pass.

    Returns accepted columns, already normalized in the gram geometry.
    """
    kept = []
    basis = [existing[:, j] for j in range(existing.shape[1])]
    for v in candidates:
        v = np.asarray(v, dtype=float)
        original = math.sqrt(max(v @ (gram @ v), 0.0))
        if original == 0.0:
            continue
        w = v.copy()
        for _ in range(2):
            for b in basis:
                w = w - (b @ (gram @ w)) * b
        norm = math.sqrt(max(w @ (gram @ w), 0.0))
        if norm <= deflation_tol * original:
            continue
        w = w / norm
        basis.append(w)
        kept.append(w)
    return kept


def extend_basis(rb, model, edge_snapshots, nodal_snapshots, mu=None):
    """Grow both bases and update every projected block incrementally."""
    blocks = model.blocks
    new_e = _orthonormalize(edge_snapshots, rb.z_e, blocks.x_curl)
    new_v = _orthonormalize(nodal_snapshots, rb.z_v, blocks.x_grad)
    z_e = np.column_stack([rb.z_e] + new_e) if new_e else rb.z_e
    z_v = np.column_stack([rb.z_v] + new_v) if new_v else rb.z_v

    def border_square(old, mat):
        if not new_e:
            return old
        cols = mat @ z_e[:, rb.dim_e:]
        top = np.hstack([old, rb.z_e.T @ cols])
        bottom = np.hstack([z_e[:, rb.dim_e:].T @ (mat @ rb.z_e), z_e[:, rb.dim_e:].T @ cols])
        return np.vstack([top, bottom])

    def border_rect(old, mat):
        out = old
        if new_e:
            out = np.hstack([out, rb.z_v.T @ (mat @ z_e[:, rb.dim_e:])])
        if new_v:
            out = np.vstack([out, z_v[:, rb.dim_v:].T @ (mat @ z_e)])
        return out

    def extend_vec(old, vec, basis_new):
        if not basis_new:
            return old
        return np.concatenate([old, np.column_stack(basis_new).T @ vec])

    a_hat = [border_square(h, m) for h, m in zip(rb.a_hat, blocks.curl_q)]
    mass_hat = [border_square(h, m) for h, m in zip(rb.mass_hat, blocks.mass_q)]
    mass_d_hat = [border_square(h, m) for h, m in zip(rb.mass_d_hat, blocks.mass_d_q)]
    b_hat = [border_rect(h, m) for h, m in zip(rb.b_hat, blocks.div_q)]
    ctrl_hat = [
        np.vstack([h, np.column_stack(new_e).T @ m]) if new_e else h
        for h, m in zip(rb.ctrl_hat, blocks.ctrl_q)
    ]
    load_hat = [extend_vec(h, v, new_v) for h, v in zip(rb.load_hat, blocks.load_q)]
    ed_hat = [
        [extend_vec(h, v, new_e) for h, v in zip(row_h, row_v)]
        for row_h, row_v in zip(rb.ed_hat, blocks.desired_state_vec)
    ]

    parameters = rb.parameters
    if mu is not None:
        parameters = np.vstack([parameters, np.asarray(mu, dtype=float)[None]])
    out = replace(
        rb,
        z_e=z_e,
        z_v=z_v,
        a_hat=a_hat,
        mass_hat=mass_hat,
        mass_d_hat=mass_d_hat,
        b_hat=b_hat,
        ctrl_hat=ctrl_hat,
        load_hat=load_hat,
        ed_hat=ed_hat,
        parameters=parameters,
        history=list(rb.history),
    )
    if out.dim_v > out.dim_e:
        raise GreedyError("nodal basis outgrew edge basis")
    return out


def lift(rb, coeffs, kind="edge"):
    coeffs = np.asarray(coeffs, dtype=float)
    basis = rb.z_e if kind == "edge" else rb.z_v
    if coeffs.shape != (basis.shape[1],):
        raise ValueError(f"coefficient length {coeffs.shape} does not match basis {basis.shape[1]}")
    return basis @ coeffs


def _combine(theta, mats):
    out = float(theta[0]) * mats[0]
    for c, m in zip(theta[1:], mats[1:]):
        out = out + float(c) * m
    return out


@dataclass
class ReducedModel:
    """Dense reduced saddle solves behind the truth model's interface.

    State and adjoint vectors are reduced coordinate vectors; the control
    side (projector, admissible set, averages) is shared with the truth
    model unchanged.
    """

    rb: ReducedBasis
    truth: object
    _factors: dict = field(default_factory=dict, repr=False)

    @property
    def data(self):
        return self.truth.data

    @property
    def decomp(self):
        return self.truth.decomp

    @property
    def espace(self):
        return self.truth.espace

    @property
    def mesh(self):
        return self.truth.mesh

    @property
    def projector(self):
        return self.truth.projector

    def a_hat(self, mu):
        return _combine(self.decomp.theta_sigma_inv(mu), self.rb.a_hat)

    def b_hat(self, mu):
        return _combine(self.decomp.theta_eps(mu), self.rb.b_hat)

    def mass_d_hat(self, mu):
        return _combine(self.decomp.theta_eps(mu), self.rb.mass_d_hat)

    def ctrl_hat(self, mu):
        return _combine(self.decomp.theta_eps(mu), self.rb.ctrl_hat)

    def charge_hat(self, mu):
        return _combine(self.decomp.theta_rho(mu), self.rb.load_hat)

    def desired_state_hat(self, mu):
        te = self.decomp.theta_eps(mu)
        td = self.decomp.theta_ed(mu)
        out = np.zeros(self.rb.dim_e)
        for p, tp in enumerate(te):
            for q, tq in enumerate(td):
                out = out + float(tp) * float(tq) * self.rb.ed_hat[p][q]
        return out

    def _factor(self, mu):
        key = np.asarray(mu, dtype=float).tobytes()
        if key not in self._factors:
            n, m = self.rb.dim_e, self.rb.dim_v
            k = np.zeros((n + m, n + m))
            k[:n, :n] = self.a_hat(mu)
            if m:
                bh = self.b_hat(mu)
                k[:n, n:] = bh.T
                k[n:, :n] = bh
            try:
                self._factors[key] = scipy.linalg.lu_factor(k)
            except scipy.linalg.LinAlgError as exc:
                raise GreedyError(f"reduced inf-sup failure at mu={np.asarray(mu)}; enrich basis") from exc
        return self._factors[key]

    def _solve(self, mu, f, g):
        n, m = self.rb.dim_e, self.rb.dim_v
        rhs = np.concatenate([f, g])
        sol = scipy.linalg.lu_solve(self._factor(mu), rhs)
        if not np.all(np.isfinite(sol)):
            raise GreedyError(f"reduced inf-sup failure at mu={np.asarray(mu)}; enrich basis")
        return sol[:n], sol[n:]

    def solve_state(self, mu, u):
        f = self.ctrl_hat(mu) @ np.asarray(u, dtype=float).ravel()
        g = -self.charge_hat(mu)
        e_hat, _ = self._solve(mu, f, g)
        if self.rb.dim_v:
            res = np.linalg.norm(self.b_hat(mu) @ e_hat - g)
            if res > 1e-10 * max(np.linalg.norm(g), 1.0):
                raise GreedyError(f"reduced divergence residual {res:.3e}")
        return e_hat

    def solve_adjoint(self, mu, e_hat):
        f = self.mass_d_hat(mu) @ e_hat - self.desired_state_hat(mu)
        f_hat, _ = self._solve(mu, f, np.zeros(self.rb.dim_v))
        return f_hat

    def adjoint_control_average(self, mu, f_hat):
        moments = (self.ctrl_hat(mu).T @ f_hat).reshape(-1, 3)
        weight = self.decomp.eps_at(mu) * self.espace.volumes
        return moments / weight[:, None]

    def cost_value(self, mu, u, e_hat):
        u = np.asarray(u, dtype=float).reshape(-1, 3)
        state_term = float(
            e_hat @ (self.mass_d_hat(mu) @ e_hat)
            - 2.0 * (e_hat @ self.desired_state_hat(mu))
            + self.truth.desired_state_square(mu)
        )
        du = u - self.decomp.ud_at(mu)
        eps_t = self.decomp.eps_at(mu)
        ctrl_term = float(np.sum(eps_t * self.espace.volumes * np.sum(du * du, axis=1)))
        return 0.5 * state_term + 0.5 * self.data.alpha * ctrl_term

    def lift_state(self, e_hat):
        return lift(self.rb, e_hat, "edge")


def build_reduced_model(rb, truth):
    return ReducedModel(rb=rb, truth=truth)


def solve_reduced(rb, truth, mu, tol=1e-10, **kwargs):
    """Reduced-order control solve; returns the usual solution structure."""
    return ctl.solve_ocp(build_reduced_model(rb, truth), mu, tol=tol, **kwargs)


def reduced_kernel_coercivity(model, mu):
    """Smallest reduced curl-form eigenvalue on the reduced constraint kernel."""
    a = model.a_hat(mu)
    if model.rb.dim_v == 0:
        kernel = np.eye(model.rb.dim_e)
    else:
        kernel = scipy.linalg.null_space(model.b_hat(mu))
    if kernel.shape[1] == 0:
        raise GreedyError("reduced constraint kernel is empty")
    sym = kernel.T @ (a @ kernel)
    vals = scipy.linalg.eigvalsh(0.5 * (sym + sym.T))
    return float(vals[0])


def reduced_infsup(model, mu):
    if model.rb.dim_v == 0:
        return math.inf
    return float(np.linalg.svd(model.b_hat(mu), compute_uv=False)[-1])


def _check_stability(rb, truth, training_set):
    """Reduced coercivity/inf-sup sweep; enriches with gradient supremizers once."""
    model = build_reduced_model(rb, truth)
    worst_coer = min(reduced_kernel_coercivity(model, mu) for mu in training_set)
    worst_beta = min(reduced_infsup(model, mu) for mu in training_set)
    if worst_coer >= STABILITY_FLOOR and worst_beta > 0.0:
        return rb
    log.warning(
        "reduced stability degraded (coercivity %.3e, inf-sup %.3e); adding gradient supremizers",
        worst_coer, worst_beta,
    )
    supremizers = [truth.blocks.grad @ rb.z_v[:, j] for j in range(rb.dim_v)]
    rb = extend_basis(rb, truth, supremizers, [])
    model = build_reduced_model(rb, truth)
    worst_coer = min(reduced_kernel_coercivity(model, mu) for mu in training_set)
    worst_beta = min(reduced_infsup(model, mu) for mu in training_set)
    if worst_coer < STABILITY_FLOOR or worst_beta <= 0.0:
        raise GreedyError(
            f"reduced stability not restored (coercivity {worst_coer:.3e}, inf-sup {worst_beta:.3e})"
        )
    return rb


def _snapshots(truth, mu, tol=SNAPSHOT_TOL):
    sol = ctl.solve_ocp(truth, mu, tol=tol, proj_tol=SCAN_PROJECTION_TOL)
    if not sol.projection_ok:
        raise GreedyError(f"admissible-set projection did not converge at mu={np.asarray(mu)}")
    e_star, f_star = sol.state, sol.adjoint
    scale = max(truth.x_norm(e_star), truth.x_norm(f_star))
    if scale == 0.0:
        log.warning("all-zero snapshot at mu=%s; skipping enrichment", np.asarray(mu))
        return [], []
    _, he = truth.helmholtz_decompose(e_star)
    _, hf = truth.helmholtz_decompose(f_star)
    grad = truth.blocks.grad
    return [e_star, f_star, grad @ he, grad @ hf], [he, hf]


def greedy(truth, training_set, tolerance, n_max, ledger, first_index=0):
    """Weak greedy loop driven by the certified absolute control estimator.

    Ties in the argmax break toward the lowest training index, snapshots are
    solved tighter than the certification tolerance so the estimator floor
    stays below the greedy tolerance, and the per-iteration log records the
    chosen parameter, the maximal estimator value and the basis dimensions.
    """
    training_set = np.asarray(training_set, dtype=float)
    if training_set.ndim != 2 or training_set.shape[0] == 0:
        raise GreedyError("training set must be a nonempty parameter array")

    rb = empty_basis(truth)
    mu1 = training_set[first_index]
    edge_snaps, nodal_snaps = _snapshots(truth, mu1)
    rb = extend_basis(rb, truth, edge_snaps, nodal_snaps, mu=mu1)
    rb = _check_stability(rb, truth, training_set)

    for iteration in range(1, n_max + 1):
        model = build_reduced_model(rb, truth)
        deltas = np.empty(len(training_set))
        for i, mu in enumerate(training_set):
            sol = ctl.solve_ocp(model, mu, tol=SCAN_TOL, proj_tol=SCAN_PROJECTION_TOL)
            cert = est.certify(model, mu, sol, ledger)
            deltas[i] = cert.delta_abs
        pick = int(np.argmax(deltas))
        max_delta = float(deltas[pick])
        rb.history.append(
            {
                "iteration": iteration,
                "dim_e": rb.dim_e,
                "dim_v": rb.dim_v,
                "max_delta": max_delta,
                "mu": [float(v) for v in training_set[pick]],
            }
        )
        log.info(
            "greedy %d: dim_e=%d dim_v=%d max_delta=%.3e at %s",
            iteration, rb.dim_e, rb.dim_v, max_delta, training_set[pick],
        )
        if max_delta <= tolerance or iteration == n_max:
            if max_delta > tolerance:
                log.warning("greedy stopped at n_max with max_delta %.3e", max_delta)
            return rb
        edge_snaps, nodal_snaps = _snapshots(truth, training_set[pick])
        if edge_snaps or nodal_snaps:
            rb = extend_basis(rb, truth, edge_snaps, nodal_snaps, mu=training_set[pick])
            rb = _check_stability(rb, truth, training_set)
    return rb


def truncate_basis(rb, truth, n_snapshots):
    """Rebuild the basis from the first n_snapshots snapshot parameters.

    Re-solves the truth problems at the logged parameters, which keeps the
    prefix property exact for size sweeps.
    """
    rb_small = empty_basis(truth)
    for mu in rb.parameters[:n_snapshots]:
        edge_snaps, nodal_snaps = _snapshots(truth, mu)
        rb_small = extend_basis(rb_small, truth, edge_snaps, nodal_snaps, mu=mu)
    return rb_small


def save_basis(rb, path):
    """Single-file archive: sorted-key JSON manifest, then raw float64 bytes."""
    arrays = {"z_e": rb.z_e, "z_v": rb.z_v, "parameters": rb.parameters}
    for name in ("a_hat", "mass_hat", "mass_d_hat", "b_hat", "ctrl_hat", "load_hat"):
        for i, arr in enumerate(getattr(rb, name)):
            arrays[f"{name}.{i}"] = arr
    for p, row in enumerate(rb.ed_hat):
        for q, arr in enumerate(row):
            arrays[f"ed_hat.{p}.{q}"] = arr
    manifest = {
        "arrays": {
            k: list(np.asarray(v).shape) for k, v in sorted(arrays.items())
        },
        "config_hash": rb.config_hash,
        "ed_shape": [len(rb.ed_hat), len(rb.ed_hat[0]) if rb.ed_hat else 0],
        "history": rb.history,
    }
    header = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for k in sorted(arrays):
            f.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def load_basis(path):
    with open(path, "rb") as f:
        hlen = int.from_bytes(f.read(8), "little")
        manifest = json.loads(f.read(hlen).decode())
        arrays = {}
        for k in sorted(manifest["arrays"]):
            shape = tuple(manifest["arrays"][k])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            arrays[k] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()

    def group(name):
        idx = 0
        out = []
        while f"{name}.{idx}" in arrays:
            out.append(arrays[f"{name}.{idx}"])
            idx += 1
        return out

    np_, nq = manifest["ed_shape"]
    ed_hat = [[arrays[f"ed_hat.{p}.{q}"] for q in range(nq)] for p in range(np_)]
    return ReducedBasis(
        z_e=arrays["z_e"],
        z_v=arrays["z_v"],
        a_hat=group("a_hat"),
        mass_hat=group("mass_hat"),
        mass_d_hat=group("mass_d_hat"),
        b_hat=group("b_hat"),
        ctrl_hat=group("ctrl_hat"),
        load_hat=group("load_hat"),
        ed_hat=ed_hat,
        parameters=arrays["parameters"],
        history=manifest["history"],
        config_hash=manifest["config_hash"],
    )
