"""Lowest-order edge (Whitney) and nodal element spaces on tet meshes,
with assembly of all parameter-separated operator blocks.

Spaces impose the homogeneous tangential/Dirichlet boundary condition by
construction: boundary edges and boundary nodes carry no dof. The control
space is piecewise-constant vectors (three dofs per tet, layout (T, 3)).

Every bilinear block is integrated with the order-2 four-point simplex rule,
which is exact for products of Whitney functions with per-tet-constant
coefficients. The divergence coupling, the weighted nodal Laplacians and the
control divergence operator are formed as exact sparse products with the
discrete gradient G, so the compatibility identities between them hold to
rounding and not just to quadrature accuracy.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import LOCAL_EDGES, Mesh, tet_volumes


class TrivialSpaceError(Exception):
    """Raised when a mesh has no interior edge or nodal dofs."""


# order-2 simplex rule: 4 points, barycentric permutations of (a, b, b, b)
_QA = 0.5854101966249685
_QB = 0.13819660112501053
QUAD_LAMBDA = np.array(
    [
        [_QA, _QB, _QB, _QB],
        [_QB, _QA, _QB, _QB],
        [_QB, _QB, _QA, _QB],
        [_QB, _QB, _QB, _QA],
    ]
)
QUAD_W = np.full(4, 0.25)


@dataclass
class EdgeSpace:
    mesh: Mesh
    dof_of_edge: np.ndarray      # (E,) int, -1 on boundary edges
    num_dofs: int
    grad_lambda: np.ndarray      # (T, 4, 3) gradients of barycentric coords
    volumes: np.ndarray          # (T,)


@dataclass
class NodalSpace:
    mesh: Mesh
    dof_of_node: np.ndarray      # (V,) int, -1 on boundary nodes
    num_dofs: int


@dataclass
class ControlSpace:
    mesh: Mesh
    volumes: np.ndarray

    @property
    def num_dofs(self):
        return 3 * self.mesh.num_tets


def _geometry(mesh):
    """Barycentric gradients and volumes for every tet."""
    verts = mesh.nodes[mesh.tets]                        # (T, 4, 3)
    mats = np.concatenate([np.ones((mesh.num_tets, 4, 1)), verts], axis=2)
    inv = np.linalg.inv(mats)                            # (T, 4, 4)
    grad = inv[:, 1:4, :].transpose(0, 2, 1)             # (T, 4, 3)
    return grad, tet_volumes(mesh.nodes, mesh.tets)


def build_spaces(mesh, allow_trivial=False):
    """Edge, nodal and control spaces for a mesh.

    Raises TrivialSpaceError when there are no interior edges or nodes,
    unless allow_trivial is set (degenerate meshes are only useful to
    inspect dof counts).
    """
    edof = np.full(mesh.num_edges, -1, dtype=np.int64)
    interior_e = np.flatnonzero(~mesh.boundary_edges)
    edof[interior_e] = np.arange(interior_e.size)

    ndof = np.full(mesh.num_nodes, -1, dtype=np.int64)
    interior_n = np.flatnonzero(~mesh.boundary_nodes)
    ndof[interior_n] = np.arange(interior_n.size)

    if not allow_trivial and (interior_e.size == 0 or interior_n.size == 0):
        raise TrivialSpaceError(
            f"trivial space: {interior_e.size} interior edges, "
            f"{interior_n.size} interior nodes (need a finer mesh)"
        )

    grad, vols = _geometry(mesh)
    espace = EdgeSpace(mesh, edof, interior_e.size, grad, vols)
    vspace = NodalSpace(mesh, ndof, interior_n.size)
    cspace = ControlSpace(mesh, vols)
    return espace, vspace, cspace


def whitney_values(espace):
    """Whitney basis values at the quadrature points, signed.

    Returns (T, 4, 6, 3): point, local edge, component.
    """
    g = espace.grad_lambda
    out = np.empty((g.shape[0], 4, 6, 3))
    for le, (a, b) in enumerate(LOCAL_EDGES):
        out[:, :, le, :] = (
            QUAD_LAMBDA[None, :, a, None] * g[:, None, b, :]
            - QUAD_LAMBDA[None, :, b, None] * g[:, None, a, :]
        )
    return out * espace.mesh.tet_edge_signs[:, None, :, None]


def whitney_curls(espace):
    """Per-tet constant curls of the signed Whitney functions, (T, 6, 3)."""
    g = espace.grad_lambda
    out = np.empty((g.shape[0], 6, 3))
    for le, (a, b) in enumerate(LOCAL_EDGES):
        out[:, le, :] = 2.0 * np.cross(g[:, a, :], g[:, b, :])
    return out * espace.mesh.tet_edge_signs[:, :, None]


def whitney_integrals(espace):
    """Integrals of the signed Whitney functions over their tets, (T, 6, 3)."""
    g = espace.grad_lambda
    out = np.empty((g.shape[0], 6, 3))
    for le, (a, b) in enumerate(LOCAL_EDGES):
        out[:, le, :] = g[:, b, :] - g[:, a, :]
    return out * (espace.volumes[:, None, None] / 4.0) * espace.mesh.tet_edge_signs[:, :, None]


def _scatter_edge_matrix(espace, local):
    """Accumulate (T, 6, 6) local blocks into a csr on interior edge dofs."""
    dofs = espace.dof_of_edge[espace.mesh.tet_edges]     # (T, 6)
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    vals = local.ravel()
    keep = (rows >= 0) & (cols >= 0)
    mat = sp.coo_matrix(
        (vals[keep], (rows[keep], cols[keep])),
        shape=(espace.num_dofs, espace.num_dofs),
    )
    return mat.tocsr()


def assemble_edge_mass(espace, coeff):
    """(coeff u, v) over the edge space; coeff is per-tet."""
    w = whitney_values(espace)
    local = np.einsum("q,tqei,tqfi->tef", QUAD_W, w, w)
    local *= (coeff * espace.volumes)[:, None, None]
    return _scatter_edge_matrix(espace, local)


def assemble_curl_curl(espace, coeff):
    """(coeff curl u, curl v) over the edge space; coeff is per-tet."""
    c = whitney_curls(espace)
    local = np.einsum("tei,tfi->tef", c, c)
    local *= (coeff * espace.volumes)[:, None, None]
    return _scatter_edge_matrix(espace, local)


def assemble_control_coupling(espace, coeff):
    """(coeff u, v) with u piecewise constant, v in the edge space.

    Returns csr of shape (edge dofs, 3 T); control layout is (T, 3) flattened.
    """
    intw = whitney_integrals(espace) * coeff[:, None, None]
    nt = espace.mesh.num_tets
    dofs = espace.dof_of_edge[espace.mesh.tet_edges]     # (T, 6)
    rows = np.repeat(dofs[:, :, None], 3, axis=2).ravel()
    cols = (3 * np.arange(nt)[:, None, None] + np.arange(3)[None, None, :])
    cols = np.broadcast_to(cols, (nt, 6, 3)).ravel()
    vals = intw.ravel()
    keep = rows >= 0
    mat = sp.coo_matrix(
        (vals[keep], (rows[keep], cols[keep])),
        shape=(espace.num_dofs, 3 * nt),
    )
    return mat.tocsr()


def assemble_load(espace, vspace, coeff):
    """(coeff, phi) for nodal hats phi; coeff per tet. Interior dofs only."""
    mesh = espace.mesh
    contrib = np.repeat((coeff * espace.volumes / 4.0)[:, None], 4, axis=1)
    nodal = np.zeros(mesh.num_nodes)
    np.add.at(nodal, mesh.tets.ravel(), contrib.ravel())
    return nodal[~mesh.boundary_nodes]


def assemble_nodal_mass(espace, vspace):
    """(phi, psi) for nodal hats, interior dofs."""
    mesh = espace.mesh
    local = np.einsum("q,qa,qb->ab", QUAD_W, QUAD_LAMBDA, QUAD_LAMBDA)
    local = local[None, :, :] * espace.volumes[:, None, None]
    dofs = vspace.dof_of_node[mesh.tets]
    rows = np.repeat(dofs, 4, axis=1).ravel()
    cols = np.tile(dofs, (1, 4)).ravel()
    keep = (rows >= 0) & (cols >= 0)
    mat = sp.coo_matrix(
        (local.ravel()[keep], (rows[keep], cols[keep])),
        shape=(vspace.num_dofs, vspace.num_dofs),
    )
    return mat.tocsr()


def discrete_gradient(espace, vspace):
    """Edge-dof coefficients of nodal hat gradients: csr (edge dofs, node dofs).

    The gradient of a hat function has edge dof +1 on edges pointing into the
    node and -1 on edges leaving it (global low->high orientation).
    """
    mesh = espace.mesh
    rows, cols, vals = [], [], []
    for end, sign in ((1, 1.0), (0, -1.0)):
        ed = espace.dof_of_edge
        nd = vspace.dof_of_node[mesh.edges[:, end]]
        keep = (ed >= 0) & (nd >= 0)
        rows.append(ed[keep])
        cols.append(nd[keep])
        vals.append(np.full(int(keep.sum()), sign))
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(espace.num_dofs, vspace.num_dofs),
    )
    return mat.tocsr()


@dataclass
class OperatorBlocks:
    """Parameter-separated operator blocks on the interior dofs.

    Lists are indexed by the affine term; `curl_q` follows the sigma^-1
    expansion, the mass/divergence/control families follow the eps expansion,
    `load_q` the charge expansion. `desired_state_vec[p][q]` pairs eps term p
    with desired-state term q; `desired_state_sq[p, q, r]` holds the constant
    (eps_p E_q, E_r)_D needed by the cost.
    """

    curl_q: list
    mass_q: list
    mass_d_q: list
    div_q: list
    ctrl_q: list
    ctrl_div_q: list
    lap_q: list
    load_q: list
    grad: sp.csr_matrix
    x_curl: sp.csr_matrix
    x_grad: sp.csr_matrix
    mass_nodal: sp.csr_matrix
    desired_state_vec: list = field(default_factory=list)
    desired_state_sq: np.ndarray = None
    mass_unit: sp.csr_matrix = None


def assemble_blocks(espace, vspace, cspace, decomp):
    """Assemble every affine block for a bound coefficient decomposition.

    `decomp` provides per-tet arrays: sigma_inv_fields (Qs, T),
    eps_fields (Qe, T), rho_fields (Qr, T), desired-state terms via
    `ed_term_arrays(espace)` (list of (kind, array)).
    """
    mesh = espace.mesh
    in_d = (mesh.region_tags == 1).astype(float)

    curl_q = [assemble_curl_curl(espace, f) for f in decomp.sigma_inv_fields]
    mass_q = [assemble_edge_mass(espace, f) for f in decomp.eps_fields]
    mass_d_q = [assemble_edge_mass(espace, f * in_d) for f in decomp.eps_fields]
    ctrl_q = [assemble_control_coupling(espace, f) for f in decomp.eps_fields]
    load_q = [assemble_load(espace, vspace, f) for f in decomp.rho_fields]

    grad = discrete_gradient(espace, vspace)
    gt = grad.T.tocsr()
    div_q = [(gt @ m).tocsr() for m in mass_q]
    lap_q = [(gt @ m @ grad).tocsr() for m in mass_q]
    ctrl_div_q = [(gt @ m).tocsr() for m in ctrl_q]

    ones = np.ones(mesh.num_tets)
    m_unit = assemble_edge_mass(espace, ones)
    x_curl = (m_unit + assemble_curl_curl(espace, ones)).tocsr()
    x_grad = (gt @ m_unit @ grad).tocsr()
    mass_nodal = assemble_nodal_mass(espace, vspace)

    ed_terms = decomp.ed_term_arrays(espace)
    has_tet_terms = any(kind == "tet" for kind, _ in ed_terms)
    ed_vec = []
    ed_sq = np.zeros((len(mass_q), len(ed_terms), len(ed_terms)))
    for p, epsf in enumerate(decomp.eps_fields):
        mud = assemble_control_coupling(espace, epsf * in_d) if has_tet_terms else None
        row = []
        for kind, arr in ed_terms:
            if kind == "edge":
                row.append(mass_d_q[p] @ arr)
            else:
                row.append(mud @ arr.ravel())
        ed_vec.append(row)
        for qi, (kind_i, arr_i) in enumerate(ed_terms):
            for qj, (kind_j, arr_j) in enumerate(ed_terms):
                if kind_i == "edge" and kind_j == "edge":
                    ed_sq[p, qi, qj] = arr_i @ (mass_d_q[p] @ arr_j)
                elif kind_i == "tet" and kind_j == "tet":
                    w = epsf * in_d * espace.volumes
                    ed_sq[p, qi, qj] = np.sum(w * np.sum(arr_i * arr_j, axis=1))
                elif kind_i == "tet":  # mixed: integrate edge field against P0
                    ed_sq[p, qi, qj] = arr_i.ravel() @ (mud.T @ arr_j)
                else:
                    ed_sq[p, qi, qj] = arr_j.ravel() @ (mud.T @ arr_i)

    return OperatorBlocks(
        curl_q=curl_q,
        mass_q=mass_q,
        mass_d_q=mass_d_q,
        div_q=div_q,
        ctrl_q=ctrl_q,
        ctrl_div_q=ctrl_div_q,
        lap_q=lap_q,
        load_q=load_q,
        grad=grad,
        x_curl=x_curl,
        x_grad=x_grad,
        mass_nodal=mass_nodal,
        desired_state_vec=ed_vec,
        desired_state_sq=ed_sq,
        mass_unit=m_unit.tocsr(),
    )


def edge_interpolate(espace, fn, order=5):
    """Edge dofs of a vector field: tangential line integrals, Gauss rule."""
    mesh = espace.mesh
    x, w = np.polynomial.legendre.leggauss(order)
    s = 0.5 * (x + 1.0)
    a = mesh.nodes[mesh.edges[:, 0]]
    b = mesh.nodes[mesh.edges[:, 1]]
    tang = b - a
    dofs = np.zeros(mesh.num_edges)
    for si, wi in zip(s, w):
        pts = a + si * tang
        dofs += 0.5 * wi * np.einsum("ei,ei->e", fn(pts), tang)
    return dofs[~mesh.boundary_edges]


def eval_edge_field(espace, coeffs, points_lambda=None):
    """Evaluate an interior-dof edge field at barycentric points per tet.

    Default: the single barycenter, returning (T, 3).
    """
    mesh = espace.mesh
    if points_lambda is None:
        points_lambda = np.full((1, 4), 0.25)
    full = np.zeros(mesh.num_edges)
    full[~mesh.boundary_edges] = coeffs
    local = full[mesh.tet_edges] * mesh.tet_edge_signs   # (T, 6)
    g = espace.grad_lambda
    out = np.zeros((mesh.num_tets, points_lambda.shape[0], 3))
    for le, (a, b) in enumerate(LOCAL_EDGES):
        w = (
            points_lambda[None, :, a, None] * g[:, None, b, :]
            - points_lambda[None, :, b, None] * g[:, None, a, :]
        )
        out += local[:, le, None, None] * w
    return out[:, 0, :] if points_lambda.shape[0] == 1 else out


def eval_curl_field(espace, coeffs):
    """Per-tet constant curl of an interior-dof edge field, (T, 3)."""
    mesh = espace.mesh
    full = np.zeros(mesh.num_edges)
    full[~mesh.boundary_edges] = coeffs
    local = full[mesh.tet_edges] * mesh.tet_edge_signs
    c = np.empty((mesh.num_tets, 6, 3))
    g = espace.grad_lambda
    for le, (a, b) in enumerate(LOCAL_EDGES):
        c[:, le, :] = 2.0 * np.cross(g[:, a, :], g[:, b, :])
    return np.einsum("te,tei->ti", local, c)


def p0_interpolate(cspace, fn):
    """Per-tet barycenter samples of a vector field, (T, 3)."""
    return fn(cspace.mesh.barycenters())
