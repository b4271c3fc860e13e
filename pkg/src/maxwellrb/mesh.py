"""Tetrahedral meshes of the unit cube.

The generator subdivides [0,1]^3 into n^3 cells and splits every cell into the
six tetrahedra around its main diagonal (one tet per permutation of the axis
steps), so all meshes of a given n are identical down to the node ordering.
Edges carry a global orientation from the lower to the higher node index; all
incidence data needed by the edge-element spaces is precomputed here.
"""

from dataclasses import dataclass
from itertools import permutations

import numpy as np

# local edges of a tet, ordered pairs of local vertex numbers
LOCAL_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
# local faces, opposite to the local vertex of the same position
LOCAL_FACES = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))


class MeshError(Exception):
    """Raised for malformed mesh files or broken mesh invariants."""


@dataclass
class Mesh:
    """Conforming tet mesh with edge incidence and region tags.

    Attributes
    ----------
    nodes : (V, 3) float array
    tets : (T, 4) int array, positively oriented
    edges : (E, 2) int array, each row sorted ascending (global orientation
        low index -> high index), rows in lexicographic order
    tet_edges : (T, 6) int array, global edge index of each local edge
    tet_edge_signs : (T, 6) int array, +1 where the local direction agrees
        with the global orientation, -1 otherwise
    boundary_nodes : (V,) bool
    boundary_edges : (E,) bool
    region_tags : (T,) int, 1 on the observation region D, 0 elsewhere
    h : float, maximum edge length (= max tet diameter)
    """

    nodes: np.ndarray
    tets: np.ndarray
    edges: np.ndarray
    tet_edges: np.ndarray
    tet_edge_signs: np.ndarray
    boundary_nodes: np.ndarray
    boundary_edges: np.ndarray
    region_tags: np.ndarray
    h: float

    @property
    def num_nodes(self):
        return self.nodes.shape[0]

    @property
    def num_tets(self):
        return self.tets.shape[0]

    @property
    def num_edges(self):
        return self.edges.shape[0]

    def barycenters(self):
        return self.nodes[self.tets].mean(axis=1)


def tet_volumes(nodes, tets):
    """Signed volumes, one per tet."""
    p = nodes[tets]
    return np.linalg.det(p[:, 1:] - p[:, :1]) / 6.0


def _build_incidence(nodes, tets):
    """Edge list, tet->edge maps, boundary markers from raw connectivity."""
    npairs = tets[:, LOCAL_EDGES]                      # (T, 6, 2)
    lo = npairs.min(axis=2)
    hi = npairs.max(axis=2)
    signs = np.where(npairs[:, :, 0] == lo, 1, -1).astype(np.int64)

    nv = nodes.shape[0]
    codes = lo.astype(np.int64) * nv + hi.astype(np.int64)
    edge_codes = np.unique(codes)                      # sorted -> lexicographic
    edges = np.column_stack([edge_codes // nv, edge_codes % nv])
    tet_edges = np.searchsorted(edge_codes, codes)

    faces = np.sort(tets[:, LOCAL_FACES], axis=2).reshape(-1, 3)
    uniq, counts = np.unique(faces, axis=0, return_counts=True)
    bfaces = uniq[counts == 1]

    boundary_nodes = np.zeros(nv, dtype=bool)
    boundary_nodes[bfaces.ravel()] = True

    boundary_edges = np.zeros(edges.shape[0], dtype=bool)
    for a, b in ((0, 1), (0, 2), (1, 2)):              # faces are sorted rows
        bc = bfaces[:, a].astype(np.int64) * nv + bfaces[:, b].astype(np.int64)
        boundary_edges[np.searchsorted(edge_codes, bc)] = True

    return edges, tet_edges, signs, boundary_nodes, boundary_edges


def _tet_box_overlap(verts, lo, hi, tol=1e-12):
    """True if the tet and the axis-aligned box overlap with positive volume.

    Separating-axis test over the complete axis set for a tet vs a box (box
    normals, tet face normals, edge-direction cross products); interiors
    intersect iff the projections overlap strictly on every axis.
    """
    center = 0.5 * (lo + hi)
    ext = 0.5 * (hi - lo)
    if np.any(ext <= tol):
        return False
    v = verts - center
    edges = [v[b] - v[a] for a, b in LOCAL_EDGES]

    axes = [np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])]
    for i, j, k in ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)):
        axes.append(np.cross(v[j] - v[i], v[k] - v[i]))
    for e in edges:
        for u in np.eye(3):
            axes.append(np.cross(e, u))

    scale = max(float(np.max(np.abs(v))), float(np.max(ext)), 1.0)
    for a in axes:
        na = np.linalg.norm(a)
        if na < 1e-14 * scale:
            continue
        a = a / na
        p = v @ a
        r = float(ext @ np.abs(a))
        gap = tol * scale
        if p.min() >= r - gap or p.max() <= -r + gap:
            return False
    return True


def _region_tags(nodes, tets, d_box):
    """Tag tets with positive-volume overlap with d_box (None = everywhere)."""
    nt = tets.shape[0]
    if d_box is None:
        return np.ones(nt, dtype=np.int64)
    d_box = np.asarray(d_box, dtype=float).reshape(2, 3)
    lo, hi = d_box[0], d_box[1]
    if np.any(hi < lo):
        raise MeshError("d_box has inverted bounds")
    tags = np.zeros(nt, dtype=np.int64)
    for t in range(nt):
        if _tet_box_overlap(nodes[tets[t]], lo, hi):
            tags[t] = 1
    return tags


def generate_cube_mesh(n, d_box=None):
    """Kuhn triangulation of the unit cube with n subdivisions per axis.

    Parameters
    ----------
    n : int
        Cells per axis; the mesh has (n+1)^3 nodes and 6 n^3 tets.
    d_box : None or array-like (x0, y0, z0, x1, y1, z1)
        Observation region; tets overlapping it (positive volume) are tagged 1.
        None tags the whole domain.
    """
    if n < 1:
        raise MeshError("n must be >= 1")
    n = int(n)

    grid = np.arange(n + 1) / n
    ii, jj, kk = np.meshgrid(grid, grid, grid, indexing="ij")
    nodes = np.column_stack([ii.ravel(), jj.ravel(), kk.ravel()])

    def nid(i, j, k):
        return (i * (n + 1) + j) * (n + 1) + k

    perms = list(permutations(range(3)))
    tets = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                corner = np.array([i, j, k])
                for perm in perms:
                    steps = np.zeros((4, 3), dtype=np.int64)
                    for s, axis in enumerate(perm):
                        steps[s + 1] = steps[s]
                        steps[s + 1, axis] += 1
                    vs = corner + steps
                    tet = [nid(*v) for v in vs]
                    # odd permutations give negative volume; swap to orient
                    parity = sum(
                        1
                        for a in range(3)
                        for b in range(a + 1, 3)
                        if perm[a] > perm[b]
                    )
                    if parity % 2 == 1:
                        tet[2], tet[3] = tet[3], tet[2]
                    tets.append(tet)
    tets = np.asarray(tets, dtype=np.int64)

    edges, tet_edges, signs, bnodes, bedges = _build_incidence(nodes, tets)
    elen = np.linalg.norm(nodes[edges[:, 1]] - nodes[edges[:, 0]], axis=1)
    mesh = Mesh(
        nodes=nodes,
        tets=tets,
        edges=edges,
        tet_edges=tet_edges,
        tet_edge_signs=signs,
        boundary_nodes=bnodes,
        boundary_edges=bedges,
        region_tags=_region_tags(nodes, tets, d_box),
        h=float(elen.max()),
    )
    validate_mesh(mesh)
    return mesh


def validate_mesh(mesh):
    """Check structural invariants; raise MeshError naming the offender."""
    nv, nt = mesh.num_nodes, mesh.num_tets
    if mesh.tets.min(initial=0) < 0 or mesh.tets.max(initial=-1) >= nv:
        bad = np.argwhere((mesh.tets < 0) | (mesh.tets >= nv))
        raise MeshError(f"node index out of range, tet {bad[0][0]}")
    vols = tet_volumes(mesh.nodes, mesh.tets)
    if np.any(vols <= 0):
        t = int(np.argmin(vols))
        raise MeshError(f"non-positive volume, tet {t}")
    if np.any(mesh.edges[:, 0] >= mesh.edges[:, 1]):
        e = int(np.argmax(mesh.edges[:, 0] >= mesh.edges[:, 1]))
        raise MeshError(f"edge {e} not oriented low->high")
    # tet/edge incidence must reproduce the node pairs with the stored signs
    pairs = mesh.tets[:, LOCAL_EDGES]
    tail = np.where(mesh.tet_edge_signs > 0, pairs[:, :, 0], pairs[:, :, 1])
    head = np.where(mesh.tet_edge_signs > 0, pairs[:, :, 1], pairs[:, :, 0])
    ref = mesh.edges[mesh.tet_edges]
    if not (np.array_equal(ref[:, :, 0], tail) and np.array_equal(ref[:, :, 1], head)):
        raise MeshError("tet_edges/tet_edge_signs inconsistent with edges")
    if mesh.region_tags.shape != (nt,):
        raise MeshError("region_tags length mismatch")


def euler_characteristic(mesh):
    """V - E + F - T; equals 1 for a triangulated ball."""
    faces = np.sort(mesh.tets[:, LOCAL_FACES], axis=2).reshape(-1, 3)
    nf = np.unique(faces, axis=0).shape[0]
    return mesh.num_nodes - mesh.num_edges + nf - mesh.num_tets


def save_mesh(mesh, path):
    """Write the ASCII format: node count+coords, tet count+connectivity+tag."""
    lines = [f"nodes {mesh.num_nodes}"]
    for x, y, z in mesh.nodes:
        lines.append(f"{float(x)!r} {float(y)!r} {float(z)!r}")
    lines.append(f"tets {mesh.num_tets}")
    for (i, j, k, l), tag in zip(mesh.tets, mesh.region_tags):
        lines.append(f"{int(i)} {int(j)} {int(k)} {int(l)} {int(tag)}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_mesh(path):
    """Read the ASCII format and rebuild all derived incidence data.

    Edge numbering is reconstructed deterministically (lexicographic by the
    sorted node pair), so a save/load round trip reproduces the mesh exactly.
    """
    with open(path) as f:
        tokens = f.read().split()
    pos = 0

    def take(k):
        nonlocal pos
        if pos + k > len(tokens):
            raise MeshError("unexpected end of file")
        out = tokens[pos : pos + k]
        pos += k
        return out

    kw, count = take(2)
    if kw != "nodes":
        raise MeshError("expected 'nodes <count>'")
    nv = int(count)
    nodes = np.array([float(v) for v in take(3 * nv)]).reshape(nv, 3)

    kw, count = take(2)
    if kw != "tets":
        raise MeshError("expected 'tets <count>'")
    nt = int(count)
    raw = np.array([int(v) for v in take(5 * nt)], dtype=np.int64).reshape(nt, 5)
    if pos != len(tokens):
        raise MeshError("trailing data after tet block")
    tets, tags = raw[:, :4], raw[:, 4]

    if nt == 0 or nv == 0:
        raise MeshError("empty mesh")
    if tets.min() < 0 or tets.max() >= nv:
        bad = np.argwhere((tets < 0) | (tets >= nv))
        raise MeshError(f"node index out of range, tet {bad[0][0]}")
    vols = tet_volumes(nodes, tets)
    if np.any(vols <= 0):
        raise MeshError(f"non-positive volume, tet {int(np.argmin(vols))}")
    edges, tet_edges, signs, bnodes, bedges = _build_incidence(nodes, tets)
    elen = np.linalg.norm(nodes[edges[:, 1]] - nodes[edges[:, 0]], axis=1)
    mesh = Mesh(
        nodes=nodes,
        tets=tets,
        edges=edges,
        tet_edges=tet_edges,
        tet_edge_signs=signs,
        boundary_nodes=bnodes,
        boundary_edges=bedges,
        region_tags=tags,
        h=float(elen.max()),
    )
    validate_mesh(mesh)
    return mesh
