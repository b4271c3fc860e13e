import numpy as np
import pytest

from maxwellrb.mesh import (
    LOCAL_EDGES,
    MeshError,
    euler_characteristic,
    generate_cube_mesh,
    load_mesh,
    save_mesh,
    tet_volumes,
    validate_mesh,
)


def brute_force_counts(mesh):
    """Edge/face counts straight from the connectivity, no incidence reuse."""
    edges = set()
    faces = {}
    for tet in mesh.tets:
        for a, b in LOCAL_EDGES:
            edges.add(tuple(sorted((tet[a], tet[b]))))
        for f in ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)):
            key = tuple(sorted(tet[list(f)]))
            faces[key] = faces.get(key, 0) + 1
    return len(edges), faces


def expected_edge_count(n):
    # axis-aligned + one face diagonal per face + one body diagonal per cell
    return 3 * n * (n + 1) ** 2 + 3 * n**2 * (n + 1) + n**3


def test_unit_cell_counts():
    mesh = generate_cube_mesh(1)
    assert mesh.num_nodes == 8
    assert mesh.num_tets == 6
    assert mesh.num_edges == 19
    assert mesh.h == pytest.approx(np.sqrt(3.0))
    assert np.all(mesh.region_tags == 1)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_counts_against_formula_and_euler(n):
    mesh = generate_cube_mesh(n)
    assert mesh.num_nodes == (n + 1) ** 3
    assert mesh.num_tets == 6 * n**3
    assert mesh.num_edges == expected_edge_count(n)
    ne, faces = brute_force_counts(mesh)
    assert mesh.num_edges == ne
    assert euler_characteristic(mesh) == 1
    assert set(faces.values()) <= {1, 2}


def test_volumes_positive_and_sum_to_one():
    mesh = generate_cube_mesh(3)
    vols = tet_volumes(mesh.nodes, mesh.tets)
    assert np.all(vols > 0)
    assert vols.sum() == pytest.approx(1.0, abs=1e-14)
    assert vols.min() == pytest.approx(vols.max())  # Kuhn tets are congruent


def test_quasi_uniformity():
    mesh = generate_cube_mesh(4)
    lens = np.linalg.norm(mesh.nodes[mesh.edges[:, 1]] - mesh.nodes[mesh.edges[:, 0]], axis=1)
    assert lens.max() / lens.min() == pytest.approx(np.sqrt(3.0))
    assert mesh.h == pytest.approx(np.sqrt(3.0) / 4)


def test_edge_orientation_and_incidence():
    mesh = generate_cube_mesh(2)
    assert np.all(mesh.edges[:, 0] < mesh.edges[:, 1])
    # edge rows sorted lexicographically
    codes = mesh.edges[:, 0] * mesh.num_nodes + mesh.edges[:, 1]
    assert np.all(np.diff(codes) > 0)
    # signed local edges reproduce the global pairs
    for t in range(mesh.num_tets):
        for le, (a, b) in enumerate(LOCAL_EDGES):
            e = mesh.tet_edges[t, le]
            s = mesh.tet_edge_signs[t, le]
            pair = (mesh.tets[t, a], mesh.tets[t, b])
            if s < 0:
                pair = pair[::-1]
            assert tuple(mesh.edges[e]) == pair


def test_boundary_markers():
    mesh = generate_cube_mesh(2)
    on_bnd = np.any((mesh.nodes == 0.0) | (mesh.nodes == 1.0), axis=1)
    assert np.array_equal(mesh.boundary_nodes, on_bnd)
    # brute force: boundary edges are the edges of faces seen exactly once
    _, faces = brute_force_counts(mesh)
    bedges = set()
    for key, cnt in faces.items():
        if cnt == 1:
            i, j, k = key
            bedges |= {(i, j), (i, k), (j, k)}
    marked = {tuple(e) for e in mesh.edges[mesh.boundary_edges]}
    assert marked == bedges
    assert len(bedges) == 72  # 6 faces * 16 edges - 12 cube edges counted twice
    assert (~mesh.boundary_edges).sum() == 26


def test_region_tags_subbox():
    mesh = generate_cube_mesh(2, d_box=(0, 0, 0, 0.5, 0.5, 0.5))
    inside = np.all(mesh.barycenters() < 0.5, axis=1)
    assert np.array_equal(mesh.region_tags == 1, inside)
    assert mesh.region_tags.sum() == 6


def test_region_tags_thin_slab():
    # the slab misses every barycenter but still cuts through 24 tets
    mesh = generate_cube_mesh(2, d_box=(0.4, 0.0, 0.0, 0.45, 1.0, 1.0))
    assert mesh.region_tags.sum() == 24
    assert np.all(mesh.barycenters()[mesh.region_tags == 1][:, 0] < 0.5)


def test_region_tags_face_touch_excluded():
    # box sharing only the plane x = 0.5 with the left cells
    mesh = generate_cube_mesh(2, d_box=(0.5, 0.0, 0.0, 1.0, 1.0, 1.0))
    tagged = mesh.region_tags == 1
    assert tagged.sum() == 24
    assert np.all(mesh.barycenters()[tagged][:, 0] > 0.5)


def test_region_tags_random_boxes_match_sampling():
    # oracle: dense rejection sampling inside each tet
    rng = np.random.default_rng(7)
    mesh = generate_cube_mesh(2)
    pts = rng.random((4000, 3))
    bary = mesh.nodes[mesh.tets]
    for _ in range(10):
        lo = rng.random(3) * 0.7
        hi = lo + 0.05 + rng.random(3) * 0.3
        tagged = generate_cube_mesh(2, d_box=np.concatenate([lo, hi])).region_tags
        inbox = np.all((pts > lo) & (pts < hi), axis=1)
        for t in range(mesh.num_tets):
            # barycentric coordinates of the sample points
            mat = np.column_stack([bary[t, 1] - bary[t, 0], bary[t, 2] - bary[t, 0], bary[t, 3] - bary[t, 0]])
            lam = np.linalg.solve(mat, (pts - bary[t, 0]).T).T
            strict = np.all(lam > 1e-9, axis=1) & (lam.sum(axis=1) < 1 - 1e-9)
            if np.any(strict & inbox):
                assert tagged[t] == 1, f"tet {t} should be tagged"


def test_save_load_round_trip(tmp_path):
    mesh = generate_cube_mesh(2, d_box=(0, 0, 0, 0.5, 0.5, 0.5))
    path = tmp_path / "cube.mesh"
    save_mesh(mesh, path)
    back = load_mesh(path)
    assert np.array_equal(back.nodes, mesh.nodes)
    assert np.array_equal(back.tets, mesh.tets)
    assert np.array_equal(back.edges, mesh.edges)
    assert np.array_equal(back.tet_edges, mesh.tet_edges)
    assert np.array_equal(back.tet_edge_signs, mesh.tet_edge_signs)
    assert np.array_equal(back.region_tags, mesh.region_tags)
    assert np.array_equal(back.boundary_edges, mesh.boundary_edges)
    assert back.h == mesh.h
    # byte-identical second save
    save_mesh(back, tmp_path / "cube2.mesh")
    assert (tmp_path / "cube.mesh").read_bytes() == (tmp_path / "cube2.mesh").read_bytes()


def test_load_rejects_negative_volume(tmp_path):
    mesh = generate_cube_mesh(1)
    tets = mesh.tets.copy()
    tets[0, [0, 1]] = tets[0, [1, 0]]
    path = tmp_path / "bad.mesh"
    lines = [f"nodes {mesh.num_nodes}"]
    lines += [f"{float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in mesh.nodes]
    lines.append(f"tets {mesh.num_tets}")
    lines += [f"{i} {j} {k} {l} 0" for i, j, k, l in tets]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(MeshError, match="volume, tet 0"):
        load_mesh(path)


def test_load_rejects_dangling_index(tmp_path):
    path = tmp_path / "bad.mesh"
    path.write_text(
        "nodes 4\n0.0 0.0 0.0\n1.0 0.0 0.0\n0.0 1.0 0.0\n0.0 0.0 1.0\n"
        "tets 1\n0 1 2 9 0\n"
    )
    with pytest.raises(MeshError, match="out of range"):
        load_mesh(path)


def test_load_rejects_truncated_file(tmp_path):
    path = tmp_path / "bad.mesh"
    path.write_text("nodes 2\n0.0 0.0 0.0\n")
    with pytest.raises(MeshError):
        load_mesh(path)


def test_validate_catches_tampered_incidence():
    mesh = generate_cube_mesh(1)
    mesh.tet_edge_signs = mesh.tet_edge_signs.copy()
    mesh.tet_edge_signs[0, 0] *= -1
    with pytest.raises(MeshError, match="inconsistent"):
        validate_mesh(mesh)
