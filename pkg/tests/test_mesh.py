import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphreg.mesh import (LANDMARK_NAMES, LandmarkSet, MeshError, RigidTransform, TriangleMesh,
                           closest_point_brute_force, closest_point_on_surface, load_landmarks, load_mesh,
                           radius_search, rotation_matrix, sample_colors, save_landmarks, save_mesh)
from morphreg.synthetic import FaceParams, generate_face


def _segment_closest(p, a, b):
    ab = b - a
    t = np.clip(np.einsum("...i,...i", p - a, ab) / np.maximum(np.einsum("...i,...i", ab, ab), 1e-300), 0, 1)
    return a + t[..., None] * ab


def oracle_closest(mesh, q):
    """Independent exhaustive oracle: plane projection when inside, else the best edge point."""
    v, t = mesh.vertices, mesh.triangles
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    proj = q - np.einsum("ij,ij->i", q - a, n)[:, None] * n
    inside = np.ones(len(t), bool)
    for u, w in ((a, b), (b, c), (c, a)):
        inside &= np.einsum("ij,ij->i", np.cross(w - u, proj - u), n) >= 0
    cands = [np.where(inside[:, None], proj, np.inf)]
    for u, w in ((a, b), (b, c), (c, a)):
        cands.append(_segment_closest(q, u, w))
    d = np.stack([np.linalg.norm(x - q, axis=1) for x in cands])
    d[np.isnan(d)] = np.inf
    return float(d.min())


@pytest.fixture(scope="module")
def small_mesh():
    return generate_face(FaceParams(seed=3, spacing=2.0, ears=False))[0]


def test_minimal_obj(tmp_path):
    p = tmp_path / "tri.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    m = load_mesh(p)
    assert m.n_vertices == 3 and len(m.triangles) == 1
    assert m.colors is None


def test_obj_out_of_range_index_names_element(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 99\n")
    with pytest.raises(MeshError, match="99"):
        load_mesh(p)


def test_ply_colors_roundtrip(tmp_path):
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], [[255, 0, 0], [0, 255, 0], [0, 0, 255]])
    for binary in (True, False):
        p = tmp_path / f"c{binary}.ply"
        save_mesh(m, p, binary=binary)
        back = load_mesh(p)
        assert back.colors is not None and len(back.colors) == back.n_vertices
        assert np.array_equal(back.colors, m.colors)


def test_fractional_colors_survive(tmp_path):
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], [[127.5] * 3, [0.25] * 3, [1.0] * 3])
    save_mesh(m, tmp_path / "f.ply")
    assert np.array_equal(load_mesh(tmp_path / "f.ply").colors, m.colors)


def test_synthetic_roundtrip(tmp_path, small_mesh):
    for ext in ("ply", "obj"):
        p = tmp_path / f"face.{ext}"
        save_mesh(small_mesh, p)
        back = load_mesh(p)
        assert np.abs(back.vertices - small_mesh.vertices).max() < 1e-6
        assert np.array_equal(back.triangles, small_mesh.triangles)
        assert np.abs(back.colors - small_mesh.colors).max() < 1e-9


def test_roundtrip_idempotent(tmp_path, small_mesh):
    save_mesh(small_mesh, tmp_path / "a.ply")
    save_mesh(load_mesh(tmp_path / "a.ply"), tmp_path / "b.ply")
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


def test_empty_mesh_refused(tmp_path):
    with pytest.raises(MeshError):
        save_mesh(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), int)), tmp_path / "e.ply")


def test_unwritable_path(tmp_path, small_mesh):
    with pytest.raises(MeshError):
        save_mesh(small_mesh, tmp_path / "missing_dir" / "x.ply")


def test_mesh_invariants():
    with pytest.raises(MeshError):
        TriangleMesh([[0, 0, 0], [1, 0, 0]], [[0, 1, 2]])
    with pytest.raises(MeshError):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 1]])
    with pytest.raises(MeshError):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], [[0, 0, 0]])
    with pytest.raises(MeshError):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], [[0, 0, 300]] * 3)


def test_radius_search_examples():
    line = TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], np.zeros((0, 3), int))
    assert radius_search(line, [0, 0, 0], 1.5).tolist() == [0, 1]
    assert radius_search(line, [1, 0, 0], 1e-12).tolist() == [1]
    assert radius_search(line, [0, 0, 0], 100.0).tolist() == [0, 1, 2]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 30.0))
def test_radius_search_equals_brute_force(seed, R):
    r = np.random.default_rng(seed)
    v = r.normal(0, 10, (300, 3))
    m = TriangleMesh(v, np.zeros((0, 3), int))
    c = r.normal(0, 10, 3)
    expect = np.flatnonzero(np.linalg.norm(v - c, axis=1) <= R)
    assert radius_search(m, c, R).tolist() == expect.tolist()


def test_closest_point_examples():
    m = TriangleMesh([[0, 0, 0], [3, 0, 0], [0, 3, 0]], [[0, 1, 2]])
    p, t, d = closest_point_on_surface(m, [3, 0, 0])
    assert t == 0 and d == 0 and np.allclose(p, [3, 0, 0])
    p, t, d = closest_point_on_surface(m, [1, 1, 5])
    assert np.allclose(p, [1, 1, 0], atol=1e-12) and abs(d - 5) < 1e-12


def test_closest_point_matches_exhaustive_oracle(small_mesh):
    r = np.random.default_rng(7)
    lo, hi = small_mesh.vertices.min(0), small_mesh.vertices.max(0)
    Q = r.uniform(lo - 10, hi + 10, (10000, 3))
    pts, tri, dist = closest_point_on_surface(small_mesh, Q)
    # returned point lies on the named triangle
    corners = small_mesh.vertices[small_mesh.triangles[tri]]
    idx = small_mesh.surface_index
    _, _, bary, _ = idx.query(Q)
    assert np.all(bary >= -1e-12) and np.allclose(bary.sum(1), 1.0)
    assert np.abs(np.einsum("nk,nkc->nc", bary, corners) - pts).max() < 1e-9
    sub = r.choice(len(Q), 400, replace=False)
    for k in sub:
        assert abs(dist[k] - oracle_closest(small_mesh, Q[k])) < 1e-9
    for k in sub[:50]:
        assert abs(closest_point_brute_force(small_mesh, Q[k])[2] - dist[k]) < 1e-9
    # never farther than the nearest vertex
    dv, _ = small_mesh.kdtree.query(Q)
    assert np.all(dist <= dv + 1e-9)


def test_closest_point_empty_mesh():
    with pytest.raises(MeshError):
        closest_point_on_surface(TriangleMesh([[0, 0, 0]], np.zeros((0, 3), int)), [0, 0, 0])


def test_rigid_transform_invariants():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    R = rotation_matrix(20, -10, 5)
    T = RigidTransform(R, [1, 2, 3])
    p = np.random.default_rng(0).normal(size=(5, 3))
    assert np.allclose(T.inverse().apply(T.apply(p)), p, atol=1e-12)
    assert np.allclose(T.compose(T.inverse()).apply(p), p, atol=1e-12)
    assert RigidTransform.from_dict(json.loads(json.dumps(T.to_dict()))).apply(p) == pytest.approx(T.apply(p))


def test_landmark_set(tmp_path):
    with pytest.raises(KeyError):
        LandmarkSet({"Chin": [0, 0, 0]})
    with pytest.raises(ValueError):
        LandmarkSet({"Nose Tip": [0, np.nan, 0]})
    full = LandmarkSet({n: [i, 0, 0] for i, n in enumerate(LANDMARK_NAMES)})
    assert full.complete and list(full) == list(LANDMARK_NAMES)
    part = LandmarkSet({"Pogonion": [1, 2, 3], "Nose Tip": [0, 0, 1]}, {"Pogonion": False}, ["Nasion"])
    assert list(part) == ["Nose Tip", "Pogonion"] and not part.complete
    save_landmarks(part, tmp_path / "l.json")
    d = json.loads((tmp_path / "l.json").read_text())
    assert d["units"] == "mm" and d["landmarks"]["Nose Tip"] == [0.0, 0.0, 1.0]
    back = load_landmarks(tmp_path / "l.json")
    assert back.confidence == {"Pogonion": False} and back.failures == ["Nasion"]
    assert np.array_equal(back.array(), part.array())


def test_sample_colors_barycentric():
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], [[0, 0, 0], [255, 255, 255], [0, 0, 0]])
    c = sample_colors(m, np.array([0]), np.array([[0.5, 0.5, 0.0]]))
    assert np.allclose(c, 127.5)
