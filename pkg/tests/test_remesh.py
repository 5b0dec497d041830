import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphreg.mesh import TriangleMesh, closest_point_on_surface
from morphreg.remesh import (FoldOverWarning, RemeshError, boundary_loops, inverse_parameterize, is_manifold,
                             remesh_spherical, spherical_parameterize, valences)

R2 = np.sqrt(2.0)


def test_parameterize_examples():
    assert np.allclose(spherical_parameterize([0, 0, 5]), [5, 0, 0], atol=1e-15)
    assert np.allclose(spherical_parameterize([3, 0, 0]), [3 * R2, 0, np.pi / 2], atol=1e-15)
    assert np.allclose(spherical_parameterize([0, 4, 0]), [4, np.pi / 2, 0], atol=1e-15)
    assert np.allclose(spherical_parameterize([0, 0, -2])[2], np.pi)
    with pytest.raises(ValueError):
        spherical_parameterize([0, 0, 0])


def test_inverse_examples():
    assert np.allclose(inverse_parameterize(5.0, 0.0, 0.0), [0, 0, 5], atol=1e-15)
    assert np.allclose(inverse_parameterize(3 * R2, 0.0, np.pi / 2), [3, 0, 0], atol=1e-14)


def test_roundtrip_random_points(rng):
    p = rng.normal(0, 10, (10000, 3))
    p = p[np.hypot(p[:, 0], p[:, 2]) > 1e-3]
    back = inverse_parameterize(spherical_parameterize(p))
    assert np.abs(back - p).max() < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-3.1, 3.1), st.floats(0.1, 200.0))
def test_inverse_then_forward(theta, phi, rho):
    sph = spherical_parameterize(inverse_parameterize(rho, theta, phi))
    assert np.allclose(sph, [rho, theta, phi], rtol=1e-12, atol=1e-10)


def sheet(rho_fn, lo=-0.6, hi=0.6, step=0.005, colors=True):
    """Mesh whose vertices sit exactly on (theta, phi) grid nodes, with rho = rho_fn(theta, phi)."""
    k = np.arange(int(round(lo / step)), int(round(hi / step)) + 1)
    th, ph = np.meshgrid(k * step, k * step, indexing="ij")
    v = inverse_parameterize(rho_fn(th, ph), th, ph).reshape(-1, 3)
    n = len(k)
    ids = np.arange(n * n).reshape(n, n)
    a, b, c, d = ids[:-1, :-1], ids[:-1, 1:], ids[1:, :-1], ids[1:, 1:]
    t = np.concatenate([np.stack([a, b, d], -1).reshape(-1, 3), np.stack([a, d, c], -1).reshape(-1, 3)])
    col = np.column_stack([np.full(n * n, 200.0), 120 + 100 * th.ravel(), 120 + 100 * ph.ravel()]) if colors else None
    return TriangleMesh(v, t, col)


def test_fixed_point_on_grid_sampled_surface():
    m = sheet(lambda th, ph: 90.0 + 4.0 * np.cos(3 * th) * np.sin(2 * ph))
    r = remesh_spherical(m, trim=(0.5, 0.5), step=0.005, center=np.zeros(3))
    d, _ = m.kdtree.query(r.mesh.vertices)
    assert d.max() < 1e-6
    # colors interpolate exactly at the coincident nodes too
    _, idx = m.kdtree.query(r.mesh.vertices)
    assert np.abs(r.mesh.colors - m.colors[idx]).max() < 1e-6


@pytest.mark.parametrize("half", [0.25, 0.5])
def test_node_count_matches_oval_area(half):
    m = sheet(lambda th, ph: np.full_like(th, 80.0), colors=False)
    r = remesh_spherical(m, trim=(half, half), step=0.005, center=np.zeros(3))
    expect = np.pi * (half / 0.005) ** 2
    # half = 0.25 is the 7854-node case; the staircase boundary costs about one perimeter of nodes
    assert abs(r.mesh.n_vertices - expect) < 2 * np.pi * half / 0.005 + 10


def test_fold_over_keeps_outer_layer():
    inner = sheet(lambda th, ph: np.full_like(th, 80.0), colors=False)
    outer = sheet(lambda th, ph: np.full_like(th, 90.0), lo=-0.1, hi=0.1, colors=False)
    both = TriangleMesh(np.vstack([inner.vertices, outer.vertices]),
                        np.vstack([inner.triangles, outer.triangles + inner.n_vertices]))
    with pytest.warns(FoldOverWarning):
        r = remesh_spherical(both, trim=(0.3, 0.3), step=0.005, center=np.zeros(3))
    rho = spherical_parameterize(r.mesh.vertices)[:, 0]
    th, ph = spherical_parameterize(r.mesh.vertices)[:, 1:].T
    core = (np.abs(th) < 0.095) & (np.abs(ph) < 0.095)
    assert r.folds > 0
    assert np.allclose(rho[core], 90.0) and np.allclose(rho[~core & (np.abs(th) > 0.11)], 80.0)


def test_empty_trim_region():
    m = sheet(lambda th, ph: np.full_like(th, 80.0), lo=1.0, hi=1.2, colors=False)
    with pytest.raises(RemeshError):
        remesh_spherical(m, trim=(0.2, 0.2), center=np.zeros(3))


def test_synthetic_face_structure(reference_a, train_corpus):
    r, _, cf = reference_a
    out = r.mesh
    assert boundary_loops(out) == 1
    assert is_manifold(out)
    assert out.colors is not None
    # resampled shell stays on the input surface
    _, _, d = closest_point_on_surface(cf.mesh, out.vertices)
    assert d.max() < 0.5
    # and covers it: input vertices well inside the oval are near the output
    sph = spherical_parameterize(cf.mesh.vertices - r.center)
    a, b = r.oval
    inside = (sph[:, 1] / a) ** 2 + (sph[:, 2] / b) ** 2 < 0.9 ** 2
    _, _, d2 = closest_point_on_surface(out, cf.mesh.vertices[inside])
    assert d2.max() < 0.5


def test_synthetic_face_valence_interior(reference_a):
    out = reference_a[0].mesh
    val = valences(out)
    on_boundary = np.zeros(out.n_vertices, bool)
    on_boundary[np.unique(out.boundary_edges())] = True
    assert np.all(val[~on_boundary] == 6)
    # a boundary vertex with k triangles has valence k + 1; concave corners carry up to five
    assert set(np.unique(val[on_boundary])) <= {2, 3, 4, 5, 6}
    assert 5 in set(val[on_boundary])


@pytest.mark.xfail(strict=True, reason="two triangles per cell give valence 5 at concave staircase corners of the oval")
def test_synthetic_face_valence_set(reference_a):
    assert set(np.unique(valences(reference_a[0].mesh))) <= {2, 3, 4, 6}


def test_step_must_be_positive():
    m = sheet(lambda th, ph: np.full_like(th, 80.0), lo=-0.05, hi=0.05, colors=False)
    with pytest.raises(ValueError):
        remesh_spherical(m, step=0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        remesh_spherical(m, trim=(0.04, 0.04), center=np.zeros(3))
