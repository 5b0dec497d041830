"""Geographic (rho, theta, phi) parameterisation and regular-grid remeshing."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .flatten import rasterize_triangles
from .mesh import TriangleMesh
from .nose import fit_sphere

SQRT2 = np.sqrt(2.0)


class RemeshError(ValueError):
    pass


class FoldOverWarning(RuntimeWarning):
    pass


def spherical_parameterize(points) -> np.ndarray:
    """(rho, theta, phi) with rho = sqrt(2x^2 + y^2 + z^2).

    Accepts one point or an (n, 3) array. phi is atan2(sqrt(2) x, z) and is
    set to 0 at the poles, where cos(theta) = 0.
    """
    p = np.asarray(points, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    x, y, z = p.T
    rho = np.sqrt(2 * x * x + y * y + z * z)
    if np.any(rho == 0):
        raise ValueError("the origin has no spherical coordinates")
    theta = np.arcsin(np.clip(y / rho, -1.0, 1.0))
    pole = (x == 0) & (z == 0)
    phi = np.where(pole, 0.0, np.arctan2(SQRT2 * x, z))
    # keep phi in (-pi, pi]
    phi = np.where(phi == -np.pi, np.pi, phi)
    out = np.column_stack([rho, theta, phi])
    return out[0] if single else out


def inverse_parameterize(rho, theta=None, phi=None) -> np.ndarray:
    """Cartesian point(s) from (rho, theta, phi); accepts three arrays or one (n, 3) array."""
    if theta is None:
        a = np.asarray(rho, dtype=float)
        rho, theta, phi = a[..., 0], a[..., 1], a[..., 2]
    rho, theta, phi = (np.asarray(v, dtype=float) for v in (rho, theta, phi))
    c = rho * np.cos(theta)
    return np.stack([c * np.sin(phi) / SQRT2, rho * np.sin(theta), c * np.cos(phi)], axis=-1)


def parameterization_center(mesh: TriangleMesh) -> np.ndarray:
    """Centre of the sphere best fitting the vertices in the (sqrt(2) x, y, z) metric."""
    v = mesh.vertices * np.array([SQRT2, 1.0, 1.0])
    c = fit_sphere(v).center
    return c / np.array([SQRT2, 1.0, 1.0])


@dataclass(frozen=True, eq=False)
class RemeshResult:
    mesh: TriangleMesh
    center: np.ndarray
    oval: tuple
    step: float
    folds: int
    node_rc: np.ndarray  # (n, 2) grid (row, col) of each output vertex


def default_oval(mesh: TriangleMesh, center) -> tuple:
    """95th-percentile |theta| and |phi| of the vertices, shrunk by 5%."""
    sph = spherical_parameterize(mesh.vertices - center)
    return (0.95 * float(np.percentile(np.abs(sph[:, 1]), 95)),
            0.95 * float(np.percentile(np.abs(sph[:, 2]), 95)))


def _prune_cells(cells: np.ndarray) -> np.ndarray:
    """Drop cells until no grid node is shared by two diagonal-only cells; keep the largest piece."""
    cells = cells.copy()
    while True:
        a = cells[:-1, :-1]
        b = cells[:-1, 1:]
        c = cells[1:, :-1]
        d = cells[1:, 1:]
        bow1 = a & d & ~b & ~c
        bow2 = b & c & ~a & ~d
        if not (bow1.any() or bow2.any()):
            break
        # remove the lower-left cell of each pinch (deterministic)
        r, k = np.nonzero(bow1)
        cells[r, k] = False
        r, k = np.nonzero(bow2)
        cells[r + 1, k] = False
    lab, n = ndimage.label(cells)
    if n > 1:
        sizes = np.bincount(lab.ravel())[1:]
        cells = lab == 1 + int(np.argmax(sizes))
    # a cell touching the rest only at a corner after component selection is impossible
    return cells


def remesh_spherical(mesh: TriangleMesh, trim=None, step: float = 0.005, center=None) -> RemeshResult:
    """Resample a face shell on a uniform (theta, phi) grid inside an oval.

    `trim` is the oval half-axes (a, b) for (theta, phi) in radians; None
    picks them from the data. Grid nodes covered by several parameter-plane
    triangles keep the largest rho; such nodes are counted as folds.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    c = parameterization_center(mesh) if center is None else np.asarray(center, dtype=float)
    a, b = default_oval(mesh, c) if trim is None else (float(trim[0]), float(trim[1]))
    if not (a > 0 and b > 0):
        raise RemeshError("oval half-axes must be positive")
    sph = spherical_parameterize(mesh.vertices - c)
    # parameter plane: horizontal phi, vertical theta
    uv = sph[:, [2, 1]]
    lo_c = int(np.floor(-b / step))
    lo_r = int(np.floor(-a / step))
    W = 2 * (-lo_c) + 1
    H = 2 * (-lo_r) + 1
    origin = np.array([lo_c * step, lo_r * step])
    tmap, bmap, folds = rasterize_triangles(uv, mesh.triangles, sph[:, 0], origin, step, (H, W))
    rr, cc = np.mgrid[0:H, 0:W]
    th = origin[1] + rr * step
    ph = origin[0] + cc * step
    inside = (th / a) ** 2 + (ph / b) ** 2 <= 1.0
    have = inside & (tmap >= 0)
    if not have.any():
        raise RemeshError("trim region contains no surface")
    if folds:
        warnings.warn(f"parameterisation fold-over at {folds} grid nodes; kept outermost layer",
                      FoldOverWarning, stacklevel=2)
    cells = _prune_cells(have[:-1, :-1] & have[1:, :-1] & have[:-1, 1:] & have[1:, 1:])
    used = np.zeros_like(have)
    used[:-1, :-1] |= cells
    used[1:, :-1] |= cells
    used[:-1, 1:] |= cells
    used[1:, 1:] |= cells
    ids = np.full((H, W), -1, dtype=np.int64)
    ids[used] = np.arange(used.sum())
    tv = mesh.triangles[tmap[used]]
    bv = bmap[used]
    rho = np.einsum("ij,ij->i", bv, sph[tv, 0])
    verts = inverse_parameterize(rho, th[used], ph[used]) + c
    colors = None
    if mesh.colors is not None:
        colors = np.einsum("ij,ijc->ic", bv, mesh.colors[tv])
    r, k = np.nonzero(cells)
    i00, i01, i10, i11 = ids[r, k], ids[r, k + 1], ids[r + 1, k], ids[r + 1, k + 1]
    tris = np.concatenate([np.stack([i00, i01, i11], 1), np.stack([i00, i11, i10], 1)])
    out = TriangleMesh(verts, tris, colors)
    return RemeshResult(out, c, (a, b), float(step), int(folds), np.argwhere(used))


def boundary_loops(mesh: TriangleMesh) -> int:
    """Number of closed boundary loops (edges used by exactly one triangle)."""
    e = mesh.boundary_edges()
    if len(e) == 0:
        return 0
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    n = mesh.n_vertices
    g = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    ncomp, lab = connected_components(g, directed=False)
    return len(np.unique(lab[np.unique(e)]))


def is_manifold(mesh: TriangleMesh) -> bool:
    """Every edge has at most two triangles and every vertex fan is a single strip."""
    t = mesh.triangles
    e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    _, cnt = np.unique(e, axis=0, return_counts=True)
    if cnt.max(initial=0) > 2:
        return False
    # vertex fans: triangles around a vertex connected through shared edges form one component
    bd = mesh.boundary_edges()
    nb = np.bincount(bd.ravel(), minlength=mesh.n_vertices)
    return bool(np.all(nb <= 2))


def valences(mesh: TriangleMesh) -> np.ndarray:
    t = mesh.triangles
    e = np.unique(np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1), axis=0)
    return np.bincount(e.ravel(), minlength=mesh.n_vertices)
