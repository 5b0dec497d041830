"""Nose tip detection by local sphere fitting and coarse pose normalisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .mesh import RigidTransform, TriangleMesh, radius_search


class DegenerateFitError(ValueError):
    """Points do not determine a sphere (coplanar, collinear or too few)."""


class DetectionError(RuntimeError):
    """A landmark or pose could not be determined from the data."""


@dataclass(frozen=True)
class SphereFit:
    center: np.ndarray
    radius: float
    residual: float


def fit_sphere(points) -> SphereFit:
    """Algebraic least-squares sphere through `points` (M, 3).

    Minimises E = sum_k (|p_k|^2 - B_k . W)^2 over W = (2a, 2b, 2c, r^2 - |O|^2)
    via the normal equations W = (B B^T)^-1 B A. The reported residual is
    sqrt(E) / M. Points are shifted to their centroid first; the algebraic
    residual is translation invariant so this only improves conditioning.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    M = len(p)
    if M < 4:
        raise DegenerateFitError(f"need at least 4 points, got {M}")
    shift = p.mean(axis=0)
    q = p - shift
    sv = np.linalg.svd(q, compute_uv=False)
    if sv[0] == 0 or sv[-1] / sv[0] < 1e-10:
        raise DegenerateFitError("points are coplanar or collinear")
    A = np.einsum("ij,ij->i", q, q)
    B = np.vstack([q.T, np.ones(M)])
    W = np.linalg.solve(B @ B.T, B @ A)
    radicand = W[3] + (W[0] ** 2 + W[1] ** 2 + W[2] ** 2) / 4.0
    if not radicand > 0:
        raise DegenerateFitError("negative radicand in radius recovery")
    r = float(np.sqrt(radicand))
    O = W[:3] / 2.0
    eps = np.einsum("ij,ij->i", q - O, q - O) - r * r
    e = float(np.sqrt(np.dot(eps, eps)) / M)
    return SphereFit(O + shift, r, e)


@dataclass(frozen=True)
class RidField:
    """Per-vertex nose-tip statistic f = e (r0 + |r - r0|) and its sphere fits.

    Vertices without a usable fit carry f = inf and NaN fit parameters.
    """

    f: np.ndarray
    centers: np.ndarray
    radii: np.ndarray
    residuals: np.ndarray
    convex: np.ndarray
    r0: float
    R: float


def rid_value(e, r, r0: float):
    """Nose-tip statistic f = e (r0 + |r - r0|) for residual e and fitted radius r."""
    return np.asarray(e) * (r0 + np.abs(np.asarray(r) - r0))


@njit(cache=True)
def _cell_list(v, h):
    lo = np.empty(3)
    dims = np.empty(3, dtype=np.int64)
    for d in range(3):
        lo[d] = v[:, d].min()
        dims[d] = int((v[:, d].max() - lo[d]) / h) + 1
    n = v.shape[0]
    key = np.empty(n, dtype=np.int64)
    for i in range(n):
        cx = int((v[i, 0] - lo[0]) / h)
        cy = int((v[i, 1] - lo[1]) / h)
        cz = int((v[i, 2] - lo[2]) / h)
        key[i] = (cx * dims[1] + cy) * dims[2] + cz
    order = np.argsort(key, kind="mergesort")
    start = np.full(dims[0] * dims[1] * dims[2] + 1, 0, dtype=np.int64)
    for i in range(n):
        start[key[i] + 1] += 1
    for c in range(1, start.shape[0]):
        start[c] += start[c - 1]
    return lo, dims, order, start


@njit(cache=True)
def _moments(v, R, h, lo, dims, order, start, O, r2, residual_pass):
    """Per-vertex neighbourhood sums in coordinates local to the vertex.

    First pass (residual_pass False) returns B B^T (n, 4, 4) and B A (n, 4);
    second pass returns E = sum eps^2 for the given centres O and squared radii r2.
    """
    n = v.shape[0]
    R2 = R * R
    BB = np.zeros((n, 4, 4))
    BA = np.zeros((n, 4))
    E = np.zeros(n)
    for i in range(n):
        cx = int((v[i, 0] - lo[0]) / h)
        cy = int((v[i, 1] - lo[1]) / h)
        cz = int((v[i, 2] - lo[2]) / h)
        for ax in range(max(cx - 1, 0), min(cx + 2, dims[0])):
            for ay in range(max(cy - 1, 0), min(cy + 2, dims[1])):
                for az in range(max(cz - 1, 0), min(cz + 2, dims[2])):
                    c = (ax * dims[1] + ay) * dims[2] + az
                    for t in range(start[c], start[c + 1]):
                        j = order[t]
                        x = v[j, 0] - v[i, 0]
                        y = v[j, 1] - v[i, 1]
                        z = v[j, 2] - v[i, 2]
                        d2 = x * x + y * y + z * z
                        if d2 > R2:
                            continue
                        if residual_pass:
                            ex = x - O[i, 0]
                            ey = y - O[i, 1]
                            ez = z - O[i, 2]
                            eps = ex * ex + ey * ey + ez * ez - r2[i]
                            E[i] += eps * eps
                        else:
                            b0, b1, b2 = x, y, z
                            BB[i, 0, 0] += b0 * b0
                            BB[i, 0, 1] += b0 * b1
                            BB[i, 0, 2] += b0 * b2
                            BB[i, 0, 3] += b0
                            BB[i, 1, 1] += b1 * b1
                            BB[i, 1, 2] += b1 * b2
                            BB[i, 1, 3] += b1
                            BB[i, 2, 2] += b2 * b2
                            BB[i, 2, 3] += b2
                            BB[i, 3, 3] += 1.0
                            BA[i, 0] += b0 * d2
                            BA[i, 1] += b1 * d2
                            BA[i, 2] += b2 * d2
                            BA[i, 3] += d2
        for a in range(4):
            for b in range(a):
                BB[i, a, b] = BB[i, b, a]
    return BB, BA, E


def rid_statistic(mesh: TriangleMesh, R: float | None = None, r0: float = 12.0) -> RidField:
    """Fit a sphere to every vertex's radius-R neighbourhood and score it.

    Fits are solved in batch from neighbourhood moments expressed in
    coordinates local to each vertex; residuals are then summed directly.
    """
    if R is None:
        R = r0 + 2.0
    if not R > r0:
        raise ValueError("neighbourhood radius R must exceed r0")
    v = np.ascontiguousarray(mesh.vertices, dtype=float)
    n = len(v)
    if n == 0:
        raise ValueError("empty mesh")
    normals = mesh.vertex_normals
    # cells no smaller than R keep the 27-cell stencil exact; grow them for huge extents
    h = max(float(R), float(np.prod(np.ptp(v, axis=0) + R)) ** (1 / 3) / 200.0)
    lo, dims, order, start = _cell_list(v, h)
    dummy = np.zeros((n, 3))
    BB, BA, _ = _moments(v, float(R), h, lo, dims, order, start, dummy, np.zeros(n), False)
    cnt = BB[:, 3, 3]
    safe = np.maximum(cnt, 1.0)
    mean = BB[:, :3, 3] / safe[:, None]
    cov = BB[:, :3, :3] / safe[:, None, None] - mean[:, :, None] * mean[:, None, :]
    ev = np.linalg.eigvalsh(cov)
    ok = (cnt >= 4) & (ev[:, 2] > 0) & (ev[:, 0] > 1e-10 * ev[:, 2])
    W = np.full((n, 4), np.nan)
    if ok.any():
        W[ok] = np.linalg.solve(BB[ok], BA[ok][..., None])[..., 0]
    rad2 = W[:, 3] + (W[:, :3] ** 2).sum(1) / 4.0
    ok &= rad2 > 0
    r = np.sqrt(np.where(ok, rad2, np.nan))
    O = W[:, :3] / 2.0
    _, _, E = _moments(v, float(R), h, lo, dims, order, start,
                       np.where(ok[:, None], O, 0.0), np.where(ok, rad2, 0.0), True)
    e = np.sqrt(E) / safe
    resid = np.where(ok, e, np.nan)
    centers = np.where(ok[:, None], O + v, np.nan)
    f = np.where(ok, rid_value(e, r, r0), np.inf)
    convex = ok & (np.einsum("ij,ij->i", np.where(ok[:, None], O, 0.0), normals) < 0)
    return RidField(f, centers, r, resid, convex, float(r0), float(R))


def locate_nose_tip(field: RidField) -> int:
    """Convex vertex with the globally smallest finite f (lowest index on ties)."""
    f = np.where(field.convex & np.isfinite(field.f), field.f, np.inf)
    if not np.isfinite(f).any():
        raise DetectionError("no convex vertex with a finite nose-tip statistic")
    return int(np.argmin(f))


def pose_normalize(mesh: TriangleMesh, nose_tip: int, region: float = 50.0):
    """Hotelling transform of the vertices within `region` mm of the nose tip.

    Largest principal axis becomes y, the second x and the smallest z. Axis
    signs are fixed so +z and +y agree with the input's +z and +y; x = y cross z.
    The nose tip becomes the origin. Returns (normalised mesh, transform).
    """
    tip = mesh.vertices[nose_tip]
    idx = radius_search(mesh, tip, region)
    if len(idx) < 4:
        raise DetectionError(f"only {len(idx)} vertices within {region} mm of the nose tip")
    pts = mesh.vertices[idx]
    C = np.cov(pts.T, bias=True)
    w, V = np.linalg.eigh(C)
    ez, ex, ey = V[:, 0], V[:, 1], V[:, 2]
    if ez[2] < 0:
        ez = -ez
    if ey[1] < 0:
        ey = -ey
    ex = np.cross(ey, ez)
    Rm = np.vstack([ex, ey, ez])
    T = RigidTransform(Rm, -Rm @ tip)
    return mesh.transformed(T), T


def calibrate_r0(meshes, tips, R: float = 14.0) -> float:
    """Median fitted radius at known nose tips (points in mm, one per mesh)."""
    radii = []
    for mesh, tip in zip(meshes, tips):
        idx = radius_search(mesh, np.asarray(tip, dtype=float), R)
        try:
            radii.append(fit_sphere(mesh.vertices[idx]).radius)
        except DegenerateFitError:
            continue
    if not radii:
        raise DetectionError("no usable nose tip neighbourhoods for calibration")
    return float(np.median(radii))
