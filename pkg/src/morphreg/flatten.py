"""Orthographic 3D -> 2D flattening onto a square grid of depth and texture maps."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .mesh import TriangleMesh, closest_point_on_surface


def rgb_to_gray(r, g, b):
    """Luma y = 0.30 r + 0.59 g + 0.11 b (not rounded)."""
    return 0.30 * np.asarray(r, dtype=float) + 0.59 * np.asarray(g, dtype=float) + 0.11 * np.asarray(b, dtype=float)


def rgb_to_cr(r, g, b):
    """Full-range YCbCr red-difference chroma, clamped to [0, 255]."""
    cr = 128.0 + 0.5 * np.asarray(r, dtype=float) - 0.418688 * np.asarray(g, dtype=float) - 0.081312 * np.asarray(b, dtype=float)
    return np.clip(cr, 0.0, 255.0)


@dataclass(frozen=True, eq=False)
class Grid2D:
    """Co-registered maps; cell (i, j) sits at (origin[0] + j*spacing, origin[1] + i*spacing).

    `triangle` and `bary` record the mesh triangle hit by each cell's ray
    (-1 when none), so detected cells can be lifted back onto the surface.
    """

    origin: np.ndarray
    spacing: float
    z_map: np.ndarray
    gray_map: np.ndarray
    cr_map: np.ndarray
    valid_mask: np.ndarray
    triangle: np.ndarray | None = None
    bary: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.z_map.shape

    def cell_of(self, x, y):
        """Nearest cell (row, col) to an xy position."""
        j = int(np.rint((x - self.origin[0]) / self.spacing))
        i = int(np.rint((y - self.origin[1]) / self.spacing))
        return i, j

    def xy_of(self, i, j):
        return self.origin[0] + np.asarray(j) * self.spacing, self.origin[1] + np.asarray(i) * self.spacing

    def point_of(self, i, j, mesh: TriangleMesh | None = None) -> np.ndarray:
        """3D point of a cell; exact surface point when the cell's ray hit a triangle."""
        x, y = self.xy_of(i, j)
        if mesh is not None and self.triangle is not None and self.triangle[i, j] >= 0:
            corners = mesh.vertices[mesh.triangles[self.triangle[i, j]]]
            return self.bary[i, j] @ corners
        p = np.array([float(x), float(y), float(self.z_map[i, j])])
        if mesh is not None:
            p = closest_point_on_surface(mesh, p)[0]
        return p


def rasterize_triangles(xy, triangles, depth, origin, spacing, shape):
    """Z-buffer rasterisation of 2D triangles onto grid nodes.

    `xy` (n, 2) vertex positions, `depth` (n,) per-vertex key; each node keeps
    the covering triangle with the largest interpolated depth. Returns
    (triangle index map with -1 for empty nodes, barycentric map (H, W, 3),
    number of nodes covered by more than one triangle at distinct depths).
    """
    xy = np.asarray(xy, dtype=float)
    H, W = shape
    tri = np.asarray(triangles, dtype=np.int64)
    g = (xy - np.asarray(origin, dtype=float)) / spacing
    P = g[tri]  # (m, 3, 2)
    lo = np.ceil(P.min(axis=1) - 1e-9).astype(np.int64)
    hi = np.floor(P.max(axis=1) + 1e-9).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi[:, 0] = np.minimum(hi[:, 0], W - 1)
    hi[:, 1] = np.minimum(hi[:, 1], H - 1)
    nx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    ny = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    cnt = nx * ny
    t_idx = np.repeat(np.arange(len(tri)), cnt)
    k = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    cols = lo[t_idx, 0] + k % nx[t_idx]
    rows = lo[t_idx, 1] + k // nx[t_idx]
    a, b, c = P[t_idx, 0], P[t_idx, 1], P[t_idx, 2]
    v0, v1 = b - a, c - a
    px = np.column_stack([cols, rows]).astype(float) - a
    den = v0[:, 0] * v1[:, 1] - v1[:, 0] * v0[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        l1 = (px[:, 0] * v1[:, 1] - v1[:, 0] * px[:, 1]) / den
        l2 = (v0[:, 0] * px[:, 1] - px[:, 0] * v0[:, 1]) / den
    l0 = 1.0 - l1 - l2
    tol = -1e-10
    inside = (den != 0) & (l0 >= tol) & (l1 >= tol) & (l2 >= tol)
    t_idx, rows, cols = t_idx[inside], rows[inside], cols[inside]
    if len(t_idx) == 0:
        return np.full((H, W), -1, dtype=np.int64), np.zeros((H, W, 3)), 0
    bary = np.clip(np.column_stack([l0[inside], l1[inside], l2[inside]]), 0.0, None)
    bary /= bary.sum(axis=1, keepdims=True)
    dz = np.asarray(depth, dtype=float)[tri[t_idx]]
    zval = np.einsum("ij,ij->i", bary, dz)
    node = rows * W + cols
    order = np.lexsort((-t_idx, zval, node))
    node_s = node[order]
    last = np.concatenate([node_s[1:] != node_s[:-1], [True]])
    first = np.concatenate([[True], node_s[1:] != node_s[:-1]])
    win = order[last]
    # nodes hit at clearly different depths are folds/multilayers
    zmin = zval[order[first]]
    folds = int(np.sum(zval[win] - zmin > 1e-6 * max(1.0, float(np.abs(dz).max(initial=1.0)))))
    tmap = np.full(H * W, -1, dtype=np.int64)
    bmap = np.zeros((H * W, 3))
    tmap[node[win]] = t_idx[win]
    bmap[node[win]] = bary[win]
    return tmap.reshape(H, W), bmap.reshape(H, W, 3), folds


def project_to_grid(mesh: TriangleMesh, spacing: float = 1.0) -> Grid2D:
    """Cast a ray along -z through every grid node and keep the outermost hit."""
    if mesh.n_vertices == 0 or len(mesh.triangles) == 0:
        raise ValueError("cannot project an empty mesh")
    v = mesh.vertices
    used = np.unique(mesh.triangles)
    lo = v[used, :2].min(axis=0)
    hi = v[used, :2].max(axis=0)
    W, H = (np.ceil((hi - lo) / spacing - 1e-9).astype(int) + 1)
    tmap, bmap, _ = rasterize_triangles(v[:, :2], mesh.triangles, v[:, 2], lo, spacing, (H, W))
    valid = tmap >= 0
    z = np.full((H, W), np.nan)
    gray = np.full((H, W), np.nan)
    cr = np.full((H, W), np.nan)
    tv = mesh.triangles[tmap[valid]]
    bv = bmap[valid]
    z[valid] = np.einsum("ij,ij->i", bv, v[tv, 2])
    if mesh.colors is not None:
        rgb = np.einsum("ij,ijc->ic", bv, mesh.colors[tv])
        gray[valid] = rgb_to_gray(*rgb.T)
        cr[valid] = rgb_to_cr(*rgb.T)
    else:
        gray[valid] = 128.0
        cr[valid] = 128.0
    return Grid2D(lo.astype(float), float(spacing), z, gray, cr, valid, tmap, bmap)


def _decision_median(a: np.ndarray, valid: np.ndarray) -> np.ndarray:
    H, W = a.shape
    pad = np.pad(np.where(valid, a, np.nan), 1, constant_values=np.nan)
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3)).reshape(H, W, 9)
    nb = np.delete(win, 4, axis=2)
    full = valid & np.all(np.isfinite(nb), axis=2)
    with np.errstate(invalid="ignore"):
        impulse = full & ((a > nb.max(axis=2)) | (a < nb.min(axis=2)))
    out = a.copy()
    out[impulse] = np.median(win[impulse], axis=1)
    return out


def median_filter_3x3(grid: Grid2D) -> Grid2D:
    """Decision-based 3x3 median on the depth and gray maps.

    A cell is only replaced when it is a strict extremum of its complete,
    valid 8-neighbourhood; everything else passes through untouched.
    """
    return replace(grid,
                   z_map=_decision_median(grid.z_map, grid.valid_mask),
                   gray_map=_decision_median(grid.gray_map, grid.valid_mask))


def _bicubic_terms(u, v):
    return np.stack([u ** i * v ** j for i in range(4) for j in range(4)], axis=1)


def fill_holes_bicubic(grid: Grid2D, ring: int = 2) -> Grid2D:
    """Fill interior holes with a least-squares bicubic patch per hole.

    Holes are invalid 4-connected components that do not touch the grid
    border. Each channel is fitted independently on the valid cells within
    `ring` cells of the hole (the ring widens until the fit is determined).
    """
    invalid = ~grid.valid_mask
    labels, n = ndimage.label(invalid)
    if n == 0:
        return grid
    border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    z, gray, cr = grid.z_map.copy(), grid.gray_map.copy(), grid.cr_map.copy()
    valid = grid.valid_mask.copy()
    slices = ndimage.find_objects(labels)
    H, W = valid.shape
    for lab in range(1, n + 1):
        if lab in border:
            continue
        sl = slices[lab - 1]
        for width in range(ring, ring + 8):
            r0, r1 = max(sl[0].start - width, 0), min(sl[0].stop + width, H)
            c0, c1 = max(sl[1].start - width, 0), min(sl[1].stop + width, W)
            hole = labels[r0:r1, c0:c1] == lab
            near = ndimage.binary_dilation(hole, iterations=width) & grid.valid_mask[r0:r1, c0:c1]
            ri, ci = np.nonzero(near)
            if len(ri) >= 24:
                break
        hi, hj = np.nonzero(hole)
        ci0, ri0 = hj.mean(), hi.mean()
        sc = max(hole.shape) / 2.0 + width
        Afit = _bicubic_terms((ci - ci0) / sc, (ri - ri0) / sc)
        Aev = _bicubic_terms((hj - ci0) / sc, (hi - ri0) / sc)
        for chan in (z, gray, cr):
            sub = chan[r0:r1, c0:c1]
            coef, *_ = np.linalg.lstsq(Afit, sub[ri, ci], rcond=None)
            sub[hi, hj] = Aev @ coef
        valid[r0:r1, c0:c1][hi, hj] = True
    return replace(grid, z_map=z, gray_map=gray, cr_map=cr, valid_mask=valid)


def flatten(mesh: TriangleMesh, spacing: float = 1.0) -> Grid2D:
    """project_to_grid -> median_filter_3x3 -> fill_holes_bicubic."""
    return fill_holes_bicubic(median_filter_3x3(project_to_grid(mesh, spacing)))


def save_grid(grid: Grid2D, prefix) -> None:
    """Debug export: `<prefix>.png` (gray), `<prefix>.z.f32` (raw float32 LE) and `<prefix>.json`.

    Invalid cells are written as 0 in the PNG and NaN in the depth raster.
    """
    from PIL import Image

    prefix = os.fspath(prefix)
    g = np.where(grid.valid_mask, grid.gray_map, 0.0)
    # row 0 is the lowest y; flip so the image is upright
    Image.fromarray(np.clip(np.rint(g), 0, 255).astype(np.uint8)[::-1]).save(prefix + ".png")
    z = np.where(grid.valid_mask, grid.z_map, np.nan).astype("<f4")
    z.tofile(prefix + ".z.f32")
    with open(prefix + ".json", "w") as fh:
        json.dump({"shape": list(grid.shape), "origin": grid.origin.tolist(),
                   "spacing": grid.spacing, "row_order": "increasing y"}, fh, indent=2)
