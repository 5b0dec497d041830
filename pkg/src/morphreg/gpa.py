"""Generalized Procrustes alignment of corresponded meshes and the average face."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import RigidTransform, TriangleMesh


class GpaError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GpaResult:
    aligned: list            # TriangleMesh per sample, in the common frame
    transforms: list         # RigidTransform per sample: input frame -> common frame
    mean: np.ndarray         # (n, 3) converged mean shape
    iterations: int
    converged: bool
    objective: list = field(default_factory=list)  # sum of squared distances to the mean, per iteration
    scales: list | None = None

    @property
    def rms_to_mean(self) -> float:
        d = np.stack([m.vertices for m in self.aligned]) - self.mean
        return float(np.sqrt(np.mean(np.sum(d * d, axis=2))))


def procrustes_rotation(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Proper rotation R minimising |X R^T - Y| for centred (n, 3) arrays."""
    U, _, Vt = np.linalg.svd(Y.T @ X)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return U @ D @ Vt


def _members(data):
    if hasattr(data, "samples"):
        data = data.samples
    meshes = list(data)
    if len(meshes) < 2:
        raise GpaError("GPA needs at least two shapes")
    shapes = [np.asarray(m.vertices if isinstance(m, TriangleMesh) else m, dtype=float) for m in meshes]
    n = shapes[0].shape
    if any(s.shape != n for s in shapes):
        raise GpaError("all shapes must have the same vertex count")
    return meshes, shapes


def gpa_align(data, tol: float = 1e-7, max_iter: int = 100, scale: bool = False) -> GpaResult:
    """Align corresponded shapes to their evolving mean (rotation and translation only by default).

    `data` is a DenseCorrespondence, a list of meshes or a list of (n, 3) arrays.
    Iteration stops when the RMS per-vertex change of the mean is below `tol`.
    With `scale`, every shape is first normalised to unit centroid size.
    """
    meshes, shapes = _members(data)
    cent = [s.mean(axis=0) for s in shapes]
    X = [s - c for s, c in zip(shapes, cent)]
    scales = None
    if scale:
        scales = [1.0 / np.sqrt(np.sum(x * x)) for x in X]
        X = [x * f for x, f in zip(X, scales)]
    mean = X[0].copy()
    rots = [np.eye(3)] * len(X)
    objective = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        rots = [procrustes_rotation(x, mean) for x in X]
        Y = [x @ R.T for x, R in zip(X, rots)]
        new = np.mean(Y, axis=0)
        objective.append(float(sum(np.sum((y - new) ** 2) for y in Y)))
        change = np.sqrt(np.mean(np.sum((new - mean) ** 2, axis=1)))
        mean = new
        if change < tol:
            converged = True
            break
    aligned, transforms = [], []
    for k, (x, R) in enumerate(zip(X, rots)):
        y = x @ R.T
        tris = meshes[k].triangles if isinstance(meshes[k], TriangleMesh) else None
        cols = meshes[k].colors if isinstance(meshes[k], TriangleMesh) else None
        aligned.append(TriangleMesh(y, tris, cols) if tris is not None else y)
        # rigid part only; the optional scale factor is reported separately
        transforms.append(RigidTransform(R, -R @ cent[k]))
    return GpaResult(aligned, transforms, mean, it, converged, objective, scales)


def average_face(aligned, colors=None) -> TriangleMesh:
    """Vertex-wise and channel-wise arithmetic mean of meshes sharing one triangulation."""
    meshes = list(aligned)
    if not meshes:
        raise GpaError("cannot average an empty list")
    tris = meshes[0].triangles
    for m in meshes[1:]:
        if m.n_vertices != meshes[0].n_vertices or not np.array_equal(m.triangles, tris):
            raise GpaError("meshes must share vertex count and triangulation")
    verts = np.mean([m.vertices for m in meshes], axis=0)
    if colors is None:
        colors = [m.colors for m in meshes]
    cols = None
    if colors and all(c is not None for c in colors):
        cols = np.mean([np.asarray(c, dtype=float) for c in colors], axis=0)
    return TriangleMesh(verts, tris, cols)
