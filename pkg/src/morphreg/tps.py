"""3D thin-plate splines and forward-only dense registration."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .mesh import LANDMARK_NAMES, LandmarkSet, TriangleMesh, sample_colors, save_mesh


class TpsError(ValueError):
    """Singular landmark configuration or too few shared landmarks."""


@dataclass(frozen=True, eq=False)
class TpsTransform:
    """f(p) = affine @ [p; 1] + sum_i weights_i * |p - source_i|."""

    source: np.ndarray
    affine: np.ndarray
    weights: np.ndarray

    def __call__(self, points) -> np.ndarray:
        return apply_tps(self, points)


def _kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2), 0.0))


def solve_tps(source, target, ridge: float = 0.0) -> TpsTransform:
    """Interpolating 3D spline with kernel phi(r) = r and an affine part.

    `ridge` > 0 adds a smoothing term to the kernel diagonal (the map then no
    longer interpolates exactly).
    """
    S = np.asarray(source, dtype=float).reshape(-1, 3)
    Y = np.asarray(target, dtype=float).reshape(-1, 3)
    n = len(S)
    if len(Y) != n:
        raise TpsError("source and target landmark counts differ")
    if n < 4:
        raise TpsError(f"need at least 4 landmarks, got {n}")
    P = np.hstack([np.ones((n, 1)), S])
    sv = np.linalg.svd(P - np.hstack([np.zeros((n, 1)), np.repeat(S.mean(0, keepdims=True), n, 0)]),
                       compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise TpsError(f"source landmarks are coplanar or coincident (condition ~{sv[0] / max(sv[-1], 1e-300):.3g})")
    L = np.zeros((n + 4, n + 4))
    L[:n, :n] = _kernel(S, S) + ridge * np.eye(n)
    L[:n, n:] = P
    L[n:, :n] = P.T
    rhs = np.zeros((n + 4, 3))
    rhs[:n] = Y
    cond = np.linalg.cond(L)
    if not np.isfinite(cond) or cond > 1e14:
        raise TpsError(f"TPS system is singular (condition {cond:.3g})")
    sol = np.linalg.solve(L, rhs)
    W = sol[:n]
    a = sol[n:]  # rows: constant, x, y, z
    affine = np.hstack([a[1:].T, a[:1].T])
    return TpsTransform(S.copy(), affine, W)


def apply_tps(t: TpsTransform, points, chunk: int = 50000) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    single = p.ndim == 1
    p = p.reshape(-1, 3)
    out = np.empty_like(p)
    M, c = t.affine[:, :3], t.affine[:, 3]
    for s in range(0, len(p), chunk):
        q = p[s:s + chunk]
        out[s:s + chunk] = q @ M.T + c + _kernel(q, t.source) @ t.weights
    return out[0] if single else out


@dataclass(frozen=True, eq=False)
class Registration:
    """A sample remeshed with the reference triangulation."""

    mesh: TriangleMesh
    colors: np.ndarray | None
    landmarks_used: tuple
    tps: TpsTransform
    triangle: np.ndarray
    bary: np.ndarray


def shared_landmarks(a: LandmarkSet, b: LandmarkSet) -> list[str]:
    return [n for n in LANDMARK_NAMES if n in a and n in b]


def register_surface(reference: TriangleMesh, ref_landmarks: LandmarkSet, sample: TriangleMesh,
                     sample_landmarks: LandmarkSet, ridge: float = 0.0) -> Registration:
    """Warp the reference onto the sample by TPS, then project every warped vertex onto the sample."""
    names = shared_landmarks(ref_landmarks, sample_landmarks)
    if len(names) < 4:
        raise TpsError(f"only {len(names)} shared landmarks; at least 4 are required")
    t = solve_tps(ref_landmarks.array(names), sample_landmarks.array(names), ridge)
    warped = apply_tps(t, reference.vertices)
    pts, tri, bary, _ = sample.surface_index.query(warped)
    colors = sample_colors(sample, tri, bary)
    mesh = TriangleMesh(pts, reference.triangles, colors)
    return Registration(mesh, colors, tuple(names), t, tri, bary)


@dataclass(eq=False)
class DenseCorrespondence:
    """Samples sharing the reference's vertex indexing (failed samples are listed, not stored)."""

    reference: TriangleMesh
    ref_landmarks: LandmarkSet
    ids: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    landmarks_used: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    @property
    def colors(self):
        return [m.colors for m in self.samples]

    def __len__(self):
        return len(self.samples)


def build_dense_correspondence(reference: TriangleMesh, ref_landmarks: LandmarkSet, corpus,
                               ridge: float = 0.0, workers: int = 1) -> DenseCorrespondence:
    """Register every (id, mesh, landmarks) entry; per-sample errors are collected, not raised.

    Entries may also be bare (mesh, landmarks) pairs, which get their position as id.
    """
    items = []
    for k, entry in enumerate(corpus):
        if len(entry) == 2:
            items.append((k, entry[0], entry[1]))
        else:
            items.append(tuple(entry))

    def run(item):
        sid, mesh, lms = item
        try:
            return sid, register_surface(reference, ref_landmarks, mesh, lms, ridge), None
        except (TpsError, ValueError, np.linalg.LinAlgError) as exc:
            return sid, None, str(exc)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, items))
    else:
        results = [run(it) for it in items]
    dc = DenseCorrespondence(reference, ref_landmarks)
    for sid, reg, err in results:
        if reg is None:
            dc.failures[sid] = err
        else:
            dc.ids.append(sid)
            dc.samples.append(reg.mesh)
            dc.landmarks_used.append(reg.landmarks_used)
    return dc


def landmark_anchors(mesh: TriangleMesh, landmarks: LandmarkSet):
    """(name, triangle, barycentric) of each landmark's closest point on `mesh`."""
    names = list(landmarks)
    pts, tri, bary, _ = mesh.surface_index.query(landmarks.array(names))
    return [(n, int(t), b) for n, t, b in zip(names, tri, bary)]


def landmarks_from_anchors(mesh: TriangleMesh, anchors) -> LandmarkSet:
    out = LandmarkSet()
    for name, t, b in anchors:
        out[name] = b @ mesh.vertices[mesh.triangles[t]]
    return out


def mean_displacement(a: DenseCorrespondence, b: DenseCorrespondence) -> float:
    """Mean per-vertex distance between the samples two correspondences share."""
    common = [i for i in a.ids if i in b.ids]
    if not common:
        raise ValueError("correspondences share no samples")
    d = [np.linalg.norm(a.samples[a.ids.index(i)].vertices - b.samples[b.ids.index(i)].vertices, axis=1).mean()
         for i in common]
    return float(np.mean(d))


def second_pass(first: DenseCorrespondence, corpus, ridge: float = 0.0, workers: int = 1, gpa_kw=None):
    """Re-register the corpus against the GPA average of a first-pass correspondence.

    The average face's landmarks sit at the same surface positions (triangle
    and barycentric coordinates) as the first-pass reference landmarks.
    Returns (second-pass correspondence, average face, its landmarks).
    """
    from .gpa import average_face, gpa_align

    if len(first) < 2:
        raise ValueError("second pass needs at least two registered samples")
    anchors = landmark_anchors(first.reference, first.ref_landmarks)
    g = gpa_align(first.samples, **(gpa_kw or {}))
    avg = average_face(g.aligned, [m.colors for m in first.samples])
    avg_lms = landmarks_from_anchors(avg, anchors)
    # express the average in the frame of the first sample so sample landmarks stay meaningful
    back = g.transforms[0].inverse()
    avg = avg.transformed(back)
    avg_lms = avg_lms.transformed(back)
    return build_dense_correspondence(avg, avg_lms, corpus, ridge, workers), avg, avg_lms


def write_correspondence(dc: DenseCorrespondence, out_dir, reference_name: str = "reference") -> dict:
    """One PLY per registered sample plus manifest.json; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    ref_path = os.path.join(out_dir, f"{reference_name}.ply")
    save_mesh(dc.reference, ref_path)
    entries = []
    for sid, mesh, used in zip(dc.ids, dc.samples, dc.landmarks_used):
        fname = f"{sid}.ply"
        save_mesh(mesh, os.path.join(out_dir, fname))
        entries.append({"id": str(sid), "status": "ok", "mesh": fname, "landmarks_used": list(used)})
    for sid, err in dc.failures.items():
        entries.append({"id": str(sid), "status": "failed", "error": err})
    entries.sort(key=lambda e: e["id"])
    manifest = {
        "reference": os.path.basename(ref_path),
        "reference_landmarks": dc.ref_landmarks.to_json()["landmarks"],
        "vertex_count": int(dc.reference.n_vertices),
        "samples": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest
