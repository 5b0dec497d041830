"""Triangle meshes, landmark sets, rigid transforms and spatial queries.

Coordinates are millimetres. The face frame is right handed: +z points
toward the viewer, +y is up and +x points to the subject's left.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator, Mapping

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

LANDMARK_NAMES = (
    "Right Eye Outer Corner",
    "Right Eye Inner Corner",
    "Left Eye Inner Corner",
    "Left Eye Outer Corner",
    "Right Lip Corner",
    "Left Lip Corner",
    "Nose Tip",
    "Nasion",
    "Right Alare",
    "Left Alare",
    "Lip Center",
    "Upper Lip",
    "Lower Lip",
    "Subnasale",
    "Pogonion",
    "Right Earlobe tip",
    "Left Earlobe tip",
)

SALIENT_NAMES = LANDMARK_NAMES[:6]
HEURISTIC_NAMES = LANDMARK_NAMES[6:]


class MeshError(ValueError):
    """Raised for malformed meshes and unreadable mesh files."""


# ---------------------------------------------------------------------------
# rigid transforms


@dataclass(frozen=True)
class RigidTransform:
    """x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform that applies `other` first, then `self`."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RigidTransform":
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


def rotation_matrix(yaw=0.0, pitch=0.0, roll=0.0, degrees=True) -> np.ndarray:
    """Rotation about y (yaw), then x (pitch), then z (roll)."""
    if degrees:
        yaw, pitch, roll = np.radians([yaw, pitch, roll])
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return Rz @ Rx @ Ry


# ---------------------------------------------------------------------------
# landmarks


class LandmarkSet(Mapping):
    """Named 3D landmarks restricted to the 17 canonical labels.

    `confidence` maps a subset of names to False when a detector flagged the
    result as unreliable; `failures` lists names a detector could not find.
    """

    def __init__(self, points: Mapping[str, Iterable[float]] | None = None,
                 confidence: Mapping[str, bool] | None = None,
                 failures: Iterable[str] = ()):
        self._points: dict[str, np.ndarray] = {}
        for name, p in (points or {}).items():
            self[name] = p
        self.confidence = {n: bool(v) for n, v in (confidence or {}).items()}
        self.failures = list(failures)

    def __setitem__(self, name: str, p) -> None:
        if name not in LANDMARK_NAMES:
            raise KeyError(f"unknown landmark name {name!r}")
        arr = np.asarray(p, dtype=float).reshape(3)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"landmark {name!r} has non-finite coordinates")
        self._points[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._points[name]

    def __iter__(self) -> Iterator[str]:
        # canonical order regardless of insertion order
        return (n for n in LANDMARK_NAMES if n in self._points)

    def __len__(self) -> int:
        return len(self._points)

    def __repr__(self) -> str:
        return f"LandmarkSet({len(self)} landmarks)"

    @property
    def complete(self) -> bool:
        return len(self) == len(LANDMARK_NAMES)

    def array(self, names: Iterable[str] | None = None) -> np.ndarray:
        names = list(self) if names is None else list(names)
        return np.array([self._points[n] for n in names]).reshape(-1, 3)

    def transformed(self, T: RigidTransform) -> "LandmarkSet":
        out = LandmarkSet(confidence=self.confidence, failures=self.failures)
        for n in self:
            out[n] = T.apply(self._points[n])
        return out

    def merged(self, other: "LandmarkSet") -> "LandmarkSet":
        out = LandmarkSet(
            {**{n: self[n] for n in self}, **{n: other[n] for n in other}},
            {**self.confidence, **other.confidence},
            [f for f in self.failures + other.failures if f not in other and f not in self],
        )
        return out

    def to_json(self) -> dict:
        d = {
            "landmarks": {n: [float(v) for v in self._points[n]] for n in self},
            "units": "mm",
        }
        if self.confidence:
            d["confidence"] = {n: self.confidence[n] for n in LANDMARK_NAMES if n in self.confidence}
        if self.failures:
            d["failures"] = [n for n in LANDMARK_NAMES if n in self.failures]
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "LandmarkSet":
        if d.get("units", "mm") != "mm":
            raise ValueError("landmark files must be in millimetres")
        return cls(d["landmarks"], d.get("confidence"), d.get("failures", ()))


def save_landmarks(landmarks: LandmarkSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(landmarks.to_json(), fh, indent=2)
        fh.write("\n")


def load_landmarks(path) -> LandmarkSet:
    with open(path) as fh:
        return LandmarkSet.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# meshes


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t):
            if t.min() < 0 or t.max() >= len(v):
                bad = int(np.flatnonzero((t < 0).any(1) | (t >= len(v)).any(1))[0])
                raise MeshError(f"triangle {bad} references a vertex outside 0..{len(v) - 1}")
            rep = (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
            if rep.any():
                raise MeshError(f"triangle {int(np.flatnonzero(rep)[0])} repeats a vertex index")
        c = self.colors
        if c is not None:
            c = np.array(c, dtype=np.float64).reshape(-1, 3)
            if len(c) != len(v):
                raise MeshError("color count must equal vertex count")
            if c.min(initial=0) < 0 or c.max(initial=0) > 255:
                raise MeshError("colors must lie in [0, 255]")
            c = _readonly(c)
        object.__setattr__(self, "vertices", _readonly(v))
        object.__setattr__(self, "triangles", _readonly(t))
        object.__setattr__(self, "colors", c)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def transformed(self, T: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(T.apply(self.vertices), self.triangles, self.colors)

    def submesh(self, keep: np.ndarray) -> "TriangleMesh":
        """Mesh restricted to vertices where `keep` is true (triangles dropped if any corner goes)."""
        keep = np.asarray(keep, dtype=bool)
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[keep] = np.arange(keep.sum())
        tri = remap[self.triangles]
        tri = tri[(tri >= 0).all(1)]
        cols = None if self.colors is None else self.colors[keep]
        return TriangleMesh(self.vertices[keep], tri, cols)

    @cached_property
    def kdtree(self) -> cKDTree:
        return cKDTree(self.vertices)

    @cached_property
    def triangle_normals(self) -> np.ndarray:
        """Unnormalised normals; length is twice the triangle area."""
        v = self.vertices
        a, b, c = v[self.triangles[:, 0]], v[self.triangles[:, 1]], v[self.triangles[:, 2]]
        return np.cross(b - a, c - a)

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        """Area-weighted unit vertex normals (orientation follows triangle winding)."""
        n = np.zeros_like(self.vertices)
        fn = self.triangle_normals
        for k in range(3):
            np.add.at(n, self.triangles[:, k], fn)
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)

    @cached_property
    def surface_index(self) -> "SurfaceIndex":
        return SurfaceIndex(self)

    def boundary_edges(self) -> np.ndarray:
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq[counts == 1]


# ---------------------------------------------------------------------------
# file I/O

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def load_mesh(path) -> TriangleMesh:
    """Read an OBJ or PLY (ASCII or binary little endian) triangle mesh."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    try:
        if ext == ".obj":
            return _load_obj(path)
        if ext == ".ply":
            return _load_ply(path)
    except OSError as exc:
        raise MeshError(f"cannot read {path}: {exc}") from exc
    raise MeshError(f"unsupported mesh format {ext!r} for {path}")


def _load_obj(path) -> TriangleMesh:
    verts, cols, faces = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                try:
                    vals = [float(x) for x in parts[1:]]
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: malformed vertex") from exc
                if len(vals) not in (3, 4, 6, 7):
                    raise MeshError(f"{path}:{lineno}: malformed vertex")
                verts.append(vals[:3])
                if len(vals) >= 6:
                    cols.append(vals[3:6] if len(vals) == 6 else vals[4:7])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    try:
                        i = int(tok.split("/")[0])
                    except ValueError as exc:
                        raise MeshError(f"{path}:{lineno}: malformed face index {tok!r}") from exc
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise MeshError(f"{path}:{lineno}: face with fewer than 3 vertices")
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1], lineno))
    n = len(verts)
    for a, b, c, lineno in faces:
        for i in (a, b, c):
            if not 0 <= i < n:
                raise MeshError(f"{path}:{lineno}: face references vertex {i + 1} but the file has {n}")
    colors = None
    if cols:
        if len(cols) != n:
            raise MeshError(f"{path}: only some vertices carry colors")
        colors = np.array(cols)
        if colors.max(initial=0) <= 1.0:
            colors = colors * 255.0
    tri = np.array([f[:3] for f in faces], dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(np.array(verts).reshape(-1, 3), tri, colors)


def _load_ply(path) -> TriangleMesh:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MeshError(f"{path}: missing ply magic")
        fmt, elements = None, []
        while True:
            line = fh.readline()
            if not line:
                raise MeshError(f"{path}: truncated header")
            tok = line.decode("ascii", "replace").split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append([tok[1], int(tok[2]), []])
            elif tok[0] == "property":
                if tok[1] == "list":
                    elements[-1][2].append((tok[4], "list", tok[2], tok[3]))
                else:
                    elements[-1][2].append((tok[2], tok[1]))
            elif tok[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise MeshError(f"{path}: unsupported PLY format {fmt!r}")
        data = {}
        if fmt == "ascii":
            rest = fh.read().decode("ascii").split()
            pos = 0
            for name, count, props in elements:
                rows = []
                for _ in range(count):
                    row = []
                    for p in props:
                        if p[1] == "list":
                            k = int(rest[pos]); pos += 1
                            row.append([float(x) for x in rest[pos:pos + k]]); pos += k
                        else:
                            row.append(float(rest[pos])); pos += 1
                    rows.append(row)
                data[name] = (props, rows)
        else:
            buf = fh.read()
            off = 0
            for name, count, props in elements:
                if all(p[1] != "list" for p in props):
                    dt = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in props])
                    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off)
                    off += dt.itemsize * count
                    data[name] = (props, arr)
                else:
                    rows = []
                    for _ in range(count):
                        row = []
                        for p in props:
                            if p[1] == "list":
                                ct = np.dtype("<" + _PLY_TYPES[p[2]])
                                it = np.dtype("<" + _PLY_TYPES[p[3]])
                                k = int(np.frombuffer(buf, ct, 1, off)[0]); off += ct.itemsize
                                row.append(np.frombuffer(buf, it, k, off).tolist()); off += it.itemsize * k
                            else:
                                dt = np.dtype("<" + _PLY_TYPES[p[1]])
                                row.append(float(np.frombuffer(buf, dt, 1, off)[0])); off += dt.itemsize
                        rows.append(row)
                    data[name] = (props, rows)
    if "vertex" not in data:
        raise MeshError(f"{path}: no vertex element")
    vprops, vrows = data["vertex"]
    names = [p[0] for p in vprops]

    def column(n):
        i = names.index(n)
        if isinstance(vrows, np.ndarray):
            return vrows[n].astype(np.float64)
        return np.array([r[i] for r in vrows], dtype=np.float64)

    try:
        verts = np.column_stack([column("x"), column("y"), column("z")])
    except ValueError as exc:
        raise MeshError(f"{path}: vertex element lacks x/y/z") from exc
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.column_stack([column("red"), column("green"), column("blue")])
    faces = []
    if "face" in data:
        fprops, frows = data["face"]
        li = [i for i, p in enumerate(fprops) if p[1] == "list"]
        if not li:
            raise MeshError(f"{path}: face element without index list")
        for fi, row in enumerate(frows):
            idx = [int(i) for i in row[li[0]]]
            for i in idx:
                if not 0 <= i < len(verts):
                    raise MeshError(f"{path}: face {fi} references vertex {i} but the file has {len(verts)}")
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    return TriangleMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3), colors)


def save_mesh(mesh: TriangleMesh, path, binary: bool = True) -> None:
    """Write `mesh` as OBJ or PLY, chosen by extension.

    PLY coordinates are stored as doubles; colors as uchar when every channel
    is integral, otherwise as doubles so averaged colors survive unchanged.
    """
    if mesh.n_vertices == 0:
        raise MeshError("refusing to write a mesh without vertices")
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    try:
        if ext == ".obj":
            _save_obj(mesh, path)
        elif ext == ".ply":
            _save_ply(mesh, path, binary)
        else:
            raise MeshError(f"unsupported mesh format {ext!r}")
    except OSError as exc:
        raise MeshError(f"cannot write {path}: {exc}") from exc


def _save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        rows = mesh.vertices.tolist() if mesh.colors is None else \
            np.hstack([mesh.vertices, mesh.colors / 255.0]).tolist()
        for row in rows:
            fh.write("v " + " ".join(repr(x) for x in row) + "\n")
        for a, b, c in (mesh.triangles + 1).tolist():
            fh.write(f"f {a} {b} {c}\n")


def _save_ply(mesh: TriangleMesh, path, binary: bool) -> None:
    cols = mesh.colors
    integral = cols is not None and np.array_equal(cols, np.round(cols))
    ctype = "uchar" if integral else "double"
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {mesh.n_vertices}",
              "property double x", "property double y", "property double z"]
    if cols is not None:
        header += [f"property {ctype} red", f"property {ctype} green", f"property {ctype} blue"]
    header += [f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices", "end_header"]
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if cols is not None:
        ct = "u1" if integral else "<f8"
        fields += [("red", ct), ("green", ct), ("blue", ct)]
    varr = np.empty(mesh.n_vertices, dtype=fields)
    varr["x"], varr["y"], varr["z"] = mesh.vertices.T
    if cols is not None:
        varr["red"], varr["green"], varr["blue"] = cols.T
    farr = np.empty(len(mesh.triangles), dtype=[("n", "u1"), ("i", "<i4", 3)])
    farr["n"] = 3
    farr["i"] = mesh.triangles
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(varr.tobytes())
            fh.write(farr.tobytes())
        else:
            for row in varr:
                fh.write((" ".join(repr(float(v)) if isinstance(v, float) else str(v) for v in row.tolist()) + "\n").encode())
            for a, b, c in mesh.triangles:
                fh.write(f"3 {a} {b} {c}\n".encode())


# ---------------------------------------------------------------------------
# spatial queries


def radius_search(mesh: TriangleMesh, center, R: float) -> np.ndarray:
    """Indices (ascending) of vertices within Euclidean distance R of `center`."""
    if R <= 0:
        raise ValueError("radius must be positive")
    idx = mesh.kdtree.query_ball_point(np.asarray(center, dtype=float), R)
    idx = np.array(sorted(idx), dtype=np.int64)
    if len(idx):
        # exact re-check so the result equals brute force filtering
        d = np.linalg.norm(mesh.vertices[idx] - center, axis=1)
        idx = idx[d <= R]
    return idx


def closest_points_on_triangles(p, a, b, c):
    """Closest point to p on each triangle (a, b, c); all arrays (n, 3).

    Returns the points and their barycentric coordinates (n, 3).
    Region classification follows the standard Voronoi-region method.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    n = len(p)
    bary = np.empty((n, 3))
    done = np.zeros(n, dtype=bool)

    def put(mask, u, v, w):
        m = mask & ~done
        bary[m, 0], bary[m, 1], bary[m, 2] = u[m] if np.ndim(u) else u, v[m] if np.ndim(v) else v, w[m] if np.ndim(w) else w
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
        put((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
        t = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1 - t, t, 0.0)
        put((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)
        t = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1 - t, 0.0, t)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), 0.0, 1 - t, t)
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        rest = ~done
        bary[rest, 0] = 1 - v[rest] - w[rest]
        bary[rest, 1] = v[rest]
        bary[rest, 2] = w[rest]
    # degenerate (zero area) triangles fall back to their nearest corner
    bad = ~np.all(np.isfinite(bary), axis=1)
    if bad.any():
        corners = np.stack([a[bad], b[bad], c[bad]], 1)
        k = np.argmin(np.linalg.norm(corners - p[bad, None], axis=2), axis=1)
        bary[bad] = np.eye(3)[k]
    pts = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return pts, bary


@njit(cache=True)
def _closest_on_triangle(px, py, pz, a, b, c):
    """Scalar Voronoi-region closest point; returns (u, v, w, d2)."""
    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    apx, apy, apz = px - a[0], py - a[1], pz - a[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    u, v, w = 1.0, 0.0, 0.0
    done = False
    if d1 <= 0 and d2 <= 0:
        done = True
    if not done:
        bpx, bpy, bpz = px - b[0], py - b[1], pz - b[2]
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        cpx, cpy, cpz = px - c[0], py - c[1], pz - c[2]
        d5 = abx * cpx + aby * cpy + abz * cpz
        d6 = acx * cpx + acy * cpy + acz * cpz
        va = d3 * d6 - d5 * d4
        vb = d5 * d2 - d1 * d6
        vc = d1 * d4 - d3 * d2
        if d3 >= 0 and d4 <= d3:
            u, v, w = 0.0, 1.0, 0.0
        elif vc <= 0 and d1 >= 0 and d3 <= 0 and d1 - d3 != 0:
            t = d1 / (d1 - d3)
            u, v, w = 1 - t, t, 0.0
        elif d6 >= 0 and d5 <= d6:
            u, v, w = 0.0, 0.0, 1.0
        elif vb <= 0 and d2 >= 0 and d6 <= 0 and d2 - d6 != 0:
            t = d2 / (d2 - d6)
            u, v, w = 1 - t, 0.0, t
        elif va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0 and (d4 - d3) + (d5 - d6) != 0:
            t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            u, v, w = 0.0, 1 - t, t
        else:
            den = va + vb + vc
            if den != 0:
                v = vb / den
                w = vc / den
                u = 1 - v - w
            else:
                # zero-area triangle: nearest corner
                da = apx * apx + apy * apy + apz * apz
                db = bpx * bpx + bpy * bpy + bpz * bpz
                dc = cpx * cpx + cpy * cpy + cpz * cpz
                if da <= db and da <= dc:
                    u, v, w = 1.0, 0.0, 0.0
                elif db <= dc:
                    u, v, w = 0.0, 1.0, 0.0
                else:
                    u, v, w = 0.0, 0.0, 1.0
    qx = u * a[0] + v * b[0] + w * c[0]
    qy = u * a[1] + v * b[1] + w * c[1]
    qz = u * a[2] + v * b[2] + w * c[2]
    dx, dy, dz = qx - px, qy - py, qz - pz
    return u, v, w, dx * dx + dy * dy + dz * dz


@njit(cache=True)
def _grid_query(Q, A, B, C, lo, h, dims, start, items, seed_ptr, seed_tri, seed_v):
    n = Q.shape[0]
    out_t = np.full(n, -1, dtype=np.int64)
    out_b = np.zeros((n, 3))
    out_d2 = np.full(n, np.inf)
    nx, ny, nz = dims[0], dims[1], dims[2]
    for q in range(n):
        px, py, pz = Q[q, 0], Q[q, 1], Q[q, 2]
        # cell of the query, clamped into the grid, and its distance to the grid box
        c = np.empty(3, dtype=np.int64)
        box2 = 0.0
        for d in range(3):
            f = (Q[q, d] - lo[d]) / h
            k = int(np.floor(f))
            if k < 0:
                box2 += (Q[q, d] - lo[d]) ** 2
                k = 0
            elif k >= dims[d]:
                box2 += (Q[q, d] - (lo[d] + dims[d] * h)) ** 2
                k = dims[d] - 1
            c[d] = k
        best = np.inf
        bt = -1
        bu = bv = bw = 0.0
        # upper bound from the triangles around the nearest vertex
        sv = seed_v[q]
        for t in range(seed_ptr[sv], seed_ptr[sv + 1]):
            tri = seed_tri[t]
            u, v, w, d2 = _closest_on_triangle(px, py, pz, A[tri], B[tri], C[tri])
            if d2 < best or (d2 == best and tri < bt):
                best, bt, bu, bv, bw = d2, tri, u, v, w
        maxring = max(nx, max(ny, nz))
        for ring in range(maxring + 1):
            # every cell beyond this ring is at least (ring) cells away from the query's cell
            if ring > 0:
                lb = (ring - 1) * h
                lb2 = max(lb * lb, box2)
                if best < lb2:
                    break
            for ix in range(c[0] - ring, c[0] + ring + 1):
                if ix < 0 or ix >= nx:
                    continue
                for iy in range(c[1] - ring, c[1] + ring + 1):
                    if iy < 0 or iy >= ny:
                        continue
                    edge_xy = ix == c[0] - ring or ix == c[0] + ring or iy == c[1] - ring or iy == c[1] + ring
                    for iz in range(c[2] - ring, c[2] + ring + 1):
                        if iz < 0 or iz >= nz:
                            continue
                        if not edge_xy and iz != c[2] - ring and iz != c[2] + ring:
                            continue
                        cell = (ix * ny + iy) * nz + iz
                        if start[cell] == start[cell + 1]:
                            continue
                        # skip cells whose box is farther than the best so far
                        gx = max(lo[0] + ix * h - px, 0.0, px - (lo[0] + (ix + 1) * h))
                        gy = max(lo[1] + iy * h - py, 0.0, py - (lo[1] + (iy + 1) * h))
                        gz = max(lo[2] + iz * h - pz, 0.0, pz - (lo[2] + (iz + 1) * h))
                        if gx * gx + gy * gy + gz * gz > best:
                            continue
                        for t in range(start[cell], start[cell + 1]):
                            tri = items[t]
                            u, v, w, d2 = _closest_on_triangle(px, py, pz, A[tri], B[tri], C[tri])
                            if d2 < best or (d2 == best and tri < bt):
                                best, bt, bu, bv, bw = d2, tri, u, v, w
        out_t[q] = bt
        out_b[q, 0], out_b[q, 1], out_b[q, 2] = bu, bv, bw
        out_d2[q] = best
    return out_t, out_b, out_d2


class SurfaceIndex:
    """Exact closest-point queries over a triangle mesh.

    Triangles are binned into a uniform grid by their bounding boxes. A query
    visits cells in growing rings around its own cell and stops once no
    unvisited cell can hold anything closer than the best triangle so far.
    """

    def __init__(self, mesh: TriangleMesh, max_cells: int = 2_000_000):
        if len(mesh.triangles) == 0:
            raise MeshError("closest point query on a mesh without triangles")
        self.mesh = mesh
        v, t = mesh.vertices, mesh.triangles
        self.a = np.ascontiguousarray(v[t[:, 0]])
        self.b = np.ascontiguousarray(v[t[:, 1]])
        self.c = np.ascontiguousarray(v[t[:, 2]])
        P = np.stack([self.a, self.b, self.c], axis=1)
        tlo, thi = P.min(axis=1), P.max(axis=1)
        lo = tlo.min(axis=0)
        ext = np.maximum(thi.max(axis=0) - lo, 1e-9)
        edge = np.median(np.linalg.norm(self.b - self.a, axis=1))
        h = max(2.0 * edge, 1e-9, float(np.prod(ext) / max_cells) ** (1 / 3))
        dims = np.maximum(np.ceil(ext / h).astype(np.int64), 1)
        while np.prod(dims) > max_cells:
            h *= 1.25
            dims = np.maximum(np.ceil(ext / h).astype(np.int64), 1)
        c0 = np.clip(np.floor((tlo - lo) / h).astype(np.int64), 0, dims - 1)
        c1 = np.clip(np.floor((thi - lo) / h).astype(np.int64), 0, dims - 1)
        span = c1 - c0 + 1
        cnt = span.prod(axis=1)
        tri = np.repeat(np.arange(len(t)), cnt)
        k = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        sp = span[tri]
        ix = c0[tri, 0] + k // (sp[:, 1] * sp[:, 2])
        iy = c0[tri, 1] + (k // sp[:, 2]) % sp[:, 1]
        iz = c0[tri, 2] + k % sp[:, 2]
        cell = (ix * dims[1] + iy) * dims[2] + iz
        order = np.lexsort((tri, cell))
        self.items = tri[order]
        self.start = np.concatenate([[0], np.cumsum(np.bincount(cell, minlength=int(np.prod(dims))))])
        self.lo, self.h, self.dims = lo, float(h), dims
        # triangles incident to each vertex (CSR), for the initial bound
        flat = t.ravel()
        self.vt_tri = (np.argsort(flat, kind="stable") // 3).astype(np.int64)
        self.vt_ptr = np.concatenate([[0], np.cumsum(np.bincount(flat, minlength=len(v)))])

    def query(self, Q):
        """Closest surface points for queries Q (n, 3).

        Returns (points (n,3), triangle indices (n,), barycentric (n,3), distances (n,)).
        Ties are broken toward the lowest triangle index.
        """
        Q = np.ascontiguousarray(np.atleast_2d(np.asarray(Q, dtype=float)))
        _, iv = self.mesh.kdtree.query(Q)
        tri, bary, d2 = _grid_query(Q, self.a, self.b, self.c, self.lo, self.h, self.dims, self.start,
                                    self.items, self.vt_ptr, self.vt_tri, iv.astype(np.int64))
        pts = bary[:, :1] * self.a[tri] + bary[:, 1:2] * self.b[tri] + bary[:, 2:] * self.c[tri]
        return pts, tri, bary, np.sqrt(d2)


def closest_point_on_surface(mesh: TriangleMesh, query):
    """Closest point on the surface and the index of the triangle holding it.

    `query` may be one point or an (n, 3) array; distances are returned as a
    third element.
    """
    q = np.asarray(query, dtype=float)
    pts, tri, _, dist = mesh.surface_index.query(q.reshape(-1, 3))
    if q.ndim == 1:
        return pts[0], int(tri[0]), float(dist[0])
    return pts, tri, dist


def closest_point_brute_force(mesh: TriangleMesh, query):
    """Reference exhaustive scan over every triangle (used as a test oracle)."""
    if len(mesh.triangles) == 0:
        raise MeshError("closest point query on a mesh without triangles")
    v, t = mesh.vertices, mesh.triangles
    q = np.asarray(query, dtype=float).reshape(1, 3)
    qq = np.repeat(q, len(t), axis=0)
    pts, _ = closest_points_on_triangles(qq, v[t[:, 0]], v[t[:, 1]], v[t[:, 2]])
    d = np.linalg.norm(pts - q, axis=1)
    k = int(np.argmin(d))
    return pts[k], k, float(d[k])


def sample_colors(mesh: TriangleMesh, tri: np.ndarray, bary: np.ndarray) -> np.ndarray | None:
    """Barycentric interpolation of per-vertex colors at surface points."""
    if mesh.colors is None:
        return None
    c = mesh.colors[mesh.triangles[tri]]
    return np.clip(np.einsum("nk,nkc->nc", bary, c), 0.0, 255.0)
