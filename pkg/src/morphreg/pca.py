"""PCA eigenspaces over shape+texture patches for the six salient landmarks."""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .flatten import Grid2D
from .mesh import LandmarkSet, TriangleMesh


class PatchUnavailable(ValueError):
    """Window leaves the grid, touches invalid cells or is degenerate."""


class TrainingError(ValueError):
    pass


class LandmarkDetectionError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PatchVector:
    data: np.ndarray
    patch_size_mm: float

    def __len__(self):
        return len(self.data)


@dataclass(frozen=True)
class PatchScore:
    reconstruction_error: float
    mahalanobis: float
    in_bounds: bool

    @property
    def product(self) -> float:
        return self.reconstruction_error * self.mahalanobis


@dataclass(frozen=True, eq=False)
class LandmarkModel:
    """Eigenspace of one landmark. `zone` is (xmin, xmax, ymin, ymax) in mm of the grid frame."""

    name: str
    mean_patch: np.ndarray
    eigenvectors: np.ndarray
    eigenvalues: np.ndarray
    zone: tuple
    s: float = 21.0
    spacing: float = 1.0

    @property
    def k(self) -> int:
        return self.eigenvectors.shape[1]

    @property
    def cells(self) -> int:
        return _window_cells(self.s, self.spacing)


def _window_cells(s: float, spacing: float) -> int:
    n = int(round(s / spacing))
    if n < 2:
        raise ValueError("patch must span at least 2 cells")
    return n


def _normalise(z: np.ndarray, g: np.ndarray):
    """Row-wise patch normalisation; returns (data, ok) for stacks of flat windows."""
    z = z - z.mean(axis=-1, keepdims=True)
    zn = np.linalg.norm(z, axis=-1, keepdims=True)
    gn = np.linalg.norm(g, axis=-1, keepdims=True)
    ok = (zn[..., 0] > 1e-9) & (gn[..., 0] > 1e-9)
    zn = np.where(zn > 0, zn, 1.0)
    gn = np.where(gn > 0, gn, 1.0)
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],))
    out[..., 0::2] = z / zn
    out[..., 1::2] = g / gn
    return out, ok


def _window_bounds(center, n):
    i, j = center
    lo = n // 2
    return i - lo, i - lo + n, j - lo, j - lo + n


def extract_patch(grid: Grid2D, center, s: float = 21.0) -> PatchVector:
    """Interleaved (z, gray) patch of the s x s mm window centred on cell `center`."""
    n = _window_cells(s, grid.spacing)
    r0, r1, c0, c1 = _window_bounds(center, n)
    H, W = grid.shape
    if r0 < 0 or c0 < 0 or r1 > H or c1 > W:
        raise PatchUnavailable(f"window around {tuple(center)} leaves the grid")
    if not grid.valid_mask[r0:r1, c0:c1].all():
        raise PatchUnavailable(f"window around {tuple(center)} contains invalid cells")
    data, ok = _normalise(grid.z_map[r0:r1, c0:c1].ravel(), grid.gray_map[r0:r1, c0:c1].ravel())
    if not ok:
        raise PatchUnavailable("constant window cannot be normalised")
    return PatchVector(data, float(s))


def _all_patches(grid: Grid2D, rows, cols, n):
    """Patches for every (row, col) in the given ranges; returns (cells, data) of valid ones."""
    H, W = grid.shape
    lo = n // 2
    rows = np.asarray([r for r in rows if r - lo >= 0 and r - lo + n <= H], dtype=int)
    cols = np.asarray([c for c in cols if c - lo >= 0 and c - lo + n <= W], dtype=int)
    if len(rows) == 0 or len(cols) == 0:
        return np.zeros((0, 2), int), np.zeros((0, 2 * n * n))
    sl = (slice(rows[0] - lo, rows[-1] - lo + n), slice(cols[0] - lo, cols[-1] - lo + n))
    view = lambda a: np.lib.stride_tricks.sliding_window_view(a[sl], (n, n))  # noqa: E731
    valid = view(grid.valid_mask).all(axis=(2, 3))
    R, C = np.nonzero(valid)
    if len(R) == 0:
        return np.zeros((0, 2), int), np.zeros((0, 2 * n * n))
    z = view(grid.z_map)[R, C].reshape(len(R), -1)
    g = view(grid.gray_map)[R, C].reshape(len(R), -1)
    data, ok = _normalise(z, g)
    cells = np.column_stack([R + rows[0], C + cols[0]])
    return cells[ok], data[ok]


def train_landmark_model(training, name: str, s: float = 21.0, k: int = 16,
                         margin: float = 10.0) -> LandmarkModel:
    """Eigenspace from (grid, (x, y) landmark position in mm) pairs.

    The zone is the bounding box of the training positions grown by `margin` mm.
    """
    training = list(training)
    m = len(training)
    if k < 1:
        raise TrainingError("k must be positive")
    if m < k + 1:
        raise TrainingError(f"{name}: {m} training faces cannot support k={k} (need {k + 1})")
    patches, xy = [], []
    spacing = None
    for grid, pos in training:
        if spacing is None:
            spacing = grid.spacing
        elif not np.isclose(grid.spacing, spacing):
            raise TrainingError("training grids must share one spacing")
        cell = grid.cell_of(pos[0], pos[1])
        patches.append(extract_patch(grid, cell, s).data)
        xy.append(pos[:2])
    P = np.asarray(patches)
    mean = P.mean(axis=0)
    D = P - mean
    C = D.T @ D / (m - 1)
    lam, V = np.linalg.eigh(C)
    lam, V = lam[::-1][:k], V[:, ::-1][:, :k]
    lam = np.clip(lam, 0.0, None)
    if not lam[0] > 1e-14:
        raise TrainingError(f"{name}: degenerate covariance (training patches identical)")
    # deterministic eigenvector signs: largest-magnitude entry positive
    piv = np.argmax(np.abs(V), axis=0)
    V = V * np.sign(V[piv, np.arange(V.shape[1])])
    xy = np.asarray(xy)
    zone = (float(xy[:, 0].min() - margin), float(xy[:, 0].max() + margin),
            float(xy[:, 1].min() - margin), float(xy[:, 1].max() + margin))
    return LandmarkModel(name, mean, np.ascontiguousarray(V), lam, zone, float(s), float(spacing))


def _scores(model: LandmarkModel, P: np.ndarray):
    D = np.atleast_2d(P) - model.mean_patch
    w = D @ model.eigenvectors
    R = D - w @ model.eigenvectors.T
    e = np.einsum("ij,ij->i", R, R)
    lam = model.eigenvalues
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(lam > 0, w * w / lam, np.where(w == 0, 0.0, np.inf))
    d = np.sqrt(q.sum(axis=1))
    inb = np.all(np.abs(w) <= 3.0 * np.sqrt(lam), axis=1)
    return w, e, d, inb


def score_patch(model: LandmarkModel, patch) -> PatchScore:
    data = patch.data if isinstance(patch, PatchVector) else np.asarray(patch, dtype=float)
    if data.shape != model.mean_patch.shape:
        raise ValueError(f"patch length {data.shape} does not match model {model.mean_patch.shape}")
    _, e, d, inb = _scores(model, data)
    return PatchScore(float(e[0]), float(d[0]), bool(inb[0]))


def project_patch(model: LandmarkModel, patch) -> np.ndarray:
    """Eigenspace coefficients w of a patch."""
    data = patch.data if isinstance(patch, PatchVector) else np.asarray(patch, dtype=float)
    return _scores(model, data)[0][0]


def locate_in_zone(grid: Grid2D, model: LandmarkModel):
    """Best cell (row, col) in the model's zone and its score."""
    if not np.isclose(grid.spacing, model.spacing):
        raise ValueError("grid spacing differs from the model's training spacing")
    x0, x1, y0, y1 = model.zone
    c0 = int(np.ceil((x0 - grid.origin[0]) / grid.spacing))
    c1 = int(np.floor((x1 - grid.origin[0]) / grid.spacing))
    r0 = int(np.ceil((y0 - grid.origin[1]) / grid.spacing))
    r1 = int(np.floor((y1 - grid.origin[1]) / grid.spacing))
    cells, P = _all_patches(grid, range(r0, r1 + 1), range(c0, c1 + 1), model.cells)
    if len(cells) == 0:
        raise LandmarkDetectionError(f"{model.name}: no valid patch inside the search zone")
    _, e, d, inb = _scores(model, P)
    prod = e * d
    gated = inb.any()
    if not gated:
        warnings.warn(f"{model.name}: no candidate passes the 3-sigma gate; using ungated minimum",
                      RuntimeWarning, stacklevel=2)
    cand = np.where(inb, prod, np.inf) if gated else prod
    order = np.lexsort((cells[:, 1], cells[:, 0], cand))
    best = order[0]
    return tuple(int(v) for v in cells[best]), PatchScore(float(e[best]), float(d[best]), bool(inb[best]))


def locate_salient_landmarks(grid: Grid2D, models, mesh: TriangleMesh | None = None) -> LandmarkSet:
    """Run every model over its zone; points are lifted onto `mesh` when given."""
    out = LandmarkSet()
    for model in models:
        try:
            (i, j), sc = locate_in_zone(grid, model)
        except LandmarkDetectionError:
            out.failures.append(model.name)
            continue
        out[model.name] = grid.point_of(i, j, mesh)
        out.confidence[model.name] = bool(sc.in_bounds)
    return out


# -- persistence -------------------------------------------------------------

MAGIC = b"MRLM"
FORMAT_VERSION = 1


def save_model(model: LandmarkModel, path) -> None:
    """Little-endian layout:

    magic "MRLM", u32 version, u16 name length, utf-8 name, f64 s, f64 spacing,
    u32 k, u32 dim, 4 x f64 zone, then dim f64 mean patch, k f64 eigenvalues
    and dim*k f64 eigenvectors (row-major, column i is eigenvector i).
    """
    name = model.name.encode("utf-8")
    dim, k = model.eigenvectors.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IH", FORMAT_VERSION, len(name)))
        fh.write(name)
        fh.write(struct.pack("<ddII4d", model.s, model.spacing, k, dim, *model.zone))
        fh.write(np.asarray(model.mean_patch, dtype="<f8").tobytes())
        fh.write(np.asarray(model.eigenvalues, dtype="<f8").tobytes())
        fh.write(np.asarray(model.eigenvectors, dtype="<f8").tobytes())


def load_model(path) -> LandmarkModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ValueError(f"{os.fspath(path)}: not a landmark model file")
    version, nlen = struct.unpack_from("<IH", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    off = 10
    name = buf[off:off + nlen].decode("utf-8")
    off += nlen
    s, spacing, k, dim, *zone = struct.unpack_from("<ddII4d", buf, off)
    off += struct.calcsize("<ddII4d")
    arr = np.frombuffer(buf, dtype="<f8", offset=off)
    if len(arr) != dim + k + dim * k:
        raise ValueError("truncated model file")
    mean = arr[:dim].astype(float)
    lam = arr[dim:dim + k].astype(float)
    U = arr[dim + k:].reshape(dim, k).astype(float)
    return LandmarkModel(name, mean, U, lam, tuple(zone), s, spacing)


def model_filename(name: str) -> str:
    return name.lower().replace(" ", "_") + ".model"
