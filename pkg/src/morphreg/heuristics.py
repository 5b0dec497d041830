"""Fine pose from the salient landmarks and rule-based detection of the rest.

All searches run in the fine frame: origin at the nose tip, +z toward the
viewer, +y from the mouth toward the eyes. Windows are placed relative to
landmarks that are already known.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .config import make_config
from .flatten import Grid2D
from .mesh import SALIENT_NAMES, LandmarkSet, RigidTransform, TriangleMesh, closest_point_on_surface, radius_search
from .nose import DegenerateFitError, DetectionError, fit_sphere


@dataclass(frozen=True, eq=False)
class ProfileCurve:
    """Polyline parameterised by arc length (mm)."""

    arc: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        if len(self.arc) != len(self.points):
            raise ValueError("arc and points differ in length")
        if np.any(np.diff(self.arc) <= 0):
            raise ValueError("arc positions must be strictly increasing")

    @classmethod
    def from_points(cls, points) -> "ProfileCurve":
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        step = np.linalg.norm(np.diff(p, axis=0), axis=1)
        keep = np.concatenate([[True], step > 1e-12])
        p = p[keep]
        arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))])
        return cls(arc, p)

    @property
    def length(self) -> float:
        return float(self.arc[-1] - self.arc[0])

    def at(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return np.stack([np.interp(s, self.arc, self.points[:, d]) for d in range(3)], axis=-1)


class Inflection(NamedTuple):
    position: float
    angle: float
    low_confidence: bool


def chord_angles(profile: ProfileCurve, window: float = 3.0, view=(0.0, 0.0, 1.0)):
    """Chord angle (degrees) and signed depth at every interior sample.

    Interior samples are those with a full `window` of curve on both sides.
    The depth is the sample's offset from the chord midpoint along `view`;
    negative depth means the curve is concave (a groove) there.
    """
    s = profile.arc
    inner = np.nonzero((s - window >= s[0] - 1e-12) & (s + window <= s[-1] + 1e-12))[0]
    P = profile.points[inner]
    A = profile.at(s[inner] - window) - P
    B = profile.at(s[inner] + window) - P
    cos = np.einsum("ij,ij->i", A, B) / (np.linalg.norm(A, axis=1) * np.linalg.norm(B, axis=1))
    ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    depth = -0.5 * (A + B) @ np.asarray(view, dtype=float)
    return inner, ang, depth


def inflection_minimum_angle(profile: ProfileCurve, window: float = 3.0, kind: str | None = None,
                             view=(0.0, 0.0, 1.0), flat_deg: float = 179.0) -> Inflection:
    """Sample whose chords to the points +-`window` away enclose the smallest angle.

    `kind` restricts candidates to "concave" or "convex" samples. A profile
    with no bend sharper than `flat_deg` returns its first interior sample
    with the low-confidence flag set.
    """
    if profile.length < 3 * window:
        raise ValueError(f"profile of {profile.length:.2f} mm is shorter than 3 windows ({3 * window} mm)")
    inner, ang, depth = chord_angles(profile, window, view)
    if kind == "concave":
        cand = depth < 0
    elif kind == "convex":
        cand = depth > 0
    elif kind is None:
        cand = np.ones(len(inner), dtype=bool)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    scored = np.where(cand, ang, np.inf)
    k = int(np.argmin(scored))
    if not np.isfinite(scored[k]) or scored[k] > flat_deg:
        return Inflection(float(profile.arc[inner[0]]), float(ang[0]), True)
    return Inflection(float(profile.arc[inner[k]]), float(ang[k]), False)


# -- fine pose ---------------------------------------------------------------

def fine_pose_from_six(mesh: TriangleMesh, six: LandmarkSet, origin=None):
    """Frame from the plane of the six salient landmarks.

    z is the plane normal (toward the viewer), y the in-plane direction from
    the lip-corner midpoint to the eye-corner midpoint, x = y cross z. The
    origin is `origin` (the current nose tip), or the current origin if None.
    """
    missing = [n for n in SALIENT_NAMES if n not in six]
    if missing:
        raise DetectionError(f"fine pose needs all six salient landmarks; missing {missing}")
    P = six.array(SALIENT_NAMES)
    c = P.mean(axis=0)
    _, sv, Vt = np.linalg.svd(P - c)
    if sv[1] < 1e-9 * max(sv[0], 1e-300):
        raise DegenerateFitError("salient landmarks are collinear; plane is undetermined")
    ez = Vt[2]
    if ez[2] < 0:
        ez = -ez
    eyes = P[:4].mean(axis=0)
    lips = P[4:6].mean(axis=0)
    up = eyes - lips
    up = up - np.dot(up, ez) * ez
    nrm = np.linalg.norm(up)
    if nrm < 1e-9:
        raise DegenerateFitError("eye and lip midpoints coincide in the landmark plane")
    ey = up / nrm
    ex = np.cross(ey, ez)
    Rm = np.vstack([ex, ey, ez])
    o = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)
    T = RigidTransform(Rm, -Rm @ o)
    return mesh.transformed(T), T


# -- grid helpers -------------------------------------------------------------

def column_profile(grid: Grid2D, x: float, y_from: float, y_to: float) -> ProfileCurve:
    """Vertical profile of the z map at column x between two y values."""
    i0, j = grid.cell_of(x, min(y_from, y_to))
    i1, _ = grid.cell_of(x, max(y_from, y_to))
    H, W = grid.shape
    if not 0 <= j < W:
        raise DetectionError("profile column lies outside the grid")
    i0, i1 = max(i0, 0), min(i1, H - 1)
    rows = np.arange(i0, i1 + 1)
    rows = rows[grid.valid_mask[rows, j]]
    if y_from > y_to:
        rows = rows[::-1]
    xs, ys = grid.xy_of(rows, np.full(len(rows), j))
    return ProfileCurve.from_points(np.column_stack([xs, ys, grid.z_map[rows, j]]))


def row_profile(grid: Grid2D, y: float, x_from: float, x_to: float) -> ProfileCurve:
    i, j0 = grid.cell_of(min(x_from, x_to), y)
    _, j1 = grid.cell_of(max(x_from, x_to), y)
    H, W = grid.shape
    if not 0 <= i < H:
        raise DetectionError("profile row lies outside the grid")
    j0, j1 = max(j0, 0), min(j1, W - 1)
    cols = np.arange(j0, j1 + 1)
    cols = cols[grid.valid_mask[i, cols]]
    if x_from > x_to:
        cols = cols[::-1]
    xs, ys = grid.xy_of(np.full(len(cols), i), cols)
    return ProfileCurve.from_points(np.column_stack([xs, ys, grid.z_map[i, cols]]))


def symmetry_score(z: np.ndarray, valid: np.ndarray, i: int, j: int, half: int, two_way: bool = True) -> float:
    """Negative mean |W - mirror(W)| of the (2*half+1)^2 window at (i, j).

    The left-right mirror is always used; `two_way` adds the up-down mirror.
    Windows leaving the grid or touching invalid cells score -inf.
    """
    H, W = z.shape
    if i - half < 0 or j - half < 0 or i + half >= H or j + half >= W:
        return -np.inf
    win = z[i - half:i + half + 1, j - half:j + half + 1]
    if not valid[i - half:i + half + 1, j - half:j + half + 1].all():
        return -np.inf
    score = np.mean(np.abs(win - win[:, ::-1]))
    if two_way:
        score += np.mean(np.abs(win - win[::-1, :]))
    return -float(score)


def _best_symmetry(grid: Grid2D, x_range, y_range, window_mm: float):
    half = int(round(window_mm / grid.spacing / 2))
    ia, ja = grid.cell_of(x_range[0], y_range[0])
    ib, jb = grid.cell_of(x_range[1], y_range[1])
    best, cell = -np.inf, None
    for i in range(min(ia, ib), max(ia, ib) + 1):
        for j in range(min(ja, jb), max(ja, jb) + 1):
            sc = symmetry_score(grid.z_map, grid.valid_mask, i, j, half)
            if sc > best:
                best, cell = sc, (i, j)
    if cell is None:
        raise DetectionError("no complete symmetry window in the search region")
    return cell


def _on_surface(mesh: TriangleMesh, p) -> np.ndarray:
    return closest_point_on_surface(mesh, np.asarray(p, dtype=float))[0]


def _cr_step(grid: Grid2D, x: float, y: float, band: float = 3.0) -> float:
    """Mean Cr in a band just below y minus the band just above (column x)."""
    i, j = grid.cell_of(x, y)
    nb = max(1, int(round(band / grid.spacing)))
    H = grid.shape[0]
    below = grid.cr_map[max(i - nb, 0):i, j][grid.valid_mask[max(i - nb, 0):i, j]]
    above = grid.cr_map[i + 1:min(i + 1 + nb, H), j][grid.valid_mask[i + 1:min(i + 1 + nb, H), j]]
    if len(below) == 0 or len(above) == 0:
        return 0.0
    return float(below.mean() - above.mean())


# -- individual detectors -------------------------------------------------------

def refine_nose_tip(mesh: TriangleMesh, nose_tip, radius: float = 6.0) -> np.ndarray:
    """Refit a sphere around the previous tip; return the vertex nearest its frontal pole.

    The pole is where the refit sphere reaches its largest z; the chosen
    vertex is the one whose position deviates least from it.
    """
    idx = radius_search(mesh, nose_tip, radius)
    if len(idx) < 4:
        raise DetectionError("too few vertices around the nose tip for the refit")
    fit = fit_sphere(mesh.vertices[idx])
    pole = fit.center + np.array([0.0, 0.0, fit.radius])
    d = np.linalg.norm(mesh.vertices[idx] - pole, axis=1)
    return mesh.vertices[idx[int(np.argmin(d))]].copy()


def _subnasale(grid, tip, mouth_y, window, search):
    # stop well above the mouth so the vermilion grooves cannot compete
    reach = min(search, 0.6 * (tip[1] - mouth_y))
    prof = column_profile(grid, tip[0], tip[1], tip[1] - reach)
    inf = inflection_minimum_angle(prof, window, kind="concave")
    return prof.at(inf.position), inf


def _alare(grid, tip, y_lo, y_hi, side, window, crease_deg=165.0):
    """Most lateral concave crease over the horizontal profiles between y_lo and y_hi."""
    i_lo, _ = grid.cell_of(tip[0], y_lo)
    i_hi, _ = grid.cell_of(tip[0], y_hi)
    hits = []
    for i in range(i_lo, i_hi + 1):
        _, y = grid.xy_of(i, 0)
        prof = row_profile(grid, float(y), tip[0] + side * 4.0, tip[0] + side * 32.0)
        if prof.length < 3 * window:
            continue
        inf = inflection_minimum_angle(prof, window, kind="concave")
        if inf.low_confidence or inf.angle > crease_deg:
            continue
        hits.append((abs(prof.at(inf.position)[0] - tip[0]), prof.at(inf.position), inf))
    if not hits:
        raise DetectionError("no alar crease found")
    reach = np.array([h[0] for h in hits])
    top = np.nonzero(reach >= reach.max() - 0.25 * grid.spacing)[0]
    pts = np.array([hits[k][1] for k in top])
    best = hits[top[len(top) // 2]]
    p = pts.mean(axis=0)
    return p, best[2]


def _lips(grid, sub, chin_y, window, margin):
    """Upper lip, stomion and lower lip on the mid profile below the subnasale."""
    x = sub[0]
    ys = np.arange(sub[1] - 2.0, chin_y, -grid.spacing)
    steps = np.array([_cr_step(grid, x, y) for y in ys])
    up = np.nonzero(steps > margin)[0]
    lo = np.nonzero(steps < -margin)[0]
    if len(up) == 0 or len(lo) == 0:
        raise DetectionError("lip Cr borders not found")
    # first border from above: skin above, lip below; lower border is the last lip->skin step
    k0 = up[0]
    while k0 + 1 < len(ys) and steps[k0 + 1] > steps[k0]:
        k0 += 1
    y_up = ys[k0]
    k1 = lo[-1]
    while k1 - 1 >= 0 and steps[k1 - 1] < steps[k1]:
        k1 -= 1
    y_lo = ys[k1]
    if y_lo >= y_up:
        raise DetectionError("inconsistent lip borders")
    prof = column_profile(grid, x, sub[1], chin_y)

    def refine(y0, kind, span=3.0):
        s_axis = prof.points[:, 1]
        inner, ang, depth = chord_angles(prof, window)
        yy = s_axis[inner]
        ok = (np.abs(yy - y0) <= span) & ((depth < 0) if kind == "concave" else (depth > 0))
        if not ok.any():
            return prof.at(prof.arc[np.argmin(np.abs(s_axis - y0))]), False
        k = inner[ok][np.argmin(ang[ok])]
        return prof.points[k], True

    upper, c1 = refine(y_up, "concave")
    lower, c2 = refine(y_lo, "concave")
    # stomion: sharpest groove strictly between the two borders
    inner, ang, depth = chord_angles(prof, window)
    yy = prof.points[inner, 1]
    between = (yy < upper[1] - window) & (yy > lower[1] + window) & (depth < 0)
    if between.any():
        k = inner[between][np.argmin(ang[between])]
        center, c3 = prof.points[k], True
    else:
        ym = 0.5 * (y_up + y_lo)
        center, c3 = prof.at(prof.arc[np.argmin(np.abs(prof.points[:, 1] - ym))]), False
    return (upper, c1), (center, c3), (lower, c2)


def _earlobe(grid, side, x_min, y_range, slope, tol=1.0):
    """Lowest crest of a steep rise in z along +y on one side of the face."""
    z = grid.z_map
    valid = grid.valid_mask
    dz = np.full(z.shape, np.nan)
    both = valid[1:-1] & valid[2:] & valid[:-2]
    dz[1:-1] = np.where(both, (z[2:] - z[:-2]) / (2 * grid.spacing), np.nan)
    xs, ys = np.broadcast_arrays(*grid.xy_of(np.arange(z.shape[0])[:, None], np.arange(z.shape[1])[None, :]))
    region = (side * (xs - 0.0) >= x_min) & (ys >= y_range[0]) & (ys <= y_range[1])
    with np.errstate(invalid="ignore"):
        steep = region & (dz > slope)
    if not steep.any():
        raise DetectionError("no steep ear rim in the search region")
    crest = []
    for j in np.unique(np.nonzero(steep)[1]):
        i = int(np.nonzero(steep[:, j])[0].min())
        while i + 1 < z.shape[0] and steep[i + 1, j]:
            i += 1
        # crest: halfway between the last steep cell and the first flat one
        crest.append((ys[i, j] + 0.5 * grid.spacing, xs[i, j]))
    crest = np.array(crest)
    # the crest is flat around its lowest point; average the columns near it
    low = crest[:, 0] <= crest[:, 0].min() + tol
    x, y = crest[low, 1].mean(), crest[low, 0].mean()
    return np.array([x, y, grid_height(grid, x, y)])


def grid_height(grid: Grid2D, x: float, y: float) -> float:
    """Bilinear z-map value at (x, y) from the valid cells around it."""
    fx = (x - grid.origin[0]) / grid.spacing
    fy = (y - grid.origin[1]) / grid.spacing
    j0, i0 = int(np.floor(fx)), int(np.floor(fy))
    tx, ty = fx - j0, fy - i0
    H, W = grid.shape
    acc = wsum = 0.0
    for di, dj, w in ((0, 0, (1 - tx) * (1 - ty)), (0, 1, tx * (1 - ty)), (1, 0, (1 - tx) * ty), (1, 1, tx * ty)):
        i, j = i0 + di, j0 + dj
        if 0 <= i < H and 0 <= j < W and grid.valid_mask[i, j] and w > 0:
            acc += w * grid.z_map[i, j]
            wsum += w
    if wsum == 0:
        raise DetectionError("no valid depth around the requested position")
    return acc / wsum


def locate_heuristic_landmarks(mesh: TriangleMesh, grid: Grid2D, six: LandmarkSet, nose_tip,
                               cfg: dict | None = None) -> LandmarkSet:
    """Refined nose tip plus the ten rule-based landmarks (fine frame in and out).

    Landmarks that cannot be found are listed in `failures`; weak detections
    carry a False confidence flag.
    """
    cfg = cfg or make_config()
    h = cfg["heuristics"]
    win = h["angle_window_mm"]
    out = LandmarkSet()
    try:
        tip = refine_nose_tip(mesh, np.asarray(nose_tip, dtype=float), h["nose_refit_mm"])
    except (DetectionError, DegenerateFitError):
        tip = np.asarray(nose_tip, dtype=float)
        out.confidence["Nose Tip"] = False
    out["Nose Tip"] = tip

    eyes = six.array(["Right Eye Inner Corner", "Left Eye Inner Corner"]).mean(axis=0)
    outer_x = max(abs(six["Right Eye Outer Corner"][0] - tip[0]), abs(six["Left Eye Outer Corner"][0] - tip[0]))
    mouth = six.array(["Right Lip Corner", "Left Lip Corner"]).mean(axis=0)

    def attempt(names, fn):
        try:
            res = fn()
        except (DetectionError, ValueError):
            out.failures.extend(names)
            return
        for n, (p, conf) in zip(names, res):
            out[n] = _on_surface(mesh, p)
            if not conf:
                out.confidence[n] = False

    sub_holder = {}

    def sub_fn():
        p, inf = _subnasale(grid, tip, mouth[1], win, h["subnasale_search_mm"])
        sub_holder["p"] = p
        return [(p, not inf.low_confidence)]

    attempt(["Subnasale"], sub_fn)
    sub = sub_holder.get("p", np.array([tip[0], mouth[1] + 0.6 * (tip[1] - mouth[1]), tip[2]]))

    for side, name in ((-1, "Right Alare"), (+1, "Left Alare")):
        def ala_fn(side=side):
            p, inf = _alare(grid, tip, sub[1], tip[1], side, win)
            return [(p, not inf.low_confidence)]
        attempt([name], ala_fn)

    chin_y = mouth[1] - 30.0
    lip_holder = {}

    def lips_fn():
        res = _lips(grid, sub, mouth[1] - 20.0, win, h["cr_margin"])
        lip_holder["lower"] = res[2][0]
        return res

    attempt(["Upper Lip", "Lip Center", "Lower Lip"], lips_fn)
    lower = lip_holder.get("lower", np.array([tip[0], mouth[1] - 10.0, 0.0]))

    sw = h["symmetry_window_mm"]

    def nasion_fn():
        i, j = _best_symmetry(grid, (tip[0] - 4.0, tip[0] + 4.0), (eyes[1] - 8.0, eyes[1] + 14.0), sw)
        return [(grid.point_of(i, j), True)]

    def pog_fn():
        i, j = _best_symmetry(grid, (tip[0] - 4.0, tip[0] + 4.0), (chin_y - 10.0, lower[1] - 5.0), sw)
        return [(grid.point_of(i, j), True)]

    attempt(["Nasion"], nasion_fn)
    attempt(["Pogonion"], pog_fn)

    for side, name in ((-1, "Right Earlobe tip"), (+1, "Left Earlobe tip")):
        def ear_fn(side=side):
            return [(_earlobe(grid, side, outer_x + 5.0, (mouth[1] - 5.0, eyes[1]), h["earlobe_slope"]), True)]
        attempt([name], ear_fn)
    return out
