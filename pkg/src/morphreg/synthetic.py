"""Seeded parametric face-like meshes with exact ground-truth landmarks.

The surface is a height field over a jittered xy grid: a base ellipsoid with
additive sockets, brows, glabella and chin, a nose body, lips and ear
plateaus, unioned (pointwise max) with a spherical nose tip and two alar
ellipsoids. Unions leave sharp concave creases, which is where subnasale,
alares and the vermilion borders sit.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .flatten import rgb_to_cr
from .mesh import LandmarkSet, RigidTransform, TriangleMesh, rotation_matrix

TRAIN_SEEDS = tuple(range(1000, 1080))
TEST_SEEDS = tuple(range(2000, 2050))

SKIN = (200.0, 160.0, 140.0)
LIP = (180.0, 80.0, 90.0)
BROW = (85.0, 62.0, 50.0)

_RANGES = {
    "scale": (0.85, 1.15),
    "nose_radius": (9.0, 15.0),
    "nose_height": (17.0, 26.0),
    "eye_depth": (2.0, 9.0),
    "mouth_width": (38.0, 60.0),
    "cheek_width": (65.0, 85.0),
    "asymmetry": (0.0, 2.0),
    "noise": (0.0, 0.5),
}


@dataclass(frozen=True)
class FaceParams:
    seed: int = 0
    scale: float = 1.0
    nose_radius: float = 12.0
    nose_height: float = 21.5
    eye_depth: float = 5.0
    mouth_width: float = 50.0
    cheek_width: float = 75.0
    asymmetry: float = 0.0
    noise: float = 0.0
    skin: tuple = SKIN
    lip: tuple = LIP
    brow: tuple = BROW
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    ears: bool = True
    spacing: float = 0.9

    def validate(self) -> None:
        for name, (lo, hi) in _RANGES.items():
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")
        for ang in (self.yaw, self.pitch, self.roll):
            if abs(ang) > 45:
                raise ValueError("pose offsets are limited to 45 degrees")
        if not 0.5 <= self.spacing <= 2.0:
            raise ValueError("spacing must lie in [0.5, 2.0] mm")
        for pal in (self.skin, self.lip, self.brow):
            if len(pal) != 3 or min(pal) < 0 or max(pal) > 255:
                raise ValueError("palette colors must be RGB triples in [0, 255]")


def random_params(seed: int, pose: float = 12.0, noise: float = 0.05, **overrides) -> FaceParams:
    """Draw a plausible face from `seed` with pose offsets up to +-`pose` degrees."""
    rng = np.random.default_rng(seed)
    u = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731
    skin = tuple(float(np.clip(c + rng.normal(0, 8), 0, 255)) for c in SKIN)
    lip = tuple(float(np.clip(c + rng.normal(0, 6), 0, 255)) for c in LIP)
    p = FaceParams(
        seed=seed,
        scale=u(0.94, 1.06),
        nose_radius=u(11.0, 13.0),
        nose_height=u(20.0, 23.0),
        eye_depth=u(4.0, 6.5),
        mouth_width=u(45.0, 54.0),
        cheek_width=u(71.0, 79.0),
        asymmetry=u(0.0, 0.8),
        noise=noise,
        skin=skin,
        lip=lip,
        yaw=u(-pose, pose),
        pitch=u(-pose, pose),
        roll=u(-pose, pose),
    )
    return dataclasses.replace(p, **overrides)


def _lip_raw(v):
    t = np.clip(v / 0.4, 0.0, 1.0)
    return t * t * (3 - 2 * t) * (1 - v)


_LIP_PEAK = float(np.max(_lip_raw(np.linspace(0.0, 1.0, 10001))))


def _lip_shape(v):
    """Lip cross-section over v in [0, 1]: rounded groove at the slit (v=0), crease at the border (v=1)."""
    return _lip_raw(np.clip(v, 0.0, 1.0)) / _LIP_PEAK


class FaceModel:
    """Analytic height field and texture for one parameter set (generator frame)."""

    def __init__(self, p: FaceParams):
        s = p.scale
        self.p = p
        self.A = p.cheek_width * s
        self.B = 105.0 * s
        self.C = 85.0 * s
        a = p.asymmetry
        # feature layout; "sign" +1 is the subject's left (+x)
        self.eye_y = 28.0 * s
        self.eye_in = 16.0 * s
        self.eye_out = 45.0 * s
        self.eye_h_up = 4.5 * s
        self.eye_h_lo = 3.5 * s
        self.tip_y = -8.0 * s
        self.nasion_y = 30.0 * s
        self.sub_y = self.tip_y - 15.0 * s
        self.mouth_y = -40.0 * s
        self.mouth_half = 0.5 * p.mouth_width * s
        self.lip_up = 8.0 * s
        self.lip_lo = 9.0 * s
        self.chin_y = -72.0 * s
        self.ear_x = self.A - 17.0 * s
        self.ear_y = -5.0 * s
        self.ear_w = 12.0 * s
        self.ear_ramp = 10.0 * s
        self.ear_h = 24.0 * s
        self.ear_d = 0.12
        self.ala_x = 12.0 * s
        self.ala_y = self.tip_y - 7.0 * s
        # left/right offsets for asymmetry
        self.shift = {+1: np.array([0.6 * a, 0.4 * a]), -1: np.array([-0.2 * a, -0.3 * a])}
        self.rn = p.nose_radius
        self.H = p.nose_height
        self.tip_c = self.smooth(0.0, self.tip_y) + self.H - self.rn

    # -- height components --------------------------------------------------

    def ellipsoid(self, x, y):
        q = 1.0 - (x / self.A) ** 2 - (y / self.B) ** 2
        return self.C * np.sqrt(np.clip(q, 1e-6, None))

    def smooth(self, x, y):
        """Base ellipsoid plus broad additive relief (sockets, brows, glabella, chin)."""
        s = self.p.scale
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        z = self.ellipsoid(x, y)
        for sg in (+1, -1):
            dx, dy = self.shift[sg]
            cx = sg * 0.5 * (self.eye_in + self.eye_out) + dx
            cy = self.eye_y + dy
            z = z - self.p.eye_depth * np.exp(-((x - cx) ** 2 / (2 * (13 * s) ** 2) + (y - cy) ** 2 / (2 * (9 * s) ** 2)))
            z = z + 3.0 * np.exp(-((x - cx) ** 2 / (2 * (15 * s) ** 2) + (y - cy - 14 * s) ** 2 / (2 * (4 * s) ** 2)))
        z = z + 5.0 * np.exp(-(x ** 2 / (2 * (10 * s) ** 2) + (y - self.nasion_y - 11 * s) ** 2 / (2 * (7 * s) ** 2)))
        z = z + 7.0 * np.exp(-(x ** 2 / (2 * (13 * s) ** 2) + (y - self.chin_y) ** 2 / (2 * (9 * s) ** 2)))
        return z

    def nose_body(self, x, y):
        s = self.p.scale
        Hm = self.H - 0.5
        up = np.clip((self.nasion_y - y) / (self.nasion_y - self.tip_y), 0.0, 1.0) ** 1.3
        lo = np.clip((y - self.sub_y) / (self.tip_y - self.sub_y), 0.0, 1.0) ** 0.35
        h = np.where(y >= self.tip_y, Hm * up, Hm * lo)
        t = np.clip((y - self.tip_y) / (self.nasion_y - self.tip_y), 0.0, 1.0)
        w = np.where(y >= self.tip_y, (15.0 - 6.0 * t) * s, 15.0 * s)
        lat = np.sqrt(np.clip(1.0 - (x / w) ** 2, 0.0, None))
        return h * lat

    def lips(self, x, y):
        t = x / self.mouth_half
        w = np.clip(1.0 - t ** 2, 0.0, None)
        out = np.zeros(np.broadcast(x, y).shape)
        for hgt, th, sg in ((self.lip_up, 4.0 * self.p.scale, +1), (self.lip_lo, 4.5 * self.p.scale, -1)):
            extent = hgt * w ** 0.7
            v = np.divide(sg * (y - self.mouth_y), extent, out=np.full(out.shape, -1.0), where=extent > 0)
            inside = (v > 0) & (v < 1)
            bump = th * _lip_shape(v) * np.sqrt(w)
            out = out + np.where(inside, bump, 0.0)
        return out

    def _eye_frame(self, sg):
        dx, dy = self.shift[sg]
        a = np.array([sg * self.eye_in + dx, self.eye_y + dy])
        b = np.array([sg * self.eye_out + dx, self.eye_y + dy + 2.0 * self.p.scale])
        return a, b

    def _eye_coords(self, x, y, sg):
        """(t along inner->outer corner in [0,1], signed normalised lid offset)."""
        a, b = self._eye_frame(sg)
        d = b - a
        L = np.linalg.norm(d)
        u = d / L
        nrm = np.array([-u[1], u[0]]) * (1 if sg > 0 else -1)
        rx, ry = x - a[0], y - a[1]
        t = (rx * u[0] + ry * u[1]) / L
        o = rx * nrm[0] + ry * nrm[1]
        if sg < 0:
            o = -o
        env = np.sin(np.pi * np.clip(t, 0, 1)) ** 0.8
        up = o >= 0
        half = np.where(up, self.eye_h_up, self.eye_h_lo) * env
        v = np.divide(np.abs(o), half, out=np.full(np.shape(o), 2.0), where=half > 0)
        return t, v

    def fissure(self, x, y):
        out = np.zeros(np.broadcast(x, y).shape)
        for sg in (+1, -1):
            t, v = self._eye_coords(x, y, sg)
            inside = (t > 0) & (t < 1) & (v < 1)
            depth = 2.5 * self.p.scale * np.sqrt(np.clip(1 - v ** 2, 0, None)) * np.sin(np.pi * np.clip(t, 0, 1)) ** 0.5
            out = out + np.where(inside, depth, 0.0)
        return out

    def ear(self, x, y):
        if not self.p.ears:
            return np.zeros(np.broadcast(x, y).shape)
        out = np.zeros(np.broadcast(x, y).shape)
        for sg in (+1, -1):
            rho = np.sqrt(((x - sg * self.ear_x) / self.ear_w) ** 2 + ((y - self.ear_y) / self.ear_h) ** 2)
            u = np.clip((1.0 - rho) / self.ear_d, 0.0, 1.0)
            # gentle rise on the inner side so the ear never hides surface from the head centre
            q = np.clip((sg * x - (self.ear_x - self.ear_w)) / self.ear_ramp, 0.0, 1.0)
            out = out + 6.0 * self.p.scale * u * u * (3 - 2 * u) * q * q * (3 - 2 * q)
        return out

    def tip_sphere(self, x, y):
        r2 = x ** 2 + (y - self.tip_y) ** 2
        return np.where(r2 < self.rn ** 2, self.tip_c + np.sqrt(np.clip(self.rn ** 2 - r2, 0, None)), -np.inf)

    def alae(self, x, y):
        s = self.p.scale
        ax, ay, az = 7.0 * s, 6.5 * s, 11.0 * s
        out = np.full(np.broadcast(x, y).shape, -np.inf)
        for sg in (+1, -1):
            cx = sg * self.ala_x
            zc = self.smooth(cx, self.ala_y) - 3.0 * s
            q = 1 - ((x - cx) / ax) ** 2 - ((y - self.ala_y) / ay) ** 2
            out = np.maximum(out, np.where(q > 0, zc + az * np.sqrt(np.clip(q, 0, None)), -np.inf))
        return out

    def height(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        z = self.smooth(x, y) + self.nose_body(x, y) + self.lips(x, y) - self.fissure(x, y) + self.ear(x, y)
        return np.maximum(np.maximum(z, self.tip_sphere(x, y)), self.alae(x, y))

    # -- texture --------------------------------------------------------------

    def color(self, x, y):
        p = self.p
        s = p.scale
        shape = np.broadcast(x, y).shape
        rgb = np.broadcast_to(np.asarray(p.skin, dtype=float), shape + (3,)).copy()
        # soft shading variation over the cheeks
        rgb *= (1.0 - 0.04 * np.exp(-((np.abs(x) - 35 * s) ** 2 + (y + 10 * s) ** 2) / (2 * (15 * s) ** 2)))[..., None]
        for sg in (+1, -1):
            dx, dy = self.shift[sg]
            cx = sg * 0.5 * (self.eye_in + self.eye_out) + dx
            brow = ((x - cx) / (17 * s)) ** 2 + ((y - self.eye_y - dy - 13 * s) / (3.2 * s)) ** 2 < 1
            rgb[brow] = p.brow
            t, v = self._eye_coords(x, y, sg)
            eye = (t > 0) & (t < 1) & (v < 1)
            rgb[eye] = (235.0, 232.0, 226.0)
            a, b = self._eye_frame(sg)
            mid = 0.5 * (a + b)
            iris = eye & ((x - mid[0]) ** 2 + (y - mid[1]) ** 2 < (4.0 * s) ** 2)
            rgb[iris] = (70.0, 52.0, 40.0)
        lip = self.lips(x, y) > 0
        tt = np.clip(1 - (x / self.mouth_half) ** 2, 0, None)
        in_mouth = (np.abs(x) < self.mouth_half) & (y < self.mouth_y + self.lip_up * tt ** 0.7) & (y > self.mouth_y - self.lip_lo * tt ** 0.7)
        rgb[lip | in_mouth] = p.lip
        slit = in_mouth & (np.abs(y - self.mouth_y) < 0.6 * s)
        rgb[slit] = (90.0, 40.0, 45.0)
        return rgb

    # -- landmarks ------------------------------------------------------------

    def _crease_x(self, y, x_in, x_out, sign):
        """x where the alar ellipsoid stops dominating along a horizontal line."""
        def ala_wins(x):
            rest = self.smooth(x, y) + self.nose_body(x, y)
            return self.alae(x, y) > rest
        lo, hi = x_in, x_out  # ala_wins(lo) true, ala_wins(hi) false
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if ala_wins(sign * mid):
                lo = mid
            else:
                hi = mid
        return sign * 0.5 * (lo + hi)

    def _profile_extremum(self, y_lo, y_hi, kind):
        ys = np.linspace(y_lo, y_hi, 20001)
        zs = self.height(np.zeros_like(ys), ys)
        k = int(np.argmin(zs) if kind == "min" else np.argmax(zs))
        return ys[k]

    def landmarks(self) -> LandmarkSet:
        s = self.p.scale
        pts = {}

        def put(name, x, y):
            pts[name] = (x, y, float(self.height(np.array(x), np.array(y))))

        for sg, side in ((-1, "Right"), (+1, "Left")):
            a, b = self._eye_frame(sg)
            put(f"{side} Eye Inner Corner", *a)
            put(f"{side} Eye Outer Corner", *b)
            put(f"{side} Lip Corner", sg * self.mouth_half, self.mouth_y)
            ax = 7.0 * s
            put(f"{side} Alare", self._crease_x(self.ala_y, self.ala_x, self.ala_x + 1.5 * ax, sg), self.ala_y)
            if self.p.ears:
                put(f"{side} Earlobe tip", sg * self.ear_x, self.ear_y - self.ear_h * (1 - self.ear_d))
        pts["Nose Tip"] = (0.0, self.tip_y, self.tip_c + self.rn)
        put("Nasion", 0.0, self._profile_extremum(self.nasion_y - 12 * s, self.nasion_y + 8 * s, "min"))
        put("Subnasale", 0.0, self.sub_y)
        put("Upper Lip", 0.0, self.mouth_y + self.lip_up)
        put("Lip Center", 0.0, self.mouth_y)
        put("Lower Lip", 0.0, self.mouth_y - self.lip_lo)
        put("Pogonion", 0.0, self._profile_extremum(self.chin_y - 12 * s, self.chin_y + 12 * s, "max"))
        return LandmarkSet(pts)

    # -- sampling -------------------------------------------------------------

    def footprint(self, x, y):
        inside = (x / (0.95 * self.A)) ** 2 + (y / (0.93 * self.B)) ** 2 <= 1.0
        if not self.p.ears:
            # notch out the lobe and most of the ear, clear of the eye-corner regions
            band = (y > self.ear_y - self.ear_h - 4.0 * self.p.scale) & (y < self.eye_y - 14.0 * self.p.scale)
            inside &= ~band | (np.abs(x) < self.ear_x - 2.0 * self.p.scale)
        return inside


def generate_face(params: FaceParams) -> tuple[TriangleMesh, LandmarkSet]:
    """Mesh with per-vertex colors and the matching ground-truth landmarks."""
    params.validate()
    model = FaceModel(params)
    rng = np.random.default_rng(params.seed)
    h = params.spacing * params.scale
    # grid aligned so the nose apex is a node
    xs = np.arange(-np.ceil(model.A / h), np.ceil(model.A / h) + 1) * h
    ys = model.tip_y + np.arange(-np.ceil((model.B - model.tip_y) / h), np.ceil((model.B + model.tip_y) / h) + 1) * h
    X, Y = np.meshgrid(xs, ys)
    jit = rng.uniform(-0.25 * h, 0.25 * h, size=X.shape + (2,))
    apex = (np.abs(X) < 1e-9) & (np.abs(Y - model.tip_y) < 1e-9)
    jit[apex] = 0.0
    X = X + jit[..., 0]
    Y = Y + jit[..., 1]
    inside = model.footprint(X, Y)
    ny, nx = X.shape
    ids = np.full(X.shape, -1, dtype=np.int64)
    ids[inside] = np.arange(inside.sum())
    x, y = X[inside], Y[inside]
    z = model.height(x, y)
    verts = np.column_stack([x, y, z])
    i00, i10 = ids[:-1, :-1], ids[:-1, 1:]
    i01, i11 = ids[1:, :-1], ids[1:, 1:]
    cell = (i00 >= 0) & (i10 >= 0) & (i01 >= 0) & (i11 >= 0)
    tris = np.concatenate([
        np.stack([i00[cell], i10[cell], i11[cell]], 1),
        np.stack([i00[cell], i11[cell], i01[cell]], 1),
    ])
    tris = tris[np.lexsort((tris[:, 2], tris[:, 1], tris[:, 0]))]
    rgb = model.color(x, y)
    rgb = rgb + rng.normal(0.0, 2.0, size=rgb.shape)
    rgb = np.clip(np.round(rgb), 0, 255)
    if params.noise > 0:
        verts = verts + rng.normal(0.0, params.noise, size=verts.shape)
    # keep referenced vertices only
    used = np.zeros(len(verts), dtype=bool)
    used[tris.ravel()] = True
    remap = np.cumsum(used) - 1
    verts, rgb, tris = verts[used], rgb[used], remap[tris]
    lms = model.landmarks()
    R = rotation_matrix(params.yaw, params.pitch, params.roll)
    T = RigidTransform(R, np.zeros(3))
    mesh = TriangleMesh(T.apply(verts), tris, rgb)
    return mesh, lms.transformed(T)


def generate_corpus(seeds, **kw):
    """Yield (seed, mesh, landmarks) for `random_params(seed, **kw)`."""
    for seed in seeds:
        mesh, lms = generate_face(random_params(seed, **kw))
        yield seed, mesh, lms


def lip_cr_contrast(params: FaceParams) -> float:
    """Cr difference between the lip and the skin palette colors."""
    return float(rgb_to_cr(*params.lip) - rgb_to_cr(*params.skin))
