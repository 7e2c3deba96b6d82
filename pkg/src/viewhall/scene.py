"""Procedural rooms rendered by raycasting.

A room is a set of axis-aligned rectangles (floor, ceiling, walls, door and
window panels, furniture box faces).  A pinhole camera casts one ray per
pixel; the label is the class of the nearest hit and the color is the class
scene's color for that class times a value-noise texture times Lambertian shading.  Source and
target frames share position and yaw and differ only in pitch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

CLASS_NAMES = ("floor", "ceiling", "wall", "furniture", "door", "window")
NUM_CLASSES = len(CLASS_NAMES)
FLOOR, CEILING, WALL, FURNITURE, DOOR, WINDOW = range(NUM_CLASSES)

# Reference albedo per class; generated scenes draw their own per-class colors
# (see ``scene_colors``) so that color alone never identifies a class.
# Colors are saturated and textures vary in hue: near-gray surfaces are unchanged by hue rotation and
# channel permutation, which would let a view network copy them from its
# query image instead of moving them from the source view.
BASE_COLORS = np.array([
    [0.80, 0.45, 0.30],   # floor
    [0.80, 0.45, 0.30],   # ceiling
    [0.50, 0.78, 0.40],   # wall
    [0.30, 0.40, 0.85],   # furniture
    [0.72, 0.35, 0.70],   # door
    [0.40, 0.80, 0.85],   # window
], dtype=np.float64)

SATURATION_RANGE = (0.45, 0.75)
VALUE_RANGE = (0.65, 0.95)
HUE_VARIATION = 0.06       # texture hue excursion, turns
TEXTURE_RANGE = (0.55, 1.0)
AMBIENT = 0.45
LIGHT_DIR = np.array([0.45, 0.0, 0.89]) / np.linalg.norm([0.45, 0.0, 0.89])
DEFAULT_VFOV = math.radians(100.0)
PANEL_OFFSET = 0.01
DEPTH_TOL = 1e-3


class RenderError(RuntimeError):
    """A primary ray escaped the room (the scene is not closed)."""


@dataclass(frozen=True)
class Rect:
    """Rectangle with normal along ``axis`` at ``coord``; bounds on the other two axes in increasing order."""

    axis: int
    coord: float
    lo: tuple[float, float]
    hi: tuple[float, float]
    cls: int
    texture_seed: int


@dataclass(frozen=True)
class Scene:
    seed: int
    extents: tuple[float, float, float]       # x, y (height), z in meters
    surfaces: tuple[Rect, ...]
    boxes: tuple[tuple[tuple[float, float, float], tuple[float, float, float]], ...] = ()
    class_colors: tuple[tuple[float, float, float], ...] | None = None

    def colors(self) -> np.ndarray:
        return BASE_COLORS if self.class_colors is None else np.asarray(self.class_colors, dtype=np.float64)

    def classes_present(self) -> set[int]:
        return {s.cls for s in self.surfaces}


@dataclass(frozen=True)
class CameraState:
    position: tuple[float, float, float]
    yaw: float
    pitch: float = 0.0          # radians, positive looks down
    vfov: float = DEFAULT_VFOV

    def with_pitch(self, pitch: float) -> "CameraState":
        return replace(self, pitch=pitch)


@dataclass
class Correspondence:
    """Per target pixel: nearest source pixel and whether the target point is visible there."""

    src_row: np.ndarray
    src_col: np.ndarray
    visible: np.ndarray

    @property
    def visible_fraction(self) -> float:
        return float(self.visible.mean())


@dataclass
class FramePair:
    x_s: np.ndarray
    x_t: np.ndarray
    y_s: np.ndarray
    y_t: np.ndarray
    pitch_delta: float
    camera: CameraState
    correspondence: Correspondence | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def _wall_rect(wall: int, extents, a0: float, a1: float, y0: float, y1: float, offset: float,
               cls: int, tex: int) -> Rect:
    """Panel on wall ``wall`` (0: x=0, 1: x=X, 2: z=0, 3: z=Z) spanning [a0, a1] along the wall."""
    x_ext, _, z_ext = extents
    if wall == 0:
        return Rect(0, offset, (y0, a0), (y1, a1), cls, tex)
    if wall == 1:
        return Rect(0, x_ext - offset, (y0, a0), (y1, a1), cls, tex)
    if wall == 2:
        return Rect(2, offset, (a0, y0), (a1, y1), cls, tex)
    return Rect(2, z_ext - offset, (a0, y0), (a1, y1), cls, tex)


def _place_panels(rng, extents, count, width_range, height_range, bottom_range, cls, taken, surfaces):
    x_ext, y_ext, z_ext = extents
    placed = 0
    for _ in range(50 * count):
        if placed == count:
            break
        wall = int(rng.integers(4))
        length = z_ext if wall < 2 else x_ext
        width = rng.uniform(*width_range)
        height = rng.uniform(*height_range)
        bottom = rng.uniform(*bottom_range)
        if width > length - 0.4 or bottom + height > y_ext - 0.1:
            continue
        a0 = rng.uniform(0.2, length - 0.2 - width)
        a1 = a0 + width
        if any(w == wall and a0 < t1 + 0.1 and t0 - 0.1 < a1 for w, t0, t1 in taken):
            continue
        taken.append((wall, a0, a1))
        surfaces.append(_wall_rect(wall, extents, a0, a1, bottom, bottom + height,
                                   PANEL_OFFSET, cls, int(rng.integers(2**31))))
        placed += 1
    return placed


def generate_scene(seed: int) -> Scene:
    """Random room: 4–8 m per side, 2–6 furniture boxes, at least one door and one window."""
    rng = np.random.default_rng(seed)
    x_ext, z_ext = rng.uniform(4.0, 8.0, size=2)
    y_ext = rng.uniform(2.6, 3.2)
    extents = (float(x_ext), float(y_ext), float(z_ext))

    def tex() -> int:
        return int(rng.integers(2**31))

    surfaces = [
        Rect(1, 0.0, (0.0, 0.0), (x_ext, z_ext), FLOOR, tex()),
        Rect(1, y_ext, (0.0, 0.0), (x_ext, z_ext), CEILING, tex()),
    ]
    for wall in range(4):
        length = z_ext if wall < 2 else x_ext
        surfaces.append(_wall_rect(wall, extents, 0.0, length, 0.0, y_ext, 0.0, WALL, tex()))

    taken: list[tuple[int, float, float]] = []
    n_doors = int(rng.integers(1, 3))
    n_windows = int(rng.integers(1, 3))
    if _place_panels(rng, extents, n_doors, (0.8, 1.0), (2.0, 2.2), (0.0, 0.0), DOOR, taken, surfaces) < 1:
        raise AssertionError("door placement failed")  # unreachable for rooms >= 4 m
    if _place_panels(rng, extents, n_windows, (0.8, 1.6), (0.8, 1.2), (0.8, 1.1), WINDOW, taken, surfaces) < 1:
        raise AssertionError("window placement failed")

    boxes = []
    for _ in range(int(rng.integers(2, 7))):
        sx, sz = rng.uniform(0.4, 1.4, size=2)
        sy = rng.uniform(0.4, 1.0)
        x0 = rng.uniform(0.05, x_ext - 0.05 - sx)
        z0 = rng.uniform(0.05, z_ext - 0.05 - sz)
        lo, hi = (x0, 0.0, z0), (x0 + sx, sy, z0 + sz)
        boxes.append((tuple(map(float, lo)), tuple(map(float, hi))))
        seed_box = tex()
        surfaces += [
            Rect(1, hi[1], (lo[0], lo[2]), (hi[0], hi[2]), FURNITURE, seed_box),
            Rect(0, lo[0], (0.0, lo[2]), (hi[1], hi[2]), FURNITURE, seed_box + 1),
            Rect(0, hi[0], (0.0, lo[2]), (hi[1], hi[2]), FURNITURE, seed_box + 2),
            Rect(2, lo[2], (lo[0], 0.0), (hi[0], hi[1]), FURNITURE, seed_box + 3),
            Rect(2, hi[2], (lo[0], 0.0), (hi[0], hi[1]), FURNITURE, seed_box + 4),
        ]
    surfaces = [Rect(s.axis, float(s.coord), tuple(map(float, s.lo)), tuple(map(float, s.hi)), s.cls,
                     s.texture_seed) for s in surfaces]
    return Scene(seed=int(seed), extents=extents, surfaces=tuple(surfaces), boxes=tuple(boxes),
                 class_colors=scene_colors(seed))


def scene_colors(seed: int) -> tuple[tuple[float, float, float], ...]:
    """Random hue per class, saturation and value from fixed ranges."""
    rng = np.random.default_rng([int(seed), 1])
    hsv = np.column_stack([rng.random(NUM_CLASSES), rng.uniform(*SATURATION_RANGE, NUM_CLASSES),
                           rng.uniform(*VALUE_RANGE, NUM_CLASSES)])
    return tuple(tuple(float(c) for c in row) for row in hsv_to_rgb(hsv))


def sample_camera(scene: Scene, rng: np.random.Generator, vfov: float = DEFAULT_VFOV,
                  clearance: float = 0.3, min_view_depth: float = 1.5) -> CameraState:
    """Uniform pose in free space at 1.2–1.7 m height, pitch 0.

    Poses whose optical axis hits a surface closer than ``min_view_depth``
    are redrawn so frames are not filled by a single wall.
    """
    x_ext, _, z_ext = scene.extents
    for _ in range(1000):
        x = rng.uniform(0.5, x_ext - 0.5)
        z = rng.uniform(0.5, z_ext - 0.5)
        if any(lo[0] - clearance < x < hi[0] + clearance and lo[2] - clearance < z < hi[2] + clearance
               for lo, hi in scene.boxes):
            continue
        y = rng.uniform(1.2, 1.7)
        yaw = rng.uniform(0.0, 2.0 * math.pi)
        cam = CameraState((float(x), float(y), float(z)), float(yaw), 0.0, vfov)
        dist, _ = cast(scene, np.array(cam.position), camera_basis(cam)[2][None])
        if dist[0] < min_view_depth:
            continue
        return cam
    raise RuntimeError(f"no free camera position found in scene {scene.seed}")


# ---------------------------------------------------------------------------
# raycasting
# ---------------------------------------------------------------------------

_OTHER_AXES = ((1, 2), (0, 2), (0, 1))


def camera_basis(cam: CameraState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(right, down, forward) unit vectors in world coordinates (y is up)."""
    cy, sy = math.cos(cam.yaw), math.sin(cam.yaw)
    cp, sp = math.cos(cam.pitch), math.sin(cam.pitch)
    forward = np.array([sy * cp, -sp, cy * cp])
    right = np.array([-cy, 0.0, sy])
    down = np.cross(forward, right)
    return right, down, forward


def focal_length(cam: CameraState, h: int) -> float:
    return (h / 2.0) / math.tan(cam.vfov / 2.0)


def primary_rays(cam: CameraState, h: int, w: int) -> np.ndarray:
    """Unnormalised ray directions through pixel centers, shape (h*w, 3), row-major."""
    right, down, forward = camera_basis(cam)
    f = focal_length(cam, h)
    xs = (np.arange(w) + 0.5 - w / 2.0) / f
    ys = (np.arange(h) + 0.5 - h / 2.0) / f
    gx, gy = np.meshgrid(xs, ys)
    d = forward[None] + gx.reshape(-1, 1) * right[None] + gy.reshape(-1, 1) * down[None]
    return d / np.linalg.norm(d, axis=1, keepdims=True)


class _Packed:
    def __init__(self, scene: Scene):
        s = scene.surfaces
        self.axis = np.array([r.axis for r in s])
        self.coord = np.array([r.coord for r in s])
        self.lo = np.array([r.lo for r in s])
        self.hi = np.array([r.hi for r in s])
        self.cls = np.array([r.cls for r in s])
        self.other = np.array([_OTHER_AXES[a] for a in self.axis])


_PACK_CACHE: dict[int, tuple[Scene, _Packed]] = {}


def _packed(scene: Scene) -> _Packed:
    hit = _PACK_CACHE.get(id(scene))
    if hit is not None and hit[0] is scene:
        return hit[1]
    p = _Packed(scene)
    if len(_PACK_CACHE) > 64:
        _PACK_CACHE.clear()
    _PACK_CACHE[id(scene)] = (scene, p)
    return p


def cast(scene: Scene, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit distance and surface index per ray."""
    pk = _packed(scene)
    o = np.asarray(origin, dtype=np.float64)
    dn = dirs[:, pk.axis]                                    # (N, S)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (pk.coord[None] - o[pk.axis][None]) / dn
    p0 = o[pk.other[:, 0]][None] + t * dirs[:, pk.other[:, 0]]
    p1 = o[pk.other[:, 1]][None] + t * dirs[:, pk.other[:, 1]]
    eps = 1e-9
    ok = (np.isfinite(t) & (t > 1e-6)
          & (p0 >= pk.lo[None, :, 0] - eps) & (p0 <= pk.hi[None, :, 0] + eps)
          & (p1 >= pk.lo[None, :, 1] - eps) & (p1 <= pk.hi[None, :, 1] + eps))
    t = np.where(ok, t, np.inf)
    idx = np.argmin(t, axis=1)
    dist = t[np.arange(t.shape[0]), idx]
    return dist, idx


def _value_noise(seed: int, a: np.ndarray, b: np.ndarray, spacing: float) -> np.ndarray:
    ia, ib = np.floor(a / spacing), np.floor(b / spacing)
    fa, fb = a / spacing - ia, b / spacing - ib
    ia, ib = ia.astype(np.int64), ib.astype(np.int64)
    na, nb = int(ia.max()) + 2, int(ib.max()) + 2
    lattice = np.random.default_rng(seed).random((max(na, 2), max(nb, 2)))
    sa, sb = fa * fa * (3 - 2 * fa), fb * fb * (3 - 2 * fb)
    v00, v10 = lattice[ia, ib], lattice[ia + 1, ib]
    v01, v11 = lattice[ia, ib + 1], lattice[ia + 1, ib + 1]
    return (v00 * (1 - sa) + v10 * sa) * (1 - sb) + (v01 * (1 - sa) + v11 * sa) * sb


def _texture(scene: Scene, surf: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-hit (brightness factor, hue offset) from two octaves of value noise."""
    bright = np.empty(points.shape[0])
    hue = np.empty(points.shape[0])
    for s in np.unique(surf):
        rect = scene.surfaces[s]
        m = surf == s
        ax0, ax1 = _OTHER_AXES[rect.axis]
        a = np.clip(points[m, ax0] - rect.lo[0], 0.0, None)
        b = np.clip(points[m, ax1] - rect.lo[1], 0.0, None)
        seed = rect.texture_seed
        bright[m] = 0.7 * _value_noise(seed, a, b, 0.45) + 0.3 * _value_noise(seed + 7, a, b, 0.17)
        hue[m] = _value_noise(seed + 13, a, b, 0.6) - 0.5
    lo, hi = TEXTURE_RANGE
    return lo + (hi - lo) * bright, 2.0 * HUE_VARIATION * hue


def _albedo(scene: Scene, cls: np.ndarray, hue_offset: np.ndarray) -> np.ndarray:
    hsv = rgb_to_hsv(scene.colors()[cls])
    hsv[:, 0] = np.mod(hsv[:, 0] + hue_offset, 1.0)
    return hsv_to_rgb(hsv)


@dataclass
class RenderBuffers:
    image: np.ndarray      # H×W×3 float in [0, 1]
    labels: np.ndarray     # H×W uint8
    surface: np.ndarray    # H×W surface index
    depth: np.ndarray      # H×W hit distance along the ray
    points: np.ndarray     # H×W×3 hit points


def render_buffers(scene: Scene, cam: CameraState, h: int, w: int) -> RenderBuffers:
    dirs = primary_rays(cam, h, w)
    origin = np.asarray(cam.position, dtype=np.float64)
    dist, surf = cast(scene, origin, dirs)
    if not np.all(np.isfinite(dist)):
        raise RenderError(f"{int((~np.isfinite(dist)).sum())} rays missed every surface in scene {scene.seed}")
    points = origin[None] + dist[:, None] * dirs
    pk = _packed(scene)
    cls = pk.cls[surf]
    normals = np.zeros_like(dirs)
    ax = pk.axis[surf]
    normals[np.arange(len(ax)), ax] = -np.sign(dirs[np.arange(len(ax)), ax])
    shade = AMBIENT + (1.0 - AMBIENT) * np.clip(normals @ LIGHT_DIR, 0.0, None)
    tex, hue = _texture(scene, surf, points)
    image = _albedo(scene, cls, hue) * (tex * shade)[:, None]
    return RenderBuffers(
        image=image.reshape(h, w, 3).astype(np.float32),
        labels=cls.reshape(h, w).astype(np.uint8),
        surface=surf.reshape(h, w),
        depth=dist.reshape(h, w),
        points=points.reshape(h, w, 3),
    )


def render(scene: Scene, cam: CameraState, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """(color image H×W×3 in [0, 1], label map H×W)."""
    buf = render_buffers(scene, cam, h, w)
    return buf.image, buf.labels


def project(cam: CameraState, points: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Continuous (row, col) of world points in ``cam`` plus a "in front of camera" flag."""
    right, down, forward = camera_basis(cam)
    rel = points - np.asarray(cam.position)[None]
    z = rel @ forward
    f = focal_length(cam, h)
    with np.errstate(divide="ignore", invalid="ignore"):
        col = (rel @ right) / z * f + w / 2.0 - 0.5
        row = (rel @ down) / z * f + h / 2.0 - 0.5
    return row, col, z > 1e-9


def oracle_correspondence(scene: Scene, cam_s: CameraState, cam_t: CameraState, h: int, w: int,
                          tol: float = DEPTH_TOL, _src: RenderBuffers | None = None,
                          _tgt: RenderBuffers | None = None) -> Correspondence:
    """Ground-truth map from target pixels to source pixels.

    A target pixel is visible when its hit point projects inside the source
    frame, the source ray toward it is unoccluded (depth within ``tol``), and
    the nearest source pixel samples the same surface.
    """
    tgt = _tgt or render_buffers(scene, cam_t, h, w)
    src = _src or render_buffers(scene, cam_s, h, w)
    pts = tgt.points.reshape(-1, 3)
    row, col, front = project(cam_s, pts, h, w)
    ri = np.rint(np.where(front, row, -1)).astype(np.int64)
    ci = np.rint(np.where(front, col, -1)).astype(np.int64)
    inside = front & (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)

    origin = np.asarray(cam_s.position, dtype=np.float64)
    rel = pts - origin[None]
    expected = np.linalg.norm(rel, axis=1)
    visible = inside.copy()
    if np.any(inside):
        dirs = rel[inside] / expected[inside, None]
        dist, _ = cast(scene, origin, dirs)
        unoccluded = dist >= expected[inside] - tol
        same_surface = src.surface[ri[inside], ci[inside]] == tgt.surface.reshape(-1)[inside]
        visible[inside] = unoccluded & same_surface
    ri = np.where(inside, ri, 0).reshape(h, w)
    ci = np.where(inside, ci, 0).reshape(h, w)
    return Correspondence(ri, ci, visible.reshape(h, w))


def warp(source: np.ndarray, corr: Correspondence, fill=0) -> np.ndarray:
    """Pull source pixels into the target grid; invisible pixels get ``fill``."""
    out = source[corr.src_row, corr.src_col].copy()
    out[~corr.visible] = fill
    return out


def make_pair(scene: Scene, base: CameraState, pitch_delta_deg: float, h: int, w: int,
              with_correspondence: bool = True) -> FramePair:
    if not 0.0 <= pitch_delta_deg <= 90.0:
        raise ValueError(f"pitch delta must lie in [0, 90] degrees, got {pitch_delta_deg}")
    cam_s = base.with_pitch(0.0)
    cam_t = base.with_pitch(math.radians(pitch_delta_deg))
    src = render_buffers(scene, cam_s, h, w)
    tgt = render_buffers(scene, cam_t, h, w)
    corr = oracle_correspondence(scene, cam_s, cam_t, h, w, _src=src, _tgt=tgt) if with_correspondence else None
    return FramePair(src.image, tgt.image, src.labels, tgt.labels, float(pitch_delta_deg), cam_s, corr)
