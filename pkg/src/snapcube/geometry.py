"""Spherical coordinates and equirectangular-to-cubemap rendering.

Conventions
-----------
Directions are ``(x, y, z)`` with ``x`` to the right, ``y`` up and ``z``
forward.  Longitude is ``atan2(x, z)`` wrapped into ``[-pi, pi)`` and latitude
is ``asin(y)``.  Equirectangular pixel ``(row, col)`` is registered at its
center: ``lon = -pi + (col + 0.5) * 2pi / W`` and
``lat = pi/2 - (row + 0.5) * pi / H``.

A cubemap rendered at snap angle ``theta`` is the cube turned by ``+theta`` in
azimuth, so a panorama point at ``(lat, lon)`` lands at cube coordinate
``(lat, lon - theta)``.  The front face center therefore looks at ``lon = theta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

FACES = ("front", "right", "back", "left", "top", "bottom")
LATERAL_FACES = FACES[:4]
HALF_PI = math.pi / 2
TWO_PI = 2 * math.pi


def wrap_lon(lon):
    """Wrap longitude(s) into ``[-pi, pi)``."""
    out = np.mod(np.asarray(lon, dtype=np.float64) + math.pi, TWO_PI) - math.pi
    # np.mod can return exactly 2pi for tiny negative inputs
    out = np.where(out >= math.pi, out - TWO_PI, out)
    if np.ndim(out) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class SphericalCoord:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-HALF_PI - 1e-12 <= self.lat <= HALF_PI + 1e-12):
            raise ValueError(f"latitude {self.lat} outside [-pi/2, pi/2]")
        object.__setattr__(self, "lat", float(np.clip(self.lat, -HALF_PI, HALF_PI)))
        object.__setattr__(self, "lon", wrap_lon(self.lon))


@dataclass(frozen=True)
class SnapAngle:
    """An azimuth rotation in ``[0, pi/2)``, optionally tied to a grid slot."""

    theta: float
    grid_index: int | None = None

    def __post_init__(self):
        if not (0.0 <= self.theta < HALF_PI):
            raise ValueError(f"snap angle {self.theta} outside [0, pi/2)")

    @property
    def degrees(self) -> float:
        return math.degrees(self.theta)


@dataclass(frozen=True)
class AngleGrid:
    n: int = 20
    candidates: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("angle grid needs at least one candidate")
        step = HALF_PI / self.n
        object.__setattr__(
            self, "candidates", tuple(SnapAngle(k * step, k) for k in range(self.n))
        )

    def __len__(self):
        return self.n

    def __getitem__(self, k) -> SnapAngle:
        return self.candidates[k]

    def __iter__(self):
        return iter(self.candidates)

    @property
    def step(self) -> float:
        return HALF_PI / self.n

    def index_of(self, theta: float) -> int:
        """Nearest grid slot to ``theta`` on the pi/2-periodic circle."""
        k = int(math.floor(math.fmod(theta, HALF_PI) / self.step + 0.5))
        return k % self.n

    def snap(self, theta: float) -> SnapAngle:
        return self.candidates[self.index_of(theta)]

    def offset(self, angle: SnapAngle, steps: int) -> SnapAngle:
        return self.candidates[(self._index(angle) + steps) % self.n]

    def _index(self, angle: SnapAngle) -> int:
        if angle.grid_index is not None:
            return angle.grid_index
        return self.index_of(angle.theta)


@dataclass(frozen=True)
class Cubemap:
    face_size: int
    faces: dict
    source_angle: SnapAngle
    # rotation actually rendered; may exceed pi/2 (quarter turns permute faces)
    theta: float = None

    def __post_init__(self):
        if self.theta is None:
            object.__setattr__(self, "theta", self.source_angle.theta)

    def lateral(self) -> np.ndarray:
        return np.stack([self.faces[f] for f in LATERAL_FACES])

    def cross(self) -> np.ndarray:
        """Unfolded cross layout (3 rows x 4 columns of faces)."""
        s = self.face_size
        sample = self.faces["front"]
        canvas = np.zeros((3 * s, 4 * s) + sample.shape[2:], dtype=sample.dtype)
        slots = {"top": (0, 1), "left": (1, 0), "front": (1, 1), "right": (1, 2),
                 "back": (1, 3), "bottom": (2, 1)}
        for name, (r, c) in slots.items():
            canvas[r * s:(r + 1) * s, c * s:(c + 1) * s] = self.faces[name]
        return canvas


def as_snap_angle(theta) -> SnapAngle:
    """Accept a SnapAngle or a float; floats are reduced modulo pi/2."""
    if isinstance(theta, SnapAngle):
        return theta
    t = math.fmod(float(theta), HALF_PI)
    if t < 0:
        t += HALF_PI
    if t >= HALF_PI:
        t = 0.0
    return SnapAngle(t)


def rotate_coords(c: SphericalCoord, theta: float) -> SphericalCoord:
    """Coordinate transform ``(lat, lon) -> (lat, lon - theta)``."""
    return SphericalCoord(c.lat, c.lon - theta)


def spherical_to_dir(lat, lon):
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    cl = np.cos(lat)
    return np.stack([cl * np.sin(lon), np.sin(lat), cl * np.cos(lon)], axis=-1)


def _dir_to_latlon(d):
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    horiz = np.hypot(x, z)
    lat = np.arctan2(y, horiz)
    lon = np.where(horiz > 0, np.arctan2(x, z), 0.0)
    return lat, wrap_lon(lon)


def dir_to_spherical(d) -> SphericalCoord:
    d = np.asarray(d, dtype=np.float64)
    norm = np.linalg.norm(d)
    if norm == 0:
        raise ValueError("zero direction vector")
    lat, lon = _dir_to_latlon(d / norm)
    return SphericalCoord(float(lat), float(lon))


def face_ray(face: str, u, v) -> np.ndarray:
    """Unit direction through face coordinate ``(u, v)``.

    ``u`` runs left to right and ``v`` top to bottom, both in ``[0, 1)``;
    array inputs broadcast and the result gains a trailing axis of size 3.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    a = 2 * u - 1
    b = 1 - 2 * v
    one = np.ones(np.broadcast(a, b).shape)
    a = a * one
    b = b * one
    if face == "front":
        d = (a, b, one)
    elif face == "right":
        d = (one, b, -a)
    elif face == "back":
        d = (-a, b, -one)
    elif face == "left":
        d = (-one, b, a)
    elif face == "top":
        d = (a, one, -b)
    elif face == "bottom":
        d = (a, -one, b)
    else:
        raise ValueError(f"unknown face {face!r}")
    d = np.stack(d, axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _pixel_centers(face_size):
    t = (np.arange(face_size) + 0.5) / face_size
    v, u = np.meshgrid(t, t, indexing="ij")
    return u, v


@lru_cache(maxsize=256)
def _face_latlon(face_size: int, theta: float):
    """Panorama (lat, lon) sampled by every cubemap pixel at angle theta."""
    u, v = _pixel_centers(face_size)
    lat = np.empty((6, face_size, face_size))
    lon = np.empty((6, face_size, face_size))
    for i, name in enumerate(FACES):
        la, lo = _dir_to_latlon(face_ray(name, u, v))
        lat[i] = la
        # inverse of the coordinate transform: cube lon -> panorama lon
        lon[i] = wrap_lon(lo + theta)
    lat.setflags(write=False)
    lon.setflags(write=False)
    return lat, lon


def _equirect_xy(lat, lon, height, width):
    x = (lon + math.pi) / TWO_PI * width - 0.5
    y = (HALF_PI - lat) / math.pi * height - 0.5
    return x, y


def check_equirect(img, name="panorama") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
        raise ValueError(f"{name} must be HxW or HxWx(1|3), got shape {img.shape}")
    h, w = img.shape[:2]
    if h < 2 or w != 2 * h:
        raise ValueError(f"{name} must have width == 2 * height, got {w}x{h}")
    img = img.astype(np.float64, copy=False)
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ValueError(f"{name} values must be finite and within [0, 1]")
    return img


def check_mask(mask, name="mask") -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim == 3 and mask.shape[2] == 1:
        mask = mask[..., 0]
    if mask.ndim != 2:
        raise ValueError(f"{name} must be a single-channel HxW array")
    h, w = mask.shape
    if h < 2 or w != 2 * h:
        raise ValueError(f"{name} must have width == 2 * height, got {w}x{h}")
    if mask.dtype != bool:
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError(f"{name} is not binary")
        mask = mask.astype(bool)
    return mask


def sample_equirect(img, lat, lon):
    """Bilinear sample; longitude wraps across the seam, latitude clamps."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    x, y = _equirect_xy(np.asarray(lat, dtype=np.float64),
                        np.asarray(lon, dtype=np.float64), h, w)
    y = np.clip(y, 0, h - 1)
    x0 = np.floor(x)
    y0 = np.minimum(np.floor(y), h - 2)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.intp) % w
    x1 = (x0 + 1) % w
    y0 = y0.astype(np.intp)
    y1 = y0 + 1
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


@lru_cache(maxsize=512)
def _nearest_index(height: int, width: int, face_size: int, theta: float):
    lat, lon = _face_latlon(face_size, theta)
    x, y = _equirect_xy(lat, lon, height, width)
    col = np.floor(x + 0.5).astype(np.intp) % width
    row = np.clip(np.floor(y + 0.5).astype(np.intp), 0, height - 1)
    flat = row * width + col
    flat.setflags(write=False)
    return flat


def _quarter_split(theta: float):
    """Split theta into whole quarter turns and a residual in [0, pi/2)."""
    k = math.floor(theta / HALF_PI)
    r = theta - k * HALF_PI
    if r >= HALF_PI or r < 0:
        k += int(r >= HALF_PI) - int(r < 0)
        r = theta - k * HALF_PI
    if r < 0 or r >= HALF_PI:
        r = 0.0
    return k % 4, r


def _turn_faces(stack, k):
    """Re-arrange faces rendered at theta into those at theta + k * pi/2."""
    if k == 0:
        return stack
    out = np.empty_like(stack)
    for i in range(4):
        out[i] = stack[(i + k) % 4]
    out[4] = np.rot90(stack[4], k=-k, axes=(0, 1))
    out[5] = np.rot90(stack[5], k=k, axes=(0, 1))
    return out


def _angle_value(theta) -> float:
    return theta.theta if isinstance(theta, SnapAngle) else float(theta)


def render_faces(img, theta, face_size: int) -> np.ndarray:
    """Bilinear cubemap faces as an array of shape (6, S, S[, C])."""
    if face_size < 8:
        raise ValueError("face_size must be at least 8")
    img = check_equirect(img)
    k, r = _quarter_split(_angle_value(theta))
    lat, lon = _face_latlon(face_size, r)
    return _turn_faces(sample_equirect(img, lat, lon), k)


def render_mask_faces(mask, theta, face_size: int) -> np.ndarray:
    """Nearest-neighbor cubemap faces of a binary mask, shape (6, S, S)."""
    if face_size < 8:
        raise ValueError("face_size must be at least 8")
    mask = check_mask(mask)
    h, w = mask.shape
    k, r = _quarter_split(_angle_value(theta))
    return _turn_faces(mask.ravel()[_nearest_index(h, w, face_size, r)], k)


def project_cubemap(img, theta, face_size: int = 64) -> Cubemap:
    angle = as_snap_angle(theta)
    faces = render_faces(img, _angle_value(theta), face_size)
    return Cubemap(face_size, dict(zip(FACES, faces)), angle, _angle_value(theta))


def project_mask(mask, theta, face_size: int = 64) -> Cubemap:
    angle = as_snap_angle(theta)
    faces = render_mask_faces(mask, _angle_value(theta), face_size)
    return Cubemap(face_size, dict(zip(FACES, faces)), angle, _angle_value(theta))


def dir_to_face(d):
    """Face index and (u, v) in [0, 1] for each direction in ``d``."""
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    ax, ay, az = np.abs(x), np.abs(y), np.abs(z)
    face = np.empty(x.shape, dtype=np.intp)
    a = np.empty(x.shape)
    b = np.empty(x.shape)
    horiz = (az >= ax) & (az >= ay)
    side = ~horiz & (ax >= ay)
    vert = ~horiz & ~side

    m = horiz & (z > 0)
    face[m], a[m], b[m] = 0, x[m] / az[m], y[m] / az[m]
    m = horiz & (z <= 0)
    face[m], a[m], b[m] = 2, -x[m] / az[m], y[m] / az[m]
    m = side & (x > 0)
    face[m], a[m], b[m] = 1, -z[m] / ax[m], y[m] / ax[m]
    m = side & (x <= 0)
    face[m], a[m], b[m] = 3, z[m] / ax[m], y[m] / ax[m]
    m = vert & (y > 0)
    face[m], a[m], b[m] = 4, x[m] / ay[m], -z[m] / ay[m]
    m = vert & (y <= 0)
    face[m], a[m], b[m] = 5, x[m] / ay[m], z[m] / ay[m]
    return face, (a + 1) / 2, (1 - b) / 2


def cubemap_to_equirect(cube: Cubemap, height: int) -> np.ndarray:
    """Resample a cubemap back to an equirectangular image (bilinear)."""
    w = 2 * height
    rows = (np.arange(height) + 0.5) / height
    cols = (np.arange(w) + 0.5) / w
    lat = HALF_PI - rows * math.pi
    lon = -math.pi + cols * TWO_PI
    lat, lon = np.meshgrid(lat, lon, indexing="ij")
    d = spherical_to_dir(lat, lon - cube.theta)
    face, u, v = dir_to_face(d)
    s = cube.face_size
    stack = np.stack([np.asarray(cube.faces[f], dtype=np.float64) for f in FACES])
    x = np.clip(u * s - 0.5, 0, s - 1)
    y = np.clip(v * s - 0.5, 0, s - 1)
    x0 = np.minimum(np.floor(x), s - 2).astype(np.intp)
    y0 = np.minimum(np.floor(y), s - 2).astype(np.intp)
    fx = x - x0
    fy = y - y0
    if stack.ndim == 4:
        fx = fx[..., None]
        fy = fy[..., None]
    top = stack[face, y0, x0] * (1 - fx) + stack[face, y0, x0 + 1] * fx
    bot = stack[face, y0 + 1, x0] * (1 - fx) + stack[face, y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy
