"""Synthetic panoramas with analytic foreground masks."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import HALF_PI, TWO_PI, spherical_to_dir, wrap_lon

SHAPES = ("cap", "rect")
TEXTURES = ("smooth", "flat")
MAX_CENTER_LAT = math.pi / 3


@dataclass(frozen=True)
class SceneObject:
    lat: float
    lon: float
    half_extents: tuple  # (lat_half, lon_half) radians; caps use the first entry
    shape: str = "cap"
    intensity: float = 1.0

    def __post_init__(self):
        ext = tuple(float(e) for e in self.half_extents)
        if len(ext) == 1:
            ext = ext * 2
        if len(ext) != 2 or min(ext) <= 0:
            raise ValueError(f"half extents must be two positive angles, got {self.half_extents}")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if abs(self.lat) >= MAX_CENTER_LAT:
            raise ValueError(f"object latitude {self.lat} outside |lat| < pi/3")
        if not 0 <= self.intensity <= 1:
            raise ValueError("intensity must lie in [0, 1]")
        object.__setattr__(self, "half_extents", ext)
        object.__setattr__(self, "lon", wrap_lon(self.lon))

    @property
    def radius(self) -> float:
        return self.half_extents[0]

    def box(self):
        """(lon_min, lat_min, lon_max, lat_max); lon_min > lon_max wraps the seam."""
        if self.shape == "rect":
            dlat, dlon = self.half_extents
        else:
            dlat = self.radius
            top = abs(self.lat) + dlat
            if top >= HALF_PI or self.radius >= HALF_PI:
                dlon = math.pi
            else:
                dlon = math.asin(min(1.0, math.sin(self.radius) / math.cos(self.lat)))
        lat_min = max(-HALF_PI, self.lat - dlat)
        lat_max = min(HALF_PI, self.lat + dlat)
        if dlon >= math.pi:
            return (-math.pi, lat_min, math.pi, lat_max)
        return (wrap_lon(self.lon - dlon), lat_min, wrap_lon(self.lon + dlon), lat_max)


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple = ()
    texture: str = "smooth"
    seed: int = 0
    height: int = 128

    def __post_init__(self):
        objs = tuple(o if isinstance(o, SceneObject) else SceneObject(**o) for o in self.objects)
        object.__setattr__(self, "objects", objs)
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.height < 4:
            raise ValueError("scene height must be at least 4")

    def to_json(self) -> str:
        d = asdict(self)
        for o in d["objects"]:
            o["half_extents"] = list(o["half_extents"])
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        return cls(objects=tuple(SceneObject(**o) for o in d.get("objects", [])),
                   texture=d.get("texture", "smooth"), seed=int(d.get("seed", 0)),
                   height=int(d.get("height", 128)))


def pixel_latlon(height: int):
    """Latitude/longitude of every equirectangular pixel center."""
    w = 2 * height
    lat = HALF_PI - (np.arange(height) + 0.5) * math.pi / height
    lon = -math.pi + (np.arange(w) + 0.5) * TWO_PI / w
    return np.meshgrid(lat, lon, indexing="ij")


def object_mask(obj: SceneObject, lat, lon) -> np.ndarray:
    if obj.shape == "cap":
        # haversine great-circle distance
        dlat = lat - obj.lat
        dlon = lon - obj.lon
        a = np.sin(dlat / 2) ** 2 + np.cos(lat) * math.cos(obj.lat) * np.sin(dlon / 2) ** 2
        dist = 2 * np.arcsin(np.sqrt(np.clip(a, 0, 1)))
        return dist <= obj.radius
    dlat, dlon = obj.half_extents
    return (np.abs(lat - obj.lat) <= dlat) & (np.abs(wrap_lon(lon - obj.lon)) <= dlon)


def smooth_texture(lat, lon, rng, channels=3, terms=6, max_freq=3.0) -> np.ndarray:
    """Low-frequency random field, continuous across the seam and poles."""
    d = spherical_to_dir(lat, lon)
    out = np.empty(lat.shape + (channels,))
    for c in range(channels):
        acc = np.zeros(lat.shape)
        for _ in range(terms):
            k = rng.normal(size=3)
            k *= rng.uniform(0.5, max_freq) / np.linalg.norm(k)
            acc += rng.uniform(0.3, 1.0) * np.sin(d @ k + rng.uniform(0, TWO_PI))
        acc /= terms
        out[..., c] = 0.5 + 0.35 * acc / max(np.abs(acc).max(), 1e-9)
    return out


def synth_scene(spec: SceneSpec):
    """Render ``spec`` to an RGB panorama in [0, 1] and its binary foreground mask."""
    rng = np.random.default_rng(spec.seed)
    lat, lon = pixel_latlon(spec.height)
    if spec.texture == "smooth":
        img = smooth_texture(lat, lon, rng)
    else:
        img = np.full(lat.shape + (3,), 0.5)
    mask = np.zeros(lat.shape, dtype=bool)
    for obj in spec.objects:
        m = object_mask(obj, lat, lon)
        img[m] = obj.intensity
        mask |= m
    return img, mask


@dataclass(frozen=True)
class SceneDistribution:
    """Sampling ranges for random scenes (angles in radians)."""

    n_objects: tuple = (1, 3)
    shapes: tuple = SHAPES
    lat_range: tuple = (-0.5, 0.3)
    lat_half: tuple = (0.25, 0.6)
    lon_half: tuple = (0.2, 0.7)
    texture: str = "smooth"
    height: int = 128

    @classmethod
    def single_compact(cls, height=128) -> "SceneDistribution":
        return cls(n_objects=(1, 1), height=height)

    def sample(self, seed: int) -> SceneSpec:
        rng = np.random.default_rng(seed)
        lo, hi = self.n_objects
        n = int(rng.integers(lo, hi + 1))
        objs = []
        for _ in range(n):
            shape = self.shapes[int(rng.integers(len(self.shapes)))]
            lat_half = float(rng.uniform(*self.lat_half))
            lon_half = float(rng.uniform(*self.lon_half))
            if shape == "cap":
                ext = (lon_half, lon_half)
            else:
                ext = (lat_half, lon_half)
            objs.append(SceneObject(
                lat=float(rng.uniform(*self.lat_range)),
                lon=float(rng.uniform(-math.pi, math.pi)),
                half_extents=ext, shape=shape,
                intensity=float(rng.uniform(0.85, 1.0))))
        return SceneSpec(tuple(objs), self.texture, int(seed), self.height)

    def to_dict(self):
        return asdict(self)
