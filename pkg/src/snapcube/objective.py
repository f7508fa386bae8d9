"""Foreground disruption near cube-face boundaries."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .geometry import LATERAL_FACES, render_mask_faces

DENOMINATOR_MODES = ("band-occupancy", "whole-face", "foreground-normalized")
EDGES = ("left", "right", "top", "bottom")


@dataclass(frozen=True)
class ObjectiveConfig:
    """Boundary band settings.

    ``margin_frac`` is the band width as a fraction of the face side.  Bottom
    edges are left out of the default set: objects resting on the lower
    border of a photo are normal composition.
    """

    margin_frac: float = 0.0625
    denominator_mode: str = "band-occupancy"
    penalized_edges: frozenset = field(default=frozenset({"left", "right", "top"}))

    def __post_init__(self):
        if not (0 < self.margin_frac <= 0.5):
            raise ValueError(f"margin_frac must lie in (0, 0.5], got {self.margin_frac}")
        if self.denominator_mode not in DENOMINATOR_MODES:
            raise ValueError(f"unknown denominator mode {self.denominator_mode!r}; "
                             f"expected one of {DENOMINATOR_MODES}")
        edges = frozenset(self.penalized_edges)
        if not edges or not edges <= set(EDGES):
            raise ValueError(f"penalized_edges must be a non-empty subset of {EDGES}")
        object.__setattr__(self, "penalized_edges", edges)


@dataclass(frozen=True)
class ForegroundCubemap:
    face_size: int
    lateral_faces: np.ndarray  # (4, S, S) bool, ordered front/right/back/left

    def __post_init__(self):
        faces = np.asarray(self.lateral_faces)
        s = self.face_size
        if faces.shape != (4, s, s):
            raise ValueError(f"expected lateral faces of shape (4, {s}, {s}), got {faces.shape}")
        if faces.dtype != bool:
            if not np.all((faces == 0) | (faces == 1)):
                raise ValueError("foreground faces must be binary")
            faces = faces.astype(bool)
        object.__setattr__(self, "lateral_faces", faces)

    def __getitem__(self, name):
        return self.lateral_faces[LATERAL_FACES.index(name)]


def margin_pixels(face_size: int, margin_frac: float) -> int:
    m = int(math.floor(margin_frac * face_size + 1e-9))
    if m < 1:
        raise ValueError(f"margin {margin_frac} of a {face_size}px face rounds to zero pixels")
    return m


@lru_cache(maxsize=64)
def _band(face_size: int, margin_frac: float, edges: frozenset) -> np.ndarray:
    m = margin_pixels(face_size, margin_frac)
    band = np.zeros((face_size, face_size), dtype=bool)
    if "left" in edges:
        band[:, :m] = True
    if "right" in edges:
        band[:, face_size - m:] = True
    if "top" in edges:
        band[:m, :] = True
    if "bottom" in edges:
        band[face_size - m:, :] = True
    band.setflags(write=False)
    return band


def band_mask(face_size: int, cfg: ObjectiveConfig | None = None) -> np.ndarray:
    """Pixels within ``floor(A * W_c)`` pixels of a penalized edge."""
    cfg = cfg or ObjectiveConfig()
    return _band(int(face_size), cfg.margin_frac, cfg.penalized_edges).copy()


def face_scores(faces, cfg: ObjectiveConfig | None = None) -> np.ndarray:
    """Per-face disruption for an array of binary faces ``(..., S, S)``."""
    cfg = cfg or ObjectiveConfig()
    faces = np.asarray(faces, dtype=bool)
    s = faces.shape[-1]
    band = _band(s, cfg.margin_frac, cfg.penalized_edges)
    hits = np.count_nonzero(faces & band, axis=(-2, -1))
    if cfg.denominator_mode == "band-occupancy":
        denom = np.count_nonzero(band)
    elif cfg.denominator_mode == "whole-face":
        denom = s * s
    else:
        denom = np.maximum(np.count_nonzero(faces, axis=(-2, -1)), 1)
    return hits / denom


def disruption_score(fg: ForegroundCubemap, cfg: ObjectiveConfig | None = None) -> float:
    """Mean boundary-band foreground fraction over the four lateral faces."""
    return lateral_mean(face_scores(fg.lateral_faces, cfg))


def lateral_mean(scores) -> float:
    # fsum is exactly rounded, so the result ignores face order
    scores = np.asarray(scores, dtype=np.float64).ravel()
    return math.fsum(scores.tolist()) / len(scores)


def fg_for_angle(mask, theta, face_size: int = 64) -> ForegroundCubemap:
    """Transport a panorama foreground mask onto the lateral faces at ``theta``."""
    faces = render_mask_faces(mask, theta, face_size)
    return ForegroundCubemap(face_size, faces[:4])


def score_angle(mask, theta, face_size: int = 64, cfg: ObjectiveConfig | None = None) -> float:
    return disruption_score(fg_for_angle(mask, theta, face_size), cfg)
