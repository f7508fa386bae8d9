"""Snap angles for cubemap rendering of 360-degree panoramas."""
from .estimators import CubemapProjector, SnapAnglePredictor
from .geometry import (AngleGrid, Cubemap, SnapAngle, SphericalCoord, cubemap_to_equirect,
                       dir_to_spherical, face_ray, project_cubemap, project_mask,
                       rotate_coords, sample_equirect)
from .network import Architecture, PolicyWeights
from .objective import (ForegroundCubemap, ObjectiveConfig, band_mask, disruption_score,
                        fg_for_angle)
from .scenes import SceneDistribution, SceneObject, SceneSpec, synth_scene
from .search import (Scorer, SearchResult, coarse_to_fine, exhaustive, random_policy,
                     saliency_policy, uniform_policy)

__version__ = "0.1.0"
