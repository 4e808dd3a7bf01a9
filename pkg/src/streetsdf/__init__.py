"""streetsdf: multi-view implicit surface reconstruction for street scenes.

Cuboid-bounded neural SDF reconstruction from posed street captures:
training with optional lidar / monocular-cue / sky-mask supervision, joint
close-range + far-field + sky rendering, surface and occupancy extraction,
lidar simulation, and evaluation against a built-in synthetic oracle.
"""

from .config import Config, desk_preset
from .fields import FieldSet
from .space import Aabb, PinholeCamera, RigidPose, Trajectory

__version__ = "0.1.0"

__all__ = [
    "Aabb",
    "Config",
    "FieldSet",
    "PinholeCamera",
    "RigidPose",
    "Trajectory",
    "desk_preset",
    "__version__",
]
