"""Delayed data association for landmark SLAM via constellation merging."""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    RigidTransform,
    Rotation,
    apply_to_point,
    compose,
    procrustes_align,
    se3_exp,
    se3_log,
)
