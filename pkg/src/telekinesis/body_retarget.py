"""Maps the human wrist-in-torso transform onto robot end-effector targets.

The robot's "torso" anchor sits 0.25 m above its base by default; the wrist
should hold the same pose relative to that anchor as the human wrist holds
relative to the human torso (+x out of the torso front, +y to the body's
left, +z up).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .se3 import Transform3, is_rotation


def _default_torso() -> Transform3:
    return Transform3(np.eye(3), np.array([0.0, 0.0, 0.25]))


@dataclass
class BodyRetargetConfig:
    torso: Transform3 = field(default_factory=_default_torso)
    scale: float = 1.0
    reach_radius: float = 0.85

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidInputError("workspace scale must be > 0")
        if not self.reach_radius > 0:
            raise InvalidInputError("reach clamp radius must be > 0")

    @staticmethod
    def from_mapping(m: dict) -> "BodyRetargetConfig":
        extra = set(m) - {"torso_translation", "scale", "reach_radius"}
        if extra:
            raise InvalidInputError(f"unexpected body_retarget keys {sorted(extra)}")
        t = np.asarray(m.get("torso_translation", [0.0, 0.0, 0.25]), dtype=float)
        return BodyRetargetConfig(
            torso=Transform3(np.eye(3), t),
            scale=float(m.get("scale", 1.0)),
            reach_radius=float(m.get("reach_radius", 0.85)),
        )


@dataclass
class EndEffectorTarget:
    """Robot wrist pose in the robot base frame, stamped."""

    pose: Transform3
    timestamp: float


def map_wrist_to_target(
    wrist_in_torso: Transform3, cfg: BodyRetargetConfig, timestamp: float
) -> EndEffectorTarget:
    """Scale the wrist translation, clamp it to the reach sphere around the
    robot torso (direction preserved), and express the result in the base frame."""
    t = np.asarray(wrist_in_torso.translation, dtype=float)
    r = np.asarray(wrist_in_torso.rotation, dtype=float)
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(r))):
        raise InvalidInputError("wrist transform must be finite")
    if not is_rotation(r, tol=1e-6):
        raise InvalidInputError("wrist transform rotation is not a valid rotation")
    scaled = cfg.scale * t
    norm = np.linalg.norm(scaled)
    if norm > cfg.reach_radius:
        scaled = scaled * (cfg.reach_radius / norm)
    pose = cfg.torso.compose(Transform3(r, scaled))
    return EndEffectorTarget(pose=pose, timestamp=float(timestamp))
