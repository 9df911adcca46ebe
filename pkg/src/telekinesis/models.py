"""Bundled model files (chains, skeletons, collision capsules) and their lookup.

The env var TELEKINESIS_MODELS_DIR points model loading at a different
directory; files keep the bundled names.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

from .errors import ConfigError

_ENV_VAR = "TELEKINESIS_MODELS_DIR"


def default_models_dir() -> Path:
    override = os.environ.get(_ENV_VAR)
    if override:
        p = Path(override)
        if not p.is_dir():
            raise ConfigError(f"{_ENV_VAR}={override!r} is not a directory")
        return p
    return Path(__file__).resolve().parent / "models"


def model_path(filename: str, models_dir=None) -> Path:
    base = Path(models_dir) if models_dir else default_models_dir()
    p = base / filename
    if not p.is_file():
        raise ConfigError(f"model file not found: {p}")
    return p


def read_model_text(filename: str, models_dir=None) -> str:
    return model_path(filename, models_dir).read_text()


def model_checksum(filename: str, models_dir=None) -> str:
    data = model_path(filename, models_dir).read_bytes()
    return hashlib.sha256(data).hexdigest()


def load_hand_chain(models_dir=None):
    from .kinematics import load_chain

    return load_chain(read_model_text("hand16.chain", models_dir), source="hand16.chain")


def load_arm_chain(models_dir=None):
    from .kinematics import load_chain

    return load_chain(read_model_text("arm6.chain", models_dir), source="arm6.chain")


def load_hand_skeleton(models_dir=None):
    from .human_model import load_hand_skeleton_model

    return load_hand_skeleton_model(
        read_model_text("human_hand.skel", models_dir), source="human_hand.skel"
    )


def load_body_skeleton(models_dir=None):
    from .human_model import load_body_skeleton_model

    return load_body_skeleton_model(
        read_model_text("human_body.skel", models_dir), source="human_body.skel"
    )


def load_hand_collision_geometry(models_dir=None):
    from .collision import load_collision_geometry

    return load_collision_geometry(
        read_model_text("hand16.capsules", models_dir), source="hand16.capsules"
    )


def all_model_checksums(models_dir=None) -> dict:
    names = ["hand16.chain", "arm6.chain", "human_hand.skel", "human_body.skel", "hand16.capsules"]
    return {n: model_checksum(n, models_dir) for n in names}
