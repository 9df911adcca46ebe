"""Simplified parametric human hand/body skeletons and a synthetic pose sampler.

These stand in for the mesh models that pose estimators are built on: the
parameter shapes match (hand beta 10 / theta 45 / phi 3; body beta 10 /
24 rotation matrices / phi 3) so recorded pose files stay loadable, but the
skeleton itself is a plain bone tree.  Downstream code consumes only keypoint
frames and the wrist-to-torso transform, so nothing depends on mesh detail.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ModelParseError
from .kinematics import FrameSet, _parse_offset
from .se3 import Transform3, is_rotation, kabsch_umeyama, skew

log = logging.getLogger(__name__)

# theta layout: 15 ball joints x 3 axis-angle components, fingers ordered
# index, middle, ring, pinky, thumb with 3 joints each (knuckle to tip).
FINGER_ORDER = ("index", "middle", "ring", "pinky", "thumb")
BALL_JOINTS_PER_FINGER = 3
FLEXION_COMPONENT = 1  # rotation about local +y curls the segment toward +x


def rotvecs_to_matrices(v: np.ndarray) -> np.ndarray:
    """Rodrigues over the last axis: (..., 3) -> (..., 3, 3), stable near zero."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    a = np.sinc(theta / np.pi)
    b = 0.5 * np.sinc(theta / (2.0 * np.pi)) ** 2
    zeros = np.zeros_like(v[..., 0])
    k = np.stack(
        [
            np.stack([zeros, -v[..., 2], v[..., 1]], axis=-1),
            np.stack([v[..., 2], zeros, -v[..., 0]], axis=-1),
            np.stack([-v[..., 1], v[..., 0], zeros], axis=-1),
        ],
        axis=-2,
    )
    kk = k @ k
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * kk


@dataclass
class HumanHandPose:
    """MANO-shaped hand parameters: shape beta(10), pose theta(45), orientation phi(3)."""

    beta: np.ndarray
    theta: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        if self.beta.shape != (10,) or self.theta.shape != (45,) or self.phi.shape != (3,):
            raise InvalidInputError("hand pose needs beta(10), theta(45), phi(3)")
        if not (
            np.all(np.isfinite(self.beta))
            and np.all(np.isfinite(self.theta))
            and np.all(np.isfinite(self.phi))
        ):
            raise InvalidInputError("hand pose parameters must be finite")
        if np.any(np.abs(self.beta) > 3.0):
            log.warning("hand shape |beta| exceeds 3; outside the sampler contract")

    def network_input(self) -> np.ndarray:
        """The 55-vector fed to the retargeter: concat(beta, theta); phi excluded."""
        return np.concatenate([self.beta, self.theta])


@dataclass
class HumanBodyPose:
    """SMPL-X-shaped body parameters: beta(10), 24 joint rotation matrices, phi(3)."""

    beta: np.ndarray
    theta: np.ndarray  # (24, 3, 3)
    phi: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        if self.beta.shape != (10,) or self.theta.shape != (24, 3, 3) or self.phi.shape != (3,):
            raise InvalidInputError("body pose needs beta(10), theta(24,3,3), phi(3)")
        for i in range(24):
            if not is_rotation(self.theta[i], tol=1e-6):
                raise InvalidInputError(f"body joint rotation {i} is not a valid rotation matrix")


@dataclass(frozen=True)
class HandSkeletonModel:
    """Bone tree with shape-dependent segment lengths and anatomical limits."""

    name: str
    link_names: tuple
    parents: np.ndarray
    offsets_r: np.ndarray       # (L, 3, 3)
    offsets_t: np.ndarray       # (L, 3) template bone vectors
    shape_coeffs: np.ndarray    # (L, 10) multiplicative length-scaling directions
    ball_joint_link: np.ndarray  # (15,) link index rotated by each theta triple
    lower: np.ndarray           # (15, 3) per-component axis-angle limits
    upper: np.ndarray           # (15, 3)
    keypoints: dict             # keypoint name -> link index
    correspondence_offset: float = 0.05
    joint_of_link: np.ndarray = field(repr=False, default=None)

    @property
    def link_count(self):
        return len(self.link_names)

    def segment_scales(self, beta: np.ndarray) -> np.ndarray:
        """Per-link length multipliers 1 + beta . coeffs; positive for |beta| <= 3."""
        return 1.0 + np.asarray(beta, dtype=float) @ self.shape_coeffs.T


def load_hand_skeleton_model(text: str, *, source: str = "<string>") -> HandSkeletonModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"not valid JSON: {exc}", path=source)
    unknown = set(doc) - {"name", "links", "ball_joints", "shape_scaling", "keypoints", "correspondence_offset"}
    if unknown:
        raise ModelParseError(f"unknown top-level keys {sorted(unknown)}", path=source)
    name = doc.get("name", "")
    raw_links = doc.get("links")
    if not isinstance(raw_links, list) or not raw_links:
        raise ModelParseError("skeleton needs a non-empty 'links' list", path=source, field="links")

    link_names, parents, offs_r, offs_t = [], [], [], []
    index_of = {}
    for i, entry in enumerate(raw_links):
        lname = entry.get("name")
        if not isinstance(lname, str) or lname in index_of:
            raise ModelParseError("links need unique names", path=source, field=f"links[{i}]")
        parent = entry.get("parent")
        if parent is None:
            pidx = -1
            if i != 0:
                raise ModelParseError("only the first link may be the root", path=source, field=f"links[{i}]")
        elif parent in index_of:
            pidx = index_of[parent]
        else:
            raise ModelParseError(
                f"parent {parent!r} not defined before link {lname!r}", path=source, field=f"links[{i}]"
            )
        r, t = _parse_offset(entry.get("offset", {}), lname)
        index_of[lname] = i
        link_names.append(lname)
        parents.append(pidx)
        offs_r.append(r)
        offs_t.append(t)

    raw_joints = doc.get("ball_joints", [])
    if len(raw_joints) != 15:
        raise ModelParseError(
            f"hand skeleton needs exactly 15 ball joints, got {len(raw_joints)}",
            path=source,
            field="ball_joints",
        )
    jlink, lo, hi = [], [], []
    for j, entry in enumerate(raw_joints):
        lname = entry.get("link")
        if lname not in index_of:
            raise ModelParseError(
                f"ball joint references unknown link {lname!r}", path=source, field=f"ball_joints[{j}]"
            )
        l = np.asarray(entry.get("lower"), dtype=float)
        u = np.asarray(entry.get("upper"), dtype=float)
        if l.shape != (3,) or u.shape != (3,) or not np.all(l < u):
            raise ModelParseError(
                "ball joint limits need lower[3] < upper[3]", path=source, field=f"ball_joints[{j}]"
            )
        jlink.append(index_of[lname])
        lo.append(l)
        hi.append(u)

    coeffs = np.zeros((len(link_names), 10))
    for lname, row in doc.get("shape_scaling", {}).items():
        if lname not in index_of:
            raise ModelParseError(
                f"shape_scaling references unknown link {lname!r}", path=source, field="shape_scaling"
            )
        row = np.asarray(row, dtype=float)
        if row.shape != (10,):
            raise ModelParseError(
                f"shape_scaling for {lname!r} must have 10 entries", path=source, field="shape_scaling"
            )
        coeffs[index_of[lname]] = row
    if np.any(np.abs(coeffs).sum(axis=1) * 3.0 >= 1.0):
        raise ModelParseError(
            "shape_scaling rows too large: bone lengths could reach zero within |beta| <= 3",
            path=source,
            field="shape_scaling",
        )

    keypoints = {}
    for kp, lname in doc.get("keypoints", {}).items():
        if lname not in index_of:
            raise ModelParseError(
                f"keypoint {kp!r} binds to unknown link {lname!r}", path=source, field=f"keypoints.{kp}"
            )
        keypoints[kp] = index_of[lname]

    joint_of_link = np.full(len(link_names), -1, dtype=int)
    for j, l in enumerate(jlink):
        joint_of_link[l] = j

    return HandSkeletonModel(
        name=name,
        link_names=tuple(link_names),
        parents=np.asarray(parents, dtype=int),
        offsets_r=np.asarray(offs_r, dtype=float),
        offsets_t=np.asarray(offs_t, dtype=float),
        shape_coeffs=coeffs,
        ball_joint_link=np.asarray(jlink, dtype=int),
        lower=np.asarray(lo, dtype=float),
        upper=np.asarray(hi, dtype=float),
        keypoints=keypoints,
        correspondence_offset=float(doc.get("correspondence_offset", 0.05)),
        joint_of_link=joint_of_link,
    )


def hand_fk_batch(model: HandSkeletonModel, beta: np.ndarray, theta: np.ndarray):
    """Skeleton FK in the canonical palm frame: (R (N,L,3,3), t (N,L,3)).

    Global orientation phi is deliberately absent: every consumer works in
    palm-relative coordinates, which makes the phi-invariance of keypoint
    frames exact rather than numerical.
    """
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if beta.shape[1] != 10 or theta.shape[1] != 45 or beta.shape[0] != theta.shape[0]:
        raise InvalidInputError("expected beta (N,10) and theta (N,45)")
    n = beta.shape[0]
    scales = 1.0 + beta @ model.shape_coeffs.T          # (N, L)
    rj = rotvecs_to_matrices(theta.reshape(n, 15, 3))   # (N, 15, 3, 3)
    nl = model.link_count
    r = np.empty((n, nl, 3, 3))
    t = np.empty((n, nl, 3))
    for l in range(nl):
        p = model.parents[l]
        t_off = model.offsets_t[l][None, :] * scales[:, l, None]
        if p == -1:
            rw = np.broadcast_to(model.offsets_r[l], (n, 3, 3)).copy()
            tw = t_off.copy()
        else:
            rw = r[:, p] @ model.offsets_r[l]
            tw = np.einsum("nab,nb->na", r[:, p], t_off) + t[:, p]
        j = model.joint_of_link[l]
        if j >= 0:
            rw = rw @ rj[:, j]
        r[:, l] = rw
        t[:, l] = tw
    return r, t


def hand_keypoint_frames(model: HandSkeletonModel, pose: HumanHandPose) -> FrameSet:
    """Keypoint frames in the canonical palm frame (+x out of palm, +y toward
    thumb, +z toward the middle fingertip).

    Each keypoint frame is recovered by posing its four template
    correspondence points (origin plus offsets along the local axes) and
    fitting a rigid transform against the local correspondence set, mirroring
    how estimator meshes are anchored to keypoints.
    """
    r, t = hand_fk_batch(model, pose.beta, pose.theta)
    links = {
        name: Transform3(r[0, i], t[0, i]) for i, name in enumerate(model.link_names)
    }
    off = model.correspondence_offset
    local = np.array([[0.0, 0.0, 0.0], [off, 0.0, 0.0], [0.0, off, 0.0], [0.0, 0.0, off]])
    keypoints = {}
    for kp, li in model.keypoints.items():
        posed = links[model.link_names[li]].apply(local)
        keypoints[kp] = kabsch_umeyama(local, posed)
    return FrameSet(links=links, keypoints=keypoints)


def hand_keypoint_arrays(model: HandSkeletonModel, beta, theta, keypoint_order):
    """Batched keypoint frames (R (N,K,3,3), t (N,K,3)) in the given order."""
    r, t = hand_fk_batch(model, beta, theta)
    idx = np.asarray([model.keypoints[k] for k in keypoint_order], dtype=int)
    return r[:, idx], t[:, idx]


@dataclass
class HandSamplerConfig:
    """Synthetic pose distribution; a declared stand-in for estimator corpora.

    Flexion components of one finger share a latent curl drawn from a
    symmetric Beta(curl_shape, curl_shape); curl_shape < 1 puts extra mass on
    open hands and full fists, which is where retargeting is interesting.
    Every theta component has mean (lower+upper)/2 by symmetry and a variance
    derivable in closed form (used by the statistical sampler test).
    """

    curl_coupling: float = 0.7
    curl_shape: float = 0.5
    beta_std: float = 0.5
    beta_clip: float = 3.0

    def curl_variance(self) -> float:
        a = self.curl_shape
        return 1.0 / (4.0 * (2.0 * a + 1.0))

    def flexion_fraction_variance(self) -> float:
        rho = self.curl_coupling
        return rho * rho * self.curl_variance() + (1.0 - rho) * (1.0 - rho) / 12.0


def sample_hand_poses(model: HandSkeletonModel, n: int, rng_seed: int, config: HandSamplerConfig = None):
    """Draw n poses; deterministic given rng_seed.  Returns (beta (n,10), theta (n,45))."""
    if config is None:
        config = HandSamplerConfig()
    rng = np.random.default_rng(rng_seed)
    beta = rng.normal(0.0, config.beta_std, size=(n, 10))
    np.clip(beta, -config.beta_clip, config.beta_clip, out=beta)

    lower = model.lower  # (15, 3)
    upper = model.upper
    frac = rng.uniform(0.0, 1.0, size=(n, 15, 3))
    curl = rng.beta(config.curl_shape, config.curl_shape, size=(n, len(FINGER_ORDER)))
    rho = config.curl_coupling
    for f in range(len(FINGER_ORDER)):
        j0 = f * BALL_JOINTS_PER_FINGER
        for j in range(j0, j0 + BALL_JOINTS_PER_FINGER):
            frac[:, j, FLEXION_COMPONENT] = (
                rho * curl[:, f] + (1.0 - rho) * frac[:, j, FLEXION_COMPONENT]
            )
    theta = lower[None] + frac * (upper - lower)[None]
    return beta, theta.reshape(n, 45)


def sample_hand_pose(model: HandSkeletonModel, rng_seed: int, config: HandSamplerConfig = None) -> HumanHandPose:
    beta, theta = sample_hand_poses(model, 1, rng_seed, config)
    return HumanHandPose(beta=beta[0], theta=theta[0], phi=np.zeros(3))


@dataclass(frozen=True)
class BodySkeletonModel:
    """Torso-to-wrist path of the body skeleton; other joints parse and are ignored."""

    name: str
    link_names: tuple
    parents: np.ndarray
    offsets_r: np.ndarray
    offsets_t: np.ndarray
    theta_indices: np.ndarray  # (L,) index into the 24 pose rotations, -1 for none
    wrist_link: int
    joint_count: int = 24


def load_body_skeleton_model(text: str, *, source: str = "<string>") -> BodySkeletonModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"not valid JSON: {exc}", path=source)
    unknown = set(doc) - {"name", "links", "wrist_link", "joint_count"}
    if unknown:
        raise ModelParseError(f"unknown top-level keys {sorted(unknown)}", path=source)
    joint_count = int(doc.get("joint_count", 24))
    raw_links = doc.get("links")
    if not isinstance(raw_links, list) or not raw_links:
        raise ModelParseError("body skeleton needs links", path=source, field="links")
    link_names, parents, offs_r, offs_t, tidx = [], [], [], [], []
    index_of = {}
    for i, entry in enumerate(raw_links):
        lname = entry.get("name")
        if not isinstance(lname, str) or lname in index_of:
            raise ModelParseError("links need unique names", path=source, field=f"links[{i}]")
        parent = entry.get("parent")
        if parent is None:
            pidx = -1
            if i != 0:
                raise ModelParseError("only the first link may be the root", path=source, field=f"links[{i}]")
        elif parent in index_of:
            pidx = index_of[parent]
        else:
            raise ModelParseError(f"parent {parent!r} undefined", path=source, field=f"links[{i}]")
        ti = entry.get("theta_index")
        if ti is not None and not (0 <= int(ti) < joint_count):
            raise ModelParseError(
                f"theta_index {ti} outside 0..{joint_count - 1}", path=source, field=f"links[{i}]"
            )
        r, t = _parse_offset(entry.get("offset", {}), lname)
        index_of[lname] = i
        link_names.append(lname)
        parents.append(pidx)
        offs_r.append(r)
        offs_t.append(t)
        tidx.append(-1 if ti is None else int(ti))
    wrist = doc.get("wrist_link")
    if wrist not in index_of:
        raise ModelParseError(f"wrist_link {wrist!r} is not a link", path=source, field="wrist_link")
    return BodySkeletonModel(
        name=doc.get("name", ""),
        link_names=tuple(link_names),
        parents=np.asarray(parents, dtype=int),
        offsets_r=np.asarray(offs_r, dtype=float),
        offsets_t=np.asarray(offs_t, dtype=float),
        theta_indices=np.asarray(tidx, dtype=int),
        wrist_link=index_of[wrist],
        joint_count=joint_count,
    )


def wrist_relative_to_torso(model: BodySkeletonModel, pose: HumanBodyPose) -> Transform3:
    """Right-wrist frame in the torso frame: fixed bone offsets composed with
    the pose rotations along the torso-shoulder-elbow-wrist path."""
    n = len(model.link_names)
    rs = [None] * n
    ts = [None] * n
    for l in range(n):
        p = model.parents[l]
        if p == -1:
            rw, tw = model.offsets_r[l], model.offsets_t[l]
        else:
            rw = rs[p] @ model.offsets_r[l]
            tw = rs[p] @ model.offsets_t[l] + ts[p]
        ti = model.theta_indices[l]
        if ti >= 0:
            rw = rw @ pose.theta[ti]
        rs[l], ts[l] = rw, tw
    return Transform3(rs[model.wrist_link], ts[model.wrist_link])
