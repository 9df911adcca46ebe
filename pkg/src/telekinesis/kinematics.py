"""Declarative revolute kinematic chains with analytic keypoint Jacobians.

A chain is an ordered tree of links, each with a fixed offset from its parent
and optionally one revolute joint rotating the link about a link-local axis:

    frame(link) = frame(parent) o offset o Rot(axis, q_joint)

Joint limits are stored but never enforced by forward kinematics: commanding
penetration poses is legal and is how the hand squeezes objects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidInputError, ModelParseError
from .se3 import Transform3, axis_angle_to_rotation, AxisAngle, skew


@dataclass(frozen=True)
class KinematicChain:
    """Immutable articulated-body description (links, joints, keypoint bindings)."""

    name: str
    link_names: tuple
    parents: np.ndarray          # (L,) int, -1 for the root
    offsets_r: np.ndarray        # (L, 3, 3) fixed rotation to parent
    offsets_t: np.ndarray        # (L, 3) fixed translation to parent
    joint_link: np.ndarray       # (J,) link index each joint rotates
    joint_axes: np.ndarray       # (J, 3) unit axes, link-local
    lower: np.ndarray            # (J,) radians
    upper: np.ndarray            # (J,) radians
    keypoints: dict              # keypoint name -> link index
    joint_of_link: np.ndarray = field(repr=False, default=None)
    ancestor_mask: np.ndarray = field(repr=False, default=None)  # (J, L) bool

    @property
    def joint_count(self) -> int:
        return len(self.joint_link)

    @property
    def link_count(self) -> int:
        return len(self.link_names)

    @property
    def keypoint_names(self) -> tuple:
        return tuple(self.keypoints)

    def link_index(self, name: str) -> int:
        return self.link_names.index(name)

    def clamp(self, q: np.ndarray) -> np.ndarray:
        """Clip joint values into [lower, upper], elementwise."""
        return np.clip(q, self.lower, self.upper)

    def check_q(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape[-1] != self.joint_count:
            raise InvalidInputError(
                f"chain {self.name!r} has {self.joint_count} joints, got q of length {q.shape[-1]}"
            )
        if not np.all(np.isfinite(q)):
            raise InvalidInputError("joint vector must be finite")
        return q


@dataclass(frozen=True)
class FrameSet:
    """World frames of every link plus every bound keypoint, in the root frame."""

    links: dict
    keypoints: dict


@dataclass(frozen=True)
class KeypointJacobians:
    """Analytic geometric Jacobians of keypoint frames.

    position[name] is the (3, J) matrix of d(origin)/dq.  angular[name] is the
    (3, J) matrix of joint angular-velocity axes (zero columns for joints that
    are not ancestors); the derivative of any direction u fixed in the keypoint
    frame is cross(angular[:, j], u_world).
    """

    position: dict
    angular: dict


def _parse_offset(entry, link_name):
    if not isinstance(entry, dict):
        raise ModelParseError("offset must be an object", field=f"links[{link_name}].offset")
    unknown = set(entry) - {"translation", "rotation_axis_angle"}
    if unknown:
        raise ModelParseError(
            f"unknown offset keys {sorted(unknown)}", field=f"links[{link_name}].offset"
        )
    t = np.asarray(entry.get("translation", [0.0, 0.0, 0.0]), dtype=float)
    if t.shape != (3,) or not np.all(np.isfinite(t)):
        raise ModelParseError(
            "translation must be a finite [x, y, z]", field=f"links[{link_name}].offset.translation"
        )
    raa = entry.get("rotation_axis_angle", [0.0, 0.0, 1.0, 0.0])
    raa = np.asarray(raa, dtype=float)
    if raa.shape != (4,) or not np.all(np.isfinite(raa)):
        raise ModelParseError(
            "rotation_axis_angle must be a finite [ax, ay, az, theta]",
            field=f"links[{link_name}].offset.rotation_axis_angle",
        )
    try:
        r = axis_angle_to_rotation(AxisAngle(raa[:3], raa[3]))
    except InvalidInputError as exc:
        raise ModelParseError(str(exc), field=f"links[{link_name}].offset.rotation_axis_angle")
    return r, t


def load_chain(model_document: str, *, source: str = "<string>") -> KinematicChain:
    """Parse and validate a chain description (JSON text, schema in the docs).

    Raises ModelParseError naming the offending field for schema violations,
    cyclic/unsorted parentage, bad joint limits, or dangling keypoint bindings.
    """
    try:
        doc = json.loads(model_document)
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"not valid JSON: {exc}", path=source)
    if not isinstance(doc, dict):
        raise ModelParseError("top level must be an object", path=source)
    unknown = set(doc) - {"name", "links", "joints", "keypoints"}
    if unknown:
        raise ModelParseError(f"unknown top-level keys {sorted(unknown)}", path=source)
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        raise ModelParseError("chain needs a non-empty string 'name'", path=source, field="name")

    raw_links = doc.get("links")
    if not isinstance(raw_links, list) or not raw_links:
        raise ModelParseError("chain needs a non-empty 'links' list", path=source, field="links")

    link_names = []
    parents = []
    offs_r = []
    offs_t = []
    index_of = {}
    for i, entry in enumerate(raw_links):
        if not isinstance(entry, dict):
            raise ModelParseError("link must be an object", path=source, field=f"links[{i}]")
        unknown = set(entry) - {"name", "parent", "offset"}
        if unknown:
            raise ModelParseError(
                f"unknown link keys {sorted(unknown)}", path=source, field=f"links[{i}]"
            )
        lname = entry.get("name")
        if not isinstance(lname, str) or not lname:
            raise ModelParseError("link needs a name", path=source, field=f"links[{i}].name")
        if lname in index_of:
            raise ModelParseError(f"duplicate link name {lname!r}", path=source, field=f"links[{i}].name")
        parent = entry.get("parent")
        if parent is None:
            if i != 0:
                raise ModelParseError(
                    f"link {lname!r} has no parent but is not the root (only the first link may)",
                    path=source,
                    field=f"links[{i}].parent",
                )
            pidx = -1
        else:
            if parent not in index_of:
                raise ModelParseError(
                    f"link {lname!r} references parent {parent!r} that is not defined earlier "
                    "(links must be topologically sorted; cycles are impossible in sorted order)",
                    path=source,
                    field=f"links[{i}].parent",
                )
            pidx = index_of[parent]
        r, t = _parse_offset(entry.get("offset", {}), lname)
        index_of[lname] = i
        link_names.append(lname)
        parents.append(pidx)
        offs_r.append(r)
        offs_t.append(t)

    raw_joints = doc.get("joints", [])
    if not isinstance(raw_joints, list):
        raise ModelParseError("'joints' must be a list", path=source, field="joints")
    joint_link = []
    joint_axes = []
    lower = []
    upper = []
    jointed = set()
    for j, entry in enumerate(raw_joints):
        if not isinstance(entry, dict):
            raise ModelParseError("joint must be an object", path=source, field=f"joints[{j}]")
        unknown = set(entry) - {"link", "axis", "lower", "upper"}
        if unknown:
            raise ModelParseError(
                f"unknown joint keys {sorted(unknown)}", path=source, field=f"joints[{j}]"
            )
        lname = entry.get("link")
        if lname not in index_of:
            raise ModelParseError(
                f"joint references unknown link {lname!r}", path=source, field=f"joints[{j}].link"
            )
        if lname in jointed:
            raise ModelParseError(
                f"link {lname!r} already has a joint", path=source, field=f"joints[{j}].link"
            )
        axis = np.asarray(entry.get("axis", []), dtype=float)
        if axis.shape != (3,) or not np.all(np.isfinite(axis)) or np.linalg.norm(axis) < 1e-12:
            raise ModelParseError(
                "joint axis must be a finite nonzero 3-vector", path=source, field=f"joints[{j}].axis"
            )
        try:
            lo = float(entry["lower"])
            hi = float(entry["upper"])
        except (KeyError, TypeError, ValueError):
            raise ModelParseError(
                "joint needs numeric 'lower' and 'upper'", path=source, field=f"joints[{j}]"
            )
        if not (np.isfinite(lo) and np.isfinite(hi)) or not lo < hi:
            raise ModelParseError(
                f"joint limits must satisfy lower < upper, got [{lo}, {hi}]",
                path=source,
                field=f"joints[{j}]",
            )
        jointed.add(lname)
        joint_link.append(index_of[lname])
        joint_axes.append(axis / np.linalg.norm(axis))
        lower.append(lo)
        upper.append(hi)

    raw_kp = doc.get("keypoints", {})
    if not isinstance(raw_kp, dict):
        raise ModelParseError("'keypoints' must be an object", path=source, field="keypoints")
    keypoints = {}
    for kp_name, lname in raw_kp.items():
        if lname not in index_of:
            raise ModelParseError(
                f"keypoint {kp_name!r} binds to unknown link {lname!r}",
                path=source,
                field=f"keypoints.{kp_name}",
            )
        keypoints[kp_name] = index_of[lname]

    parents_arr = np.asarray(parents, dtype=int)
    joint_link_arr = np.asarray(joint_link, dtype=int)
    n_links = len(link_names)
    joint_of_link = np.full(n_links, -1, dtype=int)
    for j, l in enumerate(joint_link):
        joint_of_link[l] = j

    # ancestor_mask[j, l]: joint j's link is l or an ancestor of l.
    n_joints = len(joint_link)
    mask = np.zeros((max(n_joints, 1), n_links), dtype=bool)[:n_joints]
    for l in range(n_links):
        a = l
        while a != -1:
            j = joint_of_link[a]
            if j >= 0:
                mask[j, l] = True
            a = parents_arr[a]

    return KinematicChain(
        name=name,
        link_names=tuple(link_names),
        parents=parents_arr,
        offsets_r=np.asarray(offs_r, dtype=float),
        offsets_t=np.asarray(offs_t, dtype=float),
        joint_link=joint_link_arr,
        joint_axes=np.asarray(joint_axes, dtype=float).reshape(n_joints, 3),
        lower=np.asarray(lower, dtype=float),
        upper=np.asarray(upper, dtype=float),
        keypoints=keypoints,
        joint_of_link=joint_of_link,
        ancestor_mask=mask,
    )


def _joint_rotations(chain: KinematicChain, q: np.ndarray) -> np.ndarray:
    """Batched Rodrigues: rotation of each joint for each row of q (N, J, 3, 3)."""
    axes = chain.joint_axes
    n, j = q.shape
    if j == 0:
        return np.zeros((n, 0, 3, 3))
    k = np.stack([skew(a) for a in axes])          # (J, 3, 3)
    kk = np.einsum("jab,jbc->jac", k, k)
    s = np.sin(q)[:, :, None, None]
    c = (1.0 - np.cos(q))[:, :, None, None]
    return np.eye(3) + s * k[None] + c * kk[None]


def fk_batch(chain: KinematicChain, q: np.ndarray):
    """Forward kinematics over a batch: q (N, J) -> (R (N, L, 3, 3), t (N, L, 3))."""
    q = chain.check_q(q)
    single = q.ndim == 1
    if single:
        q = q[None, :]
    n = q.shape[0]
    rj = _joint_rotations(chain, q)
    r = np.empty((n, chain.link_count, 3, 3))
    t = np.empty((n, chain.link_count, 3))
    for l in range(chain.link_count):
        p = chain.parents[l]
        if p == -1:
            rw = np.broadcast_to(chain.offsets_r[l], (n, 3, 3))
            tw = np.broadcast_to(chain.offsets_t[l], (n, 3))
        else:
            rw = r[:, p] @ chain.offsets_r[l]
            tw = np.einsum("nab,b->na", r[:, p], chain.offsets_t[l]) + t[:, p]
        j = chain.joint_of_link[l]
        if j >= 0:
            rw = rw @ rj[:, j]
        r[:, l] = rw
        t[:, l] = tw
    return r, t


def forward_kinematics(chain: KinematicChain, q) -> FrameSet:
    """World frame of every link and bound keypoint at joint vector q."""
    q = chain.check_q(np.asarray(q, dtype=float))
    if q.ndim != 1:
        raise InvalidInputError("forward_kinematics takes a single joint vector")
    r, t = fk_batch(chain, q)
    links = {
        name: Transform3(r[0, i], t[0, i]) for i, name in enumerate(chain.link_names)
    }
    keypoints = {kp: links[chain.link_names[li]] for kp, li in chain.keypoints.items()}
    return FrameSet(links=links, keypoints=keypoints)


def jacobian_batch(chain: KinematicChain, q: np.ndarray, r=None, t=None):
    """Position and angular Jacobians of every bound keypoint, batched.

    Returns (pos (N, K, 3, J), ang (N, K, 3, J)) with keypoints ordered as in
    chain.keypoint_names.  Columns of joints that are not ancestors of the
    keypoint's link are exactly zero.
    """
    q = chain.check_q(q)
    single = q.ndim == 1
    if single:
        q = q[None, :]
    if r is None or t is None:
        r, t = fk_batch(chain, q)
    n = q.shape[0]
    nj = chain.joint_count
    kp_links = np.asarray(list(chain.keypoints.values()), dtype=int)
    nk = len(kp_links)
    pos = np.zeros((n, nk, 3, nj))
    ang = np.zeros((n, nk, 3, nj))
    if nj == 0 or nk == 0:
        return pos, ang
    # World joint axes and anchor points.
    axes_w = np.einsum("nlab,lb->nla", r[:, chain.joint_link], chain.joint_axes)  # (N, J, 3)
    anchors = t[:, chain.joint_link]                                              # (N, J, 3)
    p_kp = t[:, kp_links]                                                         # (N, K, 3)
    mask = chain.ancestor_mask[:, kp_links].T                                     # (K, J)
    arm = p_kp[:, :, None, :] - anchors[:, None, :, :]                            # (N, K, J, 3)
    cross = np.cross(axes_w[:, None, :, :], arm)                                  # (N, K, J, 3)
    pos = np.where(mask[None, :, :, None], cross, 0.0).transpose(0, 1, 3, 2)
    ang = np.where(mask[None, :, :, None], axes_w[:, None, :, :], 0.0).transpose(0, 1, 3, 2)
    return pos, ang


def keypoint_jacobian(chain: KinematicChain, q) -> KeypointJacobians:
    """Analytic keypoint Jacobians at a single joint vector."""
    q = chain.check_q(np.asarray(q, dtype=float))
    if q.ndim != 1:
        raise InvalidInputError("keypoint_jacobian takes a single joint vector")
    pos, ang = jacobian_batch(chain, q)
    names = chain.keypoint_names
    return KeypointJacobians(
        position={name: pos[0, i] for i, name in enumerate(names)},
        angular={name: ang[0, i] for i, name in enumerate(names)},
    )
