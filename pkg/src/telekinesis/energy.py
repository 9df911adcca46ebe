"""Keyvector extraction and the human-robot pose dissimilarity energy.

Ten keyvectors connect the five hand keypoints: four finger-to-palm, three
inter-finger, three finger-to-thumb.  Each ordered pair has an origin and a
destination, and the vector is expressed in the origin keypoint's rotated
basis.  The energy is the sum of squared differences between the human
keyvectors and the scaled robot keyvectors; it is dimensionful (m^2) and not
normalized by the vector count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .kinematics import FrameSet, KinematicChain, fk_batch, jacobian_batch

KEYPOINT_ORDER = ("index_tip", "middle_tip", "ring_tip", "thumb_tip", "palm")

# (origin, destination) index pairs into KEYPOINT_ORDER.
PAIRS = (
    (0, 4), (1, 4), (2, 4), (3, 4),      # finger-to-palm
    (0, 1), (0, 2), (1, 2),              # inter-finger
    (0, 3), (1, 3), (2, 3),              # finger-to-thumb
)
PAIR_NAMES = tuple(
    f"{KEYPOINT_ORDER[o]}->{KEYPOINT_ORDER[d]}" for o, d in PAIRS
)
FINGER_PALM = slice(0, 4)
INTER_FINGER = slice(4, 7)
FINGER_THUMB = slice(7, 10)

_ORG = np.array([p[0] for p in PAIRS], dtype=int)
_DST = np.array([p[1] for p in PAIRS], dtype=int)


@dataclass(frozen=True)
class KeyVectorSet:
    """The 10 keyvectors of one hand, components in meters, canonical order."""

    components: np.ndarray  # (10, 3)

    def __post_init__(self):
        c = np.asarray(self.components, dtype=float)
        if c.shape != (10, 3):
            raise InvalidInputError("keyvector set must have shape (10, 3)")
        object.__setattr__(self, "components", c)

    @property
    def pairs(self):
        return tuple(
            (KEYPOINT_ORDER[o], KEYPOINT_ORDER[d], self.components[i])
            for i, (o, d) in enumerate(PAIRS)
        )

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.components, axis=1)


def default_scales() -> np.ndarray:
    """0.5 on finger-to-palm vectors, 0.8 on inter-finger and finger-to-thumb."""
    c = np.empty(10)
    c[FINGER_PALM] = 0.5
    c[INTER_FINGER] = 0.8
    c[FINGER_THUMB] = 0.8
    return c


@dataclass
class EnergyConfig:
    """Per-keyvector scaling constants; origin_frame=False switches the
    experimental root-frame coordinate mode (off by default)."""

    c: np.ndarray = field(default_factory=default_scales)
    origin_frame: bool = True

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        if self.c.shape != (10,) or not np.all(self.c > 0):
            raise InvalidInputError("energy scales must be 10 positive values")

    @staticmethod
    def from_mapping(m: dict) -> "EnergyConfig":
        if "c" in m:
            extra = set(m) - {"c", "origin_frame"}
            if extra:
                raise InvalidInputError(f"unexpected energy config keys {sorted(extra)}")
            return EnergyConfig(
                c=np.asarray(m["c"], dtype=float), origin_frame=bool(m.get("origin_frame", True))
            )
        extra = set(m) - {"finger_palm_scale", "inter_finger_scale", "finger_thumb_scale", "origin_frame"}
        if extra:
            raise InvalidInputError(f"unexpected energy config keys {sorted(extra)}")
        c = np.empty(10)
        c[FINGER_PALM] = float(m.get("finger_palm_scale", 0.5))
        c[INTER_FINGER] = float(m.get("inter_finger_scale", 0.8))
        c[FINGER_THUMB] = float(m.get("finger_thumb_scale", 0.8))
        return EnergyConfig(c=c, origin_frame=bool(m.get("origin_frame", True)))


def keyvectors_from_arrays(r_kp: np.ndarray, t_kp: np.ndarray, origin_frame: bool = True) -> np.ndarray:
    """Keyvectors from stacked keypoint frames.

    r_kp (..., 5, 3, 3) and t_kp (..., 5, 3) must follow KEYPOINT_ORDER.
    Returns (..., 10, 3).
    """
    d = t_kp[..., _DST, :] - t_kp[..., _ORG, :]
    if not origin_frame:
        return d
    r_org = r_kp[..., _ORG, :, :]
    return np.einsum("...ba,...b->...a", r_org, d)


def compute_keyvectors(frames: FrameSet, origin_frame: bool = True) -> KeyVectorSet:
    """Extract the canonical keyvector set from keypoint frames."""
    missing = [k for k in KEYPOINT_ORDER if k not in frames.keypoints]
    if missing:
        raise InvalidInputError(f"frames missing keypoints {missing}")
    r = np.stack([frames.keypoints[k].rotation for k in KEYPOINT_ORDER])
    t = np.stack([frames.keypoints[k].translation for k in KEYPOINT_ORDER])
    return KeyVectorSet(components=keyvectors_from_arrays(r, t, origin_frame))


def _kp_link_indices(chain: KinematicChain) -> np.ndarray:
    try:
        return np.asarray([chain.keypoints[k] for k in KEYPOINT_ORDER], dtype=int)
    except KeyError as exc:
        raise InvalidInputError(f"chain {chain.name!r} lacks keypoint {exc.args[0]!r}")


def _kp_jacobian_indices(chain: KinematicChain) -> np.ndarray:
    names = chain.keypoint_names
    return np.asarray([names.index(k) for k in KEYPOINT_ORDER], dtype=int)


def robot_keyvectors_batch(chain: KinematicChain, q: np.ndarray, origin_frame: bool = True) -> np.ndarray:
    """Robot keyvectors at q (N, J) -> (N, 10, 3)."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r, t = fk_batch(chain, q)
    idx = _kp_link_indices(chain)
    return keyvectors_from_arrays(r[:, idx], t[:, idx], origin_frame)


def energy_batch(human_kv: np.ndarray, chain: KinematicChain, q: np.ndarray, cfg: EnergyConfig) -> np.ndarray:
    """E = sum_i ||v_h_i - c_i * v_r_i(q)||^2 over a batch of (human_kv, q) rows."""
    human_kv = np.asarray(human_kv, dtype=float)
    q = np.atleast_2d(np.asarray(q, dtype=float))
    if human_kv.ndim == 2:
        human_kv = np.broadcast_to(human_kv, (q.shape[0], 10, 3))
    v = robot_keyvectors_batch(chain, q, cfg.origin_frame)
    diff = human_kv - cfg.c[None, :, None] * v
    return np.einsum("npa,npa->n", diff, diff)


def residual_jacobian_batch(human_kv: np.ndarray, chain: KinematicChain, q: np.ndarray, cfg: EnergyConfig):
    """Stacked keyvector residuals and their Jacobian, batched.

    The energy is a sum of squares of the 30 residual components
    r = v_h - c * v_r(q), which makes it a least-squares problem; solvers can
    consume (resid (N, 30), jac (N, 30, J), e (N,)) directly.  The Jacobian
    chains the analytic keypoint Jacobians through the keyvector expression:
    for origin-frame keyvectors,
    dv/dq_j = R_o^T (dp_d/dq_j - dp_o/dq_j) - R_o^T (w_j^o x (p_d - p_o)).
    """
    human_kv = np.asarray(human_kv, dtype=float)
    q = np.atleast_2d(np.asarray(q, dtype=float))
    n = q.shape[0]
    nj = chain.joint_count
    if human_kv.ndim == 2:
        human_kv = np.broadcast_to(human_kv, (n, 10, 3))
    r, t = fk_batch(chain, q)
    idx = _kp_link_indices(chain)
    r_kp, t_kp = r[:, idx], t[:, idx]
    pos, ang = jacobian_batch(chain, q, r, t)
    jidx = _kp_jacobian_indices(chain)
    pos, ang = pos[:, jidx], ang[:, jidx]      # (N, 5, 3, J) in KEYPOINT_ORDER

    d = t_kp[:, _DST] - t_kp[:, _ORG]          # (N, 10, 3)
    jd = pos[:, _DST] - pos[:, _ORG]           # (N, 10, 3, J)
    if cfg.origin_frame:
        r_org = r_kp[:, _ORG]                  # (N, 10, 3, 3)
        w_org = ang[:, _ORG]                   # (N, 10, 3, J)
        # cross(w_j, d) for each column j, then rotate into the origin basis.
        cr = np.cross(w_org.transpose(0, 1, 3, 2), d[:, :, None, :]).transpose(0, 1, 3, 2)
        dv = np.einsum("npba,npbj->npaj", r_org, jd - cr)
        v = np.einsum("npba,npb->npa", r_org, d)
    else:
        dv = jd
        v = d
    resid = human_kv - cfg.c[None, :, None] * v
    e = np.einsum("npa,npa->n", resid, resid)
    jac = (-cfg.c[None, :, None, None] * dv).reshape(n, 30, nj)
    return resid.reshape(n, 30), jac, e


def energy_gradient_batch(human_kv: np.ndarray, chain: KinematicChain, q: np.ndarray, cfg: EnergyConfig):
    """Energy and its gradient with respect to q, batched: (e (N,), grad (N, J))."""
    resid, jac, e = residual_jacobian_batch(human_kv, chain, q, cfg)
    grad = 2.0 * np.einsum("nri,nr->ni", jac, resid)
    return e, grad


def energy(human_kv: KeyVectorSet, chain: KinematicChain, q, cfg: EnergyConfig) -> float:
    """Scalar dissimilarity between a human keyvector set and robot joints q."""
    q = chain.check_q(np.asarray(q, dtype=float))
    if q.ndim != 1:
        raise InvalidInputError("energy takes a single joint vector")
    return float(energy_batch(human_kv.components, chain, q[None], cfg)[0])


def energy_gradient(human_kv: KeyVectorSet, chain: KinematicChain, q, cfg: EnergyConfig) -> np.ndarray:
    """dE/dq at a single joint vector; length equals the chain's joint count."""
    q = chain.check_q(np.asarray(q, dtype=float))
    if q.ndim != 1:
        raise InvalidInputError("energy_gradient takes a single joint vector")
    _, g = energy_gradient_batch(human_kv.components, chain, q[None], cfg)
    return g[0]
