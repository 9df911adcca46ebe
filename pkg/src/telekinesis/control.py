"""Command smoothing: outlier clipping, EMA pose filtering, waypoint
interpolation, SDLS inverse kinematics, and interpolated hand streaming.

The stack exists to turn jumpy retargeter output into commands a physical
robot can track.  Every stage is bounded: clipping caps per-frame deltas, the
EMA low-passes what remains, interpolation respects step limits, and IK
clamps to joint limits on every iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .kinematics import KinematicChain, forward_kinematics, keypoint_jacobian
from .se3 import Transform3, rotation_from_rotvec, rotation_power, rotation_to_axis_angle


@dataclass
class SmootherState:
    """Per-stream filter state.  alpha blends toward the newest pose; clip
    thresholds reject estimator glitches before they reach the filter."""

    alpha: float = 0.25
    clip_pos: float = 0.10
    clip_rot: float = 0.5
    p_ema: Transform3 = None

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise InvalidInputError("alpha must lie in (0, 1]")


def clip_outlier(current: Transform3, proposed: Transform3, state: SmootherState) -> Transform3:
    """Clip the pose delta from current to proposed: translation to
    state.clip_pos along its direction, rotation to state.clip_rot about its axis."""
    dp = proposed.translation - current.translation
    dist = np.linalg.norm(dp)
    if dist > state.clip_pos:
        dp = dp * (state.clip_pos / dist)
    rel = proposed.rotation @ current.rotation.T
    aa = rotation_to_axis_angle(rel)
    if aa.angle > state.clip_rot:
        rel = rotation_from_rotvec(aa.axis * state.clip_rot)
    return Transform3(rel @ current.rotation, current.translation + dp)


def ema_update(state: SmootherState, p_new: Transform3) -> Transform3:
    """P_ema <- alpha * P_new + (1 - alpha) * P_ema.

    Translation blends linearly; rotation blends by fractional geodesic
    interpolation (matrix-entry averaging would break orthonormality).  The
    first call initialises the state and returns p_new unchanged.
    """
    if state.p_ema is None:
        state.p_ema = p_new
        return p_new
    t = state.alpha * p_new.translation + (1.0 - state.alpha) * state.p_ema.translation
    rel = p_new.rotation @ state.p_ema.rotation.T
    r = rotation_power(rel, state.alpha) @ state.p_ema.rotation
    state.p_ema = Transform3(r, t)
    return state.p_ema


def interpolate_waypoints(start: Transform3, goal: Transform3, max_step_pos: float, max_step_rot: float):
    """Minimal list of equally spaced waypoints from start to goal whose
    consecutive steps respect both bounds; the last element is goal exactly."""
    if not (max_step_pos > 0 and max_step_rot > 0):
        raise InvalidInputError("max_step components must be > 0")
    dp = goal.translation - start.translation
    dist = np.linalg.norm(dp)
    rel = goal.rotation @ start.rotation.T
    aa = rotation_to_axis_angle(rel)
    n = max(1, math.ceil(dist / max_step_pos - 1e-12), math.ceil(aa.angle / max_step_rot - 1e-12))
    waypoints = []
    for i in range(1, n):
        f = i / n
        r = rotation_from_rotvec(aa.axis * (aa.angle * f)) @ start.rotation
        waypoints.append(Transform3(r, start.translation + f * dp))
    waypoints.append(goal)
    return waypoints


def stream_hand_command(current: np.ndarray, target: np.ndarray, max_joint_step: float):
    """Per-joint linear interpolation toward target in steps of at most
    max_joint_step radians; the final frame equals target exactly."""
    if not max_joint_step > 0:
        raise InvalidInputError("max_joint_step must be > 0")
    current = np.asarray(current, dtype=float)
    target = np.asarray(target, dtype=float)
    if current.shape != target.shape:
        raise InvalidInputError("current and target lengths differ")
    delta = target - current
    n = max(1, int(np.ceil(np.abs(delta).max() / max_joint_step - 1e-12)))
    frames = [current + delta * (i / n) for i in range(1, n)]
    frames.append(target.copy())
    return frames


@dataclass
class IkSettings:
    max_iters: int = 200
    pos_tol: float = 1e-3
    rot_tol: float = 8.7e-3        # 0.5 degrees
    damping: float = 1e-3           # singular-value floor / DLS damping
    gamma_max: float = 0.7          # SDLS per-direction joint-change bound (rad)
    joint_caps: np.ndarray = None   # per-joint per-iteration change caps
    use_sdls: bool = True
    keypoint: str = None            # end-effector keypoint name; default: first bound
    err_clamp_pos: float = 0.15     # task-error clamp per iteration (m)
    err_clamp_rot: float = 0.75     # task-error clamp per iteration (rad)
    stall_window: int = 15          # iterations without progress before reseeding
    restart_probes: int = 32        # random configs scored per reseed
    restart_seed: int = 916

    @staticmethod
    def from_mapping(m: dict) -> "IkSettings":
        extra = set(m) - {"max_iters", "pos_tol_m", "rot_tol_rad", "damping", "gamma_max", "use_sdls"}
        if extra:
            raise InvalidInputError(f"unexpected ik keys {sorted(extra)}")
        return IkSettings(
            max_iters=int(m.get("max_iters", 200)),
            pos_tol=float(m.get("pos_tol_m", 5e-4)),
            rot_tol=float(m.get("rot_tol_rad", 5e-3)),
            damping=float(m.get("damping", 1e-3)),
            gamma_max=float(m.get("gamma_max", 0.7)),
            use_sdls=bool(m.get("use_sdls", True)),
        )

    def __post_init__(self):
        if not (self.pos_tol > 0 and self.rot_tol > 0):
            raise InvalidInputError("IK tolerances must be > 0")
        if self.max_iters <= 0:
            raise InvalidInputError("IK iteration budget must be > 0")


@dataclass
class IkResult:
    q: np.ndarray
    converged: bool
    pos_err: float
    rot_err: float
    iterations: int


def _clamp_mag(v: np.ndarray, bound: float) -> np.ndarray:
    m = np.linalg.norm(v)
    if m > bound:
        return v * (bound / m)
    return v


def _clamp_max_abs(v: np.ndarray, bound) -> np.ndarray:
    m = np.abs(v).max()
    if isinstance(bound, np.ndarray):
        f = np.min(np.where(np.abs(v) > 1e-15, bound / np.maximum(np.abs(v), 1e-15), np.inf))
        return v * min(1.0, f)
    if m > bound:
        return v * (bound / m)
    return v


def _pose_error(current: Transform3, target: Transform3):
    e_pos = target.translation - current.translation
    aa = rotation_to_axis_angle(target.rotation @ current.rotation.T)
    return e_pos, aa.axis * aa.angle, float(np.linalg.norm(e_pos)), float(aa.angle)


def _wrap_clamp(chain, q):
    q = np.mod(q + np.pi, 2.0 * np.pi) - np.pi
    return chain.clamp(q)


def _branch_flips(chain, q):
    """Heuristic solution-branch candidates of a 6-R arm: shoulder, elbow and
    wrist flips of q.  They are only approximate for chains with offsets, but
    they land close enough to the alternate basins to serve as probes."""
    nj = chain.joint_count
    out = []
    for sh in (False, True):
        for el in (False, True):
            for wr in (False, True):
                if not (sh or el or wr):
                    continue
                c = q.copy()
                if sh and nj >= 3:
                    c[0] += np.pi
                    c[1] = -c[1]
                    c[2] = -c[2]
                if el and nj >= 3:
                    c[2] = -c[2]
                if wr and nj >= 6:
                    c[3] += np.pi
                    c[4] = -c[4]
                    c[5] += np.pi
                out.append(_wrap_clamp(chain, c))
    return out


def _reseed_probe(chain, target_pose, kp, rng, n_probes, rot_scale, best_q):
    """Restart candidate for a stalled solve.

    The probe pool mixes branch flips of the best configuration so far,
    wrist-randomized variants of it (the common stall is a wrong wrist
    branch), and uniform random configurations.  The best probe by weighted
    task cost wins.
    """
    from .kinematics import fk_batch

    nj = chain.joint_count
    pool = [rng.uniform(chain.lower, chain.upper, size=(n_probes, nj))]
    if best_q is not None:
        if nj >= 3:
            wristy = np.tile(best_q, (n_probes // 2, 1))
            wristy[:, nj - 3 :] = rng.uniform(
                chain.lower[nj - 3 :], chain.upper[nj - 3 :], size=(len(wristy), 3)
            )
            pool.append(wristy)
        flips = _branch_flips(chain, best_q)
        if flips:
            pool.append(np.stack(flips))
    probes = np.concatenate(pool, axis=0)
    r, t = fk_batch(chain, probes)
    li = chain.keypoints[kp]
    dp = np.linalg.norm(t[:, li] - target_pose.translation, axis=1)
    rel_tr = np.einsum("nab,ab->n", r[:, li], target_pose.rotation)
    ang = np.arccos(np.clip(0.5 * (rel_tr - 1.0), -1.0, 1.0))
    cost = dp * dp + (rot_scale * ang) ** 2
    return probes[np.argmin(cost)]


def sdls_ik(chain: KinematicChain, q_seed, target, settings: IkSettings = None) -> IkResult:
    """Iterative inverse kinematics on the 6-D pose error.

    Rotation rows are weighted by the characteristic length pos_tol/rot_tol so
    that one unit of weighted error means the same thing for position and
    orientation (and the convergence ball is round in the weighted metric).
    With use_sdls, each singular direction of the weighted Jacobian gets its
    own trust-region bound scaled by how much joint motion it needs per unit
    of task motion (selective damping), which tames near-singular directions
    without a hard cutoff; the fallback is classic damped least squares.
    Steps are only accepted when they reduce the weighted cost (backtracking
    halves rejected steps), and a stalled solve is deterministically reseeded
    from scored probes inside the same iteration budget.  Joint limits are
    clamped every iteration, so the result never leaves them.
    Non-convergence is reported via the flag, never an exception: a
    teleoperation loop must keep streaming the best pose found.
    """
    if settings is None:
        settings = IkSettings()
    if isinstance(target, Transform3):
        target_pose = target
    else:
        target_pose = target.pose
    q = chain.clamp(chain.check_q(np.asarray(q_seed, dtype=float)).copy())
    kp = settings.keypoint or chain.keypoint_names[0]
    if kp not in chain.keypoints:
        raise InvalidInputError(f"chain has no keypoint {kp!r} for IK")
    rot_scale = settings.pos_tol / settings.rot_tol  # meters per radian

    def weighted_cost(pe, re_):
        return pe * pe + (rot_scale * re_) ** 2

    reseed_rng = np.random.default_rng(settings.restart_seed)
    best_q = q.copy()
    best_cost = np.inf
    best_err = (np.inf, np.inf)
    attempt_best = np.inf
    iterations = 0
    since_progress = 0
    for it in range(settings.max_iters):
        frames = forward_kinematics(chain, q)
        cur = frames.keypoints[kp]
        e_pos, e_rot, pos_err, rot_err = _pose_error(cur, target_pose)
        cost = weighted_cost(pos_err, rot_err)
        if cost < best_cost - 1e-18:
            best_cost = cost
            best_q = q.copy()
            best_err = (pos_err, rot_err)
        # Progress is judged per attempt: a reseeded run competes with its own
        # history, not the global best, so promising restarts are not cut short.
        if cost < attempt_best - 1e-18:
            attempt_best = cost
            since_progress = 0
        else:
            since_progress += 1
        if pos_err < settings.pos_tol and rot_err < settings.rot_tol:
            return IkResult(q=q, converged=True, pos_err=pos_err, rot_err=rot_err, iterations=it)
        iterations = it + 1
        if since_progress >= settings.stall_window:
            q = _reseed_probe(
                chain, target_pose, kp, reseed_rng, settings.restart_probes, rot_scale, best_q
            )
            since_progress = 0
            attempt_best = np.inf
            continue
        e_pos = _clamp_mag(e_pos, settings.err_clamp_pos)
        e_rot = _clamp_mag(e_rot, settings.err_clamp_rot)

        jac = keypoint_jacobian(chain, q)
        j = np.vstack([jac.position[kp], rot_scale * jac.angular[kp]])
        e = np.concatenate([e_pos, rot_scale * e_rot])
        u, s, vt = np.linalg.svd(j, full_matrices=False)
        if settings.use_sdls:
            col_norms = np.linalg.norm(j, axis=0)
            dq = np.zeros_like(q)
            for i in range(len(s)):
                if s[i] < 1e-9:
                    continue
                alpha = u[:, i] @ e
                w = (alpha / s[i]) * vt[i]
                # Buss-Kim selective bound: directions needing lots of joint
                # motion per unit task motion get a tighter cap, which is
                # what tames tiny singular values instead of a hard floor.
                m_i = (np.abs(vt[i]) * col_norms).sum() / s[i]
                gamma = settings.gamma_max * min(1.0, 1.0 / m_i)
                dq += _clamp_max_abs(w, gamma)
            dq = _clamp_max_abs(dq, settings.gamma_max)
        else:
            damped = s / (s * s + settings.damping * settings.damping)
            dq = vt.T @ (damped * (u.T @ e))
            dq = _clamp_max_abs(dq, settings.gamma_max)
        if settings.joint_caps is not None:
            dq = _clamp_max_abs(dq, np.asarray(settings.joint_caps, dtype=float))
        # Backtracking: only take steps that actually reduce the weighted
        # cost; an oscillating or limit-pinned step is halved away, and the
        # stall counter then drives the reseed logic.
        accepted = False
        scale = 1.0
        for _ in range(6):
            cand = chain.clamp(q + scale * dq)
            frames_c = forward_kinematics(chain, cand)
            _, _, pe_c, re_c = _pose_error(frames_c.keypoints[kp], target_pose)
            if weighted_cost(pe_c, re_c) < cost - 1e-20:
                q = cand
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            since_progress = settings.stall_window  # force a reseed next round

    return IkResult(
        q=best_q, converged=False, pos_err=best_err[0], rot_err=best_err[1], iterations=iterations
    )
