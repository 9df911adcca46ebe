"""The three hand retargeters and network training.

- retarget_gd: online gradient descent on the keyvector energy, warm-started
  from the previous frame's result (stateful; this is the mechanism that can
  leave it stuck in a basin across a pose sequence).
- retarget_nn: the trained MLP, stateless and fast.
- oracle_solve: multi-restart descent run to convergence, used as
  pseudo-ground-truth when comparing the other two.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .energy import (
    EnergyConfig,
    KeyVectorSet,
    energy_gradient_batch,
    residual_jacobian_batch,
    robot_keyvectors_batch,
)
from .errors import InvalidInputError, ModelParseError, NonFiniteLossError, SolverError, TrainingError
from .kinematics import KinematicChain
from .nets import Adam, Mlp, init_mlp, load_weights, mlp_from_arrays, mlp_to_arrays, save_weights

log = logging.getLogger(__name__)

NETWORK_INPUT_DIM = 55
HIDDEN_SIZES = (256, 256, 128)


@dataclass
class RetargeterNetwork:
    """MLP 55 -> 256 -> 256 -> 128 -> 16 with tanh activations throughout.

    The raw outputs are squashed by tanh and affinely rescaled per joint into
    [lower_i, upper_i], so outputs respect joint limits for any finite input.
    """

    mlp: Mlp
    lower: np.ndarray
    upper: np.ndarray

    @property
    def mid(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def half_range(self):
        return 0.5 * (self.upper - self.lower)

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != NETWORK_INPUT_DIM:
            raise InvalidInputError(f"retargeter input must have {NETWORK_INPUT_DIM} features")
        raw = self.mlp.forward(x)
        return self.mid + self.half_range * np.tanh(raw)


def scale_raw_output(raw: np.ndarray, lower: float, upper: float) -> float:
    """One raw network output -> joint angle: tanh then affine map into range."""
    s = np.tanh(raw)
    return 0.5 * (lower + upper) + 0.5 * (upper - lower) * s


def new_retargeter(chain: KinematicChain, seed: int) -> RetargeterNetwork:
    rng = np.random.default_rng(seed)
    sizes = [NETWORK_INPUT_DIM, *HIDDEN_SIZES, chain.joint_count]
    return RetargeterNetwork(mlp=init_mlp(sizes, rng), lower=chain.lower.copy(), upper=chain.upper.copy())


def retarget_nn(net: RetargeterNetwork, pose) -> np.ndarray:
    """Joint angles for one human hand pose; phi is not an input by design."""
    return net.forward_batch(pose.network_input()[None])[0]


def save_retargeter(net: RetargeterNetwork, path, extra_meta: dict = None):
    arrays = mlp_to_arrays(net.mlp)
    arrays["lower"] = net.lower
    arrays["upper"] = net.upper
    meta = {"kind": "retargeter", "layers": len(net.mlp.weights), "sizes": net.mlp.sizes}
    if extra_meta:
        meta.update(extra_meta)
    save_weights(path, arrays, meta)


def load_retargeter(path) -> RetargeterNetwork:
    arrays, meta = load_weights(path)
    if meta.get("kind") != "retargeter":
        raise ModelParseError(f"weight file at {path} is not a retargeter network")
    return RetargeterNetwork(
        mlp=mlp_from_arrays(arrays, meta["layers"]), lower=arrays["lower"], upper=arrays["upper"]
    )


@dataclass
class GdSolverState:
    """Warm-start state of the online solver; the first-frame seed is all zero."""

    q: np.ndarray = None
    learning_rate: float = 0.05
    steps_per_frame: int = 100

    def __post_init__(self):
        if self.q is None:
            self.q = np.zeros(16)
        self.q = np.asarray(self.q, dtype=float)


def retarget_gd(state: GdSolverState, human_kv: KeyVectorSet, chain: KinematicChain, cfg: EnergyConfig) -> np.ndarray:
    """Fixed-budget gradient descent from the stored seed; clamps to joint
    limits after every step and leaves the result as the next frame's seed."""
    q = state.q.copy()
    if q.shape != (chain.joint_count,):
        raise InvalidInputError("solver state length does not match the chain")
    hkv = human_kv.components
    lr = state.learning_rate
    for step in range(state.steps_per_frame):
        _, g = energy_gradient_batch(hkv, chain, q[None], cfg)
        if not np.all(np.isfinite(g)):
            raise SolverError(
                f"non-finite energy gradient at step {step} (q={q.tolist()})"
            )
        q = chain.clamp(q - lr * g[0])
    state.q = q.copy()
    return q


def retarget_gd_batch(
    q0: np.ndarray, human_kvs: np.ndarray, chain: KinematicChain, cfg: EnergyConfig,
    steps: int = 100, lr: float = 0.05,
) -> np.ndarray:
    """Vectorized fixed-budget GD: independent solves for each (seed, target) row."""
    q = np.array(q0, dtype=float, copy=True)
    for step in range(steps):
        _, g = energy_gradient_batch(human_kvs, chain, q, cfg)
        if not np.all(np.isfinite(g)):
            raise SolverError(f"non-finite energy gradient at batch step {step}")
        q = np.clip(q - lr * g, chain.lower, chain.upper)
    return q


@dataclass
class OracleSettings:
    """Budget-free solver settings; defaults match the evaluation protocol."""

    restarts: int = 8
    seed: int = 2022
    convergence_tol: float = 1e-10   # on the gradient norm
    plateau_tol: float = 1e-12       # energy change over a 100-step window
    gd_steps: int = 200              # adaptive-rate descent phase
    polish_steps: int = 150          # Gauss-Newton polish phase
    probe_samples: int = 256


def _oracle_seeds(
    human_kvs: np.ndarray, chain: KinematicChain, cfg: EnergyConfig, s: OracleSettings,
    extra_seeds=None,
):
    n = human_kvs.shape[0]
    rng = np.random.default_rng(s.seed)
    seeds = [np.zeros((n, chain.joint_count))]
    if s.probe_samples > 0:
        probes = rng.uniform(chain.lower, chain.upper, size=(s.probe_samples, chain.joint_count))
        vp = robot_keyvectors_batch(chain, probes, cfg.origin_frame)
        diff = human_kvs[:, None] - cfg.c[None, None, :, None] * vp[None]
        ep = np.einsum("npqa,npqa->np", diff, diff)
        seeds.append(probes[np.argmin(ep, axis=1)])
    while len(seeds) < s.restarts:
        seeds.append(rng.uniform(chain.lower, chain.upper, size=(n, chain.joint_count)))
    if extra_seeds is not None:
        seeds.append(np.atleast_2d(np.asarray(extra_seeds, dtype=float)))
    return np.concatenate(seeds, axis=0)


def oracle_solve_batch(
    human_kvs: np.ndarray, chain: KinematicChain, cfg: EnergyConfig,
    settings: OracleSettings = None, extra_seeds=None,
):
    """Pseudo-ground-truth solves for a batch of keyvector targets.

    Multi-restart descent: an adaptive-step gradient phase followed by a
    damped Gauss-Newton polish of the least-squares residual, run until the
    gradient-norm/plateau criteria.  Candidate steps are only ever accepted
    when they lower the energy, so the result can never be worse than any
    seed it was given.  Deterministic given the seed set.

    Returns (q (N, J), e (N,)).
    """
    if settings is None:
        settings = OracleSettings()
    human_kvs = np.atleast_2d(np.asarray(human_kvs, dtype=float))
    if human_kvs.ndim == 2:
        human_kvs = human_kvs[None]
    n = human_kvs.shape[0]
    q = _oracle_seeds(human_kvs, chain, cfg, settings, extra_seeds)
    m = q.shape[0]
    reps = m // n
    targets = np.tile(human_kvs, (reps, 1, 1))

    # Phase 1: gradient descent with per-instance adaptive rate.
    lr = np.full(m, 0.05)
    e, g = energy_gradient_batch(targets, chain, q, cfg)
    for _ in range(settings.gd_steps):
        cand = np.clip(q - lr[:, None] * g, chain.lower, chain.upper)
        e_new, g_new = energy_gradient_batch(targets, chain, cand, cfg)
        imp = e_new <= e
        q[imp] = cand[imp]
        e[imp] = e_new[imp]
        g[imp] = g_new[imp]
        lr = np.where(imp, np.minimum(lr * 1.25, 1e3), np.maximum(lr * 0.5, 1e-12))

    # Phase 2: damped Gauss-Newton on the keyvector residuals.
    mu = np.full(m, 1e-4)
    resid, jac, e = residual_jacobian_batch(targets, chain, q, cfg)
    eye = np.eye(chain.joint_count)
    active = np.ones(m, dtype=bool)
    window = e.copy()
    for step in range(settings.polish_steps):
        if not active.any():
            break
        idx = np.where(active)[0]
        jtj = np.einsum("nri,nrj->nij", jac[idx], jac[idx])
        jtr = np.einsum("nri,nr->ni", jac[idx], resid[idx])
        a = jtj + mu[idx, None, None] * eye
        dq = np.linalg.solve(a, -jtr[..., None])[..., 0]
        cand = np.clip(q[idx] + dq, chain.lower, chain.upper)
        resid_n, jac_n, e_n = residual_jacobian_batch(targets[idx], chain, cand, cfg)
        imp = e_n <= e[idx]
        acc = idx[imp]
        q[acc] = cand[imp]
        resid[acc] = resid_n[imp]
        jac[acc] = jac_n[imp]
        e[acc] = e_n[imp]
        mu[acc] = np.maximum(mu[acc] * 0.33, 1e-12)
        mu[idx[~imp]] = np.minimum(mu[idx[~imp]] * 3.0, 1e10)
        grad_norm = np.linalg.norm(2.0 * np.einsum("nri,nr->ni", jac[idx], resid[idx]), axis=1)
        done = grad_norm < settings.convergence_tol
        if step % 20 == 19:
            done |= (window[idx] - e[idx]) < settings.plateau_tol
            window[idx] = e[idx]
        active[idx[done]] = False

    e_r = e.reshape(reps, n)
    q_r = q.reshape(reps, n, chain.joint_count)
    best = np.argmin(e_r, axis=0)
    rows = np.arange(n)
    return q_r[best, rows], e_r[best, rows]


def oracle_solve(
    human_kv: KeyVectorSet, chain: KinematicChain, cfg: EnergyConfig,
    convergence_tol: float = None, settings: OracleSettings = None, extra_seeds=None,
) -> np.ndarray:
    """Best-found joint vector for one keyvector target (never raises: always
    returns the lowest-energy candidate seen)."""
    if settings is None:
        settings = OracleSettings()
    if convergence_tol is not None:
        settings = OracleSettings(**{**settings.__dict__, "convergence_tol": convergence_tol})
    q, _ = oracle_solve_batch(human_kv.components[None], chain, cfg, settings, extra_seeds)
    return q[0]


@dataclass
class TrainingRun:
    """One retargeter training job: inputs, targets, and hyperparameters.

    x holds the 55-dim network inputs; keyvectors the matching human
    keyvector targets.  collision_weight is the relative weight lambda in
    [0, 1].  The collision term is normalized against the keyvector loss
    scale: K = collision_norm_scale * (mean initial-network energy), so
    lambda orders penalty strength across a sweep while the absolute
    magnitude stays commensurate with the geometric cost of steering clear
    of collisions (the scale was calibrated by pilot sweeps; see ledger).
    """

    x: np.ndarray                 # (N, 55)
    keyvectors: np.ndarray        # (N, 10, 3)
    collision_weight: float = 0.0
    batch_size: int = 256
    epochs: int = 50
    seed: int = 7
    learning_rate: float = 1e-3
    collision_norm_scale: float = 0.05
    classifier: object = None     # frozen CollisionClassifier when lambda > 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.keyvectors = np.asarray(self.keyvectors, dtype=float)
        if not 0.0 <= self.collision_weight <= 1.0:
            raise TrainingError("collision weight lambda must lie in [0, 1]")


def train_retargeter(run: TrainingRun, chain: KinematicChain, cfg: EnergyConfig):
    """Minimise mean E(x, f(x)) + lambda*K*score(f(x)) over the network weights.

    Gradients flow through forward kinematics via the analytic keyvector
    Jacobian and through the frozen collision classifier into the network
    only.  Mini-batch Adam with a fixed step size; deterministic given
    run.seed.  Returns (network, per-epoch log records).
    """
    n = run.x.shape[0]
    if n == 0:
        raise TrainingError("training dataset is empty")
    if run.collision_weight > 0.0 and run.classifier is None:
        raise TrainingError("collision weight > 0 requires a frozen classifier")

    net = new_retargeter(chain, run.seed)
    rng = np.random.default_rng(run.seed + 1)
    opt = Adam(net.mlp.weights, lr=run.learning_rate)
    lam = run.collision_weight

    def batch_eval(x, kv, q):
        e, g_q = energy_gradient_batch(kv, chain, q, cfg)
        if lam > 0.0:
            s, g_s = run.classifier.score_and_gradient_batch(q)
        else:
            s = np.zeros(len(q))
            g_s = np.zeros_like(q)
        return e, g_q, s, g_s

    # Collision-term normalizer, anchored to the keyvector-loss scale of the
    # untrained network (first-epoch statistics).
    k_norm = 0.0
    if lam > 0.0:
        q0 = net.forward_batch(run.x)
        e0, _ = energy_gradient_batch(run.keyvectors, chain, q0, cfg)
        k_norm = run.collision_norm_scale * float(e0.mean())
        log.info("collision normalizer K = %.6g (mean initial E %.4g, scale %g)",
                 k_norm, e0.mean(), run.collision_norm_scale)

    records = []
    t0 = time.perf_counter()
    for epoch in range(run.epochs):
        order = rng.permutation(n)
        e_sum = 0.0
        s_sum = 0.0
        for bi, i in enumerate(range(0, n, run.batch_size)):
            sel = order[i : i + run.batch_size]
            xb = run.x[sel]
            kvb = run.keyvectors[sel]
            raw, acts = net.mlp.forward_cached(xb)
            th = np.tanh(raw)
            q = net.mid + net.half_range * th
            e, g_q, s, g_s = batch_eval(xb, kvb, q)
            loss = e.mean() + lam * k_norm * s.mean()
            if not np.isfinite(loss):
                raise NonFiniteLossError("training loss is not finite", epoch=epoch, batch=bi)
            d_q = (g_q + lam * k_norm * g_s) / len(sel)
            d_raw = d_q * net.half_range[None, :] * (1.0 - th * th)
            _, grads = net.mlp.backward(acts, d_raw)
            net.mlp.weights = opt.step(net.mlp.weights, grads)
            e_sum += e.sum()
            s_sum += s.sum()
        records.append(
            {
                "epoch": epoch,
                "mean_energy": e_sum / n,
                "mean_collision_score": s_sum / n,
                "wall_time": time.perf_counter() - t0,
            }
        )
    return net, records


def write_training_log(records, path):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
