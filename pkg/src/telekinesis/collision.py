"""Capsule-based self-collision ground truth, labeled data generation, and the
differentiable self-collision classifier.

The geometric checker is the non-differentiable truth; the classifier is its
smooth surrogate, trained once, then frozen and used as a penalty when
training the retargeter.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ModelParseError, TrainingError
from .kinematics import KinematicChain, fk_batch
from .nets import Adam, Mlp, init_mlp, load_weights, mlp_from_arrays, mlp_to_arrays, save_weights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Capsule:
    link: str
    a: np.ndarray
    b: np.ndarray
    radius: float


@dataclass(frozen=True)
class CollisionGeometry:
    """Per-link capsules plus pairs that are never tested against each other.

    Adjacent parent-child link pairs are always excluded (they touch at the
    joint by construction); exclude_pairs lists extra exclusions by link name.
    """

    chain_name: str
    capsules: tuple
    exclude_pairs: frozenset


def load_collision_geometry(text: str, *, source: str = "<string>") -> CollisionGeometry:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"not valid JSON: {exc}", path=source)
    unknown = set(doc) - {"chain", "capsules", "exclude_pairs"}
    if unknown:
        raise ModelParseError(f"unknown top-level keys {sorted(unknown)}", path=source)
    caps = []
    for i, entry in enumerate(doc.get("capsules", [])):
        a = np.asarray(entry.get("a"), dtype=float)
        b = np.asarray(entry.get("b"), dtype=float)
        r = float(entry.get("radius", 0.0))
        link = entry.get("link")
        if a.shape != (3,) or b.shape != (3,) or not isinstance(link, str):
            raise ModelParseError("capsule needs link, a[3], b[3]", path=source, field=f"capsules[{i}]")
        if not r > 0:
            raise ModelParseError("capsule radius must be > 0", path=source, field=f"capsules[{i}].radius")
        caps.append(Capsule(link=link, a=a, b=b, radius=r))
    excl = frozenset(frozenset(p) for p in doc.get("exclude_pairs", []))
    return CollisionGeometry(
        chain_name=doc.get("chain", ""), capsules=tuple(caps), exclude_pairs=excl
    )


@dataclass
class _BoundGeometry:
    """Geometry resolved against a chain: arrays ready for batched checking."""

    link_idx: np.ndarray     # (C,)
    a_local: np.ndarray      # (C, 3)
    b_local: np.ndarray      # (C, 3)
    radius: np.ndarray       # (C,)
    pair_i: np.ndarray       # (P,)
    pair_j: np.ndarray       # (P,)
    radius_sum: np.ndarray   # (P,)
    pair_links: list         # [(name_i, name_j)]


def bind_geometry(geom: CollisionGeometry, chain: KinematicChain) -> _BoundGeometry:
    index_of = {n: i for i, n in enumerate(chain.link_names)}
    for cap in geom.capsules:
        if cap.link not in index_of:
            raise InvalidInputError(
                f"collision geometry references link {cap.link!r} not in chain {chain.name!r}"
            )
    if geom.chain_name and geom.chain_name != chain.name:
        raise InvalidInputError(
            f"collision geometry is for chain {geom.chain_name!r}, got {chain.name!r}"
        )
    caps = geom.capsules
    li = np.asarray([index_of[c.link] for c in caps], dtype=int)
    pi, pj, pl = [], [], []
    for i in range(len(caps)):
        for j in range(i + 1, len(caps)):
            a, b = li[i], li[j]
            if a == b:
                continue
            if chain.parents[a] == b or chain.parents[b] == a:
                continue
            if frozenset((caps[i].link, caps[j].link)) in geom.exclude_pairs:
                continue
            pi.append(i)
            pj.append(j)
            pl.append((caps[i].link, caps[j].link))
    rad = np.asarray([c.radius for c in caps])
    pi = np.asarray(pi, dtype=int)
    pj = np.asarray(pj, dtype=int)
    return _BoundGeometry(
        link_idx=li,
        a_local=np.stack([c.a for c in caps]),
        b_local=np.stack([c.b for c in caps]),
        radius=rad,
        pair_i=pi,
        pair_j=pj,
        radius_sum=rad[pi] + rad[pj],
        pair_links=pl,
    )


def segment_segment_distance(p1, q1, p2, q2):
    """Closest distance between segments [p1,q1] and [p2,q2], broadcast over
    leading axes (closed-form clamped projection)."""
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.einsum("...a,...a->...", d1, d1)
    e = np.einsum("...a,...a->...", d2, d2)
    f = np.einsum("...a,...a->...", d2, r)
    c = np.einsum("...a,...a->...", d1, r)
    b = np.einsum("...a,...a->...", d1, d2)
    denom = a * e - b * b
    safe = np.where(denom > 1e-14, denom, 1.0)
    s = np.where(denom > 1e-14, np.clip((b * f - c * e) / safe, 0.0, 1.0), 0.0)
    e_safe = np.where(e > 1e-14, e, 1.0)
    t = (b * s + f) / e_safe
    a_safe = np.where(a > 1e-14, a, 1.0)
    s = np.where(t < 0.0, np.clip(-c / a_safe, 0.0, 1.0), s)
    s = np.where(t > 1.0, np.clip((b - c) / a_safe, 0.0, 1.0), s)
    t = np.clip(t, 0.0, 1.0)
    cp1 = p1 + s[..., None] * d1
    cp2 = p2 + t[..., None] * d2
    return np.linalg.norm(cp1 - cp2, axis=-1)


def pair_margins_batch(bound: _BoundGeometry, chain: KinematicChain, q: np.ndarray) -> np.ndarray:
    """Distance minus radius sum for every checked capsule pair: (N, P).

    Negative entries are penetrating pairs.
    """
    q = np.atleast_2d(chain.check_q(q))
    r, t = fk_batch(chain, q)
    rl = r[:, bound.link_idx]
    tl = t[:, bound.link_idx]
    aw = np.einsum("ncab,cb->nca", rl, bound.a_local) + tl
    bw = np.einsum("ncab,cb->nca", rl, bound.b_local) + tl
    d = segment_segment_distance(
        aw[:, bound.pair_i], bw[:, bound.pair_i], aw[:, bound.pair_j], bw[:, bound.pair_j]
    )
    return d - bound.radius_sum[None, :]


def check_self_collision(geom: CollisionGeometry, chain: KinematicChain, q) -> bool:
    """True iff any non-excluded capsule pair penetrates under FK at q."""
    bound = geom if isinstance(geom, _BoundGeometry) else bind_geometry(geom, chain)
    q = chain.check_q(np.asarray(q, dtype=float))
    if q.ndim != 1:
        raise InvalidInputError("check_self_collision takes a single joint vector")
    return bool(pair_margins_batch(bound, chain, q[None]).min() < 0.0)


def collision_mask_batch(geom, chain: KinematicChain, q: np.ndarray) -> np.ndarray:
    bound = geom if isinstance(geom, _BoundGeometry) else bind_geometry(geom, chain)
    return pair_margins_batch(bound, chain, q).min(axis=1) < 0.0


@dataclass
class LabeledConfigSet:
    """Uniform in-limit joint samples with geometric self-collision labels."""

    q: np.ndarray        # (n, J)
    labels: np.ndarray   # (n,) bool
    seed: int = 0

    @property
    def positive_fraction(self) -> float:
        return float(self.labels.mean()) if len(self.labels) else 0.0

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow([f"q{i}" for i in range(self.q.shape[1])] + ["label"])
            for row, lab in zip(self.q, self.labels):
                writer.writerow([repr(v) for v in row] + [int(lab)])

    @staticmethod
    def load_csv(path) -> "LabeledConfigSet":
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            nq = len(header) - 1
            qs, labs = [], []
            for row in reader:
                qs.append([float(v) for v in row[:nq]])
                labs.append(bool(int(row[nq])))
        return LabeledConfigSet(q=np.asarray(qs), labels=np.asarray(labs, dtype=bool))


def generate_labeled_configs(
    geom: CollisionGeometry, chain: KinematicChain, n: int, rng_seed: int
) -> LabeledConfigSet:
    """n uniform in-limit samples labeled by the capsule checker; seeded."""
    if n <= 0:
        raise InvalidInputError("n must be positive")
    bound = bind_geometry(geom, chain)
    rng = np.random.default_rng(rng_seed)
    q = rng.uniform(chain.lower, chain.upper, size=(n, chain.joint_count))
    labels = np.empty(n, dtype=bool)
    step = 20000
    for i in range(0, n, step):
        labels[i : i + step] = collision_mask_batch(bound, chain, q[i : i + step])
    out = LabeledConfigSet(q=q, labels=labels, seed=rng_seed)
    log.info(
        "generated %d labeled configs (seed %d): %.1f%% colliding",
        n,
        rng_seed,
        100.0 * out.positive_fraction,
    )
    return out


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class CollisionClassifier:
    """MLP scoring joint vectors for self-collision; output in (0, 1).

    Inputs are normalized to [-1, 1] per joint using the limits captured at
    training time, which keeps the score gradient well-scaled across joints.
    """

    mlp: Mlp
    lower: np.ndarray
    upper: np.ndarray
    holdout_accuracy: float = float("nan")

    def _normalize(self, q):
        mid = 0.5 * (self.lower + self.upper)
        half = 0.5 * (self.upper - self.lower)
        return (q - mid) / half

    def scores_batch(self, q: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=float))
        return _sigmoid(self.mlp.forward(self._normalize(q))[:, 0])

    def score_and_gradient_batch(self, q: np.ndarray):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        x = self._normalize(q)
        raw, acts = self.mlp.forward_cached(x)
        s = _sigmoid(raw[:, 0])
        d_raw = (s * (1.0 - s))[:, None]
        d_x, _ = self.mlp.backward(acts, d_raw)
        half = 0.5 * (self.upper - self.lower)
        return s, d_x / half[None, :]


def collision_score_and_gradient(clf: CollisionClassifier, q):
    """Forward score plus the exact input-gradient of the score at one q."""
    q = np.asarray(q, dtype=float)
    if q.ndim != 1:
        raise InvalidInputError("collision_score_and_gradient takes a single joint vector")
    s, g = clf.score_and_gradient_batch(q[None])
    return float(s[0]), g[0]


@dataclass
class CollisionTrainConfig:
    hidden: tuple = (128, 128)
    epochs: int = 60
    batch_size: int = 1024
    learning_rate: float = 2e-3
    lr_decay: float = 0.3          # applied at 60% and 85% of the epoch budget
    seed: int = 7
    holdout_fraction: float = 0.1

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        if epoch >= int(0.6 * self.epochs):
            lr *= self.lr_decay
        if epoch >= int(0.85 * self.epochs):
            lr *= self.lr_decay
        return lr


def train_collision_classifier(
    data: LabeledConfigSet, hp: CollisionTrainConfig, chain: KinematicChain
) -> CollisionClassifier:
    """Weighted binary cross-entropy training of the collision MLP.

    The minority class is reweighted so both classes contribute equally to
    the loss regardless of the sampled balance; training is deterministic
    given hp.seed.  Raises TrainingError for single-class data.
    """
    y = data.labels.astype(float)
    n = len(y)
    if n == 0 or y.min() == y.max():
        raise TrainingError("collision training needs both classes present")
    rng = np.random.default_rng(hp.seed)
    perm = rng.permutation(n)
    n_hold = max(1, int(n * hp.holdout_fraction))
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    if y[train_idx].min() == y[train_idx].max():
        raise TrainingError("training split collapsed to a single class")

    clf = CollisionClassifier(
        mlp=init_mlp([chain.joint_count, *hp.hidden, 1], rng),
        lower=chain.lower.copy(),
        upper=chain.upper.copy(),
    )
    x_all = clf._normalize(data.q)
    n_pos = y[train_idx].sum()
    n_neg = len(train_idx) - n_pos
    w_pos = len(train_idx) / (2.0 * n_pos)
    w_neg = len(train_idx) / (2.0 * n_neg)
    log.info("collision classes: %.1f%% positive; weights pos=%.3f neg=%.3f",
             100.0 * n_pos / len(train_idx), w_pos, w_neg)

    opt = Adam(clf.mlp.weights, lr=hp.learning_rate)
    for epoch in range(hp.epochs):
        opt.lr = hp.lr_at(epoch)
        order = train_idx[rng.permutation(len(train_idx))]
        for i in range(0, len(order), hp.batch_size):
            sel = order[i : i + hp.batch_size]
            xb, yb = x_all[sel], y[sel]
            raw, acts = clf.mlp.forward_cached(xb)
            s = _sigmoid(raw[:, 0])
            w = np.where(yb > 0.5, w_pos, w_neg)
            # d(weighted BCE)/d(raw) = w * (sigmoid - y) / batch
            d_raw = (w * (s - yb) / len(sel))[:, None]
            _, grads = clf.mlp.backward(acts, d_raw)
            clf.mlp.weights = opt.step(clf.mlp.weights, grads)

    pred = clf.scores_batch(data.q[hold_idx]) > 0.5
    clf.holdout_accuracy = float((pred == data.labels[hold_idx]).mean())
    log.info("collision classifier held-out accuracy: %.4f", clf.holdout_accuracy)
    return clf


def training_loss_curve(
    data: LabeledConfigSet, hp: CollisionTrainConfig, chain: KinematicChain
) -> np.ndarray:
    """Per-epoch full-dataset weighted BCE, for optimizer sanity checks."""
    y = data.labels.astype(float)
    if len(y) == 0 or y.min() == y.max():
        raise TrainingError("collision training needs both classes present")
    rng = np.random.default_rng(hp.seed)
    clf = CollisionClassifier(
        mlp=init_mlp([chain.joint_count, *hp.hidden, 1], rng),
        lower=chain.lower.copy(),
        upper=chain.upper.copy(),
    )
    x = clf._normalize(data.q)
    n_pos = y.sum()
    w_pos = len(y) / (2.0 * n_pos)
    w_neg = len(y) / (2.0 * (len(y) - n_pos))
    w = np.where(y > 0.5, w_pos, w_neg)

    def full_loss():
        s = np.clip(_sigmoid(clf.mlp.forward(x)[:, 0]), 1e-12, 1.0 - 1e-12)
        return float(-(w * (y * np.log(s) + (1 - y) * np.log(1 - s))).mean())

    losses = [full_loss()]
    opt = Adam(clf.mlp.weights, lr=hp.learning_rate)
    for epoch in range(hp.epochs):
        order = rng.permutation(len(y))
        for i in range(0, len(order), hp.batch_size):
            sel = order[i : i + hp.batch_size]
            raw, acts = clf.mlp.forward_cached(x[sel])
            s = _sigmoid(raw[:, 0])
            d_raw = (w[sel] * (s - y[sel]) / len(sel))[:, None]
            _, grads = clf.mlp.backward(acts, d_raw)
            clf.mlp.weights = opt.step(clf.mlp.weights, grads)
        losses.append(full_loss())
    return np.asarray(losses)


def save_classifier(clf: CollisionClassifier, path, extra_meta: dict = None):
    arrays = mlp_to_arrays(clf.mlp)
    arrays["lower"] = clf.lower
    arrays["upper"] = clf.upper
    meta = {
        "kind": "collision_classifier",
        "layers": len(clf.mlp.weights),
        "sizes": clf.mlp.sizes,
        "holdout_accuracy": clf.holdout_accuracy,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_weights(path, arrays, meta)


def load_classifier(path) -> CollisionClassifier:
    arrays, meta = load_weights(path)
    if meta.get("kind") != "collision_classifier":
        raise ModelParseError(f"weight file at {path} is not a collision classifier")
    return CollisionClassifier(
        mlp=mlp_from_arrays(arrays, meta["layers"]),
        lower=arrays["lower"],
        upper=arrays["upper"],
        holdout_accuracy=float(meta.get("holdout_accuracy", float("nan"))),
    )
