"""Small from-scratch MLP machinery: tanh networks, Adam, and the weight-file format.

Both trained models (the hand retargeter and the self-collision classifier)
are plain dense networks with tanh hidden activations, trained by manual
backprop.  Everything here is deterministic given the seeds passed in.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ModelParseError

WEIGHT_MAGIC = b"TKW1"
WEIGHT_VERSION = 1


@dataclass
class Mlp:
    """Dense layers with tanh between them; the final layer output is raw.

    weights is a list of (W (fan_in, fan_out), b (fan_out,)) pairs.
    """

    weights: list

    @property
    def sizes(self):
        return [self.weights[0][0].shape[0]] + [w.shape[1] for w, _ in self.weights]

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=float)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(self.weights):
            h = h @ w + b
            if i != last:
                h = np.tanh(h)
        return h

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping the per-layer activations needed by backward."""
        acts = [np.asarray(x, dtype=float)]
        h = acts[0]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(self.weights):
            h = h @ w + b
            if i != last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, acts, d_out: np.ndarray):
        """Gradients of a scalar loss given d(loss)/d(raw output).

        Returns (d_input, grads) where grads mirrors the weights structure.
        """
        grads = [None] * len(self.weights)
        delta = np.asarray(d_out, dtype=float)
        for i in range(len(self.weights) - 1, -1, -1):
            w, _ = self.weights[i]
            a_in = acts[i]
            grads[i] = (a_in.T @ delta, delta.sum(axis=0))
            delta = delta @ w.T
            if i > 0:
                delta = delta * (1.0 - acts[i] ** 2)  # tanh'
        return delta, grads

    def flat_arrays(self):
        out = []
        for w, b in self.weights:
            out.append(w)
            out.append(b)
        return out


def init_mlp(sizes, rng: np.random.Generator) -> Mlp:
    """Xavier-uniform initialisation; deterministic given the generator state."""
    weights = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        weights.append((w, b))
    return Mlp(weights=weights)


class Adam:
    """Adam with a fixed step size; state matches the weights structure."""

    def __init__(self, weights, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in weights]
        self.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in weights]

    def step(self, weights, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        new = []
        for i, ((w, b), (gw, gb)) in enumerate(zip(weights, grads)):
            mw, mb = self.m[i]
            vw, vb = self.v[i]
            mw = b1 * mw + (1 - b1) * gw
            mb = b1 * mb + (1 - b1) * gb
            vw = b2 * vw + (1 - b2) * gw * gw
            vb = b2 * vb + (1 - b2) * gb * gb
            self.m[i] = (mw, mb)
            self.v[i] = (vw, vb)
            w = w - self.lr * (mw / c1) / (np.sqrt(vw / c2) + self.eps)
            b = b - self.lr * (mb / c1) / (np.sqrt(vb / c2) + self.eps)
            new.append((w, b))
        return new


def save_weights(path, arrays, meta: dict):
    """Versioned binary container: named float64 arrays + JSON meta + sha256.

    Layout: magic, u32 header length, header JSON (array names/shapes, meta),
    row-major float64 payload, 32-byte sha256 over header+payload.
    """
    names = list(arrays)
    header = {
        "version": WEIGHT_VERSION,
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
        "meta": meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in names)
    digest = hashlib.sha256(hbytes + payload).digest()
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(payload)
        f.write(digest)


def load_weights(path):
    """Read a weight container back; checksum mismatch or truncation raises."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != WEIGHT_MAGIC:
        raise ModelParseError(f"not a weight file (bad magic)", path=str(path))
    (hlen,) = struct.unpack("<I", blob[4:8])
    hbytes = blob[8 : 8 + hlen]
    digest = blob[-32:]
    payload = blob[8 + hlen : -32]
    if hashlib.sha256(hbytes + payload).digest() != digest:
        raise ModelParseError("weight file checksum mismatch (corrupt file)", path=str(path))
    header = json.loads(hbytes.decode("utf-8"))
    if header.get("version") != WEIGHT_VERSION:
        raise ModelParseError(f"unsupported weight file version {header.get('version')}", path=str(path))
    arrays = {}
    off = 0
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off).reshape(shape)
        arrays[spec["name"]] = arr.astype(float)
        off += count * 8
    if off != len(payload):
        raise ModelParseError("weight file payload size mismatch", path=str(path))
    return arrays, header["meta"]


def export_weights_text(path, arrays, meta: dict):
    """Lossless debug export: floats serialised via repr (exact round-trip)."""
    doc = {
        "version": WEIGHT_VERSION,
        "meta": meta,
        "arrays": {n: arrays[n].tolist() for n in arrays},
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def mlp_from_arrays(arrays, n_layers: int, prefix: str = "") -> Mlp:
    weights = []
    for i in range(n_layers):
        try:
            weights.append((arrays[f"{prefix}W{i}"], arrays[f"{prefix}b{i}"]))
        except KeyError as exc:
            raise ModelParseError(f"weight file missing array {exc.args[0]!r}")
    return Mlp(weights=weights)


def mlp_to_arrays(mlp: Mlp, prefix: str = "") -> dict:
    out = {}
    for i, (w, b) in enumerate(mlp.weights):
        out[f"{prefix}W{i}"] = w
        out[f"{prefix}b{i}"] = b
    return out
