"""Dense tanh classifier with exact analytic gradients on a flat parameter vector.

Layout of the flat vector: for each layer in order, the weight matrix
(row-major, shape ``(out, in)``) followed by its bias.  All hidden layers
form the encoder; the final linear layer is the classifier head, so the
encoder segment is ``theta[:n_enc]``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"TSCP"
VERSION = 1


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        if len(self.hidden) < 1:
            raise ValueError("need at least one hidden layer")
        if min((self.input_dim, self.num_classes) + tuple(self.hidden)) < 1:
            raise ValueError("layer widths must be positive")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.num_classes)


class MLP:
    def __init__(self, arch: Architecture):
        self.arch = arch
        sizes = arch.sizes
        self.shapes = [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
        # (w_start, w_end, b_end) per layer
        self.slices = []
        off = 0
        for out, inp in self.shapes:
            w_end = off + out * inp
            self.slices.append((off, w_end, w_end + out))
            off = w_end + out
        self.d = off
        self.n_enc = self.slices[-1][0]

    def __repr__(self):
        return f"MLP({self.arch.sizes}, d={self.d})"

    def init_params(self, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        theta = np.zeros(self.d)
        for (out, inp), (w0, w1, _) in zip(self.shapes, self.slices):
            bound = np.sqrt(6.0 / (inp + out))
            theta[w0:w1] = rng.uniform(-bound, bound, out * inp)
        return theta

    def unflatten(self, theta):
        self._check(theta)
        return [(theta[w0:w1].reshape(shape), theta[w1:b1])
                for shape, (w0, w1, b1) in zip(self.shapes, self.slices)]

    def flatten(self, layers) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])

    def blocks(self):
        """Index ranges of each weight block and bias block, in layout order."""
        out = []
        for w0, w1, b1 in self.slices:
            out += [(w0, w1), (w1, b1)]
        return out

    def _check(self, theta):
        if np.ndim(theta) != 1 or len(theta) != self.d:
            raise ValueError(f"expected flat parameter vector of length {self.d}, "
                             f"got shape {np.shape(theta)}")

    def _forward(self, theta, X):
        layers = self.unflatten(theta)
        acts = [X]
        h = X
        for W, b in layers[:-1]:
            h = np.tanh(h @ W.T + b)
            acts.append(h)
        W, b = layers[-1]
        return acts, h @ W.T + b, layers

    def forward(self, theta, x):
        """Return ``(features, logits)`` for one sample or a batch."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.shape[1] != self.arch.input_dim:
            raise ValueError(f"input dim {X.shape[1]} != {self.arch.input_dim}")
        acts, logits, _ = self._forward(theta, X)
        if single:
            return acts[-1][0], logits[0]
        return acts[-1], logits

    def features(self, theta, X):
        return self.forward(theta, X)[0]

    def _backward(self, layers, acts, delta):
        """Backprop a (N, C) logit cotangent; returns per-layer (dW, db)."""
        grads = [None] * len(layers)
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
            if i:
                delta = (delta @ W) * (1.0 - acts[i] ** 2)
        return grads

    def per_sample_losses(self, theta, X, y):
        _, logits, _ = self._forward(theta, X)
        return _xent(logits, y)[0]

    def loss_and_grad(self, theta, X, y, weights=None):
        """Weighted-mean softmax cross-entropy and its exact gradient."""
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if len(y) == 0:
            raise ValueError("empty batch")
        if weights is None:
            w = np.full(len(y), 1.0 / len(y))
        else:
            w = np.asarray(weights, dtype=np.float64)
            if np.any(w < 0) or w.sum() <= 0:
                raise ValueError("weights must be non-negative and not all zero")
            w = w / w.sum()
        acts, logits, layers = self._forward(theta, X)
        losses, probs = _xent(logits, y)
        delta = probs
        delta[np.arange(len(y)), y] -= 1.0
        delta *= w[:, None]
        grads = self._backward(layers, acts, delta)
        return float(w @ losses), self.flatten(grads)

    def per_sample_grads(self, theta, X, y) -> np.ndarray:
        """(N, d) matrix of unweighted per-sample loss gradients."""
        acts, logits, layers = self._forward(theta, X)
        _, probs = _xent(logits, y)
        delta = probs
        delta[np.arange(len(y)), y] -= 1.0
        cols = []
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            dW = delta[:, :, None] * acts[i][:, None, :]
            cols.append((i, dW.reshape(len(y), -1), delta))
            if i:
                delta = (delta @ W) * (1.0 - acts[i] ** 2)
        out = np.empty((len(y), self.d))
        for i, dW, db in cols:
            w0, w1, b1 = self.slices[i]
            out[:, w0:w1] = dW
            out[:, w1:b1] = db
        return out

    def per_class_grads(self, theta, X, y) -> dict[int, np.ndarray]:
        """Mean-loss gradient restricted to each class present in the batch."""
        y = np.asarray(y)
        return {int(c): self.loss_and_grad(theta, X[y == c], y[y == c])[1]
                for c in np.unique(y)}

    def predict(self, theta, X):
        return np.argmax(self.forward(theta, X)[1], axis=1)


def _xent(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    return -logp[np.arange(len(y)), y], e / s


# -- binary checkpoint format ------------------------------------------------
# magic(4s) version(u32) n_sizes(u32) sizes(u32 * n) n_vectors(u32) length(u64)
# followed by n_vectors * length little-endian float64 values.

def save_vectors(path, arch: Architecture, vectors) -> None:
    vectors = [np.asarray(v, dtype="<f8") for v in vectors]
    length = len(vectors[0]) if vectors else 0
    if any(len(v) != length for v in vectors):
        raise ValueError("all vectors must share one length")
    sizes = arch.sizes
    header = struct.pack(f"<4sII{len(sizes)}IIQ", MAGIC, VERSION, len(sizes), *sizes,
                         len(vectors), length)
    with open(path, "wb") as f:
        f.write(header)
        for v in vectors:
            f.write(v.tobytes())


def load_vectors(path) -> tuple[Architecture, list[np.ndarray]]:
    data = Path(path).read_bytes()
    magic, version, n = struct.unpack_from("<4sII", data, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a tailscape parameter file")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 12
    sizes = struct.unpack_from(f"<{n}I", data, off)
    off += 4 * n
    count, length = struct.unpack_from("<IQ", data, off)
    off += 12
    flat = np.frombuffer(data, dtype="<f8", count=count * length, offset=off)
    arch = Architecture(sizes[0], tuple(sizes[1:-1]), sizes[-1])
    return arch, [flat[i * length:(i + 1) * length].astype(np.float64) for i in range(count)]


def save_checkpoint(path, net: MLP, theta) -> None:
    save_vectors(path, net.arch, [theta])


def load_checkpoint(path) -> tuple[MLP, np.ndarray]:
    arch, vecs = load_vectors(path)
    net = MLP(arch)
    if len(vecs) != 1 or len(vecs[0]) != net.d:
        raise ValueError(f"{path}: expected one parameter vector of length {net.d}")
    return net, vecs[0]
