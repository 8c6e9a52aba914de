"""Small dense-network toolkit in float64 numpy.

Arrays are the tensors here: batches are ``(batch, features)`` and a dense
layer maps ``x -> x @ W.T + b`` with ``W`` of shape ``(out, in)``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericalError, ShapeError

LOGVAR_CLAMP = 10.0
CHECKPOINT_MAGIC = b"NNP1"
CHECKPOINT_VERSION = 1


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"inconsistent layer shapes {self.weights.shape} / {self.bias.shape}")

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def xavier(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "DenseLayer":
        limit = np.sqrt(6.0 / (n_in + n_out))
        return cls(rng.uniform(-limit, limit, size=(n_out, n_in)), np.zeros(n_out))

    @classmethod
    def zeros(cls, n_in: int, n_out: int) -> "DenseLayer":
        return cls(np.zeros((n_out, n_in)), np.zeros(n_out))

    def params(self) -> list[np.ndarray]:
        return [self.weights, self.bias]


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != layer.n_in:
        raise ShapeError(f"input width {x.shape[-1]} != layer input {layer.n_in}")
    return x @ layer.weights.T + layer.bias


def dense_backward(layer: DenseLayer, x: np.ndarray, dy: np.ndarray):
    """Returns ``(dx, dW, db)`` for a batch (or a single vector)."""
    if dy.shape[-1] != layer.n_out:
        raise ShapeError(f"gradient width {dy.shape[-1]} != layer output {layer.n_out}")
    x2 = np.atleast_2d(x)
    dy2 = np.atleast_2d(dy)
    dx = dy @ layer.weights
    return dx, dy2.T @ x2, dy2.sum(axis=0)


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x):
    return (x > 0).astype(np.float64)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def clamp_logvar(raw):
    return np.clip(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)


def kl_diag_gaussian(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over the last axis, with gradients."""
    var = np.exp(logvar)
    kl = 0.5 * np.sum(mu ** 2 + var - 1.0 - logvar, axis=-1)
    return kl, mu.copy(), 0.5 * (var - 1.0)


def recon_loss_bce(logits, target):
    """Summed binary cross-entropy of ``sigmoid(logits)`` against 0/1 ``target``.

    Uses ``max(x, 0) - x*t + log1p(exp(-|x|))``; returns ``(loss, dloss/dlogits)``
    with the loss summed over the last axis.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise ShapeError(f"logits {logits.shape} vs target {target.shape}")
    loss = np.maximum(logits, 0) - logits * target + np.log1p(np.exp(-np.abs(logits)))
    return loss.sum(axis=-1), sigmoid(logits) - target


def misrepresented_count(probs, target, threshold: float = 0.5) -> int:
    probs = np.asarray(probs)
    target = np.asarray(target)
    if probs.shape != target.shape:
        raise ShapeError(f"probs {probs.shape} vs target {target.shape}")
    return int(np.count_nonzero((probs >= threshold) != (target >= 0.5)))


def reparameterize(mu, logvar, eps):
    """``z = mu + exp(logvar / 2) * eps``; returns ``(z, dz/dmu, dz/dlogvar)`` elementwise."""
    if np.shape(eps) != np.shape(mu):
        raise ShapeError("eps must match the latent shape")
    std = np.exp(0.5 * logvar)
    return mu + std * eps, np.ones_like(mu), 0.5 * std * eps


class MLP:
    """Stack of dense layers with ReLU after every hidden layer.

    ``final_activation`` is ``"relu"`` or ``None`` (linear output).
    """

    def __init__(self, widths, rng=None, final_activation=None, layers=None):
        self.widths = [int(w) for w in widths]
        if any(w <= 0 for w in self.widths):
            raise ShapeError("layer widths must be positive")
        self.final_activation = final_activation
        if layers is None:
            rng = np.random.default_rng(0) if rng is None else rng
            layers = [DenseLayer.xavier(a, b, rng) for a, b in zip(self.widths[:-1], self.widths[1:])]
        self.layers = layers

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x):
        cache = []
        h = x
        for i, layer in enumerate(self.layers):
            pre = dense_forward(layer, h)
            cache.append((h, pre))
            last = i == len(self.layers) - 1
            h = relu(pre) if (not last or self.final_activation == "relu") else pre
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    @staticmethod
    def relu_pattern(cache) -> np.ndarray:
        return np.concatenate([(pre > 0).ravel() for _, pre in cache])

    def backward(self, cache, dout):
        """Backpropagate ``dout``; returns ``(dx, grads)`` with grads aligned to ``params()``."""
        grads = []
        d = dout
        for i in reversed(range(len(self.layers))):
            h, pre = cache[i]
            last = i == len(self.layers) - 1
            if not last or self.final_activation == "relu":
                d = d * (pre > 0)
            d, dW, db = dense_backward(self.layers[i], h, d)
            grads = [dW, db] + grads
        return d, grads


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def numeric_gradient(loss_fn, param: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(param)
    flat = param.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = loss_fn()
        flat[i] = old - h
        fm = loss_fn()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(loss_and_grads, params: list[np.ndarray], h: float = 1e-5, pattern=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grads()`` must return ``(scalar loss, grads aligned with params)``
    and read the current values of ``params`` (which are perturbed in place).
    If ``pattern()`` is given it must return the current ReLU on/off pattern;
    elements whose +h and -h evaluations straddle a kink are skipped.
    """
    _, grads = loss_and_grads()
    grads = [g.copy() for g in grads]
    worst = 0.0
    grad_check.skipped = 0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = loss_and_grads()[0]
            pp = pattern() if pattern else None
            flat[i] = old - h
            fm = loss_and_grads()[0]
            pm = pattern() if pattern else None
            flat[i] = old
            if pattern and not np.array_equal(pp, pm):
                grad_check.skipped += 1
                continue
            num = (fp - fm) / (2 * h)
            worst = max(worst, float(relative_error(gflat[i], num)))
    return worst


def save_checkpoint(path, header: dict, tensors: list[np.ndarray]) -> None:
    header = dict(header)
    header["schema_version"] = CHECKPOINT_VERSION
    header["shapes"] = [list(t.shape) for t in tensors]
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for t in tensors:
            f.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, list[np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    if len(data) < 8:
        raise FormatError(f"{path}: truncated checkpoint")
    (n,) = struct.unpack_from("<I", data, 4)
    try:
        header = json.loads(data[8:8 + n])
    except ValueError as exc:
        raise FormatError(f"{path}: unreadable checkpoint header") from exc
    if header.get("schema_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version")
    offset = 8 + n
    tensors = []
    for shape in header["shapes"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise FormatError(f"{path}: truncated tensor payload")
        tensors.append(np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).astype(np.float64))
        offset = end
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return header, tensors
