"""Fully connected classifier with explicit forward and backward passes.

Hidden layers are ReLU, the output layer is a row-wise softmax. `backward`
takes the gradient with respect to the softmax *output* (probabilities) and
routes it through the softmax Jacobian itself, so loss code only ever
differentiates with respect to probabilities.

Parameter flattening order (used by checkpoints and perturbations): all
weight matrices in layer order, each row-major, then all bias vectors in
layer order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .linalg import as_matrix, softmax, softmax_backward
from .rng import Rng

__all__ = [
    "NumericalError",
    "CheckpointError",
    "Mlp",
    "SgdState",
    "sgd_step",
]

CHECKPOINT_MAGIC = b"MLPC"
CHECKPOINT_VERSION = 1


class NumericalError(ArithmeticError):
    """Non-finite value where the training loop cannot continue."""


class CheckpointError(ValueError):
    """Malformed model checkpoint file."""


class Mlp:
    """Multilayer perceptron f(x) -> class probabilities.

    layer_sizes = (D, hidden..., C). Weights are He-uniform from the given
    stream (layer by layer; biases start at zero and consume no draws).
    """

    def __init__(self, layer_sizes, rng: Rng | None = None):
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError(f"layer_sizes must be >= 2 positive ints, got {sizes}")
        self.layer_sizes = sizes
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            if rng is None:
                w = np.zeros((n_in, n_out))
            else:
                limit = np.sqrt(6.0 / n_in)
                w = (rng.uniform(size=(n_in, n_out)) * 2.0 - 1.0) * limit
            self.weights.append(w)
            self.biases.append(np.zeros(n_out))
        self._version = 0

    # -- shape / parameter plumbing --------------------------------------

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_flat(self) -> np.ndarray:
        parts = [w.ravel() for w in self.weights] + [b.ravel() for b in self.biases]
        return np.concatenate(parts)

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64).ravel()
        if flat.size != self.num_params:
            raise ValueError(
                f"flat parameter vector has {flat.size} entries, model has {self.num_params}"
            )
        pos = 0
        for w in self.weights:
            w[...] = flat[pos:pos + w.size].reshape(w.shape)
            pos += w.size
        for b in self.biases:
            b[...] = flat[pos:pos + b.size]
            pos += b.size
        self._version += 1

    def copy(self) -> "Mlp":
        dup = Mlp(self.layer_sizes)
        for i in range(self.num_layers):
            dup.weights[i][...] = self.weights[i]
            dup.biases[i][...] = self.biases[i]
        return dup

    def perturbed(self, direction: np.ndarray, eps: float) -> "Mlp":
        """Fresh model at theta + eps*direction; this model is untouched."""
        direction = np.asarray(direction, dtype=np.float64).ravel()
        if direction.size != self.num_params:
            raise ValueError(
                f"direction has {direction.size} entries, model has {self.num_params}"
            )
        dup = self.copy()
        dup.set_flat(self.get_flat() + eps * direction)
        return dup

    def flatten_grads(self, grads) -> np.ndarray:
        """Flatten a backward() result in the same order as get_flat()."""
        parts = [dw.ravel() for dw, _ in grads] + [db.ravel() for _, db in grads]
        return np.concatenate(parts)

    # -- forward / backward ----------------------------------------------

    def forward(self, x) -> tuple[np.ndarray, dict]:
        """Run a (b, D) batch; returns (probs, cache) where cache feeds backward()."""
        x = as_matrix(x, "x_batch")
        if x.shape[1] != self.layer_sizes[0]:
            raise ValueError(
                f"input has {x.shape[1]} features, model expects {self.layer_sizes[0]}"
            )
        acts = [x]          # post-activation inputs to each layer
        pre = []            # pre-activation outputs of each layer
        h = x
        for i in range(self.num_layers):
            z = h @ self.weights[i] + self.biases[i]
            pre.append(z)
            h = np.maximum(z, 0.0) if i < self.num_layers - 1 else z
            if i < self.num_layers - 1:
                acts.append(h)
        probs = softmax(pre[-1])
        if not np.all(np.isfinite(probs)):
            raise NumericalError("forward produced non-finite probabilities")
        cache = {"model": self, "version": self._version, "acts": acts,
                 "pre": pre, "probs": probs}
        return probs, cache

    def predict(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: dict, dL_df) -> list[tuple[np.ndarray, np.ndarray]]:
        """Gradients of the scalar loss whose probability-gradient is dL_df.

        Returns [(dW, db), ...] per layer. Any batch-mean factor must already
        be inside dL_df; nothing is rescaled here.
        """
        if cache.get("model") is not self or cache.get("version") != self._version:
            raise ValueError("backward: cache is stale or from a different model")
        dL_df = as_matrix(dL_df, "dL_df")
        probs = cache["probs"]
        if dL_df.shape != probs.shape:
            raise ValueError(
                f"dL_df shape {dL_df.shape} does not match forward output {probs.shape}"
            )
        dz = softmax_backward(probs, dL_df)
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * self.num_layers
        for i in range(self.num_layers - 1, -1, -1):
            a_prev = cache["acts"][i]
            grads[i] = (a_prev.T @ dz, dz.sum(axis=0))
            if i > 0:
                da = dz @ self.weights[i].T
                dz = da * (cache["pre"][i - 1] > 0.0)
        return grads

    # -- checkpoint io -----------------------------------------------------

    def save(self, path) -> None:
        """Little-endian binary: magic, u32 version, u32 n_sizes, u32 sizes,
        then float64 parameters in flatten order."""
        sizes = self.layer_sizes
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(sizes)))
            fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
            fh.write(self.get_flat().astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Mlp":
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint magic")
        version, n_sizes = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        if len(blob) < off + 4 * n_sizes:
            raise CheckpointError(f"{path}: truncated checkpoint header")
        sizes = struct.unpack_from(f"<{n_sizes}I", blob, off)
        off += 4 * n_sizes
        model = cls(sizes)
        expected = model.num_params * 8
        payload = blob[off:]
        if len(payload) != expected:
            raise CheckpointError(
                f"{path}: expected {expected} parameter bytes, found {len(payload)}"
            )
        model.set_flat(np.frombuffer(payload, dtype="<f8"))
        return model


@dataclass
class SgdState:
    """SGD with classical momentum and decoupled-from-nothing weight decay:
    v <- mu*v + (g + wd*theta); theta <- theta - lr*v, in that order."""

    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    buffers: list[tuple[np.ndarray, np.ndarray]] | None = field(default=None)

    def ensure_buffers(self, model: Mlp) -> None:
        if self.buffers is None:
            self.buffers = [
                (np.zeros_like(w), np.zeros_like(b))
                for w, b in zip(model.weights, model.biases)
            ]


def sgd_step(model: Mlp, grads, opt: SgdState) -> None:
    """Apply one optimizer step in place. Aborts on non-finite gradients."""
    opt.ensure_buffers(model)
    for i, (dw, db) in enumerate(grads):
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise NumericalError(f"non-finite gradient in layer {i}")
        vw, vb = opt.buffers[i]
        vw *= opt.momentum
        vw += dw + opt.weight_decay * model.weights[i]
        vb *= opt.momentum
        vb += db + opt.weight_decay * model.biases[i]
        model.weights[i] -= opt.lr * vw
        model.biases[i] -= opt.lr * vb
    model._version += 1
