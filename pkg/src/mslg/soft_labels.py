"""Trainable per-sample label distributions.

Each training sample owns a row of unconstrained logits; the softmax of a row
is the sample's soft label. Updates land on the logits through the softmax
Jacobian, so the derived labels stay valid distributions no matter how far
the logits drift. Logits start at K * onehot(noisy label), which makes the
initial soft labels a sharpened copy of the noisy labels.
"""

from __future__ import annotations

import struct

import numpy as np

from .linalg import softmax, softmax_backward

__all__ = ["SoftLabelStore", "LabelSnapshotError", "SNAPSHOT_MAGIC"]

SNAPSHOT_MAGIC = b"SLBL"
SNAPSHOT_VERSION = 1


class LabelSnapshotError(ValueError):
    """Malformed label snapshot file."""


class SoftLabelStore:
    def __init__(self, logits: np.ndarray, k: float, sample_ids=None):
        self.logits = np.ascontiguousarray(logits, dtype=np.float64)
        if self.logits.ndim != 2:
            raise ValueError(f"logits must be (N, C), got shape {self.logits.shape}")
        self.k = float(k)
        n = self.logits.shape[0]
        if sample_ids is None:
            sample_ids = np.arange(n)
        self.sample_ids = np.asarray(sample_ids, dtype=np.int64)
        if self.sample_ids.shape != (n,):
            raise ValueError("sample_ids must align with logit rows")
        self._row_of = {int(s): i for i, s in enumerate(self.sample_ids)}
        self.skipped_rows_total = 0

    @property
    def n(self) -> int:
        return self.logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    @classmethod
    def init_from_noisy(cls, noisy_labels, num_classes: int, k: float = 10.0,
                        sample_ids=None) -> "SoftLabelStore":
        """logits_i = k * onehot(noisy_i); argmax of the soft label equals the
        noisy label for any k > 0."""
        noisy = np.asarray(noisy_labels, dtype=np.int64).ravel()
        c = int(num_classes)
        if np.any(noisy < 0) or np.any(noisy >= c):
            bad = int(noisy[np.argmax((noisy < 0) | (noisy >= c))])
            raise ValueError(f"noisy label {bad} out of range [0, {c})")
        logits = np.zeros((noisy.size, c))
        logits[np.arange(noisy.size), noisy] = float(k)
        return cls(logits, k, sample_ids)

    def _rows(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64).ravel()
        try:
            return np.fromiter((self._row_of[int(s)] for s in ids), dtype=np.int64,
                               count=ids.size)
        except KeyError as exc:
            raise KeyError(f"unknown sample id {exc.args[0]}") from None

    def soft_labels(self, ids=None) -> np.ndarray:
        """Row-wise softmax of the selected logits; (b, C)."""
        if ids is None:
            return softmax(self.logits)
        return softmax(self.logits[self._rows(ids)])

    def apply_label_gradient(self, ids, grad_wrt_yhat, beta: float) -> int:
        """Descend the logits along d(loss)/d(soft label) pulled back through
        softmax. Rows with non-finite gradients are skipped (not zero-filled)
        and counted; returns the number skipped. Other rows are untouched."""
        rows = self._rows(ids)
        grad = np.asarray(grad_wrt_yhat, dtype=np.float64)
        if grad.shape != (rows.size, self.num_classes):
            raise ValueError(
                f"gradient shape {grad.shape} does not match batch ({rows.size}, {self.num_classes})"
            )
        ok = np.all(np.isfinite(grad), axis=1)
        rows_ok = rows[ok]
        if rows_ok.size:
            yhat = softmax(self.logits[rows_ok])
            self.logits[rows_ok] -= float(beta) * softmax_backward(yhat, grad[ok])
        skipped = int(rows.size - rows_ok.size)
        self.skipped_rows_total += skipped
        return skipped

    # -- snapshot io -------------------------------------------------------

    def save(self, path) -> None:
        """Little-endian binary: magic, u32 version, u64 N, u32 C, f64 K,
        then row-major float64 logits."""
        with open(path, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC)
            fh.write(struct.pack("<IQId", SNAPSHOT_VERSION, self.n,
                                 self.num_classes, self.k))
            fh.write(self.logits.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "SoftLabelStore":
        with open(path, "rb") as fh:
            blob = fh.read()
        header = struct.calcsize("<IQId")
        if len(blob) < 4 + header or blob[:4] != SNAPSHOT_MAGIC:
            raise LabelSnapshotError(f"{path}: corrupt snapshot header")
        version, n, c, k = struct.unpack_from("<IQId", blob, 4)
        if version != SNAPSHOT_VERSION:
            raise LabelSnapshotError(f"{path}: unsupported snapshot version {version}")
        payload = blob[4 + header:]
        if len(payload) != n * c * 8:
            raise LabelSnapshotError(
                f"{path}: expected {n * c * 8} logit bytes, found {len(payload)}"
            )
        logits = np.frombuffer(payload, dtype="<f8").reshape(n, c)
        return cls(logits.copy(), k)

    def export_csv(self, path) -> None:
        """CSV: sample_id, yhat_0..yhat_{C-1}, argmax."""
        yhat = self.soft_labels()
        arg = yhat.argmax(axis=1)
        cols = ",".join(f"yhat_{j}" for j in range(self.num_classes))
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"sample_id,{cols},argmax\n")
            for i in range(self.n):
                vals = ",".join(repr(float(v)) for v in yhat[i])
                fh.write(f"{int(self.sample_ids[i])},{vals},{int(arg[i])}\n")
