"""Shared numerical primitives: tempered softmax, cross-entropy, correlation
and cosine-similarity matrices, seeded counter-based RNG, and the dense
binary matrix format used by every other module.

All computation is float64. Probability vectors and logit vectors are plain
1-D numpy arrays; ``check_prob_dist`` / ``check_logits`` enforce their
invariants at module boundaries.
"""

from __future__ import annotations

import hashlib
import struct
from typing import BinaryIO

import numpy as np

LOG_FLOOR = 1e-12
PROB_SUM_TOL = 1e-9

MATRIX_MAGIC = b"DLAB"
MATRIX_VERSION = 1

# Diagnostic counter: number of cross_entropy calls that hit the log floor.
_clamp_events = 0


def clamp_event_count() -> int:
    return _clamp_events


def reset_clamp_events() -> None:
    global _clamp_events
    _clamp_events = 0


def check_logits(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"logit vector must be 1-D, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("logit vector contains non-finite entries")
    return z


def check_prob_dist(p, tol: float = PROB_SUM_TOL) -> np.ndarray:
    """Validate a probability vector: entries in [0, 1], sum 1 within tol."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"probability vector must be 1-D, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("probability vector contains non-finite entries")
    if np.any(p < -tol) or np.any(p > 1.0 + tol):
        raise ValueError("probability entries outside [0, 1]")
    s = float(p.sum())
    if abs(s - 1.0) > tol:
        raise ValueError(f"probability entries sum to {s}, expected 1")
    return p


def softmax_t(z, T: float = 1.0) -> np.ndarray:
    """Tempered softmax over a logit vector.

    Stabilized by subtracting the max of z/T before exponentiation, so the
    result is exactly invariant to adding a constant to every logit.
    """
    z = check_logits(z)
    if not (T > 0) or not np.isfinite(T):
        raise ValueError(f"temperature must be positive and finite, got {T}")
    w = z / T
    w -= w.max()
    e = np.exp(w)
    return e / e.sum()


def softmax_rows(Z: np.ndarray, T: float = 1.0) -> np.ndarray:
    """Row-wise tempered softmax for a 2-D array of logits (no validation)."""
    W = Z / T
    W = W - W.max(axis=1, keepdims=True)
    np.exp(W, out=W)
    W /= W.sum(axis=1, keepdims=True)
    return W


def cross_entropy(target, pred) -> float:
    """-sum(target_i * log(pred_i)) with pred floored at LOG_FLOOR.

    The floor keeps the value finite when pred has (near-)zero entries under
    positive target mass; each such event bumps the module clamp counter.
    """
    global _clamp_events
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    clamped = pred < LOG_FLOOR
    if np.any(clamped & (target > 0)):
        _clamp_events += 1
    return float(-(target * np.log(np.maximum(pred, LOG_FLOOR))).sum())


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def pearson_corr_matrix(samples, return_degenerate: bool = False):
    """Pearson correlation between the columns of an N x K sample matrix.

    Uses the two-pass formulation (means first, then centered covariance).
    Zero-variance columns get 0 off-diagonal and 1 on the diagonal; their
    indices are reported through ``return_degenerate``.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need an N x K matrix with N >= 2")
    C = X - X.mean(axis=0)
    norms = np.sqrt((C * C).sum(axis=0))
    # constant columns can carry ~1 ulp of centering residue
    scale = np.maximum(np.abs(X).max(axis=0), 1e-300)
    degenerate = norms <= 1e-13 * scale * np.sqrt(X.shape[0])
    safe = np.where(degenerate, 1.0, norms)
    C = C / safe
    M = C.T @ C
    M[degenerate, :] = 0.0
    M[:, degenerate] = 0.0
    np.fill_diagonal(M, 1.0)
    np.clip(M, -1.0, 1.0, out=M)
    M = (M + M.T) / 2.0
    if return_degenerate:
        return M, degenerate
    return M


def cosine_sim_matrix(W) -> np.ndarray:
    """Pairwise cosine similarity between the rows of a K x d matrix."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError("need a K x d matrix")
    norms = np.linalg.norm(W, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("cosine similarity undefined for zero-norm rows")
    Wn = W / norms[:, None]
    M = Wn @ Wn.T
    np.fill_diagonal(M, 1.0)
    np.clip(M, -1.0, 1.0, out=M)
    return (M + M.T) / 2.0


class SeededRng:
    """Counter-based RNG with named, index-addressable substreams.

    Every (master seed, stream name, index) triple maps to an independent
    Philox stream, so dataset generation, parameter init, and batch
    shuffling can each consume their own stream and results do not depend
    on evaluation order or thread count.
    """

    ALGORITHMS = ("philox",)

    def __init__(self, seed: int, algorithm: str = "philox"):
        if algorithm not in self.ALGORITHMS:
            raise ValueError(f"unknown rng algorithm {algorithm!r}")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.algorithm = algorithm
        self._name_ids: dict[str, int] = {}

    def _name_id(self, name: str) -> int:
        nid = self._name_ids.get(name)
        if nid is None:
            digest = hashlib.blake2s(name.encode("utf-8"), digest_size=8).digest()
            nid = int.from_bytes(digest, "little")
            self._name_ids[name] = nid
        return nid

    def stream(self, name: str, index: int = 0) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self._name_id(name), int(index)))
        key = ss.generate_state(2, np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def write_matrix(f: BinaryIO, arr: np.ndarray) -> None:
    """Write a 2-D float64 matrix in the dense binary format.

    Layout: magic "DLAB", u32 version, u32 rows, u32 cols, then row-major
    little-endian float64 payload.
    """
    A = np.ascontiguousarray(arr, dtype="<f8")
    if A.ndim == 1:
        A = A.reshape(1, -1)
    if A.ndim != 2:
        raise ValueError(f"matrix format stores 2-D arrays, got ndim={arr.ndim}")
    f.write(MATRIX_MAGIC)
    f.write(struct.pack("<III", MATRIX_VERSION, A.shape[0], A.shape[1]))
    f.write(A.tobytes())


def read_matrix(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MATRIX_MAGIC:
        raise ValueError(f"bad matrix magic {magic!r}")
    version, rows, cols = struct.unpack("<III", f.read(12))
    if version != MATRIX_VERSION:
        raise ValueError(f"unsupported matrix format version {version}")
    payload = f.read(8 * rows * cols)
    if len(payload) != 8 * rows * cols:
        raise ValueError("truncated matrix payload")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()


def save_matrix(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_matrix(f, arr)


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_matrix(f)
