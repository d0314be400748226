"""Synthetic classification benchmark with controllable class geometry.

Classes live in groups ("super-classes") of K/C members. Each group has an
anchor direction; the C anchors are mutually orthonormal, and the remaining
group members sit at a controlled cosine similarity tau from their anchor.
Labels come from an argmax over per-class scores of the normalized input,
with M sinusoidal terms injecting non-linearity into the decision boundary
(M=0 keeps the dataset linearly separable).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .mathcore import SeededRng

DATASET_MAGIC = b"DSET"
DATASET_VERSION = 1

A_RANGE = (1.0, 5.0)  # score-frequency constants, drawn once per spec


@dataclass(frozen=True)
class SyntheticSpec:
    d: int
    K: int
    C: int
    tau: float
    M: int
    a: np.ndarray
    b: np.ndarray
    n_train: int
    n_valid: int
    seed: int

    def __post_init__(self):
        if self.d < 1 or self.K < 1 or self.C < 1:
            raise ValueError("d, K, C must be positive")
        if self.K % self.C != 0:
            raise ValueError(f"C={self.C} must divide K={self.K}")
        if self.C > self.d:
            raise ValueError(f"need C <= d for orthonormal anchors, got C={self.C}, d={self.d}")
        if not (0.0 <= self.tau < 1.0):
            raise ValueError(f"tau must be in [0, 1), got {self.tau}")
        if self.M < 0:
            raise ValueError("M must be non-negative")
        if self.n_train < 0 or self.n_valid < 0:
            raise ValueError("sample counts must be non-negative")
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if a.shape != (self.M,) or b.shape != (self.M,):
            raise ValueError(f"a and b must have length M={self.M}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @classmethod
    def create(cls, d, K, C, tau, M, n_train, n_valid, seed) -> "SyntheticSpec":
        """Build a spec, drawing the M score constants from the master seed.

        a_m is uniform on [1, 5] and b_m uniform on [0, 2*pi), each from its
        own indexed substream so specs with smaller M share a prefix.
        """
        rng = SeededRng(seed)
        a = np.array([rng.stream("synth.a", m).uniform(*A_RANGE) for m in range(M)])
        b = np.array([rng.stream("synth.b", m).uniform(0.0, 2.0 * np.pi) for m in range(M)])
        return cls(d=d, K=K, C=C, tau=tau, M=M, a=a, b=b,
                   n_train=n_train, n_valid=n_valid, seed=seed)

    @property
    def group_size(self) -> int:
        return self.K // self.C

    def super_of(self, k: int) -> int:
        return k // self.group_size

    def to_json(self) -> str:
        payload = {
            "d": self.d, "K": self.K, "C": self.C, "tau": self.tau, "M": self.M,
            "a": self.a.tolist(), "b": self.b.tolist(),
            "n_train": self.n_train, "n_valid": self.n_valid, "seed": self.seed,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSpec":
        obj = json.loads(text)
        return cls(d=obj["d"], K=obj["K"], C=obj["C"], tau=obj["tau"], M=obj["M"],
                   a=np.asarray(obj["a"]), b=np.asarray(obj["b"]),
                   n_train=obj["n_train"], n_valid=obj["n_valid"], seed=obj["seed"])


@dataclass(frozen=True)
class ClassBasis:
    U: np.ndarray                  # K x d, unit rows
    super_of: np.ndarray           # K, group index per class
    anchor_of: np.ndarray          # K, class index of the group anchor

    def anchors(self) -> np.ndarray:
        return np.unique(self.anchor_of)


@dataclass(frozen=True)
class LabeledExample:
    x: np.ndarray
    t: int


@dataclass
class Dataset:
    spec: SyntheticSpec
    X: np.ndarray                  # n x d features
    t: np.ndarray                  # n labels
    split: str                     # "train" or "valid"

    def __len__(self) -> int:
        return self.X.shape[0]

    def example(self, i: int) -> LabeledExample:
        return LabeledExample(x=self.X[i], t=int(self.t[i]))


def _orthonormalize(V: np.ndarray) -> np.ndarray:
    """Gram-Schmidt with one re-orthogonalization pass."""
    U = np.empty_like(V)
    for i in range(V.shape[0]):
        v = V[i].copy()
        for _ in range(2):
            for j in range(i):
                v -= (U[j] @ v) * U[j]
        n = np.linalg.norm(v)
        if n < 1e-12:
            raise ValueError("degenerate anchor sample; try another seed")
        U[i] = v / n
    return U


def gen_basis(spec: SyntheticSpec, rng: SeededRng) -> ClassBasis:
    """Sample the class basis: C orthonormal anchors, then per group
    (K/C - 1) unit vectors at cosine tau from their anchor.

    Sibling construction: u = tau * anchor + sqrt(1 - tau^2) * v with v a
    random unit vector orthogonal to the anchor, so the anchor cosine is
    exact to working precision. Sibling-sibling cosines are left random.
    """
    anchors = _orthonormalize(rng.stream("basis.anchors").standard_normal((spec.C, spec.d)))
    gs = spec.group_size
    U = np.empty((spec.K, spec.d))
    super_of = np.empty(spec.K, dtype=np.int64)
    anchor_of = np.empty(spec.K, dtype=np.int64)
    for c in range(spec.C):
        base = c * gs
        U[base] = anchors[c]
        super_of[base:base + gs] = c
        anchor_of[base:base + gs] = base
        for j in range(1, gs):
            k = base + j
            g = rng.stream("basis.sibling", k)
            while True:
                v = g.standard_normal(spec.d)
                v -= (anchors[c] @ v) * anchors[c]
                n = np.linalg.norm(v)
                if n > 1e-12:
                    break
            v /= n
            U[k] = spec.tau * anchors[c] + np.sqrt(1.0 - spec.tau ** 2) * v
    return ClassBasis(U=U, super_of=super_of, anchor_of=anchor_of)


def class_scores(basis: ClassBasis, spec: SyntheticSpec, x_hat: np.ndarray) -> np.ndarray:
    """Per-class labeling score of an l2-normalized input.

    score_k = u_k . x_hat + sum_m sin(a_m * (u_k . x_hat) + b_m)
    """
    s = basis.U @ x_hat
    if spec.M:
        s = s + np.sin(np.outer(s, spec.a) + spec.b).sum(axis=1)
    return s


def gen_example(basis: ClassBasis, spec: SyntheticSpec, rng: SeededRng,
                index: int = 0) -> LabeledExample:
    """Draw one example from its index-addressed substream.

    x is standard Gaussian in d dimensions; the label is the argmax class
    score of the normalized x (ties broken toward the lowest class index,
    which is what argmax does).
    """
    g = rng.stream("example", index)
    while True:
        x = g.standard_normal(spec.d)
        norm = np.linalg.norm(x)
        if norm > 0.0:
            break
    t = int(np.argmax(class_scores(basis, spec, x / norm)))
    return LabeledExample(x=x, t=t)


def _gen_block(basis: ClassBasis, spec: SyntheticSpec, rng: SeededRng,
               start: int, count: int) -> tuple[np.ndarray, np.ndarray]:
    X = np.empty((count, spec.d))
    t = np.empty(count, dtype=np.int64)
    for i in range(count):
        ex = gen_example(basis, spec, rng, index=start + i)
        X[i] = ex.x
        t[i] = ex.t
    return X, t


def gen_dataset(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Generate the train and valid splits with one shared basis.

    Both splits draw from the identical distribution; the valid examples
    simply continue the example-index keyspace after the train ones.
    """
    rng = SeededRng(spec.seed)
    basis = gen_basis(spec, rng)
    X_tr, t_tr = _gen_block(basis, spec, rng, 0, spec.n_train)
    X_va, t_va = _gen_block(basis, spec, rng, spec.n_train, spec.n_valid)
    return (Dataset(spec, X_tr, t_tr, "train"),
            Dataset(spec, X_va, t_va, "valid"))


def write_dataset(path, ds: Dataset) -> None:
    """Serialize a split: fixed header then fixed-stride records
    (d little-endian float64 features + one u32 label each)."""
    rec = np.empty(len(ds), dtype=np.dtype([("x", "<f8", (ds.spec.d,)), ("t", "<u4")]))
    rec["x"] = ds.X
    rec["t"] = ds.t
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IIIIdIQ", DATASET_VERSION, ds.spec.d, ds.spec.K,
                            ds.spec.C, ds.spec.tau, ds.spec.M, len(ds)))
        f.write(rec.tobytes())


def read_dataset(path, spec: SyntheticSpec | None = None, split: str = "train") -> Dataset:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DATASET_MAGIC:
            raise ValueError(f"bad dataset magic {magic!r}")
        header = f.read(struct.calcsize("<IIIIdIQ"))
        version, d, K, C, tau, M, count = struct.unpack("<IIIIdIQ", header)
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        raw = f.read(count * (d * 8 + 4))
    if len(raw) != count * (d * 8 + 4):
        raise ValueError("truncated dataset payload")
    rec = np.frombuffer(raw, dtype=np.dtype([("x", "<f8", (d,)), ("t", "<u4")]))
    X = rec["x"].astype(np.float64)
    t = rec["t"].astype(np.int64)
    if spec is None:
        spec = SyntheticSpec(d=d, K=K, C=C, tau=tau, M=M,
                             a=np.zeros(M), b=np.zeros(M),
                             n_train=0, n_valid=0, seed=0)
    return Dataset(spec=spec, X=X, t=t, split=split)


def linear_probe_accuracy(basis: ClassBasis, ds: Dataset) -> float:
    """Accuracy of the M=0 linear rule argmax_k u_k . x_hat on a dataset.

    Used to confirm that growing M makes the labels less linearly
    predictable (and that M=0 is exactly linearly separable).
    """
    Xn = ds.X / np.linalg.norm(ds.X, axis=1, keepdims=True)
    pred = (Xn @ basis.U.T).argmax(axis=1)
    return float((pred == ds.t).mean())
