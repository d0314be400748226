"""Training objectives: hard cross-entropy, label smoothing, teacher
distillation, and the hand-crafted partial-teacher family.

Every objective reports the loss value and the exact logit gradient dL/dz.
The distillation term of the loss carries a T^2 compensation so its
gradient stays comparable in scale to the hard term across temperatures;
pass ``t2_compensation=False`` to get the raw (un-compensated) gradient
convention used by the re-weighting diagnostics.

When only a teacher probability vector is stored (no teacher logits), the
tempered teacher is computed as p^(1/T) renormalized, which reproduces
softmax(z_teacher / T) exactly whenever p came from softmax(z_teacher).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .mathcore import LOG_FLOOR, check_prob_dist, softmax_rows, softmax_t

CACHE_MAGIC = b"TSIG"
CACHE_VERSION = 1

KIND_FULL = "FULL"
KIND_PT = "PT"
KIND_TOPK = "TOPK"
_KIND_CODES = {KIND_FULL: 0, KIND_PT: 1, KIND_TOPK: 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


class Method(str, enum.Enum):
    CE = "ce"
    LS = "ls"
    KD = "kd"
    KD_PT = "kd-pt"
    KD_SIM = "kd-sim"
    KD_REL = "kd-rel"
    KD_PT_SIM = "kd-pt+sim"
    KD_TOPK = "kd-topk"


KD_FAMILY = (Method.KD, Method.KD_PT, Method.KD_SIM, Method.KD_REL,
             Method.KD_PT_SIM, Method.KD_TOPK)


@dataclass(frozen=True)
class DistillConfig:
    method: Method
    lam: float = 0.7          # weight of the distillation term
    T: float = 1.0            # softmax temperature of the distillation term
    epsilon: float = 0.3      # label-smoothing mass
    alpha_mix: float = 0.5    # confidence/similarity mix for kd-pt+sim
    alpha_sim: float = 0.5    # cosine resolution exponent for kd-sim
    beta_sim: float = 0.5     # softmax temperature inside kd-sim
    k: int = 1                # kept entries for kd-topk
    beta1: float = 0.6        # kd-rel mass on the ground-truth class
    beta2: float = 0.025      # kd-rel mass per sibling class
    beta3: float = 0.01       # kd-rel mass per unrelated class

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if not (self.T > 0):
            raise ValueError(f"temperature must be positive, got {self.T}")
        if self.method is Method.LS and not (0.0 <= self.epsilon <= 1.0):
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.method in (Method.KD_SIM, Method.KD_PT_SIM):
            if not (0.0 < self.alpha_sim <= 1.0):
                raise ValueError(f"alpha_sim must be in (0, 1], got {self.alpha_sim}")
            if not (self.beta_sim > 0):
                raise ValueError(f"beta_sim must be positive, got {self.beta_sim}")
        if self.method is Method.KD_PT_SIM and not (0.0 <= self.alpha_mix <= 1.0):
            raise ValueError(f"alpha_mix must be in [0, 1], got {self.alpha_mix}")
        if self.method is Method.KD_TOPK and self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.method is Method.KD_REL:
            if not (self.beta1 > self.beta2 > self.beta3 > 0):
                raise ValueError("kd-rel requires beta1 > beta2 > beta3 > 0")


@dataclass(frozen=True)
class TeacherSignal:
    """One example's stored teacher output, in any of the three forms."""
    p: np.ndarray | None = None            # full distribution
    p_t: float | None = None               # confidence on the ground truth
    topk_idx: np.ndarray | None = None     # top-k class indices
    topk_p: np.ndarray | None = None       # top-k probabilities, descending
    W_teacher: np.ndarray | None = None    # teacher logit-layer weights

    def __post_init__(self):
        if self.p is not None:
            check_prob_dist(self.p)
        if self.p_t is not None and not (0.0 <= self.p_t <= 1.0):
            raise ValueError(f"p_t must be in [0, 1], got {self.p_t}")
        if (self.topk_idx is None) != (self.topk_p is None):
            raise ValueError("topk_idx and topk_p must be given together")
        if self.topk_p is not None and np.any(np.diff(self.topk_p) > 0):
            raise ValueError("topk probabilities must be sorted descending")


def one_hot(t: int, K: int) -> np.ndarray:
    y = np.zeros(K)
    y[t] = 1.0
    return y


def temper(p: np.ndarray, T: float) -> np.ndarray:
    """p^(1/T) renormalized; exact logits-tempering when p was a softmax."""
    if T == 1.0:
        return np.asarray(p, dtype=np.float64)
    w = np.asarray(p, dtype=np.float64) ** (1.0 / T)
    return w / w.sum()


def temper_rows(P: np.ndarray, T: float) -> np.ndarray:
    if T == 1.0:
        return P
    W = P ** (1.0 / T)
    return W / W.sum(axis=1, keepdims=True)


def ls_target(t: int, K: int, epsilon: float) -> np.ndarray:
    """Smoothed one-hot: (1 - eps) on class t plus eps/K everywhere."""
    if not (0.0 <= epsilon <= 1.0):
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    target = np.full(K, epsilon / K)
    target[t] += 1.0 - epsilon
    return target


def ce_loss_grad(t: int, z) -> tuple[float, np.ndarray]:
    q = softmax_t(z)
    loss = -float(np.log(max(q[t], LOG_FLOOR)))
    g = q.copy()
    g[t] -= 1.0
    return loss, g


def ls_loss_grad(t: int, z, epsilon: float) -> tuple[float, np.ndarray]:
    q = softmax_t(z)
    target = ls_target(t, len(q), epsilon)
    loss = float(-(target * np.log(np.maximum(q, LOG_FLOOR))).sum())
    return loss, q - target


def mixed_loss_grad(t: int, z, rho, lam: float, T: float,
                    t2_compensation: bool = True) -> tuple[float, np.ndarray]:
    """(1-lam) * H(y, q) + lam * T^2 * H(rho_tempered, q_tempered).

    Gradient: (1-lam)(q - y) + lam * T * (q~ - rho~); without the T^2
    compensation the distillation term is lam / T * (q~ - rho~) instead.
    """
    z = np.asarray(z, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    q = softmax_t(z)
    qt = softmax_t(z, T)
    rt = temper(rho, T)
    y = one_hot(t, len(q))
    scale = T * T if t2_compensation else 1.0
    gscale = T if t2_compensation else 1.0 / T
    loss = ((1.0 - lam) * -float(np.log(max(q[t], LOG_FLOOR)))
            + lam * scale * float(-(rt * np.log(np.maximum(qt, LOG_FLOOR))).sum()))
    grad = (1.0 - lam) * (q - y) + lam * gscale * (qt - rt)
    return loss, grad


def kd_loss_grad(t: int, z, teacher: TeacherSignal, cfg: DistillConfig,
                 t2_compensation: bool = True) -> tuple[float, np.ndarray]:
    """Vanilla distillation against the teacher's full distribution."""
    if teacher.p is None:
        raise ValueError("kd requires the full teacher distribution")
    return mixed_loss_grad(t, z, teacher.p, cfg.lam, cfg.T, t2_compensation)


def partial_kd_loss_grad(t: int, z, rho, cfg: DistillConfig,
                         t2_compensation: bool = True) -> tuple[float, np.ndarray]:
    """Same functional form as kd_loss_grad with a hand-crafted teacher."""
    check_prob_dist(rho)
    return mixed_loss_grad(t, z, rho, cfg.lam, cfg.T, t2_compensation)


def kd_equals_ls_check(t: int, z, K: int, lam: float, tol: float = 1e-12) -> bool:
    """Distilling from a uniform teacher at T=1 must reproduce the label
    smoothing gradient with epsilon = lambda."""
    uniform = np.full(K, 1.0 / K)
    _, g_kd = mixed_loss_grad(t, z, uniform, lam, 1.0)
    _, g_ls = ls_loss_grad(t, z, lam)
    return bool(np.max(np.abs(g_kd - g_ls)) <= tol)


def rho_pt(t: int, p_t: float, K: int) -> np.ndarray:
    """Confidence-only teacher: p_t on the truth, the rest spread evenly."""
    if not (0.0 <= p_t <= 1.0):
        raise ValueError(f"p_t must be in [0, 1], got {p_t}")
    if K < 2:
        raise ValueError("need K >= 2")
    rho = np.full(K, (1.0 - p_t) / (K - 1))
    rho[t] = p_t
    return rho


def rho_sim(t: int, W_teacher, alpha_sim: float, beta_sim: float) -> np.ndarray:
    """Similarity-only teacher: softmax over the (amplified) cosine row of
    the ground-truth class in the teacher's logit layer.

    Negative cosines are clamped to zero before the fractional power:
    anti-aligned classes are treated as unrelated.
    """
    W = np.asarray(W_teacher, dtype=np.float64)
    norms = np.linalg.norm(W, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("teacher logit matrix has a zero row")
    if not (0.0 < alpha_sim <= 1.0) or not (beta_sim > 0):
        raise ValueError("need alpha_sim in (0, 1] and beta_sim > 0")
    cos = (W @ W[t]) / (norms * norms[t])
    cos[t] = 1.0
    scores = np.clip(cos, 0.0, None) ** alpha_sim / beta_sim
    return softmax_t(scores)


def sim_matrix(W_teacher, alpha_sim: float, beta_sim: float) -> np.ndarray:
    """All rho_sim rows at once; row t is the teacher for class t."""
    W = np.asarray(W_teacher, dtype=np.float64)
    return np.stack([rho_sim(t, W, alpha_sim, beta_sim) for t in range(W.shape[0])])


def rho_rel(t: int, siblings, beta1: float, beta2: float, beta3: float,
            K: int) -> np.ndarray:
    """Hierarchy-only teacher: three fixed mass levels (truth, siblings of
    the truth, everything else). The masses must already normalize."""
    siblings = sorted(set(int(s) for s in siblings))
    if t in siblings:
        raise ValueError("ground-truth class cannot be its own sibling")
    if not (beta1 > beta2 > beta3 > 0):
        raise ValueError("need beta1 > beta2 > beta3 > 0")
    total = beta1 + len(siblings) * beta2 + (K - 1 - len(siblings)) * beta3
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"masses sum to {total}, expected 1")
    rho = np.full(K, beta3)
    rho[siblings] = beta2
    rho[t] = beta1
    return rho


def rho_pt_sim(rho_pt_vec, rho_sim_vec, alpha_mix: float) -> np.ndarray:
    """Convex combination of the confidence-only and similarity-only teachers."""
    if not (0.0 <= alpha_mix <= 1.0):
        raise ValueError(f"alpha_mix must be in [0, 1], got {alpha_mix}")
    return (1.0 - alpha_mix) * np.asarray(rho_pt_vec) + alpha_mix * np.asarray(rho_sim_vec)


def rho_topk(p, k: int) -> np.ndarray:
    """Keep the k largest teacher probabilities in place and spread the
    leftover mass uniformly over the other classes. Ties at the k-th value
    keep the lower class index."""
    p = np.asarray(p, dtype=np.float64)
    K = len(p)
    if not (1 <= k <= K):
        raise ValueError(f"k must be in [1, {K}], got {k}")
    if k == K:
        return p.copy()
    order = np.argsort(-p, kind="stable")
    keep = order[:k]
    rho = np.full(K, (1.0 - p[keep].sum()) / (K - k))
    rho[keep] = p[keep]
    return rho


def topk_of(p, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the k largest entries, descending, ties by
    lower index first."""
    p = np.asarray(p, dtype=np.float64)
    order = np.argsort(-p, kind="stable")[:k]
    return order.astype(np.int64), p[order]


# ---------------------------------------------------------------------------
# Teacher signal cache (one file per dataset split)

@dataclass
class TeacherCache:
    kind: str
    K: int
    k: int
    p: np.ndarray | None = None          # (n, K) for FULL
    p_t: np.ndarray | None = None        # (n,) for PT
    topk_idx: np.ndarray | None = None   # (n, k) for TOPK
    topk_p: np.ndarray | None = None     # (n, k) for TOPK

    def __len__(self) -> int:
        for arr in (self.p, self.p_t, self.topk_idx):
            if arr is not None:
                return arr.shape[0]
        return 0

    def signal(self, i: int) -> TeacherSignal:
        if self.kind == KIND_FULL:
            return TeacherSignal(p=self.p[i])
        if self.kind == KIND_PT:
            return TeacherSignal(p_t=float(self.p_t[i]))
        return TeacherSignal(topk_idx=self.topk_idx[i], topk_p=self.topk_p[i])


def payload_bytes_per_example(kind: str, K: int, k: int = 0) -> int:
    """Per-record payload size: FULL stores K float64, PT one float64,
    TOPK k (u32, float64) pairs."""
    if kind == KIND_FULL:
        return 8 * K
    if kind == KIND_PT:
        return 8
    if kind == KIND_TOPK:
        return 12 * k
    raise ValueError(f"unknown cache kind {kind!r}")


def write_teacher_cache(path, cache: TeacherCache) -> None:
    n = len(cache)
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<IIIIQ", CACHE_VERSION, _KIND_CODES[cache.kind],
                            cache.K, cache.k, n))
        if cache.kind == KIND_FULL:
            f.write(np.ascontiguousarray(cache.p, dtype="<f8").tobytes())
        elif cache.kind == KIND_PT:
            f.write(np.ascontiguousarray(cache.p_t, dtype="<f8").tobytes())
        else:
            rec = np.empty(n, dtype=np.dtype([("idx", "<u4", (cache.k,)),
                                              ("p", "<f8", (cache.k,))]))
            rec["idx"] = cache.topk_idx
            rec["p"] = cache.topk_p
            f.write(rec.tobytes())


def read_teacher_cache(path) -> TeacherCache:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CACHE_MAGIC:
            raise ValueError(f"bad teacher cache magic {magic!r}")
        version, kind_code, K, k, n = struct.unpack("<IIIIQ", f.read(24))
        if version != CACHE_VERSION:
            raise ValueError(f"unsupported cache version {version}")
        kind = _KIND_NAMES[kind_code]
        raw = f.read()
    if kind == KIND_FULL:
        p = np.frombuffer(raw, dtype="<f8").reshape(n, K).astype(np.float64)
        return TeacherCache(kind=kind, K=K, k=k, p=p)
    if kind == KIND_PT:
        p_t = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        return TeacherCache(kind=kind, K=K, k=k, p_t=p_t)
    rec = np.frombuffer(raw, dtype=np.dtype([("idx", "<u4", (k,)), ("p", "<f8", (k,))]))
    return TeacherCache(kind=kind, K=K, k=k,
                        topk_idx=rec["idx"].astype(np.int64),
                        topk_p=rec["p"].astype(np.float64))


# ---------------------------------------------------------------------------
# Batched loss heads for the training loop

class LossHead:
    """Per-batch loss/gradient closure for one configured method.

    ``teacher_rows(t, idx)`` materializes the (possibly hand-crafted)
    teacher distribution for each example in the batch; CE and LS skip it.
    """

    def __init__(self, cfg: DistillConfig, K: int,
                 cache: TeacherCache | None = None,
                 W_teacher: np.ndarray | None = None,
                 super_of: np.ndarray | None = None):
        self.cfg = cfg
        self.K = K
        self.cache = cache
        self._sim = None
        self._rel = None
        m = cfg.method
        if m in (Method.KD_SIM, Method.KD_PT_SIM):
            if W_teacher is None:
                raise ValueError(f"{m.value} needs the teacher logit-layer weights")
            self._sim = sim_matrix(W_teacher, cfg.alpha_sim, cfg.beta_sim)
        if m is Method.KD_REL:
            if super_of is None:
                raise ValueError("kd-rel needs the class hierarchy")
            self._rel = np.stack([
                rho_rel(t, [j for j in range(K) if super_of[j] == super_of[t] and j != t],
                        cfg.beta1, cfg.beta2, cfg.beta3, K)
                for t in range(K)])
        needs = {Method.KD: KIND_FULL, Method.KD_PT: KIND_PT,
                 Method.KD_PT_SIM: KIND_PT, Method.KD_TOPK: KIND_TOPK}
        want = needs.get(m)
        if want is not None:
            if cache is None:
                raise ValueError(f"{m.value} needs a teacher cache")
            if cache.kind == KIND_FULL:
                pass  # a FULL cache can serve any method
            elif cache.kind != want:
                raise ValueError(f"{m.value} needs a {want} cache, got {cache.kind}")

    def _pt_rows(self, t, idx):
        if self.cache.kind == KIND_FULL:
            pt = self.cache.p[idx, t]
        else:
            pt = self.cache.p_t[idx]
        rows = np.repeat(((1.0 - pt) / (self.K - 1))[:, None], self.K, axis=1)
        rows[np.arange(len(t)), t] = pt
        return rows

    def _topk_rows(self, idx):
        c = self.cfg
        if self.cache.kind == KIND_FULL:
            rows = np.stack([rho_topk(self.cache.p[i], c.k) for i in idx])
            return rows
        ki, kp = self.cache.topk_idx[idx], self.cache.topk_p[idx]
        s = kp.sum(axis=1)
        fill = (1.0 - s) / (self.K - c.k) if self.K > c.k else np.zeros_like(s)
        rows = np.repeat(fill[:, None], self.K, axis=1)
        np.put_along_axis(rows, ki, kp, axis=1)
        return rows

    def teacher_rows(self, t, idx) -> np.ndarray | None:
        m = self.cfg.method
        if m in (Method.CE, Method.LS):
            return None
        if m is Method.KD:
            return self.cache.p[idx]
        if m is Method.KD_PT:
            return self._pt_rows(t, idx)
        if m is Method.KD_SIM:
            return self._sim[t]
        if m is Method.KD_REL:
            return self._rel[t]
        if m is Method.KD_PT_SIM:
            a = self.cfg.alpha_mix
            return (1.0 - a) * self._pt_rows(t, idx) + a * self._sim[t]
        if m is Method.KD_TOPK:
            return self._topk_rows(idx)
        raise AssertionError(m)

    def __call__(self, t: np.ndarray, Z: np.ndarray,
                 idx: np.ndarray | None = None) -> tuple[float, np.ndarray]:
        """Mean loss over the batch and its gradient w.r.t. Z."""
        cfg = self.cfg
        B = Z.shape[0]
        rows = np.arange(B)
        Q = softmax_rows(Z)
        hard = -np.log(np.maximum(Q[rows, t], LOG_FLOOR)).mean()
        if cfg.method is Method.CE:
            dZ = Q
            dZ[rows, t] -= 1.0
            return float(hard), dZ / B
        if cfg.method is Method.LS:
            eps = cfg.epsilon
            target = np.full_like(Q, eps / self.K)
            target[rows, t] += 1.0 - eps
            loss = -(target * np.log(np.maximum(Q, LOG_FLOOR))).sum(axis=1).mean()
            return float(loss), (Q - target) / B
        RHO = self.teacher_rows(t, idx)
        QT = softmax_rows(Z, cfg.T)
        RT = temper_rows(RHO, cfg.T)
        soft = -(RT * np.log(np.maximum(QT, LOG_FLOOR))).sum(axis=1).mean()
        loss = (1.0 - cfg.lam) * hard + cfg.lam * cfg.T * cfg.T * soft
        Y = np.zeros_like(Q)
        Y[rows, t] = 1.0
        dZ = ((1.0 - cfg.lam) * (Q - Y) + cfg.lam * cfg.T * (QT - RT)) / B
        return float(loss), dZ
