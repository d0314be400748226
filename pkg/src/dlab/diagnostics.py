"""Analysis quantities for the two distillation mechanisms: per-class
gradient rescaling (example re-weighting) and logit-layer geometry.

All gradient ratios here use the un-compensated distillation gradient
convention (lam / T), which is the scale the re-weighting identities are
stated in; the trainer's T^2-compensated loss differs only by the constant
factor T^2 on the soft term.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np

from .distill import DistillConfig, temper, temper_rows
from .mathcore import cosine_sim_matrix, pearson_corr_matrix, softmax_rows, softmax_t

OMEGA_DENOM_FLOOR = 1e-9


@dataclass
class DiagnosticsRecord:
    example_id: int
    p_t: float            # teacher confidence on the truth
    q_t: float            # student confidence on the truth
    p_tilde_t: float      # tempered teacher confidence
    omega_t: float        # rescaling factor on the truth class (nan if undefined)
    omega_sum_ratio: float  # sum|grad_kd| / sum|grad_ce|
    c_tilde_t: float      # p_tilde_t - q_tilde_t
    omega_defined: bool
    conditions_ok: bool   # sign conditions of the re-weighting identity


@dataclass
class HeatmapBundle:
    pearson: np.ndarray
    cosine: np.ndarray
    class_order: np.ndarray
    degenerate: np.ndarray  # classes whose probability column had no variance


def omega(t: int, z_student, teacher_p, cfg: DistillConfig,
          denom_floor: float = OMEGA_DENOM_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Per-class ratio of the distillation gradient to the plain gradient:

        omega_i = (1 - lam) + (lam / T) * (q~_i - p~_i) / (q_i - y_i)

    Entries whose plain gradient is below the floor are undefined and
    returned as nan with a False mask; aggregates must skip them.
    """
    z = np.asarray(z_student, dtype=np.float64)
    q = softmax_t(z)
    qt = softmax_t(z, cfg.T)
    pt = temper(np.asarray(teacher_p, dtype=np.float64), cfg.T)
    denom = q.copy()
    denom[t] -= 1.0
    defined = np.abs(denom) > denom_floor
    out = np.full(len(q), np.nan)
    out[defined] = (1.0 - cfg.lam) + (cfg.lam / cfg.T) * (qt[defined] - pt[defined]) / denom[defined]
    return out, defined


@dataclass
class Prop1Result:
    lhs: float            # sum|grad_kd| / sum|grad_ce| from actual gradients
    rhs: float            # (1 - lam) + (lam / T) * c_tilde_t / (1 - q_t)
    balance_gap: float    # | |grad_kd_t| - sum_{i != t} |grad_kd_i| |
    conditions_ok: bool


def prop1_ratio(t: int, z_student, teacher_p, cfg: DistillConfig) -> Prop1Result:
    """Whole-example gradient rescaling identity.

    The closed form holds when the teacher is relatively more confident on
    the truth (tempered p_t above tempered q_t, and below on every other
    class); records violating those sign conditions are flagged rather
    than rejected.
    """
    z = np.asarray(z_student, dtype=np.float64)
    p = np.asarray(teacher_p, dtype=np.float64)
    q = softmax_t(z)
    qt = softmax_t(z, cfg.T)
    ptil = temper(p, cfg.T)
    y = np.zeros(len(q))
    y[t] = 1.0
    g_ce = q - y
    g_kd = (1.0 - cfg.lam) * g_ce + (cfg.lam / cfg.T) * (qt - ptil)
    lhs = float(np.abs(g_kd).sum() / np.abs(g_ce).sum())
    c_t = float(ptil[t] - qt[t])
    rhs = (1.0 - cfg.lam) + (cfg.lam / cfg.T) * c_t / (1.0 - float(q[t]))
    others = np.arange(len(q)) != t
    ok = c_t > 0 and bool(np.all(qt[others] >= ptil[others]))
    balance = abs(abs(g_kd[t]) - np.abs(g_kd[others]).sum())
    return Prop1Result(lhs=lhs, rhs=rhs, balance_gap=float(balance), conditions_ok=ok)


def collect_records(t_labels, Z_student, teacher_p_rows,
                    cfg: DistillConfig) -> list[DiagnosticsRecord]:
    """Vectorized per-example diagnostics over logged student logits and
    teacher distributions."""
    t_labels = np.asarray(t_labels)
    Z = np.asarray(Z_student, dtype=np.float64)
    P = np.asarray(teacher_p_rows, dtype=np.float64)
    n, K = Z.shape
    rows = np.arange(n)
    Q = softmax_rows(Z)
    QT = softmax_rows(Z, cfg.T)
    PT = temper_rows(P, cfg.T)
    Y = np.zeros_like(Q)
    Y[rows, t_labels] = 1.0
    G = Q - Y
    GKD = (1.0 - cfg.lam) * G + (cfg.lam / cfg.T) * (QT - PT)
    lhs = np.abs(GKD).sum(axis=1) / np.abs(G).sum(axis=1)
    q_t = Q[rows, t_labels]
    qt_t = QT[rows, t_labels]
    pt_t = PT[rows, t_labels]
    denom = q_t - 1.0
    defined = np.abs(denom) > OMEGA_DENOM_FLOOR
    om = np.full(n, np.nan)
    om[defined] = (1.0 - cfg.lam) + (cfg.lam / cfg.T) * (qt_t - pt_t)[defined] / denom[defined]
    others_max = np.where(Y.astype(bool), -np.inf, PT - QT).max(axis=1)
    ok = (pt_t > qt_t) & (others_max <= 0)
    return [DiagnosticsRecord(
        example_id=int(i),
        p_t=float(P[i, t_labels[i]]),
        q_t=float(q_t[i]),
        p_tilde_t=float(pt_t[i]),
        omega_t=float(om[i]),
        omega_sum_ratio=float(lhs[i]),
        c_tilde_t=float(pt_t[i] - qt_t[i]),
        omega_defined=bool(defined[i]),
        conditions_ok=bool(ok[i]),
    ) for i in range(n)]


@dataclass
class CorrelationResult:
    value: float
    n_used: int
    flagged: bool
    reason: str = ""


def correlate_pt_omega(records) -> CorrelationResult:
    """Pearson correlation between tempered teacher confidence and
    log(omega_t) over records where omega_t is defined and positive."""
    pts, oms = [], []
    for r in records:
        if r.omega_defined and np.isfinite(r.omega_t) and r.omega_t > 0:
            pts.append(r.p_tilde_t)
            oms.append(np.log(r.omega_t))
    if len(pts) < 2:
        return CorrelationResult(np.nan, len(pts), True, "fewer than 2 usable records")
    x = np.asarray(pts)
    z = np.asarray(oms)
    if np.std(x) == 0 or np.std(z) == 0:
        return CorrelationResult(np.nan, len(pts), True, "degenerate variance")
    c = float(np.corrcoef(x, z)[0, 1])
    return CorrelationResult(c, len(pts), False)


def solve_fixed_feature_logits(h, p, t: int, lam: float,
                               tol: float = 1e-8,
                               max_steps: int = 5_000_000) -> np.ndarray:
    """Train the logit layer on one example with the penultimate activation
    held fixed (the convex reduction), by plain gradient descent from zero
    init, until the full parameter gradient norm drops below tol.

    At the optimum the student distribution equals
    (1 - lam) * one_hot(t) + lam * p.
    """
    h = np.asarray(h, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    K = len(p)
    hsq = float(h @ h)
    if hsq == 0.0:
        raise ValueError("zero feature vector")
    y = np.zeros(K)
    y[t] = 1.0
    W = np.zeros((K, len(h)))
    lr = 1.0 / hsq
    hnorm = np.sqrt(hsq)
    for _ in range(max_steps):
        q = softmax_t(W @ h)
        dz = (1.0 - lam) * (q - y) + lam * (q - p)
        if np.linalg.norm(dz) * hnorm < tol:
            return W
        W -= lr * np.outer(dz, h)
    raise RuntimeError(f"logit-layer subproblem did not reach gradient norm {tol}")


def prop2_geometry_check(h, W_star, p, t: int, dist_tol: float = 1e-6) -> bool:
    """At the trained optimum, squared distances between the feature and the
    class weight rows must order inversely to the teacher probabilities over
    the incorrect classes (pairs closer than dist_tol are skipped as ties)."""
    h = np.asarray(h, dtype=np.float64)
    W = np.asarray(W_star, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    d2 = ((h[None, :] - W) ** 2).sum(axis=1)
    incorrect = [i for i in range(len(p)) if i != t]
    for a_pos, i in enumerate(incorrect):
        for j in incorrect[a_pos + 1:]:
            if abs(d2[i] - d2[j]) <= dist_tol:
                continue
            if (d2[i] < d2[j]) != (p[i] > p[j]):
                return False
    return True


def build_heatmaps(prob_samples, W, class_order=None) -> HeatmapBundle:
    """Correlation heatmap of output probabilities plus cosine heatmap of
    the logit-layer rows, both permuted so sibling classes sit adjacent.
    Temper the samples upstream if a softened view is wanted."""
    P = np.asarray(prob_samples, dtype=np.float64)
    K = P.shape[1]
    order = np.arange(K) if class_order is None else np.asarray(class_order)
    pearson, degenerate = pearson_corr_matrix(P, return_degenerate=True)
    cosine = cosine_sim_matrix(W)
    pearson = pearson[np.ix_(order, order)]
    cosine = cosine[np.ix_(order, order)]
    return HeatmapBundle(pearson=pearson, cosine=cosine, class_order=order,
                         degenerate=degenerate[order])


def block_structure_stats(M: np.ndarray, super_of) -> tuple[float, float]:
    """Mean off-diagonal entry inside super-class blocks vs outside them."""
    s = np.asarray(super_of)
    same = s[:, None] == s[None, :]
    off_diag = ~np.eye(len(s), dtype=bool)
    intra = float(M[same & off_diag].mean())
    inter = float(M[~same].mean())
    return intra, inter


def pt_histogram(values, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width histogram of confidences over [0, 1]."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64),
                                 bins=bins, range=(0.0, 1.0))
    return counts, edges


def write_records_csv(path, records) -> None:
    names = [f.name for f in fields(DiagnosticsRecord)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(names)
        for r in records:
            w.writerow([getattr(r, n) for n in names])


def write_histogram_csv(path, counts, edges) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_left", "bin_right", "count"])
        for i, c in enumerate(counts):
            w.writerow([edges[i], edges[i + 1], int(c)])
