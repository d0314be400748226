"""Optimization loops, evaluation, and teacher-signal precomputation.

The parameter-update loop is strictly sequential and draws every random
choice from named substreams of the run seed, so a rerun with the same
config reproduces checkpoints and metric files byte for byte.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .distill import (KIND_FULL, KIND_PT, KIND_TOPK, DistillConfig, LossHead,
                      Method, TeacherCache)
from .mathcore import SeededRng, softmax_rows
from .mlp import MlpConfig, MlpParams, backward, forward, init_params
from .synthgen import Dataset

PARAM_NORM_LIMIT = 1e6
NORM_CHECK_EVERY = 100


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"            # "adam" or "sgd_nesterov"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_schedule: tuple = ()       # ((step, lr), ...) piecewise-constant

    def __post_init__(self):
        if self.kind not in ("adam", "sgd_nesterov"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not (self.lr > 0):
            raise ValueError("lr must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")

    def lr_at(self, step: int) -> float:
        lr = self.lr
        for boundary, value in self.lr_schedule:
            if step >= boundary:
                lr = value
        return lr


class Adam:
    def __init__(self, cfg: OptimizerConfig, flat: np.ndarray):
        self.cfg = cfg
        self.flat = flat
        self.m = np.zeros_like(flat)
        self.v = np.zeros_like(flat)
        self.t = 0

    def step(self, grads: np.ndarray) -> None:
        c = self.cfg
        self.t += 1
        if c.weight_decay:
            grads = grads + c.weight_decay * self.flat
        self.m *= c.adam_beta1
        self.m += (1.0 - c.adam_beta1) * grads
        self.v *= c.adam_beta2
        self.v += (1.0 - c.adam_beta2) * grads * grads
        mhat = self.m / (1.0 - c.adam_beta1 ** self.t)
        vhat = self.v / (1.0 - c.adam_beta2 ** self.t)
        self.flat -= c.lr_at(self.t) * mhat / (np.sqrt(vhat) + c.adam_eps)


class SgdNesterov:
    def __init__(self, cfg: OptimizerConfig, flat: np.ndarray):
        self.cfg = cfg
        self.flat = flat
        self.vel = np.zeros_like(flat)
        self.t = 0

    def step(self, grads: np.ndarray) -> None:
        c = self.cfg
        self.t += 1
        if c.weight_decay:
            grads = grads + c.weight_decay * self.flat
        self.vel *= c.momentum
        self.vel += grads
        self.flat -= c.lr_at(self.t) * (grads + c.momentum * self.vel)


def make_optimizer(cfg: OptimizerConfig, flat: np.ndarray):
    return Adam(cfg, flat) if cfg.kind == "adam" else SgdNesterov(cfg, flat)


@dataclass(frozen=True)
class RunConfig:
    model: MlpConfig
    loss: DistillConfig
    optimizer: OptimizerConfig = OptimizerConfig()
    batch_size: int = 128
    max_steps: int = 1000
    eval_every: int = 1000
    seed: int = 0
    diagnostics_enabled: bool = False
    train_path: str | None = None
    valid_path: str | None = None
    teacher_ckpt: str | None = None
    teacher_cache: str | None = None

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class Metrics:
    step: int
    train_loss: float
    valid_top1: float
    best_so_far: float


@dataclass
class TrainResult:
    best_params: MlpParams
    best_step: int
    best_acc: float
    final_params: MlpParams
    history: list[Metrics] = field(default_factory=list)


def evaluate(params: MlpParams, dataset: Dataset, batch_size: int = 4096) -> Metrics:
    """Top-1 accuracy over a split (argmax ties go to the lowest index)."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        trace = forward(params, dataset.X[lo:hi], mode="eval")
        correct += int((trace.Z.argmax(axis=1) == dataset.t[lo:hi]).sum())
    return Metrics(step=0, train_loss=np.nan, valid_top1=correct / n,
                   best_so_far=correct / n)


def train(run: RunConfig, train_ds: Dataset, valid_ds: Dataset,
          cache: TeacherCache | None = None,
          W_teacher: np.ndarray | None = None,
          super_of: np.ndarray | None = None) -> TrainResult:
    """Single-writer training loop; returns the best-accuracy snapshot
    (the headline number is the best evaluation over the run) plus the
    final parameters and full metric history."""
    if run.loss.method not in (Method.CE, Method.LS):
        needs_cache = run.loss.method not in (Method.KD_SIM, Method.KD_REL)
        if needs_cache and cache is None:
            raise ValueError(f"{run.loss.method.value} requires a teacher cache")
    if len(train_ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = SeededRng(run.seed)
    params = init_params(run.model, rng)
    opt = make_optimizer(run.optimizer, params.flat)
    head = LossHead(run.loss, run.model.K, cache=cache,
                    W_teacher=W_teacher, super_of=super_of)
    batches = rng.stream("batch")
    n = len(train_ds)
    history: list[Metrics] = []
    best_acc, best_step = -1.0, 0
    best_params = params.clone()
    loss = np.nan
    for step in range(1, run.max_steps + 1):
        idx = batches.integers(0, n, size=run.batch_size)
        X = train_ds.X[idx]
        t = train_ds.t[idx]
        trace = forward(params, X, mode="train")
        loss, dZ = head(t, trace.Z, idx)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss {loss} at step {step}; "
                f"param norm {np.linalg.norm(params.flat):.3e}")
        grads = backward(trace, params, dZ)
        opt.step(grads)
        if step % NORM_CHECK_EVERY == 0:
            norm = float(np.linalg.norm(params.flat))
            if norm > PARAM_NORM_LIMIT:
                raise TrainingDiverged(f"parameter norm {norm:.3e} exceeded "
                                       f"{PARAM_NORM_LIMIT} at step {step}")
        if step % run.eval_every == 0 or step == run.max_steps:
            acc = evaluate(params, valid_ds).valid_top1
            if acc > best_acc:
                best_acc, best_step = acc, step
                best_params = params.clone()
            history.append(Metrics(step=step, train_loss=float(loss),
                                   valid_top1=acc, best_so_far=best_acc))
    return TrainResult(best_params=best_params, best_step=best_step,
                       best_acc=best_acc, final_params=params, history=history)


def precompute_teacher(params: MlpParams, dataset: Dataset, kind: str,
                       k: int = 0, batch_size: int = 4096) -> TeacherCache:
    """Teacher outputs for every example, in dataset order.

    FULL keeps the whole distribution, PT only the confidence on the
    ground-truth class, TOPK the k largest (class, probability) pairs.
    """
    n = len(dataset)
    K = params.cfg.K
    if kind == KIND_TOPK and not (1 <= k <= K):
        raise ValueError(f"k must be in [1, {K}]")
    P = np.empty((n, K))
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        trace = forward(params, dataset.X[lo:hi], mode="eval")
        P[lo:hi] = softmax_rows(trace.Z)
    if kind == KIND_FULL:
        return TeacherCache(kind=kind, K=K, k=0, p=P)
    if kind == KIND_PT:
        return TeacherCache(kind=kind, K=K, k=0,
                            p_t=P[np.arange(n), dataset.t])
    if kind == KIND_TOPK:
        order = np.argsort(-P, axis=1, kind="stable")[:, :k]
        vals = np.take_along_axis(P, order, axis=1)
        return TeacherCache(kind=kind, K=K, k=k,
                            topk_idx=order.astype(np.int64), topk_p=vals)
    raise ValueError(f"unknown cache kind {kind!r}")


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "train_loss", "valid_top1", "best_so_far"])
        for m in history:
            w.writerow([m.step, repr(m.train_loss), repr(m.valid_top1),
                        repr(m.best_so_far)])


def read_history_csv(path) -> list[Metrics]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(Metrics(step=int(row["step"]),
                               train_loss=float(row["train_loss"]),
                               valid_top1=float(row["valid_top1"]),
                               best_so_far=float(row["best_so_far"])))
    return out
