"""Two-hidden-layer tanh network with hand-derived forward/backward passes.

Parameters live in one flat float64 buffer with named views, so optimizers
update a single contiguous array. Batchnorm running statistics are state,
not parameters, and are kept separately. The heavy batched math is
delegated to ``dlab._kernels`` (compiled when available).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .mathcore import SeededRng, read_matrix, write_matrix

BN_EPS = 1e-5
BN_MOMENTUM = 0.99
LOGIT_SCALE_INIT = 10.0

CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpConfig:
    d_in: int
    hidden: int
    K: int
    use_batchnorm: bool = False
    use_residual: bool = False
    normalize_logits: bool = False

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError("hidden width must be >= 1")
        if self.d_in < 1 or self.K < 1:
            raise ValueError("d_in and K must be >= 1")


def _param_shapes(cfg: MlpConfig) -> dict[str, tuple[int, ...]]:
    h, d, K = cfg.hidden, cfg.d_in, cfg.K
    shapes: dict[str, tuple[int, ...]] = {"W1": (h, d), "b1": (h,)}
    if cfg.use_batchnorm:
        shapes["g1"] = (h,)
        shapes["s1"] = (h,)
    shapes["W2"] = (h, h)
    shapes["b2"] = (h,)
    if cfg.use_batchnorm:
        shapes["g2"] = (h,)
        shapes["s2"] = (h,)
    shapes["Wl"] = (K, h)
    if cfg.normalize_logits:
        shapes["log_scale"] = (1,)
    else:
        shapes["bl"] = (K,)
    return shapes


@dataclass
class MlpParams:
    cfg: MlpConfig
    flat: np.ndarray
    views: dict[str, np.ndarray] = field(default_factory=dict)
    slices: dict[str, slice] = field(default_factory=dict)
    running: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, cfg: MlpConfig) -> "MlpParams":
        shapes = _param_shapes(cfg)
        total = sum(int(np.prod(s)) for s in shapes.values())
        flat = np.zeros(total)
        views, slices = {}, {}
        off = 0
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            slices[name] = slice(off, off + n)
            views[name] = flat[off:off + n].reshape(shape)
            off += n
        running = {}
        if cfg.use_batchnorm:
            h = cfg.hidden
            running = {"rm1": np.zeros(h), "rv1": np.ones(h),
                       "rm2": np.zeros(h), "rv2": np.ones(h)}
        return cls(cfg=cfg, flat=flat, views=views, slices=slices, running=running)

    def clone(self) -> "MlpParams":
        out = MlpParams.zeros(self.cfg)
        out.flat[:] = self.flat
        for k, v in self.running.items():
            out.running[k][:] = v
        return out

    def grads_like(self) -> np.ndarray:
        return np.zeros_like(self.flat)

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {name: flat[sl].reshape(self.views[name].shape)
                for name, sl in self.slices.items()}

    def check_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat)))


def init_params(cfg: MlpConfig, rng: SeededRng) -> MlpParams:
    """Glorot-uniform weights, zero biases, identity batchnorm affine."""
    params = MlpParams.zeros(cfg)
    for name in ("W1", "W2", "Wl"):
        W = params.views[name]
        fan_out, fan_in = W.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W[:] = rng.stream(f"init.{name}").uniform(-limit, limit, size=W.shape)
    if cfg.use_batchnorm:
        params.views["g1"][:] = 1.0
        params.views["g2"][:] = 1.0
    if cfg.normalize_logits:
        params.views["log_scale"][:] = np.log(LOGIT_SCALE_INIT)
    return params


@dataclass
class ForwardTrace:
    X: np.ndarray
    Z: np.ndarray
    cache: tuple
    mode: str
    squeeze: bool

    @property
    def z(self) -> np.ndarray:
        return self.Z[0] if self.squeeze else self.Z

    @property
    def h(self) -> np.ndarray:
        """Penultimate activation feeding the logit layer."""
        H2 = self.cache[7]
        return H2[0] if self.squeeze else H2


def _kernel_args(params: MlpParams):
    cfg = params.cfg
    v = params.views
    e1 = np.empty(0)
    if cfg.use_batchnorm:
        bn = (v["g1"], v["s1"], params.running["rm1"], params.running["rv1"],
              v["g2"], v["s2"], params.running["rm2"], params.running["rv2"])
    else:
        bn = (e1, e1, e1, e1, e1, e1, e1, e1)
    if cfg.normalize_logits:
        bl = np.zeros(cfg.K)
        log_scale = float(v["log_scale"][0])
    else:
        bl = v["bl"]
        log_scale = 0.0
    return v["W1"], v["b1"], v["W2"], v["b2"], v["Wl"], bl, bn, log_scale


def forward(params: MlpParams, x, mode: str = "eval") -> ForwardTrace:
    """Run the network on one example (1-D x) or a batch (2-D x).

    Train mode normalizes with batch statistics and advances the batchnorm
    running averages; eval mode reads the running averages and never
    mutates state.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = params.cfg
    X = np.asarray(x, dtype=np.float64)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != cfg.d_in:
        raise ValueError(f"input shape {np.shape(x)} incompatible with d_in={cfg.d_in}")
    W1, b1, W2, b2, Wl, bl, bn, log_scale = _kernel_args(params)
    Z, cache = _kernels.mlp_forward(
        X, W1, b1, W2, b2, Wl, bl, *bn, log_scale,
        cfg.use_batchnorm, cfg.use_residual, cfg.normalize_logits,
        mode == "train", BN_EPS, BN_MOMENTUM)
    return ForwardTrace(X=X, Z=Z, cache=cache, mode=mode, squeeze=squeeze)


def backward(trace: ForwardTrace, params: MlpParams, dL_dz) -> np.ndarray:
    """Chain dL/dz through the cached forward pass; returns a flat gradient
    aligned with ``params.flat``. Linear in dL_dz; batch gradients sum."""
    cfg = params.cfg
    dZ = np.asarray(dL_dz, dtype=np.float64)
    if dZ.ndim == 1:
        dZ = dZ[None, :]
    if dZ.shape != trace.Z.shape:
        raise ValueError(f"dL_dz shape {dZ.shape} does not match logits {trace.Z.shape}")
    W1, b1, W2, b2, Wl, bl, bn, log_scale = _kernel_args(params)
    out = _kernels.mlp_backward(
        dZ, trace.X, W1, W2, Wl, bn[0], bn[4], log_scale, trace.cache,
        cfg.use_batchnorm, cfg.use_residual, cfg.normalize_logits,
        trace.mode == "train")
    dW1, db1, dg1, ds1, dW2, db2, dg2, ds2, dWl, dbl, dlog = out
    grads = params.grads_like()
    g = params.unflatten(grads)
    g["W1"][:] = dW1
    g["b1"][:] = db1
    g["W2"][:] = dW2
    g["b2"][:] = db2
    g["Wl"][:] = dWl
    if cfg.use_batchnorm:
        g["g1"][:] = dg1
        g["s1"][:] = ds1
        g["g2"][:] = dg2
        g["s2"][:] = ds2
    if cfg.normalize_logits:
        g["log_scale"][:] = dlog
    else:
        g["bl"][:] = dbl
    return grads


def save_checkpoint(path, params: MlpParams, step: int = 0) -> None:
    """Checkpoint = header + json manifest (config, step, array order)
    + each named array in the dense matrix format. Round-trips bit-exactly."""
    names = list(params.views.keys())
    run_names = list(params.running.keys())
    manifest = json.dumps({"cfg": asdict(params.cfg), "step": int(step),
                           "params": names, "running": run_names},
                          sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(manifest)))
        f.write(manifest)
        for name in names:
            arr = params.views[name]
            write_matrix(f, arr if arr.ndim == 2 else arr.reshape(1, -1))
        for name in run_names:
            write_matrix(f, params.running[name].reshape(1, -1))


def load_checkpoint(path) -> tuple[MlpParams, int]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, mlen = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        manifest = json.loads(f.read(mlen).decode())
        cfg = MlpConfig(**manifest["cfg"])
        params = MlpParams.zeros(cfg)
        if manifest["params"] != list(params.views.keys()):
            raise ValueError("checkpoint parameter list does not match config")
        for name in manifest["params"]:
            params.views[name][:] = read_matrix(f).reshape(params.views[name].shape)
        for name in manifest["running"]:
            params.running[name][:] = read_matrix(f).reshape(-1)
    return params, manifest["step"]
