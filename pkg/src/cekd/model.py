"""A small CAM-compatible CNN with hand-written backprop and momentum SGD.

Architecture: fixed input standardization, then
``[conv3x3 -> ReLU -> (2x2 mean pool)] * L -> GAP -> linear``.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import RngStream

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    input_channels: int = 1
    input_hw: int = 24
    conv_channels: tuple[int, ...] = (8, 16, 32)
    pool_after: tuple[bool, ...] = (True, True, True)
    num_classes: int = 8
    kernel: int = 3
    input_mean: float = 0.5
    input_std: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "pool_after", tuple(bool(p) for p in self.pool_after))
        if self.kernel != 3:
            raise ValueError("only 3x3 kernels are supported")
        if not self.input_std > 0:
            raise ValueError("input_std must be positive")
        if len(self.conv_channels) != len(self.pool_after):
            raise ValueError("conv_channels and pool_after must have equal length")
        if not self.conv_channels:
            raise ValueError("at least one conv layer is required")
        hw = self.input_hw
        for pool in self.pool_after:
            if pool:
                if hw % 2:
                    raise ValueError(f"cannot mean-pool odd spatial size {hw}")
                hw //= 2
        if hw < 2:
            raise ValueError("final feature map must be at least 2x2 for CAM")

    @property
    def feature_hw(self) -> int:
        return self.input_hw >> sum(self.pool_after)

    @property
    def feature_channels(self) -> int:
        return self.conv_channels[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["pool_after"] = list(self.pool_after)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


@dataclass
class Params:
    """Network tensors keyed ``conv{i}.w``, ``conv{i}.b``, ``fc.w``, ``fc.b``.

    Gradients use the same container.
    """

    config: NetConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "Params":
        return Params(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "Params":
        return Params(self.config, {k: np.zeros_like(v) for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.tensors.values()])

    def with_flat(self, vec: np.ndarray) -> "Params":
        out, pos = {}, 0
        for k, v in self.tensors.items():
            out[k] = np.asarray(vec[pos : pos + v.size], dtype=np.float64).reshape(v.shape)
            pos += v.size
        return Params(self.config, out)

    @property
    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())


@dataclass
class ForwardTrace:
    images: np.ndarray
    layers: list = field(default_factory=list)
    features: np.ndarray | None = None
    pooled: np.ndarray | None = None
    logits: np.ndarray | None = None


def param_shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    cin = config.input_channels
    for i, cout in enumerate(config.conv_channels):
        shapes[f"conv{i}.w"] = (cout, cin, 3, 3)
        shapes[f"conv{i}.b"] = (cout,)
        cin = cout
    shapes["fc.w"] = (config.num_classes, cin)
    shapes["fc.b"] = (config.num_classes,)
    return shapes


def init_params(config: NetConfig, rng: RngStream) -> Params:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            tensors[name] = rng.child(name).normal(0.0, std, shape)
    return Params(config, tensors)


def _im2col(x: np.ndarray) -> np.ndarray:
    # NHWC input -> [N, H, W, 9, C] patches of the zero-padded 3x3 neighbourhood
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c))
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((n, h, w, 9, c))
    for k in range(9):
        u, v = divmod(k, 3)
        cols[:, :, :, k, :] = xp[:, u : u + h, v : v + w, :]
    return cols


def _col2im(dcols: np.ndarray) -> np.ndarray:
    n, h, w, _, c = dcols.shape
    dxp = np.zeros((n, h + 2, w + 2, c))
    for k in range(9):
        u, v = divmod(k, 3)
        dxp[:, u : u + h, v : v + w, :] += dcols[:, :, :, k, :]
    return dxp[:, 1:-1, 1:-1, :]


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    # [K, C, 3, 3] -> [9*C, K] matching the (tap, channel) order of _im2col
    k, c = w.shape[:2]
    return w.transpose(2, 3, 1, 0).reshape(9 * c, k)


def _pool2(x: np.ndarray) -> np.ndarray:
    return 0.25 * (x[:, 0::2, 0::2] + x[:, 1::2, 0::2] + x[:, 0::2, 1::2] + x[:, 1::2, 1::2])


def _unpool2(d: np.ndarray) -> np.ndarray:
    n, h, w, c = d.shape
    out = np.empty((n, 2 * h, 2 * w, c))
    q = 0.25 * d
    out[:, 0::2, 0::2] = q
    out[:, 1::2, 0::2] = q
    out[:, 0::2, 1::2] = q
    out[:, 1::2, 1::2] = q
    return out


def _check_images(config: NetConfig, images: np.ndarray) -> None:
    expected = (config.input_channels, config.input_hw, config.input_hw)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ValueError(f"expected images [N, {expected}], got {images.shape}")


def forward(params: Params, images) -> tuple[np.ndarray, ForwardTrace]:
    """Logits ``[N, num_classes]`` for NCHW ``images`` plus the trace for backward/CAM."""
    config = params.config
    x = np.asarray(images, dtype=np.float64)
    _check_images(config, x)
    trace = ForwardTrace(images=x)
    x = (np.ascontiguousarray(x.transpose(0, 2, 3, 1)) - config.input_mean) / config.input_std
    for i, pool in enumerate(config.pool_after):
        n, h, w, _ = x.shape
        cols = _im2col(x).reshape(n * h * w, -1)
        z = (cols @ _weight_matrix(params[f"conv{i}.w"]) + params[f"conv{i}.b"]).reshape(n, h, w, -1)
        a = np.maximum(z, 0.0)
        trace.layers.append((cols, z))
        x = _pool2(a) if pool else a
    trace.features = np.ascontiguousarray(x.transpose(0, 3, 1, 2))
    trace.pooled = x.mean(axis=(1, 2))
    trace.logits = trace.pooled @ params["fc.w"].T + params["fc.b"]
    return trace.logits, trace


def logits_only(params: Params, images) -> np.ndarray:
    return forward(params, images)[0]


def backward(params: Params, trace: ForwardTrace, dlogits) -> Params:
    """Gradient of ``sum(logits * dlogits)`` with respect to every parameter."""
    config = params.config
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if trace.logits is None or dlogits.shape != trace.logits.shape:
        raise ValueError("dlogits does not match the traced forward pass")
    if len(trace.layers) != len(config.conv_channels) or trace.pooled.shape[1] != config.feature_channels:
        raise ValueError("trace does not belong to these params")
    grads = {}
    grads["fc.w"] = dlogits.T @ trace.pooled
    grads["fc.b"] = dlogits.sum(axis=0)
    dpooled = dlogits @ params["fc.w"]
    n, k, h, w = trace.features.shape
    dx = np.broadcast_to(dpooled[:, None, None, :] / (h * w), (n, h, w, k))
    for i in reversed(range(len(config.conv_channels))):
        cols, z = trace.layers[i]
        da = _unpool2(dx) if config.pool_after[i] else dx
        dz = (da * (z > 0)).reshape(-1, z.shape[-1])
        wt = params[f"conv{i}.w"]
        cout, cin = wt.shape[:2]
        grads[f"conv{i}.w"] = (cols.T @ dz).reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
        grads[f"conv{i}.b"] = dz.sum(axis=0)
        if i > 0:
            dcols = (dz @ _weight_matrix(wt).T).reshape(*z.shape[:3], 9, cin)
            dx = _col2im(dcols)
    return Params(config, {name: np.ascontiguousarray(grads[name]) for name in params.tensors})


def cam(params: Params, trace: ForwardTrace, class_idx: int, sample: int = 0) -> np.ndarray:
    """Class activation map ``sum_k W_fc[c, k] * F[k]`` at feature resolution."""
    if not 0 <= class_idx < params.config.num_classes:
        raise ValueError(f"class index {class_idx} out of range")
    return np.tensordot(params["fc.w"][class_idx], trace.features[sample], axes=(0, 0))


def cams_for_labels(params: Params, trace: ForwardTrace, labels) -> np.ndarray:
    """One CAM per sample for the given class of that sample, ``[N, h, w]``."""
    w = params["fc.w"][np.asarray(labels, dtype=np.int64)]
    return np.einsum("nk,nkyx->nyx", w, trace.features)


@dataclass
class OptState:
    momentum_buffers: dict[str, np.ndarray]
    step: int = 0
    lr: float = 0.0

    @classmethod
    def zeros(cls, params: Params) -> "OptState":
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()})


def sgd_step(params: Params, grads: Params, opt: OptState, lr: float, momentum: float) -> tuple[Params, OptState]:
    """Heavy-ball momentum: ``v <- momentum * v + g``; ``theta <- theta - lr * v``."""
    if not lr > 0:
        raise ValueError("lr must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    new_tensors, new_bufs = {}, {}
    for k, theta in params.tensors.items():
        v = momentum * opt.momentum_buffers[k] + grads[k]
        new_bufs[k] = v
        new_tensors[k] = theta - lr * v
    return Params(params.config, new_tensors), OptState(new_bufs, opt.step + 1, lr)


def lr_schedule(epoch: int, base_lr: float, decay_every: int, factor: float) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return base_lr * factor ** (epoch // decay_every)


def predict(params: Params, images, batch_size: int = 256) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    out = [logits_only(params, images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)


def save_checkpoint(path, params: Params, seed_lineage: dict | None = None, extra: dict | None = None) -> None:
    """Write params to an uncompressed ``.npz`` container (bit-exact float64)."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "net_config": params.config.to_dict(),
        "param_names": params.names(),
        "seed_lineage": seed_lineage or {},
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in params.tensors.items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[Params, dict]:
    with np.load(os.fspath(path), allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        config = NetConfig.from_dict(meta["net_config"])
        tensors = {k: z[f"param/{k}"].copy() for k in meta["param_names"]}
    expected = param_shapes(config)
    for k, shape in expected.items():
        if k not in tensors or tensors[k].shape != shape:
            raise ValueError(f"checkpoint tensor {k} missing or misshapen")
    return Params(config, tensors), meta
