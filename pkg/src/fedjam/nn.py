"""Single-conv-layer CNN with hand-written backpropagation.

Architecture: conv (valid, ``conv_filters`` kernels of ``k x k x 1``) ->
max-pool (``pool_size`` window and stride) -> ReLU -> fully connected ->
softmax. Max-pooling commutes with ReLU, so pooling the pre-activations is
equivalent to pooling the rectified map.

Parameters are a plain ``dict`` of named arrays in the fixed order of
:data:`PARAM_NAMES`. Arithmetic runs in the parameters' dtype (float32 for
training, float64 for gradient checks); softmax and the loss are always
reduced in float64.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._seeding import rng_from
from .exceptions import ConfigurationError, DimensionError, FormatError, InputError

PARAM_NAMES = ("conv_w", "conv_b", "fc_w", "fc_b")
FJWT_MAGIC = b"FJWT"
FJWT_VERSION = 1
PREDICT_CHUNK = 32


class ParamShapeError(FormatError):
    """Stored tensor shapes do not match the expected model configuration."""


@dataclass(frozen=True)
class CnnConfig:
    input_h: int = 64
    input_w: int = 64
    conv_filters: int = 16
    conv_kernel: int = 12
    conv_stride: int = 1
    pool_kind: str = "max"
    pool_size: int = 2
    num_classes: int = 6

    @property
    def conv_out(self):
        k, s = self.conv_kernel, self.conv_stride
        return (self.input_h - k) // s + 1, (self.input_w - k) // s + 1

    @property
    def pooled(self):
        oh, ow = self.conv_out
        return oh // self.pool_size, ow // self.pool_size

    @property
    def flat_dim(self) -> int:
        ph, pw = self.pooled
        return self.conv_filters * ph * pw

    def validate(self) -> None:
        k, s = self.conv_kernel, self.conv_stride
        if min(self.input_h, self.input_w, self.conv_filters, k, s, self.pool_size) < 1:
            raise ConfigurationError("CNN dimensions must be positive integers")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")
        if self.pool_kind != "max":
            raise ConfigurationError(f"unsupported pooling {self.pool_kind!r}")
        for size in (self.input_h, self.input_w):
            if size < k or (size - k) % s:
                raise ConfigurationError(
                    f"input size {size} incompatible with kernel {k} and stride {s}"
                )
        if min(self.pooled) < 1:
            raise ConfigurationError("pooled feature map is empty")

    def param_shapes(self) -> dict:
        k = self.conv_kernel
        return {
            "conv_w": (self.conv_filters, 1, k, k),
            "conv_b": (self.conv_filters,),
            "fc_w": (self.num_classes, self.flat_dim),
            "fc_b": (self.num_classes,),
        }


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 1
    batch_size: int = 16
    seed: int = 0

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")


# --------------------------------------------------------------------------
# parameters


def init_params(cfg: CnnConfig, seed: int = 0, dtype=np.float32) -> dict:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``) and zero biases."""
    cfg.validate()
    rng = rng_from(seed, 0x1A17)
    shapes = cfg.param_shapes()
    fan_conv = cfg.conv_kernel**2
    params = {
        "conv_w": rng.uniform(-1, 1, shapes["conv_w"]) * np.sqrt(6.0 / fan_conv),
        "conv_b": np.zeros(shapes["conv_b"]),
        "fc_w": rng.uniform(-1, 1, shapes["fc_w"]) * np.sqrt(6.0 / cfg.flat_dim),
        "fc_b": np.zeros(shapes["fc_b"]),
    }
    return {k: v.astype(dtype) for k, v in params.items()}


def zeros_like_params(cfg: CnnConfig, dtype=np.float32) -> dict:
    return {k: np.zeros(s, dtype=dtype) for k, s in cfg.param_shapes().items()}


def flatten_params(params: dict) -> np.ndarray:
    return np.concatenate([np.ravel(params[k]) for k in PARAM_NAMES])


def unflatten_params(vector, cfg: CnnConfig) -> dict:
    vector = np.asarray(vector)
    shapes = cfg.param_shapes()
    total = sum(int(np.prod(s)) for s in shapes.values())
    if vector.shape != (total,):
        raise DimensionError(f"flat parameter vector has shape {vector.shape}, expected ({total},)")
    out, pos = {}, 0
    for name in PARAM_NAMES:
        size = int(np.prod(shapes[name]))
        out[name] = vector[pos : pos + size].reshape(shapes[name]).copy()
        pos += size
    return out


def check_params(params: dict, cfg: CnnConfig) -> None:
    for name, shape in cfg.param_shapes().items():
        if name not in params:
            raise DimensionError(f"missing parameter tensor {name!r}")
        if tuple(params[name].shape) != shape:
            raise DimensionError(f"{name} has shape {tuple(params[name].shape)}, expected {shape}")


# --------------------------------------------------------------------------
# forward / backward


def _check_batch(params, x, cfg):
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != 1:
        raise DimensionError(f"conv layer expects a [B, 1, H, W] batch, got shape {x.shape}")
    if x.shape[2:] != (cfg.input_h, cfg.input_w):
        raise DimensionError(
            f"conv layer expects {cfg.input_h}x{cfg.input_w} images, got {x.shape[2]}x{x.shape[3]}"
        )
    if x.shape[0] < 1:
        raise DimensionError("empty batch")
    check_params(params, cfg)
    return x.astype(params["conv_w"].dtype, copy=False)


def _forward(params, x, cfg):
    batch = x.shape[0]
    k, s, nf, p = cfg.conv_kernel, cfg.conv_stride, cfg.conv_filters, cfg.pool_size
    oh, ow = cfg.conv_out
    ph, pw = cfg.pooled

    windows = sliding_window_view(x[:, 0], (k, k), axis=(1, 2))[:, ::s, ::s]
    cols = windows.reshape(batch * oh * ow, k * k)
    z = cols @ params["conv_w"].reshape(nf, k * k).T + params["conv_b"]
    z = z.reshape(batch, oh, ow, nf)

    # running max over the p*p window offsets; strict ">" keeps the first maximum
    pooled = z[:, 0 : ph * p : p, 0 : pw * p : p, :].copy()
    arg = np.zeros(pooled.shape, dtype=np.int16)
    for off in range(1, p * p):
        i, j = divmod(off, p)
        cand = z[:, i : ph * p : p, j : pw * p : p, :]
        better = cand > pooled
        np.copyto(pooled, cand, where=better)
        arg[better] = off
    act = np.maximum(pooled, 0)
    feats = act.transpose(0, 3, 1, 2).reshape(batch, nf * ph * pw)
    logits = feats @ params["fc_w"].T + params["fc_b"]
    return logits, {"cols": cols, "arg": arg, "pooled": pooled, "feats": feats}


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward(params: dict, x, cfg: CnnConfig) -> np.ndarray:
    """Class posteriors ``[B, num_classes]`` for a ``[B, 1, H, W]`` batch in [0, 1]."""
    x = _check_batch(params, x, cfg)
    logits, _ = _forward(params, x, cfg)
    return np.exp(log_softmax(logits)).astype(params["conv_w"].dtype)


def predict_proba(params: dict, x, cfg: CnnConfig, chunk: int = PREDICT_CHUNK) -> np.ndarray:
    """:func:`forward` over a large batch in chunks, bounded memory."""
    x = np.asarray(x)
    return np.concatenate([forward(params, x[i : i + chunk], cfg) for i in range(0, len(x), chunk)])


def loss_and_grad(params: dict, x, labels, cfg: CnnConfig):
    """Mean cross-entropy over the batch and its gradient w.r.t. every parameter."""
    x = _check_batch(params, x, cfg)
    labels = np.asarray(labels)
    if labels.shape != (x.shape[0],):
        raise InputError(f"expected {x.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= cfg.num_classes):
        raise InputError(f"labels must lie in [0, {cfg.num_classes})")
    labels = labels.astype(np.intp)
    dtype = params["conv_w"].dtype
    batch = x.shape[0]
    nf, p, k = cfg.conv_filters, cfg.pool_size, cfg.conv_kernel
    oh, ow = cfg.conv_out
    ph, pw = cfg.pooled

    logits, cache = _forward(params, x, cfg)
    logp = log_softmax(logits)
    rows = np.arange(batch)
    loss = float(-logp[rows, labels].mean())

    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits = (dlogits / batch).astype(dtype)

    grads = {
        "fc_w": dlogits.T @ cache["feats"],
        "fc_b": dlogits.sum(axis=0, dtype=np.float64).astype(dtype),
    }
    dfeats = (dlogits @ params["fc_w"]).reshape(batch, nf, ph, pw).transpose(0, 2, 3, 1)
    dpooled = dfeats * (cache["pooled"] > 0)
    dz = np.zeros((batch, oh, ow, nf), dtype=dtype)
    for off in range(p * p):
        i, j = divmod(off, p)
        dz[:, i : ph * p : p, j : pw * p : p, :] = np.where(cache["arg"] == off, dpooled, 0)
    dz = dz.reshape(-1, nf)
    grads["conv_w"] = (dz.T @ cache["cols"]).reshape(nf, 1, k, k)
    grads["conv_b"] = dpooled.sum(axis=(0, 1, 2), dtype=np.float64).astype(dtype)
    return loss, {name: grads[name] for name in PARAM_NAMES}


def sgd_epochs(params: dict, x, labels, cfg: CnnConfig, train: TrainConfig) -> dict:
    """``train.epochs`` passes of mini-batch SGD; returns new parameters.

    Epoch ``e`` visits the shard in the order ``rng_from(train.seed, e)``
    draws; each mini-batch is then evaluated in ascending index order, so
    a single full-size batch reproduces :func:`loss_and_grad` on the shard.
    """
    train.validate()
    x = np.asarray(x)
    labels = np.asarray(labels)
    n = len(x)
    if n == 0:
        raise InputError("cannot train on an empty shard")
    params = {k: v.copy() for k, v in params.items()}
    dtype = params["conv_w"].dtype
    lr = dtype.type(train.learning_rate)
    for epoch in range(train.epochs):
        order = rng_from(train.seed, epoch).permutation(n)
        for start in range(0, n, train.batch_size):
            idx = np.sort(order[start : start + train.batch_size])
            _, grads = loss_and_grad(params, x[idx], labels[idx], cfg)
            for name in PARAM_NAMES:
                params[name] -= lr * grads[name]
    return params


# --------------------------------------------------------------------------
# FJWT weight files


def dump_params(params: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(FJWT_MAGIC)
    buf.write(struct.pack("<II", FJWT_VERSION, len(PARAM_NAMES)))
    for name in PARAM_NAMES:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def parse_params(data: bytes, expected: CnnConfig | None = None) -> dict:
    """Decode FJWT bytes; optionally check shapes against ``expected``."""
    view = memoryview(data)
    pos = 0

    def take(size, what):
        nonlocal pos
        if pos + size > len(view):
            raise FormatError(f"truncated FJWT file while reading {what}", offset=pos)
        chunk = view[pos : pos + size]
        pos += size
        return chunk

    if bytes(take(4, "magic")) != FJWT_MAGIC:
        raise FormatError("bad FJWT magic", offset=0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FJWT_VERSION:
        raise FormatError(f"unsupported FJWT version {version}", offset=4)
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "tensor name length"))
        name = bytes(take(name_len, "tensor name")).decode("utf-8", errors="replace")
        (rank,) = struct.unpack("<B", take(1, f"rank of tensor {name!r}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of tensor {name!r}"))
        size = int(np.prod(dims)) if rank else 1
        payload = take(4 * size, f"payload of tensor {name!r}")
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(view):
        raise FormatError("trailing bytes after last tensor", offset=pos)
    if sorted(params) != sorted(PARAM_NAMES):
        raise FormatError(f"FJWT holds tensors {sorted(params)}, expected {list(PARAM_NAMES)}")
    params = {name: params[name] for name in PARAM_NAMES}
    if expected is not None:
        for name, shape in expected.param_shapes().items():
            if params[name].shape != shape:
                raise ParamShapeError(f"tensor {name!r} has shape {params[name].shape}, expected {shape}")
    return params


def save_params(params: dict, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_params(params))


def load_params(path, expected: CnnConfig | None = None) -> dict:
    with open(path, "rb") as fh:
        return parse_params(fh.read(), expected)


def infer_config(params: dict, input_h: int, input_w: int, conv_stride: int = 1, pool_size: int = 2) -> CnnConfig:
    """Rebuild a CnnConfig from stored tensor shapes plus the image geometry.

    Raises :class:`DimensionError` naming both geometries when the stored
    fully connected layer does not fit ``input_h x input_w`` images.
    """
    nf, _, k, _ = params["conv_w"].shape
    cfg = CnnConfig(
        input_h=input_h,
        input_w=input_w,
        conv_filters=nf,
        conv_kernel=k,
        conv_stride=conv_stride,
        pool_size=pool_size,
        num_classes=params["fc_w"].shape[0],
    )
    try:
        cfg.validate()
    except ConfigurationError as exc:
        raise DimensionError(f"weights do not fit {input_h}x{input_w} images: {exc}") from None
    if cfg.flat_dim != params["fc_w"].shape[1]:
        raise DimensionError(
            f"weights expect {params['fc_w'].shape[1]} pooled features but {input_h}x{input_w} "
            f"images produce {cfg.flat_dim}"
        )
    return cfg
