"""Patch classifier: a small numpy CNN with hand-written backprop, SGD with
momentum, a portable binary checkpoint and an adapter for outside models.

Tensors are NHWC. Architecture: three blocks of (3x3 conv, stride 1, same
padding, ReLU, 2x2 max-pool), global average pooling, one dense layer,
softmax.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .imagery import check_raster
from .rng import Rng

DEFAULT_WIDTHS = (16, 32, 64)
PROB_TOL = 1e-6


class ContractError(ValueError):
    """A classifier produced output that is not a probability vector."""


class ConfigError(ValueError):
    """Inconsistent model / dataset / grid configuration."""


class CheckpointError(ValueError):
    """A checkpoint file is truncated, corrupt or of an unknown version."""


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _im2col(x: np.ndarray) -> np.ndarray:
    """Same-padded 3x3 patches of an NHWC batch, columns ordered (ky, kx, cin)."""
    n, h, w, cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 3, 3, cin), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky, kx, :] = xp[:, ky:ky + h, kx:kx + w, :]
    return cols.reshape(n * h * w, 9 * cin)


def _wmat(weight: np.ndarray) -> np.ndarray:
    # (cout, cin, 3, 3) -> (cout, ky*kx*cin) matching the im2col column order
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def _conv_forward(x, weight, bias):
    n, h, w, _ = x.shape
    cols = _im2col(x)
    out = cols @ _wmat(weight).T
    out += bias
    return out.reshape(n, h, w, -1), cols


def _conv_backward(dout, cols, x_shape, weight, need_dx: bool):
    n, h, w, cin = x_shape
    cout = weight.shape[0]
    d2 = dout.reshape(-1, cout)
    dweight = (d2.T @ cols).reshape(cout, 3, 3, cin).transpose(0, 3, 1, 2)
    dbias = d2.sum(axis=0)
    if not need_dx:
        return None, np.ascontiguousarray(dweight), dbias
    dcols = (d2 @ _wmat(weight)).reshape(n, h, w, 3, 3, cin)
    dxp = np.zeros((n, h + 2, w + 2, cin), dtype=dout.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + h, kx:kx + w, :] += dcols[:, :, :, ky, kx, :]
    return dxp[:, 1:-1, 1:-1, :], np.ascontiguousarray(dweight), dbias


def _pool_forward(x):
    """2x2 max-pool; odd trailing rows/columns are dropped.

    Returns the pooled map and, per window, which of the four positions won
    (first maximum in raster order), as boolean masks.
    """
    h2, w2 = x.shape[1] // 2, x.shape[2] // 2
    q = [x[:, dy:2 * h2:2, dx:2 * w2:2, :] for dy in (0, 1) for dx in (0, 1)]
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for part in q:
        m = (part == out) & ~taken
        taken |= m
        masks.append(m)
    return out, masks


def _pool_backward(dout, masks, x_shape):
    h2, w2 = dout.shape[1:3]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    k = 0
    for dy in (0, 1):
        for dx_ in (0, 1):
            dx[:, dy:2 * h2:2, dx_:2 * w2:2, :] = dout * masks[k]
            k += 1
    return dx


class SmallCnn:
    """Three conv blocks, global average pooling and a dense softmax head."""

    def __init__(self, params: dict[str, np.ndarray], labels: Sequence[str], input_size: int):
        self.params = params
        self.labels = list(labels)
        self.input_size = int(input_size)
        self.history: list[float] = []
        self.metadata: dict[str, str] = {}
        if self.input_size < 8:
            raise ConfigError(f"input size must be at least 8, got {self.input_size}")
        if self.params["fc.weight"].shape[0] != len(self.labels):
            raise ConfigError(
                f"head has {self.params['fc.weight'].shape[0]} outputs but {len(self.labels)} labels"
            )

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.params[f"conv{i}.weight"].shape[0] for i in (1, 2, 3))

    @property
    def dtype(self):
        return self.params["fc.weight"].dtype

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "SmallCnn":
        m = SmallCnn({k: v.copy() for k, v in self.params.items()}, self.labels, self.input_size)
        m.history = list(self.history)
        return m

    def astype(self, dtype) -> "SmallCnn":
        return SmallCnn({k: v.astype(dtype) for k, v in self.params.items()}, self.labels, self.input_size)

    # forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, keep: bool = False):
        """Logits for an ``(n, s, s, 3)`` float batch in [0, 1]."""
        caches = []
        a = x.astype(self.dtype, copy=False)
        for i in (1, 2, 3):
            z, cols = _conv_forward(a, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"])
            r = np.maximum(z, 0)
            p, idx = _pool_forward(r)
            if keep:
                caches.append((a.shape, cols, z > 0, r.shape, idx))
            a = p
        pooled_shape = a.shape
        g = a.mean(axis=(1, 2))
        logits = g @ self.params["fc.weight"].T + self.params["fc.bias"]
        if keep:
            return logits, (caches, g, pooled_shape)
        return logits

    def backward(self, cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        caches, g, pooled_shape = cache
        grads = {
            "fc.weight": dlogits.T @ g,
            "fc.bias": dlogits.sum(axis=0),
        }
        dg = dlogits @ self.params["fc.weight"]
        n, ph, pw, c = pooled_shape
        da = np.broadcast_to((dg / (ph * pw))[:, None, None, :], pooled_shape)
        for i in (3, 2, 1):
            x_shape, cols, active, r_shape, idx = caches[i - 1]
            dr = _pool_backward(da, idx, r_shape)
            dz = dr * active
            da, dw, db = _conv_backward(dz, cols, x_shape, self.params[f"conv{i}.weight"], need_dx=i > 1)
            grads[f"conv{i}.weight"] = dw
            grads[f"conv{i}.bias"] = db
        return grads

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray):
        """Mean softmax cross-entropy over the batch and its gradients."""
        logits, cache = self.forward(x, keep=True)
        probs = _softmax(logits.astype(np.float64))
        n = len(y)
        loss = float(-np.log(np.clip(probs[np.arange(n), y], 1e-300, None)).mean())
        dlogits = probs
        dlogits[np.arange(n), y] -= 1.0
        dlogits = (dlogits / n).astype(self.dtype)
        return loss, self.backward(cache, dlogits)

    def loss(self, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> float:
        total = 0.0
        for s in range(0, len(y), batch_size):
            probs = _softmax(self.forward(x[s:s + batch_size]).astype(np.float64))
            total += float(-np.log(np.clip(probs[np.arange(len(probs)), y[s:s + batch_size]], 1e-300, None)).sum())
        return total / len(y)

    # inference ----------------------------------------------------------

    def predict_proba_batch(self, rasters: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Posterior for an ``(n, s, s, 3)`` uint8 batch already at ``input_size``."""
        rasters = np.asarray(rasters)
        if rasters.ndim != 4 or rasters.shape[1:] != (self.input_size, self.input_size, 3):
            raise ConfigError(
                f"expected rasters of shape (n, {self.input_size}, {self.input_size}, 3), got {rasters.shape}"
            )
        out = np.empty((len(rasters), self.num_classes), dtype=np.float64)
        for s in range(0, len(rasters), batch_size):
            x = rasters[s:s + batch_size].astype(self.dtype) / self.dtype.type(255.0)
            out[s:s + batch_size] = _softmax(self.forward(x).astype(np.float64))
        return out

    def predict_proba(self, patch: np.ndarray) -> np.ndarray:
        check_raster(patch)
        return self.predict_proba_batch(patch[None])[0]


def init_small_cnn(
    num_classes: int,
    input_size: int,
    seed: int,
    labels: Sequence[str] | None = None,
    widths: Sequence[int] = DEFAULT_WIDTHS,
    dtype=np.float32,
) -> SmallCnn:
    """Fan-in scaled uniform weights (He for convs, LeCun for the head), zero biases."""
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if labels is None:
        labels = [str(i) for i in range(num_classes)]
    if len(labels) != num_classes:
        raise ConfigError(f"{len(labels)} labels for {num_classes} classes")
    gen = Rng(seed).stream("init", 0)
    params: dict[str, np.ndarray] = {}
    cin = 3
    for i, cout in enumerate(widths, start=1):
        bound = np.sqrt(6.0 / (cin * 9))
        params[f"conv{i}.weight"] = gen.uniform(-bound, bound, (cout, cin, 3, 3)).astype(dtype)
        params[f"conv{i}.bias"] = np.zeros(cout, dtype=dtype)
        cin = cout
    bound = np.sqrt(3.0 / cin)
    params["fc.weight"] = gen.uniform(-bound, bound, (num_classes, cin)).astype(dtype)
    params["fc.bias"] = np.zeros(num_classes, dtype=dtype)
    return SmallCnn(params, labels, input_size)


def parameter_count(num_classes: int, widths: Sequence[int] = DEFAULT_WIDTHS, in_channels: int = 3) -> int:
    total, cin = 0, in_channels
    for cout in widths:
        total += cout * cin * 9 + cout
        cin = cout
    return total + cin * num_classes + num_classes


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    input_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def _stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, tuple) and len(samples) == 2 and isinstance(samples[0], np.ndarray):
        return samples
    samples = list(samples)
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    x = np.stack([check_raster(r) for r, _ in samples])
    y = np.array([c for _, c in samples], dtype=np.int64)
    return x, y


def train(
    model: SmallCnn,
    samples,
    cfg: TrainConfig,
    resample: Callable[[int], tuple[np.ndarray, np.ndarray]] | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> SmallCnn:
    """Mini-batch SGD with momentum on softmax cross-entropy.

    ``samples`` is either a list of ``(raster, class)`` pairs or a tuple
    ``(x, y)`` with ``x`` a uint8 ``(n, s, s, 3)`` array. When ``resample`` is
    given it is called at the start of every epoch and its data replaces
    ``samples`` for that epoch. Runs exactly ``cfg.epochs`` epochs and
    returns the last-epoch weights as a new model.
    """
    x, y = _stack_samples(samples)
    _check_training_data(model, x, y)
    m = model.copy()
    velocity = {k: np.zeros_like(v) for k, v in m.params.items()}
    lr, mu = m.dtype.type(cfg.learning_rate), m.dtype.type(cfg.momentum)
    rng = Rng(cfg.seed)
    scale = m.dtype.type(1.0 / 255.0)
    for epoch in range(cfg.epochs):
        if resample is not None:
            x, y = resample(epoch)
            _check_training_data(m, x, y)
        order = rng.stream("shuffle", epoch).permutation(len(y))
        running, seen = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = m.loss_and_grads(x[idx].astype(m.dtype) * scale, y[idx])
            running += loss * len(idx)
            seen += len(idx)
            for k, g in grads.items():
                v = velocity[k]
                v *= mu
                v -= lr * g
                m.params[k] += v
        m.history.append(running / seen)
        if on_epoch is not None:
            on_epoch(epoch, running / seen)
    return m


def _check_training_data(model: SmallCnn, x: np.ndarray, y: np.ndarray) -> None:
    if len(y) == 0:
        raise ValueError("cannot train on an empty dataset")
    if x.shape[1:] != (model.input_size, model.input_size, 3):
        raise ConfigError(f"training rasters have shape {x.shape[1:]}, model expects {model.input_size}px")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ValueError(f"class index out of range [0, {model.num_classes})")


# checkpoint ---------------------------------------------------------------

MAGIC = b"PVW1"
VERSION = 1
_LAYER_ORDER = ("conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias",
                "conv3.weight", "conv3.bias", "fc.weight", "fc.bias")


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_checkpoint(model: SmallCnn, path, metadata: dict[str, str] | None = None) -> None:
    """Write weights as little-endian float32.

    Layout: magic, version, class count, labels, input size, layer count,
    per layer (name, rank, dims, data), then a metadata block of
    ``count`` key/value string pairs.
    """
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", model.num_classes)]
    parts += [_pack_str(label) for label in model.labels]
    parts.append(struct.pack("<I", model.input_size))
    parts.append(struct.pack("<I", len(_LAYER_ORDER)))
    for name in _LAYER_ORDER:
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    metadata = dict(metadata or {})
    parts.append(struct.pack("<I", len(metadata)))
    for k in sorted(metadata):
        parts.append(_pack_str(k) + _pack_str(str(metadata[k])))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        n = self.u32()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{self.path}: invalid UTF-8 string") from None


def _expected_shapes(widths, num_classes) -> dict[str, tuple[int, ...]]:
    shapes, cin = {}, 3
    for i, cout in enumerate(widths, start=1):
        shapes[f"conv{i}.weight"] = (cout, cin, 3, 3)
        shapes[f"conv{i}.bias"] = (cout,)
        cin = cout
    shapes["fc.weight"] = (num_classes, cin)
    shapes["fc.bias"] = (num_classes,)
    return shapes


def read_checkpoint(path) -> tuple[SmallCnn, dict[str, str]]:
    data = Path(path).read_bytes()
    rd = _Reader(data, path)
    if rd.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version = rd.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    num_classes = rd.u32()
    if num_classes > 1_000_000:
        raise CheckpointError(f"{path}: implausible class count {num_classes}")
    labels = [rd.string() for _ in range(num_classes)]
    input_size = rd.u32()
    n_layers = rd.u32()
    params = {}
    for _ in range(n_layers):
        name = rd.string()
        rank = rd.u32()
        if rank > 8:
            raise CheckpointError(f"{path}: implausible rank {rank} for {name}")
        dims = struct.unpack(f"<{rank}I", rd.take(4 * rank))
        count = int(np.prod(dims)) if dims else 1
        params[name] = np.frombuffer(rd.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    n_meta = rd.u32()
    metadata = {}
    for _ in range(n_meta):
        k = rd.string()
        metadata[k] = rd.string()
    if rd.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - rd.pos} trailing bytes")
    if set(params) != set(_LAYER_ORDER):
        raise CheckpointError(f"{path}: unexpected layer set {sorted(params)}")
    widths = tuple(params[f"conv{i}.weight"].shape[0] for i in (1, 2, 3))
    for name, shape in _expected_shapes(widths, num_classes).items():
        if params[name].shape != shape:
            raise CheckpointError(f"{path}: layer {name} has shape {params[name].shape}, expected {shape}")
    return SmallCnn(params, labels, input_size), metadata


def load_checkpoint(path) -> SmallCnn:
    model, metadata = read_checkpoint(path)
    model.metadata = metadata
    return model


# outside models -------------------------------------------------------------

class ExternalClassifier:
    """Adapter for a model trained elsewhere.

    ``fn`` maps a float ``(n, s, s, 3)`` batch in [0, 1] to an ``(n, C)``
    array. Every output is checked against the probability-vector contract.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], labels: Sequence[str], input_size: int):
        if fn is None:
            raise ConfigError("external model is missing")
        self.fn = fn
        self.labels = list(labels)
        self.input_size = int(input_size)

    @classmethod
    def from_checkpoint(cls, path) -> "ExternalClassifier":
        if not Path(path).exists():
            raise ConfigError(f"external model {path} not found")
        m = load_checkpoint(path)
        return cls(lambda x: _softmax(m.forward(x).astype(np.float64)), m.labels, m.input_size)

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def check_labels(self, labels: Sequence[str]) -> None:
        if list(labels) != self.labels:
            raise ConfigError(
                f"model has {self.num_classes} classes but the manifest declares {len(labels)}"
                if len(labels) != self.num_classes
                else "model label order differs from the manifest"
            )

    def predict_proba_batch(self, rasters: np.ndarray) -> np.ndarray:
        rasters = np.asarray(rasters)
        if rasters.ndim != 4 or rasters.shape[1:] != (self.input_size, self.input_size, 3):
            raise ConfigError(f"expected rasters of shape (n, {self.input_size}, {self.input_size}, 3)")
        x = rasters.astype(np.float32) / np.float32(255.0)
        out = np.asarray(self.fn(x), dtype=np.float64)
        check_probabilities(out, self.num_classes, len(rasters))
        return out

    def predict_proba(self, patch: np.ndarray) -> np.ndarray:
        check_raster(patch)
        return self.predict_proba_batch(patch[None])[0]


def check_probabilities(p: np.ndarray, num_classes: int, n: int) -> None:
    if p.shape != (n, num_classes):
        raise ContractError(f"classifier returned shape {p.shape}, expected {(n, num_classes)}")
    if not np.all(np.isfinite(p)) or (p < 0).any():
        raise ContractError("classifier returned negative or non-finite probabilities")
    worst = np.abs(p.sum(axis=1) - 1.0).max()
    if worst > PROB_TOL:
        raise ContractError(f"classifier output rows sum to 1 only within {worst:.3g}")


def external_predict(adapter: ExternalClassifier, patch: np.ndarray) -> np.ndarray:
    return adapter.predict_proba(patch)
