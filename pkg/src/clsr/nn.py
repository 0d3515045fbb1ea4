"""Numpy encoder with hand-written backprop, AdamW and checkpoint I/O.

The encoder is the fixed layer family::

    Normalization -> [Conv1D(k) -> BatchNorm -> ReLU] x n -> Dense (per time step)
        -> Dropout -> GlobalAveragePooling1D -> Dense

Inputs are (B, T, C) arrays, outputs (B, E).  Every layer keeps the cache it
needs for ``backward`` only when run with ``train=True``.
"""

from __future__ import annotations

import copy
import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CheckpointError, ShapeError, StateError

CHECKPOINT_MAGIC = b"CLSR"
CHECKPOINT_VERSION = 1


@dataclass
class Tensor:
    """Array with an optional gradient slot."""

    data: np.ndarray
    grad: np.ndarray | None = None
    learned: bool = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self):
        self.grad = None


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    def params(self) -> list[tuple[str, Tensor]]:
        return []

    def _cached(self):
        if getattr(self, "_cache", None) is None:
            raise StateError(f"{type(self).__name__}.backward called without a train-mode forward")
        return self._cache


class Normalization(Layer):
    """Per-channel standardisation with statistics fitted from data."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = Tensor(np.zeros(channels, dtype), learned=False)
        self.std = Tensor(np.ones(channels, dtype), learned=False)
        self.fitted = False

    def fit(self, data: np.ndarray, floor: float = 1e-6):
        data = np.asarray(data, dtype=np.float64)
        if data.size == 0:
            raise StateError("cannot fit normalization on empty data")
        flat = data.reshape(-1, data.shape[-1])
        dtype = self.mean.data.dtype
        self.mean.data = flat.mean(axis=0).astype(dtype)
        self.std.data = np.maximum(flat.std(axis=0), floor).astype(dtype)
        self.fitted = True

    def forward(self, x, train=False):
        if not self.fitted:
            raise StateError("normalization statistics are not initialised")
        self._cache = True if train else None
        return (x - self.mean.data) / self.std.data

    def backward(self, g):
        self._cached()
        return g / self.std.data

    def params(self):
        return [("mean", self.mean), ("std", self.std)]


class Conv1D(Layer):
    """Stride-1 convolution over time with 'same' zero padding."""

    def __init__(self, in_ch, out_ch, kernel, rng, dtype=np.float32):
        self.kernel = kernel
        self.W = Tensor(_he_normal(rng, (kernel, in_ch, out_ch), kernel * in_ch, dtype))
        self.b = Tensor(np.zeros(out_ch, dtype))

    def _pad(self):
        left = (self.kernel - 1) // 2
        return left, self.kernel - 1 - left

    def forward(self, x, train=False):
        B, T, C = x.shape
        k = self.kernel
        if C != self.W.shape[1]:
            raise ShapeError(f"conv expects {self.W.shape[1]} input channels, got {C}")
        xp = np.pad(x, ((0, 0), self._pad(), (0, 0)))
        # (B, T, C, k) -> (B*T, k*C), k-major to match W.reshape
        cols = sliding_window_view(xp, k, axis=1).transpose(0, 1, 3, 2).reshape(B * T, k * C)
        out = cols @ self.W.data.reshape(k * C, -1) + self.b.data
        self._cache = (cols, x.shape) if train else None
        return out.reshape(B, T, -1)

    def backward(self, g):
        cols, (B, T, C) = self._cached()
        k = self.kernel
        g2 = g.reshape(B * T, -1)
        self.W.grad = (cols.T @ g2).reshape(self.W.shape)
        self.b.grad = g2.sum(axis=0)
        dcols = (g2 @ self.W.data.reshape(k * C, -1).T).reshape(B, T, k, C)
        left, right = self._pad()
        dxp = np.zeros((B, T + k - 1, C), dtype=g.dtype)
        for j in range(k):
            dxp[:, j : j + T] += dcols[:, :, j]
        return dxp[:, left : left + T]

    def params(self):
        return [("W", self.W), ("b", self.b)]


class BatchNorm(Layer):
    """Batch normalisation over all axes except the last (channel) axis."""

    def __init__(self, channels, momentum=0.99, eps=1e-3, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype))
        self.beta = Tensor(np.zeros(channels, dtype))
        self.running_mean = Tensor(np.zeros(channels, dtype), learned=False)
        self.running_var = Tensor(np.ones(channels, dtype), learned=False)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, train=False):
        axes = tuple(range(x.ndim - 1))
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            dtype = self.running_mean.data.dtype
            self.running_mean.data = (m * self.running_mean.data + (1 - m) * mean).astype(dtype)
            self.running_var.data = (m * self.running_var.data + (1 - m) * var).astype(dtype)
        else:
            mean, var = self.running_mean.data, self.running_var.data
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std) if train else None
        return xhat * self.gamma.data + self.beta.data

    def backward(self, g):
        xhat, inv_std = self._cached()
        axes = tuple(range(g.ndim - 1))
        n = g.size // g.shape[-1]
        self.beta.grad = g.sum(axis=axes)
        self.gamma.grad = (g * xhat).sum(axis=axes)
        dxhat = g * self.gamma.data
        return (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
        )

    def params(self):
        return [
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ]


class ReLU(Layer):
    def forward(self, x, train=False):
        out = np.maximum(x, 0)
        self._cache = (x > 0).astype(x.dtype) if train else None
        return out

    def backward(self, g):
        return g * self._cached()


class Dense(Layer):
    """Affine map on the last axis; applied per time step on 3-D input."""

    def __init__(self, in_dim, out_dim, rng, dtype=np.float32):
        self.W = Tensor(_he_normal(rng, (in_dim, out_dim), in_dim, dtype))
        self.b = Tensor(np.zeros(out_dim, dtype))

    def forward(self, x, train=False):
        if x.shape[-1] != self.W.shape[0]:
            raise ShapeError(f"dense expects width {self.W.shape[0]}, got {x.shape[-1]}")
        flat = x.reshape(-1, x.shape[-1])
        self._cache = (flat, x.shape) if train else None
        return (flat @ self.W.data + self.b.data).reshape(*x.shape[:-1], -1)

    def backward(self, g):
        flat, shape = self._cached()
        g2 = g.reshape(-1, g.shape[-1])
        self.W.grad = flat.T @ g2
        self.b.grad = g2.sum(axis=0)
        return (g2 @ self.W.data.T).reshape(shape)

    def params(self):
        return [("W", self.W), ("b", self.b)]


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""

    def __init__(self, rate=0.5):
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0:
            self._cache = np.ones(1, dtype=x.dtype) if train else None
            return x
        if rng is None:
            raise StateError("train-mode dropout needs a random generator")
        keep = rng.random(x.shape) >= self.rate
        mask = (keep / (1.0 - self.rate)).astype(x.dtype)
        self._cache = mask
        return x * mask

    def backward(self, g):
        return g * self._cached()


class GlobalAveragePooling1D(Layer):
    def forward(self, x, train=False):
        self._cache = x.shape if train else None
        return x.mean(axis=1)

    def backward(self, g):
        B, T, C = self._cached()
        return np.broadcast_to(g[:, None, :] / T, (B, T, C)).astype(g.dtype)


@dataclass(frozen=True)
class Architecture:
    T: int = 30
    C: int = 1
    E: int = 128
    widths: tuple[int, ...] = (128, 128, 128)
    dense_width: int = 128
    kernel: int = 5
    dropout: float = 0.5
    bn_eps: float = 1e-3
    bn_momentum: float = 0.99


class Encoder:
    """The contrastive encoder M(X): (B, T, C) -> (B, E)."""

    def __init__(self, arch: Architecture = Architecture(), seed: int = 0, dtype=np.float32):
        self.arch = arch
        rng = np.random.default_rng(seed)
        self.norm = Normalization(arch.C, dtype)
        self.blocks: list[tuple[Conv1D, BatchNorm, ReLU]] = []
        in_ch = arch.C
        for width in arch.widths:
            self.blocks.append(
                (
                    Conv1D(in_ch, width, arch.kernel, rng, dtype),
                    BatchNorm(width, arch.bn_momentum, arch.bn_eps, dtype),
                    ReLU(),
                )
            )
            in_ch = width
        self.time_dense = Dense(in_ch, arch.dense_width, rng, dtype)
        self.dropout = Dropout(arch.dropout)
        self.pool = GlobalAveragePooling1D()
        self.head = Dense(arch.dense_width, arch.E, rng, dtype)

    @property
    def dtype(self):
        return self.head.W.data.dtype

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """All tensors in checkpoint order, including non-learned statistics."""
        out = [(f"norm.{n}", t) for n, t in self.norm.params()]
        for i, (conv, bn, _) in enumerate(self.blocks):
            out += [(f"conv{i}.{n}", t) for n, t in conv.params()]
            out += [(f"bn{i}.{n}", t) for n, t in bn.params()]
        out += [(f"time_dense.{n}", t) for n, t in self.time_dense.params()]
        out += [(f"head.{n}", t) for n, t in self.head.params()]
        return out

    def learned_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if t.learned]

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.grad = None

    def fit_normalization(self, data: np.ndarray):
        data = np.asarray(data)
        if data.size == 0:
            raise StateError("cannot fit normalization on empty data")
        if data.shape[-1] != self.arch.C:
            raise ShapeError(f"expected {self.arch.C} channels, got {data.shape[-1]}")
        self.norm.fit(data)

    def forward(self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[1:] != (self.arch.T, self.arch.C):
            raise ShapeError(
                f"expected input (B, {self.arch.T}, {self.arch.C}), got {x.shape}"
            )
        h = self.norm.forward(x, train)
        for conv, bn, relu in self.blocks:
            h = relu.forward(bn.forward(conv.forward(h, train), train), train)
        h = self.time_dense.forward(h, train)
        h = self.dropout.forward(h, train, rng)
        h = self.pool.forward(h, train)
        return self.head.forward(h, train)

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        """Backpropagate d(loss)/d(output); fills every learned ``.grad``."""
        g = np.asarray(grad, dtype=self.dtype)
        g = self.head.backward(g)
        g = self.pool.backward(g)
        g = self.dropout.backward(g)
        g = self.time_dense.backward(g)
        for conv, bn, relu in reversed(self.blocks):
            g = conv.backward(bn.backward(relu.backward(g)))
        return self.norm.backward(g)

    def astype(self, dtype) -> "Encoder":
        other = copy.deepcopy(self)
        for _, t in other.named_parameters():
            t.data = t.data.astype(dtype)
            t.grad = None
        return other

    def copy(self) -> "Encoder":
        return copy.deepcopy(self)


def fit_normalization(model: Encoder, data: np.ndarray) -> None:
    model.fit_normalization(data)


# --- optimizer -------------------------------------------------------------


@dataclass
class AdamW:
    """AdamW with decoupled weight decay applied to every learned tensor."""

    lr: float = 1e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: list[tuple[str, Tensor]]):
        for name, p in params:
            if p.learned and p.grad is None:
                raise StateError(f"parameter {name} has no gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in params:
            if not p.learned:
                continue
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = (p.data - self.lr * update - self.lr * self.weight_decay * p.data).astype(
                p.data.dtype
            )


def adamw_step(model: Encoder, state: AdamW) -> None:
    state.step(model.learned_parameters())


# --- checkpoint --------------------------------------------------------------


def checkpoint_bytes(model: Encoder) -> bytes:
    a = model.arch
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<IIII", a.T, a.C, a.E, len(a.widths)))
    buf.write(struct.pack(f"<{len(a.widths)}I", *a.widths))
    buf.write(struct.pack("<II", a.dense_width, a.kernel))
    buf.write(struct.pack("<ddd", a.dropout, a.bn_eps, a.bn_momentum))
    buf.write(struct.pack("<I", int(model.norm.fitted)))
    for _, t in model.named_parameters():
        data = np.ascontiguousarray(t.data, dtype="<f4")
        buf.write(struct.pack("<I", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    return buf.getvalue()


def _read(buf: io.BytesIO, fmt: str):
    size = struct.calcsize(fmt)
    chunk = buf.read(size)
    if len(chunk) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, chunk)


def model_from_bytes(blob: bytes) -> Encoder:
    buf = io.BytesIO(blob)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a CLSR checkpoint (bad magic)")
    (version,) = _read(buf, "<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    T, C, E, n_blocks = _read(buf, "<IIII")
    widths = _read(buf, f"<{n_blocks}I")
    dense_width, kernel = _read(buf, "<II")
    dropout, bn_eps, bn_momentum = _read(buf, "<ddd")
    (fitted,) = _read(buf, "<I")
    arch = Architecture(T, C, E, tuple(widths), dense_width, kernel, dropout, bn_eps, bn_momentum)
    model = Encoder(arch)
    for name, t in model.named_parameters():
        (ndim,) = _read(buf, "<I")
        shape = _read(buf, f"<{ndim}I")
        if tuple(shape) != t.shape:
            raise CheckpointError(f"{name}: stored shape {shape} does not match {t.shape}")
        count = int(np.prod(shape))
        raw = buf.read(4 * count)
        if len(raw) != 4 * count:
            raise CheckpointError("truncated checkpoint")
        t.data = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint payload")
    model.norm.fitted = bool(fitted)
    return model


def save_checkpoint(model: Encoder, path) -> str:
    """Write ``model`` to ``path``; returns the sha256 fingerprint."""
    blob = checkpoint_bytes(model)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> Encoder:
    return model_from_bytes(Path(path).read_bytes())


def fingerprint(model: Encoder) -> str:
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()
