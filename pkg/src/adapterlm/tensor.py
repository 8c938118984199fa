"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Deliberately small: exactly the operations the transformer backbone, the
adapters and the training loop need, backed by numpy arrays. Every op
records a node on a global gradient tape; ``backward`` replays the tape in
exact reverse recording order, which keeps gradient accumulation
deterministic run-to-run.

Storage is float32 by default; pass ``dtype=np.float64`` when building
inputs for finite-difference gradient checks.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from finite inputs."""


class EmptyLossError(ValueError):
    """cross_entropy was called with an all-zero loss mask."""


class Tensor:
    """Dense n-dimensional array with optional gradient buffer.

    ``data`` is a numpy array, ``grad`` is either None or an array of the
    same shape. Tensors produced by ops are treated as immutable; parameter
    tensors are mutated in place only by the optimizer.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__


# --------------------------------------------------------------------------
# gradient tape

class ComputationTape:
    """Ordered record of ops; backward visits nodes in reverse recording order."""

    def __init__(self):
        self.nodes = []  # (output Tensor, backward callable)

    def record(self, out: Tensor, backward_fn):
        self.nodes.append((out, backward_fn))

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()

    def backward(self, loss: Tensor, seed_grad=None):
        """Accumulate gradients of ``loss`` into every reachable tensor.

        Recording order is a topological order of the graph, so walking the
        node list backwards propagates gradients parent-before-child with a
        fixed, reproducible accumulation order.
        """
        if not loss.requires_grad:
            raise ValueError("loss tensor does not require grad; nothing to differentiate")
        if seed_grad is None:
            seed_grad = np.ones_like(loss.data)
        loss._accumulate(np.asarray(seed_grad, dtype=loss.data.dtype))
        for out, fn in reversed(self.nodes):
            if out.grad is not None:
                fn(out.grad)


_tape = ComputationTape()
_grad_enabled = True
_finite_checks = True


def tape() -> ComputationTape:
    return _tape


def reset_tape():
    _tape.clear()


def backward(loss: Tensor, seed_grad=None):
    _tape.backward(loss, seed_grad)


@contextmanager
def no_grad():
    """Disable tape recording (evaluation / decoding)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def finite_checks(enabled: bool):
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


def _emit(data: np.ndarray, inputs, backward_fn, op: str) -> Tensor:
    """Wrap an op result, run the finite check, and record on the tape."""
    if _finite_checks and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _tape.record(out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise and structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _emit(data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _emit(data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _emit(data, (a, b), bwd, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    data = x.data * c

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * c)

    return _emit(data, (x,), bwd, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked (batched) operands via numpy rules.

    Backward accumulates dA = dC·Bᵀ and dB = Aᵀ·dC, summed over any
    broadcast leading axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _emit(data, (a, b), bwd, "matmul")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        if x.requires_grad:
            x._accumulate(np.transpose(g, inv))

    return _emit(data, (x,), bwd, "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)
    orig = x.shape

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g.reshape(orig))

    return _emit(data, (x,), bwd, "reshape")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into a zero buffer."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = x.data[idx]

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            x._accumulate(full)

    return _emit(data, (x,), bwd, "narrow")


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return _emit(data, (x,), bwd, "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * phi

    def bwd(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
            x._accumulate(g * (phi + x.data * pdf))

    return _emit(data, (x,), bwd, "gelu")


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0. Only used while training."""
    if p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    data = x.data * keep

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * keep)

    return _emit(data, (x,), bwd, "dropout")


def tsum(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.dtype)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.shape).astype(x.dtype))

    return _emit(data, (x,), bwd, "sum")


# --------------------------------------------------------------------------
# normalization, attention softmax, embeddings, loss

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization over the last axis.

    Uses the population (biased) variance. ``gamma`` and ``beta`` must be
    1-D of the row width.
    """
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm expects gamma/beta of shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gamma.data + beta.data

    def bwd(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            # classic LN backward, all reductions over the last axis
            dx = (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            ) * inv_std
            x._accumulate(dx)

    return _emit(data, (x, gamma, beta), bwd, "layer_norm")


def _softmax_core(x: Tensor, data: np.ndarray, op: str) -> Tensor:
    def bwd(g):
        if x.requires_grad:
            inner = (g * data).sum(axis=-1, keepdims=True)
            x._accumulate(data * (g - inner))

    return _emit(data, (x,), bwd, op)


def softmax_last_axis(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)
    return _softmax_core(x, data, "softmax")


def masked_softmax(x: Tensor, allowed: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``allowed`` positions.

    Disallowed positions get exactly zero probability. ``allowed`` is a
    plain boolean array broadcastable to ``x.shape``; every row must keep
    at least one position.
    """
    allowed = np.broadcast_to(allowed, x.shape)
    if not allowed.any(axis=-1).all():
        raise ValueError("masked_softmax: some row has no allowed positions")
    neg = np.where(allowed, x.data, -np.inf)
    z = neg - neg.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)
    return _softmax_core(x, data, "masked_softmax")


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row-gather from an embedding table; backward scatters to used rows only."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding id out of range: ids in [{ids.min()}, {ids.max()}], "
            f"table has {table.shape[0]} rows"
        )
    data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            dt = np.zeros_like(table.data)
            np.add.at(dt, ids, g)
            table._accumulate(dt)

    return _emit(data, (table,), bwd, "embedding_lookup")


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over masked-in positions (natural log).

    ``targets`` and ``mask`` are plain integer arrays matching the leading
    shape of ``logits``; mask entries are 0/1 and at least one must be 1.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask)
    if targets.shape != logits.shape[:-1] or mask.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy shapes disagree: logits {logits.shape}, "
            f"targets {targets.shape}, mask {mask.shape}"
        )
    count = float(mask.sum())
    if count == 0:
        raise EmptyLossError("cross_entropy: loss mask selects no positions")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    nll = logsumexp - picked
    data = np.asarray((nll * mask).sum() / count, dtype=logits.dtype)

    def bwd(g):
        if logits.requires_grad:
            probs = np.exp(z - logsumexp[..., None])
            probs_target = np.copy(probs)
            np.put_along_axis(
                probs_target, targets[..., None],
                np.take_along_axis(probs, targets[..., None], axis=-1) - 1.0, axis=-1,
            )
            w = (mask / count)[..., None] * g
            logits._accumulate(probs_target * w)

    return _emit(data, (logits,), bwd, "cross_entropy")


# --------------------------------------------------------------------------
# serialization: little-endian f32, row-major, u64 shape header

def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    header = struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.astype("<f4").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0):
    """Parse one serialized tensor, returning (array, next offset)."""
    (rank,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    dims = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    n = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(dims)
    offset += 4 * n
    return arr.astype(np.float32), offset
