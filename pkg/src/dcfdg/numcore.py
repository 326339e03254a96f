"""Dense f64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation records its parents and a closure mapping the
output gradient to one gradient per parent.  ``backward`` walks the recorded
graph in reverse topological order.  Only leaf tensors (no parents) keep their
``grad`` after a backward pass; intermediate gradients live in a scratch dict.

Also here: diagonal Gaussians (reparameterized sampling and closed-form KL),
the Adam update rule, and the named-array checkpoint container.
"""

from __future__ import annotations

import json
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import CheckpointError, ContractError, DimensionError, NumericError

DTYPE = np.float64
CKPT_VERSION = "dcfdg-ckpt-1"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


_grad_mode = threading.local()


@contextmanager
def no_grad():
    """Skip graph recording inside the block (per thread)."""
    prev = getattr(_grad_mode, "off", False)
    _grad_mode.off = True
    try:
        yield
    finally:
        _grad_mode.off = prev


def _make(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not getattr(_grad_mode, "off", False) and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- linear algebra / structure


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None), (a.data.T @ g if b.requires_grad else None)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` as one graph node; weight is (in, out), bias is (out,)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"affine: shapes {x.shape} and {weight.shape} do not conform")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"affine: shapes {weight.shape} and {bias.shape} do not conform")

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        return gx, gw, g.sum(axis=0)

    return _make(x.data @ weight.data + bias.data, (x, weight, bias), bw, "affine")


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            n != m for i, (n, m) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} do not conform")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw, "index")


def broadcast_rows(a, n: int) -> Tensor:
    """Repeat a 1×d tensor to n×d."""
    a = as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] != 1:
        raise DimensionError(f"broadcast_rows: shapes {a.shape} and ({n}, *) do not conform")
    return _make(np.repeat(a.data, n, axis=0), (a,), lambda g: (g.sum(axis=0, keepdims=True),), "broadcast_rows")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw, "mean")


def softmax(a) -> Tensor:
    """Row-wise softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def row_norm(a) -> Tensor:
    """L2 norm of every row; the subgradient at a zero row is taken as zero."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"row_norm: shapes {a.shape} and (B, d) do not conform")
    out = np.sqrt((a.data * a.data).sum(axis=1))
    safe = np.where(out > 0, out, 1.0)

    def bw(g):
        return ((g / safe)[:, None] * a.data * (out > 0)[:, None],)

    return _make(out, (a,), bw, "row_norm")


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Batch normalization over axis 0.

    In training mode the batch statistics normalize and the running buffers are
    updated in place as ``momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm: shapes {x.shape} and {gamma.shape} do not conform")
    if training:
        n = x.shape[0]
        if n < 2:
            raise DimensionError(f"batch_norm: shapes {x.shape} and (>=2, {x.shape[1]}) do not conform "
                                 "(batch statistics need at least two rows in training mode)")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * n / (n - 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def bw(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        if training:
            n = x.shape[0]
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bw, "batch_norm")


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(scalar: Tensor) -> None:
    """Reverse accumulation from a single-element tensor into leaf ``grad`` fields.

    Leaf gradients add onto whatever is already stored; zero them first for a
    fresh gradient.
    """
    if scalar.data.size != 1:
        raise ContractError(f"backward needs a scalar, got shape {scalar.shape}")
    if not scalar.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(scalar): np.ones_like(scalar.data)}
    for node in reversed(_topo_order(scalar)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=DTYPE).reshape(parent.shape)


# ---------------------------------------------------------------- Gaussians


@dataclass
class GaussianDiag:
    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise DimensionError(f"GaussianDiag: shapes {self.mean.shape} and {self.log_var.shape} do not conform")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape

    @classmethod
    def standard(cls, shape) -> GaussianDiag:
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))

    def detach(self) -> GaussianDiag:
        return GaussianDiag(self.mean.detach(), self.log_var.detach())


def reparameterize(g: GaussianDiag, noise) -> Tensor:
    noise = as_tensor(noise)
    if noise.shape != g.mean.shape:
        raise DimensionError(f"reparameterize: shapes {g.mean.shape} and {noise.shape} do not conform")
    return add(g.mean, mul(exp(mul(g.log_var, 0.5)), noise))


def gaussian_kl(q: GaussianDiag, p: GaussianDiag) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over dimensions and averaged over rows."""
    if q.shape != p.shape:
        raise DimensionError(f"gaussian_kl: shapes {q.shape} and {p.shape} do not conform")
    for t in (q.mean, q.log_var, p.mean, p.log_var):
        if not np.all(np.isfinite(t.data)):
            raise NumericError("gaussian_kl: non-finite distribution parameters")
    # exp(lq - lp) rather than exp(lq)/exp(lp) so KL(q, q) is exactly zero
    diff = sub(q.mean, p.mean)
    terms = sub(p.log_var, q.log_var)
    terms = add(terms, exp(sub(q.log_var, p.log_var)))
    terms = add(terms, mul(square(diff), exp(neg(p.log_var))))
    terms = sub(terms, 1.0)
    per_row = mul(sum(terms, axis=1), 0.5)
    return mean(per_row)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update in place, reading each parameter's ``grad``."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractError(f"adam_step: state tracks {len(state.m)} tensors, got {len(params)}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {i} with shape {p.shape} has no grad")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state)


# ---------------------------------------------------------------- checkpoint container


def dump_container(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    """Serialize named f64 arrays: u64 header length, JSON header, raw little-endian data."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {"version": CKPT_VERSION, "arrays": entries, "data_bytes": offset, "meta": meta or {}}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    return struct.pack("<Q", len(raw)) + raw + b"".join(chunks)


def parse_container(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 8:
        raise CheckpointError("corrupt container: shorter than its length prefix")
    (hlen,) = struct.unpack("<Q", blob[:8])
    if 8 + hlen > len(blob):
        raise CheckpointError("corrupt container: header runs past end of file")
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt container: unreadable header ({exc})") from None
    if not isinstance(header, dict) or "arrays" not in header:
        raise CheckpointError("corrupt container: header lacks array table")
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {header.get('version')!r} != {CKPT_VERSION!r}")
    data = blob[8 + hlen :]
    if len(data) != header.get("data_bytes"):
        raise CheckpointError(f"corrupt container: expected {header.get('data_bytes')} data bytes, found {len(data)}")
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        end = start + 8 * count
        if end > len(data):
            raise CheckpointError(f"corrupt container: array {entry['name']!r} exceeds data section")
        arrays[entry["name"]] = np.frombuffer(data[start:end], dtype="<f8").astype(DTYPE).reshape(shape)
    return arrays, header.get("meta", {})


def save_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dump_container(arrays, meta))


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return parse_container(blob)
