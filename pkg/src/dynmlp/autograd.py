"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op computes its output with numpy, then records a
``(kind, out, inputs, ctx)`` entry on the active tape when any input requires
a gradient. ``backward`` replays the tape in reverse, looking each backward
rule up in ``BACKWARD_RULES`` at replay time.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

LN_EPS = 1e-5

_default_dtype: type = np.float64


def set_default_dtype(dtype) -> None:
    """Switch between 64-bit (test mode, default) and 32-bit (fast mode)."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype!r}; use float64 or float32")
    _default_dtype = dtype


def get_default_dtype() -> type:
    return _default_dtype


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an op kind."""


class Tensor:
    def __init__(self, values: Any, requires_grad: bool = False, dtype=None):
        self.data = np.array(values, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: str | None = None  # kind of the op that produced this tensor

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data)
        out.requires_grad = False
        out.grad = None
        out.op = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None and self.grad.shape == self.data.shape and self.grad.dtype == self.data.dtype:
            self.grad.fill(0)
        else:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return elementwise_mul(self, other)
    def __rmul__(self, other): return elementwise_mul(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return scale(self, -1.0)

    def relu(self): return relu(self)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def softmax(self): return softmax(self)
    def log_softmax(self): return log_softmax(self)
    def sum(self, axis=None, keepdims=False): return tensor_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def to_json(self) -> str:
        return json.dumps({"shape": list(self.shape), "values": self.data.reshape(-1).tolist()})

    @classmethod
    def from_json(cls, text: str, requires_grad: bool = False) -> "Tensor":
        doc = json.loads(text)
        values = np.asarray(doc["values"], dtype=_default_dtype)
        if values.size != int(np.prod(doc["shape"], dtype=np.int64)):
            raise ShapeError(f"tensor dump has {values.size} values for shape {doc['shape']}")
        return cls(values.reshape(doc["shape"]), requires_grad=requires_grad)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    kind: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    ctx: Any


class Tape:
    """Ordered log of recorded ops; creation order is a topological order."""

    def __init__(self):
        self.records: list[Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()


_tape = Tape()
_grad_enabled = True


def get_tape() -> Tape:
    return _tape


def reset_tape() -> None:
    _tape.reset()


@contextlib.contextmanager
def no_grad():
    """Suspend recording; ops inside produce constant tensors."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], ctx: Any = None) -> Tensor:
    out = Tensor._wrap(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = kind
        _tape.records.append(Record(kind, out, tuple(inputs), ctx))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# --- forward ops -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b))


def elementwise_mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("elementwise_mul", a, b)
    return _emit("elementwise_mul", a.data * b.data, (a, b))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ in {a.shape} and {b.shape}")
    return _emit("matmul", np.matmul(a.data, b.data), (a, b))


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _emit("relu", np.maximum(x.data, 0), (x,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _emit("exp", e, (x,), e)


def log(x) -> Tensor:
    x = as_tensor(x)
    return _emit("log", np.log(x.data), (x,))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    """Softmax over the last dimension."""
    x = as_tensor(x)
    s = _softmax(x.data)
    return _emit("softmax", s, (x,), s)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    return _emit("log_softmax", out, (x,), np.exp(out))


def layer_norm(x, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last dimension to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    if not eps > 0:
        raise ValueError(f"layer_norm: eps must be > 0, got {eps}")
    if x.ndim < 1:
        raise ShapeError(f"layer_norm: needs at least 1 dim, got shape {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    return _emit("layer_norm", xhat, (x,), (xhat, rstd))


def concat_lastdim(tensors: Sequence[Any]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_lastdim: no operands")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead or t.ndim == 0:
            shapes = ", ".join(str(u.shape) for u in tensors)
            raise ShapeError(f"concat_lastdim: leading dims disagree among {shapes}")
    sizes = [t.shape[-1] for t in tensors]
    return _emit("concat_lastdim", np.concatenate([t.data for t in tensors], axis=-1), tensors, sizes)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    return _emit("reshape", data, (x,), x.shape)


def tensor_sum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    return _emit("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), (axis, keepdims))


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    return _emit("mean", np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), (axis, keepdims))


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    return _emit("scale", x.data * factor, (x,), factor)


# --- backward rules --------------------------------------------------------
# Each rule maps (record, upstream grad) to one grad per input (None to skip).

def _add_backward(rec: Record, g):
    return g, g


def _sub_backward(rec: Record, g):
    return g, -g


def _mul_backward(rec: Record, g):
    a, b = rec.inputs
    return g * b.data, g * a.data


def _matmul_backward(rec: Record, g):
    a, b = rec.inputs
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
    gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
    return ga, gb


def _relu_backward(rec: Record, g):
    return (g * (rec.inputs[0].data > 0),)


def _exp_backward(rec: Record, g):
    return (g * rec.ctx,)


def _log_backward(rec: Record, g):
    return (g / rec.inputs[0].data,)


def _softmax_backward(rec: Record, g):
    s = rec.ctx
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def _log_softmax_backward(rec: Record, g):
    s = rec.ctx
    return (g - s * g.sum(axis=-1, keepdims=True),)


def _layer_norm_backward(rec: Record, g):
    xhat, rstd = rec.ctx
    gm = g.mean(axis=-1, keepdims=True)
    gxm = (g * xhat).mean(axis=-1, keepdims=True)
    return (rstd * (g - gm - xhat * gxm),)


def _concat_backward(rec: Record, g):
    cuts = np.cumsum(rec.ctx)[:-1]
    return tuple(np.split(g, cuts, axis=-1))


def _reshape_backward(rec: Record, g):
    return (g.reshape(rec.ctx),)


def _expand_reduced(g, rec: Record):
    axis, keepdims = rec.ctx
    x = rec.inputs[0]
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape)


def _sum_backward(rec: Record, g):
    return (np.array(_expand_reduced(g, rec)),)


def _mean_backward(rec: Record, g):
    axis = rec.ctx[0]
    x = rec.inputs[0]
    count = x.data.size if axis is None else x.shape[axis]
    return (_expand_reduced(g, rec) / count,)


def _scale_backward(rec: Record, g):
    return (g * rec.ctx,)


BACKWARD_RULES: dict[str, Callable[[Record, np.ndarray], tuple]] = {
    "add": _add_backward,
    "sub": _sub_backward,
    "elementwise_mul": _mul_backward,
    "matmul": _matmul_backward,
    "relu": _relu_backward,
    "exp": _exp_backward,
    "log": _log_backward,
    "softmax": _softmax_backward,
    "log_softmax": _log_softmax_backward,
    "layer_norm": _layer_norm_backward,
    "concat_lastdim": _concat_backward,
    "reshape": _reshape_backward,
    "sum": _sum_backward,
    "mean": _mean_backward,
    "scale": _scale_backward,
}

_FORWARD = {
    "add": add,
    "sub": sub,
    "elementwise_mul": elementwise_mul,
    "matmul": matmul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "reshape": reshape,
    "sum": tensor_sum,
    "mean": mean,
    "scale": scale,
}

OP_KINDS = tuple(BACKWARD_RULES)


def forward_op(kind: str, inputs: Sequence[Any], **attrs) -> Tensor:
    """Dispatch an op by name: ``forward_op("matmul", [a, b])``."""
    if kind == "concat_lastdim":
        return concat_lastdim(inputs)
    try:
        fn = _FORWARD[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf on the tape.

    Leaves recorded on the tape but unreachable from ``loss`` receive zeros.
    """
    tape = tape or _tape
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not tape.records:
        raise RuntimeError("backward: tape is empty; nothing was recorded")
    if loss.op is None:
        raise RuntimeError("backward: loss was not produced by a recorded op")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        for t in rec.inputs:
            if t.requires_grad and t.op is None:
                leaves[id(t)] = t
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = BACKWARD_RULES[rec.kind](rec, g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = _unbroadcast(np.asarray(gi), t.shape)
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi

    for key, leaf in leaves.items():
        g = grads.get(key)
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=leaf.data.dtype)
        elif g is not None:
            leaf.grad += g


def finite_difference_grads(
    f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-4
) -> list[np.ndarray]:
    """Central-difference gradient of the scalar ``f()`` w.r.t. each tensor in ``params``."""
    if not step > 0:
        raise ValueError(f"step must be > 0, got {step}")
    out = []
    with no_grad():
        for p_index, p in enumerate(params):
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            num = np.zeros(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FloatingPointError(
                        f"non-finite value at tensor {p_index}, coordinate {tuple(int(j) for j in np.unravel_index(i, p.shape))}"
                    )
                num[i] = (fp - fm) / (2 * step)
            out.append(num.reshape(p.shape))
    return out


def analytic_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    saved = [(p.requires_grad, p.grad) for p in params]
    reset_tape()
    for p in params:
        p.requires_grad = True
        p.grad = None
    loss = f()
    backward(loss)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p, (rg, g) in zip(params, saved):
        p.requires_grad, p.grad = rg, g
    reset_tape()
    return grads


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            err = np.abs(a - n) / np.maximum(1.0, np.abs(n))
            worst = max(worst, float(err.max()))
    return worst


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-4) -> float:
    """Max over all coordinates of |analytic - numeric| / max(1, |numeric|)."""
    analytic = analytic_grads(f, params)
    numeric = finite_difference_grads(f, params, step)
    return max_relative_error(analytic, numeric)


def finite_difference_check(f: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5) -> float:
    """Gradient check of ``f`` at ``point``; returns the max relative error."""
    return check_gradients(lambda: f(point), [point], step)
