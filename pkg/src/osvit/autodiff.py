"""Dense N-D tensors with reverse-mode automatic differentiation.

All model math runs on numpy buffers wrapped in :class:`Tensor`. Each
differentiable operation appends a record to the currently open
:class:`Tape`; ``tape.backward(loss)`` then replays the records exactly once
in reverse order, accumulating gradients into ``tensor.grad`` (``+=``, so a
tensor used n times receives the sum of n single-use gradients). With no tape
open the same functions are plain numpy computations, which is the inference
path.

float32 is the working dtype. Gradient checking (:func:`grad_check`) runs the
identical code in float64 and compares against central finite differences.

Broadcasting is deliberately restricted: elementwise ops accept equal shapes
or a pure leading-axis broadcast (one shape is a suffix of the other, e.g.
``[b,n,e] + [e]``); matmul broadcasts leading batch axes only. Anything else
raises :class:`ShapeError`.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DivergenceError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus gradient bookkeeping.

    ``data`` is row-major (C order); ``grad`` is lazily allocated during
    backward and always matches ``data`` in shape and dtype.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)


@dataclass
class _Record:
    output: Tensor
    inputs: tuple
    backward: object  # callable: grad_out ndarray -> tuple of ndarray|None
    name: str


@dataclass
class Tape:
    """Ordered record of executed differentiable operations.

    Records are appended in execution order, so every op's inputs precede it
    and a single reverse sweep visits each op exactly once.
    """

    _records: list = field(default_factory=list)
    _output_ids: set = field(default_factory=set)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self._records)

    def record(self, output, inputs, backward, name):
        self._records.append(_Record(output, inputs, backward, name))
        self._output_ids.add(id(output))

    def backward(self, loss: Tensor):
        """Populate ``grad`` for every requires_grad tensor reachable from loss."""
        if id(loss) not in self._output_ids:
            raise ConfigError("backward: loss tensor was not produced on this tape")
        if loss.data.size != 1:
            raise ConfigError(f"backward: loss must be scalar, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self._records):
            g_out = rec.output.grad
            if g_out is None:
                continue
            grads = rec.backward(g_out)
            for inp, g in zip(rec.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += g


def zero_grads(tensors):
    """Explicit gradient reset, called before each optimizer step."""
    for t in tensors:
        t.zero_grad()


def apply_op(name, inputs, out_data, backward):
    """Wrap ``out_data`` in a Tensor and register the op on the active tape.

    ``backward`` maps the output gradient (ndarray) to a tuple of input
    gradients aligned with ``inputs`` (``None`` for non-differentiable slots).
    This is also the extension point for custom differentiable ops defined
    outside this module.
    """
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = _active_tape()
    if requires and tape is not None:
        tape.record(out, tuple(inputs), backward, name)
    return out


def _as_tensor(x, like: Tensor):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_suffix_broadcast(name, sa, sb):
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) < len(big) and big[len(big) - len(small):] == small:
        return
    raise ShapeError(f"{name}: shapes {sa} and {sb} differ beyond leading batch axes")


def _reduce_to(grad, shape):
    # undo a leading-axis broadcast by summing the extra axes
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    for ax, (gdim, sdim) in enumerate(zip(grad.shape, shape)):
        if sdim == 1 and gdim != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_suffix_broadcast("add", a.shape, b.shape)
    out = a.data + b.data

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return apply_op("add", (a, b), out, backward)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_suffix_broadcast("sub", a.shape, b.shape)
    out = a.data - b.data

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return apply_op("sub", (a, b), out, backward)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a python scalar."""
    if not isinstance(b, Tensor):
        c = float(b)
        out = a.data * c

        def backward_scalar(g):
            return (g * c,)

        return apply_op("mul_scalar", (a,), out, backward_scalar)

    _check_suffix_broadcast("mul", a.shape, b.shape)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return _reduce_to(g * b_data, a.shape), _reduce_to(g * a_data, b.shape)

    return apply_op("mul", (a, b), out, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast, trailing two must contract."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: leading axes of {a.shape} and {b.shape} do not broadcast") from None
    out = np.matmul(a.data, b.data)
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = _reduce_to(np.matmul(g, np.swapaxes(b_data, -1, -2)), a.shape)
        gb = _reduce_to(np.matmul(np.swapaxes(a_data, -1, -2), g), b.shape)
        return ga, gb

    return apply_op("matmul", (a, b), out, backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    in_shape = x.shape

    def backward(g):
        return (g.reshape(in_shape),)

    return apply_op("reshape", (x,), out, backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return apply_op("transpose", (x,), out, backward)


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    """Join two tensors along ``axis``; gradient splits back to the inputs."""
    sa, sb = a.shape, b.shape
    if len(sa) != len(sb) or any(da != db for i, (da, db) in enumerate(zip(sa, sb)) if i != axis % len(sa)):
        raise ShapeError(f"concat: shapes {sa} and {sb} differ on a non-concat axis")
    out = np.concatenate([a.data, b.data], axis=axis)
    split_at = sa[axis]

    def backward(g):
        ga, gb = np.split(g, [split_at], axis=axis)
        return ga, gb

    return apply_op("concat", (a, b), out, backward)


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Take one slice along ``axis``, dropping that axis."""
    out = np.take(x.data, index, axis=axis)
    in_shape, in_dtype = x.shape, x.data.dtype

    def backward(g):
        gx = np.zeros(in_shape, dtype=in_dtype)
        slicer = [slice(None)] * len(in_shape)
        slicer[axis] = index
        gx[tuple(slicer)] = g
        return (gx,)

    return apply_op("select", (x,), out, backward)


def broadcast_batch(x: Tensor, batch: int) -> Tensor:
    """Repeat a leading size-1 axis to ``batch``; gradient sums back."""
    if x.shape[0] != 1:
        raise ShapeError(f"broadcast_batch: leading axis must be 1, got shape {x.shape}")
    out = np.broadcast_to(x.data, (batch,) + x.shape[1:]).copy()

    def backward(g):
        return (g.sum(axis=0, keepdims=True),)

    return apply_op("broadcast_batch", (x,), out, backward)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    m = np.max(x.data, axis=axis, keepdims=True)
    if np.isnan(m).any():
        raise DivergenceError("softmax: input contains NaN")
    e = np.exp(x.data - m)
    out = e / np.sum(e, axis=axis, keepdims=True)
    s = out

    def backward(g):
        inner = np.sum(g * s, axis=axis, keepdims=True)
        return (s * (g - inner),)

    return apply_op("softmax", (x,), out, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (population variance), then scale/shift."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gamma/beta shape must be ({n},), got {gamma.shape} and {beta.shape}")
    if eps <= 0:
        raise ConfigError("layer_norm: eps must be > 0")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * gamma.data + beta.data
    gamma_data = gamma.data
    reduce_axes = tuple(range(x.data.ndim - 1))

    def backward(g):
        dxhat = g * gamma_data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv_std * (dxhat - m1 - xhat * m2)
        ggamma = (g * xhat).sum(axis=reduce_axes) if reduce_axes else g * xhat
        gbeta = g.sum(axis=reduce_axes) if reduce_axes else g
        return gx, ggamma, gbeta

    return apply_op("layer_norm", (x, gamma, beta), out, backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi_cdf
    x_data = x.data

    def backward(g):
        pdf = np.exp(-0.5 * x_data * x_data) * _INV_SQRT_2PI
        return (g * (phi_cdf + x_data * pdf),)

    return apply_op("gelu", (x,), out, backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout: rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    out = x.data * keep

    def backward(g):
        return (g * keep,)

    return apply_op("dropout", (x,), out, backward)


def tensor_sum(x: Tensor) -> Tensor:
    out = x.data.sum()
    in_shape, in_dtype = x.shape, x.data.dtype

    def backward(g):
        return (np.broadcast_to(g, in_shape).astype(in_dtype, copy=True),)

    return apply_op("sum", (x,), out, backward)


def tensor_mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = x.data.mean()
    in_shape, in_dtype = x.shape, x.data.dtype

    def backward(g):
        return (np.broadcast_to(g / n, in_shape).astype(in_dtype, copy=True),)

    return apply_op("mean", (x,), out, backward)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class CoordinateCheck:
    input_index: int
    coordinate: tuple
    analytic: float
    numeric: float
    rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    max_rel_error: float
    checks: list
    passed: bool


def grad_check(f, inputs, h=1e-5, rtol=1e-4, atol=1e-7,
               max_coords_per_input=6, rng=None) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued ``f`` to central differences.

    ``inputs`` must be float64 tensors with requires_grad set; ``f`` must be a
    pure function of them. For a sampled subset of coordinates the numeric
    derivative ``(f(x+h*e) - f(x-h*e)) / 2h`` is compared against the tape
    gradient using ``|a-n| / max(|a|, |n|, 1e-8)``; a coordinate also passes
    under the absolute fallback ``|a-n| <= atol`` (covers zero-gradient
    coordinates, where the relative form is meaningless).
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ConfigError("grad_check: inputs must be float64")
        if not t.requires_grad:
            raise ConfigError("grad_check: inputs must have requires_grad=True")

    zero_grads(inputs)
    with Tape() as tape:
        out = f(*inputs)
        if out.data.size != 1:
            raise ConfigError("grad_check: f must be scalar-valued")
        tape.backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    if rng is None:
        rng = np.random.default_rng(0)
    checks = []
    for idx, t in enumerate(inputs):
        n = t.data.size
        chosen = rng.choice(n, size=min(max_coords_per_input, n), replace=False)
        flat = t.data.reshape(-1)
        for fi in chosen:
            fi = int(fi)
            orig = flat[fi]
            flat[fi] = orig + h
            f_plus = float(f(*inputs).data)
            flat[fi] = orig - h
            f_minus = float(f(*inputs).data)
            flat[fi] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[idx].reshape(-1)[fi])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            passed = rel <= rtol or abs(a - numeric) <= atol
            checks.append(CoordinateCheck(idx, tuple(np.unravel_index(fi, t.data.shape)),
                                          a, numeric, rel, passed))
    failed = [c for c in checks if not c.passed]
    # coordinates whose discrepancy is below the absolute noise floor do not
    # contribute a meaningful relative error
    max_rel = max((c.rel_error for c in checks if abs(c.analytic - c.numeric) > atol), default=0.0)
    return GradCheckReport(max_rel_error=max_rel, checks=checks, passed=not failed)
