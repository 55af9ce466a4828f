"""
Dense float64 matrices with reverse-mode differentiation.

Every value is a 2-D Tensor. Operations record their inputs and a closure
that pushes the output gradient back to them; Tensor.backward() walks the
recorded graph in reverse topological order. Parameters live in a ParamSet
so optimizers and checkpoints can iterate them in a stable order.
"""
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from errors import ContractError, NumericError, ShapeError

LOG_FLOOR = 1e-12

# abs() arguments recorded while finite_difference_check is probing
_kink_trace = threading.local()


class Tensor:
    """A matrix node in the differentiation graph"""

    def __init__(self, data, children=(), op="leaf", name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(op, f"expected a matrix, got {arr.ndim} dimensions")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.prev = children
        self.op = op
        self.name = name
        self.provenance = None
        self._backward = None

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.data.shape})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    def item(self):
        if self.data.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def backward(self):
        if self.data.shape != (1, 1):
            raise ContractError(f"backward needs a scalar loss, got shape {self.data.shape}")

        topo = _topological_order(self)
        for node in topo:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)

        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # operator sugar so model code reads like the maths
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological_order(root):
    topo = []
    visited = set()
    stack = [(root, False)]

    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if node in visited:
            continue
        visited.add(node)
        stack.append((node, True))
        for child in reversed(node.prev):
            if child not in visited:
                stack.append((child, False))

    return topo


def constant(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, op="const")


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot combine {a.shape} with {b.shape}") from None


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


# ---------- Elementwise ----------

def add(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape("add", a, b)
    out = Tensor(a.data + b.data, (a, b), "add")

    def _backward():
        a.grad += _unbroadcast(out.grad, a.shape)
        b.grad += _unbroadcast(out.grad, b.shape)
    out._backward = _backward
    return out


def sub(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape("sub", a, b)
    out = Tensor(a.data - b.data, (a, b), "sub")

    def _backward():
        a.grad += _unbroadcast(out.grad, a.shape)
        b.grad -= _unbroadcast(out.grad, b.shape)
    out._backward = _backward
    return out


def mul(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape("mul", a, b)
    out = Tensor(a.data * b.data, (a, b), "mul")

    def _backward():
        a.grad += _unbroadcast(out.grad * b.data, a.shape)
        b.grad += _unbroadcast(out.grad * a.data, b.shape)
    out._backward = _backward
    return out


def div(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape("div", a, b)
    out = Tensor(a.data / b.data, (a, b), "div")

    def _backward():
        a.grad += _unbroadcast(out.grad / b.data, a.shape)
        b.grad -= _unbroadcast(out.grad * a.data / (b.data * b.data), b.shape)
    out._backward = _backward
    return out


def scale(a, factor):
    a = constant(a)
    factor = float(factor)
    out = Tensor(a.data * factor, (a,), "scale")

    def _backward():
        a.grad += out.grad * factor
    out._backward = _backward
    return out


def tanh(a):
    a = constant(a)
    t = np.tanh(a.data)
    out = Tensor(t, (a,), "tanh")

    def _backward():
        a.grad += out.grad * (1.0 - t * t)
    out._backward = _backward
    return out


def square(a):
    a = constant(a)
    out = Tensor(a.data * a.data, (a,), "square")

    def _backward():
        a.grad += out.grad * 2.0 * a.data
    out._backward = _backward
    return out


def abs_(a):
    """|a| with subgradient 0 at the kink"""
    a = constant(a)
    trace = getattr(_kink_trace, "arrays", None)
    if trace is not None:
        trace.append(a.data.copy())
    out = Tensor(np.abs(a.data), (a,), "abs")

    def _backward():
        a.grad += out.grad * np.sign(a.data)
    out._backward = _backward
    return out


def log(a, floor=LOG_FLOOR):
    """Natural log with inputs clamped below at floor"""
    a = constant(a)
    clamped = np.maximum(a.data, floor)
    out = Tensor(np.log(clamped), (a,), "log")

    def _backward():
        live = a.data > floor
        a.grad += np.where(live, out.grad / clamped, 0.0)
    out._backward = _backward
    return out


def power(a, exponent):
    """Elementwise a**exponent for a strictly positive base"""
    a = constant(a)
    exponent = float(exponent)
    if np.any(a.data <= 0.0):
        raise NumericError("power: base must be strictly positive")
    out = Tensor(np.power(a.data, exponent), (a,), "power")

    def _backward():
        a.grad += out.grad * exponent * np.power(a.data, exponent - 1.0)
    out._backward = _backward
    return out


# ---------- Reductions ----------

def sum_all(a):
    a = constant(a)
    out = Tensor(np.sum(a.data), (a,), "sum")

    def _backward():
        a.grad += out.grad[0, 0]
    out._backward = _backward
    return out


def mean_all(a):
    a = constant(a)
    n = a.data.size
    if n == 0:
        raise ShapeError("mean", "mean of an empty matrix")
    out = Tensor(np.sum(a.data) / n, (a,), "mean")

    def _backward():
        a.grad += out.grad[0, 0] / n
    out._backward = _backward
    return out


def row_sum(a):
    a = constant(a)
    out = Tensor(a.data.sum(axis=1, keepdims=True), (a,), "row_sum")

    def _backward():
        a.grad += out.grad
    out._backward = _backward
    return out


# ---------- Matrix ----------

def matmul(a, b):
    a, b = constant(a), constant(b)
    if a.cols != b.rows:
        raise ShapeError("matmul", f"{a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, (a, b), "matmul")

    def _backward():
        a.grad += out.grad @ b.data.T
        b.grad += a.data.T @ out.grad
    out._backward = _backward
    return out


def row_softmax(a):
    """Softmax across each row, computed after subtracting the row max"""
    a = constant(a)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s, (a,), "row_softmax")

    def _backward():
        g = out.grad
        a.grad += s * (g - (g * s).sum(axis=1, keepdims=True))
    out._backward = _backward
    return out


def concat_cols(a, b):
    a, b = constant(a), constant(b)
    if a.rows != b.rows:
        raise ShapeError("concat_cols", f"row counts {a.rows} and {b.rows} differ")
    split = a.cols
    out = Tensor(np.concatenate([a.data, b.data], axis=1), (a, b), "concat_cols")

    def _backward():
        a.grad += out.grad[:, :split]
        b.grad += out.grad[:, split:]
    out._backward = _backward
    return out


def repeat_rows(a, times):
    """Stack `times` copies of a on top of each other"""
    a = constant(a)
    times = int(times)
    if times < 1:
        raise ShapeError("repeat_rows", f"times must be >= 1, got {times}")
    rows, cols = a.shape
    out = Tensor(np.tile(a.data, (times, 1)), (a,), "repeat_rows")

    def _backward():
        a.grad += out.grad.reshape(times, rows, cols).sum(axis=0)
    out._backward = _backward
    return out


def pairwise_sqdist(a, b):
    """d[i, j] = ||a_i - b_j||^2 for row vectors of a (N x k) and b (M x k)"""
    a, b = constant(a), constant(b)
    if a.cols != b.cols:
        raise ShapeError("pairwise_sqdist", f"widths {a.cols} and {b.cols} differ")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = Tensor(np.sum(diff * diff, axis=2), (a, b), "pairwise_sqdist")

    def _backward():
        g = out.grad
        a.grad += 2.0 * (a.data * g.sum(axis=1, keepdims=True) - g @ b.data)
        b.grad += 2.0 * (b.data * g.sum(axis=0)[:, None] - g.T @ a.data)
    out._backward = _backward
    return out


def kl_divergence(p, q, floor=LOG_FLOOR):
    """
    KL(p || q) = sum_ij p_ij log(p_ij / q_ij), natural log.

    p is a fixed target: no gradient flows into it. Both arguments are
    clamped below at floor before the log.
    """
    p_data = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    q = constant(q)
    if p_data.shape != q.shape:
        raise ShapeError("kl_divergence", f"{p_data.shape} vs {q.shape}")
    q_clamped = np.maximum(q.data, floor)
    value = np.sum(p_data * (np.log(np.maximum(p_data, floor)) - np.log(q_clamped)))
    out = Tensor(value, (q,), "kl_divergence")

    def _backward():
        live = q.data > floor
        q.grad += np.where(live, -out.grad[0, 0] * p_data / q_clamped, 0.0)
    out._backward = _backward
    return out


# ---------- Parameters ----------

class ParamSet:
    """Named parameter matrices in insertion order, each with a gradient slot"""

    def __init__(self):
        self._params = OrderedDict()

    def add(self, name, value):
        if name in self._params:
            raise ContractError(f"duplicate parameter name '{name}'")
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"parameter '{name}' has non-finite entries")
        tensor = Tensor(arr, name=name)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return list(self._params.items())

    def values(self):
        return list(self._params.values())

    def grads(self):
        return OrderedDict((name, p.grad) for name, p in self._params.items())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def count(self):
        return int(sum(p.data.size for p in self._params.values()))

    def state(self):
        return OrderedDict((name, p.data.copy()) for name, p in self._params.items())

    def load_state(self, state):
        for name, value in state.items():
            if name not in self._params:
                raise ContractError(f"unknown parameter '{name}'")
            arr = np.asarray(value, dtype=np.float64)
            if arr.shape != self._params[name].shape:
                raise ShapeError("load_state", f"'{name}' expects {self._params[name].shape}, got {arr.shape}")
            self._params[name].data = arr.copy()
            self._params[name].grad = np.zeros_like(arr)

    def subset(self, prefix):
        """A view holding the parameters whose name starts with prefix (tensors are shared)"""
        view = ParamSet()
        for name, p in self._params.items():
            if name.startswith(prefix):
                view._params[name] = p
        return view

    def union(self, other):
        merged = ParamSet()
        for source in (self, other):
            for name, p in source._params.items():
                if name in merged._params:
                    raise ContractError(f"duplicate parameter name '{name}'")
                merged._params[name] = p
        return merged


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} has non-finite entries")


def forward(graph, inputs, params):
    """
    Evaluate graph(*inputs, params) after checking every input and
    parameter is finite. graph composes the operations of this module.
    """
    wrapped = []
    for i, x in enumerate(inputs):
        t = x if isinstance(x, Tensor) else Tensor(x, op="input")
        _check_finite(t.data, f"input {i}")
        wrapped.append(t)
    for name, p in params.items():
        _check_finite(p.data, f"parameter '{name}'")

    out = graph(*wrapped, params)
    _check_finite(out.data, "forward output")
    return out


def backward(loss, params):
    """Fill every gradient slot of params with d loss / d parameter"""
    if not isinstance(loss, Tensor) or loss.data.shape != (1, 1):
        raise ContractError("backward needs a scalar loss produced by forward")
    params.zero_grad()
    loss.backward()
    return params


def as_loss(tensor, provenance):
    if tensor.data.shape != (1, 1):
        raise ContractError(f"{provenance} loss must be scalar, got {tensor.data.shape}")
    tensor.provenance = provenance
    return tensor


# ---------- Gradient checking ----------

@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    passed: bool
    checked: int = 0
    failures: list = field(default_factory=list)
    excluded: list = field(default_factory=list)
    worst: GradCheckEntry = None

    def summary(self):
        if self.worst is None:
            return f"checked {self.checked} entries, {len(self.excluded)} excluded at kinks"
        w = self.worst
        return (f"checked {self.checked} entries, {len(self.failures)} failed, "
                f"{len(self.excluded)} excluded; worst {w.name}{list(w.index)} "
                f"analytic={w.analytic:.6g} numeric={w.numeric:.6g} rel={w.rel_error:.3g}")


def _traced_value(loss_builder, params):
    _kink_trace.arrays = []
    try:
        value = loss_builder(params).item()
        return value, _kink_trace.arrays
    finally:
        _kink_trace.arrays = None


def _crosses_kink(base, plus, minus, kink_tolerance):
    for b, p, m in zip(base, plus, minus):
        if b.shape != p.shape or p.shape != m.shape:
            return True
        if np.any(np.sign(p) != np.sign(m)):
            return True
        moved = p != m
        if np.any(moved & (np.abs(b) < kink_tolerance)):
            return True
    return False


def finite_difference_check(loss_builder, params, step=1e-5, tolerance=1e-4,
                            kink_tolerance=1e-6, floor=1e-8):
    """
    Compare backward() gradients with central differences for every entry.

    loss_builder(params) must rebuild the scalar loss from scratch. Entries
    whose perturbation moves an abs() argument across (or off) zero are
    reported as excluded rather than failed. Failures are reported, never
    raised.
    """
    if step <= 0:
        raise ContractError("finite_difference_check needs step > 0")

    _kink_trace.arrays = []
    try:
        loss = loss_builder(params)
        base_trace = _kink_trace.arrays
    finally:
        _kink_trace.arrays = None
    backward(loss, params)
    analytic = OrderedDict((name, g.copy()) for name, g in params.grads().items())

    report = GradCheckReport(passed=True)
    for name, p in params.items():
        for idx in np.ndindex(p.data.shape):
            original = p.data[idx]
            p.data[idx] = original + step
            f_plus, trace_plus = _traced_value(loss_builder, params)
            p.data[idx] = original - step
            f_minus, trace_minus = _traced_value(loss_builder, params)
            p.data[idx] = original

            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[name][idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            entry = GradCheckEntry(name, tuple(int(i) for i in idx), a, numeric, rel)

            if _crosses_kink(base_trace, trace_plus, trace_minus, kink_tolerance):
                report.excluded.append(entry)
                continue

            report.checked += 1
            if report.worst is None or rel > report.worst.rel_error:
                report.worst = entry
            if rel > tolerance:
                report.failures.append(entry)

    report.passed = not report.failures
    return report


# ---------- Layers ----------

def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / max(fan_in + fan_out, 1))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def dense(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)
