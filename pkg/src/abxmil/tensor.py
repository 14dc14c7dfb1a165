"""Float64 tensors on a reverse-mode tape.

The engine is deliberately small: 2-D arrays, define-by-run recording into
an explicit Graph, and hand-written backward rules for exactly the
operations the bag-classification pipeline needs. Everything is float64 so
central-difference gradient checks are meaningful.

A forward pass is recorded only while a Graph is active::

    with Graph() as g:
        y = matmul(x, w)
        loss = sum_all(y)
        grads = g.backward(loss)     # {tensor: ndarray}

Outside a Graph the same ops run in inference mode (no tape, no memory
growth), which is what evaluation and the numeric side of finite
differences use.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

_LN_EPS = 1e-5  # inside the variance square root of layer_norm

_local = threading.local()


def _active_graph():
    stack = getattr(_local, "graphs", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense row-major float64 array, optionally tracked by the active Graph."""

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D here, got ndim={arr.ndim}")
        if arr.size == 0:
            raise ShapeError("empty tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on shape {self.shape}")
        return float(self.data[0, 0])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Graph:
    """Define-by-run tape. One Graph per bag; never reused across bags.

    Nodes are appended in creation order, which is already a topological
    order, so backward is a single reverse sweep. Gradients live in a
    per-call dict rather than on the tensors, so separate Graphs over
    shared read-only parameters can run on different threads.
    """

    def __init__(self):
        self.nodes = []  # (out, inputs, backward_fn), creation order
        self._counter = 0

    def __enter__(self):
        stack = getattr(_local, "graphs", None)
        if stack is None:
            stack = _local.graphs = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.graphs.pop()
        return False

    def record(self, out, inputs, backward_fn):
        out.node_id = self._counter
        self._counter += 1
        self.nodes.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> dict:
        """Reverse sweep from a scalar loss.

        Returns {tensor: gradient ndarray} for every requires-grad tensor
        that appears on the tape (zeros if the loss does not reach it).
        Gradients accumulate by sum across fan-out.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}

        def add(t, g):
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

        produced = {id(out) for out, _, _ in self.nodes}
        for out, inputs, backward_fn in reversed(self.nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            backward_fn(g, add)

        result = {}
        for _, inputs, _ in self.nodes:
            for t in inputs:
                if t.requires_grad and id(t) not in produced and t not in result:
                    g = grads.get(id(t))
                    result[t] = g if g is not None else np.zeros_like(t.data)
        return result


def _finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


def _make(op, data, inputs, backward_fn):
    _finite(data, op)
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    g = _active_graph()
    if g is not None and out.requires_grad:
        g.record(out, inputs, backward_fn)
    return out


def _collapse(g, operand, other):
    """Reduce a broadcast gradient back to the operand's shape."""
    if operand.shape == other.shape or g.shape == operand.shape:
        return g
    return g.sum(axis=0, keepdims=True)


def _check_broadcast(op, a, b):
    # only same-shape or a 1-by-n row against a p-by-n matrix
    if a.shape == b.shape:
        return
    if a.shape[1] == b.shape[1] and (a.shape[0] == 1 or b.shape[0] == 1):
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def backward(g, acc):
        if a.requires_grad:
            acc(a, _collapse(g, a, b))
        if b.requires_grad:
            acc(b, _collapse(g, b, a))

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def backward(g, acc):
        if a.requires_grad:
            acc(a, _collapse(g, a, b))
        if b.requires_grad:
            acc(b, -_collapse(g, b, a))

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def backward(g, acc):
        if a.requires_grad:
            acc(a, _collapse(g * b.data, a, b))
        if b.requires_grad:
            acc(b, _collapse(g * a.data, b, a))

    return _make("mul", a.data * b.data, (a, b), backward)


def smul(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient for c)."""
    c = float(c)

    def backward(g, acc):
        if a.requires_grad:
            acc(a, g * c)

    return _make("smul", a.data * c, (a,), backward)


def scale(a: Tensor, s: Tensor) -> Tensor:
    """Multiply by a learnable 1x1 scalar tensor."""
    if s.data.shape != (1, 1):
        raise ShapeError(f"scale expects a 1x1 scalar, got {s.shape}")

    def backward(g, acc):
        if a.requires_grad:
            acc(a, g * s.data[0, 0])
        if s.requires_grad:
            acc(s, np.array([[float((g * a.data).sum())]]))

    return _make("scale", a.data * s.data[0, 0], (a, s), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g, acc):
        if a.requires_grad:
            acc(a, g.T.copy())

    return _make("transpose", a.data.T.copy(), (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} differ")

    def backward(g, acc):
        if a.requires_grad:
            acc(a, g @ b.data.T)
        if b.requires_grad:
            acc(b, a.data.T @ g)

    return _make("matmul", a.data @ b.data, (a, b), backward)


def concat_last(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_last of zero parts")
    rows = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows:
            raise ShapeError(f"concat_last: leading dims differ ({[p.shape for p in parts]})")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(g, acc):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                acc(p, g[:, lo:hi].copy())

    return _make("concat_last", np.concatenate([p.data for p in parts], axis=1),
                 tuple(parts), backward)


def split_last(x: Tensor, widths):
    widths = [int(w) for w in widths]
    if any(w <= 0 for w in widths):
        raise ShapeError(f"split_last: non-positive width in {widths}")
    if sum(widths) != x.shape[1]:
        raise ShapeError(f"split_last: widths {widths} do not sum to {x.shape[1]}")
    outs = []
    lo = 0
    for w in widths:
        lo_, hi_ = lo, lo + w

        def backward(g, acc, lo=lo_, hi=hi_):
            if x.requires_grad:
                full = np.zeros_like(x.data)
                full[:, lo:hi] = g
                acc(x, full)

        outs.append(_make("split_last", x.data[:, lo_:hi_].copy(), (x,), backward))
        lo += w
    return outs


def sum_all(a: Tensor) -> Tensor:
    def backward(g, acc):
        if a.requires_grad:
            acc(a, np.full_like(a.data, g[0, 0]))

    return _make("sum_all", np.array([[a.data.sum()]]), (a,), backward)


def pick(a: Tensor, i: int, j: int) -> Tensor:
    if not (0 <= i < a.shape[0] and 0 <= j < a.shape[1]):
        raise ShapeError(f"pick({i},{j}) out of range for {a.shape}")

    def backward(g, acc):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[i, j] = g[0, 0]
            acc(a, full)

    return _make("pick", np.array([[a.data[i, j]]]), (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalizers
# ---------------------------------------------------------------------------

def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g, acc):
        if a.requires_grad:
            acc(a, g * (1.0 - y * y))

    return _make("tanh", y, (a,), backward)


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)

    def backward(g, acc):
        if a.requires_grad:
            acc(a, g * (a.data > 0.0))

    return _make("relu", y, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if not np.isfinite(a.data).all():
        raise NumericError("softmax_rows: non-finite input")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g, acc):
        if a.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            acc(a, (g - dot) * y)

    return _make("softmax_rows", y, (a,), backward)


def log_sum_exp_rows(a: Tensor) -> Tensor:
    """Row-wise log(sum(exp(.))) -> p x 1, the stable half of cross-entropy."""
    if not np.isfinite(a.data).all():
        raise NumericError("log_sum_exp_rows: non-finite input")
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=1, keepdims=True)
    y = m + np.log(s)
    soft = e / s

    def backward(g, acc):
        if a.requires_grad:
            acc(a, g * soft)

    return _make("log_sum_exp_rows", y, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = _LN_EPS) -> Tensor:
    """Normalize each row to zero mean / unit variance, then gain * xhat + shift.

    Population variance; eps sits inside the square root.
    """
    n = x.shape[1]
    if gain.shape != (1, n) or shift.shape != (1, n):
        raise ShapeError(f"layer_norm params must be 1x{n}, got {gain.shape}, {shift.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + shift.data

    def backward(g, acc):
        if gain.requires_grad:
            acc(gain, (g * xhat).sum(axis=0, keepdims=True))
        if shift.requires_grad:
            acc(shift, g.sum(axis=0, keepdims=True))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            acc(x, inv * (dxhat - m1 - xhat * m2))

    return _make("layer_norm", y, (x, gain, shift), backward)


# ---------------------------------------------------------------------------
# layer records
# ---------------------------------------------------------------------------

@dataclass
class LayerSpec:
    """One typed layer: linear (no bias), layer-norm, tanh or relu.

    Linear layers never carry a bias vector; layer-norm normalizes the last
    dimension with learnable gain/shift of the input width.
    """

    kind: str
    in_dim: int = 0
    out_dim: int = 0
    weights: dict = field(default_factory=dict)

    KINDS = ("linear", "layer_norm", "tanh", "relu")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.kind == "linear":
            w = self.weights.get("w")
            if w is None or set(self.weights) != {"w"}:
                raise ShapeError("linear layer carries exactly one weight and no bias")
            if w.shape != (self.in_dim, self.out_dim):
                raise ShapeError(f"linear weight {w.shape} != ({self.in_dim},{self.out_dim})")
        elif self.kind == "layer_norm":
            g, b = self.weights.get("gain"), self.weights.get("shift")
            if g is None or b is None:
                raise ShapeError("layer_norm needs gain and shift")
            if g.shape != (1, self.in_dim) or b.shape != (1, self.in_dim):
                raise ShapeError("layer_norm gain/shift must match the input width")


def apply_layer(layer: LayerSpec, x: Tensor) -> Tensor:
    if layer.kind in ("linear", "layer_norm") and x.shape[1] != layer.in_dim:
        raise ShapeError(f"layer expects width {layer.in_dim}, got {x.shape}")
    if layer.kind == "linear":
        return matmul(x, layer.weights["w"])
    if layer.kind == "layer_norm":
        return layer_norm(x, layer.weights["gain"], layer.weights["shift"])
    if layer.kind == "tanh":
        return tanh(x)
    return relu(x)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    f maps the tensor to a scalar Tensor and must be deterministic. The
    relative error denominator is max(|analytic|, |numeric|, 1e-8) per
    coordinate.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if not x.requires_grad:
        raise ValueError("finite_diff_check needs requires_grad on x")
    with Graph() as g:
        y = f(x)
        if y.data.size != 1:
            raise ValueError("f must return a scalar")
        gradient_map = g.backward(y)
        if x not in gradient_map:
            raise ValueError("f does not connect x to the loss through tracked ops")
        analytic = gradient_map[x]

    numeric = np.zeros_like(x.data)
    flat_x = x.data.reshape(-1)
    flat_n = numeric.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + step
        fp = f(x).item()
        flat_x[i] = orig - step
        fm = f(x).item()
        flat_x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("finite_diff_check: non-finite function value")
        flat_n[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
