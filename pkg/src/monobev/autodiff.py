"""Minimal reverse-mode automatic differentiation over numpy arrays.

Covers exactly the operation set the BEV pipeline needs: dense linear
algebra (batched matmul, 1x1 conv), the usual nonlinearities, axis
reductions, shape surgery, bilinear grid sampling and embedding lookup.
Training runs in float32; gradient verification (`grad_check`) requires
float64 parameters.

A `Value` wraps an ndarray plus an optional backward rule. `backward()`
propagates through the graph in reverse topological order using a
per-call accumulation buffer, then adds the result into each node's
`.grad`, so calling `backward()` twice without `zero_grad` doubles every
gradient.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class GradCheckError(RuntimeError):
    """Finite-difference verification could not be carried out."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(x):
    a = np.asarray(x)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float32)
    return a


class Value:
    """An ndarray node in the computation graph.

    `data` is the forward result; `grad` (same shape, lazily allocated)
    accumulates across `backward()` calls. Leaves created with
    `requires_grad=True` are the trainable parameters; `detach()` returns
    a leaf sharing the same data that blocks gradient flow.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    # Make `ndarray <op> Value` defer to the reflected Value operators.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- bookkeeping ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def detach(self):
        return Value(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Value(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        """Reverse-accumulate gradients from a scalar output.

        Each reachable node is visited exactly once in reverse topological
        order. Contributions are summed in a per-call buffer and then added
        into `.grad`, so shared subexpressions accumulate correctly and a
        repeated call doubles every gradient.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar output, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a value that does not require grad")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- operator sugar ---------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Value):
            return other
        return Value(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return add(self, scale(self._coerce(other), -1.0))

    def __rsub__(self, other):
        return add(self._coerce(other), scale(self, -1.0))

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __truediv__(self, other):
        return div(self, self._coerce(other))

    def __rtruediv__(self, other):
        return div(self._coerce(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._coerce(other))

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _needs_grad(*vals):
    return _GRAD_ENABLED and any(v.requires_grad for v in vals)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise and linear ops -----------------------------------------


def add(a, b):
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    if not _needs_grad(a, b):
        return Value(out)

    def bwd(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return Value(out, True, (a, b), bwd, "add")


def mul(a, b):
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    if not _needs_grad(a, b):
        return Value(out)

    def bwd(g):
        return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))

    return Value(out, True, (a, b), bwd, "mul")


def div(a, b):
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not broadcast") from None
    if not _needs_grad(a, b):
        return Value(out)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ((a, ga), (b, gb))

    return Value(out, True, (a, b), bwd, "div")


def scale(a, s):
    s = float(s)
    out = a.data * a.data.dtype.type(s)
    if not _needs_grad(a):
        return Value(out)

    def bwd(g):
        return ((a, g * a.data.dtype.type(s)),)

    return Value(out, True, (a,), bwd, "scale")


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast") from None
    if not _needs_grad(a, b):
        return Value(out)

    def bwd(g):
        pairs = []
        if a.requires_grad:
            pairs.append((a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # Stacked activations against a plain weight matrix: one
                # flat GEMM instead of per-slice outer products.
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            pairs.append((b, gb))
        return pairs

    return Value(out, True, (a, b), bwd, "matmul")


def relu(a):
    out = np.maximum(a.data, 0)
    if not _needs_grad(a):
        return Value(out)

    def bwd(g):
        return ((a, g * (a.data > 0)),)

    return Value(out, True, (a,), bwd, "relu")


def sigmoid(a):
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype)
    if not _needs_grad(a):
        return Value(out)

    def bwd(g):
        return ((a, g * out * (1.0 - out)),)

    return Value(out, True, (a,), bwd, "sigmoid")


def log(a):
    out = np.log(a.data)
    if not _needs_grad(a):
        return Value(out)

    def bwd(g):
        return ((a, g / a.data),)

    return Value(out, True, (a,), bwd, "log")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient is identity strictly inside, zero outside."""
    out = np.clip(a.data, lo, hi)
    if not _needs_grad(a):
        return Value(out)
    inside = (a.data > lo) & (a.data < hi)

    def bwd(g):
        return ((a, g * inside),)

    return Value(out, True, (a,), bwd, "clip")


def softmax(a, axis):
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    if not _needs_grad(a):
        return Value(out)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((a, out * (g - dot)),)

    return Value(out, True, (a,), bwd, "softmax")


def layer_norm(a, axis, eps=1e-5):
    """Normalize to zero mean / unit variance along `axis` (no affine)."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"layer_norm: axis {axis} invalid for shape {a.shape}")
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv
    if not _needs_grad(a):
        return Value(out)

    def bwd(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * out).mean(axis=axis, keepdims=True)
        return ((a, inv * (g - gm - out * gy)),)

    return Value(out, True, (a,), bwd, "layer_norm")


# -- shape surgery -------------------------------------------------------


def concat(vals, axis):
    vals = list(vals)
    if not vals:
        raise ShapeError("concat: empty input list")
    nd = vals[0].ndim
    for v in vals[1:]:
        if v.ndim != nd:
            raise ShapeError(f"concat: rank mismatch {vals[0].shape} vs {v.shape}")
    try:
        out = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[v.shape for v in vals]} do not align on axis {axis}") from None
    if not _needs_grad(*vals):
        return Value(out)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        idx = [slice(None)] * nd
        outs = []
        for v, lo, hi in zip(vals, offsets[:-1], offsets[1:]):
            idx[axis] = slice(lo, hi)
            outs.append((v, g[tuple(idx)]))
        return outs

    return Value(out, True, tuple(vals), bwd, "concat")


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    if not _needs_grad(a):
        return Value(out)

    def bwd(g):
        return ((a, g.reshape(a.shape)),)

    return Value(out, True, (a,), bwd, "reshape")


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    if not _needs_grad(a):
        return Value(out)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        return ((a, np.transpose(g, inv)),)

    return Value(out, True, (a,), bwd, "transpose")


def take(a, key):
    """Basic slicing (ints, slices, tuples thereof). Gradient scatters back."""
    out = a.data[key]
    if not _needs_grad(a):
        return Value(out)

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[key] += g
        return ((a, buf),)

    return Value(out, True, (a,), bwd, "slice")


def pad2d(a, pad):
    """Zero-pad the trailing two axes by `pad` on each side."""
    if a.ndim < 2:
        raise ShapeError(f"pad2d: need at least 2 dims, got {a.shape}")
    pad = int(pad)
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, width)
    if not _needs_grad(a):
        return Value(out)
    h, w = a.shape[-2], a.shape[-1]

    def bwd(g):
        return ((a, g[..., pad:pad + h, pad:pad + w]),)

    return Value(out, True, (a,), bwd, "pad2d")


def reduce_sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if not _needs_grad(a):
        return Value(out)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return Value(out, True, (a,), bwd, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if not _needs_grad(a):
        return Value(out)
    n = a.data.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g / n, a.shape).copy()),)

    return Value(out, True, (a,), bwd, "mean")


# -- structured ops -------------------------------------------------------


def conv1x1(x, w):
    """Pointwise convolution: x (C_in, H, W) with weights w (C_out, C_in)."""
    if x.ndim != 3 or w.ndim != 2:
        raise ShapeError(f"conv1x1: expected (C,H,W) and (C_out,C_in), got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv1x1: channel mismatch, weights {w.shape} vs input {x.shape}")
    c_in, h, wd = x.shape
    x2d = x.data.reshape(c_in, h * wd)
    out = (w.data @ x2d).reshape(w.shape[0], h, wd)
    if not _needs_grad(x, w):
        return Value(out)

    def bwd(g):
        g2d = g.reshape(w.shape[0], h * wd)
        pairs = []
        if x.requires_grad:
            pairs.append((x, (w.data.T @ g2d).reshape(x.shape)))
        if w.requires_grad:
            pairs.append((w, g2d @ x2d.T))
        return pairs

    return Value(out, True, (x, w), bwd, "conv1x1")


def bilinear_sample(grid, coords):
    """Sample `grid` (C, H, W) at fractional (row, col) positions.

    `coords` is a constant float array of shape (2, *S); output has shape
    (C, *S). Out-of-range samples read as zero and gradients flow to the
    grid values only.
    """
    if grid.ndim != 3:
        raise ShapeError(f"bilinear_sample: grid must be (C,H,W), got {grid.shape}")
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[0] != 2:
        raise ShapeError(f"bilinear_sample: coords must have leading dim 2, got {coords.shape}")
    c_ch, h, w = grid.shape
    rows = coords[0]
    cols = coords[1]
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = (rows - r0).astype(grid.dtype)
    fc = (cols - c0).astype(grid.dtype)
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)

    corners = (
        (r0, c0, (1 - fr) * (1 - fc)),
        (r0, c0 + 1, (1 - fr) * fc),
        (r0 + 1, c0, fr * (1 - fc)),
        (r0 + 1, c0 + 1, fr * fc),
    )
    out = np.zeros((c_ch,) + rows.shape, dtype=grid.dtype)
    for ri, ci, wt in corners:
        m = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        if not m.any():
            continue
        out[:, m] += grid.data[:, ri[m], ci[m]] * wt[m]
    if not _needs_grad(grid):
        return Value(out)

    def bwd(g):
        gg = np.zeros_like(grid.data)
        view = gg.transpose(1, 2, 0)
        for ri, ci, wt in corners:
            m = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
            if not m.any():
                continue
            vals = (g[:, m] * wt[m]).T
            np.add.at(view, (ri[m], ci[m]), vals)
        return ((grid, gg),)

    return Value(out, True, (grid,), bwd, "bilinear_sample")


def embedding_lookup(table, indices):
    """Gather rows of `table` (N, C) at integer `indices`; output indices.shape + (C,)."""
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-d, got {table.shape}")
    indices = np.asarray(indices)
    if not np.issubdtype(indices.dtype, np.integer):
        raise ShapeError("embedding_lookup: indices must be integers")
    out = table.data[indices]
    if not _needs_grad(table):
        return Value(out)

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, indices.ravel(), g.reshape(-1, table.shape[1]))
        return ((table, gt),)

    return Value(out, True, (table,), bwd, "embedding_lookup")


# -- finite-difference verification ---------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    ok: bool


@dataclass
class GradCheckReport:
    step: float
    tolerance: float
    entries: list = field(default_factory=list)

    @property
    def ok(self):
        return all(e.ok for e in self.entries)

    def format(self):
        lines = []
        for e in self.entries:
            status = "ok" if e.ok else "FAIL"
            lines.append(f"  {e.name:<40s} rel_err={e.max_rel_err:.3e}  [{status}]")
        verdict = "PASS" if self.ok else "FAIL"
        lines.append(f"grad_check: {verdict} (step={self.step:g}, tol={self.tolerance:g})")
        return "\n".join(lines)


def grad_check(f, params, step=1e-5, tolerance=1e-5):
    """Compare analytic gradients of `f()` against central finite differences.

    `f` is a deterministic scalar-valued function of the float64 `params`
    (a dict or list of (name, Value) pairs). The per-parameter error is
    max|analytic - numeric| normalized by the largest gradient magnitude
    seen for that parameter (so identically-zero gradients compare exactly).
    """
    if isinstance(params, dict):
        items = list(params.items())
    else:
        items = list(params)
    for name, p in items:
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters; {name!r} is {p.data.dtype}")

    for _, p in items:
        p.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ValueError(f"grad_check target must be scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise GradCheckError("non-finite forward value at the base point")
    out.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in items}

    report = GradCheckReport(step=step, tolerance=tolerance)
    with no_grad():
        for name, p in items:
            flat = p.data.reshape(-1)
            numeric = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f1 = f().data.item()
                flat[i] = orig - step
                f2 = f().data.item()
                flat[i] = orig
                if not (np.isfinite(f1) and np.isfinite(f2)):
                    raise GradCheckError(f"non-finite forward value perturbing {name}[{i}] by ±{step:g}")
                numeric[i] = (f1 - f2) / (2.0 * step)
            numeric = numeric.reshape(p.data.shape)
            a = analytic[name]
            denom = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
            rel = float(np.abs(a - numeric).max(initial=0.0) / denom)
            report.entries.append(GradCheckEntry(name=name, max_rel_err=rel, ok=rel < tolerance))
    return report
