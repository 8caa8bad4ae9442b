"""Reverse-mode differentiable numerical core.

Dense float64 arrays only (rank <= 3), no broadcasting beyond the
rank-2 x rank-1 row case. Every forward op validates finiteness; NaN/Inf
is an error state, not a value. Gradients accumulate into leaf ``Value``s
marked ``requires_grad`` and are zeroed explicitly, so a multi-term loss
can be assembled from parts and backpropagated once.

Ops that the pipeline calls in inner loops (row softmax, row
normalization, cosine scoring, cross entropy) are fused nodes with
hand-derived adjoints; everything is checkable against central finite
differences via :func:`fd_gradient`.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence

import numpy as np

from .errors import DegenerateInputError, NonFiniteError, ShapeError

Array = np.ndarray

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_f64(data) -> Array:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 3:
        raise ShapeError(f"rank {arr.ndim} > 3 is unsupported")
    return arr


def _check_finite(arr: Array, op: str) -> None:
    # Sum-probe: NaN/Inf in any entry poisons the sum. Cheaper than a
    # full isfinite scan on the small arrays this core handles. The
    # probe itself may overflow on huge-but-finite data, hence errstate
    # and the max-abs fallback.
    with np.errstate(over="ignore"):
        if not math.isfinite(float(np.sum(arr))):
            if math.isfinite(float(np.max(np.abs(arr), initial=0.0))):
                return
            raise NonFiniteError(f"non-finite result in op '{op}'")


class Value:
    """A node in the computation graph: data, grad accumulator, provenance.

    Leaves created with ``requires_grad=True`` own a persistent ``grad``
    array (shape-matched to ``data``); interior nodes keep only enough
    provenance (`_parents`, `_backward`) for reverse traversal.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward=None, _op: str = "leaf"):
        arr = _as_f64(data)
        _check_finite(arr, _op)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def traced(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a scalar Value")
        return float(self.data)

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, op={self._op!r})"

    # -- operators (sugar over module-level ops) -------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def param(data, requires_grad: bool = True) -> Value:
    """Create a leaf parameter (gradient-accumulating by default)."""
    return Value(data, requires_grad=requires_grad)


def constant(data) -> Value:
    """Create a non-trainable leaf."""
    return Value(data, requires_grad=False)


def _wrap(x) -> Value:
    return x if isinstance(x, Value) else constant(x)


def _node(data: Array, parents: tuple[Value, ...], backward, op: str) -> Value:
    """Build an op result; records provenance only if some input is traced."""
    if _grad_enabled and any(p.traced for p in parents):
        return Value(data, _parents=parents, _backward=backward, _op=op)
    return Value(data, _op=op)


# -- elementwise and linear algebra ops ----------------------------------


def add(a: Value, b) -> Value:
    """Elementwise sum; also accepts (n,d) + (d,) row broadcast."""
    a, b = _wrap(a), _wrap(b)
    if a.shape == b.shape:
        def bw(g, acc):
            acc(a, g)
            acc(b, g)
        return _node(a.data + b.data, (a, b), bw, "add")
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def bw(g, acc):
            acc(a, g)
            acc(b, g.sum(axis=0))
        return _node(a.data + b.data[None, :], (a, b), bw, "add_row")
    if b.data.ndim == 0:
        def bw(g, acc):
            acc(a, g)
            acc(b, np.asarray(g.sum()))
        return _node(a.data + b.data, (a, b), bw, "add_scalar")
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def addn(parts: Sequence[Value]) -> Value:
    """N-ary same-shape sum (single graph node)."""
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("addn of empty sequence")
    shape = parts[0].shape
    if any(p.shape != shape for p in parts):
        raise ShapeError("addn requires identical shapes")
    out = parts[0].data.copy()
    for p in parts[1:]:
        out += p.data

    def bw(g, acc):
        for p in parts:
            acc(p, g)

    return _node(out, tuple(parts), bw, "addn")


def mul(a: Value, b) -> Value:
    """Elementwise product of same-shape Values."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def bw(g, acc):
        acc(a, g * b.data)
        acc(b, g * a.data)

    return _node(a.data * b.data, (a, b), bw, "mul")


def scale(a: Value, c: float) -> Value:
    """Multiply by a python constant."""
    a = _wrap(a)
    c = float(c)

    def bw(g, acc):
        acc(a, g * c)

    return _node(a.data * c, (a,), bw, "scale")


def scale_by(a: Value, s: Value) -> Value:
    """Multiply array ``a`` by scalar Value ``s`` (s stays in the graph)."""
    if s.data.ndim != 0:
        raise ShapeError("scale_by expects a scalar Value")

    def bw(g, acc):
        acc(a, g * s.data)
        acc(s, np.asarray(np.sum(g * a.data)))

    return _node(a.data * s.data, (a, s), bw, "scale_by")


def matmul(a: Value, b: Value) -> Value:
    """Matrix/vector product for the rank combinations the pipeline uses."""
    a, b = _wrap(a), _wrap(b)
    an, bn = a.data.ndim, b.data.ndim
    if an == 2 and bn == 2:
        def bw(g, acc):
            acc(a, g @ b.data.T)
            acc(b, a.data.T @ g)
    elif an == 2 and bn == 1:
        def bw(g, acc):
            acc(a, np.outer(g, b.data))
            acc(b, a.data.T @ g)
    elif an == 1 and bn == 2:
        def bw(g, acc):
            acc(a, b.data @ g)
            acc(b, np.outer(a.data, g))
    elif an == 1 and bn == 1:
        def bw(g, acc):
            acc(a, g * b.data)
            acc(b, g * a.data)
    else:
        raise ShapeError(f"matmul: unsupported ranks {an} x {bn}")
    return _node(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a: Value) -> Value:
    """2-D transpose."""
    if a.data.ndim != 2:
        raise ShapeError("transpose expects rank 2")

    def bw(g, acc):
        acc(a, g.T)

    return _node(a.data.T.copy(), (a,), bw, "transpose")


def reshape(a: Value, shape: tuple) -> Value:
    orig = a.shape

    def bw(g, acc):
        acc(a, g.reshape(orig))

    return _node(a.data.reshape(shape).copy(), (a,), bw, "reshape")


def relu(a: Value) -> Value:
    mask = a.data > 0

    def bw(g, acc):
        acc(a, g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), bw, "relu")


def tanh(a: Value) -> Value:
    out = np.tanh(a.data)

    def bw(g, acc):
        acc(a, g * (1.0 - out * out))

    return _node(out, (a,), bw, "tanh")


def exp(a: Value) -> Value:
    out = np.exp(a.data)

    def bw(g, acc):
        acc(a, g * out)

    return _node(out, (a,), bw, "exp")


def log(a: Value) -> Value:
    def bw(g, acc):
        acc(a, g / a.data)

    return _node(np.log(a.data), (a,), bw, "log")


def sum_all(a: Value) -> Value:
    shape = a.shape

    def bw(g, acc):
        acc(a, np.full(shape, float(g)))

    return _node(np.asarray(a.data.sum()), (a,), bw, "sum")


def mean_all(a: Value) -> Value:
    n = a.data.size
    shape = a.shape

    def bw(g, acc):
        acc(a, np.full(shape, float(g) / n))

    return _node(np.asarray(a.data.mean()), (a,), bw, "mean")


def sum_axis(a: Value, axis: int) -> Value:
    def bw(g, acc):
        acc(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _node(a.data.sum(axis=axis), (a,), bw, f"sum_axis{axis}")


def mean_axis(a: Value, axis: int) -> Value:
    n = a.shape[axis]

    def bw(g, acc):
        acc(a, np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy())

    return _node(a.data.mean(axis=axis), (a,), bw, f"mean_axis{axis}")


def mean_of(parts: Sequence[Value]) -> Value:
    """Mean of same-shape Values (used for batch-averaging scalar losses)."""
    return scale(addn(parts), 1.0 / len(parts))


def stack_rows(rows: Sequence[Value]) -> Value:
    """Stack rank-1 Values of equal length into a matrix."""
    rows = [_wrap(r) for r in rows]
    if not rows:
        raise ShapeError("stack_rows of empty sequence")
    if any(r.data.ndim != 1 or r.shape != rows[0].shape for r in rows):
        raise ShapeError("stack_rows requires equal-length vectors")

    def bw(g, acc):
        for i, r in enumerate(rows):
            acc(r, g[i])

    return _node(np.stack([r.data for r in rows]), tuple(rows), bw, "stack_rows")


def concat_rows(parts: Sequence[Value]) -> Value:
    """Concatenate vectors (as single rows) and matrices along axis 0."""
    parts = [_wrap(p) for p in parts]
    blocks = [p.data[None, :] if p.data.ndim == 1 else p.data for p in parts]
    if any(b.ndim != 2 for b in blocks):
        raise ShapeError("concat_rows takes rank-1 or rank-2 parts")
    sizes = [b.shape[0] for b in blocks]

    def bw(g, acc):
        off = 0
        for p, b, n in zip(parts, blocks, sizes):
            piece = g[off:off + n]
            acc(p, piece[0] if p.data.ndim == 1 else piece)
            off += n

    return _node(np.concatenate(blocks, axis=0), tuple(parts), bw, "concat_rows")


def take_rows(a: Value, indices) -> Value:
    """Gather along axis 0 (rank 1, 2 or 3); backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take_rows expects a 1-D index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"take_rows: index out of range for axis of size {a.shape[0]}")

    def bw(g, acc):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        acc(a, out, exact=True)

    return _node(a.data[idx].copy(), (a,), bw, "take_rows")


def take_row(a: Value, index: int) -> Value:
    """Single-row gather from a rank-2 Value."""
    i = int(index)
    if not 0 <= i < a.shape[0]:
        raise IndexError(f"row {i} out of range for axis of size {a.shape[0]}")

    def bw(g, acc):
        out = np.zeros_like(a.data)
        out[i] = g
        acc(a, out, exact=True)

    return _node(a.data[i].copy(), (a,), bw, "take_row")


# -- fused numerical ops -------------------------------------------------


def softmax(logits: Value) -> Value:
    """Stable softmax over a rank-1 Value; output sums to 1."""
    logits = _wrap(logits)
    if logits.data.ndim != 1 or logits.data.size == 0:
        raise ShapeError("softmax expects a non-empty vector")
    z = logits.data - logits.data.max()
    e = np.exp(z)
    out = e / e.sum()

    def bw(g, acc):
        acc(logits, out * (g - np.dot(g, out)))

    return _node(out, (logits,), bw, "softmax")


def softmax_rows(x: Value) -> Value:
    """Row-wise stable softmax of a rank-2 Value."""
    if x.data.ndim != 2:
        raise ShapeError("softmax_rows expects rank 2")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g, acc):
        acc(x, out * (g - np.sum(g * out, axis=1, keepdims=True)))

    return _node(out, (x,), bw, "softmax_rows")


def log_sum_exp(logits: Array) -> float:
    """Stable log(sum(exp(logits))) on a raw array."""
    m = float(np.max(logits))
    return m + math.log(float(np.sum(np.exp(logits - m))))


def cross_entropy_from_logits(logits: Value, target: int) -> Value:
    """-log softmax(logits)[target], computed via log-sum-exp."""
    logits = _wrap(logits)
    if logits.data.ndim != 1:
        raise ShapeError("cross_entropy_from_logits expects a vector")
    t = int(target)
    if not 0 <= t < logits.data.size:
        raise IndexError(f"target {t} out of range for {logits.data.size} classes")
    lse = log_sum_exp(logits.data)
    ce = lse - float(logits.data[t])

    def bw(g, acc):
        p = np.exp(logits.data - lse)
        p[t] -= 1.0
        acc(logits, float(g) * p)

    # CE is >= 0 mathematically; guard rounding at the dominant-logit limit.
    return _node(np.asarray(max(ce, 0.0)), (logits,), bw, "cross_entropy")


def normalize(v: Value) -> Value:
    """v / ||v||; zero-norm input is degenerate."""
    n = float(np.linalg.norm(v.data))
    if n == 0.0:
        raise DegenerateInputError("cannot normalize a zero vector")
    if not np.isfinite(n):
        # x/inf silently collapses to zeros, so catch the overflow here
        raise NonFiniteError("vector norm overflowed in normalize")
    out = v.data / n

    def bw(g, acc):
        acc(v, (g - out * np.dot(g, out)) / n)

    return _node(out, (v,), bw, "normalize")


def normalize_rows(x: Value) -> Value:
    """Row-wise L2 normalization of a rank-2 Value."""
    if x.data.ndim != 2:
        raise ShapeError("normalize_rows expects rank 2")
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero row")
    if not np.isfinite(norms).all():
        raise NonFiniteError("row norm overflowed in normalize_rows")
    out = x.data / norms

    def bw(g, acc):
        acc(x, (g - out * np.sum(g * out, axis=1, keepdims=True)) / norms)

    return _node(out, (x,), bw, "normalize_rows")


def cosine_similarity(u: Value, v: Value) -> Value:
    """<u,v> / (||u|| ||v||), clamped to [-1, 1] against rounding.

    The adjoint uses the unclamped formula; the clamp only trims float
    noise at the +-1 boundary.
    """
    u, v = _wrap(u), _wrap(v)
    if u.data.ndim != 1 or u.shape != v.shape:
        raise ShapeError("cosine_similarity expects two equal-length vectors")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    if not (np.isfinite(nu) and np.isfinite(nv)):
        raise NonFiniteError("vector norm overflowed in cosine_similarity")
    uh, vh = u.data / nu, v.data / nv
    c = float(np.dot(uh, vh))
    out = min(1.0, max(-1.0, c))

    def bw(g, acc):
        g = float(g)
        acc(u, g * (vh - c * uh) / nu)
        acc(v, g * (uh - c * vh) / nv)

    return _node(np.asarray(out), (u, v), bw, "cosine")


def cosine_rows(keys: Value, q: Value) -> Value:
    """Cosine similarity between each row of ``keys`` and vector ``q``."""
    if keys.data.ndim != 2 or q.data.ndim != 1 or keys.shape[1] != q.shape[0]:
        raise ShapeError("cosine_rows expects (m,d) keys and (d,) query")
    knorm = np.linalg.norm(keys.data, axis=1)
    qnorm = float(np.linalg.norm(q.data))
    if qnorm == 0.0 or np.any(knorm == 0.0):
        raise DegenerateInputError("cosine_rows: zero-norm key or query")
    if not (np.isfinite(qnorm) and np.isfinite(knorm).all()):
        raise NonFiniteError("norm overflowed in cosine_rows")
    kh = keys.data / knorm[:, None]
    qh = q.data / qnorm
    s = np.clip(kh @ qh, -1.0, 1.0)

    def bw(g, acc):
        acc(keys, (g / knorm)[:, None] * (qh[None, :] - s[:, None] * kh))
        acc(q, (kh.T @ g - (g @ s) * qh) / qnorm)

    return _node(s, (keys, q), bw, "cosine_rows")


# -- backward pass -------------------------------------------------------


def _toposort(root: Value) -> list[Value]:
    """Iterative post-order topological sort over traced ancestors."""
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
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
            if p.traced and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Value) -> None:
    """Reverse-accumulate d(loss)/d(leaf) into every reachable parameter.

    Interior adjoints live only for the duration of the call; leaf
    ``grad`` arrays accumulate across calls until :func:`zero_grad`.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError("backward requires a scalar loss")
    if not loss.traced:
        return
    order = _toposort(loss)
    adj: dict[int, Array] = {id(loss): np.ones_like(loss.data)}

    def make_acc(local):
        def acc(node: Value, g: Array, exact: bool = False):
            if not node.traced:
                return
            cur = local.get(id(node))
            if cur is None:
                local[id(node)] = g if exact else np.array(g, dtype=np.float64, copy=True)
            else:
                cur += g
        return acc

    acc = make_acc(adj)
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad += g
        if node._backward is not None:
            node._backward(g, acc)


def zero_grad(params) -> None:
    """Zero the grad accumulator of every parameter in ``params``."""
    for p in params.values() if isinstance(params, dict) else params:
        if p.grad is not None:
            p.grad[...] = 0.0


# -- finite differences --------------------------------------------------


def fd_gradient(f: Callable[[], float], x: Array, h: float = 1e-5) -> Array:
    """Central finite differences of vector->scalar map f w.r.t. array x.

    ``f`` must read ``x`` by reference (mutated in place per entry).
    Independent of the reverse-mode path: forward evaluations only.
    """
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(analytic: Array, numeric: Array, floor: float = 1e-6) -> float:
    """max |a-n| / max(floor, |a|, |n|) over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


# -- optimizer -----------------------------------------------------------


class AdamOptimizer:
    """Adaptive-moment estimation with bias correction.

    Per-parameter first/second moment arrays shape-match their
    parameters; the step counter increases by exactly 1 per update.
    """

    def __init__(self, params: dict[str, Value], lr: float = 5e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape mismatch for '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        zero_grad(self.params)
