"""Minimal reverse-mode tensor engine.

Dense float64 tensors with a dynamically built tape. Covers exactly the op
set the processors need: matmul, broadcast add/sub/mul, concat, row
gather/scatter, row softmax, layer norm, relu/gelu, exp, row norms and
reductions, plus AdamW with a cosine learning-rate schedule.

Determinism: scatter/gather accumulate in list order via a stable sort +
``np.add.reduceat``, so repeated runs are bit-identical. The
``exact_reductions()`` context additionally routes every matmul through
exactly rounded summation (``math.fsum``), making results independent of
row and contraction order. That mode is slow and intended for small-graph
equivalence checks, not training.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeError

_GRAD_ENABLED = True
_EXACT_MATMUL = False


@contextmanager
def no_grad():
    """Disable tape construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def exact_reductions():
    """Route matmuls through order-invariant exactly rounded summation."""
    global _EXACT_MATMUL
    prev = _EXACT_MATMUL
    _EXACT_MATMUL = True
    try:
        yield
    finally:
        _EXACT_MATMUL = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 array plus optional gradient and tape linkage."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_vjp", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 _parents=(), _vjp=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._vjp = _vjp
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def detach(self) -> "Tensor":
        """Same values, severed from the tape."""
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad}{tag})"


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values, name: str) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def _make(values, parents, vjp) -> Tensor:
    """Create an op output; drops tape linkage when grads are off or unused."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, _parents=tuple(parents), _vjp=vjp)
    return Tensor(values, requires_grad=False)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _fsum_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b with every entry exactly rounded (order-invariant)."""
    n, k = a.shape
    k2, m = b.shape
    out = np.empty((n, m))
    for i in range(n):
        prods = a[i][:, None] * b  # k x m, elementwise products are exact inputs to fsum
        for j in range(m):
            out[i, j] = math.fsum(prods[:, j])
    return out


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    av = a.values.T if transpose_a else a.values
    bv = b.values.T if transpose_b else b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} x {bv.shape}")
    out = _fsum_matmul(av, bv) if _EXACT_MATMUL else av @ bv

    def vjp(g):
        if a.requires_grad:
            da = g @ bv.T
            _accumulate(a, da.T if transpose_a else da)
        if b.requires_grad:
            db = av.T @ g
            _accumulate(b, db.T if transpose_b else db)

    return _make(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.values + b.values

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.values.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.values.shape))

    return _make(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.values - b.values

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.values.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.values.shape))

    return _make(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.values * b.values

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.values, a.values.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.values, b.values.shape))

    return _make(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.values * c

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, g * c)

    return _make(out, (a,), vjp)


def concat(parts: list[Tensor], axis: int = 1) -> Tensor:
    out = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.values.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(p, g[tuple(sl)])

    return _make(out, tuple(parts), vjp)


def _segment_sum(rows: np.ndarray, index: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum ``rows`` into ``n_rows`` buckets, accumulating in list order.

    Stable sort keeps same-bucket contributions in their original sequence,
    which is what makes consistently relabelled inputs bit-exact.
    """
    out = np.zeros((n_rows,) + rows.shape[1:], dtype=np.float64)
    if len(index) == 0:
        return out
    order = np.argsort(index, kind="stable")
    sorted_rows = rows[order]
    sorted_idx = index[order]
    uniq, starts = np.unique(sorted_idx, return_index=True)
    out[uniq] = np.add.reduceat(sorted_rows, starts, axis=0)
    return out


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.values.shape[0]):
        raise ShapeError("gather_rows: index out of range")
    out = a.values[index]

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, _segment_sum(g, index, a.values.shape[0]))

    return _make(out, (a,), vjp)


def scatter_add_rows(rows: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if len(index) != rows.values.shape[0]:
        raise ShapeError("scatter_add_rows: one index per row required")
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise ShapeError("scatter_add_rows: index out of range")
    out = _segment_sum(rows.values, index, n_rows)

    def vjp(g):
        if rows.requires_grad:
            _accumulate(rows, g[index])

    return _make(out, (rows,), vjp)


def row_softmax(a: Tensor) -> Tensor:
    if a.values.ndim != 2 or a.values.shape[1] == 0:
        raise ShapeError(f"row_softmax: need a 2-d tensor with nonempty rows, got {a.values.shape}")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        if a.requires_grad:
            inner = (g * out).sum(axis=1, keepdims=True)
            _accumulate(a, (g - inner) * out)

    return _make(out, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.values
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gain.values + bias.values

    def vjp(g):
        if bias.requires_grad:
            _accumulate(bias, _unbroadcast(g, bias.values.shape))
        if gain.requires_grad:
            _accumulate(gain, _unbroadcast(g * xhat, gain.values.shape))
        if a.requires_grad:
            gx = g * gain.values
            m1 = gx.mean(axis=1, keepdims=True)
            m2 = (gx * xhat).mean(axis=1, keepdims=True)
            _accumulate(a, inv * (gx - m1 - xhat * m2))

    return _make(out, (a, gain, bias), vjp)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.values, 0.0)

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, g * (a.values > 0.0))

    return _make(out, (a,), vjp)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.values
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def vjp(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
            _accumulate(a, g * (cdf + x * pdf))

    return _make(out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, g * out)

    return _make(out, (a,), vjp)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    out = np.maximum(a.values, floor)

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, g * (a.values > floor))

    return _make(out, (a,), vjp)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.values

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, -g * out * out)

    return _make(out, (a,), vjp)


def row_norm(a: Tensor) -> Tensor:
    """Per-row Euclidean norm, shape (n, 1). Zero rows get zero gradient."""
    x = a.values
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))

    def vjp(g):
        if a.requires_grad:
            safe = np.where(norms > 0.0, norms, 1.0)
            _accumulate(a, g * x / safe)

    return _make(norms, (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.values.sum())

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, np.broadcast_to(g, a.values.shape).astype(np.float64))

    return _make(out, (a,), vjp)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all entries of the squared difference."""
    if a.values.shape != b.values.shape:
        raise ShapeError(f"mse: shapes differ {a.values.shape} vs {b.values.shape}")
    diff = a.values - b.values
    n = diff.size
    out = np.asarray((diff * diff).sum() / n)

    def vjp(g):
        base = (2.0 / n) * diff * g
        if a.requires_grad:
            _accumulate(a, base)
        if b.requires_grad:
            _accumulate(b, -base)

    return _make(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss into every requires_grad ancestor."""
    if loss.values.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.values.shape}")
    if not loss.requires_grad:
        raise ConfigError("backward: loss is not connected to any parameter")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    _accumulate(loss, np.ones_like(loss.values))
    for node in reversed(topo):
        if node._vjp is not None:
            node._vjp(node.grad)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class CosineSchedule:
    """Cosine decay from ``base_lr`` at step 0 to ``floor_lr`` at ``total_steps``."""

    base_lr: float
    total_steps: int
    floor_lr: float = 0.0

    def lr_at(self, step: int) -> float:
        if self.total_steps <= 0:
            return self.base_lr
        frac = min(step, self.total_steps) / self.total_steps
        return self.floor_lr + 0.5 * (self.base_lr - self.floor_lr) * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimState:
    """AdamW state: first/second moments keyed like the parameter dict."""

    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: CosineSchedule | None = None
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        if self.schedule is None:
            return self.base_lr
        return self.schedule.lr_at(self.step)


def reset_grads(params: dict[str, Tensor]):
    for p in params.values():
        p.zero_grad()


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


def adamw_step(params: dict[str, Tensor], opt: OptimState):
    """Decoupled-weight-decay Adam update, lr from the cosine schedule."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ConfigError(f"adamw_step: missing grads for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    lr = opt.current_lr()
    opt.step += 1
    t = opt.step
    b1, b2 = opt.beta1, opt.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p.values)
            opt.v[name] = np.zeros_like(p.values)
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bias1
        vhat = v / bias2
        p.values -= lr * (mhat / (np.sqrt(vhat) + opt.eps) + opt.weight_decay * p.values)
