"""Dense float64 tensors with reverse-mode automatic differentiation.

Every model component in this package is built from the primitives below.
Tensors wrap row-major numpy arrays; operations record a backward closure so
that ``backward(loss)`` can accumulate gradients into the leaves by reverse
topological sweep.  Gradient accumulation is additive: callers zero grads
explicitly between steps.

A global multiply-accumulate tally is incremented by every ``matmul`` (the
only primitive that performs MACs), so analytic complexity formulas can be
checked against instrumented forward passes exactly.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True
_MAC_COUNT = 0
_NEXT_ID = 0

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def mac_count() -> int:
    """Running tally of matmul multiply-accumulates since the last reset."""
    return _MAC_COUNT


def reset_mac_count() -> None:
    global _MAC_COUNT
    _MAC_COUNT = 0


@contextmanager
def no_grad():
    """Disable graph recording (forward values only) inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense float64 array that may participate in the backward graph."""

    __slots__ = ("data", "requires_grad", "grad", "retains_grad", "_parents",
                 "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        global _NEXT_ID
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.retains_grad = False
        self._parents = ()
        self._backward = None
        _NEXT_ID += 1
        self._id = _NEXT_ID

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def retain_grad(self) -> "Tensor":
        self.retains_grad = True
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the module-level functions do the real work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __abs__(self):
        return absolute(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _wrap(data: np.ndarray) -> Tensor:
    global _NEXT_ID
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.grad = None
    t.retains_grad = False
    t._parents = ()
    t._backward = None
    _NEXT_ID += 1
    t._id = _NEXT_ID
    return t


def _node(data: np.ndarray, parents, backward_fn) -> Tensor:
    t = _wrap(data)
    t.requires_grad = True
    t._parents = parents
    t._backward = backward_fn
    return t


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return _wrap(np.asarray(x, dtype=np.float64))


# hooks for fused operations defined in other modules
def constant(data) -> Tensor:
    """Wrap an ndarray as a graph constant (no copy, no gradient)."""
    return _wrap(data)


def node(data, parents, backward_fn) -> Tensor:
    """Create a graph node for a custom fused operation.

    ``backward_fn`` receives the output adjoint and must return one adjoint
    (or None) per parent, in order.
    """
    return _node(data, tuple(parents), backward_fn)


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class RngState:
    """Seeded random stream: identical seed and call sequence give identical draws."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.seed, self.stream)))
        )

    def fork(self) -> "RngState":
        """Derive an independent child stream, consuming one draw."""
        return RngState(int(self._gen.integers(0, 2**63)), self.stream + 1)

    def uniform(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# backward engine


def backward(loss: Tensor) -> None:
    """Reverse-accumulate gradients of a scalar loss into graph leaves.

    Leaf tensors with ``requires_grad`` (and intermediates flagged via
    ``retain_grad``) receive additive updates to ``.grad``; calling twice
    without zeroing doubles every gradient.  Nodes are processed in reverse
    creation order, which is a valid topological order because every node is
    created after its parents.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")

    interior = []
    leaves = []
    visited = set()
    stack = [loss]
    while stack:
        n = stack.pop()
        nid = id(n)
        if nid in visited:
            continue
        visited.add(nid)
        if n._backward is None:
            leaves.append(n)
        else:
            interior.append(n)
            for p in n._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append(p)
    interior.sort(key=lambda n: n._id, reverse=True)

    adjoint = {loss: np.ones_like(loss.data)}
    for n in interior:
        g = adjoint.pop(n, None)
        if g is None:
            continue
        if n.retains_grad:
            n.grad = g if n.grad is None else n.grad + g
        for parent, pg in zip(n._parents, n._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent in adjoint:
                adjoint[parent] = adjoint[parent] + pg
            else:
                adjoint[parent] = pg
    for leaf in leaves:
        g = adjoint.pop(leaf, None)
        if g is not None:
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    out = a.data + b.data
    if not (_GRAD_ENABLED and (a.requires_grad or b.requires_grad)):
        return _wrap(out)

    def bw(g, ash=a.data.shape, bsh=b.data.shape):
        return (_unbroadcast(g, ash) if a.requires_grad else None,
                _unbroadcast(g, bsh) if b.requires_grad else None)

    return _node(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    out = a.data - b.data
    if not (_GRAD_ENABLED and (a.requires_grad or b.requires_grad)):
        return _wrap(out)

    def bw(g, ash=a.data.shape, bsh=b.data.shape):
        return (_unbroadcast(g, ash) if a.requires_grad else None,
                _unbroadcast(-g, bsh) if b.requires_grad else None)

    return _node(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    out = a.data * b.data
    if not (_GRAD_ENABLED and (a.requires_grad or b.requires_grad)):
        return _wrap(out)

    def bw(g, ad=a.data, bd=b.data):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _node(out, (a, b), bw)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    out = a.data / b.data
    if not (_GRAD_ENABLED and (a.requires_grad or b.requires_grad)):
        return _wrap(out)

    def bw(g, ad=a.data, bd=b.data):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return (ga, gb)

    return _node(out, (a, b), bw)


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    out = x.data * factor
    if not (_GRAD_ENABLED and x.requires_grad):
        return _wrap(out)

    def bw(g):
        return (g * factor,)

    return _node(out, (x,), bw)


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    global _MAC_COUNT
    _MAC_COUNT += a.data.shape[0] * a.data.shape[1] * b.data.shape[1]
    out = a.data @ b.data
    if not (_GRAD_ENABLED and (a.requires_grad or b.requires_grad)):
        return _wrap(out)

    def bw(g, ad=a.data, bd=b.data):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _node(out, (a, b), bw)


def vecmat(x, w) -> Tensor:
    """1-D vector times matrix: (k,) @ (k, n) -> (n,)."""
    x = as_tensor(x)
    w = as_tensor(w)
    if x.data.ndim != 1 or w.data.ndim != 2:
        raise ValueError("vecmat expects a vector and a matrix")
    global _MAC_COUNT
    _MAC_COUNT += w.data.shape[0] * w.data.shape[1]
    out = x.data @ w.data
    if not (_GRAD_ENABLED and (x.requires_grad or w.requires_grad)):
        return _wrap(out)

    def bw(g, xd=x.data, wd=w.data):
        return (wd @ g if x.requires_grad else None,
                np.outer(xd, g) if w.requires_grad else None)

    return _node(out, (x, w), bw)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError("transpose expects a 2-D operand")
    out = x.data.T
    if not (_GRAD_ENABLED and x.requires_grad):
        return _wrap(out)

    def bw(g):
        return (g.T,)

    return _node(out, (x,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    if not (_GRAD_ENABLED and x.requires_grad):
        return _wrap(out)

    def bw(g, orig=x.data.shape):
        return (g.reshape(orig),)

    return _node(out, (x,), bw)


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    out = x.data[key]
    if not (_GRAD_ENABLED and x.requires_grad):
        return _wrap(out)

    def bw(g, shape=x.data.shape, key=key):
        gx = np.zeros(shape)
        gx[key] += g
        return (gx,)

    return _node(out, (x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    if not (_GRAD_ENABLED and any(t.requires_grad for t in tensors)):
        return _wrap(out)
    extents = [t.data.shape[axis] for t in tensors]

    def bw(g):
        grads = []
        start = 0
        for t, n in zip(tensors, extents):
            key = [slice(None)] * g.ndim
            key[axis] = slice(start, start + n)
            grads.append(g[tuple(key)] if t.requires_grad else None)
            start += n
        return tuple(grads)

    return _node(out, tuple(tensors), bw)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    if not (_GRAD_ENABLED and x.requires_grad):
        return _wrap(out)

    def bw(g, shape=x.data.shape):
        return (_spread(g, shape, axis, keepdims),)

    return _node(out, (x,), bw)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    if not (_GRAD_ENABLED and x.requires_grad):
        return _wrap(out)
    count = x.data.size if axis is None else x.data.shape[axis]

    def bw(g, shape=x.data.shape):
        return (_spread(g, shape, axis, keepdims) / count,)

    return _node(out, (x,), bw)


def _spread(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    if not (_GRAD_ENABLED and x.requires_grad):
        return _wrap(out)

    def bw(g, o=out):
        return (g * (1.0 - o * o),)

    return _node(out, (x,), bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))
    if not (_GRAD_ENABLED and x.requires_grad):
        return _wrap(out)

    def bw(g, o=out):
        return (g * o * (1.0 - o),)

    return _node(out, (x,), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    if not (_GRAD_ENABLED and x.requires_grad):
        return _wrap(out)

    def bw(g, xd=x.data):
        return (g * (xd > 0.0),)

    return _node(out, (x,), bw)


def gelu(x) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf
    if not (_GRAD_ENABLED and x.requires_grad):
        return _wrap(out)

    def bw(g, xd=x.data, cdf=cdf):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _node(out, (x,), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    if not (_GRAD_ENABLED and x.requires_grad):
        return _wrap(out)

    def bw(g, o=out):
        return (g * o,)

    return _node(out, (x,), bw)


def log(x) -> Tensor:
    x = as_tensor(x)
    out = np.log(x.data)
    if not (_GRAD_ENABLED and x.requires_grad):
        return _wrap(out)

    def bw(g, xd=x.data):
        return (g / xd,)

    return _node(out, (x,), bw)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    if not (_GRAD_ENABLED and x.requires_grad):
        return _wrap(out)

    def bw(g, o=out):
        return (g * 0.5 / o,)

    return _node(out, (x,), bw)


def absolute(x) -> Tensor:
    x = as_tensor(x)
    out = np.abs(x.data)
    if not (_GRAD_ENABLED and x.requires_grad):
        return _wrap(out)

    def bw(g, xd=x.data):
        return (g * np.sign(xd),)

    return _node(out, (x,), bw)


def smooth_l1(x) -> Tensor:
    """Elementwise 0.5*x^2 inside the unit band, |x|-0.5 outside."""
    x = as_tensor(x)
    ax = np.abs(x.data)
    inner = ax < 1.0
    out = np.where(inner, 0.5 * x.data * x.data, ax - 0.5)
    if not (_GRAD_ENABLED and x.requires_grad):
        return _wrap(out)

    def bw(g, xd=x.data, inner=inner):
        return (g * np.where(inner, xd, np.sign(xd)),)

    return _node(out, (x,), bw)


def softmax_lastdim(x) -> Tensor:
    """Stable softmax along the last axis; rows sum to one."""
    x = as_tensor(x)
    if not np.isfinite(x.data).all():
        raise ValueError("non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    if not (_GRAD_ENABLED and x.requires_grad):
        return _wrap(out)

    def bw(g, o=out):
        dot = (g * o).sum(axis=-1, keepdims=True)
        return (o * (g - dot),)

    return _node(out, (x,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit population variance, then affine."""
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    if gamma.data.shape != x.data.shape[-1:] or beta.data.shape != x.data.shape[-1:]:
        raise ValueError("layer_norm affine parameters must match the last extent")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    width = x.data.shape[-1]
    mu = x.data.sum(axis=-1, keepdims=True) / width
    centered = x.data - mu
    var = (centered * centered).sum(axis=-1, keepdims=True) / width
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gamma.data * xhat + beta.data
    if not (_GRAD_ENABLED and (x.requires_grad or gamma.requires_grad or beta.requires_grad)):
        return _wrap(out)

    def bw(g, xhat=xhat, inv=inv, gd=gamma.data):
        ggamma = None
        gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, g.shape[-1]).sum(axis=0)
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        return (gx, ggamma, gbeta)

    return _node(out, (x, gamma, beta), bw)


def dropout(x, rate: float, rng: RngState | None, training: bool) -> Tensor:
    """Inverted dropout; identity when rate is zero or in eval mode."""
    if rate < 0.0 or rate >= 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    x = as_tensor(x)
    if rate == 0.0 or not training:
        return x
    if rng is None:
        raise ValueError("dropout with a positive rate needs an RngState")
    keep = (rng.uniform(x.data.shape) >= rate) / (1.0 - rate)
    out = x.data * keep
    if not (_GRAD_ENABLED and x.requires_grad):
        return _wrap(out)

    def bw(g, keep=keep):
        return (g * keep,)

    return _node(out, (x,), bw)


def embedding(table, ids) -> Tensor:
    """Row lookup into a (vocab, width) table; grads scatter to used rows only."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.data.shape[0]:
        raise ValueError("token id out of vocabulary range")
    out = table.data[ids]
    if not (_GRAD_ENABLED and table.requires_grad):
        return _wrap(out)

    def bw(g, shape=table.data.shape, ids=ids):
        gt = np.zeros(shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _node(out, (table,), bw)


_SG_MODE = None          # None | "record" | "replay"
_SG_QUEUE: list = []
_SG_CURSOR = 0


def stop_gradient(x) -> Tensor:
    """A constant copy of x: no gradient flows through it.

    Under ``finite_diff_check`` the values passing through here are recorded
    on the analytic pass and replayed during the perturbed passes, so the
    difference quotient measures the same directional derivative that the
    backward pass computes (a perturbation must not move a blocked branch).
    """
    global _SG_CURSOR
    x = as_tensor(x)
    if _SG_MODE == "record":
        _SG_QUEUE.append(x.data)
        return _wrap(x.data)
    if _SG_MODE == "replay":
        if _SG_CURSOR >= len(_SG_QUEUE):
            raise ValueError("stop-gradient call sequence changed between passes")
        data = _SG_QUEUE[_SG_CURSOR]
        _SG_CURSOR += 1
        return _wrap(data)
    return _wrap(x.data)


@contextmanager
def _sg_phase(mode: str):
    global _SG_MODE, _SG_CURSOR
    prev = _SG_MODE
    if mode == "record":
        _SG_QUEUE.clear()
    _SG_MODE = mode
    _SG_CURSOR = 0
    try:
        yield
    finally:
        _SG_MODE = prev


def _sg_rewind() -> None:
    global _SG_CURSOR
    _SG_CURSOR = 0


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict = field(default_factory=dict)
    worst_param: str = ""

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def finite_diff_check(f, params, h: float = 1e-5, tol: float = 1e-4,
                      names=None, max_elements: int | None = None,
                      rng: RngState | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    Tensor built from ``params``; determinism is verified by running the
    forward twice and requiring bit-identical values.  Values crossing
    ``stop_gradient`` are recorded on the analytic pass and held fixed during
    the perturbed passes, so blocked branches stay blocked in the oracle too.
    The relative error for an element is |g_ad - g_fd| / max(1, |g_ad|,
    |g_fd|); the report carries the per-parameter maximum.  ``max_elements``
    optionally subsamples large parameters (seeded by ``rng``) to bound
    runtime.
    """
    params = list(params)
    if names is None:
        names = [f"param{i}" for i in range(len(params))]

    with no_grad():
        v1 = float(f().data)
        v2 = float(f().data)
    if v1 != v2:
        raise ValueError("finite_diff_check requires a deterministic function")

    for p in params:
        p.grad = None
    with _sg_phase("record"):
        loss = f()
    backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    report = GradCheckReport(max_rel_err=0.0)
    with no_grad(), _sg_phase("replay"):
        for name, p, g_ad in zip(names, params, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            if max_elements is not None and n > max_elements:
                if rng is None:
                    idx = np.linspace(0, n - 1, max_elements).astype(int)
                else:
                    idx = np.sort(rng.permutation(n)[:max_elements])
            else:
                idx = np.arange(n)
            g_flat = g_ad.reshape(-1)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                _sg_rewind()
                up = float(f().data)
                flat[i] = orig - h
                _sg_rewind()
                down = float(f().data)
                flat[i] = orig
                g_fd = (up - down) / (2.0 * h)
                denom = max(1.0, abs(g_flat[i]), abs(g_fd))
                err = abs(g_flat[i] - g_fd) / denom
                if err > worst:
                    worst = err
            report.per_param[name] = worst
            if worst > report.max_rel_err:
                report.max_rel_err = worst
                report.worst_param = name
    return report
