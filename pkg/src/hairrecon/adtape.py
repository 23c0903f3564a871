"""Reverse-mode automatic differentiation on a flat tape.

Every fitted loss in this package is recorded on a :class:`Tape` holding
numpy-array-valued nodes (scalars are 0-d arrays).  The tape is cleared and
rebuilt on every optimization iteration; there are no persistent graphs.

Numeric width is a tape property: float64 for verification (all gradient
checks run in 64-bit), float32 for fitting.

Subgradient conventions for the non-smooth primitives, fixed here and relied
on by the losses:
  * clamp / relu / minimum / maximum pass gradient 0 where the bound is active,
  * indicator-style gates (``where`` with a constant mask, gather selections)
    are treated as constants of the forward pass,
  * ``absolute`` uses gradient 0 at 0 (np.sign's convention).
"""
from __future__ import annotations

import numpy as np

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Append-only record of operations; parents always precede children."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.values: list[Array] = []
        self.ops: list[str] = []
        self.parents: list[list] = []  # per node: [(parent index, vjp), ...]

    def __len__(self):
        return len(self.values)

    def _record(self, op: str, value: Array, parents: list) -> "Var":
        self.values.append(np.asarray(value, dtype=self.dtype))
        self.ops.append(op)
        self.parents.append(parents)
        return Var(self, len(self.values) - 1)

    def leaf(self, value) -> "Var":
        """A differentiable input node."""
        return self._record("leaf", np.asarray(value, dtype=self.dtype), [])

    def backward(self, root: "Var") -> list:
        """Gradient of the scalar `root` w.r.t. every node.

        Returns a list indexed by node id; entries are arrays shaped like the
        node values.  Nodes not on a path to the root get exact zeros.
        Idempotent: the tape is not mutated.
        """
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.value.size != 1:
            raise ValueError("backward root must be scalar-valued")
        n = root.index + 1
        adjoint: list = [None] * len(self.values)
        adjoint[root.index] = np.ones_like(self.values[root.index])
        for i in range(n - 1, -1, -1):
            g = adjoint[i]
            if g is None:
                continue
            for parent_index, vjp in self.parents[i]:
                contrib = vjp(g)
                if adjoint[parent_index] is None:
                    adjoint[parent_index] = np.array(contrib, dtype=self.dtype)
                else:
                    adjoint[parent_index] = adjoint[parent_index] + contrib
        return [
            adjoint[i] if adjoint[i] is not None else np.zeros_like(self.values[i])
            for i in range(len(self.values))
        ]


class Var:
    """Handle to one tape node (the node id is the VarId)."""

    __slots__ = ("tape", "index")

    # make numpy defer to the reflected operators instead of building
    # object arrays for expressions like `ndarray - Var`
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> Array:
        return self.tape.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _as_value(x, tape: Tape) -> Array:
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=tape.dtype)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise TypeError("at least one operand must be a Var")


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    tape = _tape_of(a, b)
    av, bv = _as_value(a, tape), _as_value(b, tape)
    parents = []
    if isinstance(a, Var):
        parents.append((a.index, lambda g, s=av.shape: _unbroadcast(g, s)))
    if isinstance(b, Var):
        parents.append((b.index, lambda g, s=bv.shape: _unbroadcast(g, s)))
    return tape._record("add", av + bv, parents)


def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = _as_value(a, tape), _as_value(b, tape)
    parents = []
    if isinstance(a, Var):
        parents.append((a.index, lambda g, s=av.shape: _unbroadcast(g, s)))
    if isinstance(b, Var):
        parents.append((b.index, lambda g, s=bv.shape: _unbroadcast(-g, s)))
    return tape._record("sub", av - bv, parents)


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = _as_value(a, tape), _as_value(b, tape)
    parents = []
    if isinstance(a, Var):
        parents.append((a.index, lambda g: _unbroadcast(g * bv, av.shape)))
    if isinstance(b, Var):
        parents.append((b.index, lambda g: _unbroadcast(g * av, bv.shape)))
    return tape._record("mul", av * bv, parents)


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = _as_value(a, tape), _as_value(b, tape)
    out = av / bv
    parents = []
    if isinstance(a, Var):
        parents.append((a.index, lambda g: _unbroadcast(g / bv, av.shape)))
    if isinstance(b, Var):
        parents.append((b.index, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)))
    return tape._record("div", out, parents)


def neg(a: Var):
    return a.tape._record("neg", -a.value, [(a.index, lambda g: -g)])


def power(a: Var, p: float):
    """Elementwise power with a constant exponent."""
    av = a.value
    out = av ** p
    return a.tape._record("pow", out, [(a.index, lambda g: g * p * av ** (p - 1))])


# ---------------------------------------------------------------------------
# elementwise transcendentals

def sin(a: Var):
    av = a.value
    return a.tape._record("sin", np.sin(av), [(a.index, lambda g: g * np.cos(av))])


def cos(a: Var):
    av = a.value
    return a.tape._record("cos", np.cos(av), [(a.index, lambda g: -g * np.sin(av))])


def exp(a: Var):
    out = np.exp(a.value)
    return a.tape._record("exp", out, [(a.index, lambda g: g * out)])


def log(a: Var):
    av = a.value
    return a.tape._record("log", np.log(av), [(a.index, lambda g: g / av)])


def log1p(a: Var):
    av = a.value
    return a.tape._record("log1p", np.log1p(av), [(a.index, lambda g: g / (1.0 + av))])


def sqrt(a: Var):
    out = np.sqrt(a.value)
    return a.tape._record("sqrt", out, [(a.index, lambda g: g * 0.5 / out)])


def tanh(a: Var):
    out = np.tanh(a.value)
    return a.tape._record("tanh", out, [(a.index, lambda g: g * (1.0 - out * out))])


def sigmoid(a: Var):
    # overflow-safe logistic
    av = a.value
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    e = np.exp(av[~pos])
    out[~pos] = e / (1.0 + e)
    return a.tape._record("sigmoid", out, [(a.index, lambda g: g * out * (1.0 - out))])


def absolute(a: Var):
    av = a.value
    # np.sign(0) = 0: the documented subgradient at the kink
    return a.tape._record("abs", np.abs(av), [(a.index, lambda g: g * np.sign(av))])


def atan2(y, x):
    tape = _tape_of(y, x)
    yv, xv = _as_value(y, tape), _as_value(x, tape)
    denom = xv * xv + yv * yv
    parents = []
    if isinstance(y, Var):
        parents.append((y.index, lambda g: _unbroadcast(g * xv / denom, yv.shape)))
    if isinstance(x, Var):
        parents.append((x.index, lambda g: _unbroadcast(-g * yv / denom, xv.shape)))
    return tape._record("atan2", np.arctan2(yv, xv), parents)


# ---------------------------------------------------------------------------
# clamping family (gradient 0 where the bound is active)

def relu(a: Var):
    av = a.value
    gate = (av > 0).astype(a.tape.dtype)
    return a.tape._record("relu", av * gate, [(a.index, lambda g: g * gate)])


def clamp(a: Var, lo=None, hi=None):
    av = a.value
    out = np.clip(av, lo, hi)
    gate = np.ones_like(av)
    if lo is not None:
        gate *= av > lo
    if hi is not None:
        gate *= av < hi
    return a.tape._record("clamp", out, [(a.index, lambda g: g * gate)])


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first argument."""
    tape = _tape_of(a, b)
    av, bv = _as_value(a, tape), _as_value(b, tape)
    take_a = av >= bv
    parents = []
    if isinstance(a, Var):
        parents.append((a.index, lambda g: _unbroadcast(g * take_a, av.shape)))
    if isinstance(b, Var):
        parents.append((b.index, lambda g: _unbroadcast(g * ~take_a, bv.shape)))
    return tape._record("maximum", np.maximum(av, bv), parents)


def minimum(a, b):
    tape = _tape_of(a, b)
    av, bv = _as_value(a, tape), _as_value(b, tape)
    take_a = av <= bv
    parents = []
    if isinstance(a, Var):
        parents.append((a.index, lambda g: _unbroadcast(g * take_a, av.shape)))
    if isinstance(b, Var):
        parents.append((b.index, lambda g: _unbroadcast(g * ~take_a, bv.shape)))
    return tape._record("minimum", np.minimum(av, bv), parents)


def where(mask, a, b):
    """Select by a constant boolean mask (an indicator gate, not differentiated)."""
    tape = _tape_of(a, b)
    mask = np.asarray(mask, dtype=bool)
    av, bv = _as_value(a, tape), _as_value(b, tape)
    parents = []
    if isinstance(a, Var):
        parents.append((a.index, lambda g: _unbroadcast(g * mask, av.shape)))
    if isinstance(b, Var):
        parents.append((b.index, lambda g: _unbroadcast(g * ~mask, bv.shape)))
    return tape._record("where", np.where(mask, av, bv), parents)


def smooth_min(a, b, k: float = 8.0):
    """Soft minimum -log(exp(-k a) + exp(-k b))/k (smooth everywhere)."""
    am = minimum(a, b)  # subtract the true min for overflow safety
    ea = exp(mul(sub(a, am), -k))
    eb = exp(mul(sub(b, am), -k))
    return sub(am, div(log(add(ea, eb)), k))


# ---------------------------------------------------------------------------
# shape & indexing

def reshape(a: Var, shape):
    old = a.value.shape
    return a.tape._record(
        "reshape", a.value.reshape(shape), [(a.index, lambda g: g.reshape(old))]
    )


def moveaxis(a: Var, src, dst):
    def vjp(g):
        return np.moveaxis(g, dst, src)

    return a.tape._record("moveaxis", np.moveaxis(a.value, src, dst), [(a.index, vjp)])


def getitem(a: Var, key):
    """Basic or integer-array indexing; backward scatter-adds."""
    av = a.value
    out = av[key]

    def vjp(g):
        acc = np.zeros_like(av)
        np.add.at(acc, key, g)
        return acc

    return a.tape._record("getitem", out, [(a.index, vjp)])


def gather(a: Var, idx, axis: int = 0):
    """Take rows along `axis` with an integer index array (constant gate)."""
    idx = np.asarray(idx)
    av = a.value
    out = np.take(av, idx, axis=axis)

    def vjp(g):
        acc = np.zeros_like(av)
        np.add.at(acc, (slice(None),) * axis + (idx,), g)
        return acc

    return a.tape._record("gather", out, [(a.index, vjp)])


def concatenate(parts: list, axis: int = 0):
    tape = _tape_of(*parts)
    vals = [_as_value(p, tape) for p in parts]
    sizes = [v.shape[axis] for v in vals]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    parents = []
    for p, off, size in zip(parts, offsets[:-1], sizes):
        if isinstance(p, Var):
            sl = (slice(None),) * (axis % vals[0].ndim) + (slice(off, off + size),)
            parents.append((p.index, lambda g, sl=sl: g[sl]))
    return tape._record("concat", np.concatenate(vals, axis=axis), parents)


def stack(parts: list, axis: int = 0):
    tape = _tape_of(*parts)
    vals = [_as_value(p, tape) for p in parts]
    parents = []
    for i, p in enumerate(parts):
        if isinstance(p, Var):
            parents.append((p.index, lambda g, i=i: np.take(g, i, axis=axis)))
    return tape._record("stack", np.stack(vals, axis=axis), parents)


# ---------------------------------------------------------------------------
# reductions & scans

def sum_(a: Var, axis=None, keepdims: bool = False):
    av = a.value

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, av.shape).copy()

    return a.tape._record("sum", av.sum(axis=axis, keepdims=keepdims), [(a.index, vjp)])


def mean(a: Var, axis=None, keepdims: bool = False):
    av = a.value
    if axis is None:
        count = av.size
    elif isinstance(axis, tuple):
        count = int(np.prod([av.shape[i] for i in axis]))
    else:
        count = av.shape[axis]
    s = sum_(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


def dot(a, b):
    """Inner product of identically-shaped arrays."""
    return sum_(mul(a, b))


def matmul(a, b):
    """Matrix product; supports (..,m,k) @ (k,n) and (m,k) @ (k,)."""
    tape = _tape_of(a, b)
    av, bv = _as_value(a, tape), _as_value(b, tape)
    out = av @ bv
    parents = []
    if isinstance(a, Var):
        def vjp_a(g):
            if bv.ndim == 1:
                return np.multiply.outer(g, bv).reshape(av.shape)
            return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

        parents.append((a.index, vjp_a))
    if isinstance(b, Var):
        def vjp_b(g):
            if bv.ndim == 1:
                return np.tensordot(av, g, axes=(tuple(range(av.ndim - 1)),) * 2) \
                    if av.ndim > 1 else av * g
            ga = np.swapaxes(av, -1, -2) @ g if g.ndim > 1 else np.outer(av, g)
            return _unbroadcast(ga, bv.shape)

        parents.append((b.index, vjp_b))
    return tape._record("matmul", out, parents)


def cumsum(a: Var, axis: int = -1):
    av = a.value

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return a.tape._record("cumsum", np.cumsum(av, axis=axis), [(a.index, vjp)])


def cumprod_exclusive(a: Var, axis: int = -1):
    """T_i = prod_{j<i} a_j along `axis` (T_0 = 1).

    Backward divides by the inputs; callers keep inputs bounded away from 0
    (the compositing path adds its epsilon before calling).
    """
    av = a.value
    cp = np.cumprod(av, axis=axis)
    ones_shape = list(av.shape)
    ones_shape[axis] = 1
    ones = np.ones(ones_shape, dtype=av.dtype)
    sl_drop_last = [slice(None)] * av.ndim
    sl_drop_last[axis] = slice(None, -1)
    out = np.concatenate([ones, cp[tuple(sl_drop_last)]], axis=axis)

    def vjp(g):
        # dL/da_j = sum_{i>j} g_i T_i / a_j
        gy = g * out
        rev = np.flip(np.cumsum(np.flip(gy, axis=axis), axis=axis), axis=axis)
        # shift left: sum over strictly larger i
        sl_drop_first = [slice(None)] * av.ndim
        sl_drop_first[axis] = slice(1, None)
        tail = np.concatenate(
            [rev[tuple(sl_drop_first)], np.zeros(ones_shape, dtype=av.dtype)], axis=axis
        )
        return tail / av

    return a.tape._record("cumprod_excl", out, [(a.index, vjp)])


def segment_sum(a: Var, seg: Array, num_segments: int):
    """Sum entries of `a` (first axis) into `num_segments` buckets."""
    seg = np.asarray(seg)
    av = a.value
    out = np.zeros((num_segments,) + av.shape[1:], dtype=av.dtype)
    np.add.at(out, seg, av)

    def vjp(g):
        return g[seg]

    return a.tape._record("segsum", out, [(a.index, vjp)])


# ---------------------------------------------------------------------------
# small-net primitives (reference codec / denoiser)

def conv1d(x: Var, w, b=None, stride: int = 1):
    """x: (B, C, L), w: (O, C, K) -> (B, O, Lo). Valid padding."""
    tape = x.tape
    xv = x.value
    wv = _as_value(w, tape)
    B, C, L = xv.shape
    O, _, K = wv.shape
    Lo = (L - K) // stride + 1
    cols = np.lib.stride_tricks.sliding_window_view(xv, K, axis=2)[:, :, ::stride, :]
    # cols: (B, C, Lo, K)
    out = np.einsum("bclk,ock->bol", cols, wv, optimize=True)
    parents = []

    def vjp_x(g):
        gx = np.zeros_like(xv)
        gcols = np.einsum("bol,ock->bclk", g, wv, optimize=True)
        for i in range(Lo):
            gx[:, :, i * stride:i * stride + K] += gcols[:, :, i, :]
        return gx

    parents.append((x.index, vjp_x))
    if isinstance(w, Var):
        parents.append(
            (w.index, lambda g: np.einsum("bol,bclk->ock", g, cols, optimize=True))
        )
    out_var = tape._record("conv1d", out, parents)
    if b is not None:
        out_var = add(out_var, reshape(b, (1, O, 1)) if isinstance(b, Var) else
                      np.reshape(_as_value(b, tape), (1, O, 1)))
    return out_var


def conv2d(x: Var, w, b=None, stride: int = 1, pad: int = 0):
    """x: (B, C, H, W), w: (O, C, Kh, Kw) -> (B, O, Ho, Wo)."""
    tape = x.tape
    xv = x.value
    wv = _as_value(w, tape)
    if pad:
        xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = xv
    B, C, H, W = xp.shape
    O, _, Kh, Kw = wv.shape
    Ho = (H - Kh) // stride + 1
    Wo = (W - Kw) // stride + 1
    cols = np.lib.stride_tricks.sliding_window_view(xp, (Kh, Kw), axis=(2, 3))
    cols = cols[:, :, ::stride, ::stride, :, :]  # (B, C, Ho, Wo, Kh, Kw)
    out = np.einsum("bchwij,ocij->bohw", cols, wv, optimize=True)
    parents = []

    def vjp_x(g):
        gxp = np.zeros_like(xp)
        gcols = np.einsum("bohw,ocij->bchwij", g, wv, optimize=True)
        for i in range(Ho):
            for j in range(Wo):
                gxp[:, :, i * stride:i * stride + Kh, j * stride:j * stride + Kw] += \
                    gcols[:, :, i, j, :, :]
        if pad:
            return gxp[:, :, pad:-pad, pad:-pad]
        return gxp

    parents.append((x.index, vjp_x))
    if isinstance(w, Var):
        parents.append(
            (w.index, lambda g: np.einsum("bohw,bchwij->ocij", g, cols, optimize=True))
        )
    out_var = tape._record("conv2d", out, parents)
    if b is not None:
        bb = b if isinstance(b, Var) else _as_value(b, tape)
        out_var = add(out_var, reshape(bb, (1, O, 1, 1)) if isinstance(bb, Var)
                      else np.reshape(bb, (1, O, 1, 1)))
    return out_var


def upsample2_nearest(x: Var):
    """Nearest-neighbor 2x upsampling of (B, C, H, W)."""
    xv = x.value

    def vjp(g):
        B, C, H2, W2 = g.shape
        return g.reshape(B, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5))

    out = np.repeat(np.repeat(xv, 2, axis=2), 2, axis=3)
    return x.tape._record("up2", out, [(x.index, vjp)])
