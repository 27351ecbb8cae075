"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Every tracked tensor belongs to exactly one :class:`Tape`. Tapes are cheap and
meant to be created per training step and per network component, so gradient
flow never crosses a component boundary unless the caller wires it that way.

    tape = Tape()
    x = tape.watch(np.array([1.0, 2.0, 3.0]))
    y = ad.sum(x * x)
    tape.backward(y)
    tape.grad(x)        # array([2., 4., 6.])
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "ShapeError",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "exp",
    "log",
    "relu",
    "leaky_relu",
    "tanh",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "l2_normalize",
    "log_sum_exp",
    "conv2d",
    "as_tensor",
    "detach",
    "finite_diff_check",
    "inject_vjp",
]

LEAKY_SLOPE = 0.01


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


# debug hook: op kind -> replacement vjp(g, needs, input_datas, out) for mutation tests
_VJP_OVERRIDES: dict[str, Callable] = {}


@contextlib.contextmanager
def inject_vjp(kind: str, fn: Callable) -> Iterator[None]:
    """Temporarily replace the backward rule of op ``kind`` (fault injection)."""
    prev = _VJP_OVERRIDES.get(kind)
    _VJP_OVERRIDES[kind] = fn
    try:
        yield
    finally:
        if prev is None:
            _VJP_OVERRIDES.pop(kind, None)
        else:
            _VJP_OVERRIDES[kind] = prev


@dataclass
class _Node:
    kind: str
    inputs: tuple  # node ids; None for untracked inputs
    vjp: Optional[Callable]  # g -> tuple of input grads (None where not needed)


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Optional["Tape"] = None, node: Optional[int] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Append-only record of ops plus lazily allocated gradient buffers."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, np.ndarray] = {}
        self._params: dict[int, object] = {}
        self._param_nodes: dict[int, int] = {}  # id(param) -> node id

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value, param=None) -> Tensor:
        """Register a leaf. ``param`` tags the leaf with a model parameter."""
        if isinstance(value, Tensor):
            value = value.data
        node = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None))
        if param is not None:
            self._params[node] = param
            self._param_nodes[id(param)] = node
        return Tensor(value, self, node)

    def param(self, p) -> Tensor:
        """Leaf for a parameter object with a ``.value`` array, watched once per tape."""
        node = self._param_nodes.get(id(p))
        if node is not None:
            return Tensor(p.value, self, node)
        return self.watch(p.value, param=p)

    def record(self, kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: Callable) -> Tensor:
        ids = tuple(t.node if t.tracked else None for t in inputs)
        node = len(self.nodes)
        self.nodes.append(_Node(kind, ids, vjp))
        return Tensor(out, self, node)

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        if root.tape is not self:
            raise ValueError("root tensor is not recorded on this tape")
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        self.grads = {root.node: np.ones_like(root.data)}
        for nid in range(root.node, -1, -1):
            g = self.grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.vjp is None:
                continue
            needs = tuple(i is not None for i in node.inputs)
            in_grads = node.vjp(g, needs)
            for i, gi in zip(node.inputs, in_grads):
                if i is None or gi is None:
                    continue
                buf = self.grads.get(i)
                if buf is None:
                    self.grads[i] = np.array(gi, dtype=np.float64, copy=True)
                else:
                    buf += gi
        return self.grads

    def grad(self, t: Tensor) -> Optional[np.ndarray]:
        if t.tape is not self:
            return None
        return self.grads.get(t.node)

    def param_grads(self) -> dict:
        """Gradient buffers that exist for tagged parameters, keyed by parameter."""
        return {p: self.grads[n] for n, p in self._params.items() if n in self.grads}

    def params(self) -> list:
        return list(self._params.values())

    def depth(self, root: Tensor) -> int:
        """Longest chain of recorded ops from ``root`` back to any leaf."""
        d: dict[int, int] = {}
        for nid in range(root.node + 1):
            node = self.nodes[nid]
            ins = [d[i] for i in node.inputs if i is not None]
            d[nid] = 0 if node.kind == "leaf" else 1 + max(ins, default=0)
        return d[root.node]


# ---------------------------------------------------------------------------
# op plumbing


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor) -> Optional[Tape]:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("inputs are recorded on different tapes")
            tape = t.tape
    return tape


def _finite(out: np.ndarray, kind: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind} produced a non-finite value")
    return out


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: Callable) -> Tensor:
    out = _finite(out, kind)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    override = _VJP_OVERRIDES.get(kind)
    if override is not None:
        datas = [t.data for t in inputs]
        vjp = lambda g, needs, _o=override, _d=datas, _out=out: _o(g, needs, _d, _out)  # noqa: E731
    return tape.record(kind, inputs, out, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _emit("add", (a, b), a.data + b.data, vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                -_unbroadcast(g, sb) if needs[1] else None)

    return _emit("sub", (a, b), a.data - b.data, vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    da, db = a.data, b.data

    def vjp(g, needs):
        return (_unbroadcast(g * db, da.shape) if needs[0] else None,
                _unbroadcast(g * da, db.shape) if needs[1] else None)

    return _emit("mul", (a, b), da * db, vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit("scale", (a,), a.data * c, lambda g, needs: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g, needs: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    d = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(d)
    return _emit("log", (a,), out, lambda g, needs: (g / d,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # relu'(0) = 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g, needs: (g * mask,))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    d = a.data
    factor = np.where(d > 0, 1.0, slope)
    return _emit("leaky_relu", (a,), d * factor, lambda g, needs: (g * factor,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g, needs: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    da, db = a.data, b.data

    def vjp(g, needs):
        return (g @ db.T if needs[0] else None, da.T @ g if needs[1] else None)

    return _emit("matmul", (a, b), da @ db, vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _emit("transpose", (a,), a.data.T, lambda g, needs: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _emit("reshape", (a,), out, lambda g, needs: (g.reshape(src),))


def sum(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _emit("sum", (a,), np.asarray(out), vjp)


def mean(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def l2_normalize(a, eps: Optional[float] = None) -> Tensor:
    """Scale each row of a matrix to unit Euclidean norm.

    By default a zero row is an error. With ``eps`` the norm is clamped to at
    least ``eps`` instead (rows below it are scaled by the constant ``1/eps``).
    """
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"l2_normalize expects a matrix, got shape {a.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", a.data, a.data))
    if eps is None:
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise ValueError(f"l2_normalize: row {int(zero[0])} has zero norm")
        clamped = np.zeros(norms.shape, dtype=bool)
    else:
        clamped = norms < eps
        norms = np.maximum(norms, eps)
    out = a.data / norms[:, None]

    def vjp(g, needs):
        dot = np.where(clamped, 0.0, np.einsum("ij,ij->i", g, out))
        return ((g - out * dot[:, None]) / norms[:, None],)

    return _emit("l2_normalize", (a,), out, vjp)


def log_sum_exp(a, axis: int = -1, keepdims: bool = False, where=None) -> Tensor:
    """``log(sum(exp(a)))`` along ``axis`` using the max-shifted form.

    ``where`` is an optional boolean mask; excluded entries do not enter the
    sum and receive zero gradient. Every slice must keep at least one entry.
    """
    a = as_tensor(a)
    d = a.data
    mask = np.ones(d.shape, dtype=bool) if where is None else np.broadcast_to(np.asarray(where, dtype=bool), d.shape)
    if not np.all(mask.any(axis=axis)):
        raise ValueError("log_sum_exp: a slice has every entry masked out")
    shift = np.max(np.where(mask, d, -np.inf), axis=axis, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, d - shift, 0.0)), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = shift + np.log(s)
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _emit("log_sum_exp", (a,), out, vjp)


def conv2d(x, w, b=None) -> Tensor:
    """Stride-1, zero-padded ("same") cross-correlation with odd square kernels.

    x: batch x in_ch x h x w, w: out_ch x in_ch x k x k, b: out_ch.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernels, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    if ic != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernels expect {ic}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd and square, got {kh}x{kw}")
    p = kh // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n,c,h,w,kh,kw
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3]))  # n,h,w,oc
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (oc,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({oc},)")
        out = out + b.data[None, :, None, None]
        inputs.append(b)
    wdat = w.data

    def vjp(g, needs):
        gx = gw = gb = None
        if needs[1]:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # oc,c,kh,kw
        if needs[0]:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + h, j:j + wd] += np.tensordot(g, wdat[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + wd]
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    return _emit("conv2d", inputs, out, vjp)


def detach(t) -> Tensor:
    """Same values, no tape linkage: nothing downstream can send gradient back."""
    t = as_tensor(t)
    return Tensor(t.data)


# ---------------------------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    tape = Tape()
    xt = tape.watch(x0)
    out = f(xt)
    if out.data.size != 1:
        raise ShapeError(f"finite_diff_check: f must return a scalar, got shape {out.shape}")
    if out.tracked:
        tape.backward(out)
    analytic = tape.grad(xt)
    if analytic is None:
        analytic = np.zeros_like(x0)
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x0)).item()
        flat[i] = orig - h
        fm = f(Tensor(x0)).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
