"""Dense tensors with reverse-mode automatic differentiation.

Every op builds a node holding its forward value and a closure mapping the
output gradient to one gradient per parent.  ``Tensor.backward`` walks the
graph in reverse topological order and sums contributions, so a tensor used
several times receives the sum of its single-use gradients.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """Raised when an op or a backward pass produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Raised for invalid op configuration (kernel/stride/padding)."""


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. float64 for gradient checks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def _as_float_array(data, like: np.dtype | None = None) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype.kind != "f":
        arr = arr.astype(like if like is not None else _DEFAULT_DTYPE)
    return arr


class Tensor:
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = ""

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    # -- differentiation -----------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if _CHECK_FINITE and not np.all(np.isfinite(g)):
                    raise NonFiniteError(f"non-finite gradient reached a leaf of shape {node.shape}")
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    on_stack: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            on_stack.discard(id(node))
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        on_stack.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if not p.requires_grad:
                continue
            if id(p) in on_stack:
                raise RuntimeError("cycle detected in differentiation graph")
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    arr = np.asarray(x, dtype=dtype) if dtype is not None else _as_float_array(x)
    return Tensor(arr)


def _node(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    out.op = op
    if _CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def backward(g):
        return (unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(a.data / b.data, (a, b), backward, "div")


def power(x: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return _node(x.data ** exponent, (x,), backward, "pow")


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def backward(g):
        return (g * out_data,)

    return _node(out_data, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    return _node(np.log(x.data), (x,), backward, "log")


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    if not 0.0 <= alpha < 1.0:
        raise ConfigurationError(f"leaky_relu slope must lie in [0, 1), got {alpha}")
    pos = x.data >= 0
    slope = np.where(pos, 1.0, alpha).astype(x.dtype)

    def backward(g):
        return (g * slope,)

    return _node(x.data * slope, (x,), backward, "leaky_relu")


def clamp(x: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Clamped identity; gradient is 1 strictly inside ``[lo, hi]`` and 0 outside."""
    inside = ((x.data >= lo) & (x.data <= hi)).astype(x.dtype)

    def backward(g):
        return (g * inside,)

    return _node(np.clip(x.data, lo, hi), (x,), backward, "clamp")


# ---------------------------------------------------------------------------
# shape and reduction
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _node(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _node(x.data.transpose(axes), (x,), backward, "transpose")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _node(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), backward, "mean")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; the last two axes multiply, leading axes are batch axes."""
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), backward, "log_softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis``, then scale by gamma and shift by beta."""
    axis = axis % x.ndim
    n = x.shape[axis]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layernorm affine params must have shape ({n},), got {gamma.shape} and {beta.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = n
    gam = gamma.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv_std
    reduce_axes = tuple(a for a in range(x.ndim) if a != axis)

    def backward(g):
        dxhat = g * gam
        dx = inv_std * (dxhat - dxhat.mean(axis=axis, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        return dx, dgamma, dbeta

    out = xhat * gam + beta.data.reshape(bshape)
    return _node(out, (x, gamma, beta), backward, "layernorm")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ConfigurationError(
            f"non-integral conv output size: ({n} + 2*{pad} - {k}) / {stride} + 1")
    return span // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    b, c, hp, wp = shape
    # one contiguous copy with the kernel offsets leading, accumulated channels-last
    taps = np.ascontiguousarray(cols.reshape(b, ho, wo, c, k, k).transpose(4, 5, 0, 1, 2, 3))
    out = np.zeros((b, hp, wp, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += taps[i, j]
    return out.transpose(0, 3, 1, 2)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected C×H×W or B×C×H×W input, got shape {x.shape}")
    return x, False


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation.  ``x`` is C_in×H×W (or batched), ``w`` is C_out×C_in×k×k."""
    x, squeeze = _batched(x)
    cout, cin, k, k2 = w.shape
    if k != k2 or k < 1 or stride < 1 or pad < 0:
        raise ConfigurationError(f"invalid conv config: kernel {w.shape[2:]}, stride {stride}, pad {pad}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    bsz, _, h, wd = x.shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(wd, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gxp = _col2im(g2 @ wmat, xp.shape, k, stride, ho, wo)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    y = _node(np.ascontiguousarray(out), parents, backward, "conv2d")
    return reshape(y, y.shape[1:]) if squeeze else y


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`.  ``w`` is C_in×C_out×k×k; output side is (n-1)*stride - 2*pad + k."""
    x, squeeze = _batched(x)
    cin, cout, k, k2 = w.shape
    if k != k2 or k < 1 or stride < 1 or pad < 0:
        raise ConfigurationError(f"invalid conv config: kernel {w.shape[2:]}, stride {stride}, pad {pad}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {x.shape}, weight {w.shape}")
    bsz, _, h, wd = x.shape
    hp, wp = (h - 1) * stride + k, (wd - 1) * stride + k
    ho, wo = hp - 2 * pad, wp - 2 * pad
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"transposed conv output would be empty: {(ho, wo)}")
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    wmat = w.data.reshape(cin, -1)
    full = _col2im(xm @ wmat, (bsz, cout, hp, wp), k, stride, h, wd)
    out = full[:, :, pad : pad + ho, pad : pad + wo]
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        gcols = _im2col(gp, k, stride, h, wd)
        gw = (xm.T @ gcols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gx = (gcols @ wmat.T).reshape(bsz, h, wd, cin).transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    y = _node(np.ascontiguousarray(out), parents, backward, "conv_transpose2d")
    return reshape(y, y.shape[1:]) if squeeze else y


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at a zero difference is 0."""
    target_arr = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target_arr.shape:
        raise ShapeError(f"l1_loss shape mismatch: {pred.shape} vs {target_arr.shape}")
    diff = pred.data - target_arr
    n = diff.size
    parents = (pred, target) if isinstance(target, Tensor) else (pred,)

    def backward(g):
        s = np.sign(diff) * (g / n)
        return (s, -s) if len(parents) == 2 else (s,)

    return _node(np.asarray(np.abs(diff).mean(), dtype=pred.dtype), parents, backward, "l1_loss")


def soft_cross_entropy(soft_target, logits: Tensor, axis: int = -1, tol: float = 1e-5) -> Tensor:
    """Mean over pixels of ``-sum_c t_c log softmax(logits)_c`` with ``t`` on the simplex along ``axis``."""
    t = np.asarray(soft_target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"soft target shape {t.shape} does not match logits {logits.shape}")
    if np.any(t < -tol) or np.max(np.abs(t.sum(axis=axis) - 1.0)) > tol:
        raise ValueError("soft targets must be non-negative and sum to 1 along the class axis")
    ls = log_softmax(logits, axis=axis)
    n_pix = logits.size // logits.shape[axis]
    # -sum(t * ls) / n_pix, written out so the op chain stays differentiable
    return mul(tsum(mul(ls, t)), -1.0 / n_pix)


def cross_entropy(labels: np.ndarray, logits: Tensor, axis: int = -1) -> Tensor:
    """Hard-label cross-entropy, mean over pixels; ``labels`` holds integer class ids."""
    axis = axis % logits.ndim
    moved = np.moveaxis(logits.data, axis, -1)
    labels = np.asarray(labels)
    if labels.shape != moved.shape[:-1]:
        raise ShapeError(f"label shape {labels.shape} does not match logits {logits.shape}")
    m = moved.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(moved - m).sum(axis=-1, keepdims=True)))[..., 0]
    picked = np.take_along_axis(moved, labels[..., None].astype(np.int64), axis=-1)[..., 0]
    n = labels.size
    loss = (lse - picked).mean()

    def backward(g):
        p = np.exp(moved - lse[..., None])
        np.put_along_axis(p, labels[..., None].astype(np.int64),
                          np.take_along_axis(p, labels[..., None].astype(np.int64), axis=-1) - 1.0, axis=-1)
        return (np.moveaxis(p * (g / n), -1, axis),)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")
