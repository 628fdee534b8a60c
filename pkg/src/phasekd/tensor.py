"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op that touches a tracked tensor records a node carrying a global
sequence number; ``backward`` replays the reachable nodes in strictly
decreasing sequence order, i.e. exact reverse execution order.

Broadcasting is limited to scalars and trailing-axis suffixes
(``(n, d) + (d,)``), which is all the models need.
"""
from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit as _sigmoid

from .errors import DomainError, ParameterError, ShapeError

_seq = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class no_grad:
    """Context manager that disables tape recording on the current thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _state.enabled = False
        return self

    def __exit__(self, *exc):
        _state.enabled = self._prev
        return False


class Node:
    __slots__ = ("seq", "op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.backward = backward

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    # -- views -------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, grad=None) -> None:
        backward(self, grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators ---------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out.node = None
    out.requires_grad = False
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward)
    return out


def trace(root: Tensor) -> list[Node]:
    """Tape entries reachable from ``root``, in execution order."""
    nodes: dict[int, Node] = {}
    stack = [root]
    seen: set[int] = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is not None:
            nodes[t.node.seq] = t.node
            stack.extend(t.node.inputs)
    return [nodes[k] for k in sorted(nodes)]


def backward(root: Tensor, grad=None) -> None:
    if grad is None:
        if root.size != 1:
            raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {root.shape}")
        grad = np.ones_like(root.data)
    else:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != root.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {root.shape}")
    if not root.requires_grad:
        return
    if root.node is None:
        root.grad = grad.copy() if root.grad is None else root.grad + grad
        return

    nodes = trace(root)
    owner: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in owner:
            continue
        owner[id(t)] = t
        if t.node is not None:
            stack.extend(t.node.inputs)
    out_of = {t.node.seq: t for t in owner.values() if t.node is not None}

    pending: dict[int, np.ndarray] = {id(root): grad}
    for node in reversed(nodes):
        out = out_of[node.seq]
        g = pending.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                prev = pending.get(id(inp))
                pending[id(inp)] = gi if prev is None else prev + gi


# -- broadcasting helpers ------------------------------------------------------
def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim <= 1 or b.size == 1 and b.ndim <= 1:
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- binary elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    if np.any(b.data == 0):
        raise DomainError("div: zero divisor")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _record("div", out, (a, b), bw)


# -- unary elementwise ----------------------------------------------------------
def neg(x) -> Tensor:
    x = as_tensor(x)
    return _record("neg", -x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log: non-positive input")
    return _record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def abs(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    # np.sign(0) == 0: symmetric subgradient at the kink
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _record("square", x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def clamp_max(x, tau: float) -> Tensor:
    """Elementwise ``min(x, tau)``; gradient is 1 strictly below ``tau`` and 0 at or above it."""
    x = as_tensor(x)
    mask = x.data < tau
    return _record("clamp_max", np.where(mask, x.data, float(tau)), (x,), lambda g: (g * mask,))


# -- reductions / structural ----------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return None
    return axis % ndim


def reduce_sum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=ax, keepdims=keepdims)

    def bw(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", np.asarray(out, dtype=np.float64), (x,), bw)


def reduce_mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    n = x.size if ax is None else x.shape[ax]
    out = x.data.mean(axis=ax, keepdims=keepdims)

    def bw(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _record("mean", np.asarray(out, dtype=np.float64), (x,), bw)


def reduce(x, kind: str, axis: int | None = None) -> Tensor:
    if kind == "sum":
        return reduce_sum(x, axis)
    if kind == "mean":
        return reduce_mean(x, axis)
    raise ParameterError(f"unknown reduction {kind!r}")


_UNARY = {
    "neg": neg, "exp": exp, "log": log, "abs": abs, "square": square,
    "sigmoid": sigmoid, "tanh": tanh, "relu": relu,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise_map(kind: str, x, y=None) -> Tensor:
    """Dispatch by name; binary kinds take a second operand."""
    if kind in _BINARY:
        if y is None:
            raise ParameterError(f"{kind} needs two operands")
        return _BINARY[kind](x, y)
    if kind in _UNARY:
        return _UNARY[kind](x)
    raise ParameterError(f"unknown elementwise op {kind!r}")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return _record("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def index_select(x, index) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[index], dtype=np.float64)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record("index", out, (x,), bw)


def gather_rows(x, idx: Sequence[int]) -> Tensor:
    """``out[i] = x[i, idx[i]]`` for a matrix ``x``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"gather_rows: matrix {x.shape} with index {idx.shape}")
    rows = np.arange(x.shape[0])

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _record("gather", x.data[rows, idx].copy(), (x,), bw)


# -- linear algebra ------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", a.data @ b.data, (a, b), bw)


def conv1d_causal(x, w, dilation: int = 1, bias=None) -> Tensor:
    """Causal dilated convolution of a ``(C_in, L)`` signal with ``(C_out, C_in, k)`` taps.

    The input is left-padded with ``(k-1)*dilation`` zeros, so tap ``k-1`` sees the
    current frame and tap ``j`` sees frame ``l - (k-1-j)*dilation``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ParameterError(f"conv1d_causal: dilation must be a positive integer, got {dilation!r}")
    if x.ndim != 2 or w.ndim != 3 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv1d_causal: input {x.shape} incompatible with kernel {w.shape}")
    c_out, c_in, k = w.shape
    L = x.shape[1]
    # im2col: block j holds the input delayed by (k-1-j)*dilation frames
    cols = np.zeros((k, c_in, L))
    for j in range(k):
        s = (k - 1 - j) * dilation
        if s < L:
            cols[j, :, s:] = x.data[:, : L - s]
    cols = cols.reshape(k * c_in, L)
    w2 = w.data.transpose(0, 2, 1).reshape(c_out, k * c_in)
    out = w2 @ cols
    inputs: tuple = (x, w)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv1d_causal: bias {bias.shape} for {c_out} output channels")
        out += bias.data[:, None]
        inputs = (x, w, bias)

    def bw(g):
        gw = (g @ cols.T).reshape(c_out, k, c_in).transpose(0, 2, 1)
        gcols = (w2.T @ g).reshape(k, c_in, L)
        gx = np.zeros((c_in, L))
        for j in range(k):
            s = (k - 1 - j) * dilation
            if s < L:
                gx[:, : L - s] += gcols[j, :, s:]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=1))
        return tuple(grads)

    return _record("conv1d_causal", out, inputs, bw)


# -- softmax family ------------------------------------------------------------
def _check_temperature(T: float) -> float:
    T = float(T)
    if not T > 0:
        raise ParameterError(f"temperature must be positive, got {T}")
    return T


def softmax_with_temperature(logits, T: float = 1.0) -> Tensor:
    x = as_tensor(logits)
    T = _check_temperature(T)
    z = x.data / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)) / T,)

    return _record("softmax", out, (x,), bw)


def log_softmax(logits, T: float = 1.0) -> Tensor:
    x = as_tensor(logits)
    T = _check_temperature(T)
    z = x.data / T
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        return ((g - p * g.sum(axis=-1, keepdims=True)) / T,)

    return _record("log_softmax", out, (x,), bw)


def l2_normalize(z, eps: float = 1e-12) -> Tensor:
    """Divide each row by ``max(||row||_2, eps)``."""
    z = as_tensor(z)
    if z.ndim != 2:
        raise ShapeError(f"l2_normalize expects (n, d), got {z.shape}")
    norm = np.sqrt((z.data * z.data).sum(axis=1, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    out = z.data / denom

    def bw(g):
        proj = (g * out).sum(axis=1, keepdims=True)
        return (np.where(big, (g - out * proj) / denom, g / eps),)

    return _record("l2_normalize", out, (z,), bw)


# -- fused recurrent layer ------------------------------------------------------
def gru_sequence(x, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """Run a GRU over a ``(L, D)`` sequence from a zero state; returns ``(L, H)`` states.

    Gate layout along the ``3H`` axis is ``[reset, update, candidate]``:
        r = sig(x W_r + b_ir + h W_hr + b_hr)
        z = sig(x W_z + b_iz + h W_hz + b_hz)
        n = tanh(x W_n + b_in + r * (h W_hn + b_hn))
        h' = (1 - z) * n + z * h
    Backward is hand-written BPTT; the per-step loop never touches the tape.
    """
    x, w_ih, w_hh, b_ih, b_hh = map(as_tensor, (x, w_ih, w_hh, b_ih, b_hh))
    if x.ndim != 2 or w_ih.ndim != 2 or w_ih.shape[0] != x.shape[1]:
        raise ShapeError(f"gru_sequence: input {x.shape} incompatible with W_ih {w_ih.shape}")
    H = w_hh.shape[0]
    if w_ih.shape[1] != 3 * H or w_hh.shape != (H, 3 * H) or b_ih.shape != (3 * H,) or b_hh.shape != (3 * H,):
        raise ShapeError("gru_sequence: inconsistent gate parameter shapes")
    L = x.shape[0]
    Whh = w_hh.data
    hs, r_s, z_s, n_s, ghn_s = gru_scan(x.data @ w_ih.data + b_ih.data, Whh, b_hh.data, store=True)
    out = hs[1:].copy()

    def bw(g):
        # carry-independent local derivatives, vectorized over time
        k_n = (1.0 - z_s) * (1.0 - n_s * n_s)
        k_z = (hs[:-1] - n_s) * z_s * (1.0 - z_s)
        k_r = ghn_s * r_s * (1.0 - r_s)
        # the hidden-side candidate gate sits behind the reset gate
        gh_scale = np.concatenate([np.ones((L, 2 * H)), r_s], axis=1)
        d_gi = np.empty((L, 3 * H))
        carry = np.zeros(H)
        WhhT = Whh.T
        for t in range(L - 1, -1, -1):
            dh = g[t] + carry
            row = d_gi[t]
            np.multiply(dh, k_z[t], out=row[H: 2 * H])
            np.multiply(dh, k_n[t], out=row[2 * H:])
            np.multiply(row[2 * H:], k_r[t], out=row[:H])
            carry = dh * z_s[t] + (row * gh_scale[t]) @ WhhT
        d_gh = d_gi * gh_scale
        return (
            d_gi @ w_ih.data.T,
            x.data.T @ d_gi,
            hs[:-1].T @ d_gh,
            d_gi.sum(axis=0),
            d_gh.sum(axis=0),
        )

    return _record("gru_sequence", out, (x, w_ih, w_hh, b_ih, b_hh), bw)


def gru_scan(gi: np.ndarray, w_hh: np.ndarray, b_hh: np.ndarray, store: bool = False):
    """Recurrence over the leading (time) axis of precomputed input gates ``gi``.

    ``gi`` is ``(L, 3H)`` or time-major batched ``(L, B, 3H)``. Returns the
    ``(L+1, ..., H)`` state stack (zero initial state first); with ``store`` also
    the reset, update, candidate and hidden-candidate-gate activations.
    """
    L = gi.shape[0]
    H = w_hh.shape[0]
    hs = np.zeros((L + 1,) + gi.shape[1:-1] + (H,))
    acts = [np.empty((L,) + gi.shape[1:-1] + (H,)) for _ in range(4)] if store else None
    h = hs[0]
    for t in range(L):
        gh = h @ w_hh
        gh += b_hh
        rz = _sigmoid(gi[t, ..., : 2 * H] + gh[..., : 2 * H])
        r, z = rz[..., :H], rz[..., H:]
        ghn = gh[..., 2 * H:]
        n = np.tanh(gi[t, ..., 2 * H:] + r * ghn)
        h = n + z * (h - n)
        hs[t + 1] = h
        if store:
            acts[0][t], acts[1][t], acts[2][t], acts[3][t] = r, z, n, ghn
    return (hs, *acts) if store else hs


# -- verification ---------------------------------------------------------------
def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``."""
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad
    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xp[i] += h
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            xp[i] -= 2 * h
            fm = f(Tensor(xp.reshape(x0.shape))).item()
            flat[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
