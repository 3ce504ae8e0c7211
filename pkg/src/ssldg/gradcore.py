"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Each differentiable op records a :class:`TapeNode` (op tag, input tensors and
whatever forward values the backward rule needs).  Backward rules live in the
module-level ``BACKWARD_RULES`` table keyed by op tag, which keeps every
derivative in one place and lets the gradient checker swap a rule out for
fault-injection tests.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class FormatError(ValueError):
    """Malformed binary/text file; ``offset`` is the byte position of the fault."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


class TapeNode:
    __slots__ = ("op", "inputs", "cache")

    def __init__(self, op: str, inputs: tuple, cache: dict):
        self.op = op
        self.inputs = inputs
        self.cache = cache


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.node.op}" if self.node else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, inputs: tuple, **cache) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, cache)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.inputs:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = BACKWARD_RULES[t.node.op](t.node, g)
        for inp, ig in zip(t.node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            k = id(inp)
            grads[k] = grads[k] + ig if k in grads else ig


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result("add", a.data + b.data, (a, b))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result("sub", a.data - b.data, (a, b))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result("mul", a.data * b.data, (a, b))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result("div", a.data / b.data, (a, b))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result("neg", -a.data, (a,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _result("pow", a.data ** p, (a,), p=float(p))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result("exp", out, (a,), out=out)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result("log", np.log(a.data), (a,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _result("abs", np.abs(a.data), (a,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _result("relu", np.maximum(x.data, 0.0), (x,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result("sigmoid", out, (x,), out=out)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp with a pass-through gradient inside [lo, hi] and zero outside."""
    x = as_tensor(x)
    return _result("clip", np.clip(x.data, lo, hi), (x,), lo=lo, hi=hi)


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).data)


# ---------------------------------------------------------------------------
# shape ops and reductions


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    return _result("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), axis=axis, keepdims=keepdims)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = tsum(x, axis, keepdims)
    n = x.data.size // max(out.data.size, 1)
    return out * (1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result("reshape", x.data.reshape(shape), (x,), shape=x.shape)


def index(x, key) -> Tensor:
    x = as_tensor(x)
    return _result("index", x.data[key], (x,), key=key, shape=x.shape)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = tuple(as_tensor(t) for t in xs)
    sizes = [t.shape[axis] for t in xs]
    return _result("concat", np.concatenate([t.data for t in xs], axis=axis), xs, axis=axis, sizes=sizes)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in xs], axis=axis)


# ---------------------------------------------------------------------------
# network ops


def conv2d(x, w, b=None, padding: int | None = None) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with w[F,C,kh,kw] (+ bias[F])."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    N, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    if C != Cw:
        raise DimensionError(f"conv2d channel mismatch: input has {C}, kernel expects {Cw}")
    if padding is None:
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError("conv2d with default padding needs odd kernel sizes")
        padding = (kh - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Ho, Wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if Ho <= 0 or Wo <= 0:
        raise DimensionError("conv2d kernel larger than padded input")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(F, -1)
    out = (cols @ wmat.T).reshape(N, Ho, Wo, F).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    res = _result("conv2d", out, (x, w), cols=cols, padding=padding, xshape=x.shape, pshape=xp.shape)
    if b is not None:
        b = as_tensor(b)
        res = add(res, reshape(b, (1, F, 1, 1)))
    return res


def avgpool2(x) -> Tensor:
    x = as_tensor(x)
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"avgpool2 needs even spatial dims, got {H}x{W}")
    out = x.data.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))
    return _result("avgpool2", out, (x,))


def upsample_nearest2(x) -> Tensor:
    x = as_tensor(x)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _result("upsample2", out, (x,))


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane of x[N,C,H,W] to zero mean, unit variance."""
    x = as_tensor(x)
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    std = np.sqrt((xc * xc).mean(axis=(2, 3), keepdims=True) + eps)
    out = xc / std
    return _result("instance_norm", out, (x,), out=out, std=std)


def softmax_channels(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    return _result("softmax", out, (x,), out=out)


# ---------------------------------------------------------------------------
# backward rules: rule(node, grad_out) -> per-input grads


def _bw_add(n, g):
    a, b = n.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bw_sub(n, g):
    a, b = n.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _bw_mul(n, g):
    a, b = n.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def _bw_div(n, g):
    a, b = n.inputs
    return (_unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape))


def _bw_pow(n, g):
    (a,) = n.inputs
    p = n.cache["p"]
    return (g * p * a.data ** (p - 1.0),)


def _bw_sum(n, g):
    (x,) = n.inputs
    axis, keepdims = n.cache["axis"], n.cache["keepdims"]
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _bw_index(n, g):
    full = np.zeros(n.cache["shape"])
    np.add.at(full, n.cache["key"], g)
    return (full,)


def _bw_concat(n, g):
    axis = n.cache["axis"]
    splits = np.cumsum(n.cache["sizes"])[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _bw_conv2d(n, g):
    x, w = n.inputs
    cols, pad = n.cache["cols"], n.cache["padding"]
    N, C, H, W = n.cache["xshape"]
    F, _, kh, kw = w.shape
    go = g.transpose(0, 2, 3, 1).reshape(-1, F)
    dw = (go.T @ cols).reshape(w.shape) if w.requires_grad else None
    dx = None
    if x.requires_grad:
        # full correlation of the output gradient with the flipped, channel-swapped kernel
        ph, pw = kh - 1 - pad, kw - 1 - pad
        gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else g
        win = sliding_window_view(gp, (kh, kw), axis=(2, 3))[:, :, :H, :W]
        gcols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * H * W, F * kh * kw)
        wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, -1)
        dx = np.ascontiguousarray((gcols @ wflip.T).reshape(N, H, W, C).transpose(0, 3, 1, 2))
    return dx, dw


def _bw_avgpool2(n, g):
    return (0.25 * g.repeat(2, axis=2).repeat(2, axis=3),)


def _bw_upsample2(n, g):
    N, C, H, W = g.shape
    return (g.reshape(N, C, H // 2, 2, W // 2, 2).sum(axis=(3, 5)),)


def _bw_instance_norm(n, g):
    y, std = n.cache["out"], n.cache["std"]
    gm = g.mean(axis=(2, 3), keepdims=True)
    gy = (g * y).mean(axis=(2, 3), keepdims=True)
    return ((g - gm - y * gy) / std,)


def _bw_softmax(n, g):
    s = n.cache["out"]
    return (s * (g - (g * s).sum(axis=1, keepdims=True)),)


BACKWARD_RULES: dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "div": _bw_div,
    "neg": lambda n, g: (-g,),
    "pow": _bw_pow,
    "exp": lambda n, g: (g * n.cache["out"],),
    "log": lambda n, g: (g / n.inputs[0].data,),
    "abs": lambda n, g: (g * np.sign(n.inputs[0].data),),
    "relu": lambda n, g: (g * (n.inputs[0].data > 0),),
    "sigmoid": lambda n, g: (g * n.cache["out"] * (1.0 - n.cache["out"]),),
    "clip": lambda n, g: (g * ((n.inputs[0].data >= n.cache["lo"]) & (n.inputs[0].data <= n.cache["hi"])),),
    "sum": _bw_sum,
    "reshape": lambda n, g: (g.reshape(n.cache["shape"]),),
    "index": _bw_index,
    "concat": _bw_concat,
    "conv2d": _bw_conv2d,
    "avgpool2": _bw_avgpool2,
    "upsample2": _bw_upsample2,
    "softmax": _bw_softmax,
    "instance_norm": _bw_instance_norm,
}


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float = 5e-3, weight_decay: float = 3e-5, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[list[np.ndarray], AdamState]:
    """One Adam update with classic (L2, gradient-coupled) weight decay.

    Returns new parameter arrays and a new state; the inputs are not mutated.
    """
    if len(state.m) != len(params):
        raise ContractError("Adam state does not match parameter list")
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ContractError(f"Adam state shape {m.shape} != param shape {p.shape}")
        g = np.zeros_like(p) if g is None else g
        if weight_decay:
            g = g + weight_decay * p
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        new_p.append(p - lr * mhat / (np.sqrt(vhat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


@dataclass
class Adam:
    """Stateful wrapper updating a list of leaf tensors in place from ``.grad``."""

    params: list[Tensor]
    lr: float = 5e-3
    weight_decay: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self) -> None:
        new, self.state = adam_step([p.data for p in self.params], [p.grad for p in self.params],
                                    self.state, self.lr, self.weight_decay, self.beta1, self.beta2, self.eps)
        for p, d in zip(self.params, new):
            p.data = d

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# "SDG1" tensor serialization

MAGIC = b"SDG1"


def encode_tensor(arr) -> bytes:
    a = np.asarray(arr, dtype="<f8")
    a = np.ascontiguousarray(a).reshape(a.shape)  # ascontiguousarray promotes 0-d to 1-d
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one SDG1 record at ``offset``; returns (array, offset after record)."""
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError("bad magic, expected b'SDG1'", offset)
    pos = offset + 4
    if len(buf) < pos + 4:
        raise FormatError("truncated rank field", pos)
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if rank > 32:
        raise FormatError(f"implausible rank {rank}", pos - 4)
    if len(buf) < pos + 4 * rank:
        raise FormatError("truncated dimension list", pos)
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    nbytes = 8 * int(np.prod(dims, dtype=np.int64))
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - pos}", len(buf))
    arr = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).astype(np.float64)
    return arr, pos + nbytes


def write_tensor(path, arr) -> None:
    if isinstance(arr, Tensor):
        arr = arr.data
    data = encode_tensor(arr)
    if isinstance(path, io.IOBase):
        path.write(data)
        return
    with open(path, "wb") as f:
        f.write(data)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    arr, end = decode_tensor(buf, 0)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor payload", end)
    return arr
