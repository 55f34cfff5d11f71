"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: row-major numpy arrays, a thread-local
Wengert tape, and exactly the operations the two search spaces need.
Everything runs in 64-bit so finite-difference checks can be strict.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "no_grad",
    "backward",
    "active_tape",
    "add",
    "sub",
    "mul",
    "scale",
    "sum_all",
    "matmul",
    "linear",
    "relu",
    "softmax",
    "vector_max",
    "take",
    "concat_channels",
    "conv2d",
    "max_pool3x3",
    "avg_pool3x3",
    "global_avg_pool",
    "batchnorm2d",
    "cross_entropy",
    "shift_up_left",
]


class ShapeError(ValueError):
    """An operation received inputs whose shapes do not conform."""


class Tensor:
    """A dense float64 array with optional gradient tracking.

    ``grad`` is populated by :func:`backward` for every tensor that is
    reachable from the loss and has ``requires_grad`` set. ``grad_tag``
    records the provenance label passed to the backward call that last
    wrote the gradient (the search engine uses it to keep validation and
    training gradients apart).
    """

    __slots__ = ("value", "requires_grad", "grad", "grad_tag", "_on_tape")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.grad_tag = None
        self._on_tape = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.value)

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _TapeEntry:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Execution-ordered record of differentiable operations.

    Execution order is a valid topological order, so one reverse sweep
    visits every node exactly once.
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def __len__(self):
        return len(self.entries)

    def clear(self):
        self.entries.clear()


class _State(threading.local):
    def __init__(self):
        self.tape = GradTape()
        self.recording = True


_STATE = _State()


def active_tape() -> GradTape:
    """The thread-local tape every recorded operation is appended to."""
    return _STATE.tape


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._prev = _STATE.recording
        _STATE.recording = False
        return self

    def __exit__(self, *exc):
        _STATE.recording = self._prev
        return False


def _recording(*tensors: Tensor) -> bool:
    return _STATE.recording and any(t.requires_grad for t in tensors)


def _track(op: str, inputs, out_value, backward_fn) -> Tensor:
    out = Tensor(out_value, requires_grad=True)
    out._on_tape = True
    _STATE.tape.entries.append(_TapeEntry(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tag=None) -> None:
    """Reverse-mode sweep from a scalar loss; consumes the active tape.

    Gradients accumulate into ``.grad`` of every reachable tensor with
    ``requires_grad``. ``tag`` is stored as ``grad_tag`` on each of them.
    """
    if not isinstance(loss, Tensor) or loss.value.size != 1:
        shape = getattr(loss, "shape", None)
        raise ShapeError(f"backward expects a scalar loss, got shape {shape}")
    if not loss._on_tape:
        raise ValueError("loss was not produced under the active GradTape")
    tape = _STATE.tape
    loss.grad = np.ones_like(loss.value)
    loss.grad_tag = tag
    try:
        for entry in reversed(tape.entries):
            g_out = entry.output.grad
            if g_out is None:
                continue
            for t, g in zip(entry.inputs, entry.backward(g_out)):
                if g is None or not t.requires_grad:
                    continue
                t.grad = g if t.grad is None else t.grad + g
                t.grad_tag = tag
    finally:
        tape.clear()


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.value + b.value
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    if not _recording(a, b):
        return Tensor(out)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _track("add", (a, b), out, bwd)


def add_n(tensors) -> Tensor:
    """Sum of same-shape tensors in a single graph node."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("add_n of an empty sequence")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeError(f"add_n: mismatched shapes {[t.shape for t in tensors]}")
    out = tensors[0].value.copy()
    for t in tensors[1:]:
        out += t.value
    if not _recording(*tensors):
        return Tensor(out)
    k = len(tensors)

    def bwd(g):
        return (g,) * k

    return _track("add_n", tuple(tensors), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.value - b.value
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None
    if not _recording(a, b):
        return Tensor(out)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _track("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; with a scalar operand this is scalar scaling."""
    try:
        out = a.value * b.value
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    if not _recording(a, b):
        return Tensor(out)
    av, bv = a.value, b.value

    def bwd(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _track("mul", (a, b), out, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient path to ``c``)."""
    c = float(c)
    out = x.value * c
    if not _recording(x):
        return Tensor(out)

    def bwd(g):
        return (g * c,)

    return _track("scale", (x,), out, bwd)


def sum_all(x: Tensor) -> Tensor:
    out = x.value.sum()
    if not _recording(x):
        return Tensor(out)
    shape = x.shape

    def bwd(g):
        return (np.full(shape, float(g)),)

    return _track("sum_all", (x,), out, bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.value, 0.0)
    if not _recording(x):
        return Tensor(out)
    mask = x.value > 0.0

    def bwd(g):
        return (g * mask,)

    return _track("relu", (x,), out, bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    if not _recording(x):
        return Tensor(s)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _track("softmax", (x,), s, bwd)


def vector_max(x: Tensor) -> Tensor:
    """Maximum of a 1-D vector as selection at the argmax (ties: lowest index).

    The gradient flows only to the selected index.
    """
    if x.ndim != 1:
        raise ShapeError(f"vector_max expects a 1-D vector, got shape {x.shape}")
    idx = int(np.argmax(x.value))
    out = x.value[idx]
    if not _recording(x):
        return Tensor(out)
    n = x.shape[0]

    def bwd(g):
        z = np.zeros(n)
        z[idx] = float(g)
        return (z,)

    return _track("vector_max", (x,), out, bwd)


def take(x: Tensor, index: int) -> Tensor:
    """Select one element of a 1-D vector as a scalar."""
    if x.ndim != 1:
        raise ShapeError(f"take expects a 1-D vector, got shape {x.shape}")
    index = int(index)
    out = x.value[index]
    if not _recording(x):
        return Tensor(out)
    n = x.shape[0]

    def bwd(g):
        z = np.zeros(n)
        z[index] = float(g)
        return (z,)

    return _track("take", (x,), out, bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.value @ b.value
    if not _recording(a, b):
        return Tensor(out)
    av, bv = a.value, b.value

    def bwd(g):
        return g @ bv.T, av.T @ g

    return _track("matmul", (a, b), out, bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: ``x @ w.T + b`` with x (B, F), w (O, F), b (O,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(
            f"linear: incompatible shapes x={x.shape} w={w.shape} b={b.shape}"
        )
    out = x.value @ w.value.T + b.value
    if not _recording(x, w, b):
        return Tensor(out)
    xv, wv = x.value, w.value

    def bwd(g):
        return g @ wv, g.T @ xv, g.sum(axis=0)

    return _track("linear", (x, w, b), out, bwd)


def concat_channels(tensors) -> Tensor:
    """Concatenate along axis 1 (channels for 4-D maps, features for 2-D)."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_channels of an empty sequence")
    nd = tensors[0].ndim
    if nd not in (2, 4) or any(t.ndim != nd for t in tensors):
        raise ShapeError(
            f"concat_channels expects matching 2-D or 4-D tensors, got "
            f"{[t.shape for t in tensors]}"
        )
    rest = [t.shape[:1] + t.shape[2:] for t in tensors]
    if any(r != rest[0] for r in rest):
        raise ShapeError(
            f"concat_channels: non-channel dims differ: {[t.shape for t in tensors]}"
        )
    out = np.concatenate([t.value for t in tensors], axis=1)
    if not _recording(*tensors):
        return Tensor(out)
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(sizes)))

    return _track("concat_channels", tuple(tensors), out, bwd)


# ---------------------------------------------------------------------------
# convolution and pooling (NCHW)
# ---------------------------------------------------------------------------


def _conv_out_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _pad2d(x: np.ndarray, padding: int, fill: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    b, c, h, w = x.shape
    out = np.full((b, c, h + 2 * padding, w + 2 * padding), fill) if fill else \
        np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    out[:, :, padding : padding + h, padding : padding + w] = x
    return out


def conv2d(
    x: Tensor,
    w: Tensor,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D convolution without bias. Weight layout (C_out, C_in/groups, k, k)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape}, {w.shape}")
    batch, c_in, h, wd = x.shape
    c_out, c_in_g, kh, kw = w.shape
    if c_in % groups or c_out % groups:
        raise ShapeError(
            f"conv2d: channel counts ({c_in} in, {c_out} out) not divisible by groups={groups}"
        )
    if c_in_g != c_in // groups:
        raise ShapeError(
            f"conv2d: weight expects {c_in_g} channels per group, input provides "
            f"{c_in // groups}"
        )
    h_out = _conv_out_size(h, kh, stride, padding, dilation)
    w_out = _conv_out_size(wd, kw, stride, padding, dilation)
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv2d: output would be empty for input {x.shape} with kernel "
            f"{(kh, kw)}, stride {stride}, padding {padding}, dilation {dilation}"
        )

    if kh == 1 and kw == 1 and groups == 1 and padding == 0:
        return _conv2d_1x1(x, w, stride, h_out, w_out)
    if groups == c_in and c_in_g == 1 and c_out == c_in:
        return _conv2d_depthwise(x, w, stride, padding, dilation, h_out, w_out)

    xp = _pad2d(x.value, padding)
    c_g = c_in // groups
    d_g = c_out // groups
    n_pos = h_out * w_out
    k2 = kh * kw
    sb, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(batch, groups, c_g, kh, kw, h_out, w_out),
        strides=(sb, c_g * sc, sc, dilation * sh, dilation * sw, stride * sh, stride * sw),
    )
    # im2col copy: (B, G, Cg*k*k, positions), then one broadcasted BLAS matmul
    cols = windows.reshape(batch, groups, c_g * k2, n_pos)
    wmat = w.value.reshape(groups, d_g, c_g * k2)
    out = np.matmul(wmat, cols)
    out = out.reshape(batch, c_out, h_out, w_out)
    if not _recording(x, w):
        return Tensor(out)

    need_x, need_w = x.requires_grad, w.requires_grad

    def bwd(g):
        go = g.reshape(batch, groups, d_g, n_pos)
        gw = None
        if need_w:
            gw = np.matmul(go, cols.transpose(0, 1, 3, 2)).sum(axis=0)
            gw = gw.reshape(c_out, c_in_g, kh, kw)
        gx = None
        if need_x:
            gcols = np.matmul(wmat.transpose(0, 2, 1), go)
            gcols = gcols.reshape(batch, c_in, kh, kw, h_out, w_out)
            gxp = np.zeros_like(xp)
            for ki in range(kh):
                hs = ki * dilation
                for kj in range(kw):
                    ws = kj * dilation
                    gxp[:, :, hs : hs + stride * h_out : stride,
                        ws : ws + stride * w_out : stride] += gcols[:, :, ki, kj]
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw

    return _track("conv2d", (x, w), out, bwd)


def _conv2d_1x1(x: Tensor, w: Tensor, stride: int, h_out: int, w_out: int) -> Tensor:
    """Pointwise convolution as one channel-mixing GEMM per batch."""
    batch, c_in, h, wd = x.shape
    c_out = w.shape[0]
    xs = x.value[:, :, ::stride, ::stride] if stride > 1 else x.value
    cols = xs.reshape(batch, c_in, h_out * w_out)
    wmat = w.value.reshape(c_out, c_in)
    out = np.matmul(wmat, cols).reshape(batch, c_out, h_out, w_out)
    if not _recording(x, w):
        return Tensor(out)

    need_x, need_w = x.requires_grad, w.requires_grad

    def bwd(g):
        go = g.reshape(batch, c_out, h_out * w_out)
        gw = None
        if need_w:
            gw = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(c_out, c_in, 1, 1)
        gx = None
        if need_x:
            gcols = np.matmul(wmat.T, go).reshape(batch, c_in, h_out, w_out)
            if stride > 1:
                gx = np.zeros((batch, c_in, h, wd))
                gx[:, :, ::stride, ::stride] = gcols
            else:
                gx = gcols
        return gx, gw

    return _track("conv2d", (x, w), out, bwd)


def _conv2d_depthwise(x: Tensor, w: Tensor, stride: int, padding: int,
                      dilation: int, h_out: int, w_out: int) -> Tensor:
    """Channel-wise convolution: per-tap multiply-accumulate, no im2col."""
    batch, c, h, wd = x.shape
    kh, kw = w.shape[2], w.shape[3]
    xp = _pad2d(x.value, padding)
    sb, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(batch, c, kh, kw, h_out, w_out),
        strides=(sb, sc, dilation * sh, dilation * sw, stride * sh, stride * sw),
    )
    taps = w.value.reshape(c, kh, kw)
    out = None
    for ki in range(kh):
        for kj in range(kw):
            term = windows[:, :, ki, kj] * taps[:, ki, kj][None, :, None, None]
            out = term if out is None else out + term
    if not _recording(x, w):
        return Tensor(out)

    need_x, need_w = x.requires_grad, w.requires_grad

    def bwd(g):
        gw = None
        if need_w:
            gw = np.empty((c, 1, kh, kw))
            for ki in range(kh):
                for kj in range(kw):
                    gw[:, 0, ki, kj] = np.einsum("bchw,bchw->c",
                                                 windows[:, :, ki, kj], g)
        gx = None
        if need_x:
            gxp = np.zeros_like(xp)
            for ki in range(kh):
                hs = ki * dilation
                for kj in range(kw):
                    ws = kj * dilation
                    gxp[:, :, hs : hs + stride * h_out : stride,
                        ws : ws + stride * w_out : stride] += \
                        g * taps[:, ki, kj][None, :, None, None]
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw

    return _track("conv2d", (x, w), out, bwd)


def _pool_windows(xp: np.ndarray, k: int, stride: int):
    batch, c, hp, wp = xp.shape
    h_out = (hp - k) // stride + 1
    w_out = (wp - k) // stride + 1
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(batch, c, k, k, h_out, w_out),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
    )


def max_pool3x3(x: Tensor, stride: int = 1) -> Tensor:
    """3x3 max pooling with padding 1, so H maps to ceil(H/stride)."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool3x3 expects a 4-D input, got {x.shape}")
    batch, c, h, w = x.shape
    xp = _pad2d(x.value, 1, fill=-np.inf)
    win = _pool_windows(xp, 3, stride)
    h_out, w_out = win.shape[-2:]
    flat = win.reshape(batch, c, 9, h_out, w_out)
    out = flat.max(axis=2)
    if not _recording(x):
        return Tensor(out)
    amax = flat.argmax(axis=2)

    def bwd(g):
        gxp = np.zeros((batch, c, h + 2, w + 2))
        for k in range(9):
            ki, kj = divmod(k, 3)
            gxp[:, :, ki : ki + stride * h_out : stride,
                kj : kj + stride * w_out : stride] += g * (amax == k)
        return (gxp[:, :, 1 : 1 + h, 1 : 1 + w],)

    return _track("max_pool3x3", (x,), out, bwd)


def avg_pool3x3(x: Tensor, stride: int = 1) -> Tensor:
    """3x3 average pooling, padding 1, padded cells excluded from the mean."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool3x3 expects a 4-D input, got {x.shape}")
    batch, c, h, w = x.shape
    xp = _pad2d(x.value, 1)
    win = _pool_windows(xp, 3, stride)
    h_out, w_out = win.shape[-2:]
    ones = np.pad(np.ones((1, 1, h, w)), ((0, 0), (0, 0), (1, 1), (1, 1)))
    counts = _pool_windows(ones, 3, stride).sum(axis=(2, 3))[0, 0]
    out = win.sum(axis=(2, 3)) / counts
    if not _recording(x):
        return Tensor(out)

    def bwd(g):
        gw = g / counts
        gxp = np.zeros((batch, c, h + 2, w + 2))
        for ki in range(3):
            for kj in range(3):
                gxp[:, :, ki : ki + stride * h_out : stride,
                    kj : kj + stride * w_out : stride] += gw
        return (gxp[:, :, 1 : 1 + h, 1 : 1 + w],)

    return _track("avg_pool3x3", (x,), out, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean, (B, C, H, W) -> (B, C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-D input, got {x.shape}")
    batch, c, h, w = x.shape
    out = x.value.mean(axis=(2, 3))
    if not _recording(x):
        return Tensor(out)

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (batch, c, h, w)).copy(),)

    return _track("global_avg_pool", (x,), out, bwd)


def shift_up_left(x: Tensor) -> Tensor:
    """Shift a feature map one pixel up and left, zero-filling the far edge.

    Sampling the result at even positions reads the odd positions of the
    input, which is what the second branch of a factorized reduction needs.
    """
    if x.ndim != 4:
        raise ShapeError(f"shift_up_left expects a 4-D input, got {x.shape}")
    out = np.zeros_like(x.value)
    out[:, :, :-1, :-1] = x.value[:, :, 1:, 1:]
    if not _recording(x):
        return Tensor(out)

    def bwd(g):
        gx = np.zeros_like(g)
        gx[:, :, 1:, 1:] = g[:, :, :-1, :-1]
        return (gx,)

    return _track("shift_up_left", (x,), out, bwd)


# ---------------------------------------------------------------------------
# batch normalization and loss
# ---------------------------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    Training mode normalizes with per-batch statistics and updates the
    running buffers in place; eval mode normalizes with the running
    statistics. ``gamma``/``beta`` may be None for a non-affine layer.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects a 4-D input, got {x.shape}")
    batch, c, h, w = x.shape
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(
            f"batchnorm2d: running stats of shape {running_mean.shape} do not match "
            f"{c} channels"
        )
    affine = gamma is not None
    if affine and (gamma.shape != (c,) or beta.shape != (c,)):
        raise ShapeError(
            f"batchnorm2d: affine parameters {gamma.shape}/{beta.shape} do not match "
            f"{c} channels"
        )

    if training:
        mean = x.value.mean(axis=(0, 2, 3))
        centered = x.value - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.copy()
        var = running_var.copy()
        centered = x.value - mean[None, :, None, None]
    inv = 1.0 / np.sqrt(var + eps)
    if affine:
        # fold gamma into the scale; out = centered * (inv * gamma) + beta
        out = centered * (inv * gamma.value)[None, :, None, None]
        out += beta.value[None, :, None, None]
        inputs = (x, gamma, beta)
    else:
        out = centered * inv[None, :, None, None]
        inputs = (x,)
    if not _recording(*inputs):
        return Tensor(out)

    m = batch * h * w
    gamma_v = gamma.value.copy() if affine else None

    def bwd(g):
        xhat = centered * inv[None, :, None, None]
        if affine:
            dgamma = np.einsum("bchw,bchw->c", g, xhat)
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * gamma_v[None, :, None, None]
        else:
            dxhat = g
        inv_b = inv[None, :, None, None]
        if training:
            s1 = np.einsum("bchw->c", dxhat) / m
            s2 = np.einsum("bchw,bchw->c", dxhat, xhat) / m
            dx = dxhat - s1[None, :, None, None]
            dx -= xhat * s2[None, :, None, None]
            dx *= inv_b
        else:
            dx = dxhat * inv_b
        return (dx, dgamma, dbeta) if affine else (dx,)

    return _track("batchnorm2d", inputs, out, bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Softmax cross entropy from logits (B, K) against int labels (B,), mean-reduced."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    batch, k = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(
            f"cross_entropy: labels {labels.shape} do not match batch {batch}"
        )
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"cross_entropy: label out of range for {k} classes")
    z = logits.value
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    lse = np.log(e.sum(axis=1)) + zmax[:, 0]
    out = (lse - z[np.arange(batch), labels]).mean()
    if not _recording(logits):
        return Tensor(out)
    probs = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        gx = probs.copy()
        gx[np.arange(batch), labels] -= 1.0
        return (gx * (float(g) / batch),)

    return _track("cross_entropy", (logits,), out, bwd)
