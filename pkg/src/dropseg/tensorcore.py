"""A small reverse-mode autodiff engine over numpy arrays.

Operations record themselves on the active :class:`Tape` (entered with
``with Tape() as tape:``) whenever one of their operands requires a gradient.
Only what the segmentation network needs is provided: dilated 2-D
convolution, relu, sigmoid, a stable logit-space BCE loss, and a handful of
elementwise helpers used for testing.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Sequence

import numpy as np

from .errors import NotOnTape, ShapeMismatch

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "dropseg_active_tape", default=None
)


class Tensor:
    """Dense array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return scale(self, 1.0 / c)

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.full(like.shape, x, like.dtype))


class Tape:
    """Ordered log of differentiable operations (each entry after its inputs)."""

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._outputs: set[int] = set()
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self.entries.append((out, tuple(inputs), backward_fn))
        self._outputs.add(id(out))

    def __contains__(self, t: Tensor):
        return id(t) in self._outputs

    def backward(self, loss: Tensor):
        backward(self, loss)


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``.

    Gradients accumulate into existing buffers, so call ``zero_grad`` between
    optimisation steps.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"loss must be a scalar, got shape {loss.shape}")
    if loss not in tape:
        raise NotOnTape("loss tensor was not produced on this tape")
    pending = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for out, inputs, fn in reversed(tape.entries):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        out.grad = g if out.grad is None else out.grad + g
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in pending:
                pending[key] = pending[key] + gi
            else:
                pending[key] = gi
                if inp not in tape:
                    leaves[key] = inp
    for key, t in leaves.items():
        g = pending[key]
        t.grad = g if t.grad is None else t.grad + g


# --------------------------------------------------------------------------
# elementwise helpers


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(dtype=a.dtype).reshape(()))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, x.dtype.type(0)))
    return _record(out, (x,), lambda g: (g * pos,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # branch form: exp is only ever taken of a non-positive argument
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = Tensor(s)
    return _record(out, (x,), lambda g: (g * s * (1 - s),))


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    t = np.asarray(target)
    if t.shape != logits.shape:
        raise ShapeMismatch(f"bce: logits {logits.shape} vs target {t.shape}")
    z = logits.data
    t = t.astype(z.dtype)
    n = z.size
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(np.asarray(per.sum(dtype=np.float64) / n, dtype=z.dtype))

    def _grad(g):
        return ((_sigmoid(z) - t) * (g / n),)

    return _record(out, (logits,), _grad)


# --------------------------------------------------------------------------
# dilated convolution


def _taps(k: int, dilation: int):
    for i in range(k):
        for j in range(k):
            yield i * dilation, j * dilation


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """Stride-1 'same' convolution with zero padding and dilated taps.

    ``x`` is (H, W, Cin), ``kernel`` is (k, k, Cin, Cout), ``bias`` is (Cout,).
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    k, k2, cin, cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeMismatch(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if x.shape[2] != cin:
        raise ShapeMismatch(f"conv2d: input has {x.shape[2]} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeMismatch(f"conv2d: bias shape {bias.shape}, expected ({cout},)")
    if int(dilation) < 1:
        raise ValueError("dilation must be a positive integer")
    d = int(dilation)
    h, w, _ = x.shape
    pad = d * (k - 1) // 2
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    taps = list(_taps(k, d))
    # im2col: (H*W, k*k*Cin), tap-major then channel
    cols = np.concatenate([xp[a : a + h, b : b + w] for a, b in taps], axis=2)
    cols = cols.reshape(h * w, k * k * cin)
    kmat = kernel.data.reshape(k * k * cin, cout)
    out = Tensor((cols @ kmat + bias.data).reshape(h, w, cout))

    def _grad(g):
        g2 = g.reshape(h * w, cout)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (cols.T @ g2).reshape(kernel.shape)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(h, w, k * k, cin)
            gxp = np.zeros_like(xp)
            for n, (a, b) in enumerate(taps):
                gxp[a : a + h, b : b + w] += gcols[:, :, n]
            gx = gxp[pad : pad + h, pad : pad + w]
        return gx, gk, gb

    return _record(out, (x, kernel, bias), _grad)
