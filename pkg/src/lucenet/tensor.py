"""Float32 N-d tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous row-major float32 array. Differentiable
operations executed inside a ``with Tape():`` block are recorded in execution
order (which is already topological); :func:`backward` replays the tape once,
in reverse, accumulating gradients into every participating tensor that has
``requires_grad`` set. Outside a tape block the same operations run as plain
forward evaluations, which is what inference and the finite-difference oracle
use.

All production values are 32-bit. The ``dtype`` argument of :class:`Tensor`
exists only so numeric test oracles (:func:`grad_check`) can re-evaluate a
graph in float64; nothing else should pass it.

Any operation that produces NaN or Inf aborts with :class:`NonFiniteError`
naming the operation: silent numeric corruption is treated as the worst
possible failure mode of a from-scratch core.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BCE_CLAMP = 1e-7


class NonFiniteError(ArithmeticError):
    """An operation produced or received NaN/Inf values."""


class TapeError(RuntimeError):
    """Backward misuse: detached root, non-scalar root, or tape replay."""


_TLS = threading.local()


def _stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Execution-ordered record of differentiable operations.

    Use as a context manager around one forward pass. Tapes are confined to
    the thread that created them; independent tapes (one per fold) may run
    concurrently in separate threads.
    """

    def __init__(self):
        self._records = []  # (op name, input tensors, output tensor, backward fn)
        self._consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        popped = _stack().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise TapeError("tape context exited out of order")
        return False

    def _record(self, name, inputs, output, backward_fn) -> None:
        self._records.append((name, inputs, output, backward_fn))

    def __len__(self) -> int:
        return len(self._records)


class Tensor:
    """Contiguous row-major float array with optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        if not np.isfinite(arr).all():
            raise NonFiniteError("Tensor: non-finite values in input data")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = object.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item: tensor is not scalar")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wants_grad(t: Tensor) -> bool:
    return t.requires_grad or t._tape is not None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _emit(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
          backward_fn: Callable) -> Tensor:
    out_data = np.ascontiguousarray(out_data)
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"{name}: produced non-finite values")
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad or t._tape is tape for t in inputs):
        tape._record(name, tuple(inputs), out, backward_fn)
        out._tape = tape
    return out


def backward(loss: Tensor) -> None:
    """Replay the tape of ``loss`` in reverse, populating gradients.

    Every tensor with ``requires_grad`` that was consumed by a recorded
    operation receives a gradient buffer, exactly zero if its path does not
    reach the root. Replaying a tape twice is an error; rebuild the graph.
    """
    tape = loss._tape
    if tape is None:
        raise TapeError("backward: root is not attached to a tape (detached graph)")
    if loss.data.size != 1:
        raise TapeError(f"backward: root must be scalar, got shape {loss.data.shape}")
    if tape._consumed:
        raise TapeError("backward: tape already replayed; rebuild the graph first")
    tape._consumed = True
    for _, inputs, _, _ in tape._records:
        for t in inputs:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
    loss.grad = np.ones_like(loss.data)
    for _, _, out, fn in reversed(tape._records):
        if out.grad is not None:
            fn(out.grad)


# ---------------------------------------------------------------------------
# differentiable operations
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-d cross-correlation with per-filter bias.

    ``x`` is [N,C,H,W], ``kernel`` [F,C,kh,kw], ``bias`` [F]. Output spatial
    size is floor((H + 2*padding - kh)/stride) + 1, likewise for W.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4 or bias.data.ndim != 1:
        raise ValueError("conv2d: expected x[N,C,H,W], kernel[F,C,kh,kw], bias[F]")
    n, c, h, w = x.data.shape
    f, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise ValueError(f"conv2d: kernel channels {ck} != input channels {c}")
    if bias.data.shape[0] != f:
        raise ValueError(f"conv2d: bias length {bias.data.shape[0]} != filters {f}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >=1 and padding >=0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError("conv2d: kernel exceeds padded input (zero-size output)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.moveaxis(out, 3, 1) + bias.data[None, :, None, None]
    ho, wo = out.shape[2], out.shape[3]
    kdata = kernel.data

    def backward_fn(g):
        if _wants_grad(kernel):
            _accum(kernel, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        if _wants_grad(bias):
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if _wants_grad(x):
            gp = np.zeros_like(xp)
            for i in range(kh):
                hi = i + stride * (ho - 1) + 1
                for j in range(kw):
                    wj = j + stride * (wo - 1) + 1
                    gp[:, :, i:hi:stride, j:wj:stride] += np.einsum(
                        "nfhw,fc->nchw", g, kdata[:, :, i, j])
            if padding:
                _accum(x, gp[:, :, padding:padding + h, padding:padding + w])
            else:
                _accum(x, gp)

    return _emit("conv2d", (x, kernel, bias), out, backward_fn)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map: x[N,D] @ weights[D,M] + bias[M]."""
    if x.data.ndim != 2 or weights.data.ndim != 2 or bias.data.ndim != 1:
        raise ValueError("dense: expected x[N,D], weights[D,M], bias[M]")
    if x.data.shape[1] != weights.data.shape[0]:
        raise ValueError(
            f"dense: inner dims disagree ({x.data.shape[1]} vs {weights.data.shape[0]})")
    if weights.data.shape[1] != bias.data.shape[0]:
        raise ValueError("dense: bias length does not match output width")
    out = x.data @ weights.data + bias.data

    def backward_fn(g):
        if _wants_grad(x):
            _accum(x, g @ weights.data.T)
        if _wants_grad(weights):
            _accum(weights, x.data.T @ g)
        if _wants_grad(bias):
            _accum(bias, g.sum(axis=0))

    return _emit("dense", (x, weights, bias), out, backward_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward_fn(g):
        if _wants_grad(x):
            _accum(x, g * (x.data > 0))

    return _emit("relu", (x,), out, backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.data))

    def backward_fn(g):
        if _wants_grad(x):
            _accum(x, g * s * (1.0 - s))

    return _emit("sigmoid", (x,), s, backward_fn)


def avg_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Average pooling over window x window patches (stride defaults to window)."""
    if x.data.ndim != 4:
        raise ValueError("avg_pool2d: expected x[N,C,H,W]")
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValueError("avg_pool2d: window and stride must be >=1")
    n, c, h, w = x.data.shape
    if window > h or window > w:
        raise ValueError("avg_pool2d: pooling window does not fit input")
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    out = win.mean(axis=(-2, -1))
    ho, wo = out.shape[2], out.shape[3]
    inv = 1.0 / (window * window)

    def backward_fn(g):
        if _wants_grad(x):
            gx = np.zeros_like(x.data)
            gs = g * inv
            for i in range(window):
                hi = i + stride * (ho - 1) + 1
                for j in range(window):
                    wj = j + stride * (wo - 1) + 1
                    gx[:, :, i:hi:stride, j:wj:stride] += gs
            _accum(x, gx)

    return _emit("avg_pool2d", (x,), out, backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims: [N,C,H,W] -> [N,C]."""
    if x.data.ndim != 4:
        raise ValueError("global_avg_pool: expected x[N,C,H,W]")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))
    inv = 1.0 / (h * w)

    def backward_fn(g):
        if _wants_grad(x):
            _accum(x, np.broadcast_to((g * inv)[:, :, None, None], x.data.shape))

    return _emit("global_avg_pool", (x,), out, backward_fn)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate [N,Ci,H,W] tensors along the channel axis."""
    if not tensors:
        raise ValueError("concat_channels: empty input list")
    first = tensors[0].data.shape
    for t in tensors:
        if t.data.ndim != 4:
            raise ValueError("concat_channels: expected 4-d tensors")
        s = t.data.shape
        if s[0] != first[0] or s[2] != first[2] or s[3] != first[3]:
            raise ValueError(f"concat_channels: N/H/W mismatch: {s} vs {first}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.data.shape[1] for t in tensors])

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if _wants_grad(t):
                _accum(t, g[:, lo:hi])

    return _emit("concat_channels", tuple(tensors), out, backward_fn)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Copy of channels [start, stop) of an [N,C,H,W] tensor."""
    if x.data.ndim != 4:
        raise ValueError("channel_slice: expected x[N,C,H,W]")
    c = x.data.shape[1]
    if not (0 <= start < stop <= c):
        raise ValueError(f"channel_slice: bad range [{start},{stop}) for {c} channels")
    out = x.data[:, start:stop].copy()

    def backward_fn(g):
        if _wants_grad(x):
            gx = np.zeros_like(x.data)
            gx[:, start:stop] = g
            _accum(x, gx)

    return _emit("channel_slice", (x,), out, backward_fn)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Identity (the input tensor itself) when ``training`` is false.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: rate {p} outside [0, 1)")
    if not training:
        return x
    mask = rng.random(x.data.shape) >= p
    scale = 1.0 / (1.0 - p)
    out = x.data * mask * scale

    def backward_fn(g):
        if _wants_grad(x):
            _accum(x, g * mask * scale)

    return _emit("dropout", (x,), out, backward_fn)


def bce_loss(prob: Tensor, label: Tensor) -> Tensor:
    """Mean binary cross-entropy of probabilities against {0,1} labels.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log; gradients
    are gated to zero outside the clamp interval.
    """
    if prob.data.shape != label.data.shape:
        raise ValueError(
            f"bce_loss: shape mismatch {prob.data.shape} vs {label.data.shape}")
    y = label.data
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("bce_loss: labels must be exactly 0 or 1")
    lo, hi = BCE_CLAMP, 1.0 - BCE_CLAMP
    pc = np.clip(prob.data, lo, hi)
    count = pc.size
    out = np.asarray(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).mean(),
                     dtype=prob.data.dtype)
    gate = (prob.data >= lo) & (prob.data <= hi)

    def backward_fn(g):
        if _wants_grad(prob):
            _accum(prob, g * gate * (pc - y) / (pc * (1.0 - pc) * count))
        if _wants_grad(label):
            _accum(label, g * (np.log1p(-pc) - np.log(pc)) / count)

    return _emit("bce_loss", (prob, label), out, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def backward_fn(g):
        if _wants_grad(a):
            _accum(a, g)
        if _wants_grad(b):
            _accum(b, g)

    return _emit("add", (a, b), out, backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = a.data - b.data

    def backward_fn(g):
        if _wants_grad(a):
            _accum(a, g)
        if _wants_grad(b):
            _accum(b, -g)

    return _emit("sub", (a, b), out, backward_fn)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    out = x.data * c

    def backward_fn(g):
        if _wants_grad(x):
            _accum(x, g * c)

    return _emit("mul_scalar", (x,), out, backward_fn)


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = x.data + c

    def backward_fn(g):
        if _wants_grad(x):
            _accum(x, g)

    return _emit("add_scalar", (x,), out, backward_fn)


def square(x: Tensor) -> Tensor:
    out = x.data * x.data

    def backward_fn(g):
        if _wants_grad(x):
            _accum(x, 2.0 * x.data * g)

    return _emit("square", (x,), out, backward_fn)


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward_fn(g):
        if _wants_grad(x):
            _accum(x, np.broadcast_to(g, x.data.shape))

    return _emit("sum", (x,), out, backward_fn)


def tmean(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    inv = 1.0 / x.data.size

    def backward_fn(g):
        if _wants_grad(x):
            _accum(x, np.broadcast_to(g * inv, x.data.shape))

    return _emit("mean", (x,), out, backward_fn)


def mean_channel(x: Tensor, index: int) -> Tensor:
    """Scalar mean of one channel of an [N,C,H,W] tensor."""
    if x.data.ndim != 4:
        raise ValueError("mean_channel: expected x[N,C,H,W]")
    if not 0 <= index < x.data.shape[1]:
        raise ValueError(f"mean_channel: channel {index} out of range")
    out = np.asarray(x.data[:, index].mean(), dtype=x.data.dtype)
    n, _, h, w = x.data.shape
    inv = 1.0 / (n * h * w)

    def backward_fn(g):
        if _wants_grad(x):
            gx = np.zeros_like(x.data)
            gx[:, index] = g * inv
            _accum(x, gx)

    return _emit("mean_channel", (x,), out, backward_fn)


# ---------------------------------------------------------------------------
# finite-difference gradient verification
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[list], Tensor], params: Sequence[Tensor],
               eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(params)`` must build and return a scalar loss from the given
    parameter tensors and be deterministic across calls (fix any rng inside).
    Both sides run in float64 (the test-oracle carve-out): the tape replays
    the exact production backward rules on float64 shadows of the parameters,
    and the numeric side uses central differences with a per-coordinate step
    of ``eps * max(1, |w|)``. The relative error of coordinate w is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    Central differences cost two forward passes per parameter, so graphs are
    capped at 10^4 parameters.
    """
    total = sum(p.data.size for p in params)
    if total > 10_000:
        raise ValueError(f"grad_check: {total} parameters exceeds the 10^4 cap")
    for p in params:
        if not p.requires_grad:
            raise ValueError("grad_check: all checked parameters need requires_grad")

    shadow = [Tensor(p.data.astype(np.float64), requires_grad=True, dtype=np.float64)
              for p in params]
    with Tape():
        loss = fn(list(shadow))
    backward(loss)
    analytic = [np.zeros(p.data.shape, dtype=np.float64) if p.grad is None
                else p.grad.copy() for p in shadow]
    for p in shadow:
        p.grad = None
        p.requires_grad = False

    def evaluate() -> float:
        out = fn(shadow)
        if out.data.size != 1:
            raise ValueError("grad_check: fn must return a scalar tensor")
        return float(out.data.reshape(()))

    worst = 0.0
    for i, p in enumerate(shadow):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            base = flat[j]
            h = eps * max(1.0, abs(base))
            flat[j] = base + h
            f_plus = evaluate()
            flat[j] = base - h
            f_minus = evaluate()
            flat[j] = base
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[i].reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
