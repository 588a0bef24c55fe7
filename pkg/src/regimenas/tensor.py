"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything in this package that needs gradients runs on the small engine in
this module: a ``Tensor`` wraps a numpy array, and operations executed while a
``GradTape`` is active are recorded onto the tape as a Wengert list.  Calling
``tape.backward(root)`` replays the list in reverse insertion order and
accumulates gradients additively into ``Tensor.grad`` buffers, so fan-out is
handled by construction.

Tensors are immutable after forward construction except for their ``grad``
buffer and explicit in-place parameter updates performed by the optimizer
between steps.  A tape and the tensors recorded on it belong to one worker at
a time; independent trainings use independent tapes.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "GradTape",
    "TensorError",
    "ShapeError",
    "NumericError",
    "set_finite_checks",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "tanh",
    "sigmoid",
    "relu",
    "leaky_relu",
    "gelu",
    "exp",
    "log",
    "absolute",
    "softmax",
    "tsum",
    "mean",
    "variance",
    "concat",
    "tslice",
    "transpose",
    "reshape",
    "pad",
    "dropout",
    "spectral_norm",
    "power_iteration",
]


class TensorError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(TensorError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(TensorError):
    """A numeric-domain violation (div by zero, log <= 0, NaN/Inf output)."""


# NaN/Inf produced by a forward op is an error state, never silent: a single
# bad value would otherwise corrupt every downstream score.  The check can be
# switched off for throughput once a pipeline is trusted.
_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf output checking. Returns the previous setting."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return previous


class Tensor:
    """Dense row-major float64 value, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; non-Tensor operands are lifted to constants.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class GradTape:
    """Append-only record of forward operations, replayed in reverse.

    Use as a context manager around the forward pass; ``backward`` may be
    called exactly once per tape.  Nodes are topologically ordered by
    construction (an op can only consume already-built tensors), so no cycle
    can ever be recorded.
    """

    def __init__(self):
        # Each node: (op name, input tensors, output tensor, backward fn).
        # The backward fn maps the output gradient to per-input gradients.
        self.nodes: list = []
        self._spent = False

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise TensorError("GradTape context exited out of order")

    def record(self, name: str, inputs: tuple, output: Tensor,
               backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> None:
        self.nodes.append((name, inputs, output, backward))

    def backward(self, root: Tensor) -> None:
        """Populate ``grad`` on every tensor that influenced the scalar root."""
        if self._spent:
            raise TensorError("backward() already ran on this tape; build a new tape")
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        self._spent = True
        root.grad = np.ones_like(root.data)
        for name, inputs, output, backward_fn in reversed(self.nodes):
            out_grad = output.grad
            if out_grad is None:
                continue
            in_grads = backward_fn(out_grad)
            for tensor, grad in zip(inputs, in_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad += grad


_TAPE_STACK: list = []


def _active_tape() -> Optional[GradTape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(name: str, inputs: tuple, data: np.ndarray,
          backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Build an op output, checking finiteness and recording on the tape."""
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from op '{name}'")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = _active_tape()
    if tape is not None and requires:
        tape.record(name, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", (a, b), a.data + b.data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", (a, b), a.data - b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make("mul", (a, b), ad * bd, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if np.any(bd == 0.0):
        raise NumericError("division by zero")

    def backward(g):
        return (_unbroadcast(g / bd, a.shape),
                _unbroadcast(-g * ad / (bd * bd), b.shape))

    return _make("div", (a, b), ad / bd, backward)


def neg(a: Tensor) -> Tensor:
    return _make("neg", (a,), -a.data, lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked (batched) leading dimensions.

    Gradients are the classical dA = dC @ B^T and dB = A^T @ dC, with
    broadcast batch dimensions summed back onto 2-D operands.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", (a, b), np.matmul(ad, bd), backward)


def transpose(a: Tensor, axes: Optional[tuple] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _make("transpose", (a,), a.data.transpose(axes), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _make("reshape", (a,), a.data.reshape(shape), backward)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.clip(x, 0, None))),
                   np.exp(np.clip(x, None, 0)) / (1.0 + np.exp(np.clip(x, None, 0))))
    return _make("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make("relu", (a,), np.where(mask, a.data, 0.0), backward)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * np.where(mask, 1.0, slope),)

    return _make("leaky_relu", (a,), np.where(mask, a.data, slope * a.data), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)

    def backward(g):
        return (g * (cdf + x * pdf),)

    return _make("gelu", (a,), x * cdf, backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericError("log of non-positive value")
    ad = a.data
    return _make("log", (a,), np.log(ad), lambda g: (g / ad,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make("abs", (a,), np.abs(a.data), lambda g: (g * sign,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction) along ``axis``."""
    if a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make("softmax", (a,), out, backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make("sum", (a,), a.data.sum(axis=axis, keepdims=keepdims), backward)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError("mean over an empty axis")

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.shape).copy(),)

    return _make("mean", (a,), a.data.mean(axis=axis, keepdims=keepdims), backward)


def variance(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """Population variance (ddof=0)."""
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError("variance over an empty axis")
    mu = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mu

    def backward(g):
        gg = g if (axis is None or keepdims) else np.expand_dims(g, axis)
        return (2.0 * centered * gg / count,)

    return _make("variance", (a,), a.data.var(axis=axis, keepdims=keepdims), backward)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for i in range(len(sizes)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(index)])
        return tuple(pieces)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make("concat", tuple(tensors), data, backward)


def tslice(a: Tensor, key) -> Tensor:
    """Basic slicing (slices and ints only; no repeated-index fancy indexing)."""
    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make("slice", (a,), a.data[key].copy(), backward)


def pad(a: Tensor, pad_width: Sequence[tuple]) -> Tensor:
    """Zero padding; ``pad_width`` is per-axis (before, after) pairs."""
    def backward(g):
        key = tuple(slice(b, g.shape[i] - aft if aft else None)
                    for i, (b, aft) in enumerate(pad_width))
        return (g[key].copy(),)

    return _make("pad", (a,), np.pad(a.data, pad_width), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator,
            training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not training or rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise NumericError(f"dropout rate out of range: {rate}")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make("dropout", (a,), a.data * mask, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# spectral norm (power iteration)
# ---------------------------------------------------------------------------

def power_iteration(w: np.ndarray, iters: int = 50, tol: float = 1e-6,
                    v0: Optional[np.ndarray] = None):
    """Estimate the dominant singular triple of a 2-D matrix.

    Iterates v <- normalize(W^T W v) from a deterministic start; the Rayleigh
    estimates ||W v_k|| are monotone non-decreasing for this iteration, so the
    returned history can be checked for monotonicity.  Returns
    ``(sigma, u, v, history)``; a zero matrix yields sigma == 0.
    """
    if w.ndim != 2:
        raise ShapeError(f"power iteration needs a 2-D matrix, got {w.shape}")
    if iters < 1:
        raise NumericError("power iteration needs iters >= 1")
    m, n = w.shape
    if v0 is not None:
        v = v0 / max(np.linalg.norm(v0), 1e-300)
    else:
        v = np.full(n, 1.0 / math.sqrt(n))
    history = []
    sigma = 0.0
    u = np.zeros(m)
    for _ in range(iters):
        wv = w @ v
        sigma_new = float(np.linalg.norm(wv))
        if sigma_new <= 1e-300:
            # v is (numerically) in the null space; deterministic restart off
            # the axis, otherwise the matrix is zero on this subspace.
            history.append(0.0)
            return 0.0, np.zeros(m), v, history
        u = wv / sigma_new
        history.append(sigma_new)
        vt = w.T @ u
        nv = np.linalg.norm(vt)
        if nv <= 1e-300:
            break
        v = vt / nv
        if abs(sigma_new - sigma) <= tol * max(1.0, sigma_new):
            sigma = sigma_new
            break
        sigma = sigma_new
    return sigma, u, v, history


def spectral_norm(w, iters: int = 50, tol: float = 1e-6):
    """Largest-singular-value estimate of a 2-D matrix via power iteration.

    Accepts a plain ndarray (returns a float) or a Tensor (returns a scalar
    Tensor whose gradient is the outer product u v^T of the converged singular
    vectors, frozen from the forward pass).
    """
    if isinstance(w, Tensor):
        sigma, u, v, _ = power_iteration(w.data, iters=iters, tol=tol)
        outer = np.outer(u, v)

        def backward(g):
            return (float(g) * outer,)

        return _make("spectral_norm", (w,), np.asarray(sigma), backward)
    sigma, _, _, _ = power_iteration(np.asarray(w, dtype=np.float64),
                                     iters=iters, tol=tol)
    return sigma
