"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Everything downstream (dense layers, the recurrent encoder, the generative
and perturbation heads, the twin critics) is built from the primitives here.
The design trades throughput for determinism and auditability: one tape per
training step, double precision throughout, no graph reuse.

A ``Tensor`` owns a numpy float64 array plus an optional gradient of the
same shape.  Ops are methods on a ``Tape``; each call computes the forward
value eagerly and records a backward rule.  ``Tape.backward`` walks the
recorded ops in reverse creation order (which is already topological) and
accumulates gradients into every tensor that participated.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Input shapes do not conform for the named op."""


class NonFiniteError(FloatingPointError):
    """A value that must be finite (gradient, loss) is NaN or infinite."""


class Tensor:
    """A dense float64 array with an optional same-shape gradient."""

    __slots__ = ("values", "grad", "name")

    def __init__(self, values, name: str | None = None):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item: tensor has {self.values.size} elements, expected 1")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.values.shape})"


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, x: Tensor, y: Tensor) -> None:
    try:
        np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {x.shape} and {y.shape} do not broadcast") from None


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Ops append in creation order, so the record is topologically sorted by
    construction; ``backward`` visits each node exactly once, in reverse.
    """

    def __init__(self):
        # (output, inputs, backward_fn); backward_fn(out_grad) -> grads per input
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
        self._nodes.append((out, inputs, backward_fn))
        return out

    # --- elementwise binary (numpy broadcasting; gradients un-broadcast) ---

    def add(self, x: Tensor, y: Tensor) -> Tensor:
        _check_broadcast("add", x, y)
        out = Tensor(x.values + y.values)

        def bwd(g):
            return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

        return self._record(out, (x, y), bwd)

    def sub(self, x: Tensor, y: Tensor) -> Tensor:
        _check_broadcast("sub", x, y)
        out = Tensor(x.values - y.values)

        def bwd(g):
            return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)

        return self._record(out, (x, y), bwd)

    def mul(self, x: Tensor, y: Tensor) -> Tensor:
        _check_broadcast("mul", x, y)
        out = Tensor(x.values * y.values)

        def bwd(g):
            return _unbroadcast(g * y.values, x.shape), _unbroadcast(g * x.values, y.shape)

        return self._record(out, (x, y), bwd)

    def minimum(self, x: Tensor, y: Tensor) -> Tensor:
        """Elementwise min; on ties the gradient routes to `x`."""
        _check_broadcast("minimum", x, y)
        out = Tensor(np.minimum(x.values, y.values))
        mask = x.values <= y.values

        def bwd(g):
            return _unbroadcast(g * mask, x.shape), _unbroadcast(g * ~mask, y.shape)

        return self._record(out, (x, y), bwd)

    def maximum(self, x: Tensor, y: Tensor) -> Tensor:
        """Elementwise max; on ties the gradient routes to `x`."""
        _check_broadcast("maximum", x, y)
        out = Tensor(np.maximum(x.values, y.values))
        mask = x.values >= y.values

        def bwd(g):
            return _unbroadcast(g * mask, x.shape), _unbroadcast(g * ~mask, y.shape)

        return self._record(out, (x, y), bwd)

    # --- matmul ---

    def matmul(self, x: Tensor, y: Tensor) -> Tensor:
        if x.values.ndim != 2 or y.values.ndim != 2 or x.shape[1] != y.shape[0]:
            raise ShapeError(f"matmul: shapes {x.shape} and {y.shape} do not conform")
        out = Tensor(x.values @ y.values)

        def bwd(g):
            return g @ y.values.T, x.values.T @ g

        return self._record(out, (x, y), bwd)

    # --- elementwise unary ---

    def tanh(self, x: Tensor) -> Tensor:
        v = np.tanh(x.values)
        out = Tensor(v)

        def bwd(g):
            return (g * (1.0 - v * v),)

        return self._record(out, (x,), bwd)

    def sigmoid(self, x: Tensor) -> Tensor:
        v = expit(x.values)
        out = Tensor(v)

        def bwd(g):
            return (g * v * (1.0 - v),)

        return self._record(out, (x,), bwd)

    def relu(self, x: Tensor) -> Tensor:
        mask = x.values > 0.0
        out = Tensor(np.where(mask, x.values, 0.0))

        def bwd(g):
            return (g * mask,)

        return self._record(out, (x,), bwd)

    def exp(self, x: Tensor) -> Tensor:
        v = np.exp(x.values)
        out = Tensor(v)

        def bwd(g):
            return (g * v,)

        return self._record(out, (x,), bwd)

    def log(self, x: Tensor) -> Tensor:
        out = Tensor(np.log(x.values))

        def bwd(g):
            return (g / x.values,)

        return self._record(out, (x,), bwd)

    def square(self, x: Tensor) -> Tensor:
        out = Tensor(x.values * x.values)

        def bwd(g):
            return (2.0 * g * x.values,)

        return self._record(out, (x,), bwd)

    def clamp(self, x: Tensor, lo: float, hi: float) -> Tensor:
        """Clip into [lo, hi]; gradient is identity inside and at the bounds,
        zero strictly outside (pass-through subgradient at the bounds)."""
        if not lo <= hi:
            raise ShapeError(f"clamp: lo {lo} exceeds hi {hi}")
        out = Tensor(np.clip(x.values, lo, hi))
        mask = (x.values >= lo) & (x.values <= hi)

        def bwd(g):
            return (g * mask,)

        return self._record(out, (x,), bwd)

    # --- reductions ---

    def sum(self, x: Tensor, axis: int | None = None) -> Tensor:
        if axis is None:
            out = Tensor(np.array([[x.values.sum()]]))

            def bwd(g):
                return (np.full(x.shape, g.reshape(-1)[0]),)

        else:
            out = Tensor(x.values.sum(axis=axis, keepdims=True))

            def bwd(g):
                return (np.broadcast_to(g, x.shape).copy(),)

        return self._record(out, (x,), bwd)

    def mean(self, x: Tensor, axis: int | None = None) -> Tensor:
        if axis is None:
            n = x.values.size
            out = Tensor(np.array([[x.values.mean()]]))

            def bwd(g):
                return (np.full(x.shape, g.reshape(-1)[0] / n),)

        else:
            n = x.shape[axis]
            out = Tensor(x.values.mean(axis=axis, keepdims=True))

            def bwd(g):
                return (np.broadcast_to(g / n, x.shape).copy(),)

        return self._record(out, (x,), bwd)

    # --- layout ---

    def concat(self, xs: list[Tensor], axis: int = 1) -> Tensor:
        if not xs:
            raise ShapeError("concat: empty input list")
        for t in xs[1:]:
            if t.values.ndim != xs[0].values.ndim:
                raise ShapeError("concat: inputs have differing ranks")
        out = Tensor(np.concatenate([t.values for t in xs], axis=axis))
        splits = np.cumsum([t.shape[axis] for t in xs])[:-1]

        def bwd(g):
            return tuple(np.split(g, splits, axis=axis))

        return self._record(out, tuple(xs), bwd)

    def slice(self, x: Tensor, lo: int, hi: int, axis: int = 1) -> Tensor:
        """Contiguous slice [lo, hi) along `axis`."""
        if not 0 <= lo <= hi <= x.shape[axis]:
            raise ShapeError(f"slice: [{lo},{hi}) out of range for axis {axis} of {x.shape}")
        idx = tuple(slice(lo, hi) if a == axis else slice(None) for a in range(x.values.ndim))
        out = Tensor(x.values[idx])

        def bwd(g):
            full = np.zeros(x.shape)
            full[idx] = g
            return (full,)

        return self._record(out, (x,), bwd)

    # --- backward pass ---

    def backward(self, output: Tensor, params: list[Tensor] | None = None) -> None:
        """Populate `.grad` on every tensor this tape touched.

        `output` must be scalar (one element).  Gradients of all
        participating tensors are reset first, so repeated backward calls on
        identical tapes are bitwise reproducible.  Tensors in `params` that
        never appeared on the tape get an explicit zero gradient.
        """
        if output.values.size != 1:
            raise ShapeError(f"backward: output has shape {output.shape}, expected a scalar")
        seen: set[int] = set()
        for out, inputs, _ in self._nodes:
            for t in (out, *inputs):
                if id(t) not in seen:
                    seen.add(id(t))
                    # reuse persistent grad buffers (parameters) across tapes
                    if t.grad is not None and t.grad.shape == t.shape:
                        t.grad.fill(0.0)
                    else:
                        t.grad = np.zeros(t.shape)
        for t in params or ():
            if id(t) not in seen:
                if t.grad is not None and t.grad.shape == t.shape:
                    t.grad.fill(0.0)
                else:
                    t.grad = np.zeros(t.shape)
        output.grad = np.ones(output.shape)
        for out, inputs, bwd in reversed(self._nodes):
            grads = bwd(out.grad)
            for t, g in zip(inputs, grads):
                t.grad += g


def grad_check(fn, xs: list[np.ndarray], h: float = 1e-5) -> float:
    """Compare tape gradients of a scalar-valued `fn` with central differences.

    `fn(tape, tensors)` must build its result on the given tape and return a
    scalar Tensor.  Returns the max over all coordinates of
    ``|analytic - central_difference| / max(1, |analytic|)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"grad_check: perturbation {h} outside [1e-7, 1e-3]")
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    tape = Tape()
    tensors = [Tensor(x.copy()) for x in xs]
    out = fn(tape, tensors)
    tape.backward(out)
    analytic = [t.grad.copy() for t in tensors]

    def value_at(pts: list[np.ndarray]) -> float:
        t = Tape()
        return fn(t, [Tensor(p) for p in pts]).item()

    worst = 0.0
    for k in range(len(xs)):
        flat = xs[k].reshape(-1)
        for i in range(flat.size):
            bump = np.zeros_like(flat)
            bump[i] = h
            hi_pt = [p.copy() for p in xs]
            lo_pt = [p.copy() for p in xs]
            hi_pt[k] = (flat + bump).reshape(xs[k].shape)
            lo_pt[k] = (flat - bump).reshape(xs[k].shape)
            f_hi = value_at(hi_pt)
            f_lo = value_at(lo_pt)
            if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
                raise NonFiniteError(
                    f"grad_check: non-finite value at input {k}, coordinate {i}"
                )
            numeric = (f_hi - f_lo) / (2.0 * h)
            a = analytic[k].reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


class Adam:
    """Adam with bias correction over a fixed list of parameter tensors.

    Keeps per-parameter first/second moments and a shared step counter.
    A non-finite gradient rejects the whole step and names the offending
    parameter block; parameters are left untouched in that case.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0.0:
            raise ValueError(f"Adam: learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self) -> None:
        grads = []
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros(p.shape)
            if not np.all(np.isfinite(g)):
                label = p.name or f"parameter[{i}]"
                raise NonFiniteError(f"adam_step: non-finite gradient in {label}")
            grads.append(g)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.values -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
