"""Reverse-mode automatic differentiation on dense float64 arrays.

Values are ``Tensor`` objects wrapping numpy arrays and are treated as
immutable once built.  Primitives execute eagerly; while a ``Tape`` is
active every executed primitive appends itself together with closures
that compute vector-Jacobian products, so ``backward`` can replay the
step in reverse order (execution order is already topological, so each
node is visited exactly once).  Trainable parameters live in a
``ParamStore`` which owns gradient slots and Adam moment state.

Without an active tape the same primitives run as plain numpy calls,
which is the inference path.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor", "Tape", "ParamStore", "tensor", "record", "kink_trace",
    "matmul", "add", "sub", "mul", "div", "neg", "scale", "relu", "abs_",
    "exp", "sigmoid", "softmax_last", "concat_last", "reshape", "moveaxis",
    "swap_last2", "broadcast_to", "slice_axis", "sum_all", "mean_abs",
    "conv2d_grid", "elementwise", "backward", "adam_step",
    "finite_diff_check", "Affine", "Fcn2",
]


class Tensor:
    """Dense float64 array plus autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    """Build a Tensor from array-like data, rejecting NaN/Inf entries."""
    t = Tensor(data, requires_grad=requires_grad)
    if not np.isfinite(t.data).all():
        raise NumericError("tensor construction rejects non-finite entries")
    return t


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Append-only record of executed primitives for one forward pass."""

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __len__(self):
        return len(self._nodes)


_ACTIVE: Tape | None = None


@contextmanager
def record(tape=None):
    """Activate a tape so primitives register themselves for backprop."""
    global _ACTIVE
    tape = Tape() if tape is None else tape
    prev = _ACTIVE
    _ACTIVE = tape
    try:
        yield tape
    finally:
        _ACTIVE = prev


def _emit(out, pairs):
    tape = _ACTIVE
    if tape is not None:
        live = [(t, vjp) for t, vjp in pairs if t.requires_grad]
        if live:
            out.requires_grad = True
            out.tape = tape
            tape._nodes.append((out, live))
    return out


# Sign patterns of kinked-activation inputs (ReLU, abs) are collected here
# while a trace is active; the finite-difference checker compares them
# between perturbed evaluations to skip coordinates that cross a kink.
_KINK_SIGNS: list | None = None


@contextmanager
def kink_trace():
    global _KINK_SIGNS
    prev = _KINK_SIGNS
    _KINK_SIGNS = trace = []
    try:
        yield trace
    finally:
        _KINK_SIGNS = prev


def _note_kink(x):
    if _KINK_SIGNS is not None:
        _KINK_SIGNS.append(np.sign(x))


def _unbroadcast(g, shape):
    """Sum a gradient down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


def matmul(a, b):
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = Tensor(np.matmul(a.data, b.data))
    except ValueError:
        raise ShapeError(f"matmul batch dimensions do not broadcast: {a.shape} @ {b.shape}") from None

    def da(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)

    def db(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)

    return _emit(out, [(a, da), (b, db)])


def add(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return _emit(out, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _emit(out, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ])


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _emit(out, [
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ])


def div(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "div")
    out = Tensor(a.data / b.data)
    return _emit(out, [
        (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
    ])


def neg(a):
    a = _lift(a)
    out = Tensor(-a.data)
    return _emit(out, [(a, lambda g: -g)])


def scale(a, c):
    """Multiply by a python scalar constant."""
    a = _lift(a)
    c = float(c)
    out = Tensor(a.data * c)
    return _emit(out, [(a, lambda g: g * c)])


def relu(a):
    a = _lift(a)
    _note_kink(a.data)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0   # subgradient 0 at the kink
    return _emit(out, [(a, lambda g: g * mask)])


def abs_(a):
    a = _lift(a)
    _note_kink(a.data)
    out = Tensor(np.abs(a.data))
    sign = np.sign(a.data)  # sign(0) == 0, matching the ReLU convention
    return _emit(out, [(a, lambda g: g * sign)])


def exp(a):
    a = _lift(a)
    out = Tensor(np.exp(a.data))
    return _emit(out, [(a, lambda g: g * out.data)])


def sigmoid(a):
    a = _lift(a)
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = Tensor(out_data)
    return _emit(out, [(a, lambda g: g * out.data * (1.0 - out.data))])


def softmax_last(a):
    """Row-stochastic softmax over the last axis, stabilised by max-shift."""
    a = _lift(a)
    if a.shape[-1] < 1:
        raise ShapeError("softmax_last needs at least one entry per row")
    m = np.max(a.data, axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise NumericError("softmax_last: row with every entry at -inf")
    e = np.exp(a.data - m)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))

    def da(g):
        s = out.data
        return s * (g - (g * s).sum(axis=-1, keepdims=True))

    return _emit(out, [(a, da)])


def concat_last(parts):
    """Concatenate tensors along the last axis."""
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ShapeError("concat_last of zero tensors")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last: leading shapes differ: {[p.shape for p in parts]}"
            )
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1))
    sizes = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + sizes)
    pairs = []
    for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
        pairs.append((p, lambda g, lo=lo, hi=hi: g[..., lo:hi]))
    return _emit(out, pairs)


def reshape(a, shape):
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    out = Tensor(np.reshape(a.data, shape))
    return _emit(out, [(a, lambda g: np.reshape(g, a.data.shape))])


def moveaxis(a, src, dst):
    a = _lift(a)
    out = Tensor(np.moveaxis(a.data, src, dst))
    return _emit(out, [(a, lambda g: np.moveaxis(g, dst, src))])


def swap_last2(a):
    a = _lift(a)
    if a.ndim < 2:
        raise ShapeError(f"swap_last2 needs ndim >= 2, got shape {a.shape}")
    out = Tensor(np.swapaxes(a.data, -1, -2))
    return _emit(out, [(a, lambda g: np.swapaxes(g, -1, -2))])


def broadcast_to(a, shape):
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = Tensor(np.broadcast_to(a.data, shape))
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _emit(out, [(a, lambda g: _unbroadcast(g, a.data.shape))])


def slice_axis(a, axis, start, stop):
    """Contiguous slice [start, stop) along one axis."""
    a = _lift(a)
    axis = int(axis)
    if not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"slice_axis: axis {axis} out of range for shape {a.shape}")
    axis %= a.ndim
    index = (slice(None),) * axis + (slice(start, stop),)
    out = Tensor(a.data[index])

    def da(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return full

    return _emit(out, [(a, da)])


def sum_all(a):
    a = _lift(a)
    out = Tensor(a.data.sum())
    return _emit(out, [(a, lambda g: np.broadcast_to(g, a.data.shape).copy())])


def mean_abs(a):
    """Mean of absolute values over every entry."""
    a = _lift(a)
    if a.size == 0:
        raise ShapeError("mean_abs of an empty tensor")
    return scale(sum_all(abs_(a)), 1.0 / a.size)


@lru_cache(maxsize=None)
def _conv_scatter_idx(n_h, n_w, kh, kw):
    # flat index into the zero-padded grid for each (cell, kernel offset)
    ph, pw = kh // 2, kw // 2
    wp = n_w + 2 * pw
    idx = np.empty(n_h * n_w * kh * kw, dtype=np.intp)
    pos = 0
    for i in range(n_h):
        for j in range(n_w):
            for a in range(kh):
                for b in range(kw):
                    idx[pos] = (i + a) * wp + (j + b)
                    pos += 1
    return idx


def conv2d_grid(x, w, n_h, n_w):
    """2-D convolution over a row-major cell grid with same-size zero padding.

    x: (..., n_h*n_w, c_in) cells in row-major order; w: (kh, kw, c_in, c_out).
    """
    x, w = _lift(x), _lift(w)
    if w.ndim != 4:
        raise ShapeError(f"conv2d_grid kernel must be 4-d, got {w.shape}")
    kh, kw, c_in, c_out = w.shape
    if x.ndim < 2 or x.shape[-1] != c_in or x.shape[-2] != n_h * n_w:
        raise ShapeError(
            f"conv2d_grid input {x.shape} does not match grid {n_h}x{n_w} with c_in={c_in}"
        )
    lead = x.shape[:-2]
    ph, pw = kh // 2, kw // 2
    xb = x.data.reshape((-1, n_h, n_w, c_in))
    xp = np.pad(xb, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))       # (B,n_h,n_w,c_in,kh,kw)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    cols = cols.reshape(-1, n_h * n_w, kh * kw * c_in)
    wf = w.data.reshape(kh * kw * c_in, c_out)
    out = Tensor((cols @ wf).reshape(lead + (n_h * n_w, c_out)))

    def dx(g):
        gb = g.reshape(-1, n_h * n_w, c_out)
        dcols = gb @ wf.T
        nb = gb.shape[0]
        acc = np.zeros((nb, (n_h + 2 * ph) * (n_w + 2 * pw), c_in))
        vals = dcols.reshape(nb, n_h * n_w * kh * kw, c_in)
        idx = _conv_scatter_idx(n_h, n_w, kh, kw)
        np.add.at(acc, (np.arange(nb)[:, None], idx[None, :]), vals)
        acc = acc.reshape(nb, n_h + 2 * ph, n_w + 2 * pw, c_in)
        return acc[:, ph:ph + n_h, pw:pw + n_w, :].reshape(x.data.shape)

    def dw(g):
        gb = g.reshape(-1, n_h * n_w, c_out)
        return np.einsum("bnk,bno->ko", cols, gb).reshape(w.data.shape)

    return _emit(out, [(x, dx), (w, dw)])


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "concat_last": lambda *ts: concat_last(list(ts)),
    "mean_abs": mean_abs,
}


def elementwise(kind, *operands):
    """Dispatch a named elementwise/shape op: add, sub, mul, concat_last, mean_abs."""
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind: {kind!r}")
    return _ELEMENTWISE[kind](*operands)


def backward(loss, params=None):
    """Propagate d(loss)/dx through the recorded tape into leaf gradients.

    When a ParamStore is given, parameters untouched by the forward pass
    get explicit zero gradients and the store is marked ready for an
    optimizer step.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None or len(tape) == 0:
        raise NumericError("backward called with an empty computation record")
    if tape._consumed:
        raise NumericError("computation record was already consumed by backward")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, pairs in reversed(tape._nodes):
        g = out.grad
        if g is None:
            continue
        for t, vjp in pairs:
            contrib = vjp(g)
            t.grad = contrib if t.grad is None else t.grad + contrib
        out.grad = None
    if params is not None:
        for _, p in params.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        params._grads_ready = True


def _fans(shape):
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    receptive = 1
    for s in shape[:-2]:
        receptive *= s
    return receptive * shape[-2], receptive * shape[-1]


class ParamStore:
    """Ordered, named collection of trainable tensors with Adam state."""

    def __init__(self, seed=0):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.rng = np.random.default_rng(seed)
        self._grads_ready = False

    def param(self, name, shape, init="glorot"):
        """Create and register a parameter; names must be unique."""
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        shape = tuple(int(s) for s in shape)
        if isinstance(init, str) and init == "glorot":
            fan_in, fan_out = _fans(shape)
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-bound, bound, size=shape)
        elif isinstance(init, str) and init == "zeros":
            data = np.zeros(shape)
        elif isinstance(init, tuple) and init and init[0] == "const":
            data = np.full(shape, float(init[1]))
        else:
            data = np.array(init, dtype=np.float64).reshape(shape)
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros(shape)
        self._v[name] = np.zeros(shape)
        return t

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def get(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def n_values(self):
        return sum(p.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None
        self._grads_ready = False

    def snapshot(self):
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state(self, state, strict=True):
        if strict:
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            if missing or extra:
                raise ValueError(
                    f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}"
                )
        for name, arr in state.items():
            if name not in self._params:
                continue
            p = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"parameter {name!r} shape mismatch: stored {arr.shape}, expected {p.data.shape}"
                )
            p.data = arr.copy()

    def adam_step(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        """One bias-corrected Adam update from the gradients of the last backward."""
        if not self._grads_ready:
            raise NumericError("adam_step called without a fresh backward pass")
        self.step_count += 1
        c1 = 1.0 - beta1 ** self.step_count
        c2 = 1.0 - beta2 ** self.step_count
        for name, p in self._params.items():
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * (g * g)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        self.zero_grad()


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    params.adam_step(lr, beta1=beta1, beta2=beta2, eps=eps)


def finite_diff_check(f, params, eps=1e-5):
    """Worst relative error between analytic gradients and central differences.

    ``f(params) -> scalar Tensor`` must be deterministic.  Coordinates whose
    +/-eps evaluations disagree on the sign pattern of any kinked-activation
    input (ReLU, abs) are skipped, since the two-sided difference straddles
    a non-differentiable point there.
    """
    params.zero_grad()
    with record():
        loss = f(params)
        if not np.isfinite(loss.data).all():
            raise NumericError("finite_diff_check: non-finite base evaluation")
        backward(loss, params)
    analytic = {name: p.grad.copy() for name, p in params.items()}
    params.zero_grad()

    def probe():
        with kink_trace() as signs:
            val = f(params)
        if not np.isfinite(val.data).all():
            raise NumericError("finite_diff_check: non-finite perturbed evaluation")
        return float(val.data), signs

    worst = 0.0
    for name, p in params.items():
        base = p.data
        for idx in np.ndindex(base.shape):
            bumped = base.copy()
            bumped[idx] += eps
            p.data = bumped
            f_plus, s_plus = probe()
            bumped = base.copy()
            bumped[idx] -= eps
            p.data = bumped
            f_minus, s_minus = probe()
            p.data = base
            if len(s_plus) != len(s_minus) or any(
                not np.array_equal(sp, sm) for sp, sm in zip(s_plus, s_minus)
            ):
                continue
            numeric = (f_plus - f_minus) / (2.0 * eps)
            ana = float(analytic[name][idx])
            err = abs(numeric - ana) / max(abs(numeric), abs(ana), 1e-6)
            worst = max(worst, err)
    return worst


class Affine:
    """Single affine map x W + b with optional ReLU, parameters in a ParamStore."""

    def __init__(self, store, name, d_in, d_out, activation="relu"):
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation: {activation!r}")
        self.activation = activation
        self.w = store.param(f"{name}.w", (d_in, d_out))
        self.b = store.param(f"{name}.b", (d_out,), init="zeros")

    def __call__(self, x):
        y = add(matmul(x, self.w), self.b)
        return relu(y) if self.activation == "relu" else y


class Fcn2:
    """Two stacked affine layers; the hidden layer is always ReLU."""

    def __init__(self, store, name, d_in, d_hidden, d_out, final_activation="relu"):
        self.l1 = Affine(store, f"{name}.l1", d_in, d_hidden)
        self.l2 = Affine(store, f"{name}.l2", d_hidden, d_out, activation=final_activation)

    def __call__(self, x):
        return self.l2(self.l1(x))
