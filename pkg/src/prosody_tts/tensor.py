"""Dense tensors with tape-based reverse-mode differentiation.

Every op is a plain function taking and returning :class:`Tensor`. While a
:class:`Tape` is active, ops whose inputs are tracked append a node holding
their inputs and a backward rule; :func:`backward` replays that list in
reverse. Outside a tape nothing is recorded, which is how inference runs.

Data lives in numpy arrays in row-major order. Ops never mutate their inputs.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (ContractError, DegenerateMaskError, DeterminismError,
                     DimensionError, ConfigurationError)

_state = threading.local()


def get_default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new constants."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tracked", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype.kind == "f" else get_default_dtype()
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tracked = requires_grad
        self._tape: Tape | None = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside are recorded when at least
    one input is tracked.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def __len__(self) -> int:
        return len(self.nodes)


@contextlib.contextmanager
def no_grad():
    prev = _active_tape()
    _state.tape = None
    try:
        yield
    finally:
        _state.tape = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=get_default_dtype()))


def _emit(data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._tracked = False
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(t._tracked for t in inputs):
        out._tracked = True
        out._tape = tape
        tape.nodes.append((out, inputs, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every tracked leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; callers zero them explicitly.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss._tape
    seed = np.ones_like(loss.data)
    if tape is None or loss._tape is not tape:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        raise ContractError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for out, inputs, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp._tracked:
                continue
            if inp._tape is None:
                inp.grad = gi.astype(inp.data.dtype, copy=True) if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (2 * g * ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g / (2 * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,))


# --- activations --------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    log = getattr(_state, "relu_log", None)
    if log is not None:
        log.append(pos)
    return _emit(np.where(pos, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * pos,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _emit(out, (a,), lambda g: (g * out * (1 - out),))


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    out = _softmax(a.data, axis)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _emit(out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    out = x - m - np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _emit(out, (a,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy needs [N, C] logits and [N] labels, got {logits.shape} {labels.shape}")
    picked = getitem(log_softmax(logits), (np.arange(len(labels)), labels))
    return scale(tsum(picked), -1.0 / len(labels))


def activation(a: Tensor, kind: str) -> Tensor:
    fns = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "softmax_lastdim": softmax}
    try:
        return fns[kind](a)
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}") from None


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, x)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits.

    Targets of exactly 0 or 1 drop the opposite term so infinite logits give
    exact zeros instead of ``0 * inf``.
    """
    z = logits.data
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=z.dtype)
    with np.errstate(invalid="ignore", over="ignore"):
        pos_term = np.where(y > 0, y * softplus(-z), 0)
        neg_term = np.where(y < 1, (1 - y) * softplus(z), 0)
    out = (pos_term + neg_term).astype(z.dtype)
    return _emit(out, (logits,), lambda g: (g * (_sigmoid(z) - y),))


# --- reductions and reshaping -----------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _emit(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)
    return _emit(np.ascontiguousarray(a.data[index]), (a,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (shape [V, D]) by integer ids of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(np.flatnonzero((ids.ravel() < 0) | (ids.ravel() >= vocab))[0])
        raise DimensionError(f"embedding id at flat index {bad} is {int(ids.ravel()[bad])}, table has {vocab} rows")
    shape, dtype = table.shape, table.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.ravel(), g.reshape(-1, shape[1]))
        return (full,)
    return _emit(table.data[ids], (table,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


# --- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
    return _emit(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean and unit variance, then affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data
    d = xd.shape[-1]

    def bw(g):
        ggamma = _unbroadcast(g * xhat, gd.shape)
        gbeta = _unbroadcast(g, gd.shape)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, ggamma, gbeta
    return _emit(xhat * gd + beta.data, (x, gamma, beta), bw)


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded cross-correlation along time.

    ``x`` is [T, Cin] or [B, T, Cin]; ``w`` is [k, Cin, Cout] with odd k.
    """
    k, cin, cout = w.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d kernel width must be odd, got {k}")
    if x.shape[-1] != cin:
        raise DimensionError(f"conv1d input channels {x.shape} do not match kernel {w.shape}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    bsz, t, _ = xd.shape
    if t < 1:
        raise DimensionError("conv1d needs at least one frame")
    pad = (k - 1) // 2
    xp = np.zeros((bsz, t + 2 * pad, cin), dtype=xd.dtype)
    xp[:, pad:pad + t] = xd
    cols = np.concatenate([xp[:, j:j + t] for j in range(k)], axis=-1)  # [B, T, k*Cin]
    wmat = w.data.reshape(k * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out = out + bias.data
    if squeeze:
        out = out[0]

    def bw(g):
        g3 = g[None] if squeeze else g
        gw = (cols.reshape(-1, k * cin).T @ g3.reshape(-1, cout)).reshape(k, cin, cout)
        gcols = g3 @ wmat.T
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j:j + t] += gcols[..., j * cin:(j + 1) * cin]
        gx = gxp[:, pad:pad + t]
        gx = gx[0] if squeeze else gx
        grads = [gx, gw]
        if bias is not None:
            grads.append(g3.reshape(-1, cout).sum(axis=0))
        return tuple(grads)
    inputs = (x, w) if bias is None else (x, w, bias)
    return _emit(out, inputs, bw)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> tuple[Tensor, Tensor]:
    """softmax(q kᵀ / √D + mask) v over the last two axes.

    ``mask`` is boolean, broadcastable to [..., Tq, Tk]; True marks keys a
    query may attend to. Every query row must keep at least one key.
    """
    d = q.shape[-1]
    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(mask.any(axis=-1)):
            raise DegenerateMaskError("attention mask leaves a query row with no visible key")
        bias = np.where(mask, 0, -np.inf).astype(scores.data.dtype)
        scores = add(scores, Tensor(bias))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


# --- losses ---------------------------------------------------------------------

def masked_mse(pred: Tensor, target, weights=None) -> Tensor:
    """Mean of squared error over cells whose weight is nonzero.

    ``weights`` broadcasts against ``pred``; the mean divides by the total
    weight expanded to the full shape.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.data.dtype)
    diff = sub(pred, Tensor(target))
    sq = square(diff)
    if weights is None:
        return mean(sq)
    w = np.broadcast_to(np.asarray(weights, dtype=pred.data.dtype), pred.shape)
    return scale(tsum(mul(sq, Tensor(np.ascontiguousarray(w)))), 1.0 / float(w.sum()))


# --- finite-difference checking ----------------------------------------------

def _scalar(value) -> float:
    if isinstance(value, Tensor):
        value = value.data
    return float(np.asarray(value, dtype=np.float64).reshape(()))


def grad_check_detailed(f: Callable[[], Tensor], params: dict[str, Tensor] | Sequence[Tensor],
                        eps: float = 1e-5, n_samples: int | None = None, seed: int = 0,
                        dtype=np.float64, min_per_tensor: int = 1, order: int | str = "adaptive") -> list[dict]:
    """Compare tape gradients to central differences at sampled coordinates.

    ``order`` selects the 2-point (error O(eps^2)) or 4-point (O(eps^4))
    central stencil, or ``"adaptive"``: the 4-point stencil at a wide step
    when no relu changes its active set anywhere on the stencil, otherwise
    the 2-point stencil at ``eps``. The wide step loses fewer digits to
    cancellation on tiny gradients; the fallback keeps kinks out of the
    stencil. Only forward activations decide, never the analytic gradient.

    Returns one record per checked coordinate with keys ``name``, ``index``,
    ``analytic``, ``numeric`` and ``rel_error``. The parameters are cast to
    ``dtype`` for the duration of the check and restored afterwards.
    """
    if order not in _STENCILS and order != "adaptive":
        raise ConfigurationError(f"stencil order must be 2, 4 or 'adaptive', got {order!r}")
    if not 1e-5 <= eps <= 1e-2:
        raise ConfigurationError(f"eps {eps} outside [1e-5, 1e-2]")
    if not isinstance(params, dict):
        params = {p.name or f"param{i}": p for i, p in enumerate(params)}
    saved = {name: (p.data, p.grad) for name, p in params.items()}
    try:
        for p in params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        with precision(dtype):
            first, second = _scalar(f()), _scalar(f())
            if first != second and not (math.isnan(first) and math.isnan(second)):
                raise DeterminismError(f"two evaluations differ: {first!r} vs {second!r}")
            with Tape():
                loss = f()
                if isinstance(loss, Tensor) and loss._tape is not None:
                    backward(loss)
            coords = _sample_coords(params, n_samples, seed, min_per_tensor)
            records = []
            for name, idx in coords:
                p = params[name]
                analytic = 0.0 if p.grad is None else float(p.grad[idx])
                if order == "adaptive":
                    numeric = _validated_difference(f, p.data, idx, eps)
                else:
                    numeric = _stencil_difference(f, p.data, idx, eps, order)
                denom = max(abs(numeric), abs(analytic), 1e-8)
                records.append({"name": name, "index": idx, "analytic": analytic,
                                "numeric": numeric, "rel_error": abs(numeric - analytic) / denom})
            return records
    finally:
        for name, p in params.items():
            p.data, p.grad = saved[name]


WIDE_STEP = 1e-3


def _stencil_difference(f, data: np.ndarray, idx, eps: float, order: int) -> float:
    offsets = _STENCILS[order]
    orig = data[idx]
    values = []
    try:
        for step in offsets:
            data[idx] = orig + step * eps
            values.append(_scalar(f()))
    finally:
        data[idx] = orig
    if order == 2:
        return (values[0] - values[1]) / (2 * eps)
    # pair symmetric points first so equal values cancel exactly
    return (8 * (values[1] - values[2]) - (values[0] - values[3])) / (12 * eps)


@contextlib.contextmanager
def _recording_relu_patterns():
    prev = getattr(_state, "relu_log", None)
    _state.relu_log = []
    try:
        yield _state.relu_log
    finally:
        _state.relu_log = prev


def _relu_signature(f) -> bytes:
    with _recording_relu_patterns() as log:
        f()
    if not log:
        return b""
    return np.packbits(np.concatenate([m.ravel() for m in log])).tobytes()


def _validated_difference(f, data: np.ndarray, idx, eps: float) -> float:
    base = _relu_signature(f)
    orig = data[idx]
    try:
        smooth = True
        for step in _STENCILS[4]:
            data[idx] = orig + step * WIDE_STEP
            if _relu_signature(f) != base:
                smooth = False
                break
    finally:
        data[idx] = orig
    if smooth:
        return _stencil_difference(f, data, idx, WIDE_STEP, 4)
    return _stencil_difference(f, data, idx, eps, 2)


_STENCILS = {2: (1.0, -1.0), 4: (2.0, 1.0, -1.0, -2.0)}


def _sample_coords(params: dict[str, Tensor], n_samples, seed, min_per_tensor):
    rng = np.random.default_rng(seed)
    names = list(params)
    coords = []
    for name in names:
        size = params[name].size
        take = min(size, min_per_tensor)
        for flat in rng.choice(size, size=take, replace=False):
            coords.append((name, np.unravel_index(int(flat), params[name].shape)))
    if n_samples is None:
        return [(name, np.unravel_index(i, params[name].shape))
                for name in names for i in range(params[name].size)]
    sizes = np.array([params[n].size for n in names], dtype=np.float64)
    remaining = max(0, n_samples - len(coords))
    if remaining:
        which = rng.choice(len(names), size=remaining, p=sizes / sizes.sum())
        for w in which:
            name = names[int(w)]
            flat = int(rng.integers(params[name].size))
            coords.append((name, np.unravel_index(flat, params[name].shape)))
    return coords


def grad_check(f: Callable[[], Tensor], params, eps: float = 1e-5, n_samples: int | None = None,
               seed: int = 0, dtype=np.float64, order: int | str = "adaptive") -> float:
    """Maximum relative error between tape and finite-difference gradients.

    Relative error per coordinate is ``|fd - ad| / max(|fd|, |ad|, 1e-8)``.
    """
    records = grad_check_detailed(f, params, eps=eps, n_samples=n_samples, seed=seed, dtype=dtype,
                                  order=order)
    return max((r["rel_error"] for r in records), default=0.0)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
