"""Reverse-mode autodiff over numpy arrays with an explicit recording tape.

Forward ops run eagerly on the arrays inside `Tensor`s. While a `Tape` is
active (as a context manager), every primitive that touches a grad-needing
input appends a backward closure to the tape; `backward(tape, loss)` replays
the closures in exact reverse recording order, accumulating gradients
additively, so parameters used at several schedule positions receive the sum
of their per-use gradients. Without an active tape the same ops are plain
inference code. Only float32/float64 are supported; float32 is the training
dtype, float64 the verification dtype for finite-difference checks.
"""
from __future__ import annotations

import contextvars
import math

import numpy as np

from .errors import ShapeError, UsageError

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "cycleformer_tape", default=None
)

_CHECK_FINITE = False


def set_check_finite(enabled: bool) -> None:
    """Toggle per-op finiteness asserts (slow; debugging aid)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    """Dense array plus grad bookkeeping. `data` is always an owned ndarray."""

    __slots__ = ("data", "requires_grad", "grad", "grad_needed", "name")

    def __init__(self, data: np.ndarray, requires_grad: bool = False, name: str | None = None):
        if data.dtype not in _ALLOWED_DTYPES:
            raise ShapeError(f"unsupported dtype {data.dtype}; use float32 or float64")
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.grad_needed = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape}, dtype={self.data.dtype})"


def tensor(data, dtype=None, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Wrap `data` as a Tensor, defaulting non-float inputs to float32."""
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in _ALLOWED_DTYPES:
        arr = arr.astype(np.float32)
    return Tensor(np.array(arr, copy=True), requires_grad=requires_grad, name=name)


def parameter(data, dtype=None, name: str | None = None) -> Tensor:
    return tensor(data, dtype=dtype, requires_grad=True, name=name)


def constant(data, dtype=None, name: str | None = None) -> Tensor:
    return tensor(data, dtype=dtype, requires_grad=False, name=name)


class Tape:
    """Ordered record of backward closures for one forward pass."""

    def __init__(self):
        self._records: list = []
        self._outputs: set[int] = set()
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, backward_fn, out: Tensor) -> None:
        self._records.append(backward_fn)
        self._outputs.add(id(out))


def backward(tape: Tape, loss: Tensor) -> None:
    """Replay `tape` in reverse, accumulating grads into every reachable leaf."""
    if id(loss) not in tape._outputs:
        raise UsageError("backward target was not produced under this tape")
    if loss.data.shape != ():
        raise ShapeError(f"backward target must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for fn in reversed(tape._records):
        fn()


def _accum(t: Tensor, g: np.ndarray) -> None:
    # Copy on first write: g may be a view into a consumer's grad buffer.
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _finish(out: Tensor, backward_fn, *inputs: Tensor) -> Tensor:
    """Attach recording metadata to a freshly computed output."""
    if _CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(i.grad_needed for i in inputs):
        out.grad_needed = True
        tape._record(backward_fn, out)
    return out


def _same_dtype(*ts: Tensor) -> np.dtype:
    dt = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"dtype mismatch: {dt} vs {t.data.dtype}")
    return dt


# ---------------------------------------------------------------------------
# pure-numpy forward kernels, shared with the incremental decode path


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shift-invariant softmax along `axis`."""
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def layer_norm_np(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gamma + beta


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu_np(x: np.ndarray) -> np.ndarray:
    """tanh-approximation GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x * x * x)))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # Split by sign to stay finite for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)

    def bwd(out=out, a=a, b=b):
        g = out.grad
        if g is None:
            return
        if a.grad_needed:
            _accum(a, g)
        if b.grad_needed:
            _accum(b, g)

    return _finish(out, bwd, a, b)


def add_const(a: Tensor, c) -> Tensor:
    """a + broadcastable constant array; no gradient flows into the constant."""
    carr = np.asarray(c, dtype=a.data.dtype)
    if np.broadcast_shapes(a.data.shape, carr.shape) != a.data.shape:
        raise ShapeError(f"constant of shape {carr.shape} does not broadcast into {a.data.shape}")
    out = Tensor(a.data + carr)

    def bwd(out=out, a=a):
        g = out.grad
        if g is None:
            return
        if a.grad_needed:
            _accum(a, g)

    return _finish(out, bwd, a)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x (..., d) + b (d,), broadcasting over leading axes."""
    _same_dtype(x, b)
    if b.data.shape != (x.data.shape[-1],):
        raise ShapeError(f"bias shape {b.data.shape} does not match trailing dim of {x.data.shape}")
    out = Tensor(x.data + b.data)

    def bwd(out=out, x=x, b=b):
        g = out.grad
        if g is None:
            return
        if x.grad_needed:
            _accum(x, g)
        if b.grad_needed:
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _finish(out, bwd, x, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)

    def bwd(out=out, a=a, b=b):
        g = out.grad
        if g is None:
            return
        if a.grad_needed:
            _accum(a, g * b.data)
        if b.grad_needed:
            _accum(b, g * a.data)

    return _finish(out, bwd, a, b)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * a.data.dtype.type(s))

    def bwd(out=out, a=a, s=s):
        g = out.grad
        if g is None:
            return
        if a.grad_needed:
            _accum(a, g * s)

    return _finish(out, bwd, a)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """x (..., d) scaled per row by s (..., 1); used for the FFN gate."""
    _same_dtype(x, s)
    if s.data.shape != x.data.shape[:-1] + (1,):
        raise ShapeError(f"row-scale shape {s.data.shape} does not match {x.data.shape}")
    out = Tensor(x.data * s.data)

    def bwd(out=out, x=x, s=s):
        g = out.grad
        if g is None:
            return
        if x.grad_needed:
            _accum(x, g * s.data)
        if s.grad_needed:
            _accum(s, np.sum(g * x.data, axis=-1, keepdims=True))

    return _finish(out, bwd, x, s)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked inputs must agree exactly on leading dims."""
    _same_dtype(a, b)
    ash, bsh = a.data.shape, b.data.shape
    if len(ash) < 2 or len(bsh) < 2 or ash[-1] != bsh[-2] or ash[:-2] != bsh[:-2]:
        raise ShapeError(f"matmul shape mismatch: {ash} @ {bsh}")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(out=out, a=a, b=b):
        g = out.grad
        if g is None:
            return
        if a.grad_needed:
            _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.grad_needed:
            _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _finish(out, bwd, a, b)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"axes {axes} are not a permutation for ndim {a.data.ndim}")
    out = Tensor(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))

    def bwd(out=out, a=a, inv=inv):
        g = out.grad
        if g is None:
            return
        if a.grad_needed:
            _accum(a, np.transpose(g, inv))

    return _finish(out, bwd, a)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(np.reshape(a.data, shape))

    def bwd(out=out, a=a):
        g = out.grad
        if g is None:
            return
        if a.grad_needed:
            _accum(a, np.reshape(g, a.data.shape))

    return _finish(out, bwd, a)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    _same_dtype(*parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(out=out, parts=parts, sizes=sizes, axis=axis):
        g = out.grad
        if g is None:
            return
        offset = 0
        for p, n in zip(parts, sizes):
            if p.grad_needed:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + n)
                _accum(p, g[tuple(idx)])
            offset += n

    return _finish(out, bwd, *parts)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    if not (0 <= start and start + length <= a.data.shape[axis]):
        raise ShapeError(
            f"narrow [{start}:{start + length}) out of range for axis {axis} of {a.data.shape}"
        )
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    out = Tensor(a.data[tuple(idx)].copy())

    def bwd(out=out, a=a, idx=tuple(idx)):
        g = out.grad
        if g is None:
            return
        if a.grad_needed:
            full = np.zeros_like(a.data)
            full[idx] = g
            _accum(a, full)

    return _finish(out, bwd, a)


def expand(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Broadcast `a` up to `shape` (numpy rules); backward sums the broadcast axes."""
    if np.broadcast_shapes(a.data.shape, shape) != tuple(shape):
        raise ShapeError(f"cannot expand {a.data.shape} to {shape}")
    out = Tensor(np.ascontiguousarray(np.broadcast_to(a.data, shape)))
    extra = len(shape) - a.data.ndim
    axes = tuple(range(extra)) + tuple(
        i + extra for i, d in enumerate(a.data.shape) if d == 1 and shape[i + extra] != 1
    )

    def bwd(out=out, a=a, axes=axes):
        g = out.grad
        if g is None:
            return
        if a.grad_needed:
            _accum(a, np.sum(g, axis=axes, keepdims=True).reshape(a.data.shape))

    return _finish(out, bwd, a)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = weight[ids[...], :]; backward scatter-adds."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding ids must be integers, got {ids.dtype}")
    n_rows = weight.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise IndexError(f"token id {bad} outside embedding table of {n_rows} rows")
    out = Tensor(weight.data[ids])

    def bwd(out=out, weight=weight, ids=ids):
        g = out.grad
        if g is None:
            return
        if weight.grad_needed:
            gw = np.zeros_like(weight.data)
            np.add.at(gw, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
            _accum(weight, gw)

    return _finish(out, bwd, weight)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    _same_dtype(x, gamma, beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def bwd(out=out, x=x, gamma=gamma, beta=beta, xhat=xhat, inv=inv, d=d):
        g = out.grad
        if g is None:
            return
        if gamma.grad_needed:
            _accum(gamma, np.sum(g * xhat, axis=tuple(range(g.ndim - 1))))
        if beta.grad_needed:
            _accum(beta, np.sum(g, axis=tuple(range(g.ndim - 1))))
        if x.grad_needed:
            dxhat = g * gamma.data
            s1 = np.sum(dxhat, axis=-1, keepdims=True)
            s2 = np.sum(dxhat * xhat, axis=-1, keepdims=True)
            _accum(x, (inv / d) * (d * dxhat - s1 - xhat * s2))

    return _finish(out, bwd, x, gamma, beta)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis`; rows sum to 1."""
    if x.data.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.data.shape}")
    s = softmax_np(x.data, axis=axis)
    out = Tensor(s)

    def bwd(out=out, x=x, s=s, axis=axis):
        g = out.grad
        if g is None:
            return
        if x.grad_needed:
            inner = np.sum(g * s, axis=axis, keepdims=True)
            _accum(x, s * (g - inner))

    return _finish(out, bwd, x)


def gelu(x: Tensor) -> Tensor:
    u = _GELU_C * (x.data + _GELU_A * x.data ** 3)
    t = np.tanh(u)
    out = Tensor(0.5 * x.data * (1.0 + t))

    def bwd(out=out, x=x, t=t):
        g = out.grad
        if g is None:
            return
        if x.grad_needed:
            sech2 = 1.0 - t * t
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data * x.data)
            _accum(x, g * (0.5 * (1.0 + t) + 0.5 * x.data * sech2 * du))

    return _finish(out, bwd, x)


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_np(x.data)
    out = Tensor(s)

    def bwd(out=out, x=x, s=s):
        g = out.grad
        if g is None:
            return
        if x.grad_needed:
            _accum(x, g * s * (1.0 - s))

    return _finish(out, bwd, x)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token NLL. logits (N, V), integer targets (N,); returns a scalar."""
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"cross_entropy expects (N, V) logits and (N,) targets, got {logits.data.shape} and {targets.shape}"
        )
    n, v = logits.data.shape
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        bad = int(targets.min()) if targets.min() < 0 else int(targets.max())
        raise IndexError(f"target id {bad} outside vocabulary of size {v}")
    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    logp = z - lse
    nll = -logp[np.arange(n), targets]
    out = Tensor(np.asarray(nll.mean(), dtype=logits.data.dtype))

    def bwd(out=out, logits=logits, targets=targets, logp=logp, n=n):
        g = out.grad
        if g is None:
            return
        if logits.grad_needed:
            p = np.exp(logp)
            p[np.arange(n), targets] -= 1.0
            _accum(logits, p * (g / n))

    return _finish(out, bwd, logits)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))

    def bwd(out=out, a=a):
        g = out.grad
        if g is None:
            return
        if a.grad_needed:
            _accum(a, np.full_like(a.data, g))

    return _finish(out, bwd, a)
