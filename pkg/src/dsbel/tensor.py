"""Minimal array engine with hand-written backward passes.

Activations and parameters live in :class:`Tensor` objects.  Every primitive
records a closure that routes the upstream gradient to its inputs, and
:meth:`Tensor.backward` replays those closures in reverse topological order.
Only the fixed layer set the network needs is provided.

Layout is row-major ``(batch, channels, height, width)``.  Storage defaults to
float32; :func:`grad_check` re-runs everything in float64.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ConfigError(ValueError):
    """Shapes or hyperparameters that cannot be combined."""


class NumericError(ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference, frozen sub-networks)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Numeric array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None):
        """Propagate ``grad`` (ones for a scalar) to every reachable input."""
        if grad is None:
            if self.data.size != 1:
                raise ConfigError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo = _topological_order(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # release caches held by closures; leaves keep their gradients
        for node in topo:
            if node._parents:
                node._parents = ()
                node._backward = None
                node.grad = None


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    # never mutate an existing buffer in place: buffers may be aliased
    t.grad = g if t.grad is None else t.grad + g


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_finite(arr: np.ndarray, what: str):
    # a single reduction is far cheaper than isfinite() on large maps
    if not np.isfinite(arr.sum()):
        raise NumericError(f"non-finite values in {what}")


# --------------------------------------------------------------------------
# specs


@dataclass
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    weight: Optional[Tensor] = None
    bias: Optional[Tensor] = None

    def __post_init__(self):
        if isinstance(self.kernel, int):
            self.kernel = (self.kernel, self.kernel)
        self.kernel = tuple(int(k) for k in self.kernel)
        if self.stride < 1 or self.dilation < 1 or self.padding < 0 or min(self.kernel) < 1:
            raise ConfigError(f"invalid convolution geometry: {self}")
        if self.weight is not None:
            expected = (self.out_channels, self.in_channels) + self.kernel
            if self.weight.shape != expected:
                raise ConfigError(f"conv weight shape {self.weight.shape} != {expected}")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ConfigError(f"conv bias shape {self.bias.shape} != ({self.out_channels},)")

    @property
    def effective_kernel(self) -> tuple:
        return tuple((k - 1) * self.dilation + 1 for k in self.kernel)

    def output_size(self, h: int, w: int) -> tuple:
        ekh, ekw = self.effective_kernel
        if ekh > h + 2 * self.padding or ekw > w + 2 * self.padding:
            raise ConfigError(
                f"effective kernel {ekh}x{ekw} exceeds padded input {h + 2 * self.padding}x{w + 2 * self.padding}"
            )
        return ((h + 2 * self.padding - ekh) // self.stride + 1,
                (w + 2 * self.padding - ekw) // self.stride + 1)


@dataclass(frozen=True)
class PoolSpec:
    window: int
    stride: int
    padding: int = 0
    mode: str = "max"

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ConfigError(f"invalid pooling geometry: {self}")
        if not 0 <= self.padding < self.window:
            raise ConfigError("pooling padding must lie in [0, window)")
        if self.mode not in ("max", "avg"):
            raise ConfigError(f"unknown pooling mode {self.mode!r}")

    def output_size(self, h: int, w: int) -> tuple:
        m, p = self.window, self.padding
        if m > h + 2 * p or m > w + 2 * p:
            raise ConfigError(f"pool window {m} exceeds padded input {h + 2 * p}x{w + 2 * p}")
        return (h + 2 * p - m) // self.stride + 1, (w + 2 * p - m) // self.stride + 1


@dataclass
class DenseSpec:
    in_dim: int
    out_dim: int
    weight: Optional[Tensor] = None  # (in_dim, out_dim)
    bias: Optional[Tensor] = None

    def __post_init__(self):
        if self.weight is not None and self.weight.shape != (self.in_dim, self.out_dim):
            raise ConfigError(f"dense weight shape {self.weight.shape} != {(self.in_dim, self.out_dim)}")
        if self.bias is not None and self.bias.shape != (self.out_dim,):
            raise ConfigError(f"dense bias shape {self.bias.shape} != ({self.out_dim},)")


# --------------------------------------------------------------------------
# convolution


def _tap_slices(i, j, dil, stride, oh, ow):
    r0, c0 = i * dil, j * dil
    return (slice(r0, r0 + stride * (oh - 1) + 1, stride),
            slice(c0, c0 + stride * (ow - 1) + 1, stride))


def _pad(x: np.ndarray, p: int, value=0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _im2col(xp, kh, kw, dil, stride, oh, ow):
    n, c = xp.shape[:2]
    col = np.empty((c, kh, kw, n, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            rs, cs = _tap_slices(i, j, dil, stride, oh, ow)
            col[:, i, j] = xp[:, :, rs, cs].transpose(1, 0, 2, 3)
    return col.reshape(c * kh * kw, n * oh * ow)


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Dilated, strided, zero-padded 2-D cross-correlation plus bias."""
    if x.data.ndim != 4:
        raise ConfigError(f"conv2d expects (n, c, h, w), got {x.shape}")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ConfigError(f"conv2d: input has {c} channels, spec expects {spec.in_channels}")
    if spec.weight is None:
        raise ConfigError("conv2d: spec has no weights")
    oh, ow = spec.output_size(h, w)
    kh, kw = spec.kernel
    o, p, s, d = spec.out_channels, spec.padding, spec.stride, spec.dilation
    weight, bias = spec.weight, spec.bias

    xp = _pad(x.data, p)
    if kh == kw == 1 and s == 1:
        col = xp.transpose(1, 0, 2, 3).reshape(c, n * oh * ow)
    else:
        col = _im2col(xp, kh, kw, d, s, oh, ow)
    w2 = weight.data.reshape(o, -1)
    out = (w2 @ col).reshape(o, n, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)
    _check_finite(out, "conv2d output")

    parents = (x, weight) + ((bias,) if bias is not None else ())

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, -1)
        if weight.requires_grad:
            _accumulate(weight, (gmat @ col.T).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gmat.sum(axis=1))
        if x.requires_grad:
            dcol = (w2.T @ gmat).reshape(c, kh, kw, n, oh, ow)
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    rs, cs = _tap_slices(i, j, d, s, oh, ow)
                    dxp[:, :, rs, cs] += dcol[:, i, j].transpose(1, 0, 2, 3)
            _accumulate(x, dxp[:, :, p:p + h, p:p + w] if p else dxp)

    return _result(out, parents, backward)


# --------------------------------------------------------------------------
# pooling


def _separable_max(xp, m, s, oh, ow, track):
    """Window max as a column pass then a row pass.

    With ``track`` also returns the row-major tap index of the first maximum
    in each window: the row pass keeps the first row reaching the max, and the
    column pass already kept the first column within that row.
    """
    col = lambda j: slice(j, j + s * (ow - 1) + 1, s)
    row = lambda i: slice(i, i + s * (oh - 1) + 1, s)
    hmax = xp[..., col(0)].copy()
    hidx = np.zeros(hmax.shape, dtype=np.uint8) if track else None
    for j in range(1, m):
        cand = xp[..., col(j)]
        if track:
            np.copyto(hidx, j, where=np.greater(cand, hmax))
        np.maximum(hmax, cand, out=hmax)
    out = hmax[..., row(0), :].copy()
    if not track:
        for i in range(1, m):
            np.maximum(out, hmax[..., row(i), :], out=out)
        return out, None
    tap = hidx[..., row(0), :].astype(np.uint16)
    for i in range(1, m):
        cand = hmax[..., row(i), :]
        better = np.greater(cand, out)
        np.copyto(out, cand, where=better)
        np.copyto(tap, hidx[..., row(i), :] + np.uint16(i * m), where=better)
    return out, tap


def pool2d(x: Tensor, spec: PoolSpec) -> Tensor:
    """Square max or average pooling.

    Average pooling always divides by ``window**2``; zero padding counts as
    zero-valued cells.  Max pooling pads with ``-inf`` and routes gradient to
    the first maximal element (row-major scan order) of each window.
    """
    n, c, h, w = x.shape
    oh, ow = spec.output_size(h, w)
    m, s, p = spec.window, spec.stride, spec.padding
    is_max = spec.mode == "max"
    xp = _pad(x.data, p, -np.inf if is_max else 0.0)

    taps = [(i, j) for i in range(m) for j in range(m)]
    need_grad = _GRAD_ENABLED and x.requires_grad
    if is_max:
        out, tap = _separable_max(xp, m, s, oh, ow, need_grad)
    else:
        out = np.zeros((n, c, oh, ow), dtype=xp.dtype)
        for i, j in taps:
            rs, cs = _tap_slices(i, j, 1, s, oh, ow)
            out += xp[:, :, rs, cs]
        out /= m * m

    def backward(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for t, (i, j) in enumerate(taps):
            rs, cs = _tap_slices(i, j, 1, s, oh, ow)
            if is_max:
                dxp[:, :, rs, cs] += np.where(tap == t, g, 0)
            else:
                dxp[:, :, rs, cs] += g / (m * m)
        _accumulate(x, dxp[:, :, p:p + h, p:p + w] if p else dxp)

    return _result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, c) spatial mean."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy())

    return _result(out, (x,), backward)


# --------------------------------------------------------------------------
# dense, activations, plumbing


def dense(x: Tensor, spec: DenseSpec) -> Tensor:
    """``out[q] = sum_p W[p, q] * x[p] + b[q]`` for a vector or a row batch."""
    if x.shape[-1] != spec.in_dim:
        raise ConfigError(f"dense: input length {x.shape[-1]} != {spec.in_dim}")
    weight, bias = spec.weight, spec.bias
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    _check_finite(out, "dense output")
    parents = (x, weight) + ((bias,) if bias is not None else ())

    def backward(g):
        x2 = x.data.reshape(-1, spec.in_dim)
        g2 = g.reshape(-1, spec.out_dim)
        if weight.requires_grad:
            _accumulate(weight, x2.T @ g2)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, (g2 @ weight.data.T).reshape(x.shape))

    return _result(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        _accumulate(x, g * (x.data > 0))

    return _result(out, (x,), backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator] = None, train: bool = False) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, rescale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    out = x.data * mask

    def backward(g):
        _accumulate(x, g * mask)

    return _result(out, (x,), backward)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, preserving part order."""
    if not parts:
        raise ConfigError("concat_channels needs at least one tensor")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    for t in parts[1:]:
        if t.data.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ConfigError(f"concat_channels: {t.shape} incompatible with {ref}")
    out = np.concatenate([t.data for t in parts], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in parts])

    def backward(g):
        for t, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _accumulate(t, g[:, lo:hi])

    return _result(out, tuple(parts), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[:, start:stop].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        _accumulate(x, full)

    return _result(out, (x,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: Tensor, labels) -> tuple:
    """Softmax probabilities and the mean cross-entropy loss.

    ``logits`` is a single vector or an ``(n, classes)`` batch; ``labels`` the
    matching class indices.  The gradient w.r.t. the logits is
    ``(p - onehot) / n``.
    """
    z = logits.data
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    if z2.shape[1] < 2:
        raise ConfigError("softmax_xent needs at least two classes")
    if not np.all(np.isfinite(z2)):
        raise NumericError("non-finite logits")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape[0] != z2.shape[0]:
        raise ConfigError(f"{y.shape[0]} labels for {z2.shape[0]} logit rows")
    n = z2.shape[0]
    probs = softmax(z2)
    shifted = z2 - z2.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[np.arange(n), y]))

    def backward(g):
        d = probs.copy()
        d[np.arange(n), y] -= 1
        d *= g / n
        _accumulate(logits, d[0] if single else d)

    out = _result(np.asarray(loss, dtype=z.dtype), (logits,), backward)
    return (probs[0] if single else probs), out


# --------------------------------------------------------------------------
# finite-difference verification


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
               seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between backward() and central differences.

    All inputs are promoted to float64 copies.  Non-scalar outputs are reduced
    with a fixed random projection so every output element contributes.
    Relative error is ``|a - n| / max(|a|, |n|, floor)`` elementwise.
    """
    xs = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
    out = fn(*xs)
    rng = np.random.default_rng(seed)
    proj = np.ones_like(out.data) if out.size == 1 else rng.standard_normal(out.shape)
    out.backward(proj)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    def objective():
        with no_grad():
            return float(np.sum(fn(*xs).data * proj))

    worst = 0.0
    for t, a in zip(xs, analytic):
        flat = t.data.reshape(-1)
        a = a.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            hi = objective()
            flat[k] = orig - eps
            lo = objective()
            flat[k] = orig
            num = (hi - lo) / (2 * eps)
            err = abs(a[k] - num) / max(abs(a[k]), abs(num), floor)
            worst = max(worst, err)
    return worst


__all__ = [
    "ConfigError", "NumericError", "Tensor", "no_grad", "ConvSpec", "PoolSpec", "DenseSpec",
    "conv2d", "pool2d", "global_avg_pool", "dense", "relu", "dropout", "concat_channels",
    "slice_channels", "softmax", "softmax_xent", "grad_check",
]
