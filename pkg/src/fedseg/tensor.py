"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: only the forward operations and backward rules a gated
U-Net needs (convolution, pooling, upsampling, pointwise arithmetic and a
handful of reductions), plus a central-finite-difference gradient checker.
Arrays are row-major numpy float64 throughout; images use N,C,H,W layout.

Each operation records its parents and a backward closure on the output
tensor; ``backward()`` on a scalar walks the graph once in reverse
topological order and accumulates gradients on every tensor that requires
them. Recording is per-thread, so independent passes may run concurrently.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, UsageError

__all__ = [
    "Tensor",
    "no_grad",
    "conv2d",
    "maxpool2d",
    "upsample2d",
    "relu",
    "sigmoid",
    "add",
    "mul",
    "concat_channels",
    "expand_channels",
    "grad_check",
]

_state = threading.local()

# Sigmoid outputs are clipped into the largest open sub-interval of (0, 1)
# representable in float64 so saturation can never emit an exact 0 or 1.
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)

# Test-only fault hook: when set to an op name, backward() scales that op's
# upstream gradient by 1.5 so the gradient checker's negative control can
# prove the suite actually fails on a broken backward rule.
_fault_op: str | None = None


def _recording() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, finite differences)."""
    prev = _recording()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A dense float64 array plus optional gradient buffer and graph record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        # asarray with order="C" keeps rank-0 arrays rank 0
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph traversal ---------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every requiring tensor reachable from this scalar."""
        if self._backward_fn is None:
            raise UsageError("backward called on a tensor with no recorded graph")
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {self.shape}")
        if not np.isfinite(self.data):
            raise UsageError("backward called on a non-finite loss")

        topo: list[Tensor] = []
        visited: set[int] = {id(self)}
        stack: list[tuple[Tensor, int]] = [(self, 0)]
        while stack:
            node, idx = stack[-1]
            if idx < len(node._parents):
                stack[-1] = (node, idx + 1)
                parent = node._parents[idx]
                if id(parent) not in visited:
                    visited.add(id(parent))
                    stack.append((parent, 0))
            else:
                topo.append(node)
                stack.pop()

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is None or node.grad is None:
                continue
            out_grad = node.grad
            if _fault_op is not None and node._op == _fault_op:
                out_grad = out_grad * 1.5
            node._backward_fn(out_grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return add(-self, float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return div_scalar(self, float(other))

    def sum(self) -> "Tensor":
        return tsum(self)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.ascontiguousarray(g, dtype=np.float64)
    else:
        t.grad += g


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._op = op
        out._backward_fn = backward_fn
    return out


# -- elementwise and reduction ops ------------------------------------------


def _bias_view(small: np.ndarray) -> np.ndarray:
    return small[None, :, None, None]


def _binary_mode(a: Tensor, b: Tensor, name: str) -> str:
    """'same' for equal shapes, 'bias' for a per-channel vector on a 4-d tensor."""
    if a.shape == b.shape:
        return "same"
    if a.ndim == 4 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return "bias"
    raise ShapeError(
        f"{name}: shapes {a.shape} and {b.shape} are neither equal nor a "
        f"per-channel broadcast over axis 1"
    )


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)

        def back_scalar(g: np.ndarray) -> None:
            _accumulate(a, g)

        return _result(a.data + s, (a,), "add", back_scalar)

    mode = _binary_mode(a, b, "add")
    if mode == "same":
        out = a.data + b.data
    else:
        out = a.data + _bias_view(b.data)

    def back(g: np.ndarray) -> None:
        _accumulate(a, g)
        if mode == "same":
            _accumulate(b, g)
        else:
            _accumulate(b, g.sum(axis=(0, 2, 3)))

    return _result(out, (a, b), "add", back)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)

        def back_scalar(g: np.ndarray) -> None:
            _accumulate(a, g * s)

        return _result(a.data * s, (a,), "mul", back_scalar)

    mode = _binary_mode(a, b, "mul")
    if mode == "same":
        out = a.data * b.data
    else:
        out = a.data * _bias_view(b.data)

    def back(g: np.ndarray) -> None:
        if mode == "same":
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)
        else:
            _accumulate(a, g * _bias_view(b.data))
            _accumulate(b, (g * a.data).sum(axis=(0, 2, 3)))

    return _result(out, (a, b), "mul", back)


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} differ")
    out = a.data / b.data

    def back(g: np.ndarray) -> None:
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))

    return _result(out, (a, b), "div", back)


def div_scalar(a: Tensor, s: float) -> Tensor:
    def back(g: np.ndarray) -> None:
        _accumulate(a, g / s)

    return _result(a.data / s, (a,), "div", back)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def back(g: np.ndarray) -> None:
        _accumulate(x, g * (out > 0.0))

    return _result(out, (x,), "relu", back)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    np.clip(out, _SIG_LO, _SIG_HI, out=out)

    def back(g: np.ndarray) -> None:
        _accumulate(x, g * out * (1.0 - out))

    return _result(out, (x,), "sigmoid", back)


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def back(g: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(out, (x,), "sum", back)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise UsageError("concat_channels requires at least one tensor")
    first = tensors[0]
    for t in tensors[1:]:
        if t.ndim != 4 or first.ndim != 4:
            raise ShapeError("concat_channels requires rank-4 tensors")
        if t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ShapeError(
                f"concat_channels: non-channel extents differ, {first.shape} vs {t.shape}"
            )
    out = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

    def back(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accumulate(t, g[:, lo:hi])

    return _result(out, tuple(tensors), "concat_channels", back)


def expand_channels(x: Tensor, channels: int) -> Tensor:
    """Tile a single-channel map across ``channels`` channels (backward sums)."""
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expand_channels expects shape (N,1,H,W), got {x.shape}")
    out = np.repeat(x.data, channels, axis=1)

    def back(g: np.ndarray) -> None:
        _accumulate(x, g.sum(axis=1, keepdims=True))

    return _result(out, (x,), "expand_channels", back)


# -- spatial ops -------------------------------------------------------------


def _check_4d(t: Tensor, name: str, role: str) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{name}: {role} must be rank 4, got shape {t.shape}")


class _BufferPool(threading.local):
    """Reusable float64 scratch buffers; avoids page-fault churn on hot paths."""

    def __init__(self):
        self.free: dict[tuple[int, ...], list[np.ndarray]] = {}

    def take(self, shape: tuple[int, ...]) -> np.ndarray:
        stack = self.free.get(shape)
        if stack:
            return stack.pop()
        return np.empty(shape)

    def give(self, arr: np.ndarray) -> None:
        stack = self.free.setdefault(arr.shape, [])
        if len(stack) < 4:
            stack.append(arr)


_pool = _BufferPool()


def _tap_span(k: int, padding: int, stride: int, extent: int,
              out_extent: int) -> tuple[int, int] | None:
    """Output-index range [lo, hi] whose source k + stride*l - padding is in bounds."""
    lo = max(0, -((k - padding) // stride))
    hi = min(out_extent - 1, (extent - 1 + padding - k) // stride)
    if lo > hi:
        return None
    return lo, hi


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    """Gather sliding windows into a pooled (N, Cin*kh*kw, ho*wo) buffer."""
    n, c, h, w = x.shape
    cols = _pool.take((n, c * kh * kw, ho * wo))
    view = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        span_h = _tap_span(i, padding, stride, h, ho)
        for j in range(kw):
            span_w = _tap_span(j, padding, stride, w, wo)
            tap = view[:, :, i, j]
            if span_h is None or span_w is None:
                tap[...] = 0.0
                continue
            lo_h, hi_h = span_h
            lo_w, hi_w = span_w
            # out-of-frame border strips of this tap read as zero padding
            if lo_h > 0:
                tap[:, :, :lo_h, :] = 0.0
            if hi_h < ho - 1:
                tap[:, :, hi_h + 1:, :] = 0.0
            if lo_w > 0:
                tap[:, :, lo_h:hi_h + 1, :lo_w] = 0.0
            if hi_w < wo - 1:
                tap[:, :, lo_h:hi_h + 1, hi_w + 1:] = 0.0
            src_h = i - padding + stride * lo_h
            src_w = j - padding + stride * lo_w
            tap[:, :, lo_h:hi_h + 1, lo_w:hi_w + 1] = \
                x[:, :, src_h:src_h + stride * (hi_h - lo_h) + 1:stride,
                  src_w:src_w + stride * (hi_w - lo_w) + 1:stride]
    return cols


def _col2im(gcols: np.ndarray, shape: tuple[int, ...], kh: int, kw: int,
            stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add window gradients back onto the input grid."""
    n, c, h, w = shape
    view = gcols.reshape(n, c, kh, kw, ho, wo)
    gx = np.zeros(shape)
    for i in range(kh):
        span_h = _tap_span(i, padding, stride, h, ho)
        if span_h is None:
            continue
        lo_h, hi_h = span_h
        dst_h = i - padding + stride * lo_h
        for j in range(kw):
            span_w = _tap_span(j, padding, stride, w, wo)
            if span_w is None:
                continue
            lo_w, hi_w = span_w
            dst_w = j - padding + stride * lo_w
            gx[:, :, dst_h:dst_h + stride * (hi_h - lo_h) + 1:stride,
               dst_w:dst_w + stride * (hi_w - lo_w) + 1:stride] += \
                view[:, :, i, j, lo_h:hi_h + 1, lo_w:hi_w + 1]
    return gx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding; gradients w.r.t. input, kernel, bias."""
    _check_4d(x, "conv2d", "input")
    _check_4d(weight, "conv2d", "kernel")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be non-negative, got {padding}")
    n, cin, h, w = x.shape
    cout, ck, kh, kw = weight.shape
    if cin != ck:
        raise ShapeError(
            f"conv2d: input channels (axis 1 = {cin}) do not match kernel "
            f"input channels (axis 1 = {ck})"
        )
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} is smaller "
            f"than kernel {kh}x{kw}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = _im2col(x.data, kh, kw, stride, padding, ho, wo)
    w2 = weight.data.reshape(cout, cin * kh * kw)
    out = np.matmul(w2, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out += _bias_view(bias.data)

    parents = (x, weight) if bias is None else (x, weight, bias)
    needs_graph = _recording() and any(p.requires_grad for p in parents)
    if not needs_graph:
        _pool.give(cols)
        return Tensor(out)

    w_data = weight.data
    saved = [cols]  # released on first (and only) backward

    def back(g: np.ndarray) -> None:
        if not saved:
            raise UsageError("conv2d backward invoked twice on one graph node")
        cols = saved.pop()
        g3 = g.reshape(n, cout, ho * wo)
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(weight, gw.reshape(cout, cin, kh, kw))
        if x.requires_grad:
            # cols' contents are no longer needed; reuse it for the gradient
            gcols = np.matmul(w2.T, g3, out=cols)
            _accumulate(x, _col2im(gcols, (n, cin, h, w), kh, kw, stride,
                                   padding, ho, wo))
        _pool.give(cols)

    return _result(out, parents, "conv2d", back)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route to the first window position."""
    _check_4d(x, "maxpool2d", "input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial extents must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = (x.data.reshape(n, c, h2, 2, w2, 2)
           .transpose(0, 1, 2, 4, 3, 5)
           .reshape(n, c, h2, w2, 4))
    idx = win.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]

    def back(g: np.ndarray) -> None:
        gwin = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(gwin, idx[..., None].astype(np.intp), g[..., None], axis=-1)
        _accumulate(x, gwin.reshape(n, c, h2, w2, 2, 2)
                    .transpose(0, 1, 2, 4, 3, 5)
                    .reshape(n, c, h, w))

    return _result(np.ascontiguousarray(out), (x,), "maxpool2d", back)


@lru_cache(maxsize=None)
def _bilinear_matrix(n: int) -> np.ndarray:
    """Row-interpolation matrix (2n x n) for x2 upsampling, align-corners false."""
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = (i + 0.5) / 2.0 - 0.5
        if src <= 0.0:
            m[i, 0] = 1.0
        elif src >= n - 1:
            m[i, n - 1] = 1.0
        else:
            j = int(np.floor(src))
            f = src - j
            m[i, j] = 1.0 - f
            m[i, j + 1] += f
    return m


def upsample2d(x: Tensor, mode: str = "nearest") -> Tensor:
    """Double both spatial extents by replication or bilinear interpolation."""
    _check_4d(x, "upsample2d", "input")
    if mode not in ("nearest", "bilinear"):
        raise UsageError(f"upsample2d: unknown mode {mode!r}")
    n, c, h, w = x.shape

    if mode == "nearest":
        out = x.data.repeat(2, axis=2).repeat(2, axis=3)

        def back(g: np.ndarray) -> None:
            _accumulate(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

        return _result(out, (x,), "upsample2d", back)

    mr = _bilinear_matrix(h)
    mc = _bilinear_matrix(w)
    out = np.einsum("pj,ncjk,qk->ncpq", mr, x.data, mc, optimize=True)

    def back_bilinear(g: np.ndarray) -> None:
        _accumulate(x, np.einsum("pj,ncpq,qk->ncjk", mr, g, mc, optimize=True))

    return _result(out, (x,), "upsample2d", back_bilinear)


# -- finite-difference checking ----------------------------------------------


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-6) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f`` must be scalar-valued and smooth at the probe point (bias inputs
    away from relu kinks). Relative error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            aflat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * eps)
                denom = max(1e-8, abs(aflat[i]) + abs(numeric))
                worst = max(worst, abs(aflat[i] - numeric) / denom)
    for t in inputs:
        t.grad = None
    return worst
