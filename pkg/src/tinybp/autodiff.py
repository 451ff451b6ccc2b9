"""Reverse-mode automatic differentiation over numpy arrays.

Tape-based engine in the micrograd style: every operation returns a new
Tensor that remembers its parents and a closure that routes the output
gradient back to them.  ``Tensor.backward`` replays the tape in reverse
topological order.  All data is float64; activations are (batch, channels,
length) or (batch, features), parameters are rank <= 3.
"""

from __future__ import annotations

import numpy as np

_GRAD_ENABLED = True


class no_grad:
    """Context manager: skip tape construction inside (cheap eval passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Accumulate grads of this tensor w.r.t. everything upstream.

        ``seed`` defaults to ones (only allowed for scalars, where it is
        the conventional dL/dL = 1).
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed needs a scalar tensor")
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != self.data.shape:
            raise ValueError(f"seed shape {seed.shape} != tensor shape {self.data.shape}")

        # iterative topological sort; recursion would overflow on long tapes
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))

        _accum(self, seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _tracked(*parents: Tensor) -> bool:
    return _GRAD_ENABLED and any(p.requires_grad for p in parents)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _tracked(*parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, -g)

    return _make(-a.data, (a,), back)


def pow_const(a: Tensor, p: float) -> Tensor:
    def back(g):
        _accum(a, g * p * a.data ** (p - 1))

    return _make(a.data ** p, (a,), back)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def back(g):
        _accum(a, g * 0.5 / out_data)

    return _make(out_data, (a,), back)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def back(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), back)


def relu(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, g * (a.data > 0))

    return _make(np.maximum(a.data, 0.0), (a,), back)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Per-channel leaky activation on (B, C, L); slope has shape (C,)."""
    if x.data.ndim != 3:
        raise ValueError(f"prelu expects (B, C, L), got {x.data.shape}")
    s = slope.data[None, :, None]
    pos = x.data > 0

    def back(g):
        _accum(x, g * np.where(pos, 1.0, s))
        _accum(slope, np.where(pos, 0.0, g * x.data).sum(axis=(0, 2)))

    return _make(np.where(pos, x.data, s * x.data), (x, slope), back)


# -- reductions / shaping ------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]

    def back(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / n, a.data.shape))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg / n, a.data.shape))

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    def back(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), back)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def gather(a: Tensor, idx) -> Tensor:
    """out[i] = a[idx[i]] on a 1-D tensor; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _make(a.data[idx], (a,), back)


def take_axis(a: Tensor, idx, axis: int) -> Tensor:
    """Select rows along one axis: out = a.take(idx, axis)."""
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        ga = np.zeros_like(a.data)
        sl = [slice(None)] * ga.ndim
        sl[axis] = idx
        np.add.at(ga, tuple(sl), g)
        _accum(a, ga)

    return _make(np.take(a.data, idx, axis=axis), (a,), back)


def put_axis(a: Tensor, idx, axis: int, size: int) -> Tensor:
    """Scatter rows along one axis into a zero tensor of extent `size`.

    out has a's shape except axis has extent size, out[..., idx[i], ...]
    = a[..., i, ...] and every other row is exactly zero.
    """
    idx = np.asarray(idx, dtype=np.intp)
    shape = list(a.data.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=a.data.dtype)
    sl = [slice(None)] * len(shape)
    sl[axis] = idx
    out[tuple(sl)] = a.data

    def back(g):
        _accum(a, np.take(g, idx, axis=axis))

    return _make(out, (a,), back)


# -- linear algebra / nn primitives --------------------------------------

def linear_xw(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """y = x @ w.T + b with x (B, F), w (O, F), b (O,)."""
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data[None, :]

    def back(g):
        _accum(x, g @ w.data)
        _accum(w, g.T @ x.data)
        if b is not None:
            _accum(b, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, back)


def softmax1d(a: Tensor) -> Tensor:
    """Numerically stable softmax of a 1-D tensor."""
    z = a.data - a.data.max()
    e = np.exp(z)
    s = e / e.sum()

    def back(g):
        _accum(a, s * (g - float(np.dot(g, s))))

    return _make(s, (a,), back)


def weighted_sum(weights: Tensor, tensors) -> Tensor:
    """y = sum_i weights[i] * tensors[i]; all tensors share one shape."""
    tensors = list(tensors)
    if weights.data.shape != (len(tensors),):
        raise ValueError("weights must be 1-D with one entry per tensor")
    out_data = np.zeros_like(tensors[0].data)
    for wi, t in zip(weights.data, tensors):
        out_data = out_data + wi * t.data

    def back(g):
        gw = np.array([float((g * t.data).sum()) for t in tensors])
        _accum(weights, gw)
        for wi, t in zip(weights.data, tensors):
            _accum(t, wi * g)

    return _make(out_data, (weights, *tensors), back)


def heaviside_ste(theta: Tensor) -> Tensor:
    """Binary step gate with a straight-through surrogate gradient.

    Forward: 1 where theta >= 0 else 0.  Backward: passes the incoming
    gradient where |theta| <= 1 (clamped-identity surrogate), 0 outside.
    """
    def back(g):
        _accum(theta, g * (np.abs(theta.data) <= 1.0))

    return _make((theta.data >= 0.0).astype(np.float64), (theta,), back)


# -- conv / pool / resize -------------------------------------------------

def conv1d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1,
           dilation: int = 1, groups: int = 1, pad=(0, 0)) -> Tensor:
    """1-D cross-correlation on (B, Cin, L) with weight (Cout, Cin/g, K).

    Implemented as one matmul per kernel tap, which keeps forward and
    backward symmetric and avoids stride-trick aliasing in the backward.
    """
    B, Cin, L = x.data.shape
    Cout, Cin_g, K = w.data.shape
    if Cin % groups or Cout % groups:
        raise ValueError("channels not divisible by groups")
    if Cin // groups != Cin_g:
        raise ValueError(f"weight expects {Cin_g * groups} input channels, got {Cin}")
    pl, pr = pad
    keff = (K - 1) * dilation + 1
    Lp = L + pl + pr
    Lout = (Lp - keff) // stride + 1
    if Lout < 1:
        raise ValueError(f"conv output length would be {Lout}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr)))
    if groups == 1:
        y = np.zeros((B, Cout, Lout))
        for k in range(K):
            seg = xp[:, :, k * dilation: k * dilation + stride * Lout: stride]
            y += np.matmul(w.data[:, :, k], seg)
    else:
        xg = xp.reshape(B, groups, Cin_g, Lp)
        wg = w.data.reshape(groups, Cout // groups, Cin_g, K)
        y = np.zeros((B, groups, Cout // groups, Lout))
        for k in range(K):
            seg = xg[:, :, :, k * dilation: k * dilation + stride * Lout: stride]
            y += np.matmul(wg[:, :, :, k], seg)
        y = y.reshape(B, Cout, Lout)
    if b is not None:
        y = y + b.data[None, :, None]

    def back(g):
        if groups == 1:
            gxp = np.zeros_like(xp)
            gw = np.zeros_like(w.data)
            for k in range(K):
                sl = slice(k * dilation, k * dilation + stride * Lout, stride)
                seg = xp[:, :, sl]
                gw[:, :, k] = np.einsum("bol,bcl->oc", g, seg, optimize=True)
                gxp[:, :, sl] += np.matmul(w.data[:, :, k].T, g)
            _accum(x, gxp[:, :, pl:Lp - pr] if pr else gxp[:, :, pl:])
            _accum(w, gw)
        else:
            xg = xp.reshape(B, groups, Cin_g, Lp)
            wg = w.data.reshape(groups, Cout // groups, Cin_g, K)
            gg = g.reshape(B, groups, Cout // groups, Lout)
            gxg = np.zeros_like(xg)
            gwg = np.zeros_like(wg)
            for k in range(K):
                sl = slice(k * dilation, k * dilation + stride * Lout, stride)
                seg = xg[:, :, :, sl]
                gwg[:, :, :, k] = np.einsum("bgol,bgcl->goc", gg, seg, optimize=True)
                gxg[:, :, :, sl] += np.einsum("goc,bgol->bgcl", wg[:, :, :, k], gg, optimize=True)
            gxp = gxg.reshape(B, Cin, Lp)
            _accum(x, gxp[:, :, pl:Lp - pr] if pr else gxp[:, :, pl:])
            _accum(w, gwg.reshape(w.data.shape))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, back)


def maxpool1d(x: Tensor, kernel: int, stride: int) -> Tensor:
    B, C, L = x.data.shape
    Lout = (L - kernel) // stride + 1
    if Lout < 1:
        raise ValueError("pool output length would be < 1")
    view = np.lib.stride_tricks.sliding_window_view(x.data, kernel, axis=2)[:, :, ::stride, :]
    amax = view.argmax(axis=-1)
    y = np.take_along_axis(view, amax[..., None], axis=-1)[..., 0]
    starts = np.arange(Lout) * stride

    def back(g):
        gx = np.zeros_like(x.data)
        bi, ci = np.meshgrid(np.arange(B), np.arange(C), indexing="ij")
        pos = starts[None, None, :] + amax
        np.add.at(gx, (bi[..., None], ci[..., None], pos), g)
        _accum(x, gx)

    return _make(y, (x,), back)


def avgpool1d(x: Tensor, kernel: int, stride: int) -> Tensor:
    B, C, L = x.data.shape
    Lout = (L - kernel) // stride + 1
    if Lout < 1:
        raise ValueError("pool output length would be < 1")
    view = np.lib.stride_tricks.sliding_window_view(x.data, kernel, axis=2)[:, :, ::stride, :]
    y = view.mean(axis=-1)

    def back(g):
        gx = np.zeros_like(x.data)
        gk = g / kernel
        for j in range(kernel):
            gx[:, :, j: j + stride * Lout: stride] += gk
        _accum(x, gx)

    return _make(y, (x,), back)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    B, C, L = x.data.shape

    def back(g):
        _accum(x, g.reshape(B, C, L, factor).sum(axis=-1))

    return _make(np.repeat(x.data, factor, axis=2), (x,), back)
