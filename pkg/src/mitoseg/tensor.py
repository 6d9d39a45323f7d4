"""Dense tensors with reverse-mode autodiff on a numpy backend.

Every differentiable operation records its parents and a backward closure on
the output tensor; ``backward()`` on a scalar loss walks the tape in reverse
topological order. Graphs are one-shot: a second backward through the same
nodes raises, and a fresh forward pass builds a fresh graph.

float64 is the default and is required for gradient checking; float32 is
supported for speed runs (dtype follows the data).
"""

from __future__ import annotations

import numpy as np

# Names of all registered differentiable ops; tests sweep this to make sure
# every op has a gradient check.
GRAD_OPS: set[str] = set()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class frozen:
    """Temporarily clears requires_grad on the given tensors.

    Used by the adversarial loss to keep generator and discriminator
    gradients on disjoint parameter sets.
    """

    def __init__(self, tensors):
        self.tensors = list(tensors)

    def __enter__(self):
        self._prev = [t.requires_grad for t in self.tensors]
        for t in self.tensors:
            t.requires_grad = False
        return self

    def __exit__(self, *exc):
        for t, rg in zip(self.tensors, self._prev):
            t.requires_grad = rg
        return False


def _register(name):
    GRAD_OPS.add(name)
    return name


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._non_scalar()

    def _non_scalar(self):
        raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad}{tag})"

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- autodiff core ------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar loss.

        Populates ``.grad`` on every requires_grad tensor reachable from this
        node. The traversed graph is consumed: a second backward through any
        of its nodes raises.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._op == "_consumed":
            raise RuntimeError("backward() already called on this graph; rebuild the forward pass")

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._parents and node._backward is None:
                raise RuntimeError("graph already consumed by a previous backward(); rebuild the forward pass")
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node._backward = None
        self._op = "_consumed"

    def _accumulate(self, g):
        if not self.requires_grad and self._backward is None:
            return
        g = np.ascontiguousarray(g, dtype=self.data.dtype)
        if g.base is not None:
            g = g.copy()
        self.grad = g if self.grad is None else self.grad + g

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    # -- method forms -------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return tabs(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def softmax(self, axis):
        return softmax(self, axis)

    def permute(self, order):
        return permute(self, order)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _make(data, parents, backward, op):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        # liveness is decided when the node is built: a parent frozen at
        # build time must not receive gradients even if unfrozen later
        dead = tuple(p for p in parents if not (p.requires_grad or p._backward is not None))
        if dead:
            inner = backward

            def backward(g):
                revived = [p for p in dead if p.requires_grad]
                for p in revived:
                    p.requires_grad = False
                try:
                    inner(g)
                finally:
                    for p in revived:
                        p.requires_grad = True

        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward, _register("add"))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    out_data = a.data - b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward, _register("sub"))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    out_data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward, _register("mul"))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    out_data = a.data / b.data

    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward, _register("div"))


def neg(a):
    a = _as_tensor(a)

    def backward(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), backward, _register("neg"))


def power(a, p):
    a = _as_tensor(a)
    p = float(p)
    out_data = a.data**p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), backward, _register("power"))


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), backward, _register("exp"))


def log(a):
    a = _as_tensor(a)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward, _register("log"))


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g / (2.0 * out_data))

    return _make(out_data, (a,), backward, _register("sqrt"))


def tabs(a):
    a = _as_tensor(a)

    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), backward, _register("abs"))


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return _make(a.data * mask, (a,), backward, _register("relu"))


def sigmoid(a):
    a = _as_tensor(a)
    d = a.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward, _register("sigmoid"))


def softplus(a):
    """log(1 + e^x), computed as max(x, 0) + log1p(e^-|x|) for stability."""
    a = _as_tensor(a)
    d = a.data
    out_data = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))

    def backward(g):
        s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
        a._accumulate(g * s)

    return _make(out_data, (a,), backward, _register("softplus"))


# -- shape ops ----------------------------------------------------------------


def permute(a, order):
    a = _as_tensor(a)
    order = tuple(int(i) for i in order)
    if sorted(order) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {order} for rank-{a.ndim} tensor")
    inverse = np.argsort(order)

    def backward(g):
        a._accumulate(np.transpose(g, inverse))

    return _make(np.ascontiguousarray(np.transpose(a.data, order)), (a,), backward, _register("permute"))


def reshape(a, shape):
    a = _as_tensor(a)
    orig = a.shape

    def backward(g):
        a._accumulate(g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), backward, _register("reshape"))


def take(a, idx):
    """Basic (slice/int) indexing; backward scatters into zeros."""
    a = _as_tensor(a)

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        a._accumulate(buf)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), backward, _register("take"))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    return _make(out_data, tuple(tensors), backward, _register("concat"))


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), backward, _register("sum"))


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g / count, a.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg / count, a.shape))

    return _make(out_data, (a,), backward, _register("mean"))


def softmax(a, axis):
    """Max-subtracted softmax; backward uses y*(g - sum(g*y))."""
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - inner))

    return _make(out_data, (a,), backward, _register("softmax"))


# -- matmul -------------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product; leading dims broadcast, inner dims must agree."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        a._accumulate(_unbroadcast(ga, a.shape))
        b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward, _register("matmul"))


# -- 3D convolution -----------------------------------------------------------


def _conv3d_out_shape(in_shape, k, stride, pad):
    return tuple((i + 2 * p - kk) // s + 1 for i, kk, s, p in zip(in_shape, k, stride, pad))


def conv3d(x, weight, bias=None, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Cross-correlation of x[N,C,T,H,W] with weight[O,C,kT,kH,kW].

    Zero padding; output extent floor((in + 2p - k)/s) + 1 per axis.
    Implemented as one BLAS contraction per kernel tap.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if bias is not None:
        bias = _as_tensor(bias)
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input/weight, got {x.shape} and {weight.shape}")
    N, C, T, H, W = x.shape
    O, Cw, kT, kH, kW = weight.shape
    if C != Cw:
        raise ShapeError(f"conv3d channel mismatch: input has {C} channels, weight expects {Cw}")
    sT, sH, sW = stride
    pT, pH, pW = padding
    if T + 2 * pT < kT or H + 2 * pH < kH or W + 2 * pW < kW:
        raise ShapeError(f"conv3d padded input {(T + 2 * pT, H + 2 * pH, W + 2 * pW)} smaller than kernel {(kT, kH, kW)}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pT, pT), (pH, pH), (pW, pW)))
    To, Ho, Wo = _conv3d_out_shape((T, H, W), (kT, kH, kW), stride, padding)
    kk = kT * kH * kW
    S = N * To * Ho * Wo

    # im2col: one (C*kk, S) matrix, then a single GEMM
    win = np.lib.stride_tricks.sliding_window_view(xp, (kT, kH, kW), axis=(2, 3, 4))
    win = win[:, :, ::sT, ::sH, ::sW]  # (N, C, To, Ho, Wo, kT, kH, kW)
    cols = win.transpose(1, 5, 6, 7, 0, 2, 3, 4).reshape(C * kk, S)
    out = (weight.data.reshape(O, C * kk) @ cols).reshape(O, N, To, Ho, Wo).transpose(1, 0, 2, 3, 4)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1, 1)

    def backward(g):
        if bias is not None and (bias.requires_grad or bias._backward is not None):
            bias._accumulate(g.sum(axis=(0, 2, 3, 4)))
        need_x = x.requires_grad or x._backward is not None
        need_w = weight.requires_grad or weight._backward is not None
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(O, S)
        if need_w:
            weight._accumulate((g2 @ cols.T).reshape(weight.shape))
        if need_x:
            gcols = (weight.data.reshape(O, C * kk).T @ g2).reshape(C, kT, kH, kW, N, To, Ho, Wo)
            gxp = np.zeros_like(xp)
            for dt in range(kT):
                for dh in range(kH):
                    for dw in range(kW):
                        gxp[:, :, dt : dt + sT * To : sT, dh : dh + sH * Ho : sH, dw : dw + sW * Wo : sW] += gcols[:, dt, dh, dw].transpose(1, 0, 2, 3, 4)
            x._accumulate(gxp[:, :, pT : pT + T, pH : pH + H, pW : pW + W])

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, _register("conv3d"))


# -- trilinear sampling ---------------------------------------------------------

_CORNERS = [(dt, dh, dw) for dt in (0, 1) for dh in (0, 1) for dw in (0, 1)]


def trilinear_sample(x, coords):
    """Sample x[C,T,H,W] at fractional coords[M,3] (t,h,w order).

    Out-of-range positions read as zero, matching zero-padded convolution.
    Differentiable in both the volume and the coordinates.
    """
    x, coords = _as_tensor(x), _as_tensor(coords)
    if x.ndim != 4 or coords.ndim != 2 or coords.shape[1] != 3:
        raise ShapeError(f"trilinear_sample expects x[C,T,H,W] and coords[M,3], got {x.shape}, {coords.shape}")
    C, T, H, W = x.shape
    dims = np.array([T, H, W])
    base = np.floor(coords.data).astype(np.int64)  # (M,3)
    frac = coords.data - base  # (M,3)
    M = coords.shape[0]
    xf = x.data.reshape(C, -1)

    out = np.zeros((C, M), dtype=x.dtype)
    corner_cache = []
    for corner in _CORNERS:
        idx = base + np.array(corner)  # (M,3)
        valid = np.all((idx >= 0) & (idx < dims), axis=1)
        w_axes = np.where(np.array(corner, dtype=bool), frac, 1.0 - frac)  # (M,3)
        wgt = w_axes.prod(axis=1) * valid
        idx_c = np.clip(idx, 0, dims - 1)
        flat = (idx_c[:, 0] * H + idx_c[:, 1]) * W + idx_c[:, 2]
        vals = xf[:, flat] * valid
        out += vals * wgt
        corner_cache.append((flat, valid, wgt, w_axes, vals))

    def backward(g):
        if x.requires_grad or x._backward is not None:
            gx = np.zeros((C, T * H * W), dtype=x.dtype)
            for flat, valid, wgt, _, _ in corner_cache:
                contrib = (g * wgt)[:, valid]
                fi = flat[valid]
                if fi.size:
                    glob = (np.arange(C)[:, None] * (T * H * W) + fi[None, :]).ravel()
                    gx += np.bincount(glob, weights=contrib.ravel(), minlength=C * T * H * W).reshape(C, -1)
            x._accumulate(gx.reshape(x.shape))
        if coords.requires_grad or coords._backward is not None:
            gc = np.zeros((M, 3), dtype=coords.dtype)
            for corner, (flat, valid, wgt, w_axes, vals) in zip(_CORNERS, corner_cache):
                s = (g * vals).sum(axis=0)  # (M,) value-weighted upstream grad
                for ax in range(3):
                    others = [a for a in range(3) if a != ax]
                    dwd = (1.0 if corner[ax] else -1.0) * w_axes[:, others[0]] * w_axes[:, others[1]]
                    gc[:, ax] += s * dwd * valid
            coords._accumulate(gc)

    return _make(out, (x, coords), backward, _register("trilinear_sample"))


# -- axis-separable linear interpolation (upsampling) -------------------------


def _interp_axis(x, axis, i0, i1, w0, w1):
    x = _as_tensor(x)
    sh = [1] * x.ndim
    sh[axis] = -1
    w0b = w0.reshape(sh).astype(x.dtype)
    w1b = w1.reshape(sh).astype(x.dtype)
    out_data = np.take(x.data, i0, axis=axis) * w0b + np.take(x.data, i1, axis=axis) * w1b

    def backward(g):
        gin = np.zeros_like(np.moveaxis(x.data, axis, 0))
        g0 = np.moveaxis(g * w0b, axis, 0)
        g1 = np.moveaxis(g * w1b, axis, 0)
        np.add.at(gin, i0, g0)
        np.add.at(gin, i1, g1)
        x._accumulate(np.moveaxis(gin, 0, axis))

    return _make(out_data, (x,), backward, _register("interp_axis"))


def upsample3d(x, factors):
    """Trilinear upsampling of x[..., T, H, W] by integer factors per axis.

    Uses endpoint-aligned sample positions, so no out-of-range reads occur.
    """
    x = _as_tensor(x)
    out = x
    for k, f in enumerate(factors):
        if f == 1:
            continue
        axis = x.ndim - 3 + k
        n = out.shape[axis]
        m = n * f
        if n == 1:
            pos = np.zeros(m)
        else:
            pos = np.arange(m) * (n - 1) / (m - 1)
        i0 = np.floor(pos).astype(np.int64)
        i1 = np.minimum(i0 + 1, n - 1)
        w1 = pos - i0
        out = _interp_axis(out, axis, i0, i1, 1.0 - w1, w1)
    return out
