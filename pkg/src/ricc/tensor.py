"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float32 by default, float64 for
numerical shadow computations) and records the operation graph as it is
built.  ``Tensor.backward()`` walks that graph once in reverse
topological order and accumulates gradients into ``.grad``.

Only the operations needed by the autoencoders live here: elementwise
arithmetic, reductions, 2-d convolution and its transpose, leaky ReLU,
batch normalization, 2x2 max pooling, bilinear rotation, and a plain
SGD update.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ascontig",
    "conv2d",
    "transpose_conv2d",
    "leaky_relu",
    "batch_norm",
    "max_pool2",
    "rotate_bilinear",
    "sgd_step",
    "zero_grad",
]


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A value node in the computation graph.

    Data is never mutated by operations; each op allocates a fresh
    output node.  ``requires_grad`` marks leaves that should receive
    gradients; interior nodes inherit it from their parents.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff -------------------------------------------------------------

    def backward(self, seed=None):
        """Accumulate gradients of this node into every reachable leaf.

        ``seed`` defaults to ones (a scalar loss is the usual root).
        Each graph node is visited exactly once, in reverse topological
        order, so gradient contributions along shared subgraphs are
        summed before being propagated further.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): np.asarray(seed, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other, self.dtype)
        out_data = self.data + other.data
        sa, sb = self.data.shape, other.data.shape
        return Tensor._from_op(
            out_data, (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other, self.dtype)
        out_data = self.data - other.data
        sa, sb = self.data.shape, other.data.shape
        return Tensor._from_op(
            out_data, (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def __rsub__(self, other):
        return _wrap(other, self.dtype) - self

    def __mul__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self.data, other.data
        return Tensor._from_op(
            a * b, (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self.data, other.data
        out = a / b
        return Tensor._from_op(
            out, (self, other),
            lambda g: (_unbroadcast(g / b, a.shape),
                       _unbroadcast(-g * a / (b * b), b.shape)))

    def __rtruediv__(self, other):
        return _wrap(other, self.dtype) / self

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def square(self):
        a = self.data
        return Tensor._from_op(a * a, (self,), lambda g: (2.0 * a * g,))

    def abs(self):
        a = self.data
        sign = np.sign(a)
        return Tensor._from_op(np.abs(a), (self,), lambda g: (g * sign,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * 0.5 / np.maximum(out, 1e-12),))

    def sum(self, axis=None, keepdims=False):
        shape = self.data.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(out, (self,), back)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else _axis_count(self.data.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return Tensor._from_op(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def narrow0(self, start, stop):
        """Slice along axis 0; gradient scatters back into the slice."""
        shape = self.data.shape

        def back(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[start:stop] = g
            return (full,)

        return Tensor._from_op(self.data[start:stop], (self,), back)


def _wrap(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad, shape):
    """Sum a gradient down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _axis_count(shape, axis):
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for a in axis:
        n *= shape[a]
    return n


def _toposort(root):
    """Iterative post-order over the op graph, deepest parents first."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def ascontig(x):
    return np.ascontiguousarray(x)


# -- convolution core ---------------------------------------------------------
#
# conv2d and transpose_conv2d share three kernels: the forward
# cross-correlation, its adjoint w.r.t. the input (col2im scatter), and
# the weight gradient.  transpose_conv2d *is* the input adjoint, so its
# backward reuses the forward kernels with the roles swapped.


def _im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(
            f"conv2d: spatial input {h}x{w} too small for kernel {k} "
            f"with stride {stride}, pad {pad}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, (n, c, k, k, ho, wo),
        (s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride))
    return cols.reshape(n, c * k * k, ho * wo), ho, wo


def _conv_forward(x, w, stride, pad):
    n, c, h, wd = x.shape
    f = w.shape[0]
    k = w.shape[2]
    cols, ho, wo = _im2col(x, k, stride, pad)
    wm = w.reshape(f, c * k * k)
    out = wm @ cols.transpose(1, 0, 2).reshape(c * k * k, n * ho * wo)
    return out.reshape(f, n, ho * wo).transpose(1, 0, 2).reshape(n, f, ho, wo)


def _conv_grad_weight(x, gout, k, stride, pad):
    n, c, h, w = x.shape
    f = gout.shape[1]
    cols, ho, wo = _im2col(x, k, stride, pad)
    gm = gout.reshape(n, f, ho * wo).transpose(1, 0, 2).reshape(f, n * ho * wo)
    colsr = cols.transpose(1, 0, 2).reshape(c * k * k, n * ho * wo)
    return (gm @ colsr.T).reshape(f, c, k, k)


def _conv_grad_input(gout, w, stride, pad, in_hw):
    """Adjoint of the forward cross-correlation: col2im scatter-add."""
    n, f, ho, wo = gout.shape
    c = w.shape[1]
    k = w.shape[2]
    h, wd = in_hw
    wm = w.reshape(f, c * k * k)
    gm = gout.reshape(n, f, ho * wo).transpose(1, 0, 2).reshape(f, n * ho * wo)
    cols = (wm.T @ gm).reshape(c, k, k, n, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=gout.dtype)
    for i in range(k):
        hi = i + stride * ho
        for j in range(k):
            wj = j + stride * wo
            xp[:, :, i:hi:stride, j:wj:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        return xp[:, :, pad:pad + h, pad:pad + wd]
    return xp


def _check_conv_shapes(x, w, b, op):
    if x.data.ndim != 4:
        raise ValueError(f"{op}: input must be 4-d [N,C,H,W], got {x.data.ndim}-d")
    if w.data.ndim != 4:
        raise ValueError(f"{op}: weight must be 4-d [F,C,kh,kw], got {w.data.ndim}-d")
    k = w.data.shape[2]
    if w.data.shape[3] != k or k % 2 == 0:
        raise ValueError(f"{op}: kernel must be square with odd side, got "
                         f"{w.data.shape[2]}x{w.data.shape[3]}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"{op}: input channel dimension {x.data.shape[1]} does not match "
            f"weight channel dimension {w.data.shape[1]}")
    if b is not None and b.data.shape != (w.data.shape[0],):
        raise ValueError(
            f"{op}: bias shape {b.data.shape} does not match filter count "
            f"{w.data.shape[0]}")


def conv2d(x, w, b=None, stride=1, pad=1):
    """Strided 2-d cross-correlation of ``x`` [N,C,H,W] with ``w`` [F,C,k,k].

    ``pad=k//2`` with stride 1 preserves the spatial size.  Differentiable
    in ``x``, ``w``, and ``b``.
    """
    _check_conv_shapes(x, w, b, "conv2d")
    k = w.data.shape[2]
    out = _conv_forward(x.data, w.data, stride, pad)
    if b is not None:
        out = out + b.data[None, :, None, None]
    in_hw = x.data.shape[2:]
    xd, wd = x.data, w.data

    def back(g):
        gx = _conv_grad_input(g, wd, stride, pad, in_hw) if x.requires_grad else None
        gw = _conv_grad_weight(xd, g, k, stride, pad) if w.requires_grad else None
        if b is None:
            return (gx, gw)
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, back)


def transpose_conv2d(x, w, b=None, stride=1, pad=1):
    """Adjoint of ``conv2d`` with the same weight, as a forward op.

    Maps [N,F,H,W] to [N,C,stride*H,stride*W] for the 3x3/pad-1
    convention used by the autoencoders; satisfies
    ``<conv2d(u), v> == <u, transpose_conv2d(v)>`` exactly (bias aside).
    """
    if x.data.ndim != 4:
        raise ValueError(f"transpose_conv2d: input must be 4-d, got {x.data.ndim}-d")
    if w.data.ndim != 4:
        raise ValueError("transpose_conv2d: weight must be 4-d [F,C,kh,kw]")
    if x.data.shape[1] != w.data.shape[0]:
        raise ValueError(
            f"transpose_conv2d: input channel dimension {x.data.shape[1]} does "
            f"not match weight filter dimension {w.data.shape[0]}")
    if stride not in (1, 2):
        raise ValueError(f"transpose_conv2d: stride must be 1 or 2, got {stride}")
    c = w.data.shape[1]
    if b is not None and b.data.shape != (c,):
        raise ValueError(
            f"transpose_conv2d: bias shape {b.data.shape} does not match output "
            f"channel count {c}")
    k = w.data.shape[2]
    n, f, h, wd_ = x.data.shape
    out_hw = (stride * h, stride * wd_)
    out = _conv_grad_input(x.data, w.data, stride, pad, out_hw)
    if b is not None:
        out = out + b.data[None, :, None, None]
    xd, wd = x.data, w.data

    def back(g):
        gx = _conv_forward(g, wd, stride, pad) if x.requires_grad else None
        gw = _conv_grad_weight(g, xd, k, stride, pad) if w.requires_grad else None
        if b is None:
            return (gx, gw)
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, back)


def leaky_relu(x, slope=0.3):
    """Elementwise max(slope*x, x); the subgradient at 0 is taken as 1."""
    a = x.data
    factor = np.where(a >= 0, 1.0, slope).astype(a.dtype)
    return Tensor._from_op(a * factor, (x,), lambda g: (g * factor,))


def max_pool2(x):
    """2x2 max pooling with stride 2; gradient routes to the first
    row-major argmax within each window."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2: spatial size {h}x{w} must be even")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gwin = np.zeros_like(flat)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return Tensor._from_op(out, (x,), back)


def batch_norm(x, gamma, beta, running_mean, running_var, mode,
               eps=1e-5, momentum=0.99):
    """Per-channel batch normalization over [N,C,H,W].

    Train mode normalizes with the minibatch moments and folds them into
    the running statistics (``r <- momentum*r + (1-momentum)*batch``);
    eval mode normalizes with the running statistics.  Running tensors
    are buffers: they are updated in place and never receive gradients.
    """
    if x.data.ndim != 4:
        raise ValueError("batch_norm: input must be 4-d [N,C,H,W]")
    c = x.data.shape[1]
    for name, t, shape in (("gamma", gamma, (c,)), ("beta", beta, (c,)),
                           ("running_mean", running_mean, (c,)),
                           ("running_var", running_var, (c,))):
        if t.data.shape != shape:
            raise ValueError(f"batch_norm: {name} shape {t.data.shape} != {shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")

    if mode == "eval":
        mu = running_mean.data[None, :, None, None]
        var = running_var.data[None, :, None, None]
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
        gd = gamma.data

        def back_eval(g):
            gx = g * gd[None, :, None, None] * inv if x.requires_grad else None
            gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            return (gx, gg, gb)

        return Tensor._from_op(out, (x, gamma, beta), back_eval)

    if x.data.shape[0] < 2:
        raise ValueError("batch_norm: train mode requires batch size >= 2 "
                         "(minibatch variance is undefined otherwise)")
    axes = (0, 2, 3)
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    # unbiased variance goes into the running estimate
    unbiased = var * (m / max(m - 1, 1))
    running_mean.data = momentum * running_mean.data + (1.0 - momentum) * mu
    running_var.data = momentum * running_var.data + (1.0 - momentum) * unbiased
    gd = gamma.data

    def back_train(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gd[None, :, None, None]
            s1 = gxhat.sum(axis=axes)[None, :, None, None]
            s2 = (gxhat * xhat).sum(axis=axes)[None, :, None, None]
            gx = inv[None, :, None, None] * (gxhat - s1 / m - xhat * s2 / m)
        return (gx, gg, gb)

    return Tensor._from_op(out, (x, gamma, beta), back_train)


# -- differentiable rotation --------------------------------------------------


def rotation_weights(side, angle_deg, dtype=np.float64):
    """Bilinear resampling plan for a rotation about the image centre.

    Returns ``(src, wgt, inside)`` where ``src`` is [4, side*side] int
    indices into the flattened source image, ``wgt`` the matching
    bilinear weights, and ``inside`` the mask of output pixels whose
    sample point falls inside the image support.  The plan is linear in
    the image, so its transpose (a scatter with the same weights) is the
    exact adjoint.
    """
    theta = np.deg2rad(angle_deg)
    ct, st = np.cos(theta), np.sin(theta)
    centre = (side - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    yr = ys - centre
    xr = xs - centre
    # inverse mapping: output pixel -> source coordinate
    sy = -st * xr + ct * yr + centre
    sx = ct * xr + st * yr + centre
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = (sy - y0).astype(dtype)
    fx = (sx - x0).astype(dtype)
    inside = (sy >= 0) & (sy <= side - 1) & (sx >= 0) & (sx <= side - 1)
    y0c = np.clip(y0, 0, side - 2 if side > 1 else 0)
    x0c = np.clip(x0, 0, side - 2 if side > 1 else 0)
    fy = np.clip(sy - y0c, 0.0, 1.0)
    fx = np.clip(sx - x0c, 0.0, 1.0)
    flat = lambda yy, xx: (yy * side + xx).ravel()
    src = np.stack([
        flat(y0c, x0c), flat(y0c, x0c + 1), flat(y0c + 1, x0c), flat(y0c + 1, x0c + 1)])
    wgt = np.stack([
        ((1 - fy) * (1 - fx)).ravel(), ((1 - fy) * fx).ravel(),
        (fy * (1 - fx)).ravel(), (fy * fx).ravel()])
    wgt = wgt * inside.ravel()[None, :]
    return src, wgt, inside.ravel()


def _apply_rotation(img_flat, src, wgt, inside, fill):
    """img_flat: [..., side*side] -> rotated [..., side*side]."""
    out = np.zeros_like(img_flat)
    for q in range(4):
        out += img_flat[..., src[q]] * wgt[q]
    if fill != 0.0:
        out = out + (~inside.astype(bool)) * fill
    return out


def _apply_rotation_adjoint(g_flat, src, wgt, npix):
    out = np.zeros(g_flat.shape[:-1] + (npix,), dtype=g_flat.dtype)
    lead = int(np.prod(g_flat.shape[:-1], dtype=np.int64)) if g_flat.ndim > 1 else 1
    g2 = g_flat.reshape(lead, -1)
    o2 = out.reshape(lead, npix)
    for q in range(4):
        contrib = g2 * wgt[q][None, :]
        for r in range(lead):
            o2[r] += np.bincount(src[q], weights=contrib[r], minlength=npix)
    return out


def rotate_bilinear(x, angle_deg, fill=0.0):
    """Differentiable rotation of [N,C,H,W] about the image centre.

    Out-of-support samples take ``fill``.  The backward pass is the
    exact linear adjoint of the bilinear gather.
    """
    n, c, h, w = x.data.shape
    if h != w:
        raise ValueError(f"rotate_bilinear: image must be square, got {h}x{w}")
    src, wgt, inside = rotation_weights(h, angle_deg, dtype=x.data.dtype)
    wgt = wgt.astype(x.data.dtype)
    flatimg = x.data.reshape(n, c, h * w)
    out = _apply_rotation(flatimg, src, wgt, inside, fill).reshape(n, c, h, w)

    def back(g):
        gf = g.reshape(n, c, h * w)
        gx = _apply_rotation_adjoint(gf, src, wgt, h * w)
        return (gx.reshape(n, c, h, w),)

    return Tensor._from_op(out, (x,), back)


# -- optimizer ----------------------------------------------------------------


def sgd_step(params, grads, lr):
    """In-place SGD update ``p <- p - lr*g`` on every learnable tensor.

    ``params`` is a ParamSet-like object with a ``learnable()`` iterator
    of (name, Tensor) pairs, or a plain dict of name -> Tensor; ``grads``
    maps names to gradient arrays.  Running statistics never appear in
    ``grads`` and are left untouched.  ``lr`` may be 0, which leaves the
    parameters unchanged.
    """
    if lr < 0:
        raise ValueError(f"sgd_step: learning rate must be >= 0, got {lr}")
    items = params.learnable() if hasattr(params, "learnable") else params.items()
    for name, p in items:
        if name not in grads:
            continue
        g = np.asarray(grads[name])
        if g.shape != p.data.shape:
            raise ValueError(
                f"sgd_step: gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {p.data.shape}")
        p.data = p.data - lr * g
    return params


def zero_grad(params):
    items = params.all() if hasattr(params, "all") else params.items()
    for _, p in items:
        p.grad = None
