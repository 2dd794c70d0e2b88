"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors carry float32 data in row-major order (N,C,H,W for activations,
Cout,Cin,Kh,Kw for conv kernels). The op set is exactly what the saliency
networks and losses need: conv2d, maxpool2, relu, deconv2d, channel concat,
normalized MSE, area resize, plus scalar arithmetic for loss mixing.

Reductions run in numpy's fixed serial order, so replaying an op sequence
yields bit-identical results at any configured parallelism.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op's contract."""


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


class Tensor:
    """A dense float32 array that optionally participates in the grad tape.

    The tape is implicit: each op output keeps references to its parents and
    a closure that scatters the output adjoint back to them. ``backward`` on
    a scalar replays those closures in exact reverse execution order.
    """

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op=""):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        if self.data.size == 0 or any(d < 1 for d in self.data.shape):
            raise ShapeError(f"all extents must be >= 1, got shape {self.data.shape}")
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op
        self._backward_done = False

    # ---- basic introspection -------------------------------------------------

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
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op!r})"

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    # ---- autodiff ------------------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(np.float32, copy=False)

    def backward(self):
        """Populate gradients on every requires_grad tensor reachable from here.

        The loss must be scalar and tape-connected; calling backward twice on
        the same tensor without rebuilding the graph is an error.
        """
        if self.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        if self._backward_done:
            raise RuntimeError("backward already called on this tensor; rebuild the graph first")
        if not self.requires_grad:
            raise RuntimeError("backward on a tensor detached from any requires_grad leaf")

        # Iterative topological sort; reversal gives exact reverse execution order.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
        self._backward_done = True

    # ---- scalar arithmetic (loss mixing) -------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.full(self.shape, other))
        if other.shape != self.shape:
            raise ShapeError(f"add shape mismatch: {self.shape} vs {other.shape}")
        out = Tensor(self.data + other.data, _parents=(self, other), _op="add")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(g)

        out._backward = _bw
        return out

    __radd__ = __add__

    def __mul__(self, c):
        c = float(c)
        out = Tensor(self.data * c, _parents=(self,), _op="scale")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g * c)

        out._backward = _bw
        return out

    __rmul__ = __mul__


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---- im2col machinery --------------------------------------------------------

def _im2col(x, kh, kw, stride, pad):
    """(N,C,H,W) -> columns (N, C*kh*kw, OH*OW) plus output extents."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[2], x.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]                   # N,C,OH,OW,kh,kw
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of _im2col: scatter-add columns back into an (N,C,H,W) array."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, hp, wp), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:hp - pad, pad:wp - pad]
    return out


def _resolve_padding(padding, kh, kw, stride):
    if padding == "same":
        if stride != 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("'same' padding requires stride 1 and odd kernel extents")
        return (kh - 1) // 2
    return int(padding)


def _conv_forward_data(x, w, b, stride, pad):
    n, cin, h, hw = x.shape
    cout, cink, kh, kw = w.shape
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    out = np.matmul(w.reshape(cout, cin * kh * kw), cols)       # N,Cout,OH*OW
    out += b.reshape(1, cout, 1)
    return out.reshape(n, cout, oh, ow), cols


def _conv_grad_input(g, w, x_shape, stride, pad):
    """dL/dx of conv2d; also the forward map of the transposed convolution."""
    n = g.shape[0]
    cout, cin, kh, kw = w.shape
    gflat = g.reshape(n, cout, -1)
    cols_g = np.matmul(w.reshape(cout, -1).T, gflat)            # N, Cin*kh*kw, OH*OW
    return _col2im(cols_g, x_shape, kh, kw, stride, pad)


def _conv_grad_kernel(g, cols, kshape):
    n = g.shape[0]
    cout = kshape[0]
    gflat = g.reshape(n, cout, -1)
    gw = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0)  # Cout, Cin*kh*kw
    return gw.reshape(kshape)


# ---- ops ---------------------------------------------------------------------

def conv2d(x, kernel, bias, stride=1, padding="same"):
    """Cross-correlation of (N,Cin,H,W) with (Cout,Cin,Kh,Kw) plus bias.

    Output extent: H' = floor((H + 2p - Kh)/stride) + 1.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/kernel, got {x.shape}, {kernel.shape}")
    n, cin, h, w = x.shape
    cout, cink, kh, kw = kernel.shape
    if cin != cink:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {cink}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    pad = _resolve_padding(padding, kh, kw, stride)
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d produces empty output for input {x.shape} kernel {kernel.shape}")

    data, cols = _conv_forward_data(x.data, kernel.data, bias.data, stride, pad)
    out = Tensor(data, _parents=(x, kernel, bias), _op="conv2d")

    def _bw(g):
        if kernel.requires_grad:
            kernel._accumulate(_conv_grad_kernel(g, cols, kernel.shape))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            x._accumulate(_conv_grad_input(g, kernel.data, x.shape, stride, pad))

    out._backward = _bw
    return out


def maxpool2(x):
    """2x2 max pooling, stride 2; odd extents are padded with -inf on the high side.

    Backward routes each window's gradient to the argmax position, first
    occurrence in row-major scan on ties.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2 needs H,W >= 2, got {x.shape}")
    hp, wp = h + (h % 2), w + (w % 2)
    xp = x.data
    if (hp, wp) != (h, w):
        xp = np.pad(x.data, ((0, 0), (0, 0), (0, hp - h), (0, wp - w)),
                    constant_values=-np.inf)
    win = xp.reshape(n, c, hp // 2, 2, wp // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, hp // 2, wp // 2, 4)
    arg = np.argmax(win, axis=-1)                               # first occurrence
    data = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    out = Tensor(data, _parents=(x,), _op="maxpool2")

    def _bw(g):
        if not x.requires_grad:
            return
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, arg[..., None], g[..., None].astype(np.float32), axis=-1)
        gp = gwin.reshape(n, c, hp // 2, wp // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        gp = gp.reshape(n, c, hp, wp)
        x._accumulate(gp[:, :, :h, :w])

    out._backward = _bw
    return out


def relu(x):
    """Elementwise max(x, 0); subgradient at 0 is 0."""
    x = _as_tensor(x)
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0), _parents=(x,), _op="relu")

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    out._backward = _bw
    return out


def deconv2d(x, kernel, bias, stride=2):
    """Transposed convolution doubling spatial extents (4x4 kernel, stride 2, pad 1).

    Kernel layout is (Cin, Cout, Kh, Kw). The forward map is the adjoint of
    the corresponding strided conv2d.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"deconv2d expects 4-d input/kernel, got {x.shape}, {kernel.shape}")
    n, cin, h, w = x.shape
    cink, cout, kh, kw = kernel.shape
    if cin != cink:
        raise ShapeError(f"deconv2d channel mismatch: input has {cin}, kernel expects {cink}")
    if (kh, kw) != (4, 4) or stride != 2:
        raise ShapeError("deconv2d is fixed to 4x4 kernels with stride 2")
    if bias.shape != (cout,):
        raise ShapeError(f"deconv2d bias must have shape ({cout},), got {bias.shape}")
    pad = 1
    # The paired conv maps (N,Cout,2H,2W) -> (N,Cin,H,W); kernel seen by that
    # conv is just a relabeling of ours.
    wc = kernel.data                                            # (Cin=conv Cout, Cout=conv Cin, 4, 4)
    data = _conv_grad_input(x.data, wc, (n, cout, 2 * h, 2 * w), stride, pad)
    data += bias.data.reshape(1, cout, 1, 1)
    out = Tensor(data, _parents=(x, kernel, bias), _op="deconv2d")

    def _bw(g):
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad or kernel.requires_grad:
            cols, _, _ = _im2col(g, kh, kw, stride, pad)
        if x.requires_grad:
            gx = np.matmul(wc.reshape(cin, -1), cols)           # N, Cin, H*W
            x._accumulate(gx.reshape(n, cin, h, w))
        if kernel.requires_grad:
            xflat = x.data.reshape(n, cin, -1)
            gw = np.matmul(xflat, cols.transpose(0, 2, 1)).sum(axis=0)
            kernel._accumulate(gw.reshape(kernel.shape))

    out._backward = _bw
    return out


def concat_channels(a, b):
    """Concatenate along the channel axis; backward splits the gradient."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects 4-d tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels spatial/batch mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1), _parents=(a, b), _op="concat")

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g[:, :ca])
        if b.requires_grad:
            b._accumulate(g[:, ca:])

    out._backward = _bw
    return out


def mse_normalized(pred, target):
    """Normalized L2 loss: sum((pred-target)^2) / (w*h), averaged over batch.

    The trailing two extents are taken as h and w; leading extents other than
    the batch axis (axis 0 when ndim >= 3) count as batch-free channels and
    are summed.
    """
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_normalized shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim >= 2:
        h, w = pred.shape[-2], pred.shape[-1]
    else:
        h, w = 1, pred.shape[-1] if pred.ndim == 1 else 1
    batch = pred.shape[0] if pred.ndim >= 3 else 1
    scale = 1.0 / (w * h * batch)
    diff = pred.data - target.data
    val = (np.float32(scale) * np.sum(diff * diff, dtype=np.float32)).reshape(1)
    out = Tensor(val, _parents=(pred, target), _op="mse_normalized")

    def _bw(g):
        gd = (2.0 * scale * float(g.reshape(-1)[0])) * diff
        if pred.requires_grad:
            pred._accumulate(gd)
        if target.requires_grad:
            target._accumulate(-gd)

    out._backward = _bw
    return out


def tensor_sum(x):
    """Sum of all elements as a 1-element tensor (test/diagnostic helper)."""
    x = _as_tensor(x)
    out = Tensor(np.sum(x.data, dtype=np.float32).reshape(1), _parents=(x,), _op="sum")

    def _bw(g):
        if x.requires_grad:
            x._accumulate(np.full(x.shape, float(g.reshape(-1)[0]), dtype=np.float32))

    out._backward = _bw
    return out


def _interval_overlap_matrix(src, dst):
    """(dst, src) row-stochastic matrix of pixel-interval overlaps (area resample)."""
    m = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, src)):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    m /= m.sum(axis=1, keepdims=True)
    return m.astype(np.float32)


def _bilinear_matrix(src, dst):
    """(dst, src) row-stochastic matrix for align-corners-false bilinear resampling."""
    m = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        pos = np.clip((i + 0.5) * scale - 0.5, 0, src - 1)
        j = int(np.floor(pos))
        frac = pos - j
        m[i, j] += 1 - frac
        if j + 1 < src:
            m[i, j + 1] += frac
        else:
            m[i, j] += frac
    return m.astype(np.float32)


def resize_area(x, out_h, out_w):
    """Area-average resample of the trailing two extents.

    Downscaling uses exact interval-overlap averaging (mean-preserving when
    extents divide evenly); an upscale request falls through to the bilinear
    variant. Backward is the exact adjoint (uniform scatter).
    """
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("resize_area expects at least 2-d input")
    h, w = x.shape[-2], x.shape[-1]
    mh = (_interval_overlap_matrix(h, out_h) if out_h <= h else _bilinear_matrix(h, out_h))
    mw = (_interval_overlap_matrix(w, out_w) if out_w <= w else _bilinear_matrix(w, out_w))
    lead = x.shape[:-2]
    flat = x.data.reshape(-1, h, w)
    data = np.einsum("oh,nhw,pw->nop", mh, flat, mw).astype(np.float32)
    out = Tensor(data.reshape(*lead, out_h, out_w), _parents=(x,), _op="resize_area")

    def _bw(g):
        if not x.requires_grad:
            return
        gf = g.reshape(-1, out_h, out_w)
        gx = np.einsum("oh,nop,pw->nhw", mh, gf, mw).astype(np.float32)
        x._accumulate(gx.reshape(x.shape))

    out._backward = _bw
    return out
