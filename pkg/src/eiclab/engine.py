"""Minimal reverse-mode differentiation engine.

Supplies exactly the differentiable operations the frame-prediction models
need: 2-D cross-correlation, bilinear warping by a flow field, elementwise
activations, L1/L2 means, total variation, channel concat/slice, nearest
upsampling and a straight-through unit clamp.

Conventions
-----------
* All arithmetic is float64; forward passes are deterministic.
* No broadcasting: operand shapes must match exactly, except where an
  operation defines otherwise (python scalars are accepted by add/sub/mul).
* Backward warping sign convention: output pixel p samples the input at
  p + flow(p), with sample coordinates clamped to the image border.
* Subgradients at kinks: relu'(0) = 0, sign(0) = 0 inside the L1 mean.
"""

from __future__ import annotations

import numpy as np

from .errors import GraphError, ShapeError

__all__ = [
    "Tensor", "tensor", "no_grad", "backward",
    "add", "sub", "mul", "reduce_sum",
    "conv2d", "grid_sample", "activation",
    "relu", "leaky_relu", "sigmoid", "tanh",
    "l1_mean", "l2_mean", "total_variation",
    "concat", "slice_channels", "upsample2x", "clamp_unit",
]

_grad_enabled = True


class no_grad:
    """Context manager that skips graph construction (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A float64 ndarray plus the graph bookkeeping needed for reverse mode.

    The graph is implicit: each non-leaf tensor holds its parent tensors and
    a closure producing the parents' gradients from its own.  ``backward``
    on a scalar walks the graph once in reverse topological order and
    accumulates gradients on every ``requires_grad`` leaf it reaches.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise GraphError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        out = Tensor(self.data)
        return out

    def grad_array(self):
        """Gradient buffer, zeros if this leaf never received one."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    """Wrap an op result; records the graph only when it can matter.

    Any graph-internal node has requires_grad True, so checking the flag on
    the parents covers both leaves and intermediates.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def backward(loss):
    """Reverse-mode accumulation from a scalar loss.

    Each node is visited at most once; a leaf used on several paths receives
    the sum of all path gradients.  Leaves not on any path keep grad=None,
    read back as zeros via ``grad_array``.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    # Buffer entries are [array, owned]; closures may hand back views or the
    # incoming gradient itself, so a buffer is only mutated in place once this
    # pass has allocated it ("owned").
    buffers = {id(loss): [np.ones_like(loss.data), True]}
    for node in reversed(topo):
        entry = buffers.pop(id(node), None)
        if entry is None:
            continue
        g = entry[0]
        if node._backward_fn is not None:
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None:
                    continue
                e = buffers.get(id(parent))
                if e is None:
                    buffers[id(parent)] = [pg, False]
                elif e[1]:
                    e[0] += pg
                else:
                    e[0] = e[0] + pg
                    e[1] = True
        elif node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g


# ---------------------------------------------------------------------------
# elementwise arithmetic (exact-shape or python scalar)
# ---------------------------------------------------------------------------

def _check_same_shape(opname, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname}: operand shapes differ, {a.data.shape} vs {b.data.shape}")


def add(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        return _make(a.data + float(b), (a,), lambda g: (g,))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return add(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        return _make(a.data - float(b), (a,), lambda g: (g,))
    if not isinstance(a, Tensor) and np.isscalar(a):
        s = float(a)
        b = _as_tensor(b)
        return _make(s - b.data, (b,), lambda g: (-g,))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        s = float(b)
        return _make(a.data * s, (a,), lambda g: (g * s,))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return mul(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def reduce_sum(x):
    """Sum of all entries, as a scalar tensor."""
    x = _as_tensor(x)
    shape = x.data.shape
    return _make(np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


# ---------------------------------------------------------------------------
# padding helpers (internal to conv2d)
# ---------------------------------------------------------------------------

def _reflect_indices(n, pad):
    # np.pad 'reflect' style: no edge repeat, so pad must stay below n.
    if pad > n - 1:
        raise ShapeError(f"reflect padding {pad} too large for spatial extent {n}")
    idx = np.arange(-pad, n + pad)
    idx = np.abs(idx)
    idx = np.where(idx >= n, 2 * (n - 1) - idx, idx)
    return idx


def _pad2d(x, pad, mode):
    """Pad the two trailing axes. Returns (padded, unpad_grad_fn)."""
    if pad == 0:
        return x, lambda g: g
    n, c, h, w = x.shape
    if mode == "zero":
        out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        out[:, :, pad:pad + h, pad:pad + w] = x

        def unpad(g):
            return g[:, :, pad:pad + h, pad:pad + w]

        return out, unpad
    if mode == "reflect":
        rows = _reflect_indices(h, pad)
        cols = _reflect_indices(w, pad)
        out = x[:, :, rows][:, :, :, cols]

        def unpad(g):
            tmp = np.zeros((n, c, h, w + 2 * pad), dtype=g.dtype)
            np.add.at(tmp, (slice(None), slice(None), rows, slice(None)), g)
            dx = np.zeros((n, c, h, w), dtype=g.dtype)
            np.add.at(dx, (slice(None), slice(None), slice(None), cols), tmp)
            return dx

        return out, unpad
    raise ShapeError(f"unknown pad_mode {mode!r}")


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def conv2d(x, kernel, bias=None, stride=1, padding=0, pad_mode="zero"):
    """Batched 2-D cross-correlation.

    x: (N, C_in, H, W), kernel: (C_out, C_in, kH, kW), bias: (C_out,) or None.
    Output spatial size is (H + 2*padding - kH)//stride + 1 (same for W).
    pad_mode is "zero" or "reflect".
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if bias is not None:
        bias = _as_tensor(bias)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D (N,C,H,W), got {x.data.ndim}-D")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D (O,C,kH,kW), got {kernel.data.ndim}-D")
    n, c, h, w = x.data.shape
    co, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise ShapeError(f"conv2d: channel axis 1 mismatch, input has {c} channels "
                         f"but kernel expects {ck}")
    if bias is not None and bias.data.shape != (co,):
        raise ShapeError(f"conv2d: bias axis 0 must have size {co}, got {bias.data.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be non-negative, got {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel extent ({kh},{kw}) exceeds padded input ({hp},{wp})")

    xp, unpad = _pad2d(x.data, padding, pad_mode)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]            # (N, C, Ho, Wo, kh, kw) view
    ho, wo = win.shape[2], win.shape[3]
    # One im2col copy, shared by the forward GEMM and both backward GEMMs.
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    col = col.reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(co, c * kh * kw)
    out = col @ kmat.T                              # (N*Ho*Wo, O)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
        gk = None
        if kernel.requires_grad:
            gk = (gmat.T @ col).reshape(co, c, kh, kw)
        gx = None
        if x.requires_grad:
            dcol = (gmat @ kmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride] += \
                        dcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = unpad(gxp)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if bias is not None:
            return (gx, gk, gb)
        return (gx, gk)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, back)


# ---------------------------------------------------------------------------
# grid_sample (bilinear backward warp, border clamped)
# ---------------------------------------------------------------------------

def grid_sample(image, flow):
    """Sample ``image`` at per-pixel displaced locations.

    image: (N, C, H, W); flow: (N, 2, H, W) with channels (dx, dy) in pixels.
    Output pixel (y, x) bilinearly interpolates the image at
    (x + dx, y + dy), clamped to the border.  Differentiable w.r.t. both
    inputs; zero flow reproduces the image exactly.
    """
    image, flow = _as_tensor(image), _as_tensor(flow)
    if image.data.ndim != 4:
        raise ShapeError(f"grid_sample: image must be 4-D, got {image.data.ndim}-D")
    n, c, h, w = image.data.shape
    if flow.data.shape != (n, 2, h, w):
        raise ShapeError(f"grid_sample: flow must have shape {(n, 2, h, w)}, "
                         f"got {flow.data.shape}")

    gx = np.arange(w, dtype=np.float64)[None, None, :] + flow.data[:, 0]
    gy = np.arange(h, dtype=np.float64)[None, :, None] + flow.data[:, 1]
    cx = np.clip(gx, 0.0, w - 1.0)
    cy = np.clip(gy, 0.0, h - 1.0)
    x0f = np.floor(cx)
    y0f = np.floor(cy)
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = cx - x0f
    wy = cy - y0f

    hw = h * w
    flat = image.data.reshape(n, c, hw)

    def gather(iy, ix):
        lin = (iy * w + ix).reshape(n, 1, hw)
        idx = np.broadcast_to(lin, (n, c, hw))
        return np.take_along_axis(flat, idx, axis=2).reshape(n, c, h, w)

    g00 = gather(y0, x0)
    g01 = gather(y0, x1)
    g10 = gather(y1, x0)
    g11 = gather(y1, x1)
    w00 = ((1.0 - wy) * (1.0 - wx))[:, None]
    w01 = ((1.0 - wy) * wx)[:, None]
    w10 = (wy * (1.0 - wx))[:, None]
    w11 = (wy * wx)[:, None]
    out = w00 * g00 + w01 * g01 + w10 * g10 + w11 * g11

    def back(g):
        need_img = image.requires_grad
        need_flow = flow.requires_grad
        gi = None
        if need_img:
            acc = np.zeros(n * c * hw, dtype=np.float64)
            base = (np.arange(n * c, dtype=np.int64) * hw)[:, None]
            for wgt, iy, ix in ((w00, y0, x0), (w01, y0, x1),
                                (w10, y1, x0), (w11, y1, x1)):
                lin = (iy * w + ix).reshape(n, 1, hw)
                lin = np.broadcast_to(lin, (n, c, hw)).reshape(n * c, hw)
                vals = (g * wgt).reshape(n * c, hw)
                acc += np.bincount((base + lin).ravel(), weights=vals.ravel(),
                                   minlength=n * c * hw)
            gi = acc.reshape(n, c, h, w)
        gf = None
        if need_flow:
            dcx = (1.0 - wy)[:, None] * (g01 - g00) + wy[:, None] * (g11 - g10)
            dcy = (1.0 - wx)[:, None] * (g10 - g00) + wx[:, None] * (g11 - g01)
            inx = ((gx >= 0.0) & (gx <= w - 1.0)).astype(np.float64)
            iny = ((gy >= 0.0) & (gy <= h - 1.0)).astype(np.float64)
            dgx = (g * dcx).sum(axis=1) * inx
            dgy = (g * dcy).sum(axis=1) * iny
            gf = np.stack([dgx, dgy], axis=1)
        return (gi, gf)

    return _make(out, (image, flow), back)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0.0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=0.2):
    x = _as_tensor(x)
    mask = x.data > 0.0
    factor = np.where(mask, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x):
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x):
    x = _as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


_ACTIVATIONS = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def activation(x, kind):
    """Dispatch on kind in {relu, leaky_relu, sigmoid, tanh}."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ShapeError(f"unknown activation kind {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# reductions used as losses
# ---------------------------------------------------------------------------

def l1_mean(a, b):
    """Mean absolute difference. sign(0)=0 keeps the kink subgradient bounded."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("l1_mean", a, b)
    d = a.data - b.data
    nel = d.size

    def back(g):
        s = np.sign(d) * (g / nel)
        return (s, -s)

    return _make(np.asarray(np.abs(d).mean()), (a, b), back)


def l2_mean(a, b):
    """Mean squared difference."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("l2_mean", a, b)
    d = a.data - b.data
    nel = d.size

    def back(g):
        s = d * (2.0 * g / nel)
        return (s, -s)

    return _make(np.asarray((d * d).mean()), (a, b), back)


def total_variation(flow):
    """Mean absolute first difference over both spatial directions.

    flow: (N, C, H, W) with H, W >= 2.  A single mean over the concatenation
    of all vertical and horizontal difference terms.
    """
    flow = _as_tensor(flow)
    if flow.data.ndim != 4:
        raise ShapeError(f"total_variation: flow must be 4-D, got {flow.data.ndim}-D")
    n, c, h, w = flow.data.shape
    if h < 2 or w < 2:
        raise ShapeError(f"total_variation: spatial extent ({h},{w}) is degenerate, "
                         "need H >= 2 and W >= 2")
    f = flow.data
    dv = f[:, :, 1:, :] - f[:, :, :-1, :]
    dh = f[:, :, :, 1:] - f[:, :, :, :-1]
    total = dv.size + dh.size
    val = (np.abs(dv).sum() + np.abs(dh).sum()) / total

    def back(g):
        scale = g / total
        gf = np.zeros_like(f)
        sv = np.sign(dv) * scale
        sh = np.sign(dh) * scale
        gf[:, :, 1:, :] += sv
        gf[:, :, :-1, :] -= sv
        gf[:, :, :, 1:] += sh
        gf[:, :, :, :-1] -= sh
        return (gf,)

    return _make(np.asarray(val), (flow,), back)


# ---------------------------------------------------------------------------
# structural ops for the encoder/decoder stacks
# ---------------------------------------------------------------------------

def concat(parts, axis=1):
    """Concatenate along one axis; all other axes must match exactly."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    ref = list(parts[0].data.shape)
    for p in parts[1:]:
        s = list(p.data.shape)
        if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref))
                                     if i != axis):
            raise ShapeError(f"concat: shape {tuple(s)} incompatible with {tuple(ref)} "
                             f"along axis {axis}")
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back)


def slice_channels(x, start, stop):
    """Take channels [start:stop) of a (N, C, H, W) tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"slice_channels: input must be 4-D, got {x.data.ndim}-D")
    c = x.data.shape[1]
    if not (0 <= start < stop <= c):
        raise ShapeError(f"slice_channels: range [{start},{stop}) invalid for {c} channels")
    shape = x.data.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _make(x.data[:, start:stop].copy(), (x,), back)


def upsample2x(x):
    """Nearest-neighbor 2x spatial upsampling of a (N, C, H, W) tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2x: input must be 4-D, got {x.data.ndim}-D")
    n, c, h, w = x.data.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def back(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), back)


def clamp_unit(x):
    """Hard clamp to [0, 1]; straight-through gradient inside, zero outside."""
    x = _as_tensor(x)
    passthrough = (x.data >= 0.0) & (x.data <= 1.0)
    return _make(np.clip(x.data, 0.0, 1.0), (x,), lambda g: (g * passthrough,))
