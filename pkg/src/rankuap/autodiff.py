"""Minimal reverse-mode autodiff kernel over dense float64 arrays.

Every operation the embedding model and the attack losses need is provided
here: convolution, pooling heads (MAC / GeM), bilinear resizing, descriptor
normalization, Euclidean distance, and the elementwise plumbing around them.
The graph is recorded through parent links on each `Tensor`; `backward`
replays it in reverse topological order and accumulates gradients into every
tensor flagged `requires_grad`.

All computation is in 64-bit floats so finite-difference checks have
headroom. Forward passes are deterministic.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "Tensor",
    "constant",
    "backward",
    "add",
    "sub",
    "scale",
    "tsum",
    "reshape",
    "relu",
    "clamp",
    "index",
    "stack1d",
    "matvec",
    "dot_const",
    "fully_connected",
    "conv2d",
    "mac_pool",
    "gem_pool",
    "l2_normalize",
    "bilinear_resize",
    "euclidean_distance",
    "softmax_cross_entropy",
]


class Tensor:
    """A dense float64 array with an optional gradient buffer.

    Tensors are immutable once created (the attack/training loops mutate only
    leaf `.data` between graph constructions). `grad` is lazily allocated
    during backward and accumulates across repeated backward calls until
    `zero_grad` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        # Constants need no history; dropping it keeps graphs small.
        if self.requires_grad:
            self._parents = tuple(parents)
            self._backward_fn = backward_fn
        else:
            self._parents = ()
            self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(()))

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data):
    return Tensor(data, requires_grad=False)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss):
    """Backpropagate from a scalar loss through the recorded graph."""
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
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
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# Elementwise / structural plumbing
# ---------------------------------------------------------------------------


def add(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return Tensor(a.data + b.data, parents=(a, b), backward_fn=bw)


def sub(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shape mismatch {a.data.shape} vs {b.data.shape}")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return Tensor(a.data - b.data, parents=(a, b), backward_fn=bw)


def scale(a, s):
    s = float(s)

    def bw(g):
        _accumulate(a, s * g)

    return Tensor(a.data * s, parents=(a,), backward_fn=bw)


def tsum(a):
    def bw(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return Tensor(a.data.sum(), parents=(a,), backward_fn=bw)


def reshape(a, shape):
    def bw(g):
        _accumulate(a, g.reshape(a.data.shape))

    return Tensor(a.data.reshape(shape), parents=(a,), backward_fn=bw)


def relu(a):
    mask = a.data > 0

    def bw(g):
        _accumulate(a, g * mask)

    return Tensor(np.where(mask, a.data, 0.0), parents=(a,), backward_fn=bw)


def clamp(a, lo, hi):
    """Clamp to [lo, hi]; subgradient is pass-through inside the range, zero outside."""
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accumulate(a, g * mask)

    return Tensor(np.clip(a.data, lo, hi), parents=(a,), backward_fn=bw)


def index(a, i):
    """Pick a single scalar entry from a 1-D tensor."""
    if a.data.ndim != 1:
        raise ShapeError("index expects a 1-D tensor")
    i = int(i)

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[i] = float(g)
        _accumulate(a, buf)

    return Tensor(a.data[i], parents=(a,), backward_fn=bw)


def stack1d(tensors):
    """Stack scalar tensors into a 1-D vector."""
    tensors = tuple(tensors)
    for t in tensors:
        if t.data.size != 1:
            raise ShapeError("stack1d expects scalar tensors")

    def bw(g):
        for t, gi in zip(tensors, g):
            _accumulate(t, np.full_like(t.data, gi))

    return Tensor(np.array([t.item() for t in tensors]), parents=tensors, backward_fn=bw)


def matvec(mat, v):
    """Multiply a constant matrix by a 1-D tensor."""
    mat = np.asarray(mat, dtype=np.float64)
    if v.data.ndim != 1 or mat.shape[1] != v.data.shape[0]:
        raise ShapeError(f"matvec: {mat.shape} @ {v.data.shape}")

    def bw(g):
        _accumulate(v, mat.T @ g)

    return Tensor(mat @ v.data, parents=(v,), backward_fn=bw)


def dot_const(v, weights):
    """Dot product of a 1-D tensor with a constant weight vector."""
    weights = np.asarray(weights, dtype=np.float64)
    if v.data.shape != weights.shape:
        raise ShapeError(f"dot_const: shape mismatch {v.data.shape} vs {weights.shape}")

    def bw(g):
        _accumulate(v, weights * float(g))

    return Tensor(float(v.data @ weights), parents=(v,), backward_fn=bw)


def fully_connected(x, w, b):
    """y = W @ x + b for a 1-D input."""
    if x.data.ndim != 1 or w.data.ndim != 2 or w.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"fully_connected: W {w.data.shape} @ x {x.data.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise ShapeError(f"fully_connected: bias shape {b.data.shape}")

    def bw(g):
        _accumulate(x, w.data.T @ g)
        _accumulate(w, np.outer(g, x.data))
        _accumulate(b, g)

    return Tensor(w.data @ x.data + b.data, parents=(x, w, b), backward_fn=bw)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, w, stride=1, padding=0, bias=None):
    """Cross-correlation of NCHW input with KCkhkw kernels."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    n, c, h, ww = x.data.shape
    k, ck, kh, kw = w.data.shape
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ck}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > ww + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{ww + 2 * padding}"
        )
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(ww, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride),
        writeable=False,
    )
    cols2 = cols.reshape(n, c * kh * kw, oh * ow)
    w2 = w.data.reshape(k, c * kh * kw)
    out = np.einsum("kp,npq->nkq", w2, cols2).reshape(n, k, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(1, k, 1, 1)

    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        g2 = g.reshape(n, k, oh * ow)
        _accumulate(w, np.einsum("nkq,npq->kp", g2, cols2).reshape(w.data.shape))
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.einsum("kp,nkq->npq", w2, g2).reshape(n, c, kh, kw, oh, ow)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += dcols[
                        :, :, i, j
                    ]
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            _accumulate(x, dxp)

    return Tensor(out, parents=parents, backward_fn=bw)


# ---------------------------------------------------------------------------
# Pooling heads
# ---------------------------------------------------------------------------


def mac_pool(x):
    """Per-channel spatial maximum; gradient goes to the first maximal position."""
    if x.data.ndim != 4:
        raise ShapeError("mac_pool expects NCHW input")
    n, c, h, w = x.data.shape
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=2)  # first occurrence on ties (row-major)
    out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]

    def bw(g):
        buf = np.zeros_like(flat)
        np.put_along_axis(buf, arg[:, :, None], g[:, :, None], axis=2)
        _accumulate(x, buf.reshape(x.data.shape))

    return Tensor(out, parents=(x,), backward_fn=bw)


def gem_pool(x, p):
    """Generalized-mean pooling over non-negative activations."""
    if x.data.ndim != 4:
        raise ShapeError("gem_pool expects NCHW input")
    p = float(p)
    if p < 1.0:
        raise DomainError(f"gem_pool: p must be >= 1, got {p}")
    if np.any(x.data < 0):
        raise DomainError("gem_pool: negative activation entry")
    n, c, h, w = x.data.shape
    m = np.mean(x.data**p, axis=(2, 3))
    out = m ** (1.0 / p)

    def bw(g):
        # d out / d x = x^(p-1) * m^(1/p - 1) / (H*W); zero map -> zero grad
        safe = np.where(m > 0, m, 1.0)
        coeff = np.where(m > 0, safe ** (1.0 / p - 1.0), 0.0) / (h * w)
        _accumulate(x, (g * coeff)[:, :, None, None] * x.data ** (p - 1.0))

    return Tensor(out, parents=(x,), backward_fn=bw)


# ---------------------------------------------------------------------------
# Geometry and distances
# ---------------------------------------------------------------------------


def l2_normalize(v):
    if v.data.ndim != 1:
        raise ShapeError("l2_normalize expects a 1-D tensor")
    norm = float(np.linalg.norm(v.data))
    if norm == 0.0:
        raise DomainError("l2_normalize: zero vector")
    y = v.data / norm

    def bw(g):
        _accumulate(v, (g - y * float(y @ g)) / norm)

    return Tensor(y, parents=(v,), backward_fn=bw)


def _resize_grid(src, dst):
    """Align-corners sample positions; exact integers when src == dst."""
    pos = np.linspace(0.0, src - 1.0, dst)
    lo = np.floor(pos).astype(np.intp)
    lo = np.minimum(lo, src - 1)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_resize(x, out_h, out_w):
    """Align-corners bilinear interpolation of an NCHW tensor."""
    if x.data.ndim != 4:
        raise ShapeError("bilinear_resize expects NCHW input")
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: non-positive target size {out_h}x{out_w}")
    n, c, h, w = x.data.shape
    y0, y1, fy = _resize_grid(h, out_h)
    x0, x1, fx = _resize_grid(w, out_w)
    wy0, wy1 = (1.0 - fy)[:, None], fy[:, None]
    wx0, wx1 = (1.0 - fx)[None, :], fx[None, :]

    # Lerp form keeps constant images bit-exact under resampling.
    d = x.data
    c00 = d[:, :, y0[:, None], x0[None, :]]
    c01 = d[:, :, y0[:, None], x1[None, :]]
    c10 = d[:, :, y1[:, None], x0[None, :]]
    c11 = d[:, :, y1[:, None], x1[None, :]]
    top = c00 + fx[None, :] * (c01 - c00)
    bot = c10 + fx[None, :] * (c11 - c10)
    out = top + fy[:, None] * (bot - top)

    def bw(g):
        buf = np.zeros_like(x.data)
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        for ys, wys in ((y0, wy0), (y1, wy1)):
            for xs, wxs in ((x0, wx0), (x1, wx1)):
                np.add.at(
                    buf,
                    (ni, ci, ys[None, None, :, None], xs[None, None, None, :]),
                    g * (wys * wxs),
                )
        _accumulate(x, buf)

    return Tensor(out, parents=(x,), backward_fn=bw)


def euclidean_distance(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"euclidean_distance: shape mismatch {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    d = float(np.linalg.norm(diff))

    def bw(g):
        if d > 0:
            _accumulate(a, float(g) * diff / d)
            _accumulate(b, -float(g) * diff / d)

    return Tensor(d, parents=(a, b), backward_fn=bw)


def softmax_cross_entropy(logits, target):
    """Cross-entropy of softmax(logits) against an integer target."""
    if logits.data.ndim != 1:
        raise ShapeError("softmax_cross_entropy expects 1-D logits")
    target = int(target)
    z = logits.data
    zmax = z.max()
    lse = zmax + np.log(np.exp(z - zmax).sum())
    loss = lse - z[target]

    def bw(g):
        p = np.exp(z - lse)
        p[target] -= 1.0
        _accumulate(logits, float(g) * p)

    return Tensor(loss, parents=(logits,), backward_fn=bw)
