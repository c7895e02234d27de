"""Differentiable operations used to build the generator and its losses."""

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, Tensor, as_tensor, make_node

PAD_MODES = ("reflect", "zero", "none")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and b.data.ndim != 0 and a.data.ndim != 0:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def back(g):
        return (g if a.shape == g.shape else np.asarray(g.sum(), dtype=g.dtype),
                g if b.shape == g.shape else np.asarray(g.sum(), dtype=g.dtype))

    return make_node(a.data + b.data, "add", (a, b), back)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and b.data.ndim != 0 and a.data.ndim != 0:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")

    def back(g):
        return (g if a.shape == g.shape else np.asarray(g.sum(), dtype=g.dtype),
                -g if b.shape == g.shape else np.asarray(-g.sum(), dtype=g.dtype))

    return make_node(a.data - b.data, "sub", (a, b), back)


def mul(a, b):
    """Elementwise product; ``b`` may also be a python scalar (a constant)."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return make_node(a.data * c, "scale", (a,), lambda g: (g * c,))
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return make_node(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def total(x):
    """Sum of all entries."""
    return make_node(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.full_like(x.data, g),))


def half_sq_norm(x):
    """0.5 * ||x||^2, the building block of every quadratic loss here."""
    d = x.data
    return make_node(np.asarray(0.5 * np.vdot(d, d)), "half_sq_norm", (x,), lambda g: (g * d,))


def leaky_relu(x, slope=0.2):
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return make_node(out, "leaky_relu", (x,), lambda g: (np.where(pos, g, slope * g),))


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_node(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def activation(x, kind="leaky_relu", slope=0.2):
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis))

    return make_node(out, "concat", tuple(tensors), back)


def crop(x, height, width):
    """Keep the top-left ``height x width`` window of a C x H x W tensor."""
    _, h, w = x.shape
    if height > h or width > w:
        raise ShapeError(f"crop {height}x{width} exceeds {h}x{w}")
    out = x.data[:, :height, :width]

    def back(g):
        full = np.zeros_like(x.data)
        full[:, :height, :width] = g
        return (full,)

    return make_node(out, "crop", (x,), back)


# padding helpers (array level) ------------------------------------------------

def _pad_array(a, ph, pw, mode):
    if ph == 0 and pw == 0:
        return a
    if mode == "reflect":
        if ph >= a.shape[-2] or pw >= a.shape[-1]:
            raise ShapeError(f"reflect padding ({ph}, {pw}) needs extents > padding, got {a.shape[-2:]}")
        return np.pad(a, ((0, 0), (ph, ph), (pw, pw)), mode="reflect")
    return np.pad(a, ((0, 0), (ph, ph), (pw, pw)))


def _fold_axis(g, p, axis, mode):
    """Adjoint of padding ``p`` entries on both ends of ``axis``."""
    if p == 0:
        return g
    n = g.shape[axis] - 2 * p
    g = np.moveaxis(g, axis, -1)
    res = g[..., p:p + n].copy()
    if mode == "reflect":
        res[..., 1:p + 1] += g[..., :p][..., ::-1]
        res[..., n - 1 - p:n - 1] += g[..., p + n:][..., ::-1]
    return np.moveaxis(res, -1, axis)


def _unpad_array(g, ph, pw, mode):
    return _fold_axis(_fold_axis(g, ph, 1, mode), pw, 2, mode)


def pad(x, ph, pw, mode="reflect"):
    out = _pad_array(x.data, ph, pw, mode)
    return make_node(out, "pad", (x,), lambda g: (np.ascontiguousarray(_unpad_array(g, ph, pw, mode)),))


# convolution ----------------------------------------------------------------

def conv2d(x, kernels, bias=None, stride=1, padding="reflect"):
    """Cross-correlate a C x H x W input with K x C x h x w kernels.

    ``padding`` adds ``h // 2`` rows and ``w // 2`` columns on each side
    ("reflect" or "zero"); "none" gives a valid correlation.  The output has
    ``(H_pad - h) // stride + 1`` rows (likewise for columns).
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding not in PAD_MODES:
        raise ValueError(f"padding must be one of {PAD_MODES}, got {padding!r}")
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d expects C x H x W input and K x C x h x w kernels, got {x.shape} and {kernels.shape}")
    c, h_in, w_in = x.shape
    k, kc, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernels expect {kc}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({k},)")
    ph, pw = (0, 0) if padding == "none" else (kh // 2, kw // 2)
    if kh > h_in + 2 * ph or kw > w_in + 2 * pw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h_in + 2 * ph}x{w_in + 2 * pw}")

    xp = _pad_array(x.data, ph, pw, "reflect" if padding == "reflect" else "zero")
    hp, wp = xp.shape[1:]
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, ho * wo)
    wmat = kernels.data.reshape(k, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(k, ho, wo)

    def back(g):
        g2 = g.reshape(k, -1)
        gw = (g2 @ cols.T).reshape(kernels.shape) if kernels.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gcols[:, i, j]
            gx = np.ascontiguousarray(_unpad_array(gxp, ph, pw, "reflect" if padding == "reflect" else "zero"))
        grads = (gx, gw)
        return grads + (gb,) if bias is not None else grads

    parents = (x, kernels) + ((bias,) if bias is not None else ())
    return make_node(out, "conv2d", parents, back)


# upsampling -----------------------------------------------------------------

@lru_cache(maxsize=64)
def bilinear_matrix(n, factor, dtype_name="float64"):
    """Interpolation matrix mapping n samples to factor * n samples.

    Half-pixel centres (the ``align_corners=False`` convention): output index
    ``o`` samples the input at ``(o + 0.5) / factor - 0.5``, clamped to the
    first and last input sample.
    """
    m = np.zeros((n * factor, n), dtype=dtype_name)
    for o in range(n * factor):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        t = src - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    m.setflags(write=False)
    return m


def upsample(x, factor, mode="bilinear"):
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return make_node(x.data.copy(), "upsample", (x,), lambda g: (g,))
    c, h, w = x.shape
    if mode == "nearest":
        out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)
        return make_node(out, "upsample", (x,),
                         lambda g: (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),))
    if mode != "bilinear":
        raise ValueError(f"unknown upsample mode {mode!r}")
    ah = bilinear_matrix(h, factor, x.dtype.name)
    aw = bilinear_matrix(w, factor, x.dtype.name)
    out = ah @ (x.data @ aw.T)

    def back(g):
        return (np.ascontiguousarray((ah.T @ g) @ aw),)

    return make_node(out, "upsample", (x,), back)


# normalisation ----------------------------------------------------------------

def normalize_channels(x, scale, shift, eps=1e-5):
    """Standardise each channel over its spatial extent, then apply ``scale * . + shift``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[0]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"normalize_channels: scale/shift must have shape ({c},)")
    flat = x.data.reshape(c, -1)
    n = flat.shape[1]
    mean = flat.mean(axis=1, keepdims=True)
    cen = flat - mean
    var = (cen * cen).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = cen * rstd
    out = (scale.data[:, None] * xhat + shift.data[:, None]).reshape(x.shape)

    def back(g):
        g2 = g.reshape(c, -1)
        gscale = (g2 * xhat).sum(axis=1)
        gshift = g2.sum(axis=1)
        dxhat = g2 * scale.data[:, None]
        gx = rstd / n * (n * dxhat - dxhat.sum(axis=1, keepdims=True)
                         - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return gx.reshape(x.shape), gscale, gshift

    return make_node(out, "normalize_channels", (x, scale, shift), back)


# linear operators -------------------------------------------------------------

def apply_linear(x, operator):
    """Apply a linear operator with ``forward``/``adjoint`` methods; the gradient uses the adjoint."""
    out = operator.forward(x.data)
    return make_node(out, "linear", (x,), lambda g: (np.asarray(operator.adjoint(g), dtype=x.dtype),))
