"""Linear degradation operators H with exact adjoints.

Images are ``C x H x W`` arrays and every operator acts on each channel
independently.  Convolutions use circular boundaries so that the adjoint is
exact (convolution with the 180-degree rotated kernel).
"""

import numpy as np
from scipy import ndimage
from scipy.sparse.linalg import LinearOperator as _ScipyOperator
from scipy.sparse.linalg import cg


class OperatorError(ValueError):
    pass


class BlurKernel:
    """Non-negative convolution taps normalised to sum to one."""

    def __init__(self, taps):
        taps = np.array(taps, dtype=np.float64)
        if taps.ndim != 2:
            raise OperatorError(f"kernel must be 2-D, got shape {taps.shape}")
        if np.any(taps < 0) or not np.all(np.isfinite(taps)):
            raise OperatorError("kernel taps must be finite and non-negative")
        s = taps.sum()
        if s <= 0:
            raise OperatorError("kernel taps sum to zero")
        self.taps = taps / s
        self.taps.setflags(write=False)

    @property
    def shape(self):
        return self.taps.shape

    def __repr__(self):
        return f"BlurKernel(shape={self.shape})"


def make_uniform_kernel(size):
    if size < 1 or size % 2 == 0:
        raise OperatorError(f"uniform kernel size must be odd and positive, got {size}")
    return BlurKernel(np.full((size, size), 1.0 / size ** 2))


def make_gaussian_kernel(size, sigma):
    """Sampled isotropic Gaussian exp(-r^2 / (2 sigma^2)) on a size x size grid centred on the middle tap."""
    if size < 1 or size % 2 == 0:
        raise OperatorError(f"gaussian kernel size must be odd and positive, got {size}")
    if not sigma > 0:
        raise OperatorError(f"gaussian sigma must be positive, got {sigma}")
    r = np.arange(size) - size // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma ** 2))
    return BlurKernel(g)


def load_kernel(path):
    """Read a kernel from a whitespace-separated text matrix (one row per line)."""
    try:
        taps = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise OperatorError(f"{path}: cannot parse kernel: {exc}") from None
    return BlurKernel(taps)


def sisr_kernel(factor):
    """Default anti-aliasing kernel for a given scale factor: Gaussian, sigma = factor / 2, 4 * factor + 1 taps."""
    if factor == 1:
        return BlurKernel([[1.0]])
    return make_gaussian_kernel(4 * factor + 1, factor / 2.0)


class LinearOperator:
    """A linear map between array shapes given by a forward/adjoint pair."""

    def __init__(self, forward, adjoint, in_shape, out_shape, name="linear"):
        self._forward = forward
        self._adjoint = adjoint
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        self.name = name

    def forward(self, x):
        x = np.asarray(x)
        if x.shape != self.in_shape:
            raise OperatorError(f"{self.name}: input shape {x.shape} != {self.in_shape}")
        return self._forward(x)

    def adjoint(self, y):
        y = np.asarray(y)
        if y.shape != self.out_shape:
            raise OperatorError(f"{self.name}: adjoint input shape {y.shape} != {self.out_shape}")
        return self._adjoint(y)

    __call__ = forward

    @property
    def T(self):
        return LinearOperator(self._adjoint, self._forward, self.out_shape, self.in_shape, self.name + ".T")

    @property
    def is_square(self):
        return self.in_shape == self.out_shape

    def init_estimate(self, y):
        """Starting image for the solver: y for square operators, otherwise H^T y rescaled to [0, 1]."""
        if self.is_square:
            return np.asarray(y, dtype=np.float64).copy()
        v = self.adjoint(y)
        lo, hi = v.min(), v.max()
        return (v - lo) / (hi - lo) if hi > lo else np.clip(v, 0.0, 1.0)

    def solve_normal(self, rhs, mu, tol=1e-10, maxiter=500):
        """Solve (H^T H + mu I) v = rhs by conjugate gradients."""
        n = int(np.prod(self.in_shape))

        def mv(v):
            v = v.reshape(self.in_shape)
            return (self.adjoint(self.forward(v)) + mu * v).ravel()

        op = _ScipyOperator((n, n), matvec=mv, dtype=np.float64)
        sol, _ = cg(op, np.asarray(rhs, np.float64).ravel(), x0=np.asarray(rhs, np.float64).ravel() / (1.0 + mu),
                    rtol=tol, maxiter=maxiter)
        return sol.reshape(self.in_shape)

    def __repr__(self):
        return f"{self.name}({self.in_shape} -> {self.out_shape})"


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise OperatorError(f"image shape must be C x H x W with positive extents, got {shape}")
    return shape


def identity_op(shape):
    shape = _check_shape(shape)
    op = LinearOperator(lambda x: x.copy(), lambda y: y.copy(), shape, shape, "identity")
    op.solve_normal = lambda rhs, mu, **kw: np.asarray(rhs, np.float64) / (1.0 + mu)
    return op


def kernel_spectrum(kernel, height, width, wrap=False):
    """rfft2 of the kernel embedded in an image-sized array with its centre tap at the origin.

    With ``wrap`` a kernel larger than the image is folded onto the image
    torus (taps at congruent offsets add up), which is still exact circular
    convolution; otherwise an oversized kernel is an error.
    """
    kh, kw = kernel.shape
    if (kh > height or kw > width) and not wrap:
        raise OperatorError(f"kernel {kh}x{kw} larger than image {height}x{width}")
    rows = (np.arange(kh) - kh // 2) % height
    cols = (np.arange(kw) - kw // 2) % width
    emb = np.zeros((height, width))
    np.add.at(emb, (rows[:, None], cols[None, :]), kernel.taps)
    return np.fft.rfft2(emb)


def _circular(x, spec, conj=False):
    s = np.conj(spec) if conj else spec
    return np.fft.irfft2(np.fft.rfft2(x) * s, s=x.shape[-2:])


def blur_op(kernel, shape, boundary="circular", wrap=False):
    """Circular convolution with ``kernel``; the adjoint is circular correlation.

    ``wrap`` allows kernels larger than the image (see :func:`kernel_spectrum`).
    """
    if boundary != "circular":
        raise OperatorError(f"only circular boundaries are supported, got {boundary!r}")
    shape = _check_shape(shape)
    spec = kernel_spectrum(kernel, shape[1], shape[2], wrap)
    op = LinearOperator(lambda x: _circular(x, spec), lambda y: _circular(y, spec, conj=True), shape, shape, "blur")
    power = np.abs(spec) ** 2
    op.kernel = kernel
    op.solve_normal = lambda rhs, mu, **kw: np.fft.irfft2(np.fft.rfft2(rhs) / (power + mu), s=shape[1:])
    return op


def downsample_op(kernel, factor, shape, wrap=False):
    """Circular blur followed by keeping every ``factor``-th row and column (offset 0).

    ``shape`` is the high-resolution input shape; both sides must be divisible
    by ``factor``.  ``wrap`` as in :func:`blur_op`.
    """
    shape = _check_shape(shape)
    if factor < 1:
        raise OperatorError(f"factor must be >= 1, got {factor}")
    c, h, w = shape
    if h % factor or w % factor:
        raise OperatorError(f"image {h}x{w} not divisible by factor {factor}")
    spec = kernel_spectrum(kernel, h, w, wrap)
    out_shape = (c, h // factor, w // factor)

    def fwd(x):
        return np.ascontiguousarray(_circular(x, spec)[:, ::factor, ::factor])

    def adj(y):
        up = np.zeros(shape, dtype=np.result_type(y.dtype, np.float64))
        up[:, ::factor, ::factor] = y
        return _circular(up, spec, conj=True)

    op = LinearOperator(fwd, adj, shape, out_shape, f"downsample_x{factor}")
    op.kernel = kernel
    op.factor = factor
    if factor == 1:
        power = np.abs(spec) ** 2
        op.solve_normal = lambda rhs, mu, **kw: np.fft.irfft2(np.fft.rfft2(rhs) / (power + mu), s=shape[1:])

    def bicubic(y):
        y = np.asarray(y, np.float64)
        up = ndimage.zoom(y, (1, factor, factor), order=3, mode="grid-wrap", grid_mode=True)
        return np.clip(up, 0.0, 1.0)

    op.init_estimate = bicubic
    return op


class MaskPattern:
    """Boolean keep-mask over the image plane."""

    def __init__(self, keep):
        keep = np.asarray(keep, dtype=bool)
        if keep.ndim != 2:
            raise OperatorError(f"mask must be 2-D (H x W), got shape {keep.shape}")
        self.keep = keep
        self.keep.setflags(write=False)

    @property
    def count(self):
        return int(self.keep.sum())

    @classmethod
    def random(cls, height, width, keep_fraction, rng):
        return cls(rng.random((height, width)) < keep_fraction)


def mask_op(mask, channels=1):
    """Keep the pixels selected by ``mask``; output is ``channels x kept_count``."""
    h, w = mask.keep.shape
    idx = np.flatnonzero(mask.keep)
    in_shape = (channels, h, w)
    out_shape = (channels, idx.size)

    def fwd(x):
        return np.ascontiguousarray(x.reshape(channels, -1)[:, idx])

    def adj(y):
        out = np.zeros((channels, h * w), dtype=np.result_type(y.dtype, np.float64))
        out[:, idx] = y
        return out.reshape(in_shape)

    op = LinearOperator(fwd, adj, in_shape, out_shape, "mask")
    op.mask = mask
    diag = mask.keep.astype(np.float64)[None]
    op.solve_normal = lambda rhs, mu, **kw: np.asarray(rhs, np.float64) / (diag + mu)
    op.init_estimate = lambda y: adj(np.asarray(y, np.float64))
    return op
