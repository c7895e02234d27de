"""Plug-in denoisers f(x) used by the RED prior.

Every denoiser maps a C x H x W image on [0, 1] to an image of the same
shape, clamped to [0, 1], and is a deterministic function of its input.
"""

import subprocess
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imaging import decode_pfm, encode_pfm

KINDS = ("nlm", "gaussian", "median", "box", "external")

# h = NLM_H_FACTOR * sigma_f on the [0, 1] scale when no explicit h is given.
NLM_H_FACTOR = 0.8


class DenoiserError(RuntimeError):
    pass


@dataclass
class DenoiserSpec:
    """Denoiser selection.

    ``sigma_f`` is the noise level handed to the denoiser on the 0-255 scale.
    ``width`` is the Gaussian std in pixels (gaussian) or the window side
    (box, median).  ``command`` and ``timeout`` configure the external bridge.
    """

    kind: str = "nlm"
    sigma_f: float = 3.0
    patch: int = 7
    window: int = 21
    h: float = None
    width: float = 1.0
    command: list = field(default_factory=list)
    timeout: float = 60.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown denoiser kind {self.kind!r}; expected one of {KINDS}")
        if self.sigma_f < 0:
            raise ValueError(f"sigma_f must be >= 0, got {self.sigma_f}")
        for name in ("patch", "window"):
            v = getattr(self, name)
            if v < 1 or v % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 1, got {v}")
        if self.width < 0:
            raise ValueError(f"width must be >= 0, got {self.width}")
        if self.kind in ("box", "median") and (int(self.width) != self.width or int(self.width) % 2 == 0):
            raise ValueError(f"{self.kind} window must be an odd integer, got {self.width}")
        if self.kind == "external" and not self.command:
            raise ValueError("external denoiser needs a command")

    @property
    def nlm_h(self):
        return self.h if self.h is not None else NLM_H_FACTOR * self.sigma_f / 255.0


def _box_sum(a, size):
    """Sum over every ``size x size`` window of the last two axes (valid region)."""
    c = np.cumsum(np.cumsum(a, axis=-2), axis=-1)
    c = np.pad(c, [(0, 0)] * (a.ndim - 2) + [(1, 0), (1, 0)])
    return c[..., size:, size:] - c[..., :-size, size:] - c[..., size:, :-size] + c[..., :-size, :-size]


def nlm_denoise(x, patch=7, window=21, h=0.01, sigma=0.0):
    """Non-local means over a square search window.

    Each pixel becomes the weighted mean of the pixels in its ``window``
    neighbourhood with weights ``exp(-max(d2 - 2 sigma^2, 0) / h^2)``, where
    ``d2`` is the mean squared difference between the two ``patch x patch``
    patches, taken jointly over channels.  Borders use reflect padding.  The
    cost is one box filter per search offset.
    """
    if patch % 2 == 0 or window % 2 == 0 or patch < 1 or window < 1:
        raise ValueError("patch and window must be odd and positive")
    if window < patch:
        raise ValueError(f"search window {window} is smaller than patch {patch}")
    if not h > 0:
        raise ValueError(f"filtering strength h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    c, hgt, wid = x.shape
    pr, wr = patch // 2, window // 2
    xp = np.pad(x, ((0, 0), (pr + wr, pr + wr), (pr + wr, pr + wr)), mode="reflect")
    ref = xp[:, wr:wr + hgt + 2 * pr, wr:wr + wid + 2 * pr]
    norm = 1.0 / (c * patch * patch)
    inv_h2 = 1.0 / (h * h)
    offset = 2.0 * sigma * sigma
    acc = np.zeros_like(x)
    wsum = np.zeros((hgt, wid))
    for dy in range(window):
        for dx in range(window):
            shifted = xp[:, dy:dy + hgt + 2 * pr, dx:dx + wid + 2 * pr]
            diff = ref - shifted
            d2 = _box_sum((diff * diff).sum(axis=0), patch) * norm
            wgt = np.exp(-np.maximum(d2 - offset, 0.0) * inv_h2)
            acc += wgt * shifted[:, pr:pr + hgt, pr:pr + wid]
            wsum += wgt
    return acc / wsum


def _external(x, spec):
    try:
        proc = subprocess.run(spec.command, input=encode_pfm(x), capture_output=True, timeout=spec.timeout)
    except subprocess.TimeoutExpired:
        raise DenoiserError(f"external denoiser timed out after {spec.timeout} s") from None
    except OSError as exc:
        raise DenoiserError(f"cannot start external denoiser: {exc}") from None
    if proc.returncode != 0:
        raise DenoiserError(f"external denoiser exited with status {proc.returncode}: "
                            f"{proc.stderr.decode(errors='replace').strip()[:200]}")
    try:
        out = decode_pfm(proc.stdout)
    except ValueError as exc:
        raise DenoiserError(f"external denoiser returned an unreadable image: {exc}") from None
    if out.shape != x.shape:
        raise DenoiserError(f"external denoiser returned shape {out.shape}, expected {x.shape}")
    return out


def denoise(x, spec):
    """Apply the denoiser described by ``spec``; output has the input's shape, clamped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DenoiserError("denoiser input contains non-finite values")
    if spec.kind == "nlm":
        out = nlm_denoise(x, spec.patch, spec.window, spec.nlm_h, spec.sigma_f / 255.0)
    elif spec.kind == "gaussian":
        out = x.copy() if spec.width == 0 else ndimage.gaussian_filter(x, (0, spec.width, spec.width), mode="reflect")
    elif spec.kind == "box":
        w = int(spec.width)
        out = ndimage.uniform_filter(x, (1, w, w), mode="reflect")
    elif spec.kind == "median":
        w = int(spec.width)
        out = ndimage.median_filter(x, (1, w, w), mode="reflect")
    elif spec.kind == "external":
        out = _external(x, spec)
    else:
        raise ValueError(f"unknown denoiser kind {spec.kind!r}")
    return np.clip(out, 0.0, 1.0)


def residual(x, spec):
    """x - f(x): the gradient of the RED prior under its usual assumptions."""
    x = np.asarray(x, dtype=np.float64)
    return x - denoise(x, spec)


class Denoiser:
    """Callable wrapper around a :class:`DenoiserSpec` that counts invocations."""

    def __init__(self, spec):
        self.spec = spec
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        return denoise(x, self.spec)

    def __repr__(self):
        return f"Denoiser({self.spec.kind}, sigma_f={self.spec.sigma_f})"


def as_denoiser(obj):
    if isinstance(obj, DenoiserSpec):
        return Denoiser(obj)
    if callable(obj):
        return obj
    raise TypeError(f"expected a DenoiserSpec or a callable, got {type(obj).__name__}")
