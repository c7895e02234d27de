"""Encoder-decoder image generator with skip connections, fed by a fixed random code.

The topology follows the usual deep-image-prior "skip" hourglass.  At every
scale ``i`` the input feeds two branches:

* skip:  conv(k_skip) -> norm -> act                      (``skip[i]`` channels)
* deep:  conv(k_down, stride 2) -> norm -> act
         conv(k_down) -> norm -> act -> [scale i + 1] -> upsample x2

The branches are concatenated, normalised, then passed through
conv(k_up) -> norm -> act -> conv(1x1) -> norm -> act.  A final 1x1 conv and a
sigmoid map the top scale to the output image.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as tn
from .checkpoint import load_tensors, save_tensors

SEED_CHANNELS = 32
SEED_HIGH = 0.1


@dataclass
class GeneratorConfig:
    depth: int = 5
    channels_down: list = field(default_factory=lambda: [128] * 5)
    channels_up: list = field(default_factory=lambda: [128] * 5)
    channels_skip: list = field(default_factory=lambda: [4] * 5)
    kernel_down: int = 3
    kernel_up: int = 3
    kernel_skip: int = 1
    upsample_mode: str = "bilinear"
    out_channels: int = 3
    input_channels: int = SEED_CHANNELS
    padding: str = "reflect"
    slope: float = 0.2
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        for name in ("channels_down", "channels_up", "channels_skip"):
            values = getattr(self, name)
            if len(values) != self.depth:
                raise ValueError(f"{name} has {len(values)} entries, expected depth={self.depth}")
            if any(v < (0 if name == "channels_skip" else 1) for v in values):
                raise ValueError(f"{name} entries out of range: {values}")
        for name in ("kernel_down", "kernel_up", "kernel_skip"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 1, got {k}")
        if self.upsample_mode not in ("bilinear", "nearest"):
            raise ValueError(f"upsample_mode must be bilinear or nearest, got {self.upsample_mode!r}")
        if self.out_channels not in (1, 3):
            raise ValueError(f"out_channels must be 1 or 3, got {self.out_channels}")
        if self.padding not in ("reflect", "zero"):
            raise ValueError(f"padding must be reflect or zero, got {self.padding!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def uniform(cls, depth, channels, skip=4, **kw):
        """Same channel count at every scale."""
        return cls(depth=depth, channels_down=[channels] * depth, channels_up=[channels] * depth,
                   channels_skip=[skip] * depth, **kw)

    def padded_size(self, height, width):
        m = 2 ** self.depth
        return -(-height // m) * m, -(-width // m) * m

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class SeedInput:
    z: np.ndarray
    rng_seed: int
    sigma_noise: float = 0.0


def init_seed(width, height, rng_seed, sigma_noise=0.0, channels=SEED_CHANNELS, dtype="float64"):
    """Draw the fixed network input: ``channels x height x width`` i.i.d. U[0, 0.1]."""
    if width < 1 or height < 1:
        raise ValueError(f"seed dimensions must be >= 1, got {width}x{height}")
    if sigma_noise < 0:
        raise ValueError("sigma_noise must be non-negative")
    rng = np.random.default_rng(rng_seed)
    z = rng.uniform(0.0, SEED_HIGH, size=(channels, height, width)).astype(dtype)
    z.setflags(write=False)
    return SeedInput(z=z, rng_seed=rng_seed, sigma_noise=float(sigma_noise))


def perturb_seed(seed, rng):
    """Return ``z + n`` with ``n ~ N(0, sigma_noise^2)`` i.i.d.; ``seed.z`` is left untouched."""
    if seed.sigma_noise < 0:
        raise ValueError("sigma_noise must be non-negative")
    if seed.sigma_noise == 0:
        return seed.z.copy()
    return seed.z + rng.normal(0.0, seed.sigma_noise, size=seed.z.shape).astype(seed.z.dtype)


# parameters -----------------------------------------------------------------

def _conv_shapes(config):
    """Yield (prefix, in_channels, out_channels, kernel) for every conv, outer scale first."""
    c_in = config.input_channels
    specs = []
    for i in range(config.depth):
        skip = config.channels_skip[i]
        down = config.channels_down[i]
        if skip:
            specs.append((f"s{i}.skip", c_in, skip, config.kernel_skip))
        specs.append((f"s{i}.down1", c_in, down, config.kernel_down))
        specs.append((f"s{i}.down2", down, down, config.kernel_down))
        c_in = down
    for i in reversed(range(config.depth)):
        deeper = config.channels_up[i + 1] if i + 1 < config.depth else config.channels_down[i]
        merged = config.channels_skip[i] + deeper
        specs.append((f"s{i}.merge_norm", merged, None, None))
        specs.append((f"s{i}.up1", merged, config.channels_up[i], config.kernel_up))
        specs.append((f"s{i}.up2", config.channels_up[i], config.channels_up[i], 1))
    specs.append(("out", config.channels_up[0], config.out_channels, 1))
    return specs


def init_params(config, rng_seed):
    """Centred uniform fan-in initialisation: weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Normalisation layers start at scale 1, shift 0.  Returns an ordered dict of
    named leaf tensors that require grad.
    """
    rng = np.random.default_rng(rng_seed)
    dtype = config.dtype
    params = {}
    for prefix, c_in, c_out, k in _conv_shapes(config):
        if c_out is None:
            params[f"{prefix}.scale"] = np.ones(c_in, dtype)
            params[f"{prefix}.shift"] = np.zeros(c_in, dtype)
            continue
        bound = 1.0 / np.sqrt(c_in * k * k)
        params[f"{prefix}.w"] = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype)
        params[f"{prefix}.b"] = rng.uniform(-bound, bound, size=c_out).astype(dtype)
        if prefix != "out":
            params[f"{prefix}.scale"] = np.ones(c_out, dtype)
            params[f"{prefix}.shift"] = np.zeros(c_out, dtype)
    return {name: tn.Tensor(value, requires_grad=True, name=name) for name, value in params.items()}


# forward ----------------------------------------------------------------------

def _conv_block(params, prefix, x, config, stride=1, act=True):
    y = tn.conv2d(x, params[f"{prefix}.w"], params[f"{prefix}.b"], stride=stride, padding=config.padding)
    y = tn.normalize_channels(y, params[f"{prefix}.scale"], params[f"{prefix}.shift"])
    return tn.leaky_relu(y, config.slope) if act else y


def _scale(params, i, x, config):
    skip = _conv_block(params, f"s{i}.skip", x, config) if config.channels_skip[i] else None
    deep = _conv_block(params, f"s{i}.down1", x, config, stride=2)
    deep = _conv_block(params, f"s{i}.down2", deep, config)
    if i + 1 < config.depth:
        deep = _scale(params, i + 1, deep, config)
    deep = tn.upsample(deep, 2, config.upsample_mode)
    merged = tn.concat([skip, deep]) if skip is not None else deep
    merged = tn.normalize_channels(merged, params[f"s{i}.merge_norm.scale"], params[f"s{i}.merge_norm.shift"])
    out = _conv_block(params, f"s{i}.up1", merged, config)
    return _conv_block(params, f"s{i}.up2", out, config)


def pad_seed(z, config):
    """Reflect-pad a seed on the bottom/right so both sides are multiples of 2**depth."""
    _, h, w = z.shape
    hp, wp = config.padded_size(h, w)
    if (hp, wp) == (h, w):
        return z
    return np.pad(z, ((0, 0), (0, hp - h), (0, wp - w)), mode="reflect")


def forward(params, z, config):
    """Synthesize an image in [0, 1] from the (possibly perturbed) seed ``z``.

    ``z`` has shape ``input_channels x H x W``; the output is
    ``out_channels x H x W``.
    """
    z = np.asarray(getattr(z, "data", z))
    if z.ndim != 3 or z.shape[0] != config.input_channels:
        raise tn.ShapeError(f"seed must be {config.input_channels} x H x W, got {z.shape}")
    _, h, w = z.shape
    zp = pad_seed(z, config)
    if min(zp.shape[1:]) // 2 ** config.depth < 2:
        raise tn.ShapeError(f"image {h}x{w} is too small for depth {config.depth}")
    x = tn.Tensor(zp, dtype=config.dtype)
    feat = _scale(params, 0, x, config)
    out = tn.conv2d(feat, params["out.w"], params["out.b"], padding=config.padding)
    out = tn.sigmoid(out)
    if out.shape[1:] != (h, w):
        out = tn.crop(out, h, w)
    return out


class Generator:
    """A generator network: configuration, parameters and the fixed seed."""

    def __init__(self, config, height, width, rng_seed=0, sigma_noise=0.0):
        config.validate()
        self.config = config
        self.height, self.width = height, width
        self.seed = init_seed(width, height, rng_seed, sigma_noise, config.input_channels, config.dtype)
        self.params = init_params(config, rng_seed + 1)

    @property
    def param_list(self):
        return list(self.params.values())

    def forward(self, z=None):
        return forward(self.params, self.seed.z if z is None else z, self.config)

    def output(self):
        """Network image for the unperturbed seed, as a plain array (no tape)."""
        return self.forward().data

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def save(self, path):
        save_tensors(path, self.params)

    def load(self, path):
        loaded = load_tensors(path)
        if list(loaded) != list(self.params):
            raise ValueError("checkpoint parameter names do not match this architecture")
        for name, arr in loaded.items():
            if arr.shape != self.params[name].shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != {self.params[name].shape}")
            self.params[name].data[...] = arr
