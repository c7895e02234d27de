"""Task configuration: a small ``[section]`` / ``key = value`` format plus named presets.

Example::

    preset = denoising

    [task]
    input = images/
    output = out/

    [solver]
    iterations = 1500

A ``preset`` line before the first section loads a preset; later keys
override it.  Lists are comma separated.  ``#`` starts a comment.
"""

import math
from dataclasses import dataclass, field, fields

from .admm import SolverConfig
from .denoisers import DenoiserSpec
from .generator import GeneratorConfig

TASKS = ("denoise", "sisr", "deblur", "custom")
KERNELS = ("none", "uniform", "gaussian", "sisr", "file")


class ConfigError(ValueError):
    def __init__(self, message, line=None, key=None):
        where = f"line {line}: " if line is not None else ""
        what = f"{key}: " if key is not None else ""
        super().__init__(f"{where}{what}{message}")
        self.line = line
        self.key = key


@dataclass
class TaskSettings:
    """The ``[task]`` section: what to restore and where results go.

    ``noise_sigma`` is the synthetic measurement noise on the 0-255 scale;
    ``synthesize`` says whether the inputs are clean images that must be
    degraded first (the usual benchmark protocol) or real measurements.
    """

    kind: str = None
    input: str = ""
    ground_truth: str = ""
    output: str = "out"
    seed: int = 0
    noise_sigma: float = 0.0
    synthesize: bool = True
    threads: int = 1
    checkpoint_every: int = 0

    def validate(self):
        if self.kind is None:
            raise ConfigError("task kind is required (set [task] kind or a preset)", key="kind")
        if self.kind not in TASKS:
            raise ConfigError(f"must be one of {TASKS}, got {self.kind!r}", key="kind")
        if not self.noise_sigma >= 0 or not math.isfinite(self.noise_sigma):
            raise ConfigError("must be finite and >= 0", key="noise_sigma")
        if self.threads < 1:
            raise ConfigError("must be >= 1", key="threads")
        if self.checkpoint_every < 0:
            raise ConfigError("must be >= 0", key="checkpoint_every")


@dataclass
class OperatorSettings:
    kernel: str = "none"
    kernel_size: int = 9
    kernel_sigma: float = 1.6
    kernel_path: str = ""
    scale: int = 1
    boundary: str = "circular"

    def validate(self):
        if self.kernel not in KERNELS:
            raise ConfigError(f"must be one of {KERNELS}, got {self.kernel!r}", key="kernel")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("must be odd and >= 1", key="kernel_size")
        if not self.kernel_sigma > 0:
            raise ConfigError("must be positive", key="kernel_sigma")
        if self.scale < 1:
            raise ConfigError("must be >= 1", key="scale")
        if self.kernel == "file" and not self.kernel_path:
            raise ConfigError("kernel = file needs kernel_path", key="kernel_path")
        if self.boundary != "circular":
            raise ConfigError("only circular boundaries are supported", key="boundary")


@dataclass
class TaskConfig:
    task: TaskSettings = field(default_factory=TaskSettings)
    operator: OperatorSettings = field(default_factory=OperatorSettings)
    solver: SolverConfig = field(default_factory=SolverConfig)
    denoiser: DenoiserSpec = field(default_factory=DenoiserSpec)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    preset: str = ""

    def validate(self):
        self.task.validate()
        self.operator.validate()
        for part in (self.solver, self.denoiser, self.generator):
            try:
                part.validate()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.task.kind == "sisr" and self.operator.scale < 2:
            raise ConfigError("sisr needs scale >= 2", key="scale")
        return self


SECTIONS = {
    "task": TaskSettings,
    "operator": OperatorSettings,
    "solver": SolverConfig,
    "denoiser": DenoiserSpec,
    "generator": GeneratorConfig,
}

# Hyperparameter rows for the four experiment families.  SISR uses NLM at
# the listed sigma_f in place of BM3D, which is not part of this package.
PRESETS = {
    "denoising": {
        "task": {"kind": "denoise", "noise_sigma": 25.0},
        "operator": {"kernel": "none"},
        "solver": {"lam": 0.5, "mu": 0.5, "lr": 0.008, "sigma_noise": 0.033, "iterations": 6000,
                   "runs": 2, "eval_channels": "rgb"},
        "denoiser": {"kind": "nlm", "sigma_f": 3.0},
    },
    "sisr4": {
        "task": {"kind": "sisr", "noise_sigma": 0.0},
        "operator": {"kernel": "sisr", "scale": 4},
        "solver": {"lam": 0.05, "mu": 0.06, "lr": 0.001, "sigma_noise": 0.02, "iterations": 2000,
                   "eval_channels": "luminance"},
        "denoiser": {"kind": "nlm", "sigma_f": 5.0},
    },
    "sisr8": {
        "task": {"kind": "sisr", "noise_sigma": 0.0},
        "operator": {"kernel": "sisr", "scale": 8},
        "solver": {"lam": 0.05, "mu": 0.06, "lr": 0.001, "sigma_noise": 0.02, "iterations": 4000,
                   "eval_channels": "luminance"},
        "denoiser": {"kind": "nlm", "sigma_f": 5.0},
    },
    "deblur-uniform": {
        "task": {"kind": "deblur", "noise_sigma": math.sqrt(2.0)},
        "operator": {"kernel": "uniform", "kernel_size": 9},
        "solver": {"lam": 0.02, "mu": 0.04, "lr": 0.004, "sigma_noise": 0.01, "iterations": 30000,
                   "eval_channels": "luminance"},
        "denoiser": {"kind": "nlm", "sigma_f": 3.0},
    },
    "deblur-gauss": {
        "task": {"kind": "deblur", "noise_sigma": math.sqrt(2.0)},
        "operator": {"kernel": "gaussian", "kernel_size": 25, "kernel_sigma": 1.6},
        "solver": {"lam": 0.02, "mu": 0.04, "lr": 0.004, "sigma_noise": 0.01, "iterations": 30000,
                   "eval_channels": "luminance"},
        "denoiser": {"kind": "nlm", "sigma_f": 3.0},
    },
}


def _field_types(cls):
    return {f.name: f for f in fields(cls)}


def _parse_scalar(raw, kind):
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError(f"expected a finite number, got {raw!r}")
        return v
    return raw


def _convert(section, name, raw):
    kind = _field_types(SECTIONS[section])[name].type
    if section == "solver" and name == "adam_betas":
        parts = [float(p) for p in raw.split(",")]
        if len(parts) != 2:
            raise ValueError("expected two comma-separated numbers")
        return tuple(parts)
    if kind is list:
        items = [p.strip() for p in raw.split(",") if p.strip()]
        if name == "command":
            return raw.split()
        return [int(p) for p in items]
    if raw.lower() == "none" and name in ("step_size", "h"):
        return None
    return _parse_scalar(raw, kind)


def _empty_values():
    return {name: {} for name in SECTIONS}


def _build(values):
    cfg = TaskConfig()
    for name in SECTIONS:
        base = getattr(cfg, name)
        merged = {f.name: getattr(base, f.name) for f in fields(base)}
        merged.update(values[name])
        if name == "generator" and "depth" in values[name]:
            # a bare depth change resizes the default per-scale lists
            d = merged["depth"]
            for key, fill in (("channels_down", 128), ("channels_up", 128), ("channels_skip", 4)):
                if key not in values[name] and len(merged[key]) != d:
                    merged[key] = [merged[key][0] if merged[key] else fill] * d
        if name == "generator" and "channels" in values[name]:
            c = merged.pop("channels")
            for key in ("channels_down", "channels_up"):
                if key not in values[name]:
                    merged[key] = [c] * merged["depth"]
        # construct without validation; TaskConfig.validate reports errors uniformly
        obj = type(base).__new__(type(base))
        for k, v in merged.items():
            setattr(obj, k, v)
        setattr(cfg, name, obj)
    return cfg


def preset_values(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}", key="preset")
    values = _empty_values()
    for section, items in PRESETS[name].items():
        values[section].update(items)
    return values


def parse_config(text, preset=None, overrides=None):
    """Parse configuration text into a validated :class:`TaskConfig`.

    ``preset`` (e.g. from the command line) is applied before the text;
    a ``preset =`` line in the text replaces it.  ``overrides`` is a
    ``{section: {key: value}}`` mapping applied last.
    """
    values = preset_values(preset) if preset else _empty_values()
    chosen = preset or ""
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", line=lineno)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", line=lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {line!r}", line=lineno)
        key, raw = (p.strip() for p in line.split("=", 1))
        if section is None:
            if key != "preset":
                raise ConfigError("only 'preset' may appear before the first section", line=lineno, key=key)
            if values != _empty_values() and chosen == "":
                raise ConfigError("preset must come before any other setting", line=lineno, key=key)
            try:
                values = preset_values(raw)
            except ConfigError as exc:
                raise ConfigError(str(exc).split(": ", 1)[-1], line=lineno, key=key) from None
            chosen = raw
            continue
        known = _field_types(SECTIONS[section])
        extra = {"channels"} if section == "generator" else set()
        if key not in known and key not in extra:
            raise ConfigError(f"unknown key in [{section}]", line=lineno, key=key)
        try:
            values[section][key] = int(raw) if key == "channels" else _convert(section, key, raw)
        except ValueError as exc:
            raise ConfigError(str(exc), line=lineno, key=key) from None
    for section, items in (overrides or {}).items():
        values[section].update(items)
    cfg = _build(values)
    cfg.preset = chosen
    return cfg.validate()


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(v) for v in value) if value else ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(cfg):
    """Text form of ``cfg`` that :func:`parse_config` reads back to an equal config."""
    out = []
    for name in SECTIONS:
        obj = getattr(cfg, name)
        out.append(f"[{name}]")
        for f in fields(obj):
            v = getattr(obj, f.name)
            if name == "denoiser" and f.name == "command":
                out.append(f"command = {' '.join(v)}")
            else:
                out.append(f"{f.name} = {_format(v)}")
        out.append("")
    return "\n".join(out)
