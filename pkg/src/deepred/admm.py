"""ADMM solver coupling a generator network prior with a denoiser-based regulariser.

The problem solved is

    min_{x, theta}  1/2 ||H T(z) - y||^2 + lam/2 x^T (x - f(x))   s.t.  x = T(z)

through the scaled augmented Lagrangian

    L = 1/2 ||H T - y||^2 + lam/2 x^T (x - f(x)) + mu/2 ||x - T - u||^2

updating theta (Adam on the network loss), x (fixed point or steepest
descent, never differentiating f) and the dual u in turn.

One *iteration* is one optimiser step on theta.  One *round* is
``denoiser_period`` iterations followed by a single x- and u-update, so the
denoiser runs once per round.  The denoiser evaluation of a round only reads
the round-start x, which lets it run on a worker thread while theta is being
trained; the result is identical to running it inline.
"""

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .checkpoint import load_tensors, save_tensors
from .denoisers import as_denoiser
from .generator import Generator, perturb_seed
from .imaging import psnr

X_UPDATES = ("fixed_point", "steepest_descent")
TRACE_COLUMNS = ("iteration", "data_term", "red_term", "gap_term", "total", "constraint_gap", "psnr", "seconds")


class DivergenceError(RuntimeError):
    """Raised on a non-finite loss; ``trace`` holds the records written so far."""

    def __init__(self, message, trace=None, iteration=None):
        super().__init__(message)
        self.trace = list(trace or [])
        self.iteration = iteration


class StallError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    lam: float = 0.5
    mu: float = 0.5
    iterations: int = 6000
    denoiser_period: int = 10
    inner_iterations: int = 1
    lr: float = 0.008
    sigma_noise: float = 0.033
    x_update: str = "fixed_point"
    step_size: float = None
    smoothing: float = 0.99
    smoothing_start: float = 0.8
    runs: int = 1
    early_stop_patience: int = 0
    early_stop_tol: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    parallel: bool = True
    seed: int = 0
    eval_channels: str = "rgb"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.lam < 0 or self.mu < 0:
            raise ValueError(f"lam and mu must be non-negative, got {self.lam}, {self.mu}")
        if self.lam > 0 and self.mu == 0:
            raise ValueError("the RED term (lam > 0) needs a positive ADMM penalty mu")
        if self.x_update not in X_UPDATES:
            raise ValueError(f"x_update must be one of {X_UPDATES}, got {self.x_update!r}")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.iterations < 1 or self.denoiser_period < 1 or self.inner_iterations < 1:
            raise ValueError("iterations, denoiser_period and inner_iterations must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.sigma_noise < 0:
            raise ValueError("sigma_noise must be non-negative")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("smoothing factor must lie in [0, 1)")
        if not 0.0 <= self.smoothing_start <= 1.0:
            raise ValueError("smoothing_start is a budget fraction in [0, 1]")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")
        if self.eval_channels not in ("rgb", "luminance"):
            raise ValueError("eval_channels must be rgb or luminance")

    @property
    def dip_only(self):
        """lam = mu = 0: x and u play no role and the method reduces to the plain network fit."""
        return self.lam == 0 and self.mu == 0

    @property
    def rounds(self):
        return -(-self.iterations // self.denoiser_period)


@dataclass
class TraceRecord:
    """Diagnostics of one round.

    The objective terms are evaluated right after the network update, at
    (theta_{k+1}, x_k, u_k) with the unperturbed seed, which is the point where
    f(x_k) is already available.  ``constraint_gap`` is ||x_{k+1} - T_{k+1}||
    after the x-update.  ``psnr`` compares the network output with the ground
    truth (NaN without one).
    """

    iteration: int
    data_term: float
    red_term: float
    gap_term: float
    total: float
    constraint_gap: float
    psnr: float = math.nan
    seconds: float = 0.0


@dataclass
class AdmmState:
    x: np.ndarray
    u: np.ndarray
    k: int = 0
    iteration: int = 0
    smoothed: np.ndarray = None
    trace: list = field(default_factory=list)


# individual updates --------------------------------------------------------------

def theta_loss(generator, z, y, operator, x, u, mu):
    """1/2 ||H T(z) - y||^2 + mu/2 ||x - T(z) - u||^2 as a tape node; also returns T(z)."""
    out = generator.forward(z)
    fit = tn.sub(tn.apply_linear(out, operator), tn.Tensor(y, dtype=out.dtype))
    loss = tn.half_sq_norm(fit)
    if mu:
        prox = tn.sub(tn.Tensor(x - u, dtype=out.dtype), out)
        loss = tn.add(loss, tn.mul(tn.half_sq_norm(prox), mu))
    return loss, out


def theta_step(generator, optimizer, y, operator, x, u, mu, seeds):
    """One optimiser step per seed in ``seeds`` on the network loss.

    Returns the list of (loss value, network output) pairs, outputs taken
    before each step.
    """
    out = []
    for z in seeds:
        with tn.recording():
            loss, image = theta_loss(generator, z, y, operator, x, u, mu)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"network loss became {value}", iteration=optimizer.step_count)
            grads = tn.grad(loss, generator.param_list)
        optimizer.step(grads)
        out.append((value, image.data))
    return out


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"{what} contains non-finite values")
    return x


def x_step_fixed_point(x, T, u, denoiser, lam, mu, J=1, fx=None):
    """J sweeps of x <- (lam f(x) + mu (T + u)) / (lam + mu).

    ``fx`` may carry f(x) for the first sweep when it was computed elsewhere.
    """
    if not lam + mu > 0:
        raise ValueError("lam + mu must be positive")
    if J < 1:
        raise ValueError("J must be >= 1")
    target = T + u
    for j in range(J):
        if lam == 0:
            x = target.copy()
            break
        f = fx if (j == 0 and fx is not None) else denoiser(x)
        x = (lam * f + mu * target) / (lam + mu)
    return _check_finite(x, "x-update")


def _frozen_surrogate(x, f, target, lam, mu):
    # Quadratic whose gradient at any point is lam (x - f) + mu (x - target) with f held fixed.
    return 0.5 * lam * float(np.vdot(x - f, x - f)) + 0.5 * mu * float(np.vdot(x - target, x - target))


def x_step_sd(x, T, u, denoiser, lam, mu, c=None, J=1, fx=None, min_step=1e-12):
    """J steepest-descent steps x <- x - c [lam (x - f(x)) + mu (x - T - u)].

    ``c`` defaults to 1 / (lam + mu) and is halved whenever a step would
    increase the frozen-f quadratic surrogate; a step shrinking below
    ``min_step * c`` raises :class:`StallError`.
    """
    if c is None:
        c = 1.0 / (lam + mu)
    if not c > 0:
        raise ValueError("step size c must be positive")
    target = T + u
    c0 = c
    for j in range(J):
        f = fx if (j == 0 and fx is not None) else (denoiser(x) if lam else x)
        g = lam * (x - f) + mu * (x - target)
        if not np.any(g):
            continue
        base = _frozen_surrogate(x, f, target, lam, mu)
        while True:
            cand = x - c * g
            if _frozen_surrogate(cand, f, target, lam, mu) <= base:
                break
            c *= 0.5
            if c < min_step * c0:
                raise StallError(f"x-update step size underflow (c = {c:.3e})")
        x = cand
    return _check_finite(x, "x-update")


def u_step(u, x, T):
    """Scaled dual ascent: u - x + T."""
    return u - x + T


def objective(T, x, u, fx, y, operator, lam, mu):
    """Terms of the scaled augmented Lagrangian; ``fx`` is f(x).  Returns (total, data, red, gap)."""
    r = operator.forward(T) - y
    data = 0.5 * float(np.vdot(r, r))
    red = 0.5 * lam * float(np.vdot(x, x - fx)) if lam else 0.0
    d = x - T - u
    gap = 0.5 * mu * float(np.vdot(d, d))
    return data + red + gap, data, red, gap


def smooth_output(accumulator, current, gamma):
    """Exponential moving average; the first value initialises the accumulator."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if accumulator is None:
        return np.array(current, dtype=np.float64, copy=True)
    return gamma * accumulator + (1.0 - gamma) * current


# solver -----------------------------------------------------------------------

class AdmmSolver:
    """Stateful solver for a single run (one seed)."""

    def __init__(self, y, operator, generator, denoiser, config, ground_truth=None, run_index=0):
        config.validate()
        self.y = np.asarray(y, dtype=np.float64)
        if self.y.shape != operator.out_shape:
            raise ValueError(f"measurement shape {self.y.shape} != operator output {operator.out_shape}")
        if isinstance(generator, Generator):
            self.generator = generator
        else:
            c, h, w = operator.in_shape
            if generator.out_channels != c:
                raise ValueError(f"generator emits {generator.out_channels} channels, operator expects {c}")
            self.generator = Generator(generator, h, w, rng_seed=config.seed + 7919 * run_index,
                                       sigma_noise=config.sigma_noise)
        self.generator.seed.sigma_noise = config.sigma_noise
        self.operator = operator
        self.denoiser = as_denoiser(denoiser) if not config.dip_only else None
        self.config = config
        self.ground_truth = None if ground_truth is None else np.asarray(getattr(ground_truth, "planes", ground_truth))
        self.optimizer = tn.Adam(self.generator.param_list, lr=config.lr, betas=config.adam_betas, eps=config.adam_eps)
        self.rng = np.random.default_rng([config.seed, run_index, 1])
        x0 = operator.init_estimate(self.y)
        self.state = AdmmState(x=x0, u=np.zeros_like(x0))
        self.smooth_from = int(config.smoothing_start * config.iterations)
        self._t0 = time.perf_counter()
        self._best = math.inf
        self._stale = 0

    # persistence ------------------------------------------------------------------
    def save(self, path):
        s = self.state
        rec = {f"param/{k}": v.data for k, v in self.generator.params.items()}
        rec.update({f"adam/m/{i}": m for i, m in enumerate(self.optimizer.m)})
        rec.update({f"adam/v/{i}": v for i, v in enumerate(self.optimizer.v)})
        rec["state/x"] = s.x
        rec["state/u"] = s.u
        rec["state/counters"] = np.array([s.k, s.iteration, self.optimizer.step_count], dtype=np.int64)
        if s.smoothed is not None:
            rec["state/smoothed"] = s.smoothed
        meta = json.dumps({"rng": self.rng.bit_generator.state, "trace": [asdict(r) for r in s.trace]})
        rec["state/meta"] = np.frombuffer(meta.encode("utf-8"), dtype=np.uint8)
        save_tensors(path, rec)

    def load(self, path):
        rec = load_tensors(path)
        for k, p in self.generator.params.items():
            p.data[...] = rec[f"param/{k}"]
        for i in range(len(self.optimizer.m)):
            self.optimizer.m[i][...] = rec[f"adam/m/{i}"]
            self.optimizer.v[i][...] = rec[f"adam/v/{i}"]
        k, it, steps = (int(v) for v in rec["state/counters"])
        meta = json.loads(rec["state/meta"].tobytes().decode("utf-8"))
        self.rng.bit_generator.state = meta["rng"]
        self.optimizer.step_count = steps
        self.state = AdmmState(x=rec["state/x"].copy(), u=rec["state/u"].copy(), k=k, iteration=it,
                               smoothed=rec["state/smoothed"].copy() if "state/smoothed" in rec else None,
                               trace=[TraceRecord(**r) for r in meta["trace"]])

    # one round --------------------------------------------------------------------
    @property
    def done(self):
        return self.state.iteration >= self.config.iterations

    def _theta_iterations(self, n):
        cfg, s = self.config, self.state
        mu = 0.0 if cfg.dip_only else cfg.mu
        for _ in range(n):
            z = perturb_seed(self.generator.seed, self.rng)
            try:
                ((_, image),) = theta_step(self.generator, self.optimizer, self.y, self.operator, s.x, s.u, mu, [z])
            except DivergenceError as exc:
                raise DivergenceError(str(exc), s.trace, s.iteration) from None
            if s.iteration >= self.smooth_from:
                s.smoothed = smooth_output(s.smoothed, image, cfg.smoothing)
            s.iteration += 1

    def step_round(self, executor=None):
        cfg, s = self.config, self.state
        n = min(cfg.denoiser_period, cfg.iterations - s.iteration)
        use_red = not cfg.dip_only and cfg.lam > 0
        fx = None
        if use_red and executor is not None:
            pending = executor.submit(self.denoiser, s.x.copy())
            self._theta_iterations(n)
            fx = pending.result()
        else:
            if use_red:
                fx = self.denoiser(s.x)
            self._theta_iterations(n)

        T = self.generator.output()
        if cfg.dip_only:
            total, data, red, gap_term = objective(T, T, np.zeros_like(T), T, self.y, self.operator, 0.0, 0.0)
            x_new, u_new = T, s.u
        else:
            total, data, red, gap_term = objective(T, s.x, s.u, fx if use_red else s.x, self.y, self.operator,
                                                   cfg.lam, cfg.mu)
            if not math.isfinite(total):
                raise DivergenceError(f"objective became {total}", s.trace, s.iteration)
            try:
                if cfg.x_update == "fixed_point":
                    x_new = x_step_fixed_point(s.x, T, s.u, self.denoiser, cfg.lam, cfg.mu,
                                               cfg.inner_iterations, fx)
                else:
                    x_new = x_step_sd(s.x, T, s.u, self.denoiser, cfg.lam, cfg.mu, cfg.step_size,
                                      cfg.inner_iterations, fx)
            except DivergenceError as exc:
                raise DivergenceError(str(exc), s.trace, s.iteration) from None
            u_new = u_step(s.u, x_new, T)
        if not math.isfinite(total):
            raise DivergenceError(f"objective became {total}", s.trace, s.iteration)
        gap = float(np.linalg.norm(x_new - T))
        q = psnr(T, self.ground_truth, cfg.eval_channels) if self.ground_truth is not None else math.nan
        s.x, s.u = x_new, u_new
        s.k += 1
        rec = TraceRecord(s.iteration, data, red, gap_term, total, gap, q, time.perf_counter() - self._t0)
        s.trace.append(rec)
        return rec

    def _early_stop(self, rec):
        cfg = self.config
        if not cfg.early_stop_patience:
            return False
        if rec.total < self._best * (1.0 - cfg.early_stop_tol):
            self._best, self._stale = rec.total, 0
            return False
        self._stale += 1
        return self._stale >= cfg.early_stop_patience

    def result_image(self):
        s = self.state
        return s.smoothed if s.smoothed is not None else self.generator.output()

    def run(self, checkpoint_path=None, checkpoint_every=0, callback=None):
        executor = ThreadPoolExecutor(max_workers=1) if self.config.parallel and not self.config.dip_only else None
        try:
            while not self.done:
                rec = self.step_round(executor)
                if callback is not None:
                    callback(self, rec)
                if checkpoint_path and checkpoint_every and self.state.k % checkpoint_every == 0:
                    self.save(checkpoint_path)
                if self._early_stop(rec):
                    break
        finally:
            if executor is not None:
                executor.shutdown(wait=True)
        return self.result_image()


@dataclass
class RunResult:
    image: np.ndarray
    trace: list
    run_images: list
    solvers: list


def run(y, operator, generator_config, denoiser, config, ground_truth=None, **kwargs):
    """Full solve, averaging the smoothed outputs of ``config.runs`` independent seeds.

    ``trace`` in the result is the trace of the first run.
    """
    images, solvers = [], []
    for r in range(config.runs):
        solver = AdmmSolver(y, operator, generator_config, denoiser, config, ground_truth, run_index=r)
        images.append(solver.run(**kwargs))
        solvers.append(solver)
    image = np.mean(images, axis=0) if len(images) > 1 else images[0]
    return RunResult(np.clip(image, 0.0, 1.0), solvers[0].state.trace, images, solvers)


def run_dip(y, operator, generator_config, config, ground_truth=None, **kwargs):
    """The same loop with the RED term and the ADMM coupling removed (lam = mu = 0)."""
    params = asdict(config)
    params.update(lam=0.0, mu=0.0)
    return run(y, operator, generator_config, None, SolverConfig(**params), ground_truth, **kwargs)


def run_red(y, operator, denoiser, lam, mu, rounds, inner_iterations=1):
    """Denoiser-regularised restoration without a network.

    Same ADMM structure with the network replaced by the proximal map of the
    data term, v = argmin 1/2 ||H v - y||^2 + mu/2 ||x - v - u||^2; the
    x-update is the fixed point above with v in place of T.  Returns (x, v).
    """
    f = as_denoiser(denoiser)
    y = np.asarray(y, dtype=np.float64)
    x = operator.init_estimate(y)
    u = np.zeros_like(x)
    hty = operator.adjoint(y)
    v = x
    for _ in range(rounds):
        v = operator.solve_normal(hty + mu * (x - u), mu)
        x = x_step_fixed_point(x, v, u, f, lam, mu, inner_iterations)
        u = u_step(u, x, v)
    return np.clip(x, 0.0, 1.0), v


def write_trace(path, trace, timing=True):
    """CSV with header ``TRACE_COLUMNS``; ``timing=False`` writes 0 for seconds (byte-reproducible files)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in trace:
            w.writerow([r.iteration, repr(r.data_term), repr(r.red_term), repr(r.gap_term), repr(r.total),
                        repr(r.constraint_gap), repr(r.psnr), repr(r.seconds if timing else 0.0)])


def read_trace(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [TraceRecord(int(r["iteration"]), *(float(r[c]) for c in TRACE_COLUMNS[1:])) for r in rows]
