"""Experiment driver behind the command line: degrade, restore, compare."""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .admm import DivergenceError, run, run_dip, run_red, write_trace
from .imaging import Image, degrade, load_png, psnr, save_png
from .operators import (blur_op, downsample_op, identity_op, load_kernel, make_gaussian_kernel,
                        make_uniform_kernel, sisr_kernel)

METHODS = ("dip", "red", "deepred")
THREADS_ENV = "DEEPRED_THREADS"


def build_kernel(op):
    if op.kernel == "uniform":
        return make_uniform_kernel(op.kernel_size)
    if op.kernel == "gaussian":
        return make_gaussian_kernel(op.kernel_size, op.kernel_sigma)
    if op.kernel == "sisr":
        return sisr_kernel(op.scale)
    if op.kernel == "file":
        return load_kernel(op.kernel_path)
    return None


def build_operator(cfg, shape):
    """Degradation operator acting on clean images of ``shape`` (C, H, W)."""
    op = cfg.operator
    kernel = build_kernel(op)
    if op.scale > 1:
        return downsample_op(kernel if kernel is not None else make_uniform_kernel(1), op.scale, shape)
    if kernel is None:
        return identity_op(shape)
    return blur_op(kernel, shape, op.boundary)


def list_images(path):
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.lower().endswith(".png"))
        if not names:
            raise FileNotFoundError(f"no .png images in {path}")
        return [os.path.join(path, n) for n in names]
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return [path]


@dataclass
class Problem:
    name: str
    y: np.ndarray
    operator: object
    ground_truth: np.ndarray = None


def _ground_truth_for(cfg, image_path, index):
    gt = cfg.task.ground_truth
    if not gt:
        return None
    if os.path.isdir(gt):
        return load_png(os.path.join(gt, os.path.basename(image_path))).planes
    return load_png(gt).planes if index == 0 else None


def prepare(cfg, image_path, index=0):
    """Load one input and turn it into a restoration problem.

    With ``synthesize`` the file is a clean image: it is cropped to a multiple
    of the scale factor and degraded with the configured operator and noise.
    Otherwise it is the measurement itself.
    """
    name = os.path.splitext(os.path.basename(image_path))[0]
    img = load_png(image_path).planes
    s = cfg.operator.scale
    if cfg.task.synthesize:
        c, h, w = img.shape
        gt = img[:, :h - h % s, :w - w % s]
        H = build_operator(cfg, gt.shape)
        y = degrade(gt, H, cfg.task.noise_sigma, seed=cfg.task.seed + index)
        return Problem(name, y, H, gt)
    c, h, w = img.shape
    H = build_operator(cfg, (c, h * s, w * s))
    return Problem(name, img, H, _ground_truth_for(cfg, image_path, index))


def measurement_psnr(problem, channel_mode="rgb"):
    """PSNR of the operator's initial estimate from y (y itself for square operators)."""
    if problem.ground_truth is None:
        return math.nan
    return psnr(problem.operator.init_estimate(problem.y), problem.ground_truth, channel_mode)


def restore(cfg, problem, method="deepred", checkpoint_path=None, checkpoint_every=0):
    """Returns (image, trace); trace is empty for the network-free baseline."""
    if method == "deepred":
        res = run(problem.y, problem.operator, cfg.generator, cfg.denoiser, cfg.solver, problem.ground_truth,
                  checkpoint_path=checkpoint_path, checkpoint_every=checkpoint_every)
        return res.image, res.trace
    if method == "dip":
        res = run_dip(problem.y, problem.operator, cfg.generator, cfg.solver, problem.ground_truth)
        return res.image, res.trace
    if method == "red":
        s = cfg.solver
        x, _ = run_red(problem.y, problem.operator, cfg.denoiser, s.lam, s.mu, s.rounds, s.inner_iterations)
        return x, []
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def thread_count(cfg):
    env = os.environ.get(THREADS_ENV)
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be >= 1, got {env!r}")
        return n
    return cfg.task.threads


def _run_one(cfg, path, index, out_dir, timing):
    problem = prepare(cfg, path, index)
    trace_path = os.path.join(out_dir, f"{problem.name}_trace.csv")
    ckpt = os.path.join(out_dir, f"{problem.name}.ckpt") if cfg.task.checkpoint_every else None
    try:
        image, trace = restore(cfg, problem, "deepred", ckpt, cfg.task.checkpoint_every)
    except DivergenceError as exc:
        write_trace(trace_path, exc.trace or [], timing)
        return problem.name, False, f"{problem.name}: diverged at iteration {exc.iteration}: {exc}"
    write_trace(trace_path, trace, timing)
    ok = bool(np.all(np.isfinite(image)))
    if ok:
        save_png(Image(image), os.path.join(out_dir, f"{problem.name}_restored.png"))
    line = f"{problem.name}: iterations={cfg.solver.iterations}"
    if problem.ground_truth is not None:
        line += (f" input_psnr={measurement_psnr(problem, cfg.solver.eval_channels):.2f}"
                 f" final_psnr={psnr(image, problem.ground_truth, cfg.solver.eval_channels):.2f}")
    if not ok:
        line += " non-finite output"
    return problem.name, ok, line


def run_experiment(cfg, timing=False, log=print):
    """Restore every input; write ``<name>_restored.png``, ``<name>_trace.csv`` and ``summary.txt``.

    Returns the process exit status: 0 when every output was written and finite.
    Trace timing columns are zeroed unless ``timing`` so that reruns with the
    same seed produce identical files.
    """
    out_dir = cfg.task.output
    os.makedirs(out_dir, exist_ok=True)
    paths = list_images(cfg.task.input)
    jobs = [(cfg, p, i, out_dir, timing) for i, p in enumerate(paths)]
    n = min(thread_count(cfg), len(jobs))
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(lambda a: _run_one(*a), jobs))
    else:
        results = [_run_one(*a) for a in jobs]
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        for _, _, line in results:
            fh.write(line + "\n")
            log(line)
    return 0 if all(ok for _, ok, _ in results) else 1


def method_label(method, cfg):
    if method == "red":
        return f"RED ({cfg.denoiser.kind.upper()})" if cfg.denoiser.kind != "external" else "RED (external)"
    return {"dip": "DIP", "deepred": "DeepRED"}[method]


@dataclass
class ComparisonTable:
    images: list
    rows: dict  # label -> list of per-image PSNR (rounded to 2 decimals)

    def averages(self):
        return {label: round(float(np.mean(cells)), 2) for label, cells in self.rows.items()}

    def format(self):
        head = ["Method"] + self.images + ["Average"]
        lines = [",".join(head)]
        avg = self.averages()
        for label, cells in self.rows.items():
            lines.append(",".join([label] + [f"{c:.2f}" for c in cells] + [f"{avg[label]:.2f}"]))
        return "\n".join(lines) + "\n"


def compare(cfg, methods=METHODS, log=print):
    """PSNR table of the requested methods at the same budget and seed; written to ``comparison.csv``."""
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
    paths = list_images(cfg.task.input)
    problems = [prepare(cfg, p, i) for i, p in enumerate(paths)]
    if any(p.ground_truth is None for p in problems):
        raise ValueError("compare needs ground truth for every image")
    rows = {}
    for m in methods:
        cells = []
        for p in problems:
            image, _ = restore(cfg, p, m)
            cells.append(round(psnr(image, p.ground_truth, cfg.solver.eval_channels), 2))
            log(f"{method_label(m, cfg)} {p.name}: {cells[-1]:.2f}")
        rows[method_label(m, cfg)] = cells
    table = ComparisonTable([p.name for p in problems], rows)
    os.makedirs(cfg.task.output, exist_ok=True)
    with open(os.path.join(cfg.task.output, "comparison.csv"), "w") as fh:
        fh.write(table.format())
    return table


def simulate(cfg, log=print):
    """Degradation only: write ``<name>_degraded.png`` and report the degraded-input PSNR."""
    out_dir = cfg.task.output
    os.makedirs(out_dir, exist_ok=True)
    results = []
    for i, path in enumerate(list_images(cfg.task.input)):
        problem = prepare(cfg, path, i)
        save_png(Image(problem.y), os.path.join(out_dir, f"{problem.name}_degraded.png"))
        q = measurement_psnr(problem, cfg.solver.eval_channels)
        results.append((problem.name, q))
        log(f"{problem.name}: degraded_psnr={q:.2f}")
    return results

