"""Quick numerical self-checks runnable from an installed package (``deepred selftest``)."""

import time

import numpy as np

from . import tensor as tn
from .admm import x_step_fixed_point, x_step_sd
from .denoisers import nlm_denoise
from .imaging import decode_png, encode_png
from .operators import (MaskPattern, blur_op, downsample_op, identity_op, make_gaussian_kernel,
                        make_uniform_kernel, mask_op, sisr_kernel)


def check_adjoints(rng, trials):
    shape = (1, 16, 16)
    ops = [identity_op(shape), blur_op(make_uniform_kernel(9), shape),
           blur_op(make_gaussian_kernel(25, 1.6), shape, wrap=True),
           downsample_op(sisr_kernel(2), 2, shape), downsample_op(sisr_kernel(4), 4, shape, wrap=True),
           mask_op(MaskPattern.random(16, 16, 0.5, rng))]
    worst = 0.0
    for op in ops:
        for _ in range(trials):
            x = rng.standard_normal(op.in_shape)
            y = rng.standard_normal(op.out_shape)
            lhs = np.vdot(op.forward(x), y)
            rhs = np.vdot(x, op.adjoint(y))
            worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(y)))
    return worst <= 1e-10, f"worst normalized adjoint mismatch {worst:.2e}"


def check_conv_gradient(rng, trials):
    worst = 0.0
    h = 1e-6
    for _ in range(trials):
        x = rng.uniform(-1, 1, (2, 5, 5))
        w = rng.uniform(-1, 1, (2, 2, 3, 3))
        probe = rng.uniform(-1, 1, (2, 5, 5))
        wt = tn.Tensor(w, requires_grad=True)
        loss = tn.total(tn.mul(tn.conv2d(tn.Tensor(x), wt, padding="reflect"), tn.Tensor(probe)))
        (g,) = tn.grad(loss, [wt])
        num = np.zeros_like(w)
        for i in np.ndindex(w.shape):
            for sgn in (1, -1):
                wp = w.copy()
                wp[i] += sgn * h
                num[i] += sgn * np.sum(probe * tn.conv2d(tn.Tensor(x), tn.Tensor(wp), padding="reflect").data)
            num[i] /= 2 * h
        worst = max(worst, np.linalg.norm(g - num) / np.linalg.norm(num))
    return worst <= 1e-4, f"worst conv weight-gradient relative error {worst:.2e}"


def _nlm_exhaustive(x, patch, window, h):
    c, H, W = x.shape
    pr, wr = patch // 2, window // 2
    xp = np.pad(x, ((0, 0), (pr + wr,) * 2, (pr + wr,) * 2), mode="reflect")
    out = np.zeros_like(x)
    for i in range(H):
        for j in range(W):
            ci, cj = i + pr + wr, j + pr + wr
            ref = xp[:, ci - pr:ci + pr + 1, cj - pr:cj + pr + 1]
            acc, tot = np.zeros(c), 0.0
            for di in range(-wr, wr + 1):
                for dj in range(-wr, wr + 1):
                    other = xp[:, ci + di - pr:ci + di + pr + 1, cj + dj - pr:cj + dj + pr + 1]
                    wgt = np.exp(-np.mean((ref - other) ** 2) / h ** 2)
                    acc += wgt * xp[:, ci + di, cj + dj]
                    tot += wgt
            out[:, i, j] = acc / tot
    return out


def check_nlm(rng, trials):
    worst = 0.0
    for _ in range(trials):
        x = rng.random((1, 8, 8))
        worst = max(worst, np.max(np.abs(nlm_denoise(x, 3, 5, 0.2) - _nlm_exhaustive(x, 3, 5, 0.2))))
    return worst <= 1e-12, f"worst NLM deviation from exhaustive reference {worst:.2e}"


def check_fixed_point(rng, trials):
    lam = mu = 0.5
    worst = 0.0
    for _ in range(trials):
        T, u = rng.random((2, 1, 4, 4))
        target = mu * (T + u) / (lam * 0.5 + mu)
        x = np.zeros_like(T)
        a = x_step_fixed_point(x, T, u, lambda v: 0.5 * v, lam, mu, J=80)
        b = x_step_sd(x, T, u, lambda v: 0.5 * v, lam, mu, J=200)
        worst = max(worst, np.max(np.abs(a - target)), np.max(np.abs(b - target)))
    return worst <= 1e-8, f"worst x-update deviation from closed form {worst:.2e}"


def check_png(rng, trials):
    ok = True
    for _ in range(trials):
        planes = rng.integers(0, 256, (3, 7, 5)) / 255.0
        ok &= bool(np.array_equal(decode_png(encode_png(planes)), planes))
    return ok, "8-bit PNG round trip exact" if ok else "PNG round trip changed pixel values"


CHECKS = [
    ("operator adjointness", check_adjoints),
    ("conv gradient", check_conv_gradient),
    ("NLM reference", check_nlm),
    ("x-update fixed point", check_fixed_point),
    ("PNG round trip", check_png),
]


def run_selftest(quick=False, log=print):
    rng = np.random.default_rng(0)
    trials = 3 if quick else 20
    failures = 0
    for name, fn in CHECKS:
        t = time.perf_counter()
        ok, detail = fn(rng, trials)
        failures += not ok
        log(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.perf_counter() - t:.2f} s)")
    return 1 if failures else 0
