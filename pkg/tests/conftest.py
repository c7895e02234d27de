import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from deepred import tensor as tn  # noqa: E402

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


def numeric_grad(fn, arrays, index, step=1e-5):
    """Central finite differences of scalar fn(*arrays) w.r.t. arrays[index]."""
    base = arrays[index]
    g = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = base[i]
        base[i] = orig + step
        fp = fn(*arrays)
        base[i] = orig - step
        fm = fn(*arrays)
        base[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b, vanish=1e-7):
    """Relative L2 error; gradients that vanish in both (e.g. a bias feeding a
    normalisation layer) count as agreeing when their difference is below ``vanish``."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    diff = float(np.linalg.norm(a - b))
    if denom < vanish:
        return 0.0 if diff < vanish else float("inf")
    return diff / denom


def gradcheck(build, arrays, seed=0, step=1e-5):
    """Compare tape gradients of ``sum(w * build(*tensors))`` with finite differences.

    Returns the worst relative error over all inputs.  Networks with leaky
    ReLUs want a small ``step`` so that no perturbation crosses a kink.
    """
    rng = np.random.default_rng(seed)
    probe = [None]

    def scalar(*arrs):
        out = build(*[tn.Tensor(a) for a in arrs]).data
        if probe[0] is None:
            probe[0] = rng.uniform(-1, 1, size=out.shape)
        return float(np.sum(probe[0] * out))

    scalar(*arrays)
    leaves = [tn.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    loss = tn.total(tn.mul(out, tn.Tensor(probe[0])))
    analytic = tn.grad(loss, leaves)
    worst = 0.0
    for k in range(len(arrays)):
        numeric = numeric_grad(scalar, [a.copy() for a in arrays], k, step)
        worst = max(worst, rel_err(analytic[k], numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report ---------------------------------------------------

ACCEPTANCE = []


def report(number, ok, detail):
    """Record and print one acceptance line; the terminal summary repeats them in order."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    return ok


def note(detail):
    """An informational line for the acceptance summary, outside the numbered criteria."""
    ACCEPTANCE.append((float("inf"), f"INFO {detail}"))
    print(f"INFO {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE, key=lambda t: t[0]):
            terminalreporter.write_line(line)
