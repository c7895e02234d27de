import math

import numpy as np
import pytest

from conftest import DATA_DIR, gradcheck
from deepred import tensor as tn
from deepred.admm import (AdmmSolver, DivergenceError, SolverConfig, StallError, TraceRecord, objective, read_trace,
                          run, run_dip, run_red, smooth_output, theta_loss, u_step, write_trace, x_step_fixed_point,
                          x_step_sd)
from deepred.denoisers import DenoiserSpec
from deepred.generator import Generator, GeneratorConfig, forward
from deepred.imaging import add_awgn, load_png, psnr
from deepred.operators import blur_op, downsample_op, identity_op, make_uniform_kernel, sisr_kernel

SMALL_NET = GeneratorConfig.uniform(2, 8, skip=2)


def trio(rng, shape=(1, 4, 4)):
    return rng.random(shape), rng.random(shape), rng.random(shape)


def small_problem(size=16, sigma=25, seed=0):
    gt = load_png(f"{DATA_DIR}/coffee_128.png").planes[:, 40:40 + size, 40:40 + size]
    return add_awgn(gt, sigma, seed=seed), gt


class CountingDenoiser:
    """Wraps a denoiser and records whether each call happened while a gradient tape was active."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0
        self.calls_while_recording = 0

    def __call__(self, x):
        self.calls += 1
        if tn.is_recording():
            self.calls_while_recording += 1
        return self.fn(x)


class TestUStep:
    def test_x_equals_t(self, rng):
        u, x, _ = trio(rng)
        np.testing.assert_array_equal(u_step(u, x, x), u)

    def test_zero_u_zero_t(self, rng):
        x = rng.random((1, 4, 4))
        np.testing.assert_array_equal(u_step(np.zeros_like(x), x, np.zeros_like(x)), -x)

    def test_elementwise(self, rng):
        u, x, t = trio(rng)
        out = u_step(u, x, t)
        for i in np.ndindex(u.shape):
            assert out[i] == u[i] - x[i] + t[i]


class TestFixedPoint:
    def test_identity_denoiser_one_step(self, rng):
        x0, T, u = trio(rng)
        lam, mu = 0.3, 0.7
        out = x_step_fixed_point(x0, T, u, lambda v: v, lam, mu, J=1)
        np.testing.assert_allclose(out, (lam * x0 + mu * (T + u)) / (lam + mu), rtol=1e-15)

    def test_identity_denoiser_fixed_point(self, rng):
        x0, T, u = trio(rng)
        out = x_step_fixed_point(x0, T, u, lambda v: v, 0.5, 0.5, J=200)
        np.testing.assert_allclose(out, T + u, atol=1e-12)

    def test_annihilating_denoiser(self, rng):
        x0, T, u = trio(rng)
        out = x_step_fixed_point(x0, T, u, np.zeros_like, 0.8, 0.8, J=1)
        np.testing.assert_allclose(out, (T + u) / 2, rtol=1e-15)

    def test_linear_shrink_closed_form(self, rng):
        x0, T, u = trio(rng)
        out = x_step_fixed_point(x0, T, u, lambda v: 0.5 * v, 0.5, 0.5, J=50)
        np.testing.assert_allclose(out, (2.0 / 3.0) * (T + u), rtol=0, atol=1e-10)

    def test_precomputed_fx_used_once(self, rng):
        x0, T, u = trio(rng)
        calls = []

        def f(v):
            calls.append(1)
            return 0.5 * v

        a = x_step_fixed_point(x0, T, u, f, 0.5, 0.5, J=3, fx=0.5 * x0)
        assert len(calls) == 2
        np.testing.assert_allclose(a, x_step_fixed_point(x0, T, u, lambda v: 0.5 * v, 0.5, 0.5, J=3), rtol=1e-15)

    def test_non_finite(self, rng):
        x0, T, u = trio(rng)
        with pytest.raises(DivergenceError):
            x_step_fixed_point(x0, T, u, lambda v: v * np.nan, 0.5, 0.5)

    def test_bad_args(self, rng):
        x0, T, u = trio(rng)
        with pytest.raises(ValueError):
            x_step_fixed_point(x0, T, u, lambda v: v, 0.0, 0.0)
        with pytest.raises(ValueError):
            x_step_fixed_point(x0, T, u, lambda v: v, 0.5, 0.5, J=0)


class TestSteepestDescent:
    def test_stationary(self, rng):
        x = rng.random((1, 4, 4))
        u = rng.random((1, 4, 4))
        out = x_step_sd(x, x - u, u, lambda v: v, 0.5, 0.5, c=0.3, J=5)
        np.testing.assert_array_equal(out, x)

    def test_exact_step_on_quadratic(self, rng):
        x0, T, u = trio(rng)
        out = x_step_sd(x0, T, u, np.zeros_like, 1.0, 1.0, c=0.5, J=1)
        np.testing.assert_allclose(out, (T + u) / 2, atol=1e-15)

    def test_linear_denoiser_converges(self, rng):
        x0, T, u = trio(rng)
        out = x_step_sd(x0, T, u, lambda v: 0.5 * v, 0.5, 0.5, J=100)
        np.testing.assert_allclose(out, (2.0 / 3.0) * (T + u), atol=1e-10)

    def test_backtracking_from_large_step(self, rng):
        x0, T, u = trio(rng)
        out = x_step_sd(x0, T, u, np.zeros_like, 1.0, 1.0, c=3.0, J=60)
        np.testing.assert_allclose(out, (T + u) / 2, atol=1e-10)

    def test_surrogate_never_increases(self, rng):
        x, T, u = trio(rng, (1, 6, 6))
        lam, mu = 0.5, 0.5
        for _ in range(10):
            f = 0.5 * x
            before = 0.5 * lam * np.sum((x - f) ** 2) + 0.5 * mu * np.sum((x - T - u) ** 2)
            nxt = x_step_sd(x, T, u, None, lam, mu, c=2.5, J=1, fx=f)
            after = 0.5 * lam * np.sum((nxt - f) ** 2) + 0.5 * mu * np.sum((nxt - T - u) ** 2)
            assert after <= before * (1 + 1e-12)
            x = nxt

    def test_stall(self, rng):
        x0, T, u = trio(rng)
        with pytest.raises(StallError):
            x_step_sd(x0, T, u, np.zeros_like, 1.0, 1.0, c=10.0, J=1, min_step=0.9)

    def test_bad_step(self, rng):
        x0, T, u = trio(rng)
        with pytest.raises(ValueError):
            x_step_sd(x0, T, u, np.zeros_like, 1.0, 1.0, c=-1.0)


def test_both_strategies_match_dense_solve(rng):
    """lam (x - A x) + mu (x - T - u) = 0 for a random contraction A on 8x8 images."""
    n = 64
    a = rng.standard_normal((n, n))
    a *= 0.9 / np.linalg.norm(a, 2)
    lam, mu = 0.5, 0.5
    T, u = rng.random((2, 1, 8, 8))
    f = lambda v: (a @ v.ravel()).reshape(v.shape)  # noqa: E731
    exact = np.linalg.solve(lam * (np.eye(n) - a) + mu * np.eye(n), mu * (T + u).ravel()).reshape(T.shape)
    fp = x_step_fixed_point(np.zeros_like(T), T, u, f, lam, mu, J=60)
    sd = x_step_sd(np.zeros_like(T), T, u, f, lam, mu, J=60)
    assert np.max(np.abs(fp - exact)) <= 1e-8
    assert np.max(np.abs(sd - exact)) <= 1e-8


class TestObjective:
    def test_red_zero_at_denoiser_fixed_point(self, rng):
        x, T, u = trio(rng)
        _, _, red, _ = objective(T, x, u, x, T, identity_op(T.shape), 0.5, 0.5)
        assert red == 0.0

    def test_data_zero_when_consistent(self, rng):
        x, T, u = trio(rng, (1, 8, 8))
        op = blur_op(make_uniform_kernel(3), T.shape)
        _, data, _, _ = objective(T, x, u, x, op.forward(T), op, 0.5, 0.5)
        assert data == pytest.approx(0.0, abs=1e-28)

    def test_three_by_three_direct(self):
        T = np.array([[[0.2, 0.4, 0.6], [0.1, 0.3, 0.5], [0.9, 0.7, 0.8]]])
        x = np.array([[[0.25, 0.35, 0.55], [0.15, 0.3, 0.45], [0.85, 0.75, 0.8]]])
        u = np.array([[[0.01, -0.02, 0.0], [0.03, 0.0, -0.01], [0.0, 0.02, 0.01]]])
        y = np.array([[[0.3, 0.3, 0.6], [0.2, 0.2, 0.6], [0.8, 0.8, 0.7]]])
        # 3x3 box filter with edge replication for the 1-pixel symmetric border
        xp = np.pad(x[0], 1, mode="symmetric")
        fx = np.array([[[sum(xp[i + a, j + b] for a in range(3) for b in range(3)) / 9 for j in range(3)]
                        for i in range(3)]])
        lam, mu = 0.5, 0.25
        data = red = gap = 0.0
        for i in range(3):
            for j in range(3):
                data += 0.5 * (T[0, i, j] - y[0, i, j]) ** 2
                red += 0.5 * lam * x[0, i, j] * (x[0, i, j] - fx[0, i, j])
                gap += 0.5 * mu * (x[0, i, j] - T[0, i, j] - u[0, i, j]) ** 2
        from deepred.denoisers import denoise
        got = objective(T, x, u, denoise(x, DenoiserSpec("box", width=3)), y, identity_op(T.shape), lam, mu)
        assert got[1] == pytest.approx(data, rel=1e-13)
        assert got[2] == pytest.approx(red, rel=1e-12)
        assert got[3] == pytest.approx(gap, rel=1e-13)
        assert got[0] == pytest.approx(data + red + gap, rel=1e-13)


class TestSmoothing:
    def test_gamma_zero(self, rng):
        a, b = rng.random((2, 3))
        np.testing.assert_array_equal(smooth_output(a, b, 0.0), b)

    def test_constant_stream(self):
        acc = None
        for _ in range(20):
            acc = smooth_output(acc, np.full(4, 0.3), 0.99)
        np.testing.assert_allclose(acc, 0.3, rtol=1e-14)

    def test_alternating_recurrence(self):
        acc, ref = None, None
        for k in range(10):
            v = float(k % 2)
            acc = smooth_output(acc, np.array([v]), 0.5)
            ref = v if ref is None else 0.5 * ref + 0.5 * v
        assert acc[0] == ref
        assert ref == pytest.approx(0.666015625)

    def test_gamma_range(self):
        with pytest.raises(ValueError):
            smooth_output(None, np.zeros(2), 1.0)


class TestThetaLoss:
    def setup_method(self):
        self.cfg = GeneratorConfig.uniform(1, 4, skip=2)
        self.g = Generator(self.cfg, 16, 16, rng_seed=4)
        rng = np.random.default_rng(2)
        self.y = rng.random((3, 16, 16))
        self.x = rng.random((3, 16, 16))
        self.u = 0.1 * rng.standard_normal((3, 16, 16))

    def test_mu_zero_is_fit_only(self):
        loss, out = theta_loss(self.g, self.g.seed.z, self.y, identity_op(self.y.shape), self.x, self.u, 0.0)
        assert loss.item() == pytest.approx(0.5 * np.sum((out.data - self.y) ** 2), rel=1e-14)

    def test_proximity_zero_when_consistent(self):
        T = self.g.output()
        loss, _ = theta_loss(self.g, self.g.seed.z, self.y, identity_op(self.y.shape), T + self.u, self.u, 3.0)
        assert loss.item() == pytest.approx(0.5 * np.sum((T - self.y) ** 2), rel=1e-12)

    def test_composite_gradient(self):
        op = identity_op(self.y.shape)
        names = list(self.g.params)
        mu = 0.5

        def loss_of(*arrays):
            params = dict(zip(names, arrays))
            out = forward(params, self.g.seed.z, self.cfg)
            fit = tn.half_sq_norm(tn.sub(tn.apply_linear(out, op), tn.Tensor(self.y)))
            prox = tn.half_sq_norm(tn.sub(tn.Tensor(self.x - self.u), out))
            return tn.add(fit, tn.mul(prox, mu))

        base = [self.g.params[n].data.copy() for n in names]
        assert gradcheck(loss_of, base, step=1e-6) <= 1e-3
        # the library's own loss node agrees with this composition
        lib, _ = theta_loss(self.g, self.g.seed.z, self.y, op, self.x, self.u, mu)
        assert lib.item() == pytest.approx(loss_of(*[tn.Tensor(b) for b in base]).item(), rel=1e-14)


def small_config(**kw):
    params = dict(lam=0.5, mu=0.5, iterations=60, lr=0.01, sigma_noise=0.033, seed=1, runs=1)
    params.update(kw)
    return SolverConfig(**params)


class TestSolver:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            SolverConfig(lam=0.5, mu=0.0)
        with pytest.raises(ValueError):
            SolverConfig(x_update="newton")
        with pytest.raises(ValueError):
            SolverConfig(smoothing=1.0)
        assert SolverConfig(iterations=25, denoiser_period=10).rounds == 3

    def test_trace_one_record_per_round(self):
        y, gt = small_problem()
        res = run(y, identity_op(y.shape), SMALL_NET, DenoiserSpec("box", width=3), small_config(iterations=45), gt)
        assert [r.iteration for r in res.trace] == [10, 20, 30, 40, 45]
        for r in res.trace:
            assert all(math.isfinite(v) for v in (r.data_term, r.red_term, r.gap_term, r.total, r.constraint_gap, r.psnr))
            assert r.total == pytest.approx(r.data_term + r.red_term + r.gap_term)

    def test_initial_estimate(self):
        y, gt = small_problem()
        s = AdmmSolver(y, identity_op(y.shape), SMALL_NET, DenoiserSpec("box", width=3), small_config())
        np.testing.assert_array_equal(s.state.x, y)
        np.testing.assert_array_equal(s.state.u, 0)
        op = downsample_op(sisr_kernel(2), 2, (3, 16, 16))
        low = op.forward(gt)
        s = AdmmSolver(low, op, SMALL_NET, DenoiserSpec("box", width=3), small_config())
        assert s.state.x.shape == (3, 16, 16)
        assert s.state.x.min() >= 0 and s.state.x.max() <= 1

    def test_shape_mismatch(self):
        y, _ = small_problem()
        with pytest.raises(ValueError):
            AdmmSolver(y[:, :8], identity_op(y.shape), SMALL_NET, DenoiserSpec("box", width=3), small_config())

    def test_denoiser_never_called_under_tape(self):
        y, gt = small_problem()
        f = CountingDenoiser(lambda v: np.clip(0.9 * v + 0.05, 0, 1))
        # inline schedule: the denoiser shares the thread that records tapes
        cfg = small_config(iterations=1000, parallel=False)
        solver = AdmmSolver(y, identity_op(y.shape), SMALL_NET, f, cfg, gt)
        solver.run()
        assert solver.state.k == 100
        assert f.calls == 100
        assert f.calls_while_recording == 0

    def test_parallel_equals_sequential(self):
        y, gt = small_problem()
        spec = DenoiserSpec("nlm", sigma_f=3.0, patch=3, window=7)
        a = run(y, identity_op(y.shape), SMALL_NET, spec, small_config(iterations=100, parallel=True), gt)
        b = run(y, identity_op(y.shape), SMALL_NET, spec, small_config(iterations=100, parallel=False), gt)
        strip = lambda tr: [(r.iteration, r.data_term, r.red_term, r.gap_term, r.total, r.constraint_gap, r.psnr)  # noqa: E731
                            for r in tr]
        assert strip(a.trace) == strip(b.trace)
        np.testing.assert_array_equal(a.image, b.image)

    def test_checkpoint_resume(self, tmp_path):
        y, gt = small_problem()
        spec = DenoiserSpec("box", width=3)
        cfg = small_config(iterations=60, smoothing_start=0.5)
        straight = AdmmSolver(y, identity_op(y.shape), SMALL_NET, spec, cfg, gt)
        straight.run()
        first = AdmmSolver(y, identity_op(y.shape), SMALL_NET, spec, cfg, gt)
        for _ in range(3):
            first.step_round()
        first.save(tmp_path / "state.bin")
        resumed = AdmmSolver(y, identity_op(y.shape), SMALL_NET, spec, cfg, gt)
        resumed.load(tmp_path / "state.bin")
        resumed.run()
        np.testing.assert_array_equal(resumed.state.x, straight.state.x)
        np.testing.assert_array_equal(resumed.state.u, straight.state.u)
        np.testing.assert_array_equal(resumed.result_image(), straight.result_image())
        assert [r.total for r in resumed.state.trace] == [r.total for r in straight.state.trace]

    def test_periodic_checkpoint_written(self, tmp_path):
        y, _ = small_problem()
        solver = AdmmSolver(y, identity_op(y.shape), SMALL_NET, DenoiserSpec("box", width=3), small_config(iterations=40))
        solver.run(checkpoint_path=tmp_path / "c.bin", checkpoint_every=2)
        assert (tmp_path / "c.bin").exists()

    def test_dip_degenerate(self):
        y, gt = small_problem()
        res = run_dip(y, identity_op(y.shape), SMALL_NET, small_config(iterations=30), gt)
        assert all(r.red_term == 0 and r.gap_term == 0 for r in res.trace)
        np.testing.assert_array_equal(res.solvers[0].state.u, 0)
        assert res.solvers[0].denoiser is None

    def test_lam_zero_mu_positive_runs_without_denoiser(self):
        y, gt = small_problem()
        f = CountingDenoiser(lambda v: v)
        run(y, identity_op(y.shape), SMALL_NET, f, small_config(lam=0.0, mu=0.5, iterations=30), gt)
        assert f.calls == 0

    def test_divergence_keeps_partial_trace(self):
        y, gt = small_problem()
        calls = {"n": 0}

        def flaky(v):
            calls["n"] += 1
            return v if calls["n"] < 3 else v * np.nan

        with pytest.raises(DivergenceError) as exc:
            run(y, identity_op(y.shape), SMALL_NET, flaky, small_config(iterations=100, parallel=False), gt)
        assert len(exc.value.trace) == 2
        assert exc.value.iteration == 30

    def test_non_finite_measurement(self):
        y, _ = small_problem()
        y = y.copy()
        y[0, 0, 0] = np.inf
        with pytest.raises(DivergenceError):
            run(y, identity_op(y.shape), SMALL_NET, DenoiserSpec("box", width=3), small_config(iterations=10))

    def test_early_stop(self):
        y, _ = small_problem()
        cfg = small_config(iterations=400, early_stop_patience=1, early_stop_tol=0.5)
        solver = AdmmSolver(y, identity_op(y.shape), SMALL_NET, DenoiserSpec("box", width=3), cfg)
        solver.run()
        assert solver.state.iteration < 400

    def test_run_averaging(self):
        y, gt = small_problem()
        res = run(y, identity_op(y.shape), SMALL_NET, DenoiserSpec("box", width=3), small_config(runs=2, iterations=20), gt)
        assert len(res.run_images) == 2
        assert not np.array_equal(res.run_images[0], res.run_images[1])
        np.testing.assert_allclose(res.image, np.clip((res.run_images[0] + res.run_images[1]) / 2, 0, 1))

    def test_steepest_descent_strategy(self):
        y, gt = small_problem()
        res = run(y, identity_op(y.shape), SMALL_NET, DenoiserSpec("box", width=3),
                  small_config(x_update="steepest_descent", iterations=30), gt)
        assert len(res.trace) == 3


def test_gap_narrows_on_64_crop():
    """Constraint gap after a few hundred iterations falls below a tenth of its first-round value."""
    y, gt = small_problem(size=64, seed=3)
    cfg = SolverConfig(lam=0.5, mu=0.5, iterations=600, lr=0.008, sigma_noise=0.033, seed=0)
    net = GeneratorConfig.uniform(3, 16, dtype="float32")
    res = run(y, identity_op(y.shape), net, DenoiserSpec("nlm", sigma_f=3.0, patch=5, window=11), cfg, gt)
    first, last = res.trace[0].constraint_gap, res.trace[-1].constraint_gap
    print(f"64x64 gap: round 1 {first:.3f}, final {last:.3f}, ratio {last / first:.3f}")
    assert last < 0.1 * first
    assert psnr(res.image, gt) > psnr(y, gt)


def test_red_baseline_improves_blurred_input():
    gt = load_png(f"{DATA_DIR}/chelsea_128.png").planes[:, :64, :64]
    op = blur_op(make_uniform_kernel(5), gt.shape)
    y = add_awgn(op.forward(gt), math.sqrt(2), seed=0)
    x, v = run_red(y, op, DenoiserSpec("nlm", sigma_f=3.0, patch=5, window=11), 0.02, 0.04, rounds=20)
    assert x.shape == gt.shape
    assert psnr(x, gt) > psnr(y, gt) + 1.0


def test_trace_file_round_trip(tmp_path):
    recs = [TraceRecord(10, 1.5, 0.25, 0.125, 1.875, 3.0, 21.5, 0.7), TraceRecord(20, 1.0, 0.2, 0.1, 1.3, 2.0, math.nan, 1.4)]
    write_trace(tmp_path / "t.csv", recs)
    back = read_trace(tmp_path / "t.csv")
    assert back[0] == recs[0]
    assert math.isnan(back[1].psnr)
    write_trace(tmp_path / "u.csv", recs, timing=False)
    header = (tmp_path / "u.csv").read_text().splitlines()[0]
    assert header == "iteration,data_term,red_term,gap_term,total,constraint_gap,psnr,seconds"
    assert all(r.seconds == 0.0 for r in read_trace(tmp_path / "u.csv"))
