"""Acceptance suite: one test per criterion, each recorded as a PASS/FAIL summary line."""
import time

import numpy as np
import pytest

from lfcista import cli, convops, csc, desk, net, selftest

import oracles


def test_1_adjoint_suite(record):
    t0 = time.perf_counter()
    worst = selftest.adjoint_suite(trials=1000, seed=2024)
    elapsed = time.perf_counter() - t0
    ok = record("1 adjoint identity", worst <= 1e-10 and elapsed < 10,
                f"worst relative error {worst:.2e} (<= 1e-10), {elapsed:.1f} s (< 10 s)")
    assert ok


def dense_instances(count, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        rows, cols, m = int(rng.integers(3, 9)), int(rng.integers(3, 11)), int(rng.integers(1, 5))
        if rows * cols * m > 512:
            continue
        kr = int(rng.choice(np.arange(1, rows + 1, 2)))
        kc = int(rng.choice(np.arange(1, cols + 1, 2)))
        out.append((rng.random((rows, cols)), rng.standard_normal((m, kr, kc)),
                    rng.standard_normal((m, rows, cols)), rng.standard_normal((rows, cols))))
    return out


def test_2_dense_oracle_suite(record):
    t0 = time.perf_counter()
    op_err, obj_err, support_ok = 0.0, 0.0, True
    for x, d, z, y in dense_instances(20, 7):
        rows, cols = x.shape
        a = oracles.synthesis_matrix(d, rows, cols)
        op_err = max(op_err,
                     np.abs(convops.dict_forward(z, d).ravel() - a @ z.ravel()).max(),
                     np.abs(convops.dict_adjoint(y, d).ravel() - a.T @ y.ravel()).max())
        opts = csc.SolverOptions(lambda_sparsity=0.1, max_iters=100, fixed_iters=True)
        zs, trace = csc.solve(x, d, opts)
        zd = np.zeros(a.shape[1])
        for _ in range(opts.max_iters):
            zd = oracles.soft(zd - trace.gamma * (a.T @ (a @ zd - x.ravel())), trace.gamma * 0.1)
        obj_err = max(obj_err, abs(trace.objectives[-1] - oracles.lasso_objective(a, x.ravel(), zd, 0.1)))
        support_ok &= bool(np.array_equal(zs.ravel() != 0, zd != 0))
    elapsed = time.perf_counter() - t0
    ok = record("2 dense-operator oracle",
                op_err <= 1e-10 and obj_err <= 1e-8 and support_ok and elapsed < 60,
                f"operator error {op_err:.2e} (<= 1e-10), ISTA objective error {obj_err:.2e} "
                f"(<= 1e-8), supports equal {support_ok}, {elapsed:.1f} s (< 60 s)")
    assert ok


def test_3_ista_descent(record):
    rng = np.random.default_rng(3)
    worst = -np.inf
    for _ in range(100):
        x = rng.random((int(rng.integers(3, 10)), int(rng.integers(5, 16))))
        m, k = int(rng.integers(1, 5)), int(rng.choice([1, 3]))
        d = rng.standard_normal((m, k, k))
        opts = csc.SolverOptions(lambda_sparsity=float(rng.uniform(0, 0.5)), max_iters=100,
                                 fixed_iters=True)
        _, trace = csc.solve(x, d, opts)
        worst = max(worst, float(np.max(np.diff(trace.objectives))))
    x = rng.standard_normal((6, 9))
    z, _ = csc.solve(x, np.ones((1, 1, 1)), csc.SolverOptions(lambda_sparsity=0.4, step_gamma=1.0))
    exact = bool(np.array_equal(z[0], oracles.soft(x, 0.4)))
    ok = record("3 ISTA monotone descent", worst <= 1e-10 and exact,
                f"largest objective increase {worst:.2e} (<= 1e-10), delta-atom prox exact {exact}")
    assert ok


def test_4_gradient_suite(record):
    t0 = time.perf_counter()
    worst = selftest.gradient_suite(seed=4)
    arch = net.Architecture(m=4, theta=5, n=9, kernel_sizes=(3, 5), depth_min=-1.5, depth_max=1.5)
    params = net.init_params(arch, 5)
    x, y = np.random.default_rng(6).random((5, 9)), np.random.default_rng(7).random(4)
    probs, cache = net.forward(x, params)
    head_exact = bool(np.array_equal(net.backward(cache, y)["head.bias"], (probs - y) / 4))
    elapsed = time.perf_counter() - t0
    ok = record("4 gradient check", worst <= 1e-4 and head_exact and elapsed < 60,
                f"worst relative error {worst:.2e} (<= 1e-4), head-bias gradient exact "
                f"{head_exact}, {elapsed:.1f} s (< 60 s)")
    assert ok


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    t0 = time.perf_counter()
    result = desk.run(tmp_path_factory.mktemp("desk"))
    return result, time.perf_counter() - t0


@pytest.mark.slow
def test_5_desk_localization(desk_run, record):
    res, elapsed = desk_run
    rate = res.miss_rate_noiseless()
    checks = {
        "5a network z-RMSE": (res.net.rmse_z <= 1.0, f"{res.net.rmse_z:.3f} um (<= 1.0)"),
        "5b CSC z-RMSE": (res.csc.rmse_z <= 1.5, f"{res.csc.rmse_z:.3f} um (<= 1.5)"),
        "5c lateral x,y RMSE": (max(res.net.rmse_x, res.net.rmse_y) <= 0.6,
                                f"x {res.net.rmse_x:.3f} px, y {res.net.rmse_y:.3f} px (<= 0.6)"),
        "5d network miss+spurious, noiseless": (rate <= 0.02, f"{100 * rate:.2f}% (<= 2%)"),
        "5e desk runtime": (elapsed < 15 * 60, f"{elapsed:.0f} s (< 900 s)"),
    }
    for name, (ok, detail) in checks.items():
        record(name, ok, detail)
    order = res.ordering()
    # the method ordering is reported, not gated
    record("5f ordering network <= CSC (reported only)", True,
           f"net x/y/z {res.net.rmse_x:.3f}/{res.net.rmse_y:.3f}/{res.net.rmse_z:.3f}, "
           f"CSC {res.csc.rmse_x:.3f}/{res.csc.rmse_y:.3f}/{res.csc.rmse_z:.3f}, "
           + ", ".join(f"{k} {'holds' if v else 'reversed'}" for k, v in order.items()))
    failed = [name for name, (ok, _) in checks.items() if not ok]
    assert not failed, failed


@pytest.mark.slow
def test_6_timing(desk_run, record):
    res, _ = desk_run
    ok = record("6 inference speedup", res.speedup() >= 100 and res.seconds["bench"] < 300,
                f"cista-infer {res.bench[1].median_s * 1e3:.3f} ms vs csc-solve "
                f"{res.bench[0].median_s * 1e3:.1f} ms per EPI, {res.speedup():.0f}x (>= 100), "
                f"{res.seconds['bench']:.0f} s (< 300 s)")
    assert ok


@pytest.mark.slow
def test_7_convergence_shape(desk_run, record):
    res, _ = desk_run
    ratio = res.val_ratio()
    ma = res.train_loss_moving_average(5)
    monotone = bool(np.all(np.diff(ma) <= 0))
    ok = record("7 convergence shape", ratio < 0.5 and monotone,
                f"val loss epoch {len(res.training.val_loss)}/epoch 1 = {ratio:.3f} (< 0.5), "
                f"5-epoch moving average of training loss non-increasing {monotone}")
    assert ok


def test_8_determinism(tmp_path, record):
    def cli_run(argv):
        lines = []
        assert cli.cli_main([str(a) for a in argv], out=lines.append) == 0
        return lines

    optics = ["--theta", 19, "--n", 31, "--depth-min", -10, "--depth-max", 10, "--depth-count", 21]
    same = {}
    for run in ("a", "b"):
        cli_run(["gen-data", "--out", tmp_path / f"d{run}.bin", "--count", 64, "--seed", 8] + optics)
        cli_run(["train", "--data", tmp_path / f"d{run}.bin", "--out", tmp_path / f"m{run}.bin",
                 "--kernel-sizes", "3,5", "--epochs", 2, "--batch", 16, "--seed", 8,
                 "--single-thread"])
        same.setdefault("infer", []).append(
            cli_run(["infer", "--model", tmp_path / f"m{run}.bin", "--epi", tmp_path / f"d{run}.bin",
                     "--index", 5, "--threshold", 0.0]))
    results = {
        "gen-data": (tmp_path / "da.bin").read_bytes() == (tmp_path / "db.bin").read_bytes(),
        "train": (tmp_path / "ma.bin").read_bytes() == (tmp_path / "mb.bin").read_bytes()
        and (tmp_path / "ma.bin.csv").read_bytes() == (tmp_path / "mb.bin.csv").read_bytes(),
        "infer": same["infer"][0] == same["infer"][1],
    }
    ok = record("8 determinism", all(results.values()),
                ", ".join(f"{k} identical {v}" for k, v in results.items()))
    assert ok
