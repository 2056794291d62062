"""Quick numerical self-checks run by ``lfcista selftest``."""
import numpy as np

from . import convops, csc, net


def adjoint_suite(trials=200, seed=0):
    """Worst relative adjoint-identity error of dict_forward/dict_adjoint over random triples."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        m = int(rng.integers(1, 5))
        rows, cols = int(rng.integers(3, 12)), int(rng.integers(3, 12))
        kr = int(rng.choice(np.arange(1, rows + 1, 2)))
        kc = int(rng.choice(np.arange(1, cols + 1, 2)))
        z = rng.standard_normal((m, rows, cols))
        y = rng.standard_normal((rows, cols))
        d = rng.standard_normal((m, kr, kc))
        lhs = np.vdot(convops.dict_forward(z, d), y)
        rhs = np.vdot(z, convops.dict_adjoint(y, d))
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(z) * np.linalg.norm(y)))
    return worst


def gradient_suite(seed=0, h=1e-5):
    """Worst per-tensor relative error between backprop and central differences."""
    arch = net.Architecture(m=4, theta=5, n=9, kernel_sizes=(3, 5), depth_min=-1.5, depth_max=1.5)
    params = net.init_params(arch, seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.random((5, 9))
    y = rng.random(4)
    _, cache = net.forward(x, params)
    grads = net.backward(cache, y)
    worst = 0.0
    for name, arr in params.tensors().items():
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = net.bce_loss(net.forward(x, params)[1].logits, y[None])
            arr[idx] = old - h
            lm = net.bce_loss(net.forward(x, params)[1].logits, y[None])
            arr[idx] = old
            fd[idx] = (lp - lm) / (2 * h)
        g = grads[name]
        rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-8)
        worst = max(worst, float(rel.max()))
    return worst


def descent_suite(instances=10, seed=0, iters=50):
    """Largest objective increase observed between consecutive ISTA iterations."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(instances):
        x = rng.random((7, 11))
        d = rng.standard_normal((3, 3, 5))
        _, trace = csc.solve(x, d, csc.SolverOptions(lambda_sparsity=0.1, max_iters=iters,
                                                     fixed_iters=True))
        worst = max(worst, float(np.max(np.diff(trace.objectives))))
    return worst


def run(seed=0, out=print):
    """Run every suite, print one line each, return True when all pass."""
    suites = [
        ("adjoint", adjoint_suite(seed=seed), 1e-10),
        ("gradient", gradient_suite(seed=seed), 1e-4),
        ("ista-descent", descent_suite(seed=seed), 1e-10),
    ]
    ok = True
    for name, value, tol in suites:
        passed = value <= tol
        ok &= passed
        out(f"{name}: {'PASS' if passed else 'FAIL'} (worst {value:.3e}, tolerance {tol:.0e})")
    return ok
