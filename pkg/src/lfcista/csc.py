"""Convolutional sparse coding of an EPI by proximal-gradient (ISTA) iterations.

Minimizes ``0.5 * ||x - sum_m d_m * z_m||_F^2 + lam * sum_m ||z_m||_1`` over the
code stack ``z`` of shape ``(M, rows, cols)``.
"""
from dataclasses import dataclass, field

import numpy as np

from . import convops
from .errors import DegenerateProblemError, DimensionError


@dataclass
class SolverOptions:
    lambda_sparsity: float = 0.1
    max_iters: int = 200
    rel_tol: float = 1e-6
    step_gamma: object = "auto"
    # run exactly max_iters steps; used for timing
    fixed_iters: bool = False
    lipschitz_tol: float = 1e-6
    lipschitz_iters: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.lambda_sparsity < 0:
            raise ValueError("lambda_sparsity must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if self.step_gamma != "auto" and not float(self.step_gamma) > 0:
            raise ValueError("step_gamma must be 'auto' or a positive number")


@dataclass
class SolveTrace:
    objectives: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    gamma: float = 0.0
    lipschitz: float = float("nan")


def _atoms(d):
    return d.atoms if hasattr(d, "atoms") else np.asarray(d, dtype=np.float64)


def _check_shapes(x, atoms, z=None):
    if x.ndim != 2:
        raise DimensionError(f"EPI must be 2-D, got shape {x.shape}")
    if atoms.ndim != 3:
        raise DimensionError("dictionary must be (M, theta, n)")
    if z is not None and z.shape != (atoms.shape[0],) + x.shape:
        raise DimensionError(f"codes {z.shape} do not match EPI {x.shape} and {atoms.shape[0]} atoms")


def _synthesize(z, atoms):
    return convops.conv_batch(z[None], atoms)[0].sum(axis=0)


def _analyze(y, atoms):
    return convops.corr_batch(y[None, None], atoms)[0]


def objective(x, d, z, lam):
    """Data fidelity plus l1 penalty of codes ``z`` for EPI ``x``."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    atoms = _atoms(d)
    _check_shapes(x, atoms, z)
    r = x - convops.dict_forward(z, atoms)
    return 0.5 * float(np.vdot(r, r)) + lam * float(np.abs(z).sum())


def ista_step(z, x, d, gamma, lam):
    """One proximal-gradient step ``T_{gamma*lam}(z - gamma * A^T (A z - x))``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    atoms = _atoms(d)
    _check_shapes(x, atoms, z)
    convops._check_kernel(atoms.shape[1:], x.shape)
    return _step(z, _synthesize(z, atoms), x, atoms, gamma, lam)[0]


def _step(z, az, x, atoms, gamma, lam):
    """ISTA step from codes ``z`` with synthesis ``az``; returns new codes, synthesis, objective."""
    grad = _analyze(az - x, atoms)
    z_new = convops.soft_threshold(z - gamma * grad, gamma * lam)
    az_new = _synthesize(z_new, atoms)
    r = x - az_new
    f = 0.5 * float(np.vdot(r, r)) + lam * float(np.abs(z_new).sum())
    return z_new, az_new, f


def solve(x, d, opts=None):
    """Run ISTA from ``z = 0`` until the relative objective decrease drops below ``rel_tol``.

    The step size is ``0.99 / L`` for ``step_gamma='auto'``, with ``L`` the
    power-iteration estimate of the Gram operator's largest eigenvalue.

    Returns:
        ``(z, trace)``; ``trace.objectives[0]`` is the objective at ``z = 0``.

    Raises:
        DegenerateProblemError: if the dictionary has a zero Gram operator.
    """
    opts = opts or SolverOptions()
    x = np.asarray(x, dtype=np.float64)
    atoms = _atoms(d)
    _check_shapes(x, atoms)
    convops._check_kernel(atoms.shape[1:], x.shape)
    lam = opts.lambda_sparsity

    trace = SolveTrace()
    if opts.step_gamma == "auto":
        lip = convops.estimate_lipschitz(atoms, x.shape, opts.lipschitz_tol,
                                         opts.lipschitz_iters, opts.seed)
        if lip <= 0:
            raise DegenerateProblemError("dictionary Gram operator is zero; no step size exists")
        trace.lipschitz = lip
        gamma = 0.99 / lip
    else:
        gamma = float(opts.step_gamma)
    trace.gamma = gamma

    z = np.zeros((atoms.shape[0],) + x.shape)
    az = np.zeros_like(x)
    f = 0.5 * float(np.vdot(x, x))
    trace.objectives.append(f)
    for it in range(1, opts.max_iters + 1):
        z, az, f_new = _step(z, az, x, atoms, gamma, lam)
        trace.objectives.append(f_new)
        trace.iterations = it
        if not np.isfinite(f_new):
            raise DegenerateProblemError(f"objective became non-finite at iteration {it}")
        decrease = (f - f_new) / max(abs(f), np.finfo(float).tiny)
        f = f_new
        if not opts.fixed_iters and decrease < opts.rel_tol:
            trace.converged = True
            break
    return z, trace


def code_evidence(z):
    """Per-atom depth evidence: the global maximum of each code channel."""
    return convops.global_max_pool(z)[0]
