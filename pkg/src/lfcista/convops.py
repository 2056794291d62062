"""Zero-padded "same" correlation/convolution primitives and their adjoints.

A *matrix* is a 2-D float array ``(rows, cols)``; a *channel stack* is a 3-D
array ``(channels, rows, cols)``.  Convolution is defined as correlation with
the kernel flipped along both axes, and all operators keep the shape of the
signal they act on.  Arithmetic is carried out in float64 regardless of the
input dtype.

The batched helpers (``*_batch``) skip validation and are meant for the hot
loops of the solver and the network.
"""
import warnings

import numpy as np

from . import _kernels
from .errors import (
    DegenerateOperatorWarning,
    DimensionError,
    InvalidKernelError,
    InvalidThresholdError,
)

__all__ = [
    "corr2_same",
    "conv2_same",
    "dict_forward",
    "dict_adjoint",
    "depthwise_corr",
    "depthwise_conv",
    "estimate_lipschitz",
    "soft_threshold",
    "global_max_pool",
]


def _as_matrix(x, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def _as_stack(z, name="z"):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3 or min(z.shape) < 1:
        raise DimensionError(f"{name} must be a non-empty (channels, rows, cols) array, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError(f"{name} contains non-finite values")
    return z


def _check_kernel(kshape, xshape):
    kr, kc = kshape
    if kr % 2 == 0 or kc % 2 == 0:
        raise InvalidKernelError(f"kernel dimensions must be odd, got {kshape}")
    if kr > xshape[0] or kc > xshape[1]:
        raise InvalidKernelError(f"kernel {kshape} is larger than signal {xshape}")


def _pad_flat(x, kr, kc):
    """Pad for a ``kr x kc`` same correlation and flatten each plane.

    One extra zero row keeps the scratch columns of the last output row in
    bounds.  Returns ``(flat, padded_cols)``.
    """
    hr, hc = kr // 2, kc // 2
    nb, nm, nr, nc = x.shape
    xp = np.zeros((nb, nm, nr + 2 * hr + 1, nc + 2 * hc))
    xp[:, :, hr:hr + nr, hc:hc + nc] = x
    return xp.reshape(nb, nm, -1), nc + 2 * hc


def corr_batch(x, k):
    """Depthwise same correlation of ``x`` (B, M|1, R, C) with kernels ``k`` (M, kr, kc).

    A singleton channel axis in ``x`` is broadcast against the M kernels.
    """
    nb, _, nr, nc = x.shape
    nm, kr, kc = k.shape
    xpf, cp = _pad_flat(x, kr, kc)
    out = np.zeros((nb, nm, nr * cp))
    _kernels.corr_flat(xpf, np.ascontiguousarray(k, dtype=np.float64), out, cp)
    return out.reshape(nb, nm, nr, cp)[..., :nc]


def conv_batch(x, k):
    """Depthwise same convolution; the adjoint of :func:`corr_batch` per channel."""
    return corr_batch(x, k[:, ::-1, ::-1])


def kernel_grad_batch(g, x, kr, kc):
    """Gradient of ``<g, corr_batch(x, k)>`` with respect to ``k``, summed over the batch."""
    nb, nm, nr, nc = g.shape
    xpf, cp = _pad_flat(x, kr, kc)
    gext = np.zeros((nb, nm, nr, cp))
    gext[..., :nc] = g
    return _kernels.kernel_grad_flat(gext.reshape(nb, nm, -1), xpf, kr, kc, cp)


def corr2_same(x, k):
    """Same-size 2-D cross-correlation with zero padding.

    ``out[i, j] = sum_{a, b} x[i + a - kr//2, j + b - kc//2] * k[a, b]``.

    Raises:
        InvalidKernelError: if a kernel dimension is even or exceeds the signal.
    """
    x = _as_matrix(x)
    k = _as_matrix(k, "k")
    _check_kernel(k.shape, x.shape)
    return corr_batch(x[None, None], k[None])[0, 0]


def conv2_same(x, k):
    """Same-size 2-D convolution: :func:`corr2_same` with the kernel rotated 180 degrees."""
    k = _as_matrix(k, "k")
    return corr2_same(x, k[::-1, ::-1])


def _check_dictionary(zshape, d):
    _check_kernel(d.shape[1:], zshape)


def dict_forward(z, d):
    """Synthesize a matrix from codes: ``sum_m conv2_same(z[m], d[m])``."""
    z = _as_stack(z)
    d = _as_stack(d, "d")
    if z.shape[0] != d.shape[0]:
        raise DimensionError(f"code stack has {z.shape[0]} channels, dictionary has {d.shape[0]}")
    _check_dictionary(z.shape[1:], d)
    return conv_batch(z[None], d)[0].sum(axis=0)


def dict_adjoint(y, d):
    """Adjoint of :func:`dict_forward`: channel m is ``corr2_same(y, d[m])``."""
    y = _as_matrix(y, "y")
    d = _as_stack(d, "d")
    _check_dictionary(y.shape, d)
    return corr_batch(y[None, None], d)[0]


def depthwise_corr(z, s):
    """Per-channel correlation ``out[m] = corr2_same(z[m], s[m])``; channels never mix."""
    z = _as_stack(z)
    s = _as_stack(s, "s")
    if z.shape[0] != s.shape[0]:
        raise DimensionError(f"stack has {z.shape[0]} channels, filters have {s.shape[0]}")
    _check_kernel(s.shape[1:], z.shape[1:])
    return corr_batch(z[None], s)[0]


def depthwise_conv(z, s):
    """Adjoint of :func:`depthwise_corr` in its signal argument."""
    s = _as_stack(s, "s")
    return depthwise_corr(z, s[:, ::-1, ::-1])


def gram_apply(z, d):
    """Apply the Gram operator ``A^T A`` of the dictionary synthesis map to codes ``z``."""
    y = conv_batch(z[None], d)[0].sum(axis=0)
    return corr_batch(y[None, None], d)[0]


def estimate_lipschitz(d, shape, tol=1e-6, max_iters=100, seed=0):
    """Largest eigenvalue of ``z -> dict_adjoint(dict_forward(z, d), d)`` by power iteration.

    Iteration stops once the Rayleigh quotient changes by less than ``tol``
    relative to its current value, or after ``max_iters`` products.

    Args:
        d: dictionary stack ``(M, theta, n)``.
        shape: ``(rows, cols)`` of the signal the codes live on.
        tol: relative stopping tolerance, > 0.
        max_iters: maximum number of Gram products, >= 1.
        seed: seed of the random starting vector.

    Returns:
        The eigenvalue estimate ``L >= 0``.  An all-zero dictionary yields
        0.0 and a :class:`DegenerateOperatorWarning`.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    d = _as_stack(d, "d")
    rows, cols = shape
    _check_dictionary((rows, cols), d)
    if not np.any(d):
        warnings.warn("dictionary is identically zero; Lipschitz constant is 0",
                      DegenerateOperatorWarning, stacklevel=2)
        return 0.0

    rng = np.random.default_rng(seed)
    z = rng.standard_normal((d.shape[0], rows, cols))
    z /= np.linalg.norm(z)
    rq = 0.0
    for _ in range(max_iters):
        g = gram_apply(z, d)
        rq_new = float(np.vdot(z, g))
        gnorm = np.linalg.norm(g)
        if gnorm == 0.0:
            return 0.0
        z = g / gnorm
        if rq_new > 0 and abs(rq_new - rq) < tol * rq_new:
            rq = rq_new
            break
        rq = rq_new
    return max(rq, 0.0)


def soft_threshold(x, t):
    """Elementwise ``sign(x) * max(|x| - t, 0)``; works on scalars and arrays."""
    if np.any(np.asarray(t) < 0):
        raise InvalidThresholdError(f"threshold must be non-negative, got {t}")
    out = np.sign(x) * np.maximum(np.abs(x) - t, 0.0)
    if np.ndim(out) == 0:
        return float(out)
    return out


def global_max_pool(z):
    """Per-channel maximum of a stack and the first row-major position attaining it.

    Returns:
        ``(values, positions)`` where ``values`` has length M and
        ``positions[m]`` is a ``(row, col)`` tuple.
    """
    z = _as_stack(z)
    flat = z.reshape(z.shape[0], -1)
    idx = np.argmax(flat, axis=1)
    values = flat[np.arange(z.shape[0]), idx]
    positions = [tuple(int(v) for v in np.unravel_index(i, z.shape[1:])) for i in idx]
    return values, positions
