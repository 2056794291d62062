"""Compiled direct-correlation loops.

Planes are stored flattened on a padded grid: a ``rows x cols`` signal padded
to ``rows_p x cp`` columns becomes a 1-D run, and output pixel ``(i, j)`` lives
at ``i * cp + j``.  Shifting by kernel tap ``(a, c)`` is then a constant offset
``a * cp + c``, so every inner loop is a long contiguous axpy or dot product.
Columns ``j >= cols`` of the output run are scratch and get cropped.

A single input channel is broadcast against all kernel channels.  Loop order
is fixed, so results are reproducible run to run.
"""
import numba
import numpy as np


@numba.njit(cache=True, fastmath=True)
def corr_flat(xpf, k, out, cp):
    """out[b, m, p] += sum_{a, c} k[m, a, c] * xpf[b, m', p + a*cp + c]."""
    nb, nm, length = out.shape
    kr, kc = k.shape[1], k.shape[2]
    single = xpf.shape[1] == 1
    for b in range(nb):
        for m in range(nm):
            o = out[b, m]
            x = xpf[b, 0] if single else xpf[b, m]
            for a in range(kr):
                for c in range(kc):
                    w = k[m, a, c]
                    if w == 0.0:
                        continue
                    off = a * cp + c
                    xs = x[off:off + length]
                    for p in range(length):
                        o[p] += w * xs[p]
    return out


@numba.njit(cache=True, fastmath=True)
def kernel_grad_flat(g, xpf, kr, kc, cp):
    """dk[m, a, c] = sum_{b, p} g[b, m, p] * xpf[b, m', p + a*cp + c], batch reduced in order."""
    nb, nm, length = g.shape
    single = xpf.shape[1] == 1
    dk = np.zeros((nm, kr, kc))
    for b in range(nb):
        for m in range(nm):
            gg = g[b, m]
            x = xpf[b, 0] if single else xpf[b, m]
            for a in range(kr):
                for c in range(kc):
                    off = a * cp + c
                    xs = x[off:off + length]
                    acc = 0.0
                    for p in range(length):
                        acc += gg[p] * xs[p]
                    dk[m, a, c] += acc
    return dk
