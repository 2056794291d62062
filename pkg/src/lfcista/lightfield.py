"""4-D light-field slicing and lateral source detection.

Light fields are arrays indexed ``[u, v, x, y]`` with odd angular sizes so a
central sub-aperture view exists.
"""
from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, DimensionError, NoCentralViewError


@dataclass(frozen=True)
class LateralDetection:
    x: int
    y: int
    intensity: float


def _as_lightfield(lf):
    lf = np.asarray(lf, dtype=np.float64)
    if lf.ndim != 4 or min(lf.shape) < 1:
        raise DimensionError(f"light field must be a non-empty [u, v, x, y] array, got {lf.shape}")
    return lf


def central_view(lf):
    """The ``n_x x n_y`` sub-aperture image at the central angular sample."""
    lf = _as_lightfield(lf)
    tu, tv = lf.shape[:2]
    if tu % 2 == 0 or tv % 2 == 0:
        raise NoCentralViewError(f"angular dimensions {tu}x{tv} have no central view")
    return lf[(tu - 1) // 2, (tv - 1) // 2].copy()


def extract_epi(lf, y_row, v):
    """EPI ``out[u, x] = lf[u, v, x, y_row]`` of shape ``(theta_u, n_x)``."""
    lf = _as_lightfield(lf)
    if not 0 <= v < lf.shape[1]:
        raise BoundsError(f"angular index v={v} outside [0, {lf.shape[1]})")
    if not 0 <= y_row < lf.shape[3]:
        raise BoundsError(f"row y={y_row} outside [0, {lf.shape[3]})")
    return lf[:, v, :, y_row].copy()


def embed_epi(lf, epi, y_row, v):
    """Write ``epi`` into a copy of ``lf`` at ``(v, y_row)``; inverse of :func:`extract_epi`."""
    lf = _as_lightfield(lf).copy()
    epi = np.asarray(epi, dtype=np.float64)
    if epi.shape != (lf.shape[0], lf.shape[2]):
        raise DimensionError(f"EPI shape {epi.shape} does not match light field {lf.shape}")
    if not (0 <= v < lf.shape[1] and 0 <= y_row < lf.shape[3]):
        raise BoundsError(f"slice (v={v}, y={y_row}) out of range")
    lf[:, v, :, y_row] = epi
    return lf


def _local_maxima_2d(view):
    """Boolean mask of pixels not smaller than any of their 8 neighbours."""
    padded = np.pad(view, 1, constant_values=-np.inf)
    mask = np.ones(view.shape, dtype=bool)
    r, c = view.shape
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            mask &= view >= padded[1 + di:1 + di + r, 1 + dj:1 + dj + c]
    return mask


def detect_lateral(view, threshold, min_separation=3):
    """Find bright point sources in a 2-D view.

    Candidates are 8-neighbourhood local maxima with intensity above
    ``threshold``.  They are accepted greedily from brightest to dimmest and a
    candidate is dropped when it lies within Chebyshev distance
    ``< min_separation`` of an accepted detection.

    Returns:
        A list of :class:`LateralDetection`, brightest first.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    if min_separation < 1:
        raise ValueError("min_separation must be >= 1")
    view = np.asarray(view, dtype=np.float64)
    if view.ndim != 2:
        raise DimensionError("view must be 2-D")
    cand = np.argwhere(_local_maxima_2d(view) & (view > threshold))
    if cand.size == 0:
        return []
    vals = view[cand[:, 0], cand[:, 1]]
    # stable sort: equal intensities keep row-major order
    order = np.argsort(-vals, kind="stable")
    accepted = []
    for k in order:
        i, j = int(cand[k, 0]), int(cand[k, 1])
        if all(max(abs(i - d.x), abs(j - d.y)) >= min_separation for d in accepted):
            accepted.append(LateralDetection(i, j, float(vals[k])))
    return accepted
