"""CPU hot loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``DEYNET_DISABLE_NUMBA`` is unset (or ``0``).  Both paths consume
the same pre-drawn random numbers, so their outputs are bit-identical.
Phantom rasterization stays on numpy: vectorized per ellipsoid it is
faster than the equivalent scalar loop.
"""

import os

import numpy as np

_DISABLE = os.environ.get("DEYNET_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _DISABLE:
        raise ImportError("numba disabled by DEYNET_DISABLE_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


# ---------------------------------------------------------------------------
# blind-spot neighbour selection
# ---------------------------------------------------------------------------


def neighbor_sources_numpy(coords, u, height, width, radius):
    """Map uniform draws ``u`` to in-bounds neighbours of ``coords``.

    For the pixel at ``coords[i]`` the candidate set is the clipped
    ``(2r+1) x (2r+1)`` window minus the centre, enumerated row-major;
    candidate ``floor(u[i] * count)`` is returned.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    rows, cols = coords[:, 0], coords[:, 1]
    rlo = np.maximum(rows - radius, 0)
    rhi = np.minimum(rows + radius, height - 1)
    clo = np.maximum(cols - radius, 0)
    chi = np.minimum(cols + radius, width - 1)
    ncols = chi - clo + 1
    count = (rhi - rlo + 1) * ncols - 1
    k = np.minimum((np.asarray(u, dtype=np.float64) * count).astype(np.int64), count - 1)
    centre = (rows - rlo) * ncols + (cols - clo)
    idx = k + (k >= centre)
    out = np.empty_like(coords)
    out[:, 0] = rlo + idx // ncols
    out[:, 1] = clo + idx % ncols
    return out


def render_organs_numpy(shape, centers, radii, intensities, background, edge):
    """Rasterize soft-edged ellipsoids into a (D, H, W) float64 volume.

    Returns ``(image, membership)`` where ``membership[k]`` is the soft
    occupancy of ellipsoid ``k`` (logistic in normalized radial distance).
    Later ellipsoids are painted over earlier ones.
    """
    d, h, w = shape
    z = np.arange(d, dtype=np.float64)[:, None, None]
    y = np.arange(h, dtype=np.float64)[None, :, None]
    x = np.arange(w, dtype=np.float64)[None, None, :]
    image = np.full(shape, background, dtype=np.float64)
    member = np.empty((len(centers),) + tuple(shape), dtype=np.float64)
    for k in range(len(centers)):
        rr = np.sqrt(
            ((z - centers[k, 0]) / radii[k, 0]) ** 2
            + ((y - centers[k, 1]) / radii[k, 1]) ** 2
            + ((x - centers[k, 2]) / radii[k, 2]) ** 2
        )
        m = 1.0 / (1.0 + np.exp((rr - 1.0) / edge))
        member[k] = m
        image = image * (1.0 - m) + intensities[k] * m
    return image, member


if HAS_NUMBA:

    @njit(cache=True)
    def _neighbor_sources_nb(coords, u, height, width, radius):
        n = coords.shape[0]
        out = np.empty((n, 2), dtype=np.int64)
        for i in range(n):
            r0 = coords[i, 0]
            c0 = coords[i, 1]
            rlo = max(r0 - radius, 0)
            rhi = min(r0 + radius, height - 1)
            clo = max(c0 - radius, 0)
            chi = min(c0 + radius, width - 1)
            ncols = chi - clo + 1
            count = (rhi - rlo + 1) * ncols - 1
            k = np.int64(u[i] * count)
            if k > count - 1:
                k = count - 1
            centre = (r0 - rlo) * ncols + (c0 - clo)
            if k >= centre:
                k += 1
            out[i, 0] = rlo + k // ncols
            out[i, 1] = clo + k % ncols
        return out

    def neighbor_sources(coords, u, height, width, radius):
        coords = np.ascontiguousarray(np.asarray(coords, dtype=np.int64).reshape(-1, 2))
        u = np.ascontiguousarray(u, dtype=np.float64)
        return _neighbor_sources_nb(coords, u, int(height), int(width), int(radius))

else:
    neighbor_sources = neighbor_sources_numpy

# whole-array numpy beats a scalar numba loop here (exp per voxel either way)
render_organs = render_organs_numpy


def backend():
    """Name of the active kernel backend: ``"numba"`` or ``"numpy"``."""
    return "numba" if HAS_NUMBA else "numpy"
