"""Pixel-level inner loops: face rasterization and separable image filtering.

Each kernel has a numba-compiled path and a pure-numpy path.  Both evaluate
the same IEEE operations in the same order, so the outputs are bit-identical;
the numba path only exists for speed.  Set ``TALKFACE_DISABLE_NUMBA=1`` to
force the numpy path (useful for debugging and for the benchmark).
"""

from __future__ import annotations

import logging
import os

import numpy as np

logger = logging.getLogger(__name__)

try:
    import numba

    njit = numba.njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(func):
            return func

        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return wrap


def numba_enabled() -> bool:
    return HAVE_NUMBA and os.environ.get("TALKFACE_DISABLE_NUMBA", "") in ("", "0")


# --------------------------------------------------------------------------
# ellipse rasterization


@njit(cache=True)
def _paint_ellipse_numba(img, cy, cx, a, b, cos_t, sin_t, color, opacity, r0, r1, c0, c1):
    inv_a2 = 1.0 / (a * a)
    inv_b2 = 1.0 / (b * b)
    for r in range(r0, r1):
        for c in range(c0, c1):
            py = r + 0.5 - cy
            px = c + 0.5 - cx
            u = px * cos_t + py * sin_t
            v = py * cos_t - px * sin_t
            q2 = u * u * inv_a2 + v * v * inv_b2
            q = np.sqrt(q2)
            gu = u * inv_a2
            gv = v * inv_b2
            g = np.sqrt(gu * gu + gv * gv)
            if q < 0.5:
                cov = 1.0
            else:
                sd = (q - 1.0) * q / g
                cov = 0.5 - sd
                if cov < 0.0:
                    cov = 0.0
                elif cov > 1.0:
                    cov = 1.0
            cov = cov * opacity
            if cov > 0.0:
                keep = 1.0 - cov
                for k in range(3):
                    img[r, c, k] = img[r, c, k] * keep + color[k] * cov


def _paint_ellipse_numpy(img, cy, cx, a, b, cos_t, sin_t, color, opacity, r0, r1, c0, c1):
    inv_a2 = 1.0 / (a * a)
    inv_b2 = 1.0 / (b * b)
    rr, cc = np.meshgrid(np.arange(r0, r1, dtype=np.float64), np.arange(c0, c1, dtype=np.float64), indexing="ij")
    py = rr + 0.5 - cy
    px = cc + 0.5 - cx
    u = px * cos_t + py * sin_t
    v = py * cos_t - px * sin_t
    q = np.sqrt(u * u * inv_a2 + v * v * inv_b2)
    gu = u * inv_a2
    gv = v * inv_b2
    g = np.sqrt(gu * gu + gv * gv)
    with np.errstate(divide="ignore", invalid="ignore"):
        sd = (q - 1.0) * q / g
    cov = np.where(q < 0.5, 1.0, np.clip(0.5 - sd, 0.0, 1.0)) * opacity
    mask = cov > 0.0
    keep = 1.0 - cov
    region = img[r0:r1, c0:c1]
    for k in range(3):
        chan = region[:, :, k]
        chan[mask] = chan[mask] * keep[mask] + color[k] * cov[mask]


def paint_ellipse(img: np.ndarray, center, axes, angle_rad: float, color, opacity: float = 1.0) -> None:
    """Alpha-composite an anti-aliased filled ellipse onto ``img`` in place.

    ``center`` is (row, col) in continuous pixel coordinates, ``axes`` the
    (horizontal, vertical) semi-axes before rotation.  Edge coverage comes
    from a first-order signed distance, so the summed coverage tracks the
    analytic area closely.  ``opacity`` scales the coverage.
    """
    cy, cx = float(center[0]), float(center[1])
    a, b = float(axes[0]), float(axes[1])
    h, w = img.shape[:2]
    ext = max(a, b) + 2.0
    r0, r1 = max(int(np.floor(cy - ext)), 0), min(int(np.ceil(cy + ext)) + 1, h)
    c0, c1 = max(int(np.floor(cx - ext)), 0), min(int(np.ceil(cx + ext)) + 1, w)
    if r0 >= r1 or c0 >= c1:
        return
    color = np.asarray(color, dtype=np.float64)
    args = (img, cy, cx, a, b, float(np.cos(angle_rad)), float(np.sin(angle_rad)), color, float(opacity), r0, r1, c0, c1)
    if numba_enabled():
        _paint_ellipse_numba(*args)
    else:
        _paint_ellipse_numpy(*args)


# --------------------------------------------------------------------------
# separable filtering with half-sample symmetric boundary


@njit(cache=True)
def _filter_rows_numba(src, taps, out):
    h, w = src.shape
    n = taps.shape[0]
    half = n // 2
    for r in range(h):
        for c in range(w):
            acc = 0.0
            for k in range(n):
                j = c + k - half
                # symmetric reflection: ... 1 0 | 0 1 2 ... w-1 | w-1 w-2 ...
                while j < 0 or j >= w:
                    if j < 0:
                        j = -j - 1
                    if j >= w:
                        j = 2 * w - j - 1
                acc += taps[k] * src[r, j]
            out[r, c] = acc


def _reflect_index(n: int, half: int, size: int) -> np.ndarray:
    j = np.arange(-half, size + n - half - 1)
    for _ in range(4 + (n // max(size, 1))):
        j = np.where(j < 0, -j - 1, j)
        j = np.where(j >= size, 2 * size - j - 1, j)
    return j


def _filter_rows_numpy(src, taps, out):
    h, w = src.shape
    n = taps.shape[0]
    half = n // 2
    padded = src[:, _reflect_index(n, half, w)]
    acc = np.zeros((h, w), dtype=np.float64)
    for k in range(n):
        acc = acc + taps[k] * padded[:, k : k + w]
    out[:, :] = acc


def separable_filter(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Correlate a 2-D float64 image with ``taps`` along both axes.

    Boundary handling is half-sample symmetric (scipy.ndimage "reflect").
    Rows are filtered first, then columns.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    taps = np.ascontiguousarray(taps, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    kernel = _filter_rows_numba if numba_enabled() else _filter_rows_numpy
    tmp = np.empty_like(img)
    kernel(img, taps, tmp)
    tmp_t = np.ascontiguousarray(tmp.T)
    out_t = np.empty_like(tmp_t)
    kernel(tmp_t, taps, out_t)
    return np.ascontiguousarray(out_t.T)
