"""Backward bilinear warping with exact partial derivatives.

Queries outside ``[0, W-1] x [0, H-1]`` are clamped to the border and flagged
through ``in_bounds``; the derivative along a clamped axis is zero. At cell
boundaries the derivative is the right-sided limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SampleResult:
    value: np.ndarray
    d_dx: np.ndarray
    d_dy: np.ndarray
    in_bounds: np.ndarray
    # interpolation cell, kept for the adjoint and for kink detection
    x0: np.ndarray
    y0: np.ndarray
    tx: np.ndarray
    ty: np.ndarray


def _cell(q, n):
    qc = np.clip(q, 0.0, n - 1)
    i0 = np.floor(qc).astype(np.intp)
    i0 = np.minimum(i0, max(n - 2, 0))
    t = qc - i0
    if n == 1:
        t = np.zeros_like(qc)
    live = (q >= 0) & (q < n - 1)
    return i0, t, live


def sample_bilinear(img, x, y, batched: bool = False) -> SampleResult:
    """Sample ``img`` (``(H, W)`` or ``(C, H, W)``) at real coordinates ``(x, y)``.

    ``x`` and ``y`` may be scalars or equally-shaped arrays; the value and
    derivatives carry a leading channel axis when ``img`` does. With
    ``batched=True`` the source has a batch axis (``(B, H, W)`` or
    ``(C, B, H, W)``) matched against the first axis of ``(B, H, W)`` coordinates.
    """
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == (3 if batched else 2)
    if squeeze:
        img = img[None]
    h, w = img.shape[-2:]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x, y = np.broadcast_arrays(x, y)

    x0, tx, live_x = _cell(x, w)
    y0, ty, live_y = _cell(y, h)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    if batched:
        b = np.arange(img.shape[1]).reshape((-1,) + (1,) * (x.ndim - 1))
        i00, i01 = img[:, b, y0, x0], img[:, b, y0, x1]
        i10, i11 = img[:, b, y1, x0], img[:, b, y1, x1]
    else:
        i00, i01 = img[:, y0, x0], img[:, y0, x1]
        i10, i11 = img[:, y1, x0], img[:, y1, x1]
    value = ((1 - tx) * (1 - ty) * i00 + tx * (1 - ty) * i01
             + (1 - tx) * ty * i10 + tx * ty * i11)
    d_dx = ((1 - ty) * (i01 - i00) + ty * (i11 - i10)) * live_x
    d_dy = ((1 - tx) * (i10 - i00) + tx * (i11 - i01)) * live_y
    in_bounds = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    if squeeze:
        value, d_dx, d_dy = value[0], d_dx[0], d_dy[0]
    return SampleResult(value, d_dx, d_dy, in_bounds, x0, y0, tx, ty)


def sample_bilinear_adjoint(grad_value: np.ndarray, res: SampleResult, shape) -> np.ndarray:
    """Scatter ``grad_value`` (one value per query) back onto an ``(H, W)`` grid.

    Transpose of the map image -> sampled values for fixed query points.
    """
    h, w = shape
    x1 = np.minimum(res.x0 + 1, w - 1)
    y1 = np.minimum(res.y0 + 1, h - 1)
    g = np.asarray(grad_value, dtype=np.float64)
    tx, ty = res.tx, res.ty
    idx = np.concatenate([(res.y0 * w + res.x0).ravel(), (res.y0 * w + x1).ravel(),
                          (y1 * w + res.x0).ravel(), (y1 * w + x1).ravel()])
    wts = np.concatenate([((1 - tx) * (1 - ty) * g).ravel(), (tx * (1 - ty) * g).ravel(),
                          ((1 - tx) * ty * g).ravel(), (tx * ty * g).ravel()])
    return np.bincount(idx, weights=wts, minlength=h * w).reshape(h, w)


def pixel_grid(h: int, w: int):
    xs = np.broadcast_to(np.arange(w, dtype=np.float64), (h, w))
    ys = np.broadcast_to(np.arange(h, dtype=np.float64)[:, None], (h, w))
    return xs, ys


def stereo_sample(src_right, d) -> SampleResult:
    """Sample the right view at ``(x - d, y)``; ``d`` may carry leading batch axes."""
    d = np.asarray(d, dtype=np.float64)
    xs, ys = pixel_grid(*d.shape[-2:])
    return sample_bilinear(src_right, xs - d, np.broadcast_to(ys, d.shape))


def flow_sample(src, flow, batched: bool = False) -> SampleResult:
    """Sample ``src`` at ``p + flow(p)``; ``flow`` is ``(2, ..., H, W)``."""
    flow = np.asarray(flow, dtype=np.float64)
    xs, ys = pixel_grid(*flow.shape[-2:])
    return sample_bilinear(src, xs + flow[0], ys + flow[1], batched=batched)


def warp_stereo(src_right, d):
    """Warp the right view into the left: ``out(p) = R(p_x - d(p), p_y)``."""
    res = stereo_sample(src_right, d)
    return res.value, res.in_bounds


def warp_temporal(src, flow):
    """Warp the second frame into the first: ``out(p) = src(p + F(p))``."""
    res = flow_sample(src, flow)
    return res.value, res.in_bounds


def warp_scalar_by_flow(field, flow):
    """Same as :func:`warp_temporal` for non-image maps (disparity, backward flow)."""
    return warp_temporal(field, flow)
