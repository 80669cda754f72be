"""Classical block-matching stand-in for the feed-forward disparity and flow networks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from sfrefine.consistency import box_filter
from sfrefine.fields import SceneFlowState, StereoClip, as_image
from sfrefine.warp import flow_sample


@dataclass(frozen=True)
class InitConfig:
    max_disp: int = 32
    patch: int = 13
    flow_radius: int = 6
    pyramid_levels: int = 1
    dchange_range: float = 8.0


def _sad_cost(a: np.ndarray, b_shifted: np.ndarray, patch: int) -> np.ndarray:
    return box_filter(np.abs(a - b_shifted).mean(axis=0), patch)


def _parabola(c_m, c_0, c_p):
    """Vertex offset of the parabola through three costs, limited to [-0.5, 0.5]."""
    denom = c_m - 2.0 * c_0 + c_p
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(denom > 0, 0.5 * (c_m - c_p) / denom, 0.0)
    off = np.where(np.isfinite(c_m) & np.isfinite(c_p), off, 0.0)
    return np.clip(off, -0.5, 0.5)


def block_match_disparity(l, r, max_disp: int = 32, patch: int = 9) -> np.ndarray:
    """Integer SAD search over d in [0, max_disp] with ``l(p) ~ r(p - d)``, then parabolic sub-pixel.

    Candidates reaching past the left border of ``r`` are excluded; ties go to
    the smallest disparity.
    """
    l, r = as_image(l), as_image(r)
    _, h, w = l.shape
    max_disp = int(max(max_disp, 0))
    costs = np.full((max_disp + 1, h, w), np.inf)
    cols = np.arange(w)
    for d in range(max_disp + 1):
        shifted = np.empty_like(r)
        shifted[..., d:] = r[..., :w - d]
        shifted[..., :d] = r[..., :1]
        c = _sad_cost(l, shifted, patch)
        c[:, cols < d] = np.inf
        costs[d] = c
    best = np.argmin(costs, axis=0)  # first minimum -> smallest d
    if max_disp == 0:
        return np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    c0 = costs[best, yy, xx]
    cm = np.where(best > 0, costs[np.maximum(best - 1, 0), yy, xx], np.inf)
    cp = np.where(best < max_disp, costs[np.minimum(best + 1, max_disp), yy, xx], np.inf)
    # a zero-cost match is exact; the V-shaped SAD would bias a parabola fit
    return best + np.where(c0 > 0, _parabola(cm, c0, cp), 0.0)


def _match_flow_level(a, b, radius, patch, init=None):
    _, h, w = a.shape
    if init is None:
        init = np.zeros((2, h, w))
    base = np.round(init).astype(int)
    # search a residual window around the integer prior
    ys, xs = np.mgrid[0:h, 0:w]
    n = 2 * radius + 1
    costs = np.full((n, n, h, w), np.inf)
    for iy, dy in enumerate(range(-radius, radius + 1)):
        for ix, dx in enumerate(range(-radius, radius + 1)):
            tx = xs + base[0] + dx
            ty = ys + base[1] + dy
            c = _sad_cost(a, b[:, np.clip(ty, 0, h - 1), np.clip(tx, 0, w - 1)], patch)
            c[(tx < 0) | (tx > w - 1) | (ty < 0) | (ty > h - 1)] = np.inf
            costs[iy, ix] = c
    flat = costs.reshape(n * n, h, w)
    all_inf = ~np.isfinite(flat).any(axis=0)
    # row-major over (dy, dx): first minimum is the lexicographically smallest (dy, dx)
    k = np.argmin(flat, axis=0)
    iy, ix = np.divmod(k, n)
    yy, xx = np.mgrid[0:h, 0:w]

    def at(jy, jx):
        ok = (jy >= 0) & (jy < n) & (jx >= 0) & (jx < n)
        return np.where(ok, costs[np.clip(jy, 0, n - 1), np.clip(jx, 0, n - 1), yy, xx], np.inf)

    c0 = costs[iy, ix, yy, xx]
    cxm, cxp = at(iy, ix - 1), at(iy, ix + 1)
    cym, cyp = at(iy - 1, ix), at(iy + 1, ix)
    ox = _parabola(cxm, c0, cxp)
    oy = _parabola(cym, c0, cyp)
    # joint paraboloid through the 3x3 neighbourhood where it is convex
    gx, gy = 0.5 * (cxp - cxm), 0.5 * (cyp - cym)
    hxx, hyy = cxp - 2 * c0 + cxm, cyp - 2 * c0 + cym
    with np.errstate(invalid="ignore", divide="ignore"):
        hxy = 0.25 * (at(iy + 1, ix + 1) - at(iy + 1, ix - 1)
                      - at(iy - 1, ix + 1) + at(iy - 1, ix - 1))
        det = hxx * hyy - hxy ** 2
        jx = -(hyy * gx - hxy * gy) / det
        jy = -(hxx * gy - hxy * gx) / det
    joint = np.isfinite(det) & (det > 0) & (hxx > 0) & np.isfinite(jx) & np.isfinite(jy)
    ox = np.where(joint, np.clip(jx, -0.5, 0.5), ox)
    oy = np.where(joint, np.clip(jy, -0.5, 0.5), oy)
    exact = c0 == 0
    ox, oy = np.where(exact, 0.0, ox), np.where(exact, 0.0, oy)
    flow = np.stack([base[0] + ix - radius + ox, base[1] + iy - radius + oy]).astype(np.float64)
    flow[:, all_inf] = init[:, all_inf]
    return flow


def _downsample(img):
    _, h, w = img.shape
    h2, w2 = h // 2, w // 2
    return img[:, :2 * h2, :2 * w2].reshape(img.shape[0], h2, 2, w2, 2).mean(axis=(2, 4))


def block_match_flow(a, b, radius: int = 6, patch: int = 9, levels: int = 1) -> np.ndarray:
    """Flow from ``a`` to ``b`` by 2-d SAD search with parabolic sub-pixel refinement.

    With ``levels > 1`` the search runs coarse-to-fine on a 2x pyramid, each
    level doubling the effective search radius.
    """
    if radius < 1:
        raise ValueError("flow search radius must be >= 1")
    a, b = as_image(a), as_image(b)
    pyr = [(a, b)]
    for _ in range(levels - 1):
        pa, pb = pyr[-1]
        if min(pa.shape[1:]) < 2 * patch:
            break
        pyr.append((_downsample(pa), _downsample(pb)))
    flow = None
    for la, lb in reversed(pyr):
        if flow is not None:
            _, h, w = la.shape
            up = 2.0 * np.repeat(np.repeat(flow, 2, axis=1), 2, axis=2)
            full = np.zeros((2, h, w))
            full[:, :up.shape[1], :up.shape[2]] = up[:, :h, :w]
            # odd sizes: replicate the last row/column
            full[:, up.shape[1]:, :] = full[:, up.shape[1] - 1:up.shape[1], :]
            full[:, :, up.shape[2]:] = full[:, :, up.shape[2] - 1:up.shape[2]]
            flow = full
        flow = _match_flow_level(la, lb, radius, patch, flow)
    return flow


def init_state(clip: StereoClip, config: InitConfig = InitConfig(), mode: str = "block",
               gt: Optional[SceneFlowState] = None):
    """Initial scene flow and backward flow.

    ``mode="block"`` runs block matching; ``mode="gt"`` passes ``gt`` and the
    clip's own backward flow through unchanged.
    """
    if mode == "gt":
        if gt is None or clip.flow_bwd is None:
            raise ValueError("gt mode needs ground truth and a clip with backward flow")
        return gt, clip.flow_bwd
    if mode != "block":
        raise ValueError(f"unknown init mode {mode!r}")
    d1 = block_match_disparity(clip.l1, clip.r1, config.max_disp, config.patch)
    d2 = block_match_disparity(clip.l2, clip.r2, config.max_disp, config.patch)
    flow = block_match_flow(clip.l1, clip.l2, config.flow_radius, config.patch,
                            config.pyramid_levels)
    flow_bwd = block_match_flow(clip.l2, clip.l1, config.flow_radius, config.patch,
                                config.pyramid_levels)
    d2w = flow_sample(d2, flow).value
    dchange = np.clip(d2w - d1, -config.dchange_range, config.dchange_range)
    return SceneFlowState(d1, d2, flow, dchange), flow_bwd
