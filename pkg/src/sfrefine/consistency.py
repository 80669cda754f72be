"""Photometric and geometric consistency terms and the weighted total loss.

Each term produces a non-negative per-pixel map; the scalar for a term is the
map's sum divided by the number of in-bounds pixels for that term. Smoothness
is averaged over the whole grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from sfrefine.fields import SceneFlowState, StereoClip
from sfrefine.warp import SampleResult, flow_sample, sample_bilinear, stereo_sample


@dataclass(frozen=True)
class LossWeights:
    pd: float = 1.0
    pf: float = 1.0
    df: float = 1.0
    s: float = 0.1

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(self.pd * k, self.pf * k, self.df * k, self.s * k)

    def as_tuple(self):
        return (self.pd, self.pf, self.df, self.s)


@dataclass(frozen=True)
class OcclusionParams:
    w1: float = 0.01
    w2: float = 0.05

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("occlusion weights must be non-negative")


@dataclass(frozen=True)
class PhotometricParams:
    alpha_ssim: float = 0.85
    ssim_window: int = 3
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2

    def __post_init__(self):
        if not 0.0 <= self.alpha_ssim <= 1.0:
            raise ValueError("alpha_ssim must lie in [0, 1]")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd and >= 3")


@dataclass
class LossBreakdown:
    pd_map: np.ndarray
    pf_map: np.ndarray
    df_map: np.ndarray
    smooth_map: np.ndarray
    total_map: np.ndarray
    pd: float
    pf: float
    df: float
    smooth: float
    total: float
    weights: LossWeights
    occlusion: np.ndarray = field(repr=False)


# -- windowed means ---------------------------------------------------------

def box_filter(x: np.ndarray, window: int) -> np.ndarray:
    """Mean over a ``window x window`` neighbourhood with edge replication."""
    r = window // 2
    h, w = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    xp = np.pad(x, pad, mode="edge")
    out = np.zeros_like(x, dtype=np.float64)
    for dy in range(window):
        for dx in range(window):
            out += xp[..., dy:dy + h, dx:dx + w]
    return out / (window * window)


def box_filter_adjoint(g: np.ndarray, window: int) -> np.ndarray:
    r = window // 2
    h, w = g.shape[-2:]
    gp = np.zeros(g.shape[:-2] + (h + 2 * r, w + 2 * r))
    for dy in range(window):
        for dx in range(window):
            gp[..., dy:dy + h, dx:dx + w] += g
    # fold the replicated border back onto the edge rows/columns
    gp[..., r, :] += gp[..., :r, :].sum(axis=-2)
    gp[..., r + h - 1, :] += gp[..., r + h:, :].sum(axis=-2)
    gp[..., :, r] += gp[..., :, :r].sum(axis=-1)
    gp[..., :, r + w - 1] += gp[..., :, r + w:].sum(axis=-1)
    return gp[..., r:r + h, r:r + w] / (window * window)


def ssim_terms(a: np.ndarray, b: np.ndarray, params: PhotometricParams) -> dict:
    """Windowed SSIM and its intermediates, per channel."""
    win = params.ssim_window
    mu_a = box_filter(a, win)
    mu_b = box_filter(b, win)
    s_aa = box_filter(a * a, win) - mu_a ** 2
    s_bb = box_filter(b * b, win) - mu_b ** 2
    s_ab = box_filter(a * b, win) - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + params.ssim_c1
    A2 = 2 * s_ab + params.ssim_c2
    B1 = mu_a ** 2 + mu_b ** 2 + params.ssim_c1
    B2 = s_aa + s_bb + params.ssim_c2
    S = (A1 * A2) / (B1 * B2)
    return dict(mu_a=mu_a, mu_b=mu_b, A1=A1, A2=A2, B1=B1, B2=B2, S=S)


def ssim(a, b, params: PhotometricParams = PhotometricParams()) -> np.ndarray:
    return ssim_terms(np.asarray(a, float), np.asarray(b, float), params)["S"]


def _as_chw(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 2 else x


def photometric_error(a, b, params: PhotometricParams = PhotometricParams()) -> np.ndarray:
    """pe = alpha*(1 - SSIM)/2 + (1 - alpha)*|a - b|, averaged over channels."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape[0] != b.shape[0] or a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"photometric_error: extent mismatch {a.shape} vs {b.shape}")
    al = params.alpha_ssim
    per_channel = (1.0 - al) * np.abs(a - b)
    if al > 0:
        per_channel = per_channel + al * (1.0 - ssim_terms(a, b, params)["S"]) / 2.0
    return per_channel.mean(axis=0)


def _check_extent(name, shape, *arrays):
    for arr in arrays:
        if np.asarray(arr).shape[-2:] != tuple(shape):
            raise ValueError(f"{name}: extent mismatch, expected {tuple(shape)}, "
                             f"got {np.asarray(arr).shape[-2:]}")


# -- individual terms ----------------------------------------------------------

def stereo_loss(l, r, d, params: PhotometricParams = PhotometricParams()) -> np.ndarray:
    """Per-pixel stereo photometric loss; out-of-bounds samples contribute 0."""
    l = _as_chw(l)
    _check_extent("stereo_loss", l.shape[1:], r, d)
    res = stereo_sample(_as_chw(r), d)
    return res.in_bounds * photometric_error(l, res.value, params)


def occlusion_mask(f_fwd, f_bwd, params: OcclusionParams = OcclusionParams()) -> np.ndarray:
    """Forward-backward check: True where the backward flow, warped by the forward one, cancels it."""
    f_fwd = np.asarray(f_fwd, dtype=np.float64)
    _check_extent("occlusion_mask", f_fwd.shape[-2:], f_bwd)
    warped = flow_sample(f_bwd, f_fwd).value
    lhs = ((f_fwd + warped) ** 2).sum(axis=0)
    rhs = params.w1 * ((f_fwd ** 2).sum(axis=0) + (warped ** 2).sum(axis=0)) + params.w2
    return lhs < rhs


def flow_loss(l1, l2, flow, mask, params: PhotometricParams = PhotometricParams()) -> np.ndarray:
    l1 = _as_chw(l1)
    _check_extent("flow_loss", l1.shape[1:], l2, flow, mask)
    res = flow_sample(_as_chw(l2), flow)
    return np.asarray(mask, bool) * res.in_bounds * photometric_error(l1, res.value, params)


def disparity_flow_loss(state: SceneFlowState, mask) -> np.ndarray:
    """|D1 + C - D2(p + F)| on non-occluded, in-bounds pixels."""
    res = flow_sample(state.d2, state.flow)
    u = state.d1 + state.dchange - res.value
    return np.asarray(mask, bool) * res.in_bounds * np.abs(u)


def _grad_x(f):
    g = np.zeros_like(f)
    g[..., :, :-1] = f[..., :, 1:] - f[..., :, :-1]
    return g


def _grad_y(f):
    g = np.zeros_like(f)
    g[..., :-1, :] = f[..., 1:, :] - f[..., :-1, :]
    return g


def edge_weights(guide) -> tuple[np.ndarray, np.ndarray]:
    guide = _as_chw(guide)
    wx = np.exp(-np.abs(_grad_x(guide)).mean(axis=0))
    wy = np.exp(-np.abs(_grad_y(guide)).mean(axis=0))
    return wx, wy


def smoothness_loss(field, guide) -> np.ndarray:
    """First-order edge-aware smoothness with forward differences (0 on the last row/column)."""
    field = _as_chw(field)
    _check_extent("smoothness_loss", field.shape[-2:], guide)
    wx, wy = edge_weights(guide)
    return (np.abs(_grad_x(field)) * wx + np.abs(_grad_y(field)) * wy).mean(axis=0)


# -- total -------------------------------------------------------------------------

@dataclass
class _Forward:
    """Intermediates of one total-loss evaluation, reused by the gradient."""

    stereo: list  # [(SampleResult, pe, n_valid), ...] for frames 1 and 2
    temporal: SampleResult
    pe_flow: np.ndarray
    d2_sample: SampleResult
    residual: np.ndarray
    n_flow: np.ndarray
    occlusion: np.ndarray
    smooth_fields: list
    scalars: dict
    maps: dict


def _smooth_pairs(clip: StereoClip, d1, d2, flow, dchange):
    return [(d1[None], clip.l1), (d2[None], clip.l2), (flow, clip.l1), (dchange[None], clip.l1)]


def _count(mask):
    return np.maximum(mask.sum(axis=(-2, -1)), 1)


def forward(clip: StereoClip, d1, d2, flow, dchange, weights: LossWeights,
            phot: PhotometricParams, occ_params: OcclusionParams,
            occlusion: Optional[np.ndarray] = None) -> _Forward:
    """Loss evaluation on raw arrays.

    ``d1, d2, dchange`` are ``(..., H, W)`` and ``flow`` is ``(2, ..., H, W)``;
    any leading axes are an evaluation batch against the same clip.
    """
    if clip.flow_bwd is None:
        raise ValueError("total_loss: clip has no backward flow; the occlusion mask needs one")
    if d1.shape[-2:] != clip.shape:
        raise ValueError(f"total_loss: state extent {d1.shape[-2:]} != clip extent {clip.shape}")
    batched = d1.ndim == 3
    if occlusion is None:
        occlusion = occlusion_mask(flow, clip.flow_bwd, occ_params)

    stereo = []
    pd_map = 0.0
    pd = 0.0
    for left, right, disp in ((clip.l1, clip.r1, d1), (clip.l2, clip.r2, d2)):
        res = stereo_sample(right, disp)
        lb = left[:, None] if batched else left
        pe = photometric_error(lb, res.value, phot)
        n = _count(res.in_bounds)
        masked = res.in_bounds * pe
        pd_map = pd_map + 0.5 * masked
        pd = pd + 0.5 * masked.sum(axis=(-2, -1)) / n
        stereo.append((res, pe, n))

    temporal = flow_sample(clip.l2, flow)
    valid_f = temporal.in_bounds & occlusion
    n_flow = _count(temporal.in_bounds)
    l1b = clip.l1[:, None] if batched else clip.l1
    pe_flow = photometric_error(l1b, temporal.value, phot)
    pf_map = valid_f * pe_flow
    pf = pf_map.sum(axis=(-2, -1)) / n_flow

    d2s = flow_sample(d2, flow, batched=batched)
    residual = d1 + dchange - d2s.value
    df_map = valid_f * np.abs(residual)
    df = df_map.sum(axis=(-2, -1)) / n_flow

    pairs = _smooth_pairs(clip, d1, d2, flow, dchange)
    smooth_map = sum(smoothness_loss(f, g) for f, g in pairs)
    smooth = smooth_map.mean(axis=(-2, -1))

    total = weights.pd * pd + weights.pf * pf + weights.df * df + weights.s * smooth
    total_map = (weights.pd * pd_map + weights.pf * pf_map
                 + weights.df * df_map + weights.s * smooth_map)
    scalars = dict(pd=pd, pf=pf, df=df, smooth=smooth, total=total)
    maps = dict(pd_map=pd_map, pf_map=pf_map, df_map=df_map, smooth_map=smooth_map,
                total_map=total_map)
    return _Forward(stereo, temporal, pe_flow, d2s, residual, n_flow, occlusion,
                    [f for f, _ in pairs], scalars, maps)


def evaluate(clip: StereoClip, state: SceneFlowState, weights: LossWeights,
             phot: PhotometricParams, occ_params: OcclusionParams,
             occlusion: Optional[np.ndarray] = None) -> tuple[_Forward, LossBreakdown]:
    if state.shape != clip.shape:
        raise ValueError(f"total_loss: state extent {state.shape} != clip extent {clip.shape}")
    fw = forward(clip, state.d1, state.d2, state.flow, state.dchange, weights, phot,
                 occ_params, occlusion)
    sc = {k: float(v) for k, v in fw.scalars.items()}
    bd = LossBreakdown(weights=weights, occlusion=fw.occlusion, **fw.maps, **sc)
    return fw, bd


def total_loss(clip: StereoClip, state: SceneFlowState, weights: LossWeights = LossWeights(),
               phot: PhotometricParams = PhotometricParams(),
               occ_params: OcclusionParams = OcclusionParams()) -> LossBreakdown:
    """Weighted consistency loss; the occlusion mask is recomputed from the current flow."""
    return evaluate(clip, state, weights, phot, occ_params)[1]
