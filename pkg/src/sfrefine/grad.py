"""Analytic gradient of the consistency loss w.r.t. the packed scene flow.

Reverse pass over the fixed graph of :func:`sfrefine.consistency.evaluate`.
Occlusion and in-bounds decisions are held constant; |u| has subgradient 0 at 0.
"""

from __future__ import annotations

import numpy as np

from sfrefine.consistency import (LossBreakdown, LossWeights, OcclusionParams, PhotometricParams,
                                  _grad_x, _grad_y, box_filter_adjoint, edge_weights, evaluate,
                                  forward, ssim_terms)
from sfrefine.fields import SceneFlowState, StereoClip, pack_state
from sfrefine.warp import sample_bilinear_adjoint


def photometric_error_vjp(a, b, g, params: PhotometricParams) -> np.ndarray:
    """Gradient of ``sum(g * pe(a, b))`` with respect to ``b`` (shape ``(C, H, W)``)."""
    nc = b.shape[0]
    al = params.alpha_ssim
    gb = (1.0 - al) / nc * np.sign(b - a) * g
    if al == 0:
        return gb
    t = ssim_terms(a, b, params)
    win = params.ssim_window
    g_s = -al / (2.0 * nc) * g * np.ones_like(b)
    denom = t["B1"] * t["B2"]
    g_a1 = g_s * t["A2"] / denom
    g_a2 = g_s * t["A1"] / denom
    g_b1 = -g_s * t["S"] / t["B1"]
    g_b2 = -g_s * t["S"] / t["B2"]
    mu_a, mu_b = t["mu_a"], t["mu_b"]
    g_sab = 2.0 * g_a2
    g_sbb = g_b2
    g_mu_b = 2.0 * mu_a * g_a1 + 2.0 * mu_b * g_b1 - 2.0 * mu_b * g_sbb - mu_a * g_sab
    gb += box_filter_adjoint(g_mu_b, win)
    gb += 2.0 * b * box_filter_adjoint(g_sbb, win)
    gb += a * box_filter_adjoint(g_sab, win)
    return gb


def _smoothness_vjp(field, guide, g):
    """Gradient of ``sum(g * smoothness_loss(field, guide))`` w.r.t. ``field`` (C, H, W)."""
    nc = field.shape[0]
    wx, wy = edge_weights(guide)
    gx = np.sign(_grad_x(field)) * wx * g / nc
    gy = np.sign(_grad_y(field)) * wy * g / nc
    out = np.zeros_like(field)
    out[..., :, 1:] += gx[..., :, :-1]
    out[..., :, :-1] -= gx[..., :, :-1]
    out[..., 1:, :] += gy[..., :-1, :]
    out[..., :-1, :] -= gy[..., :-1, :]
    return out


def consistency_gradient(clip: StereoClip, state: SceneFlowState,
                         weights: LossWeights = LossWeights(),
                         phot: PhotometricParams = PhotometricParams(),
                         occ_params: OcclusionParams = OcclusionParams(),
                         ) -> tuple[np.ndarray, LossBreakdown]:
    """Return (d total / d packed state as ``(5, H, W)``, loss breakdown)."""
    fw, bd = evaluate(clip, state, weights, phot, occ_params)
    h, w = state.shape
    g = np.zeros((5, h, w))

    # stereo photometric, frames 1 and 2 -> d1, d2
    for k, (left, (res, _, n)) in enumerate(zip((clip.l1, clip.l2), fw.stereo)):
        g_pe = weights.pd * 0.5 * res.in_bounds / n
        g_warp = photometric_error_vjp(left, res.value, g_pe, phot)
        g[k] -= (g_warp * res.d_dx).sum(axis=0)

    valid_f = fw.temporal.in_bounds & fw.occlusion

    # flow photometric -> F
    g_pe = weights.pf * valid_f / fw.n_flow
    g_warp = photometric_error_vjp(clip.l1, fw.temporal.value, g_pe, phot)
    g[2] += (g_warp * fw.temporal.d_dx).sum(axis=0)
    g[3] += (g_warp * fw.temporal.d_dy).sum(axis=0)

    # disparity-flow closure -> d1, dchange, d2 (through sampled values), F
    g_u = weights.df * valid_f / fw.n_flow * np.sign(fw.residual)
    g[0] += g_u
    g[4] += g_u
    s = fw.d2_sample
    g[2] -= g_u * s.d_dx
    g[3] -= g_u * s.d_dy
    g[1] -= sample_bilinear_adjoint(g_u, s, (h, w))

    # smoothness on d1, d2, F, C
    g_map = weights.s / (h * w)
    f = fw.smooth_fields
    g[0] += _smoothness_vjp(f[0], clip.l1, g_map)[0]
    g[1] += _smoothness_vjp(f[1], clip.l2, g_map)[0]
    g[2:4] += _smoothness_vjp(f[2], clip.l1, g_map)
    g[4] += _smoothness_vjp(f[3], clip.l1, g_map)[0]
    return g, bd


def _decisions(fw, clip, batched: bool) -> np.ndarray:
    """Every piecewise-constant choice of one (batched) evaluation, one row per batch entry."""
    l1, l2 = (clip.l1[:, None], clip.l2[:, None]) if batched else (clip.l1, clip.l2)
    parts = [fw.occlusion, np.sign(fw.residual)]
    for (res, _, _), left in zip(fw.stereo, (l1, l2)):
        parts += [res.x0, res.y0, res.in_bounds, np.sign(res.value - left)]
    for res in (fw.temporal, fw.d2_sample):
        parts += [res.x0, res.y0, res.in_bounds]
    parts.append(np.sign(fw.temporal.value - l1))
    for f in fw.smooth_fields:
        parts += [np.sign(_grad_x(f)), np.sign(_grad_y(f))]
    rows = []
    for p in parts:
        p = np.asarray(p, dtype=np.float64)
        if batched:
            # batch axis sits right before (H, W); channel axes, if any, come first
            p = np.moveaxis(p, -3, 0)
        rows.append(p.reshape(p.shape[0], -1) if batched else p.reshape(1, -1))
    return np.concatenate(rows, axis=1)


def finite_difference_gradient(clip: StereoClip, state: SceneFlowState,
                               weights: LossWeights = LossWeights(),
                               phot: PhotometricParams = PhotometricParams(),
                               occ_params: OcclusionParams = OcclusionParams(),
                               eps: float = 1e-4, return_unstable: bool = False,
                               batch: int = 256):
    """Central differences of the total loss over every element of the packed state.

    Perturbed states are evaluated ``batch`` at a time through the same loss
    code as :func:`sfrefine.consistency.total_loss`. With
    ``return_unstable=True`` also returns a boolean ``(5, H, W)`` array marking
    elements whose ±eps perturbation changes a discrete decision (bilinear
    cell, clamp, mask, or the sign inside an absolute value).
    Meant for small images: two loss evaluations per element.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = pack_state(state)
    n = x.size
    base = None
    if return_unstable:
        fw0, _ = evaluate(clip, state, weights, phot, occ_params)
        base = _decisions(fw0, clip, batched=False)[0]

    g = np.zeros(n)
    unstable = np.zeros(n, dtype=bool)
    for lo in range(0, n, batch):
        idx = np.arange(lo, min(lo + batch, n))
        totals = []
        for sgn in (1.0, -1.0):
            xb = np.repeat(x[None], len(idx), axis=0).reshape(len(idx), -1)
            xb[np.arange(len(idx)), idx] += sgn * eps
            xb = xb.reshape((len(idx),) + x.shape)
            fw = forward(clip, xb[:, 0], xb[:, 1], np.moveaxis(xb[:, 2:4], 1, 0), xb[:, 4],
                         weights, phot, occ_params)
            totals.append(fw.scalars["total"])
            if return_unstable:
                unstable[idx] |= np.any(_decisions(fw, clip, batched=True) != base, axis=1)
        g[idx] = (totals[0] - totals[1]) / (2.0 * eps)
    g = g.reshape(x.shape)
    if return_unstable:
        return g, unstable.reshape(x.shape)
    return g
