import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from sfrefine.consistency import (LossWeights, OcclusionParams, PhotometricParams,
                                  box_filter, box_filter_adjoint, disparity_flow_loss, flow_loss,
                                  occlusion_mask, photometric_error, smoothness_loss, ssim,
                                  stereo_loss, total_loss)
from sfrefine.fields import SceneFlowState, StereoClip
from sfrefine.synth import make_dataset

from conftest import plane_sample, random_clip, small_scene


def _erode(mask):
    return ndimage.binary_erosion(mask, np.ones((3, 3)), border_value=1)


def test_defaults():
    assert LossWeights().as_tuple() == (1.0, 1.0, 1.0, 0.1)
    assert (OcclusionParams().w1, OcclusionParams().w2) == (0.01, 0.05)
    p = PhotometricParams()
    assert (p.alpha_ssim, p.ssim_window) == (0.85, 3)
    assert p.ssim_c1 == pytest.approx(0.01 ** 2) and p.ssim_c2 == pytest.approx(0.03 ** 2)


def test_param_validation():
    with pytest.raises(ValueError):
        OcclusionParams(w1=-1)
    with pytest.raises(ValueError):
        PhotometricParams(ssim_window=4)
    with pytest.raises(ValueError):
        PhotometricParams(ssim_window=1)
    with pytest.raises(ValueError):
        PhotometricParams(alpha_ssim=1.5)


def test_box_filter_adjoint(rng):
    x = rng.normal(size=(2, 6, 7))
    y = rng.normal(size=(2, 6, 7))
    assert (box_filter(x, 3) * y).sum() == pytest.approx((x * box_filter_adjoint(y, 3)).sum())
    assert np.allclose(box_filter(np.full((4, 4), 2.5), 3), 2.5)


def test_pe_identical_images_is_zero(rng):
    a = rng.uniform(size=(3, 8, 8))
    assert np.all(photometric_error(a, a) == 0)


def test_pe_constant_images_closed_form():
    p = PhotometricParams()
    a, b = np.zeros((1, 5, 5)), np.ones((1, 5, 5))
    # constant patches: no variance or covariance, so SSIM = c1 / (1 + c1)
    s = (2 * 0 * 1 + p.ssim_c1) * (0 + p.ssim_c2) / ((0 + 1 + p.ssim_c1) * (0 + 0 + p.ssim_c2))
    want = p.alpha_ssim * (1 - s) / 2 + (1 - p.alpha_ssim) * 1.0
    assert np.allclose(photometric_error(a, b, p), want, rtol=1e-14)


def test_pe_alpha_zero_is_mean_abs_difference(rng):
    a, b = rng.uniform(size=(2, 3, 6, 6))
    pe = photometric_error(a, b, PhotometricParams(alpha_ssim=0.0))
    assert np.array_equal(pe, np.abs(a - b).mean(axis=0))


def test_pe_extent_mismatch():
    with pytest.raises(ValueError):
        photometric_error(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))
    with pytest.raises(ValueError):
        photometric_error(np.zeros((1, 4, 4)), np.zeros((3, 4, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0, 1))
def test_pe_range(seed, alpha):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 2, 6, 6))
    pe = photometric_error(a, b, PhotometricParams(alpha_ssim=alpha))
    assert pe.min() >= 0 and pe.max() <= 1.0
    assert np.all(np.abs(ssim(a, b)) <= 1 + 1e-12)


def test_stereo_loss_examples(rng):
    s = plane_sample()
    m = stereo_loss(s.clip.l1, s.clip.r1, s.gt.d1)
    assert m.mean() < 1e-3
    img = rng.uniform(size=(1, 6, 6))
    assert np.all(stereo_loss(img, img, np.zeros((6, 6))) == 0)
    # every sample falls left of the image
    assert np.all(stereo_loss(img, 1 - img, np.full((6, 6), 10.0)) == 0)


def test_stereo_loss_at_truth_on_layered_scene():
    s = make_dataset(1, seed=3)[0]
    vis = _erode(s.stereo_occlusion[0])
    assert stereo_loss(s.clip.l1, s.clip.r1, s.gt.d1)[vis].mean() < 1e-3


def test_occlusion_mask_examples():
    f = np.zeros((2, 4, 5))
    f[0] = 10.0
    b = np.zeros((2, 4, 5))
    b[0] = -10.0
    assert occlusion_mask(f, b).all()
    assert occlusion_mask(np.zeros((2, 4, 5)), np.zeros((2, 4, 5))).all()
    b[0] = -5.0
    # |10 - 5|^2 = 25 >= 0.01 * (100 + 25) + 0.05 = 1.3
    assert not occlusion_mask(f, b).any()


def test_occlusion_mask_warps_backward_flow():
    f = np.zeros((2, 3, 6))
    f[0] = 2.0
    b = np.zeros((2, 3, 6))
    b[0, :, :4] = -2.0
    # x = 0, 1 land on columns 2, 3 (b = -2, consistent); x >= 2 land on b = 0
    m = occlusion_mask(f, b)
    assert m[:, :2].all() and not m[:, 2:].any()


def test_occlusion_mask_random_table(rng):
    f = rng.normal(0, 3, (2, 7, 9))
    b = rng.normal(0, 3, (2, 7, 9))
    ys, xs = np.mgrid[0:7, 0:9]
    for y, x in zip(ys.ravel(), xs.ravel()):
        qx = min(max(x + f[0, y, x], 0), 8)
        qy = min(max(y + f[1, y, x], 0), 6)
        x0, y0 = min(int(qx), 7), min(int(qy), 5)
        tx, ty = qx - x0, qy - y0
        bw = ((1 - tx) * (1 - ty) * b[:, y0, x0] + tx * (1 - ty) * b[:, y0, x0 + 1]
              + (1 - tx) * ty * b[:, y0 + 1, x0] + tx * ty * b[:, y0 + 1, x0 + 1])
        fp = f[:, y, x]
        want = ((fp + bw) ** 2).sum() < 0.01 * ((fp ** 2).sum() + (bw ** 2).sum()) + 0.05
        assert occlusion_mask(f, b)[y, x] == want


def test_flow_loss_examples(rng):
    img = rng.uniform(size=(1, 6, 7))
    ones = np.ones((6, 7), bool)
    assert np.all(flow_loss(img, img, np.zeros((2, 6, 7)), ones) == 0)
    other = rng.uniform(size=(1, 6, 7))
    m = ones.copy()
    m[2, 3] = False
    out = flow_loss(img, other, np.zeros((2, 6, 7)), m)
    assert out[2, 3] == 0 and np.all(out[m] > 0)


def test_flow_loss_at_truth():
    s = make_dataset(1, seed=4)[0]
    m = flow_loss(s.clip.l1, s.clip.l2, s.gt.flow, s.occlusion)
    assert m[_erode(s.occlusion)].mean() < 1e-3
    p = plane_sample()
    assert flow_loss(p.clip.l1, p.clip.l2, p.gt.flow, p.occlusion).mean() < 1e-3


def _const_state(d1, d2, c, shape=(4, 5)):
    return SceneFlowState(np.full(shape, d1), np.full(shape, d2), np.zeros((2,) + shape),
                          np.full(shape, c))


def test_disparity_flow_loss_examples():
    ones = np.ones((4, 5), bool)
    assert np.all(disparity_flow_loss(_const_state(5.0, 7.0, 2.0), ones) == 0)
    assert np.all(disparity_flow_loss(_const_state(5.0, 7.0, 1.0), ones) == 1.0)
    assert np.all(disparity_flow_loss(_const_state(5.0, 7.0, 1.0), ~ones) == 0)


def test_disparity_flow_closure_by_construction(rng):
    d2 = rng.uniform(1, 5, (6, 7))
    flow = rng.uniform(-1, 1, (2, 6, 7))
    d1 = rng.uniform(1, 5, (6, 7))
    from sfrefine.warp import warp_scalar_by_flow
    c = warp_scalar_by_flow(d2, flow)[0] - d1
    st_ = SceneFlowState(d1, d2, flow, c)
    assert np.all(disparity_flow_loss(st_, np.ones((6, 7), bool)) < 1e-14)


def test_smoothness_examples():
    guide = np.full((1, 4, 6), 0.5)
    assert np.all(smoothness_loss(np.full((4, 6), 3.0), guide) == 0)
    ramp = np.tile(np.arange(6.0), (4, 1))
    m = smoothness_loss(ramp, guide)
    assert np.all(m[:, :-1] == 1.0) and np.all(m[:, -1] == 0)
    g = 0.7
    field = np.zeros((4, 6))
    field[:, 3:] = 1.0
    gd = np.zeros((1, 4, 6))
    gd[..., 3:] = g
    m = smoothness_loss(field, gd)
    assert m[:, 2] == pytest.approx(np.exp(-g)) and np.all(m[:, [0, 1, 3, 4, 5]] == 0)


def test_smoothness_two_channel_is_channel_mean(rng):
    f = rng.normal(size=(2, 5, 5))
    g = rng.uniform(size=(1, 5, 5))
    both = smoothness_loss(f, g)
    assert np.allclose(both, 0.5 * (smoothness_loss(f[0], g) + smoothness_loss(f[1], g)))


def test_total_loss_examples():
    p = plane_sample()
    bd = total_loss(p.clip, p.gt)
    assert bd.total < 1e-2
    bd0 = total_loss(p.clip, p.gt, LossWeights(0, 0, 0, 0))
    assert bd0.total == 0 and np.all(bd0.total_map == 0)


def test_total_loss_requires_backward_flow(rng):
    clip = random_clip(5, 5, rng)
    bare = StereoClip(clip.l1, clip.r1, clip.l2, clip.r2)
    with pytest.raises(ValueError, match="backward flow"):
        total_loss(bare, SceneFlowState.zeros(5, 5))
    with pytest.raises(ValueError):
        total_loss(clip, SceneFlowState.zeros(5, 6))


@pytest.mark.parametrize("seed", range(4))
def test_breakdown_invariants(seed):
    clip, state, _ = small_scene(seed, sigma=1.0)
    w = LossWeights(0.7, 1.3, 0.4, 0.25)
    bd = total_loss(clip, state, w)
    for m in (bd.pd_map, bd.pf_map, bd.df_map, bd.smooth_map, bd.total_map):
        assert m.min() >= 0
    assert bd.total == w.pd * bd.pd + w.pf * bd.pf + w.df * bd.df + w.s * bd.smooth
    assert np.allclose(bd.total_map, w.pd * bd.pd_map + w.pf * bd.pf_map + w.df * bd.df_map
                       + w.s * bd.smooth_map, rtol=0, atol=0)
    for k in (2.0, 0.5):
        assert total_loss(clip, state, w.scaled(k)).total == k * bd.total
    assert total_loss(clip, state, w.scaled(3.0)).total == pytest.approx(3 * bd.total, rel=1e-15)


def test_perturbed_truth_costs_more():
    worse = 0
    samples = make_dataset(20, seed=5)
    rng = np.random.default_rng(0)
    for s in samples:
        from conftest import perturbed
        if total_loss(s.clip, perturbed(s.gt, 1.0, rng)).total > total_loss(s.clip, s.gt).total:
            worse += 1
    assert worse >= 0.95 * len(samples)
