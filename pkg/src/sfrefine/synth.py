"""Procedural stereo-video scenes with exact scene-flow ground truth.

A scene is a back-to-front stack of textured planar layers. Each layer has a
disparity plane ``a*x + b*y + c`` in first-frame left-view coordinates, an
in-plane translation ``(tx, ty)`` and a disparity change between frames.
Textures are sums of low-frequency sinusoids whose total curvature is bounded
so that bilinear resampling stays within 1e-3 of the true texture.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from sfrefine.fields import SceneFlowState, StereoClip

# sum of amplitude * |k|^2 over texture components; bounds bilinear error by this / 8
CURVATURE_BUDGET = 6e-3


@dataclass(frozen=True)
class Texture:
    base: tuple  # one mean intensity per channel
    amplitude: tuple
    kx: tuple
    ky: tuple
    phase: tuple  # phase[channel][component]

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = np.empty((len(self.base),) + np.shape(u))
        for c, base in enumerate(self.base):
            acc = np.full(np.shape(u), float(base))
            for a, kx, ky, ph in zip(self.amplitude, self.kx, self.ky, self.phase[c]):
                acc += a * np.sin(kx * u + ky * v + ph)
            out[c] = acc
        return out


def make_texture(seed: int, channels: int = 1, components: int = 8,
                 wavelength: tuple = (16.0, 40.0), base_range: tuple = (0.3, 0.7)) -> Texture:
    rng = np.random.default_rng(seed)
    lam = rng.uniform(*wavelength, size=components)
    # stratified orientations avoid near-1-d textures (aperture problem)
    theta = (np.arange(components) + rng.uniform(size=components)) * np.pi / components
    k = 2 * np.pi / lam
    # equal amplitudes so no single orientation dominates the matching cost
    amp = np.full(components, CURVATURE_BUDGET / (k ** 2).sum())
    # keep intensities inside [0, 1]
    amp *= min(1.0, 0.25 / amp.sum())
    base = tuple(rng.uniform(*base_range, size=channels))
    phase = tuple(tuple(rng.uniform(0, 2 * np.pi, size=components)) for _ in range(channels))
    return Texture(base, tuple(amp), tuple(k * np.cos(theta)), tuple(k * np.sin(theta)), phase)


@dataclass(frozen=True)
class Layer:
    plane: tuple  # (a, b, c): disparity = a*x + b*y + c
    motion: tuple = (0.0, 0.0)
    ddisp: float = 0.0
    ellipse: Optional[tuple] = None  # (cx, cy, rx, ry); None covers the whole plane
    texture_seed: int = 0
    wavelength: tuple = (16.0, 40.0)

    def inside(self, u, v):
        if self.ellipse is None:
            return np.ones(np.shape(u), dtype=bool)
        cx, cy, rx, ry = self.ellipse
        return ((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2 <= 1.0


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    layers: tuple  # back to front; the first should cover the plane
    channels: int = 1
    noise: float = 0.0


@dataclass
class SyntheticSample:
    clip: StereoClip
    gt: SceneFlowState
    occlusion: np.ndarray  # flow visibility: p and p + F* see the same layer
    stereo_occlusion: tuple  # (frame 1, frame 2) left/right visibility
    valid: np.ndarray
    spec: Optional[SceneSpec] = field(default=None, repr=False)


VIEWS = ("L1", "R1", "L2", "R2")


def _layer_view(layer: Layer, view: str, x, y):
    """Layer coordinates and disparity of the layer point imaged at (x, y) in ``view``."""
    a, b, c = layer.plane
    tx, ty = layer.motion
    dd = layer.ddisp if view in ("L2", "R2") else 0.0
    if view == "L1":
        u, v = x, y
    elif view == "R1":
        u, v = (x + b * y + c) / (1.0 - a), y
    elif view == "L2":
        u, v = x - tx, y - ty
    elif view == "R2":
        x2 = (x - a * tx + b * (y - ty) + c + dd) / (1.0 - a)
        u, v = x2 - tx, y - ty
    else:
        raise ValueError(f"unknown view {view!r}")
    return u, v, a * u + b * v + c + dd


def visible_layer(spec: SceneSpec, view: str, x, y):
    """Index, layer coordinates and disparity of the front-most layer at (x, y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ids = np.full(x.shape, -1, dtype=np.intp)
    best = np.full(x.shape, -np.inf)
    uu = np.zeros(x.shape)
    vv = np.zeros(x.shape)
    for i, layer in enumerate(spec.layers):
        u, v, d = _layer_view(layer, view, x, y)
        take = layer.inside(u, v) & (d >= best)
        ids[take] = i
        best[take] = d[take]
        uu[take] = u[take]
        vv[take] = v[take]
    if np.any(ids < 0):
        raise ValueError("scene does not cover every pixel; the first layer should be unbounded")
    return ids, uu, vv, best


def _visible_at_nodes(spec, view, xq, yq, ref_ids):
    """True where every bilinear node around (xq, yq) shows layer ``ref_ids``."""
    x0, y0 = np.floor(xq), np.floor(yq)
    ok = np.ones(xq.shape, dtype=bool)
    for dx in (0, 1):
        for dy in (0, 1):
            used = np.ones(xq.shape, dtype=bool)
            if dx:
                used &= xq > x0
            if dy:
                used &= yq > y0
            ids = visible_layer(spec, view, x0 + dx, y0 + dy)[0]
            ok &= ~used | (ids == ref_ids)
    return ok


def _check_spec(spec: SceneSpec):
    if not spec.layers:
        raise ValueError("scene needs at least one layer")
    ys, xs = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    for i, layer in enumerate(spec.layers):
        if not abs(layer.plane[0]) < 1.0:
            raise ValueError(f"layer {i}: disparity x-slope must be in (-1, 1)")
        for view in ("L1", "L2"):
            u, v, d = _layer_view(layer, view, xs, ys)
            if np.any(d[layer.inside(u, v)] < 0):
                raise ValueError(f"layer {i}: negative disparity in view {view}")


def generate(spec: SceneSpec, seed: int = 0) -> SyntheticSample:
    """Render the four views and all ground-truth fields of ``spec``."""
    _check_spec(spec)
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    textures = [make_texture(l.texture_seed, spec.channels, wavelength=l.wavelength)
                for l in spec.layers]

    images = {}
    vis = {}
    for view in VIEWS:
        ids, u, v, d = visible_layer(spec, view, xs, ys)
        img = np.zeros((spec.channels, h, w))
        for i, tex in enumerate(textures):
            m = ids == i
            if m.any():
                img[:, m] = tex(u[m], v[m])
        images[view] = img
        vis[view] = (ids, d)

    rng = np.random.default_rng(seed)
    if spec.noise > 0:
        for view in VIEWS:
            images[view] = np.clip(images[view] + rng.normal(0, spec.noise, images[view].shape),
                                   0.0, 1.0)

    motion = np.array([l.motion for l in spec.layers], dtype=np.float64)
    ddisp = np.array([l.ddisp for l in spec.layers], dtype=np.float64)
    ids1, d1 = vis["L1"]
    ids2, d2 = vis["L2"]
    flow = np.stack([motion[ids1, 0], motion[ids1, 1]])
    flow_bwd = -np.stack([motion[ids2, 0], motion[ids2, 1]])
    gt = SceneFlowState(d1, d2, flow, ddisp[ids1])

    occ = _visible_at_nodes(spec, "L2", xs + flow[0], ys + flow[1], ids1)
    st1 = _visible_at_nodes(spec, "R1", xs - d1, ys, ids1)
    st2 = _visible_at_nodes(spec, "R2", xs - d2, ys, ids2)
    clip = StereoClip(images["L1"], images["R1"], images["L2"], images["R2"], flow_bwd)
    return SyntheticSample(clip, gt, occ, (st1, st2), np.ones((h, w), dtype=bool), spec)


@dataclass(frozen=True)
class SceneRanges:
    """Randomisation ranges for :func:`make_dataset`."""

    height: int = 96
    width: int = 128
    channels: int = 1
    disparity: tuple = (1.0, 32.0)
    max_motion: float = 4.0
    max_ddisp: float = 1.5
    max_slope: float = 0.03
    foreground: tuple = (1, 3)
    radius: tuple = (12.0, 36.0)
    noise: float = 0.0


def random_spec(rng: np.random.Generator, ranges: SceneRanges = SceneRanges()) -> SceneSpec:
    lo, hi = ranges.disparity
    h, w = ranges.height, ranges.width
    n_fg = int(rng.integers(ranges.foreground[0], ranges.foreground[1] + 1))
    # split the disparity range so foreground layers tend to sit in front
    bands = [(lo, lo + (hi - lo) / 3)] + [(lo + (hi - lo) / 3, hi)] * n_fg
    layers = []
    for k, (blo, bhi) in enumerate(bands):
        for _ in range(1000):
            a, b = rng.uniform(-ranges.max_slope, ranges.max_slope, size=2)
            c = rng.uniform(blo, bhi)
            dd = rng.uniform(-ranges.max_ddisp, ranges.max_ddisp)
            corners = [a * x + b * y + c for x in (0, w - 1) for y in (0, h - 1)]
            # disparity must stay in range in both frames over the whole extent
            if min(corners) + min(dd, 0) - ranges.max_motion * (abs(a) + abs(b)) >= lo and \
                    max(corners) + max(dd, 0) + ranges.max_motion * (abs(a) + abs(b)) <= hi:
                break
        else:  # pragma: no cover - ranges too tight
            raise ValueError("could not place a layer inside the disparity range")
        motion = tuple(rng.uniform(-ranges.max_motion, ranges.max_motion, size=2))
        ellipse = None
        if k > 0:
            ellipse = (rng.uniform(0, w), rng.uniform(0, h),
                       rng.uniform(*ranges.radius), rng.uniform(*ranges.radius))
        layers.append(Layer((a, b, c), motion, dd, ellipse, int(rng.integers(2 ** 31))))
    return SceneSpec(h, w, tuple(layers), ranges.channels, ranges.noise)


def make_dataset(n: int, ranges: SceneRanges = SceneRanges(), seed: int = 0) -> list:
    """``n`` samples; sample ``i`` depends only on ``(seed, i)``."""
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        out.append(generate(random_spec(rng, ranges), seed=int(rng.integers(2 ** 31))))
    return out


def split(samples: Sequence, n_train: int):
    """Train / held-out split by index."""
    return list(samples[:n_train]), list(samples[n_train:])
