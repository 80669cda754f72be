"""Raster and scene-flow containers shared by every other module.

All rasters are float64 numpy arrays in channel-planar layout ``(C, H, W)``;
single-channel maps (disparity, loss maps, masks) are plain ``(H, W)``.
Images hold values in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# fixed packing order of the five scene-flow channels
CHANNELS = ("d1", "d2", "flow_x", "flow_y", "dchange")
NUM_STATE_CHANNELS = len(CHANNELS)


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    if a.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim}-d array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: contains NaN or Inf")
    a.setflags(write=False)
    return a


def as_image(a, name: str = "image") -> np.ndarray:
    """Coerce to a read-only ``(C, H, W)`` float64 raster; 2-d input gets one channel."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    return _frozen(a, 3, name)


@dataclass(frozen=True)
class SceneFlowState:
    """Scene flow X = (D1, D2, F, C) on one pixel grid.

    ``d2`` lives in the second frame's own coordinates. Construction does not
    clamp; every update path goes through :meth:`clamped` or :func:`unpack_state`.
    """

    d1: np.ndarray
    d2: np.ndarray
    flow: np.ndarray
    dchange: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "d1", _frozen(self.d1, 2, "d1"))
        object.__setattr__(self, "d2", _frozen(self.d2, 2, "d2"))
        object.__setattr__(self, "flow", _frozen(self.flow, 3, "flow"))
        object.__setattr__(self, "dchange", _frozen(self.dchange, 2, "dchange"))
        shape = self.d1.shape
        if self.d2.shape != shape or self.dchange.shape != shape:
            raise ValueError("d1, d2 and dchange must share one extent")
        if self.flow.shape != (2,) + shape:
            raise ValueError(f"flow must have shape {(2,) + shape}, got {self.flow.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.d1.shape

    def clamped(self) -> "SceneFlowState":
        return SceneFlowState(np.maximum(self.d1, 0.0), np.maximum(self.d2, 0.0),
                              self.flow, self.dchange)

    @classmethod
    def zeros(cls, height: int, width: int) -> "SceneFlowState":
        z = np.zeros((height, width))
        return cls(z, z, np.zeros((2, height, width)), z)


@dataclass(frozen=True)
class StereoClip:
    """Two rectified stereo pairs at consecutive times, plus optional backward flow."""

    l1: np.ndarray
    r1: np.ndarray
    l2: np.ndarray
    r2: np.ndarray
    flow_bwd: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        for name in ("l1", "r1", "l2", "r2"):
            object.__setattr__(self, name, as_image(getattr(self, name), name))
        if not (self.l1.shape == self.r1.shape == self.l2.shape == self.r2.shape):
            raise ValueError("all four images must share extent and channel count")
        if self.flow_bwd is not None:
            fb = _frozen(self.flow_bwd, 3, "flow_bwd")
            if fb.shape != (2,) + self.shape:
                raise ValueError(f"flow_bwd must have shape {(2,) + self.shape}")
            object.__setattr__(self, "flow_bwd", fb)

    @property
    def shape(self) -> tuple[int, int]:
        return self.l1.shape[1:]

    def with_backward_flow(self, flow_bwd) -> "StereoClip":
        return StereoClip(self.l1, self.r1, self.l2, self.r2, flow_bwd)


def pack_state(state: SceneFlowState) -> np.ndarray:
    """Stack into a ``(5, H, W)`` field ordered [d1, d2, F_x, F_y, dchange]."""
    return np.stack([state.d1, state.d2, state.flow[0], state.flow[1], state.dchange])


def unpack_state(packed, clamp: bool = True) -> SceneFlowState:
    """Inverse of :func:`pack_state`. Negative disparities are clamped to 0 unless ``clamp=False``."""
    packed = np.asarray(packed, dtype=np.float64)
    if packed.ndim != 3 or packed.shape[0] != NUM_STATE_CHANNELS:
        raise ValueError(
            f"expected a {NUM_STATE_CHANNELS}-channel field (5, H, W), got shape {packed.shape}")
    d1, d2 = packed[0], packed[1]
    if clamp:
        d1, d2 = np.maximum(d1, 0.0), np.maximum(d2, 0.0)
    return SceneFlowState(d1, d2, packed[2:4], packed[4])
