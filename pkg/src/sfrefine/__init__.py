"""Scene-flow consistency losses, analytic gradients and iterative refinement."""

from sfrefine.fields import SceneFlowState, StereoClip, pack_state, unpack_state

__all__ = ["SceneFlowState", "StereoClip", "pack_state", "unpack_state"]
__version__ = "0.1.0"
