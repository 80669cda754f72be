import numpy as np
import pytest

from sfrefine.fields import SceneFlowState, StereoClip
from sfrefine.synth import Layer, SceneRanges, SceneSpec, generate, make_dataset

SMALL = SceneRanges(height=16, width=16, disparity=(1.0, 6.0), max_motion=1.5, max_ddisp=0.5,
                    max_slope=0.02, radius=(4.0, 8.0))


def perturbed(gt: SceneFlowState, sigma: float, rng) -> SceneFlowState:
    return SceneFlowState(gt.d1 + rng.normal(0, sigma, gt.shape),
                          gt.d2 + rng.normal(0, sigma, gt.shape),
                          gt.flow + rng.normal(0, sigma, gt.flow.shape),
                          gt.dchange + rng.normal(0, sigma, gt.shape)).clamped()


def small_scene(seed: int, sigma: float = 0.7):
    """16x16 synthetic clip with a state scattered around its ground truth."""
    sample = make_dataset(1, SMALL, seed=seed)[0]
    rng = np.random.default_rng(seed + 1000)
    return sample.clip, perturbed(sample.gt, sigma, rng), sample


def plane_sample(h=32, w=48, c=4.0, motion=(2.0, 0.0), ddisp=0.0, seed=0):
    spec = SceneSpec(h, w, (Layer((0.0, 0.0, c), motion, ddisp, None, seed),))
    return generate(spec)


def random_clip(h, w, rng, channels=1):
    imgs = [rng.uniform(0, 1, (channels, h, w)) for _ in range(4)]
    return StereoClip(*imgs, flow_bwd=rng.normal(0, 1, (2, h, w)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


REL_FLOOR = 1e-5  # relative errors are measured against max(|a|, |f|, REL_FLOOR * max|a|)


def grad_rel_error(analytic, fd, floor=REL_FLOOR):
    """Elementwise relative error with a floor tied to the gradient's overall scale.

    Central differences carry ~1e-12 absolute round-off, which swamps entries
    many orders of magnitude below the largest gradient component.
    """
    scale = floor * np.abs(analytic).max()
    return np.abs(analytic - fd) / np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), scale)


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE_LINES: list = []


def record(criterion: int, ok: bool, detail: str) -> bool:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
