"""Learned iterative refinement of scene flow, its training loop and the descent baseline.

The refiner is a 3-layer fully-convolutional net (3x3 kernels, ReLU between
layers) that maps ``[state (5), total-loss map (1), loss gradient (5)]`` to an
additive update of the state. It is applied recurrently for ``T`` steps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from sfrefine.consistency import LossBreakdown, LossWeights, OcclusionParams, PhotometricParams
from sfrefine.fields import NUM_STATE_CHANNELS, SceneFlowState, StereoClip, pack_state, unpack_state
from sfrefine.grad import consistency_gradient

log = logging.getLogger(__name__)

INPUT_CHANNELS = 11
KERNEL = 3
# Fixed per-channel input scaling to roughly unit rms on the synthetic data:
# d1, d2, F (2), C, loss map, gradient (d1, d2, F, F, C). Powers of two keep it exact.
INPUT_SCALE = np.array([1 / 16, 1 / 16, 1 / 2, 1 / 2, 1 / 2, 1 / 2, 4.0, 4.0, 1.0, 1.0, 4.0])


class TrainingDiverged(RuntimeError):
    pass


# -- network -----------------------------------------------------------------------

@dataclass
class RefinerParams:
    """Weights ``(out, in, 3, 3)`` and biases of the three conv layers."""

    weights: list
    biases: list

    @property
    def width(self) -> int:
        return self.weights[0].shape[0]

    def arrays(self) -> list:
        """Parameters in declaration order: w1, b1, w2, b2, w3, b3."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "RefinerParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]))

    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "RefinerParams":
        return RefinerParams.from_arrays([a.copy() for a in self.arrays()])


def layer_shapes(width: int) -> list:
    return [(width, INPUT_CHANNELS, KERNEL, KERNEL), (width, width, KERNEL, KERNEL),
            (NUM_STATE_CHANNELS, width, KERNEL, KERNEL)]


def init_params(width: int = 32, seed: int = 0, zero_final: bool = True) -> RefinerParams:
    """He-uniform fan-in init for the hidden layers; the output layer starts at zero."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for k, shape in enumerate(layer_shapes(width)):
        fan_in = shape[1] * shape[2] * shape[3]
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=shape)
        if k == 2 and zero_final:
            w = np.zeros(shape)
        weights.append(w)
        biases.append(np.zeros(shape[0]))
    return RefinerParams(weights, biases)


def _im2col(x: np.ndarray) -> np.ndarray:
    """``(C, H, W)`` -> ``(C*9, H*W)`` patches, zero padding 1, order (c, ky, kx)."""
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, KERNEL, KERNEL, h, w))
    for ky in range(KERNEL):
        for kx in range(KERNEL):
            cols[:, ky, kx] = xp[:, ky:ky + h, kx:kx + w]
    return cols.reshape(c * KERNEL * KERNEL, h * w)


def _col2im(cols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    cols = cols.reshape(c, KERNEL, KERNEL, h, w)
    xp = np.zeros((c, h + 2, w + 2))
    for ky in range(KERNEL):
        for kx in range(KERNEL):
            xp[:, ky:ky + h, kx:kx + w] += cols[:, ky, kx]
    return xp[:, 1:-1, 1:-1]


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, h, wd = x.shape
    out = w.reshape(w.shape[0], -1) @ _im2col(x) + b[:, None]
    return out.reshape(w.shape[0], h, wd)


@dataclass
class ForwardCache:
    inputs: list  # input of each layer
    pre: list  # pre-activations of layers 1 and 2


def refiner_forward(params: RefinerParams, x: np.ndarray, return_cache: bool = False):
    """Update ``conv3(relu(conv2(relu(conv1(s * x)))))`` with the same extent as ``x``.

    ``s`` is the fixed :data:`INPUT_SCALE`; without it the disparity channels
    dwarf the loss gradient and Adam's effective step differs per channel.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != params.weights[0].shape[1]:
        raise ValueError(f"refiner input must have {params.weights[0].shape[1]} channels, "
                         f"got shape {x.shape}")
    if x.shape[0] == INPUT_CHANNELS:
        x = x * INPUT_SCALE[:, None, None]
    inputs, pre = [x], []
    a = x
    for k in range(3):
        z = conv3x3(a, params.weights[k], params.biases[k])
        if k < 2:
            pre.append(z)
            a = np.maximum(z, 0.0)
            inputs.append(a)
        else:
            a = z
    if return_cache:
        return a, ForwardCache(inputs, pre)
    return a


def refiner_backward(params: RefinerParams, cache: ForwardCache, upstream: np.ndarray):
    """Exact gradients of ``sum(upstream * forward(x))``.

    Returns ``(RefinerParams of gradients, gradient w.r.t. the input)``.
    """
    g = np.asarray(upstream, dtype=np.float64)
    gw, gb = [None] * 3, [None] * 3
    for k in (2, 1, 0):
        a = cache.inputs[k]
        c, h, w = a.shape
        g2 = g.reshape(g.shape[0], -1)
        cols = _im2col(a)
        gw[k] = (g2 @ cols.T).reshape(params.weights[k].shape)
        gb[k] = g2.sum(axis=1)
        gcols = params.weights[k].reshape(params.weights[k].shape[0], -1).T @ g2
        g = _col2im(gcols, c, h, w)
        if k > 0:
            g = g * (cache.pre[k - 1] > 0)
    if g.shape[0] == INPUT_CHANNELS:
        g = g * INPUT_SCALE[:, None, None]
    return RefinerParams(gw, gb), g


def refiner_input(state: SceneFlowState, loss_map, grad, grad_scale: Optional[float] = None):
    """Stack ``[state (5), loss map (1), gradient (5)]`` into an ``(11, H, W)`` field.

    The gradient of the mean loss shrinks with image size, so it is rescaled
    by ``grad_scale`` (default: the pixel count) to per-pixel units.
    """
    packed = pack_state(state)
    loss_map = np.asarray(loss_map, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if loss_map.shape != state.shape or grad.shape != packed.shape:
        raise ValueError("refiner_input: state, loss map and gradient extents differ")
    if grad_scale is None:
        grad_scale = float(state.shape[0] * state.shape[1])
    return np.concatenate([packed, loss_map[None], grad * grad_scale])


# -- optimisation ------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Optional[list] = None
    v: Optional[list] = None


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update; returns new arrays and a new state."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("adam_step: parameter and gradient shapes differ")
    m = state.m if state.m is not None else [np.zeros_like(p) for p in params]
    v = state.v if state.v is not None else [np.zeros_like(p) for p in params]
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m = [b1 * mi + (1 - b1) * g for mi, g in zip(m, grads)]
    new_v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(v, grads)]
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new_p = [p - state.lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps)
             for p, mi, vi in zip(params, new_m, new_v)]
    return new_p, replace(state, step=t, m=new_m, v=new_v)


# -- losses ----------------------------------------------------------------------------

def supervised_loss(state: SceneFlowState, gt: SceneFlowState, valid=None,
                    supervise_d2: bool = False, return_grad: bool = False):
    """Mean over valid pixels of ||F - F*|| + |D1 - D1*| + |C - C*| (+ |D2 - D2*| if enabled).

    Returns ``(scalar, per-channel dict)`` or, with ``return_grad``, also the
    ``(5, H, W)`` gradient w.r.t. the packed state.
    """
    valid = np.ones(state.shape, bool) if valid is None else np.asarray(valid, bool)
    n = int(valid.sum())
    if n == 0:
        log.warning("supervised_loss: no valid pixels, returning 0")
        parts = dict(flow=0.0, d1=0.0, dchange=0.0, d2=0.0)
        if return_grad:
            return 0.0, parts, np.zeros((5,) + state.shape)
        return 0.0, parts
    df = state.flow - gt.flow
    fnorm = np.sqrt((df ** 2).sum(axis=0))
    e1 = state.d1 - gt.d1
    ec = state.dchange - gt.dchange
    e2 = state.d2 - gt.d2
    parts = dict(flow=float(fnorm[valid].sum() / n), d1=float(np.abs(e1)[valid].sum() / n),
                 dchange=float(np.abs(ec)[valid].sum() / n),
                 d2=float(np.abs(e2)[valid].sum() / n) if supervise_d2 else 0.0)
    total = parts["flow"] + parts["d1"] + parts["dchange"] + parts["d2"]
    if not return_grad:
        return total, parts
    g = np.zeros((5,) + state.shape)
    vm = valid / n
    g[0] = np.sign(e1) * vm
    if supervise_d2:
        g[1] = np.sign(e2) * vm
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(fnorm > 0, df / fnorm, 0.0)
    g[2:4] = unit * vm
    g[4] = np.sign(ec) * vm
    return total, parts, g


@dataclass
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    phot: PhotometricParams = field(default_factory=PhotometricParams)
    occ: OcclusionParams = field(default_factory=OcclusionParams)


# -- refinement ----------------------------------------------------------------------

@dataclass
class RefineTrajectory:
    states: list  # X^0 .. X^T
    losses: list  # LossBreakdown per state
    metrics: Optional[list] = None


def _step_update(state: SceneFlowState, delta: np.ndarray):
    pre = pack_state(state) + delta
    return unpack_state(pre), pre


def refine_iterate(clip: StereoClip, x0: SceneFlowState, params: RefinerParams, steps: int = 5,
                   loss_cfg: LossConfig = LossConfig(), gt: Optional[SceneFlowState] = None,
                   valid=None) -> RefineTrajectory:
    """Apply the refiner ``steps`` times, recomputing mask, loss and gradient at every step."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    states, losses = [x0], []
    x = x0
    for _ in range(steps):
        g, bd = consistency_gradient(clip, x, loss_cfg.weights, loss_cfg.phot, loss_cfg.occ)
        losses.append(bd)
        delta = refiner_forward(params, refiner_input(x, bd.total_map, g))
        x, _ = _step_update(x, delta)
        states.append(x)
    _, bd = consistency_gradient(clip, x, loss_cfg.weights, loss_cfg.phot, loss_cfg.occ)
    losses.append(bd)
    traj = RefineTrajectory(states, losses)
    if gt is not None:
        from sfrefine.metrics import trajectory_report
        traj.metrics = trajectory_report(traj, gt, valid)
    return traj


def descent_step(clip: StereoClip, state: SceneFlowState, lr: float,
                 loss_cfg: LossConfig = LossConfig()):
    """Output fine-tuning: ``X - lr * grad L_cst`` followed by the disparity clamp.

    Returns ``(new state, breakdown at the old state)``.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    g, bd = consistency_gradient(clip, state, loss_cfg.weights, loss_cfg.phot, loss_cfg.occ)
    return unpack_state(pack_state(state) - lr * g), bd


def descent_iterate(clip: StereoClip, x0: SceneFlowState, lr: float, steps: int,
                    loss_cfg: LossConfig = LossConfig(), gt: Optional[SceneFlowState] = None,
                    valid=None) -> RefineTrajectory:
    states, losses = [x0], []
    x = x0
    for _ in range(steps):
        x, bd = descent_step(clip, x, lr, loss_cfg)
        losses.append(bd)
        states.append(x)
    _, bd = consistency_gradient(clip, x, loss_cfg.weights, loss_cfg.phot, loss_cfg.occ)
    losses.append(bd)
    traj = RefineTrajectory(states, losses)
    if gt is not None:
        from sfrefine.metrics import trajectory_report
        traj.metrics = trajectory_report(traj, gt, valid)
    return traj


# -- training ------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 5
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    width: int = 32
    mode: str = "sup"  # "sup" or "selfsup"
    seed: int = 0
    epochs: int = 1
    supervise_d2: bool = False
    loss: LossConfig = field(default_factory=LossConfig)


@dataclass
class TrainingExample:
    clip: StereoClip  # must carry a backward flow
    x0: SceneFlowState
    gt: Optional[SceneFlowState] = None
    valid: Optional[np.ndarray] = None


def _step_loss(x: SceneFlowState, ex: TrainingExample, cfg: TrainConfig, cst=None):
    """(loss, d loss / d packed state) for one state along the unroll."""
    if cfg.mode == "sup":
        if ex.gt is None:
            raise ValueError("supervised training needs ground truth on every example")
        val, _, g = supervised_loss(x, ex.gt, ex.valid, cfg.supervise_d2, return_grad=True)
        return val, g
    if cfg.mode == "selfsup":
        g, bd = cst if cst is not None else consistency_gradient(
            ex.clip, x, cfg.loss.weights, cfg.loss.phot, cfg.loss.occ)
        return bd.total, g
    raise ValueError(f"unknown training mode {cfg.mode!r}")


def unrolled_objective(params: RefinerParams, ex: TrainingExample, cfg: TrainConfig,
                       need_grad: bool = True):
    """Sum of the per-step losses over X^0..X^T and its gradient w.r.t. the refiner params.

    Loss and gradient input channels are constant features of each step; the
    state path (identity skip + refiner input) is differentiated through.
    """
    lc = cfg.loss
    x = ex.x0
    caches, pres, step_grads = [], [], []
    total = 0.0
    for t in range(cfg.steps + 1):
        last = t == cfg.steps
        # the final state only feeds the refiner in self-supervised mode
        cst = None if last and cfg.mode == "sup" else consistency_gradient(
            ex.clip, x, lc.weights, lc.phot, lc.occ)
        val, gl = _step_loss(x, ex, cfg, cst)
        total += val
        step_grads.append(gl)
        if last:
            break
        g, bd = cst
        delta, cache = refiner_forward(params, refiner_input(x, bd.total_map, g),
                                       return_cache=True)
        x, pre = _step_update(x, delta)
        caches.append(cache)
        pres.append(pre)
    if not need_grad:
        return total, None
    grads = [np.zeros_like(a) for a in params.arrays()]
    carry = np.zeros_like(step_grads[0])
    for t in range(cfg.steps, 0, -1):
        g_x = step_grads[t] + carry
        pass_mask = np.ones_like(g_x)
        pass_mask[:2] = pres[t - 1][:2] > 0  # disparity clamp
        g_pre = g_x * pass_mask
        pg, g_in = refiner_backward(params, caches[t - 1], g_pre)
        for acc, gi in zip(grads, pg.arrays()):
            acc += gi
        carry = g_pre + g_in[:NUM_STATE_CHANNELS]
    return total, grads


def train_refiner(dataset: Sequence[TrainingExample], config: TrainConfig = TrainConfig(),
                  params: Optional[RefinerParams] = None, callback=None):
    """Minimise the summed per-step loss with Adam, one update per clip.

    Returns ``(params, history)`` where history holds the mean objective per epoch.
    """
    if len(dataset) == 0:
        raise ValueError("train_refiner: empty dataset")
    if params is None:
        params = init_params(config.width, config.seed)
    arrays = [a.copy() for a in params.arrays()]
    opt = AdamState(config.lr, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        objs = []
        for i in order:
            cur = RefinerParams.from_arrays(arrays)
            obj, grads = unrolled_objective(cur, dataset[i], config)
            if not np.isfinite(obj) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(f"non-finite loss or gradient at epoch {epoch}, clip {i}")
            arrays, opt = adam_step(arrays, grads, opt)
            objs.append(obj)
        history.append(float(np.mean(objs)))
        log.info("epoch %d: mean objective %.6f", epoch, history[-1])
        if callback is not None:
            callback(epoch, RefinerParams.from_arrays(arrays), history[-1])
    return RefinerParams.from_arrays(arrays), history
