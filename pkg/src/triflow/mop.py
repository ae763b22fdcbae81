"""
Motion propagation across overlapping tri-frame units of a longer clip.

Every unit keeps a motion state. At each refinement iteration a unit warps
its neighbors' states along its own current flows and feeds them, with its
own state, into the motion encoder. All units read the states of iteration
k and commit the states of iteration k+1 together, so the processing order
within an iteration never matters.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from contextvars import copy_context
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corr import DualCorrelationVolume, build_dual_corr, lookup_pyramid
from .errors import ShapeError
from .layers import Conv2d, Module, init_parameter
from .models import AblationFlags, ModelConfig
from .tensor import Tensor
from .trof import (
    FlowPair,
    FlowParams,
    check_frames,
    corr_flow_encode,
    encode_features,
    update_step,
    upsample_pair,
)

logger = logging.getLogger(__name__)

PREV, NEXT = "prev", "next"


@dataclass
class MotionState:
    state: Tensor
    center_index: int
    iteration: int = 0


@dataclass(frozen=True)
class ClipLayout:
    frame_count: int
    center_indices: tuple[int, ...]

    @classmethod
    def for_frames(cls, frame_count: int) -> ClipLayout:
        if frame_count < 3:
            raise ShapeError(f"a clip needs at least 3 frames, got {frame_count}")
        return cls(frame_count, tuple(range(1, frame_count - 1)))

    @property
    def units(self) -> int:
        return len(self.center_indices)


class MotionEncoderMop(Module):
    """One trunk over (F_corr, F_flow, M_self, m_fwd, m_bwd), two 3×3 heads."""

    def __init__(self, corr_dim: int, flow_dim: int, motion_dim: int, rng: np.random.Generator):
        self.corr_dim, self.flow_dim, self.motion_dim = corr_dim, flow_dim, motion_dim
        self.trunk = Conv2d(corr_dim + flow_dim + 3 * motion_dim, motion_dim, 3, rng)
        self.motion_head = Conv2d(motion_dim, motion_dim, 3, rng)
        self.state_head = Conv2d(motion_dim, motion_dim, 3, rng)

    @property
    def neighbor_channels(self) -> slice:
        """Trunk input channels fed by the two warped neighbor states."""
        start = self.corr_dim + self.flow_dim + self.motion_dim
        return slice(start, start + 2 * self.motion_dim)

    def __call__(self, features: Tensor) -> tuple[Tensor, Tensor]:
        trunk = T.relu(self.trunk(features))
        return T.relu(self.motion_head(trunk)), T.tanh(self.state_head(trunk))


class VideoFlowParams(FlowParams):
    def __init__(
        self,
        config: ModelConfig,
        rng: np.random.Generator,
        ablation: AblationFlags | None = None,
    ):
        super().__init__(config, rng)
        self.ablation = ablation or AblationFlags()
        self.motion_encoder = MotionEncoderMop(
            config.corr_dim, config.flow_dim, config.motion_dim, rng
        )
        self.initial_state = init_parameter(
            rng, (config.motion_dim, 1, 1), config.motion_dim, name="initial_state"
        )
        self.fusion_head: Conv2d | None = None
        if not self.ablation.recurrent_fusion:
            self.fusion_head = Conv2d(2 * config.hidden_dim, 4, 3, rng)

    def initial_motion(self, height: int, width: int) -> Tensor:
        return T.expand(self.initial_state, (self.config.motion_dim, height, width))


def warp_state(neighbor_state: Tensor, flow: Tensor) -> Tensor:
    """Backward-warp a D×H×W state: output(x) samples the state at x + flow(x)."""
    if flow.shape != (2, *neighbor_state.shape[1:]):
        raise ShapeError(f"flow {flow.shape} does not match state {neighbor_state.shape}")
    coords = flow + T.coordinate_grid(*neighbor_state.shape[1:])
    return T.bilinear_sample(neighbor_state, coords)


def motion_encode_mop(
    f_corr: Tensor,
    f_flow: Tensor,
    m_self: Tensor,
    m_fwd: Tensor,
    m_bwd: Tensor,
    params: VideoFlowParams,
) -> tuple[Tensor, Tensor]:
    """Return (F_m, M_next) for one unit."""
    motion_dim = params.config.motion_dim
    for name, state in (("M_self", m_self), ("m_fwd", m_fwd), ("m_bwd", m_bwd)):
        if state.shape[0] != motion_dim:
            raise ShapeError(f"{name} has {state.shape[0]} channels, expected {motion_dim}")
    features = T.concat_channels([f_corr, f_flow, m_self, m_fwd, m_bwd])
    return params.motion_encoder(features)


@dataclass
class LaneState:
    """Recurrent state of one unit along one lane."""

    hidden: Tensor
    flows: FlowPair
    motion: MotionState


@dataclass
class CenterPredictions:
    center: int
    low: list[FlowPair] = field(default_factory=list)
    high: list[FlowPair] = field(default_factory=list)


@dataclass
class _Clip:
    params: VideoFlowParams
    flags: AblationFlags
    layout: ClipLayout
    volumes: dict[int, DualCorrelationVolume]
    contexts: dict[int, Tensor]
    initial: Tensor
    lanes: tuple[tuple[str, ...], ...]

    def neighbor(self, states: dict[int, list[LaneState]], t: int, lane: int) -> Tensor | None:
        if t not in states or not self.flags.mop:
            return None
        return states[t][lane].motion.state

    def step(self, states: dict[int, list[LaneState]], t: int) -> list[LaneState]:
        return [self.step_lane(states, t, lane) for lane in range(len(self.lanes))]

    def step_lane(self, states: dict[int, list[LaneState]], t: int, lane: int) -> LaneState:
        directions = self.lanes[lane]
        current = states[t][lane]
        flows = current.flows
        spec = self.params.lookup_spec
        volume = self.volumes[t]
        height, width = flows.f_prev.shape[1:]
        silent = Tensor(np.zeros((spec.channels, height, width)))
        c_prev = c_next = silent
        if PREV in directions:
            c_prev = lookup_pyramid(volume.pyramid_prev, flows.f_prev, spec)
        if NEXT in directions:
            c_next = lookup_pyramid(volume.pyramid_next, flows.f_next, spec)
        f_corr, f_flow = corr_flow_encode(c_prev, c_next, flows, self.params)

        m_fwd = m_bwd = self.initial
        before = self.neighbor(states, t - 1, lane)
        after = self.neighbor(states, t + 1, lane)
        if before is not None and PREV in directions:
            m_bwd = warp_state(before, flows.f_prev)
        if after is not None and NEXT in directions:
            m_fwd = warp_state(after, flows.f_next)
        f_motion, motion = motion_encode_mop(
            f_corr, f_flow, current.motion.state, m_fwd, m_bwd, self.params
        )
        hidden, delta = update_step(f_motion, self.contexts[t], current.hidden, self.params)
        if len(directions) == 2:
            flows = flows + delta
        elif directions == (PREV,):
            flows = FlowPair(flows.f_prev + delta.f_prev, flows.f_next)
        else:
            flows = FlowPair(flows.f_prev, flows.f_next + delta.f_next)
        return LaneState(hidden, flows, MotionState(motion, t, current.motion.iteration + 1))

    def combined(self, lanes: list[LaneState]) -> FlowPair:
        if len(lanes) == 1:
            return lanes[0].flows
        return FlowPair(lanes[0].flows.f_prev, lanes[1].flows.f_next)

    def fused(self, lanes: list[LaneState]) -> FlowPair:
        head = self.params.fusion_head
        flows = self.combined(lanes)
        if self.flags.recurrent_fusion or head is None:
            return flows
        hidden = T.concat_channels([lanes[0].hidden, lanes[-1].hidden])
        return flows + FlowPair.from_channels(head(hidden))


def _lanes(flags: AblationFlags) -> tuple[tuple[str, ...], ...]:
    if flags.bidirectional and flags.recurrent_fusion:
        return ((PREV, NEXT),)
    return ((PREV,), (NEXT,))


def videoflow_forward(
    frames: Sequence[Tensor | np.ndarray],
    params: VideoFlowParams,
    iters: int,
    flags: AblationFlags | None = None,
    order: Sequence[int] | None = None,
    threads: int = 1,
) -> list[CenterPredictions]:
    """Jointly refine the bi-directional flows of every center frame of a clip.

    ``order`` permutes the processing of centers within an iteration and
    ``threads`` runs them on a pool; neither changes the result.
    """
    if iters < 1:
        raise ValueError(f"iters must be at least 1, got {iters}")
    flags = flags or params.ablation
    if not flags.recurrent_fusion and params.fusion_head is None:
        raise ValueError("one-shot fusion requested but the parameters carry no fusion head")
    layout = ClipLayout.for_frames(len(frames))
    images = [T.as_tensor(frame) for frame in frames]
    check_frames(images, params.downsample)
    features = [params.feature_encoder(image) for image in images]
    contexts = {t: params.context_encoder(images[t]) for t in layout.center_indices}
    volumes = {
        t: build_dual_corr(
            features[t],
            features[t - 1],
            features[t + 1],
            params.config.corr_levels,
            params.config.normalize_corr,
        )
        for t in layout.center_indices
    }
    height, width = features[0].shape[1:]
    clip = _Clip(
        params=params,
        flags=flags,
        layout=layout,
        volumes=volumes,
        contexts=contexts,
        initial=params.initial_motion(height, width),
        lanes=_lanes(flags),
    )
    states = {
        t: [
            LaneState(contexts[t], FlowPair.zeros(height, width), MotionState(clip.initial, t))
            for _ in clip.lanes
        ]
        for t in layout.center_indices
    }
    schedule = list(order) if order is not None else list(layout.center_indices)
    if sorted(schedule) != list(layout.center_indices):
        raise ValueError(f"order {schedule} is not a permutation of {layout.center_indices}")
    predictions = {t: CenterPredictions(t) for t in layout.center_indices}

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for k in range(iters):
            if pool is None:
                updated = {t: clip.step(states, t) for t in schedule}
            else:
                futures = {t: pool.submit(copy_context().run, clip.step, states, t) for t in schedule}
                updated = {t: future.result() for t, future in futures.items()}
            states = updated
            last = k == iters - 1
            for t in layout.center_indices:
                flows = clip.fused(states[t]) if last else clip.combined(states[t])
                predictions[t].low.append(flows)
                predictions[t].high.append(upsample_pair(flows, params.downsample))
    finally:
        if pool is not None:
            pool.shutdown()
    logger.debug("videoflow forward: %d centers, %d iterations", layout.units, iters)
    return [predictions[t] for t in layout.center_indices]


def trof_forward_with_placeholders(
    frames: Sequence[Tensor | np.ndarray], params: VideoFlowParams, iters: int
) -> tuple[list[FlowPair], list[FlowPair]]:
    """Tri-frame refinement whose neighbor inputs are always the learned initial state."""
    if iters < 1:
        raise ValueError(f"iters must be at least 1, got {iters}")
    feat_prev, feat_center, feat_next, context = encode_features(frames, params)
    volume = build_dual_corr(
        feat_center, feat_prev, feat_next, params.config.corr_levels, params.config.normalize_corr
    )
    height, width = context.shape[1:]
    initial = params.initial_motion(height, width)
    spec = params.lookup_spec
    hidden, flows, motion = context, FlowPair.zeros(height, width), initial
    low, high = [], []
    for _ in range(iters):
        c_prev = lookup_pyramid(volume.pyramid_prev, flows.f_prev, spec)
        c_next = lookup_pyramid(volume.pyramid_next, flows.f_next, spec)
        f_corr, f_flow = corr_flow_encode(c_prev, c_next, flows, params)
        f_motion, motion = motion_encode_mop(f_corr, f_flow, motion, initial, initial, params)
        hidden, delta = update_step(f_motion, context, hidden, params)
        flows = flows + delta
        low.append(flows)
        high.append(upsample_pair(flows, params.downsample))
    return low, high
