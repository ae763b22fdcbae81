"""
The tri-frame unit: encode a frame triplet, correlate the center frame with
both neighbors and refine its two flows with a gated recurrent updater.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corr import DualCorrelationVolume, LookupWindowSpec, build_dual_corr, lookup
from .errors import ShapeError
from .layers import Conv2d, ConvGRU, Module
from .models import ModelConfig
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class FlowPair:
    """Flows from the center frame to its previous and next frame, 2×H×W each."""

    f_prev: Tensor
    f_next: Tensor

    def __post_init__(self):
        if self.f_prev.shape != self.f_next.shape or self.f_prev.shape[:1] != (2,):
            raise ShapeError(f"flow pair shapes differ: {self.f_prev.shape}, {self.f_next.shape}")

    @classmethod
    def zeros(cls, height: int, width: int) -> FlowPair:
        zero = np.zeros((2, height, width))
        return cls(Tensor(zero), Tensor(zero))

    @classmethod
    def from_channels(cls, flows: Tensor) -> FlowPair:
        return cls(T.slice_channels(flows, 0, 2), T.slice_channels(flows, 2, 4))

    def stacked(self) -> Tensor:
        return T.concat_channels([self.f_prev, self.f_next])

    def __add__(self, other: FlowPair) -> FlowPair:
        return FlowPair(self.f_prev + other.f_prev, self.f_next + other.f_next)


@dataclass
class TrofState:
    hidden: Tensor
    context: Tensor
    flows: FlowPair
    iteration: int = 0

    @classmethod
    def initial(cls, context: Tensor) -> TrofState:
        _, height, width = context.shape
        return cls(hidden=context, context=context, flows=FlowPair.zeros(height, width))


class ConvEncoder(Module):
    """Stride-1 conv blocks, each followed by a 2×2 mean pool, then a 3×3 projection."""

    def __init__(self, in_channels: int, out_channels: int, downsample: int, rng: np.random.Generator):
        pools = int(math.log2(downsample))
        first = max(out_channels // 2, 1)
        widths = [first] + [out_channels] * max(pools - 1, 0)
        self.blocks: list[Conv2d] = []
        channels = in_channels
        for width in widths:
            self.blocks.append(Conv2d(channels, width, 3, rng))
            channels = width
        self.pools = pools
        self.head = Conv2d(channels, out_channels, 3, rng)

    def __call__(self, image: Tensor) -> Tensor:
        x = 2.0 * image - 1.0
        for index, block in enumerate(self.blocks):
            x = T.relu(block(x))
            if index < self.pools:
                x = T.avg_pool2(x)
        return self.head(x)


class FeatureEncoder(ConvEncoder):
    pass


class ContextEncoder(ConvEncoder):
    def __call__(self, image: Tensor) -> Tensor:
        return T.tanh(super().__call__(image))


class CorrEncoder(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_channels, out_channels, 1, rng)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng)

    def __call__(self, corr: Tensor) -> Tensor:
        return T.relu(self.conv2(T.relu(self.conv1(corr))))


class FlowEncoder(Module):
    def __init__(self, out_channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(4, out_channels, 7, rng)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng)

    def __call__(self, flows: Tensor) -> Tensor:
        return T.relu(self.conv2(T.relu(self.conv1(flows))))


class MotionEncoderTrof(Module):
    def __init__(self, corr_dim: int, flow_dim: int, motion_dim: int, rng: np.random.Generator):
        self.conv = Conv2d(corr_dim + flow_dim, motion_dim, 3, rng)

    def __call__(self, features: Tensor) -> Tensor:
        return T.relu(self.conv(features))


class FlowHead(Module):
    def __init__(self, hidden_dim: int, rng: np.random.Generator):
        self.conv1 = Conv2d(hidden_dim, hidden_dim, 3, rng)
        self.conv2 = Conv2d(hidden_dim, 4, 3, rng)

    def __call__(self, hidden: Tensor) -> Tensor:
        return self.conv2(T.relu(self.conv1(hidden)))


class FlowParams(Module):
    """Weights shared by the tri-frame unit and the multi-frame model."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.feature_encoder = FeatureEncoder(
            config.in_channels, config.feature_dim, config.downsample, rng
        )
        self.context_encoder = ContextEncoder(
            config.in_channels, config.hidden_dim, config.downsample, rng
        )
        self.corr_encoder = CorrEncoder(2 * self.lookup_spec.channels, config.corr_dim, rng)
        self.flow_encoder = FlowEncoder(config.flow_dim, rng)
        self.updater = ConvGRU(
            config.hidden_dim,
            config.motion_dim + config.hidden_dim,
            rng,
            large_kernel=config.large_kernel_updater,
        )
        self.flow_head = FlowHead(config.hidden_dim, rng)

    @property
    def lookup_spec(self) -> LookupWindowSpec:
        return LookupWindowSpec(levels=self.config.corr_levels, radius=self.config.corr_radius)

    @property
    def downsample(self) -> int:
        return self.config.downsample


class TrofParams(FlowParams):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config, rng)
        self.motion_encoder = MotionEncoderTrof(
            config.corr_dim, config.flow_dim, config.motion_dim, rng
        )


def check_frames(frames: Sequence[Tensor], downsample: int) -> None:
    shapes = {frame.shape for frame in frames}
    if len(shapes) != 1:
        raise ShapeError(f"frames differ in shape: {sorted(shapes)}")
    shape = frames[0].shape
    if len(shape) != 3:
        raise ShapeError(f"frames must be C×H×W, got {shape}")
    if shape[1] % downsample or shape[2] % downsample:
        raise ShapeError(f"frame size {shape[1]}×{shape[2]} is not divisible by {downsample}")


def encode_features(
    frames: Sequence[Tensor | np.ndarray], params: FlowParams
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Return (feat_prev, feat_center, feat_next, context) for a frame triplet."""
    if len(frames) != 3:
        raise ShapeError(f"a triplet needs 3 frames, got {len(frames)}")
    prev, center, nxt = (T.as_tensor(f) for f in frames)
    check_frames([prev, center, nxt], params.downsample)
    encoder = params.feature_encoder
    return encoder(prev), encoder(center), encoder(nxt), params.context_encoder(center)


def corr_flow_encode(
    c_prev: Tensor, c_next: Tensor, flows: FlowPair, params: FlowParams
) -> tuple[Tensor, Tensor]:
    expected = params.lookup_spec.channels
    if c_prev.shape[0] != expected or c_next.shape[0] != expected:
        raise ShapeError(
            f"lookups carry {c_prev.shape[0]} and {c_next.shape[0]} channels, expected {expected}"
        )
    f_corr = params.corr_encoder(T.concat_channels([c_prev, c_next]))
    f_flow = params.flow_encoder(flows.stacked())
    return f_corr, f_flow


def motion_encode_trof(f_corr: Tensor, f_flow: Tensor, params: TrofParams) -> Tensor:
    return params.motion_encoder(T.concat_channels([f_corr, f_flow]))


def update_step(
    f_motion: Tensor, context: Tensor, hidden: Tensor, params: FlowParams
) -> tuple[Tensor, FlowPair]:
    hidden = params.updater(hidden, f_motion, context)
    return hidden, FlowPair.from_channels(params.flow_head(hidden))


def upsample_flow(flow: Tensor, scale: int) -> Tensor:
    """Bilinear ×scale upsampling of a 2×H×W flow, values multiplied by scale."""
    if scale == 1:
        return flow
    _, height, width = flow.shape
    grid = T.coordinate_grid(height * scale, width * scale)
    coords = (grid + 0.5) / scale - 0.5
    return T.bilinear_sample(flow, Tensor(coords)) * float(scale)


def upsample_pair(flows: FlowPair, scale: int) -> FlowPair:
    return FlowPair(upsample_flow(flows.f_prev, scale), upsample_flow(flows.f_next, scale))


def trof_step(
    volume: DualCorrelationVolume, state: TrofState, params: TrofParams
) -> tuple[TrofState, FlowPair]:
    c_prev, c_next = lookup(volume, state.flows, params.lookup_spec)
    f_corr, f_flow = corr_flow_encode(c_prev, c_next, state.flows, params)
    f_motion = motion_encode_trof(f_corr, f_flow, params)
    hidden, delta = update_step(f_motion, state.context, state.hidden, params)
    flows = state.flows + delta
    return TrofState(hidden, state.context, flows, state.iteration + 1), delta


def trof_forward(
    frames: Sequence[Tensor | np.ndarray], params: TrofParams, iters: int
) -> tuple[list[FlowPair], list[FlowPair]]:
    """Refine a triplet's center flows ``iters`` times.

    Returns the predictions at feature resolution and at image resolution.
    """
    if iters < 1:
        raise ValueError(f"iters must be at least 1, got {iters}")
    feat_prev, feat_center, feat_next, context = encode_features(frames, params)
    volume = build_dual_corr(
        feat_center, feat_prev, feat_next, params.config.corr_levels, params.config.normalize_corr
    )
    state = TrofState.initial(context)
    low, high = [], []
    for _ in range(iters):
        state, _ = trof_step(volume, state, params)
        low.append(state.flows)
        high.append(upsample_pair(state.flows, params.downsample))
    logger.debug("trof forward: %d iterations at %s", iters, context.shape[1:])
    return low, high
