"""
Dual correlation volumes of a center frame against its two neighbors, with
multi-scale windowed lookups around the current flow targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

if TYPE_CHECKING:
    from .trof import FlowPair


@dataclass(frozen=True)
class LookupWindowSpec:
    levels: int = 2
    radius: int = 3

    @property
    def channels(self) -> int:
        """Lookup channels per direction."""
        return self.levels * (2 * self.radius + 1) ** 2


@dataclass
class DualCorrelationVolume:
    corr_prev: Tensor
    corr_next: Tensor
    pyramid_prev: list[Tensor]
    pyramid_next: list[Tensor]
    scale_norm: float


def correlation_volume(source: Tensor, target: Tensor, scale: float = 1.0) -> Tensor:
    """All-pairs dot products as an H×W×H×W tensor, source pixel first."""
    if source.ndim != 3 or source.shape != target.shape:
        raise ShapeError(f"correlation needs matching D×H×W features, got {source.shape}, {target.shape}")
    depth, height, width = source.shape
    a = T.reshape(source, (depth, height * width))
    b = T.reshape(target, (depth, height * width))
    dots = T.matmul(T.permute(a, (1, 0)), b)
    if scale != 1.0:
        dots = dots * scale
    return T.reshape(dots, (height, width, height, width))


def build_pyramid(volume: Tensor, levels: int) -> list[Tensor]:
    if levels < 1:
        raise ShapeError(f"a pyramid needs at least one level, got {levels}")
    pyramid = [volume]
    for _ in range(levels - 1):
        pyramid.append(T.avg_pool2(pyramid[-1]))
    return pyramid


def build_dual_corr(
    feat_center: Tensor,
    feat_prev: Tensor,
    feat_next: Tensor,
    levels: int,
    normalize: bool = True,
) -> DualCorrelationVolume:
    if not feat_center.shape == feat_prev.shape == feat_next.shape:
        raise ShapeError(
            "tri-frame features differ in shape: "
            f"center {feat_center.shape}, prev {feat_prev.shape}, next {feat_next.shape}"
        )
    scale = 1.0 / math.sqrt(feat_center.shape[0]) if normalize else 1.0
    corr_prev = correlation_volume(feat_center, feat_prev, scale)
    corr_next = correlation_volume(feat_center, feat_next, scale)
    return DualCorrelationVolume(
        corr_prev=corr_prev,
        corr_next=corr_next,
        pyramid_prev=build_pyramid(corr_prev, levels),
        pyramid_next=build_pyramid(corr_next, levels),
        scale_norm=scale,
    )


def _window_offsets(radius: int) -> np.ndarray:
    # dy outer, dx inner
    span = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()]).astype(T.get_default_dtype())[:, None, :]


def lookup_pyramid(pyramid: list[Tensor], flow: Tensor, spec: LookupWindowSpec) -> Tensor:
    """Sample a (2r+1)² window per level around each pixel's flow target."""
    if spec.levels > len(pyramid):
        raise ShapeError(f"lookup wants {spec.levels} levels, the volume has {len(pyramid)}")
    height, width = pyramid[0].shape[:2]
    if flow.shape != (2, height, width):
        raise ShapeError(f"flow of shape {flow.shape} does not match a {height}×{width} volume")
    targets = flow + T.coordinate_grid(height, width)
    offsets = Tensor(_window_offsets(spec.radius))
    window = offsets.shape[2]
    sampled = []
    for level in range(spec.levels):
        planes = pyramid[level]
        h_l, w_l = planes.shape[2:]
        planes = T.reshape(planes, (height * width, h_l, w_l))
        centers = T.reshape(targets * (1.0 / 2**level), (2, height * width, 1))
        values = T.sample_planes(planes, centers + offsets)
        sampled.append(T.reshape(T.permute(values, (1, 0)), (window, height, width)))
    return T.concat_channels(sampled)


def lookup(
    vol: DualCorrelationVolume, flows: FlowPair, spec: LookupWindowSpec
) -> tuple[Tensor, Tensor]:
    c_prev = lookup_pyramid(vol.pyramid_prev, flows.f_prev, spec)
    c_next = lookup_pyramid(vol.pyramid_next, flows.f_next, spec)
    return c_prev, c_next
