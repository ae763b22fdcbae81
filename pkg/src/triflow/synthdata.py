"""
Synthetic multi-frame scenes with exact bi-directional ground truth.

A scene is a textured background plus rigid sprites. Sprite i sits at
A_{i,t}(q) = c_i + t·T_i + R(t·θ_i)·q for a point q in its own frame, so the
flow of any pixel between two frames follows in closed form.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import settings
from .errors import SceneError
from .models import DataConfig, SceneSpec, SpriteSpec

logger = logging.getLogger(__name__)

TEXTURE_SPACING = 3.0
TEXTURE_MARGIN = 2.0


def _rotate(points: np.ndarray, angle: float) -> np.ndarray:
    cos, sin = math.cos(angle), math.sin(angle)
    x, y = points[0], points[1]
    return np.stack([cos * x - sin * y, sin * x + cos * y])


def _texture(seed: int, channels: int, width: float, height: float) -> np.ndarray:
    rng = np.random.default_rng(seed)
    cols = int(math.ceil(width / TEXTURE_SPACING)) + 2
    rows = int(math.ceil(height / TEXTURE_SPACING)) + 2
    return rng.uniform(0.05, 0.95, size=(channels, rows, cols))


def _sample(texture: np.ndarray, coords: np.ndarray) -> np.ndarray:
    with T.no_grad():
        values = T.bilinear_sample(T.Tensor(texture), T.Tensor(coords))
    return values.data.astype(np.float64)


@dataclass
class _Layer:
    """One rigid layer; the background is a sprite covering everything."""

    center: np.ndarray
    translation: np.ndarray
    rotation: float
    half_size: np.ndarray
    shape: str | None
    texture: np.ndarray
    origin: np.ndarray

    def to_local(self, points: np.ndarray, t: float) -> np.ndarray:
        offset = self.center + t * self.translation
        return _rotate(points - offset[:, None, None], -t * self.rotation)

    def to_world(self, local: np.ndarray, t: float) -> np.ndarray:
        offset = self.center + t * self.translation
        return _rotate(local, t * self.rotation) + offset[:, None, None]

    def contains(self, local: np.ndarray) -> np.ndarray:
        qx, qy = local[0] / self.half_size[0], local[1] / self.half_size[1]
        if self.shape is None:
            return np.ones(qx.shape, dtype=bool)
        if self.shape == "ellipse":
            return qx * qx + qy * qy <= 1.0
        return (np.abs(qx) <= 1.0) & (np.abs(qy) <= 1.0)

    def flow(self, points: np.ndarray, t: int, s: int) -> np.ndarray:
        return self.to_world(self.to_local(points, t), s) - points

    def colors(self, local: np.ndarray) -> np.ndarray:
        coords = (local - self.origin[:, None, None]) / TEXTURE_SPACING
        return _sample(self.texture, coords)


def _layers(spec: SceneSpec) -> list[_Layer]:
    height, width = spec.height, spec.width
    reach = np.abs(np.asarray(spec.background_translation)) * (spec.frame_count - 1)
    extent = np.array([width, height], dtype=np.float64) + 2 * (reach + TEXTURE_MARGIN)
    layers = [
        _Layer(
            center=np.zeros(2),
            translation=np.asarray(spec.background_translation, dtype=np.float64),
            rotation=0.0,
            half_size=np.array([width, height], dtype=np.float64),
            shape=None,
            texture=_texture(spec.background_seed, spec.channels, *extent),
            origin=-(reach + TEXTURE_MARGIN),
        )
    ]
    for sprite in sorted(spec.sprites, key=lambda s: s.depth):
        half = np.asarray(sprite.half_size, dtype=np.float64)
        layers.append(
            _Layer(
                center=np.asarray(sprite.center, dtype=np.float64),
                translation=np.asarray(sprite.translation, dtype=np.float64),
                rotation=sprite.rotation,
                half_size=half,
                shape=sprite.shape,
                texture=_texture(sprite.texture_seed, spec.channels, *(2 * (half + TEXTURE_MARGIN))),
                origin=-(half + TEXTURE_MARGIN),
            )
        )
    return layers


def ownership(layers: list[_Layer], points: np.ndarray, t: int) -> np.ndarray:
    """Index of the top-most layer covering each point at time t."""
    owner = np.zeros(points.shape[1:], dtype=np.intp)
    for index, layer in enumerate(layers[1:], start=1):
        owner[layer.contains(layer.to_local(points, t))] = index
    return owner


@dataclass
class SyntheticSequence:
    """Frames and per-center ground truth; flow and mask dicts are keyed by frame index."""

    spec: SceneSpec
    frames: list[np.ndarray]
    gt_fwd: dict[int, np.ndarray]
    gt_bwd: dict[int, np.ndarray]
    valid: np.ndarray
    occl_fwd: dict[int, np.ndarray]
    occl_bwd: dict[int, np.ndarray]

    @property
    def centers(self) -> list[int]:
        return sorted(self.gt_fwd)


def _validate(spec: SceneSpec) -> None:
    if spec.frame_count < 3:
        raise SceneError(f"a sequence needs at least 3 frames, got {spec.frame_count}")
    for index, sprite in enumerate(spec.sprites):
        if min(sprite.half_size) <= 0:
            raise SceneError(f"sprite {index} has zero area: half size {sprite.half_size}")
        x, y = sprite.center
        if not (0 <= x <= spec.width - 1 and 0 <= y <= spec.height - 1):
            raise SceneError(f"sprite {index} starts outside the frame at {sprite.center}")


def generate_sequence(spec: SceneSpec) -> SyntheticSequence:
    _validate(spec)
    layers = _layers(spec)
    grid = T.coordinate_grid(spec.height, spec.width).astype(np.float64)
    owners = [ownership(layers, grid, t) for t in range(spec.frame_count)]

    frames = []
    for t, owner in enumerate(owners):
        frame = np.zeros((spec.channels, spec.height, spec.width))
        for index, layer in enumerate(layers):
            mask = owner == index
            if mask.any():
                frame[:, mask] = layer.colors(layer.to_local(grid, t))[:, mask]
        frames.append(np.clip(frame, 0.0, 1.0).astype(np.float32))

    def flow_and_occlusion(t: int, s: int) -> tuple[np.ndarray, np.ndarray]:
        flow = np.zeros((2, spec.height, spec.width))
        for index, layer in enumerate(layers):
            mask = owners[t] == index
            flow[:, mask] = layer.flow(grid, t, s)[:, mask]
        target = grid + flow
        outside = (
            (target[0] < 0)
            | (target[0] > spec.width - 1)
            | (target[1] < 0)
            | (target[1] > spec.height - 1)
        )
        covered = ownership(layers, target, s) != owners[t]
        return flow.astype(np.float32), outside | covered

    gt_fwd, gt_bwd, occl_fwd, occl_bwd = {}, {}, {}, {}
    for t in range(1, spec.frame_count - 1):
        gt_fwd[t], occl_fwd[t] = flow_and_occlusion(t, t + 1)
        gt_bwd[t], occl_bwd[t] = flow_and_occlusion(t, t - 1)
    return SyntheticSequence(
        spec=spec,
        frames=frames,
        gt_fwd=gt_fwd,
        gt_bwd=gt_bwd,
        valid=np.ones((spec.height, spec.width), dtype=bool),
        occl_fwd=occl_fwd,
        occl_bwd=occl_bwd,
    )


def sample_scene(distribution: DataConfig, rng: np.random.Generator, seed: int = 0) -> SceneSpec:
    height, width = distribution.height, distribution.width
    count = int(rng.integers(distribution.min_sprites, distribution.max_sprites + 1))
    depths = rng.permutation(count) + 1
    sprites = []
    for index in range(count):
        half = (
            float(rng.uniform(width / 10, width / 4)),
            float(rng.uniform(height / 10, height / 4)),
        )
        center = (
            float(rng.uniform(half[0], width - 1 - half[0])),
            float(rng.uniform(half[1], height - 1 - half[1])),
        )
        angle = rng.uniform(0, 2 * math.pi)
        speed = distribution.max_translation * math.sqrt(rng.uniform())
        sprites.append(
            SpriteSpec(
                shape=str(rng.choice(["rectangle", "ellipse"])),
                center=center,
                half_size=half,
                texture_seed=int(rng.integers(2**31)),
                depth=int(depths[index]),
                translation=(speed * math.cos(angle), speed * math.sin(angle)),
                rotation=float(rng.uniform(-1, 1) * distribution.max_rotation),
            )
        )
    background = (0.0, 0.0)
    if distribution.background_motion:
        angle = rng.uniform(0, 2 * math.pi)
        speed = 0.5 * distribution.max_translation * math.sqrt(rng.uniform())
        background = (speed * math.cos(angle), speed * math.sin(angle))
    return SceneSpec(
        height=height,
        width=width,
        channels=distribution.channels,
        frame_count=distribution.frame_count,
        background_seed=int(rng.integers(2**31)),
        background_translation=background,
        sprites=sprites,
        seed=seed,
    )


def scene_for(distribution: DataConfig, seed: int, index: int, stream: int = 0) -> SceneSpec:
    rng = np.random.default_rng([seed, stream, index])
    return sample_scene(distribution, rng, seed=seed)


def make_dataset(
    distribution: DataConfig,
    count: int,
    seed: int,
    out_dir: Path | None = None,
    threads: int | None = None,
    stream: int = 0,
) -> list[SyntheticSequence]:
    """Generate ``count`` sequences; scene i only depends on (seed, stream, i)."""
    if count < 1:
        raise SceneError(f"count must be at least 1, got {count}")
    specs = [scene_for(distribution, seed, index, stream) for index in range(count)]
    workers = threads or settings.threads
    with ThreadPoolExecutor(max_workers=workers) as pool:
        sequences = list(pool.map(generate_sequence, specs))
    if out_dir is not None:
        from .repositories import SequenceRepository

        repository = SequenceRepository(out_dir)
        for index, sequence in enumerate(sequences):
            repository.save(index, sequence)
        logger.info("wrote %d sequences to %s", count, out_dir)
    return sequences
