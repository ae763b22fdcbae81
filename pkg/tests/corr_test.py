import math

import numpy as np
import pytest

from triflow import tensor as T
from triflow.corr import (
    LookupWindowSpec,
    build_dual_corr,
    build_pyramid,
    correlation_volume,
    lookup,
    lookup_pyramid,
)
from triflow.errors import ShapeError
from triflow.gradcheck import gradcheck
from triflow.tensor import Tensor
from triflow.trof import FlowPair


def brute_force_volume(source, target, scale):
    depth, height, width = source.shape
    out = np.zeros((height, width, height, width))
    for i in range(height):
        for j in range(width):
            for p in range(height):
                for q in range(width):
                    out[i, j, p, q] = sum(source[d, i, j] * target[d, p, q] for d in range(depth)) * scale
    return out


def test_all_ones_volume():
    ones = Tensor(np.ones((4, 3, 3)))
    plain = build_dual_corr(ones, ones, ones, levels=1, normalize=False)
    scaled = build_dual_corr(ones, ones, ones, levels=1, normalize=True)
    assert np.array_equal(plain.corr_prev.data, np.full((3, 3, 3, 3), 4.0))
    assert np.array_equal(scaled.corr_next.data, np.full((3, 3, 3, 3), 2.0))


def test_orthogonal_features_give_zero_volume():
    center = np.zeros((2, 3, 3))
    center[0] = 1.0
    prev = np.zeros((2, 3, 3))
    prev[1] = 1.0
    volume = build_dual_corr(Tensor(center), Tensor(prev), Tensor(center), levels=1)
    assert not volume.corr_prev.data.any()


@pytest.mark.parametrize("shape", [(8, 2, 2), (8, 4, 4)])
def test_volume_matches_quadruple_loop(float64, rng, shape):
    center, prev, nxt = (rng.normal(size=shape) for _ in range(3))
    volume = build_dual_corr(Tensor(center), Tensor(prev), Tensor(nxt), levels=1)
    scale = 1 / math.sqrt(shape[0])
    assert np.allclose(volume.corr_prev.data, brute_force_volume(center, prev, scale), atol=1e-6)
    assert np.allclose(volume.corr_next.data, brute_force_volume(center, nxt, scale), atol=1e-6)


def test_volume_symmetry(rng):
    a, b = Tensor(rng.normal(size=(4, 3, 3))), Tensor(rng.normal(size=(4, 3, 3)))
    forward = correlation_volume(a, b).data
    backward = correlation_volume(b, a).data
    assert np.allclose(forward, backward.transpose(2, 3, 0, 1))


def test_mismatched_features_raise(rng):
    small, large = Tensor(np.ones((4, 2, 2))), Tensor(np.ones((4, 3, 3)))
    with pytest.raises(ShapeError):
        build_dual_corr(small, small, large, levels=1)


def test_pyramid_halves_the_target_dims(rng):
    volume = Tensor(rng.normal(size=(4, 4, 4, 4)))
    pyramid = build_pyramid(volume, 3)
    assert [level.shape for level in pyramid] == [(4, 4, 4, 4), (4, 4, 2, 2), (4, 4, 1, 1)]


def test_zero_flow_window_is_centered(rng):
    feats = [Tensor(rng.normal(size=(4, 5, 5))) for _ in range(3)]
    volume = build_dual_corr(*feats, levels=1)
    spec = LookupWindowSpec(levels=1, radius=1)
    c_prev, _ = lookup(volume, FlowPair.zeros(5, 5), spec)
    assert c_prev.shape == (9, 5, 5)
    i, j = 2, 3
    window = volume.corr_prev.data[i, j, i - 1 : i + 2, j - 1 : j + 2]
    assert np.array_equal(c_prev.data[:, i, j], window.reshape(-1))


def test_zero_flow_radius_zero_is_diagonal(rng):
    feats = [Tensor(rng.normal(size=(4, 3, 3))) for _ in range(3)]
    volume = build_dual_corr(*feats, levels=1)
    c_prev, c_next = lookup(volume, FlowPair.zeros(3, 3), LookupWindowSpec(levels=1, radius=0))
    assert np.array_equal(c_prev.data[0], np.einsum("ijij->ij", volume.corr_prev.data))
    assert np.array_equal(c_next.data[0], np.einsum("ijij->ij", volume.corr_next.data))


def test_integer_flow_lookup_is_direct_indexing(rng):
    volume = Tensor(rng.normal(size=(4, 5, 4, 5)))
    flow = np.zeros((2, 4, 5))
    flow[0], flow[1] = 1.0, -1.0
    values = lookup_pyramid([volume], Tensor(flow), LookupWindowSpec(levels=1, radius=0))
    for i in range(1, 4):
        for j in range(4):
            assert values.data[0, i, j] == volume.data[i, j, i - 1, j + 1]


def test_far_flow_reads_border_values(rng):
    volume = Tensor(rng.normal(size=(3, 3, 3, 3)))
    flow = np.full((2, 3, 3), 100.0)
    values = lookup_pyramid([volume], Tensor(flow), LookupWindowSpec(levels=1, radius=1))
    corner = volume.data[:, :, 2, 2]
    assert np.array_equal(values.data, np.broadcast_to(corner, (9, 3, 3)))


def test_lookup_channels_per_level(rng):
    feats = [Tensor(rng.normal(size=(4, 4, 4))) for _ in range(3)]
    volume = build_dual_corr(*feats, levels=2)
    spec = LookupWindowSpec(levels=2, radius=1)
    c_prev, _ = lookup(volume, FlowPair.zeros(4, 4), spec)
    assert c_prev.shape == (spec.channels, 4, 4) == (18, 4, 4)


def test_lookup_needs_enough_levels(rng):
    feats = [Tensor(rng.normal(size=(4, 4, 4))) for _ in range(3)]
    volume = build_dual_corr(*feats, levels=1)
    with pytest.raises(ShapeError):
        lookup(volume, FlowPair.zeros(4, 4), LookupWindowSpec(levels=2, radius=1))


@pytest.mark.parametrize("seed", range(5))
def test_correlation_and_lookup_gradcheck(float64, seed):
    rng = np.random.default_rng(seed)
    center, prev = (Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True) for _ in range(2))
    flow = Tensor(
        np.floor(rng.uniform(-1, 1, size=(2, 4, 4))) + rng.uniform(0.2, 0.8, size=(2, 4, 4)),
        requires_grad=True,
    )
    spec = LookupWindowSpec(levels=2, radius=1)

    def fn():
        volume = build_dual_corr(center, prev, prev, levels=2)
        return T.sum(T.tanh(lookup_pyramid(volume.pyramid_prev, flow, spec)))

    result = gradcheck(fn, [center, prev, flow])
    assert result, result.worst
