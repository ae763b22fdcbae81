import numpy as np
import pytest

from triflow import tensor as T
from triflow.corr import build_dual_corr
from triflow.errors import ShapeError
from triflow.gradcheck import gradcheck
from triflow.layers import ConvGRU
from triflow.tensor import Tensor
from triflow.trainer import sequence_loss
from triflow.trof import (
    FlowPair,
    TrofParams,
    TrofState,
    corr_flow_encode,
    encode_features,
    trof_forward,
    trof_step,
    upsample_flow,
)


@pytest.fixture
def params(tiny_model_config, float64):
    return TrofParams(tiny_model_config, np.random.default_rng(1))


@pytest.fixture
def triplet(frames):
    return frames[:3]


def test_feature_shapes(params, triplet):
    feat_prev, feat_center, feat_next, context = encode_features(triplet, params)
    assert feat_prev.shape == feat_center.shape == feat_next.shape == (8, 4, 4)
    assert context.shape == (8, 4, 4)


def test_identical_frames_share_features(params, frames):
    feat_prev, feat_center, feat_next, _ = encode_features([frames[0]] * 3, params)
    assert np.array_equal(feat_prev.data, feat_center.data)
    assert np.array_equal(feat_next.data, feat_center.data)


def test_frames_must_be_divisible(params, rng):
    odd = [rng.uniform(size=(1, 7, 8)) for _ in range(3)]
    with pytest.raises(ShapeError):
        encode_features(odd, params)


def test_frames_must_agree_in_shape(params, rng):
    with pytest.raises(ShapeError):
        encode_features([rng.uniform(size=(1, 8, 8))] * 2 + [rng.uniform(size=(1, 4, 8))], params)


def test_context_stays_in_unit_interval(params, triplet):
    *_, context = encode_features(triplet, params)
    assert np.all(np.abs(context.data) < 1.0)


def test_swapping_neighbors_swaps_volumes(params, triplet):
    prev_feat, center_feat, next_feat, _ = encode_features(triplet, params)
    forward = build_dual_corr(center_feat, prev_feat, next_feat, levels=2)
    swapped = build_dual_corr(center_feat, next_feat, prev_feat, levels=2)
    assert np.array_equal(forward.corr_prev.data, swapped.corr_next.data)
    assert np.array_equal(forward.corr_next.data, swapped.corr_prev.data)


def test_forward_shapes(params, triplet):
    low, high = trof_forward(triplet, params, iters=3)
    assert len(low) == len(high) == 3
    assert low[-1].f_prev.shape == (2, 4, 4)
    assert high[-1].f_next.shape == (2, 8, 8)


def test_forward_needs_an_iteration(params, triplet):
    with pytest.raises(ValueError):
        trof_forward(triplet, params, iters=0)


def test_zero_head_never_moves_the_flow(params, triplet):
    for p in params.flow_head.parameters():
        p.data[...] = 0.0
    low, _ = trof_forward(triplet, params, iters=3)
    for flows in low:
        assert not flows.f_prev.data.any()
        assert not flows.f_next.data.any()


def test_hidden_state_is_bounded(params, triplet):
    prev_feat, center_feat, next_feat, context = encode_features(triplet, params)
    volume = build_dual_corr(center_feat, prev_feat, next_feat, levels=2)
    state = TrofState.initial(context)
    for _ in range(3):
        state, _ = trof_step(volume, state, params)
        assert np.all(np.abs(state.hidden.data) < 1.0)


def test_flows_telescope_over_deltas(params, triplet):
    prev_feat, center_feat, next_feat, context = encode_features(triplet, params)
    volume = build_dual_corr(center_feat, prev_feat, next_feat, levels=2)
    state = TrofState.initial(context)
    total = np.zeros((2, 4, 4))
    for _ in range(4):
        state, delta = trof_step(volume, state, params)
        total = total + delta.f_next.data
    assert np.allclose(state.flows.f_next.data, total)
    assert state.iteration == 4


@pytest.mark.parametrize("index", [0, 1, 2])
def test_each_frame_changes_the_output(params, triplet, index):
    base, _ = trof_forward(triplet, params, iters=2)
    changed = list(triplet)
    changed[index] = triplet[index] + 0.3
    moved, _ = trof_forward(changed, params, iters=2)
    assert not np.array_equal(base[-1].f_next.data, moved[-1].f_next.data)


def test_every_parameter_receives_a_gradient(params, triplet, rng):
    _, high = trof_forward(triplet, params, iters=2)
    gt = rng.normal(size=(2, 8, 8))
    T.backward(sequence_loss([high], [(gt, -gt)], gamma=0.85))
    for name, p in params.named_parameters():
        assert p.grad is not None, name
    for module in (params.flow_head, params.updater, params.context_encoder.head, params.motion_encoder):
        assert all(np.any(p.grad != 0) for p in module.parameters())


def test_upsample_constant_flow_scales_values():
    flow = Tensor(np.stack([np.full((3, 3), 1.5), np.full((3, 3), -0.5)]))
    up = upsample_flow(flow, 4)
    assert up.shape == (2, 12, 12)
    assert np.allclose(up.data[0], 6.0)
    assert np.allclose(up.data[1], -2.0)


def test_flow_pair_channels_round_trip(rng):
    flows = Tensor(rng.normal(size=(4, 3, 3)))
    pair = FlowPair.from_channels(flows)
    assert np.array_equal(pair.stacked().data, flows.data)


def test_flow_pair_rejects_mismatch():
    with pytest.raises(ShapeError):
        FlowPair(Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((2, 4, 3))))


@pytest.mark.parametrize("seed", range(5))
def test_updater_gradcheck(float64, seed):
    rng = np.random.default_rng(seed)
    cell = ConvGRU(3, 2, rng)
    h = Tensor(rng.uniform(-1, 1, size=(3, 4, 4)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    result = gradcheck(lambda: T.sum(cell(h, x) * cell(h, x)), [h, x, *cell.parameters()], max_checks=8)
    assert result, result.worst


@pytest.mark.parametrize("seed", range(5))
def test_encoder_and_loss_gradcheck(tiny_model_config, float64, seed):
    rng = np.random.default_rng(seed)
    params = TrofParams(tiny_model_config, rng)
    triplet = [Tensor(rng.uniform(size=(1, 8, 8)), requires_grad=True) for _ in range(3)]
    gt = rng.normal(size=(2, 8, 8))

    def fn():
        _, high = trof_forward(triplet, params, iters=1)
        return sequence_loss([high], [(gt, gt)], gamma=0.85)

    inputs = [triplet[1], params.flow_head.conv2.weight, params.updater.convq.weight]
    result = gradcheck(fn, inputs, eps=1e-6, max_checks=6, seed=seed)
    assert result, result.worst


@pytest.mark.parametrize("seed", range(5))
def test_corr_flow_encoder_gradcheck(tiny_model_config, float64, seed):
    rng = np.random.default_rng(seed)
    params = TrofParams(tiny_model_config, rng)
    channels = params.lookup_spec.channels
    c_prev = Tensor(rng.uniform(-1, 1, size=(channels, 4, 4)), requires_grad=True)
    c_next = Tensor(rng.uniform(-1, 1, size=(channels, 4, 4)))
    flows = FlowPair(Tensor(rng.uniform(-1, 1, size=(2, 4, 4))), Tensor(rng.uniform(-1, 1, size=(2, 4, 4))))

    def fn():
        f_corr, f_flow = corr_flow_encode(c_prev, c_next, flows, params)
        return T.sum(T.tanh(f_corr)) + T.sum(f_flow)

    result = gradcheck(fn, [c_prev], eps=1e-6, max_checks=12, seed=seed)
    assert result, result.worst
    assert np.any(c_prev.grad != 0.0)


def test_corr_flow_encoder_checks_lookup_channels(params, rng):
    flows = FlowPair.zeros(4, 4)
    with pytest.raises(ShapeError):
        corr_flow_encode(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((3, 4, 4))), flows, params)
