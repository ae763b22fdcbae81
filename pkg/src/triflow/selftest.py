"""
Quick oracle and gradient checks runnable from the command line.
"""

from __future__ import annotations

import logging
import tempfile
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .corr import LookupWindowSpec, build_dual_corr, lookup
from .flowio import aepe, fl_all, read_flo, write_flo
from .gradcheck import gradcheck
from .models import ModelConfig
from .mop import VideoFlowParams, trof_forward_with_placeholders, videoflow_forward, warp_state
from .tensor import Tensor
from .trainer import sequence_loss
from .trof import FlowPair

logger = logging.getLogger(__name__)

SELFTEST_MODEL = ModelConfig(
    in_channels=1,
    downsample=2,
    feature_dim=8,
    corr_dim=8,
    flow_dim=4,
    motion_dim=8,
    hidden_dim=8,
    corr_levels=2,
    corr_radius=1,
)


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def _leaf(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=True)


def check_primitive_gradients() -> str:
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x, w, b = _leaf(rng, 2, 4, 4), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
        source = _leaf(rng, 2, 4, 5)
        coords = Tensor(
            np.floor(rng.uniform(0, 3, size=(2, 3, 3))) + rng.uniform(0.2, 0.8, size=(2, 3, 3)),
            requires_grad=True,
        )
        pooled = _leaf(rng, 2, 3, 3)
        cases: list[tuple[Callable[[], Tensor], list[Tensor]]] = [
            (lambda: T.sum(T.sigmoid(T.conv2d(x, w, b, stride=1, pad=1))), [x, w, b]),
            (lambda: T.sum(T.tanh(T.bilinear_sample(source, coords))), [source, coords]),
            (lambda: T.sum(T.tanh(T.avg_pool2(pooled))), [pooled]),
        ]
        for fn, inputs in cases:
            result = gradcheck(fn, inputs)
            if not result:
                raise AssertionError(result.worst)
            worst = max(worst, result.max_error)
    return f"max rel err {worst:.2e}"


def check_correlation_oracle() -> str:
    rng = np.random.default_rng(0)
    center, prev, nxt = (Tensor(rng.normal(size=(8, 4, 4))) for _ in range(3))
    volume = build_dual_corr(center, prev, nxt, levels=1)
    expected = np.einsum("dij,dpq->ijpq", center.data, prev.data) / np.sqrt(8)
    if not np.allclose(volume.corr_prev.data, expected, atol=1e-5):
        raise AssertionError("volume differs from the brute-force sum")
    flows = FlowPair.zeros(4, 4)
    c_prev, _ = lookup(volume, flows, LookupWindowSpec(levels=1, radius=0))
    diagonal = np.einsum("ijij->ij", volume.corr_prev.data)
    if not np.array_equal(c_prev.data[0], diagonal):
        raise AssertionError("zero-flow lookup is not the diagonal")
    return "4×4×8 features"


def check_warp_oracle() -> str:
    rng = np.random.default_rng(1)
    state = Tensor(rng.normal(size=(3, 4, 5)))
    flow = np.zeros((2, 4, 5))
    flow[0] = 1.0
    warped = warp_state(state, Tensor(flow)).data
    expected = np.concatenate([state.data[:, :, 1:], state.data[:, :, -1:]], axis=2)
    if not np.array_equal(warped, expected):
        raise AssertionError("integer shift differs from the shifted copy")
    return "unit shift"


def check_loss_example() -> str:
    shape = (2, 2, 2)
    gt = np.zeros(shape)
    predictions = [
        [
            FlowPair(Tensor(np.full(shape, 1.0)), Tensor(np.full(shape, -1.0))),
            FlowPair(Tensor(np.full(shape, 0.5)), Tensor(np.full(shape, 0.5))),
        ]
    ]
    value = sequence_loss(predictions, [(gt, gt)], gamma=0.85).item()
    if abs(value - 2.7) > 1e-6:
        raise AssertionError(f"loss {value} instead of 2.7")
    return f"loss={value:.6f}"


def check_flo_round_trip() -> str:
    flow = np.random.default_rng(2).normal(size=(2, 4, 5)).astype(np.float32)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "flow.flo"
        write_flo(path, flow)
        size = path.stat().st_size
        back = read_flo(path)
    if not np.array_equal(back, flow):
        raise AssertionError("round trip changed the flow")
    return f"{size} bytes"


def check_metrics() -> str:
    gt = np.zeros((2, 3, 3))
    pred = np.stack([np.full((3, 3), 3.0), np.full((3, 3), 4.0)])
    if aepe(pred, gt) != 5.0:
        raise AssertionError("3-4-5 aepe is not 5")
    gt10 = np.stack([np.full((3, 3), 10.0), np.zeros((3, 3))])
    gt100 = np.stack([np.full((3, 3), 100.0), np.zeros((3, 3))])
    shift = np.stack([np.zeros((3, 3)), np.full((3, 3), 4.0)])
    cases = [(gt10 + shift, gt10, 100.0), (gt10 + shift / 2, gt10, 0.0), (gt100 + shift, gt100, 0.0)]
    for p, g, expected in cases:
        if fl_all(p, g) != expected:
            raise AssertionError(f"fl_all truth table broken at {expected}")
    return "aepe and fl_all truth table"


def _tiny_clip(frames: int, seed: int) -> tuple[VideoFlowParams, list[np.ndarray]]:
    rng = np.random.default_rng(seed)
    params = VideoFlowParams(SELFTEST_MODEL, rng)
    return params, [rng.uniform(size=(1, 8, 8)) for _ in range(frames)]


def check_reduction() -> str:
    params, frames = _tiny_clip(3, 3)
    with T.no_grad():
        [clip] = videoflow_forward(frames, params, 3)
        low, _ = trof_forward_with_placeholders(frames, params, 3)
    for a, b in zip(clip.low, low):
        if not (np.array_equal(a.f_prev.data, b.f_prev.data) and np.array_equal(a.f_next.data, b.f_next.data)):
            raise AssertionError("three-frame clip differs from the placeholder unit")
    return "3 iterations"


def check_temporal_dependency() -> str:
    params, frames = _tiny_clip(7, 4)
    with T.no_grad():
        base = videoflow_forward(frames, params, 3)
        changed = list(frames)
        changed[6] = frames[6] + 0.5
        moved = videoflow_forward(changed, params, 3)
    # center 3 is three frames away from frame 6
    center = [p.center for p in base].index(3)
    before, after = base[center].low, moved[center].low
    for k in (0, 1):
        if not np.array_equal(before[k].f_next.data, after[k].f_next.data):
            raise AssertionError(f"iteration {k + 1} saw a frame three steps away")
    if np.array_equal(before[2].f_next.data, after[2].f_next.data):
        raise AssertionError("iteration 3 never saw the perturbed frame")
    return "frame 6 reaches center 3 at iteration 3"


CHECKS: dict[str, Callable[[], str]] = {
    "primitive gradients": check_primitive_gradients,
    "correlation oracle": check_correlation_oracle,
    "warp oracle": check_warp_oracle,
    "sequence loss": check_loss_example,
    "flo round trip": check_flo_round_trip,
    "metrics": check_metrics,
    "three-frame reduction": check_reduction,
    "temporal receptive field": check_temporal_dependency,
}


def run_all() -> list[CheckResult]:
    results = []
    with T.default_dtype(np.float64):
        for name, check in CHECKS.items():
            try:
                results.append(CheckResult(name, True, check()))
            except Exception as e:  # noqa: BLE001
                logger.debug("selftest %s failed", name, exc_info=True)
                results.append(CheckResult(name, False, str(e)))
    return results
