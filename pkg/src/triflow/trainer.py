"""
Sequence loss, optimization loop, evaluation harness and ablation runs.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from jinja2 import Template

from . import tensor as T
from .config import dump_config, settings
from .errors import ShapeError, TrainingError
from .flowio import band_metrics
from .models import (
    AblationFlags,
    AblationRun,
    Checkpoint,
    EvaluationReport,
    MetricsReport,
    TrainConfig,
)
from .mop import VideoFlowParams, videoflow_forward
from .repositories import CheckpointRepository
from .synthdata import SyntheticSequence
from .tensor import Tensor
from .trof import FlowPair

logger = logging.getLogger(__name__)

# (forward flow, backward flow) of one center frame, 2×H×W each
FlowTargets = tuple[np.ndarray, np.ndarray]
Predictor = Callable[[list[np.ndarray]], dict[int, FlowTargets]]


def sequence_loss(
    predictions: Sequence[Sequence[FlowPair]],
    gts: Sequence[FlowTargets],
    gamma: float,
    include_initial: bool = False,
) -> Tensor:
    """γ-weighted mean absolute error over every center and iteration.

    ``predictions[t][k - 1]`` is iteration k of center t at image resolution;
    ``gts[t]`` holds that center's (forward, backward) ground truth.
    """
    if len(predictions) != len(gts):
        raise ShapeError(f"{len(predictions)} predicted centers but {len(gts)} ground truths")
    total: Tensor = Tensor(0.0)
    for per_center, (gt_fwd, gt_bwd) in zip(predictions, gts):
        n = len(per_center)
        if n < 1:
            raise ShapeError("a center without predictions")
        if include_initial:
            # the zero initialization contributes a constant
            initial = np.mean(np.abs(gt_bwd)) + np.mean(np.abs(gt_fwd))
            total = total + gamma**n * float(initial)
        for k, flows in enumerate(per_center, start=1):
            if flows.f_prev.shape != np.shape(gt_bwd) or flows.f_next.shape != np.shape(gt_fwd):
                raise ShapeError(
                    f"prediction {flows.f_prev.shape} does not match ground truth {np.shape(gt_fwd)}"
                )
            error = T.mean(T.abs(flows.f_prev - gt_bwd)) + T.mean(T.abs(flows.f_next - gt_fwd))
            total = total + gamma ** (n - k) * error
    return total


class AdamW:
    """Adaptive moments with weight decay decoupled from the gradient."""

    def __init__(
        self,
        params: Sequence[Tensor],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self.first = [np.zeros_like(p.data) for p in self.params]
        self.second = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.steps += 1
        beta1, beta2 = self.betas
        correction1 = 1 - beta1**self.steps
        correction2 = 1 - beta2**self.steps
        for p, m, v in zip(self.params, self.first, self.second):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            if lr == 0:
                continue
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.data = (p.data - lr * self.weight_decay * p.data - lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass(frozen=True)
class OneCycleSchedule:
    """Cosine warm-up from max_lr/div_factor to max_lr, then cosine decay to
    max_lr/(div_factor·final_div_factor)."""

    max_lr: float
    total_steps: int
    warmup_fraction: float = 0.05
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    @staticmethod
    def _cosine(start: float, end: float, fraction: float) -> float:
        return end + (start - end) / 2.0 * (math.cos(math.pi * fraction) + 1)

    def __call__(self, step: int) -> float:
        initial = self.max_lr / self.div_factor
        final = initial / self.final_div_factor
        peak = float(self.warmup_fraction * self.total_steps) - 1
        last = self.total_steps - 1
        if step <= peak:
            return self._cosine(initial, self.max_lr, step / peak if peak > 0 else 1.0)
        span = last - peak
        return self._cosine(self.max_lr, final, (step - peak) / span if span > 0 else 1.0)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale all gradients together so their global norm is at most max_norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


@dataclass
class Clip:
    frames: list[np.ndarray]
    gts: list[FlowTargets]


def make_clips(dataset: Sequence[SyntheticSequence], clip_length: int) -> list[Clip]:
    """Every run of ``clip_length`` consecutive frames with its centers' ground truth."""
    clips = []
    for sequence in dataset:
        count = len(sequence.frames)
        if count < clip_length:
            raise TrainingError(f"sequence has {count} frames, clips need {clip_length}")
        for start in range(count - clip_length + 1):
            centers = range(start + 1, start + clip_length - 1)
            clips.append(
                Clip(
                    frames=sequence.frames[start : start + clip_length],
                    gts=[(sequence.gt_fwd[t], sequence.gt_bwd[t]) for t in centers],
                )
            )
    return clips


def build_model(config: TrainConfig, rng: np.random.Generator) -> VideoFlowParams:
    return VideoFlowParams(config.model, rng, config.ablation)


def train(
    config: TrainConfig,
    dataset: Sequence[SyntheticSequence],
    out_dir: Path | None = None,
) -> Checkpoint:
    rng = np.random.default_rng(config.seed)
    params = build_model(config, rng)
    clips = make_clips(dataset, config.clip_length)
    if not clips:
        raise TrainingError("the dataset yields no training clips")
    optimizer = AdamW(params.parameters(), weight_decay=config.weight_decay)
    schedule = OneCycleSchedule(
        config.lr, config.steps, config.warmup_fraction, config.div_factor, config.final_div_factor
    )
    repository = CheckpointRepository(out_dir) if out_dir is not None else None
    log_path = Path(out_dir) / "train.log" if out_dir is not None else None
    if log_path is not None:
        log_path.write_text("")
        logger.info("effective config:\n%s", dump_config(config))

    def checkpoint(step: int) -> Checkpoint:
        return Checkpoint(
            params=params.state_dict(),
            config=config,
            step=step,
            rng_state=rng.bit_generator.state,
        )

    order: Iterator[int] = iter(())
    for step in range(config.steps):
        lr = schedule(step)
        optimizer.zero_grad()
        loss_value = 0.0
        for _ in range(config.batch_size):
            index = next(order, None)
            if index is None:
                order = iter(rng.permutation(len(clips)).tolist())
                index = next(order)
            clip = clips[index]
            outputs = videoflow_forward(clip.frames, params, config.iters, config.ablation)
            loss = sequence_loss(
                [p.high for p in outputs], clip.gts, config.gamma, config.include_initial
            )
            loss = loss * (1.0 / config.batch_size)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {step}")
            T.backward(loss)
            loss_value += value
        clip_grad_norm(optimizer.params, config.clip_norm)
        optimizer.step(lr)
        if log_path is not None:
            with log_path.open("a") as log:
                log.write(f"step={step} loss={loss_value:.6f} lr={lr:.6g}\n")
        if step % config.log_every == 0 or step == config.steps - 1:
            logger.info("step %d loss %.4f lr %.3g", step, loss_value, lr)
        if repository is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            repository.save(checkpoint(step + 1))
    final = checkpoint(config.steps)
    if repository is not None:
        path = repository.save(final)
        logger.info("checkpoint written to %s", path)
    return final


def model_from_checkpoint(ckpt: Checkpoint) -> VideoFlowParams:
    params = build_model(ckpt.config, np.random.default_rng(ckpt.seed))
    params.load_state_dict(ckpt.params)
    return params


def windows(frame_count: int, centers: int) -> list[tuple[int, int]]:
    """Non-overlapping clips of centers+2 frames; each clip predicts its inner frames."""
    if centers < 1:
        raise ValueError(f"a window needs at least one center, got {centers}")
    spans = []
    start = 0
    while start + 2 < frame_count:
        spans.append((start, min(start + centers + 2, frame_count)))
        start += centers
    return spans


def model_predictor(params: VideoFlowParams, iters: int, threads: int | None = None) -> Predictor:
    workers = threads or settings.threads

    def predict(frames: list[np.ndarray]) -> dict[int, FlowTargets]:
        with T.no_grad():
            outputs = videoflow_forward(frames, params, iters, threads=workers)
        return {out.center: (out.high[-1].f_next.numpy(), out.high[-1].f_prev.numpy()) for out in outputs}

    return predict


def predict_sequence(
    frames: Sequence[np.ndarray], predictor: Predictor, centers: int
) -> dict[int, FlowTargets]:
    """Windowed prediction over a whole frame sequence, keyed by absolute frame index."""
    flows = {}
    for start, stop in windows(len(frames), centers):
        for local, pair in predictor(list(frames[start:stop])).items():
            flows[start + local] = pair
    return flows


def _report(
    preds: list[np.ndarray], gts: list[np.ndarray], occlusions: list[np.ndarray], valids: list[np.ndarray]
) -> MetricsReport:
    # metrics are per pixel, so frames are laid side by side
    return band_metrics(
        np.concatenate(preds, axis=-1),
        np.concatenate(gts, axis=-1),
        np.concatenate(occlusions, axis=-1),
        np.concatenate(valids, axis=-1),
    )


def evaluate_predictor(
    predictor: Predictor,
    dataset: Sequence[SyntheticSequence],
    centers: int,
    reverse_check: bool = False,
) -> EvaluationReport:
    forward: dict[str, list[np.ndarray]] = {"pred": [], "gt": [], "occl": [], "valid": []}
    backward: dict[str, list[np.ndarray]] = {"pred": [], "gt": [], "occl": [], "valid": []}
    reversed_: dict[str, list[np.ndarray]] = {"pred": [], "gt": [], "occl": [], "valid": []}
    for sequence in dataset:
        if not sequence.gt_fwd or not sequence.gt_bwd:
            raise TrainingError("evaluation needs ground truth in both directions")
        flows = predict_sequence(sequence.frames, predictor, centers)
        last = len(sequence.frames) - 1
        flipped = (
            predict_sequence(sequence.frames[::-1], predictor, centers) if reverse_check else {}
        )
        for t in sequence.centers:
            pred_fwd, pred_bwd = flows[t]
            for bucket, pred, gt, occl in (
                (forward, pred_fwd, sequence.gt_fwd[t], sequence.occl_fwd[t]),
                (backward, pred_bwd, sequence.gt_bwd[t], sequence.occl_bwd[t]),
            ):
                bucket["pred"].append(pred)
                bucket["gt"].append(gt)
                bucket["occl"].append(occl)
                bucket["valid"].append(sequence.valid)
            if reverse_check:
                reversed_["pred"].append(flipped[last - t][0])
                reversed_["gt"].append(sequence.gt_bwd[t])
                reversed_["occl"].append(sequence.occl_bwd[t])
                reversed_["valid"].append(sequence.valid)

    def summarize(bucket: dict[str, list[np.ndarray]]) -> MetricsReport:
        return _report(bucket["pred"], bucket["gt"], bucket["occl"], bucket["valid"])

    return EvaluationReport(
        forward=summarize(forward),
        backward=summarize(backward),
        backward_reversed=summarize(reversed_) if reverse_check else None,
    )


def evaluate(
    ckpt: Checkpoint,
    dataset: Sequence[SyntheticSequence],
    iters: int | None = None,
    reverse_check: bool = True,
) -> EvaluationReport:
    params = model_from_checkpoint(ckpt)
    predictor = model_predictor(params, iters or ckpt.config.iters)
    return evaluate_predictor(predictor, dataset, ckpt.config.centers, reverse_check)


ABLATION_TABLE = """\
{{ "%-16s"|format("run") }} {{ "%10s"|format("fwd aepe") }} {{ "%10s"|format("bwd aepe") }} {{ "%8s"|format("fl_all") }} {{ "%10s"|format("matched") }} {{ "%10s"|format("unmatched") }} {{ "%10s"|format("delta") }}
{% for run in runs %}
{{ "%-16s"|format(run.name) }} {{ "%10.4f"|format(run.report.forward.aepe) }} {{ "%10.4f"|format(run.report.backward.aepe) }} {{ "%8.2f"|format(run.report.forward.fl_all) }} {{ cell(run.report.forward.matched) }} {{ cell(run.report.forward.unmatched) }} {{ "%+10.4f"|format(run.report.forward.aepe - baseline) }}
{% endfor %}
"""


def _cell(value: float | None) -> str:
    return f"{value:10.4f}" if value is not None else f"{'-':>10}"


def ablation_matrix(flags: AblationFlags | None = None) -> list[tuple[str, AblationFlags]]:
    """The baseline plus one run per switched-off flag."""
    base = flags or AblationFlags()
    runs = [("baseline", base)]
    for name in AblationFlags.model_fields:
        runs.append((f"no-{name.replace('_', '-')}", base.model_copy(update={name: False})))
    return runs


def render_ablation(runs: list[AblationRun]) -> str:
    template = Template(ABLATION_TABLE, trim_blocks=True)
    baseline = runs[0].report.forward.aepe
    return template.render(runs=runs, baseline=baseline, cell=_cell)


def ablate(
    config: TrainConfig,
    train_set: Sequence[SyntheticSequence],
    eval_set: Sequence[SyntheticSequence],
    out_dir: Path | None = None,
) -> tuple[list[AblationRun], str]:
    runs = []
    for name, flags in ablation_matrix(config.ablation):
        logger.info("ablation run %s", name)
        run_config = config.model_copy(update={"ablation": flags})
        run_dir = Path(out_dir) / name if out_dir is not None else None
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
        ckpt = train(run_config, train_set, run_dir)
        report = evaluate(ckpt, eval_set, reverse_check=False)
        runs.append(AblationRun(name=name, flags=flags, report=report))
    table = render_ablation(runs)
    if out_dir is not None:
        (Path(out_dir) / "ablation.txt").write_text(table)
    return runs, table
