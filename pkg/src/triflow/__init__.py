"""
triflow estimates bi-directional optical flow for every inner frame of a
short clip, trained on synthetic scenes with exact ground truth.
"""

import logging
import sys
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import typer
from pydantic import ValidationError
from rich import print as rprint
from rich.logging import RichHandler
from rich.markup import escape
from rich.table import Table

from .config import dump_config, load_config, settings
from .errors import TriflowError
from .flowio import colorize_flow, format_metrics, load_frame, read_flo, save_image, write_flo
from .models import TrainConfig
from .repositories import CheckpointRepository, SequenceRepository, load_checkpoint
from .synthdata import make_dataset
from .trainer import ablate, evaluate, model_from_checkpoint, model_predictor, predict_sequence, train

__all__ = [
    "generate_data",
    "train_model",
    "evaluate_model",
    "infer_flows",
    "visualize_flows",
    "run_ablation",
    "run_selftest",
]

__version__ = "0.1.0"
cli = typer.Typer()
logger = logging.getLogger(__name__)

FRAME_SUFFIXES = (".png", ".ppm", ".pgm")
EVAL_STREAM = 1

# Optional needed by typer, standalone to trick pyupgrade to not change it
OptionalPath = Optional[Path]
OptionalInt = Optional[int]
OptionalFloat = Optional[float]
OptionalStrings = Optional[list[str]]

CONFIG_OPTION = typer.Option(None, "--config", help="flat key=value config file")
SET_OPTION = typer.Option(None, "--set", help="key=value override, repeatable")
SEED_OPTION = typer.Option(None, "--seed")


@contextmanager
def diagnostics() -> Iterator[None]:
    """Turn library errors into a one-line diagnostic and exit code 1."""
    try:
        yield
    except (TriflowError, OSError, ValidationError) as e:
        message = str(e).splitlines()[0] if str(e) else type(e).__name__
        rprint(f"[red]error: {escape(message)}[/red]")
        sys.exit(1)


def run_config(config: OptionalPath, overrides: OptionalStrings, seed: OptionalInt) -> TrainConfig:
    effective = load_config(config, overrides or (), seed)
    logger.info("effective config:\n%s", dump_config(effective).rstrip())
    return effective


def train_dir(data: Path) -> Path:
    return data / "train"


def eval_dir(data: Path) -> Path:
    return data / "eval"


@cli.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v")):
    """
    Multi-frame bi-directional optical flow on synthetic scenes.
    """
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(show_path=False)],
        force=True,
    )


@cli.command(name="gen-data")
def generate_data(
    config: OptionalPath = CONFIG_OPTION,
    overrides: OptionalStrings = SET_OPTION,
    seed: OptionalInt = SEED_OPTION,
    out: OptionalPath = typer.Option(None, "--out"),
    image_format: str = typer.Option("png", "--format", help="png or pgm/ppm frames"),
):
    """
    Generate the synthetic training and evaluation sequences.
    """
    with diagnostics():
        effective = run_config(config, overrides, seed)
        root = out or settings.data_dir
        suffix = _frame_suffix(image_format, effective.data.channels)
        for directory, count, stream in (
            (train_dir(root), effective.data.count, 0),
            (eval_dir(root), effective.data.eval_count, EVAL_STREAM),
        ):
            sequences = make_dataset(effective.data, count, effective.seed, stream=stream)
            repository = SequenceRepository(directory, frame_suffix=suffix)
            for index, sequence in enumerate(sequences):
                repository.save(index, sequence)
        rprint(f"Wrote {effective.data.count} training and {effective.data.eval_count} evaluation sequences to {root}")


def _frame_suffix(image_format: str, channels: int) -> str:
    if image_format == "png":
        return ".png"
    if image_format in ("ppm", "pgm"):
        return ".pgm" if channels == 1 else ".ppm"
    raise typer.BadParameter(f"unknown format {image_format!r}", param_hint="--format")


def _load_sequences(directory: Path):
    repository = SequenceRepository(directory)
    indices = repository.indices()
    if not indices:
        raise FileNotFoundError(f"no sequences under {directory}")
    suffix = next(
        (s for s in FRAME_SUFFIXES if (repository.path_for(indices[0]) / f"frame_00{s}").exists()),
        ".png",
    )
    repository.frame_suffix = suffix
    return repository.list()


@cli.command(name="train")
def train_model(
    config: OptionalPath = CONFIG_OPTION,
    overrides: OptionalStrings = SET_OPTION,
    seed: OptionalInt = SEED_OPTION,
    data: OptionalPath = typer.Option(None, "--data"),
    out: OptionalPath = typer.Option(None, "--out"),
):
    """
    Train on generated sequences and write a checkpoint plus train.log.
    """
    with diagnostics():
        effective = run_config(config, overrides, seed)
        dataset = _load_sequences(train_dir(data or settings.data_dir))
        run_dir = out or settings.runs_dir / "latest"
        run_dir.mkdir(parents=True, exist_ok=True)
        train(effective, dataset, run_dir)
        rprint(f"Checkpoint written to {CheckpointRepository(run_dir).path}")


@cli.command(name="eval")
def evaluate_model(
    ckpt: Path = typer.Option(..., "--ckpt"),
    data: OptionalPath = typer.Option(None, "--data"),
    iters: OptionalInt = typer.Option(None, "--iters"),
    as_json: bool = typer.Option(False, "--json"),
):
    """
    Print forward and backward metrics of a checkpoint on the evaluation sequences.
    """
    with diagnostics():
        checkpoint = load_checkpoint(ckpt)
        dataset = _load_sequences(eval_dir(data or settings.data_dir))
        report = evaluate(checkpoint, dataset, iters=iters)
        if as_json:
            print(report.model_dump_json(indent=2))
            return
        text = format_metrics(report.forward)
        text += format_metrics(report.backward, prefix="bwd.")
        if report.backward_reversed is not None:
            text += format_metrics(report.backward_reversed, prefix="bwd_reversed.")
        print(text, end="")


def _frame_paths(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"not a frame directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


@cli.command(name="infer")
def infer_flows(
    frames: Path = typer.Option(..., "--frames"),
    ckpt: Path = typer.Option(..., "--ckpt"),
    out: Path = typer.Option(..., "--out"),
    iters: OptionalInt = typer.Option(None, "--iters"),
):
    """
    Predict flows for every frame with two temporal neighbors.

    Frames are split into windows of T+2; fwd_NN.flo and bwd_NN.flo are written
    per inner frame NN (0-based).
    """
    with diagnostics():
        checkpoint = load_checkpoint(ckpt)
        images = [load_frame(path) for path in _frame_paths(frames)]
        if len(images) < 3:
            raise TriflowError(f"{frames} holds {len(images)} frames, at least 3 are needed")
        predictor = model_predictor(model_from_checkpoint(checkpoint), iters or checkpoint.config.iters)
        flows = predict_sequence(images, predictor, checkpoint.config.centers)
        out.mkdir(parents=True, exist_ok=True)
        for t, (fwd, bwd) in sorted(flows.items()):
            write_flo(out / f"fwd_{t:02d}.flo", fwd)
            write_flo(out / f"bwd_{t:02d}.flo", bwd)
        rprint(f"Wrote flows for {len(flows)} frames to {out}")


@cli.command(name="viz")
def visualize_flows(
    paths: list[Path] = typer.Argument(..., help=".flo files or directories"),
    out: OptionalPath = typer.Option(None, "--out"),
    image_format: str = typer.Option("png", "--format", help="png or ppm"),
    max_magnitude: OptionalFloat = typer.Option(None, "--max-magnitude"),
):
    """
    Render .flo files on the flow color wheel.
    """
    if image_format not in ("png", "ppm"):
        raise typer.BadParameter(f"unknown format {image_format!r}", param_hint="--format")
    with diagnostics():
        files = []
        for path in paths:
            files.extend(sorted(path.glob("*.flo")) if path.is_dir() else [path])
        for path in files:
            target_dir = out or path.parent
            target_dir.mkdir(parents=True, exist_ok=True)
            target = target_dir / f"{path.stem}.{image_format}"
            save_image(target, colorize_flow(read_flo(path), max_magnitude))
            logger.debug("rendered %s", target)
        rprint(f"Rendered {len(files)} flow files")


@cli.command(name="ablate")
def run_ablation(
    config: OptionalPath = CONFIG_OPTION,
    overrides: OptionalStrings = SET_OPTION,
    seed: OptionalInt = SEED_OPTION,
    data: OptionalPath = typer.Option(None, "--data"),
    out: OptionalPath = typer.Option(None, "--out"),
):
    """
    Train and evaluate the baseline and each switched-off design flag.
    """
    with diagnostics():
        effective = run_config(config, overrides, seed)
        root = data or settings.data_dir
        train_set = _load_sequences(train_dir(root))
        eval_set = _load_sequences(eval_dir(root))
        _, table = ablate(effective, train_set, eval_set, out or settings.runs_dir / "ablation")
        print(table, end="")


@cli.command(name="selftest")
def run_selftest():
    """
    Run the built-in oracle and gradient checks.
    """
    from .selftest import run_all

    results = run_all()
    table = Table("check", "result", "detail")
    for result in results:
        table.add_row(result.name, "[green]pass[/green]" if result.ok else "[red]FAIL[/red]", escape(result.detail))
    rprint(table)
    if not all(result.ok for result in results):
        sys.exit(1)


if __name__ == "__main__":
    cli()
