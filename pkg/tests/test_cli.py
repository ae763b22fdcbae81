import numpy as np
import pytest
from PIL import Image
from typer.testing import CliRunner

from triflow import cli
from triflow.flowio import read_flo, save_frame, write_flo
from triflow.repositories import CheckpointRepository

TINY = [
    "--set", "iters=2", "--set", "steps=1", "--set", "batch_size=1",
    "--set", "data.height=16", "--set", "data.width=16", "--set", "data.channels=1",
    "--set", "data.count=1", "--set", "data.eval_count=1",
    "--set", "model.in_channels=1", "--set", "model.downsample=2",
    "--set", "model.feature_dim=8", "--set", "model.corr_dim=8", "--set", "model.flow_dim=4",
    "--set", "model.motion_dim=8", "--set", "model.hidden_dim=8", "--set", "model.corr_radius=1",
]  # fmt: skip


@pytest.fixture
def runner():
    return CliRunner()


def test_all_commands_are_available_in_help(runner):
    result = runner.invoke(cli, ["--help"])
    assert result.exit_code == 0
    for command in ("gen-data", "train", "eval", "infer", "viz", "ablate", "selftest"):
        assert command in result.output


def test_viz_of_zero_flow_is_white(runner, tmp_path):
    write_flo(tmp_path / "zero.flo", np.zeros((2, 4, 6)))
    result = runner.invoke(cli, ["viz", str(tmp_path / "zero.flo"), "--out", str(tmp_path / "out"), "--format", "ppm"])
    assert result.exit_code == 0, result.output
    with Image.open(tmp_path / "out" / "zero.ppm") as image:
        assert image.size == (6, 4)
        assert np.all(np.asarray(image) == 255)


def test_viz_reports_bad_files(runner, tmp_path):
    (tmp_path / "bad.flo").write_bytes(b"0123456789abcdef")
    result = runner.invoke(cli, ["viz", str(tmp_path / "bad.flo")])
    assert result.exit_code == 1
    assert "magic" in result.output


def test_malformed_config_names_the_token(runner, tmp_path):
    result = runner.invoke(cli, ["gen-data", "--out", str(tmp_path), "--set", "model.bogus=1"])
    assert result.exit_code == 1
    assert "bogus" in result.output


def test_pipeline(runner, tmp_path):
    data, run = tmp_path / "data", tmp_path / "run"
    result = runner.invoke(cli, ["gen-data", "--out", str(data), "--seed", "4", *TINY])
    assert result.exit_code == 0, result.output
    assert (data / "train" / "seq_0000" / "meta.json").exists()
    assert (data / "eval" / "seq_0000" / "meta.json").exists()

    result = runner.invoke(cli, ["train", "--data", str(data), "--out", str(run), *TINY])
    assert result.exit_code == 0, result.output
    checkpoint = CheckpointRepository(run).path
    assert checkpoint.exists()
    assert (run / "train.log").read_text().startswith("step=0 loss=")

    result = runner.invoke(cli, ["eval", "--ckpt", str(checkpoint), "--data", str(data)])
    assert result.exit_code == 0, result.output
    keys = [line.split("=")[0] for line in result.output.splitlines() if "=" in line]
    assert "aepe" in keys and "fl_all" in keys
    assert "bwd.aepe" in keys and "bwd_reversed.aepe" in keys


def test_infer_windows_skip_first_and_last_frame(runner, tmp_path, tiny_train_config, rng):
    from triflow.synthdata import make_dataset
    from triflow.trainer import train

    checkpoint = train(
        tiny_train_config.model_copy(update={"steps": 0}),
        make_dataset(tiny_train_config.data, 1, seed=0),
    )
    repo = CheckpointRepository(tmp_path / "run")
    repo.save(checkpoint)
    frames = tmp_path / "frames"
    frames.mkdir()
    for index in range(8):
        save_frame(frames / f"{index:03d}.png", rng.uniform(size=(1, 16, 16)))

    out = tmp_path / "flows"
    result = runner.invoke(cli, ["infer", "--frames", str(frames), "--ckpt", str(repo.path), "--out", str(out)])
    assert result.exit_code == 0, result.output
    written = sorted(path.name for path in out.iterdir())
    assert written == sorted([f"fwd_{t:02d}.flo" for t in range(1, 7)] + [f"bwd_{t:02d}.flo" for t in range(1, 7)])
    assert read_flo(out / "fwd_01.flo").shape == (2, 16, 16)


def test_infer_needs_three_frames(runner, tmp_path):
    frames = tmp_path / "frames"
    frames.mkdir()
    save_frame(frames / "000.png", np.zeros((1, 4, 4)))
    (tmp_path / "model.ckpt").write_bytes(b"")
    result = runner.invoke(cli, ["infer", "--frames", str(frames), "--ckpt", str(tmp_path / "model.ckpt"), "--out", str(tmp_path)])
    assert result.exit_code == 1


def test_selftest_passes(runner):
    result = runner.invoke(cli, ["selftest"])
    assert result.exit_code == 0, result.output
    assert "FAIL" not in result.output
