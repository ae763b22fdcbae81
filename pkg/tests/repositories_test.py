import numpy as np
import pytest

from triflow import tensor as T
from triflow.errors import CheckpointError
from triflow.mop import videoflow_forward
from triflow.repositories import (
    CHECKPOINT_MAGIC,
    CheckpointRepository,
    SequenceRepository,
    checkpoint_bytes,
    checkpoint_from_bytes,
    load_checkpoint,
)
from triflow.synthdata import make_dataset
from triflow.trainer import model_from_checkpoint, train


@pytest.fixture
def dataset(tiny_data_config):
    return make_dataset(tiny_data_config, 2, seed=5, threads=1)


def test_no_sequences_returns_empty_list(tmp_path):
    repo = SequenceRepository(tmp_path)
    assert repo.list() == []


def test_sequences_persist_on_disk(tmp_path, dataset):
    repo = SequenceRepository(tmp_path)
    for index, sequence in enumerate(dataset):
        repo.save(index, sequence)
    assert repo.indices() == [0, 1]
    names = sorted(path.name for path in repo.path_for(0).iterdir())
    assert "frame_00.png" in names and "fwd_01.flo" in names and "occl_bwd_03.png" in names
    [first, _] = repo.list()
    original = dataset[0]
    assert first.spec == original.spec
    assert all(np.allclose(a, b, atol=0.5 / 255) for a, b in zip(first.frames, original.frames))
    for t in original.centers:
        assert np.array_equal(first.gt_fwd[t], original.gt_fwd[t])
        assert np.array_equal(first.gt_bwd[t], original.gt_bwd[t])
        assert np.array_equal(first.occl_fwd[t], original.occl_fwd[t])
    assert np.array_equal(first.valid, original.valid)


def test_pgm_frames(tmp_path, dataset):
    repo = SequenceRepository(tmp_path, frame_suffix=".pgm")
    repo.save(0, dataset[0])
    assert (repo.path_for(0) / "frame_00.pgm").exists()
    assert repo.load(0).frames[0].shape == (1, 16, 16)


def test_generation_is_byte_identical(tmp_path, tiny_data_config):
    for name in ("a", "b"):
        make_dataset(tiny_data_config, 2, seed=9, out_dir=tmp_path / name)
    first = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    second = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert first == second
    for relative in first:
        assert (tmp_path / "a" / relative).read_bytes() == (tmp_path / "b" / relative).read_bytes()


def test_checkpoint_round_trip_keeps_forward_pass(tiny_train_config, dataset, tmp_path):
    checkpoint = train(tiny_train_config.model_copy(update={"steps": 1}), dataset)
    repo = CheckpointRepository(tmp_path)
    repo.save(checkpoint)
    loaded = repo.load()
    assert loaded.config == checkpoint.config
    assert loaded.step == 1
    assert loaded.rng_state == checkpoint.rng_state
    frames = dataset[0].frames
    with T.no_grad():
        before = videoflow_forward(frames, model_from_checkpoint(checkpoint), 2)
        after = videoflow_forward(frames, model_from_checkpoint(loaded), 2)
    for a, b in zip(before, after):
        assert np.array_equal(a.high[-1].f_next.data, b.high[-1].f_next.data)
        assert np.array_equal(a.high[-1].f_prev.data, b.high[-1].f_prev.data)


def test_checkpoint_header_is_readable(tiny_train_config, dataset):
    raw = checkpoint_bytes(train(tiny_train_config.model_copy(update={"steps": 0}), dataset))
    assert raw.startswith(CHECKPOINT_MAGIC)
    length_line = raw[len(CHECKPOINT_MAGIC) :].split(b"\n", 1)[0]
    header = raw[len(CHECKPOINT_MAGIC) + len(length_line) + 1 :][: int(length_line)]
    assert b'"version":1' in header
    assert b"iters=2" in header


def test_saving_twice_keeps_a_backup(tiny_train_config, dataset, tmp_path):
    checkpoint = train(tiny_train_config.model_copy(update={"steps": 0}), dataset)
    repo = CheckpointRepository(tmp_path)
    repo.save(checkpoint)
    assert not repo.backup_path.exists()
    repo.save(checkpoint.model_copy(update={"step": 7}))
    assert repo.backup_path.exists()
    assert repo.load().step == 7


def test_broken_checkpoints_raise(tmp_path, tiny_train_config, dataset):
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(b"not a checkpoint")
    raw = checkpoint_bytes(train(tiny_train_config.model_copy(update={"steps": 0}), dataset))
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint_from_bytes(raw[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
