"""
On-disk layouts: synthetic sequence directories and model checkpoints.

A checkpoint is a magic line, the byte length of a JSON header, the header
itself and then the raw little-endian float32 payload of every tensor.
"""

from __future__ import annotations

import shutil
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .config import dump_config, parse_config_text
from .errors import CheckpointError, ConfigError
from .flowio import load_frame, load_mask, read_flo, save_frame, save_mask, write_flo
from .models import Checkpoint, CheckpointHeader, SceneSpec, TensorEntry
from .synthdata import SyntheticSequence

CHECKPOINT_MAGIC = b"TRIFLOW-CHECKPOINT\n"


class SequenceRepository:
    frame_suffix: str = ".png"

    def __init__(self, base_dir: Path, frame_suffix: str | None = None):
        self.base_dir = Path(base_dir)
        self.base_dir.mkdir(parents=True, exist_ok=True)
        if frame_suffix is not None:
            self.frame_suffix = frame_suffix

    def path_for(self, index: int) -> Path:
        return self.base_dir / f"seq_{index:04d}"

    def save(self, index: int, sequence: SyntheticSequence) -> Path:
        path = self.path_for(index)
        path.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(sequence.frames):
            save_frame(path / f"frame_{t:02d}{self.frame_suffix}", frame)
        for t in sequence.centers:
            write_flo(path / f"fwd_{t:02d}.flo", sequence.gt_fwd[t])
            write_flo(path / f"bwd_{t:02d}.flo", sequence.gt_bwd[t])
            save_mask(path / f"occl_fwd_{t:02d}.png", sequence.occl_fwd[t])
            save_mask(path / f"occl_bwd_{t:02d}.png", sequence.occl_bwd[t])
        save_mask(path / "valid.png", sequence.valid)
        (path / "meta.json").write_text(sequence.spec.model_dump_json(indent=2) + "\n")
        return path

    def indices(self) -> list[int]:
        return sorted(
            int(path.name.removeprefix("seq_"))
            for path in self.base_dir.glob("seq_*")
            if path.is_dir() and path.name.removeprefix("seq_").isdigit()
        )

    def load(self, index: int) -> SyntheticSequence:
        path = self.path_for(index)
        spec = SceneSpec.model_validate_json((path / "meta.json").read_text())
        frames = [
            load_frame(path / f"frame_{t:02d}{self.frame_suffix}") for t in range(spec.frame_count)
        ]
        centers = range(1, spec.frame_count - 1)
        return SyntheticSequence(
            spec=spec,
            frames=frames,
            gt_fwd={t: read_flo(path / f"fwd_{t:02d}.flo") for t in centers},
            gt_bwd={t: read_flo(path / f"bwd_{t:02d}.flo") for t in centers},
            valid=load_mask(path / "valid.png"),
            occl_fwd={t: load_mask(path / f"occl_fwd_{t:02d}.png") for t in centers},
            occl_bwd={t: load_mask(path / f"occl_bwd_{t:02d}.png") for t in centers},
        )

    def list(self) -> list[SyntheticSequence]:
        return [self.load(index) for index in self.indices()]


def checkpoint_bytes(checkpoint: Checkpoint) -> bytes:
    entries, payloads, offset = [], [], 0
    for name in sorted(checkpoint.params):
        array = np.ascontiguousarray(checkpoint.params[name], dtype="<f4")
        entries.append(TensorEntry(name=name, shape=array.shape, offset=offset))
        payloads.append(array.tobytes())
        offset += array.nbytes
    header = CheckpointHeader(
        config=dump_config(checkpoint.config),
        step=checkpoint.step,
        seed=checkpoint.seed,
        rng_state=checkpoint.rng_state,
        tensors=entries,
    ).model_dump_json().encode()
    return CHECKPOINT_MAGIC + f"{len(header)}\n".encode() + header + b"".join(payloads)


def checkpoint_from_bytes(raw: bytes, source: str = "checkpoint") -> Checkpoint:
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{source}: not a triflow checkpoint")
    rest = raw[len(CHECKPOINT_MAGIC) :]
    length_line, newline, rest = rest.partition(b"\n")
    if not newline or not length_line.isdigit():
        raise CheckpointError(f"{source}: malformed header length")
    length = int(length_line)
    try:
        header = CheckpointHeader.model_validate_json(rest[:length])
        config = parse_config_text(header.config)
    except (ValidationError, ConfigError) as e:
        raise CheckpointError(f"{source}: unreadable header: {e}") from None
    payload = rest[length:]
    params = {}
    for entry in header.tensors:
        count = int(np.prod(entry.shape, dtype=np.int64))
        end = entry.offset + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{source}: truncated payload for {entry.name}")
        data = np.frombuffer(payload, dtype="<f4", count=count, offset=entry.offset)
        params[entry.name] = data.reshape(entry.shape).astype(np.float32)
    return Checkpoint(params=params, config=config, step=header.step, rng_state=header.rng_state)


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(checkpoint))


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    return checkpoint_from_bytes(path.read_bytes(), source=str(path))


class CheckpointRepository:
    name: str = "model.ckpt"

    def __init__(self, base_dir: Path):
        self.base_dir = Path(base_dir)
        self.base_dir.mkdir(parents=True, exist_ok=True)

    @property
    def path(self) -> Path:
        return self.base_dir / self.name

    @property
    def backup_path(self) -> Path:
        return self.base_dir / f"{self.name}.backup"

    def create_backup(self):
        if self.path.exists():
            shutil.copyfile(self.path, self.backup_path)

    def save(self, checkpoint: Checkpoint) -> Path:
        self.create_backup()
        save_checkpoint(self.path, checkpoint)
        return self.path

    def load(self) -> Checkpoint:
        return load_checkpoint(self.path)
