"""
Checkpoint container:

    8-byte magic | uint32 format_version | uint64 metadata length | metadata JSON | arrays

Metadata holds the config, seeds, step counter and a directory of named
arrays (shape, dtype, byte offset into the array section, frozen flag).
Arrays are little-endian and stored back to back in directory order:
model parameters first, then the AdamW moments of every trainable
parameter that has optimizer state.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from App.core.config import TrainConfig
from App.core.errors import (
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    OutputPathError,
)
from App.services.trainer import Trainer

logger = logging.getLogger(__name__)

MAGIC = b"MARMAER\x00"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _collect_arrays(trainer: Trainer) -> Tuple[List[dict], List[np.ndarray], Dict[str, int]]:
    model, optimizer = trainer.model, trainer.optimizer
    dtype = _DTYPES[trainer.config.dtype]
    entries, arrays, optimizer_steps = [], [], {}

    def add(name: str, kind: str, tensor: torch.Tensor, frozen: bool) -> None:
        array = tensor.detach().cpu().numpy().astype(dtype)
        entries.append({"name": name, "kind": kind, "shape": list(array.shape), "dtype": dtype, "frozen": frozen})
        arrays.append(array)

    named = list(model.named_parameters())
    for name, p in named:
        add(name, "param", p, frozen=not p.requires_grad)
    for name, p in named:
        state = optimizer.state.get(p)
        if not state:
            continue
        add(name, "exp_avg", state["exp_avg"], frozen=False)
        add(name, "exp_avg_sq", state["exp_avg_sq"], frozen=False)
        optimizer_steps[name] = int(float(state["step"]))
    return entries, arrays, optimizer_steps


def save_checkpoint(trainer: Trainer, path: Union[str, Path]) -> Path:
    """
    Serialize model, optimizer moments and step counter. The byte stream
    is a pure function of the trainer state.
    """
    path = Path(path)
    entries, arrays, optimizer_steps = _collect_arrays(trainer)
    offset = 0
    for entry, array in zip(entries, arrays):
        entry["offset"] = offset
        entry["nbytes"] = array.nbytes
        offset += array.nbytes

    config = trainer.config
    metadata = {
        "format_version": FORMAT_VERSION,
        "config": config.model_dump(),
        "seeds": {"seed": config.seed, "text_seed": config.text_seed, "embed_seed": config.embed_seed},
        "step": trainer.step,
        "optimizer_steps": optimizer_steps,
        "arrays": entries,
    }
    meta_bytes = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as fh:
            fh.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(meta_bytes)))
            fh.write(meta_bytes)
            for array in arrays:
                fh.write(array.tobytes(order="C"))
    except OSError as e:
        raise OutputPathError(path, e.strerror or str(e))
    logger.info("Saved checkpoint at step %d to %s", trainer.step, path)
    return path


def read_checkpoint(path: Union[str, Path]) -> Tuple[dict, Dict[Tuple[str, str], np.ndarray]]:
    """Parse and validate the container without touching any model."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _PREAMBLE.size:
        if not MAGIC.startswith(blob[:8]):
            raise CheckpointVersionError(f"{path} is not a checkpoint (bad magic)")
        raise CheckpointTruncatedError(f"{path} ends inside the header")
    magic, version, meta_len = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointVersionError(f"{path} is not a checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path} has format_version {version}, expected {FORMAT_VERSION}")
    start = _PREAMBLE.size
    if len(blob) < start + meta_len:
        raise CheckpointTruncatedError(f"{path} ends inside the metadata block")
    try:
        metadata = json.loads(blob[start:start + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointTruncatedError(f"{path} has an unreadable metadata block: {e}")

    data_start = start + meta_len
    arrays = {}
    for entry in metadata["arrays"]:
        begin = data_start + entry["offset"]
        end = begin + entry["nbytes"]
        if end > len(blob):
            raise CheckpointTruncatedError(f"{path} ends inside array '{entry['name']}' ({entry['kind']})")
        array = np.frombuffer(blob[begin:end], dtype=entry["dtype"]).reshape(entry["shape"])
        arrays[(entry["kind"], entry["name"])] = array
    return metadata, arrays


def load_checkpoint(path: Union[str, Path], config: Optional[TrainConfig] = None) -> Trainer:
    """
    Rebuild a Trainer from a checkpoint. Nothing is copied into the model
    until every array has been read and shape-checked.

    Args:
        path: checkpoint file
        config: build the model from this config instead of the stored one

    Returns:
        Trainer: model, optimizer moments and step counter as saved
    """
    metadata, arrays = read_checkpoint(path)
    config = config or TrainConfig.model_validate(metadata["config"])
    trainer = Trainer(config)
    model = trainer.model

    params = dict(model.named_parameters())
    staged = {}
    for (kind, name), array in arrays.items():
        if name not in params:
            raise CheckpointShapeError(name, (), array.shape)
        expected = tuple(params[name].shape)
        if tuple(array.shape) != expected:
            raise CheckpointShapeError(name, expected, array.shape)
        staged[(kind, name)] = torch.from_numpy(array.copy()).to(model.dtype)
    missing = [name for name in params if ("param", name) not in staged]
    if missing:
        raise CheckpointTruncatedError(f"{path} has no array for parameter '{missing[0]}'")

    with torch.no_grad():
        for name, p in params.items():
            p.copy_(staged[("param", name)])
    for name, step in metadata.get("optimizer_steps", {}).items():
        p = params[name]
        trainer.optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": staged[("exp_avg", name)].clone(),
            "exp_avg_sq": staged[("exp_avg_sq", name)].clone(),
        }
    trainer.step = int(metadata["step"])
    logger.info("Loaded checkpoint %s at step %d", path, trainer.step)
    return trainer
