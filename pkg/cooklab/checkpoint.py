"""Checkpoint files: one JSON header line, a newline, then a raw float32 blob.

The blob holds every parameter (row-major, little-endian) in header order. When
the header carries an ``optimizer`` entry, the Adam first and second moments
follow the parameters in the same order.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import DataError
from .models import Checkpoint
from .nn import AdamState

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


def write_header_and_blob(path: Union[str, Path], header: Dict[str, Any], arrays: Sequence[np.ndarray]):
    """Atomically write a header line followed by concatenated f32 arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype=_LE_F32).tobytes())
    os.replace(tmp, path)


def read_header_and_blob(path: Union[str, Path]):
    """Return (header dict, flat float32 blob)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}", code="NO_DATA")
    raw = path.read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise DataError(f"{path}: missing header line", code="FORMAT_VERSION")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: unreadable header ({e})", code="FORMAT_VERSION")
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(
            f"{path}: format_version {version} is not supported (expected {FORMAT_VERSION})",
            code="FORMAT_VERSION",
        )
    body = raw[newline + 1:]
    if len(body) % 4:
        raise DataError(f"{path}: blob length {len(body)} is not a multiple of 4", code="BLOB_SIZE")
    return header, np.frombuffer(body, dtype=_LE_F32).astype(np.float32)


def _split(blob: np.ndarray, shapes: List[List[int]]) -> List[np.ndarray]:
    out = []
    offset = 0
    for shape in shapes:
        size = int(np.prod(shape)) if shape else 1
        out.append(blob[offset:offset + size].reshape(shape))
        offset += size
    return out


def make_checkpoint(
    architecture: str,
    params: Sequence[np.ndarray],
    layer_sizes: Dict[str, Any],
    config_hash: str,
    meta: Optional[Dict[str, Any]] = None,
    optimizer: Optional[AdamState] = None,
    epoch: Optional[int] = None,
) -> Checkpoint:
    """Snapshot parameters (and optionally Adam state) as float32 arrays."""
    params = [np.asarray(p, dtype=np.float32).copy() for p in params]
    shapes = [list(p.shape) for p in params]
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": architecture,
        "layer_sizes": layer_sizes,
        "config_hash": config_hash,
        "param_shapes": shapes,
        "param_count": int(sum(int(np.prod(s)) if s else 1 for s in shapes)),
        "meta": meta or {},
    }
    opt = None
    if optimizer is not None:
        header["optimizer"] = {"step": optimizer.step, "epoch": epoch}
        opt = {
            "step": optimizer.step,
            "epoch": epoch,
            "m": [np.asarray(a, dtype=np.float32).copy() for a in optimizer.m],
            "v": [np.asarray(a, dtype=np.float32).copy() for a in optimizer.v],
        }
    return Checkpoint(header=header, params=params, optimizer=opt)


def write_checkpoint(path: Union[str, Path], ckpt: Checkpoint, with_optimizer: bool = True) -> str:
    """Write a checkpoint; optimizer moments are appended when present."""
    header = dict(ckpt.header)
    arrays = list(ckpt.params)
    if with_optimizer and ckpt.optimizer is not None:
        arrays += list(ckpt.optimizer["m"]) + list(ckpt.optimizer["v"])
    else:
        header.pop("optimizer", None)
    write_header_and_blob(path, header, arrays)
    logger.debug("Saved %s checkpoint (%d params) to %s", header["architecture"], header["param_count"], path)
    return str(path)


def save_checkpoint(path: Union[str, Path], architecture: str, params: Sequence[np.ndarray], layer_sizes: Dict[str, Any], config_hash: str, **kwargs) -> str:
    return write_checkpoint(path, make_checkpoint(architecture, params, layer_sizes, config_hash, **kwargs))


def load_checkpoint(path: Union[str, Path], architecture: Optional[str] = None) -> Checkpoint:
    """Read a checkpoint, checking version, architecture and blob length.

    Raises:
        DataError: FORMAT_VERSION, BLOB_SIZE or ARCHITECTURE problems
    """
    header, blob = read_header_and_blob(path)
    if architecture is not None and header.get("architecture") != architecture:
        raise DataError(
            f"{path}: architecture '{header.get('architecture')}' where '{architecture}' was expected",
            code="ARCHITECTURE",
        )
    count = header["param_count"]
    expected = count * (3 if "optimizer" in header else 1)
    if len(blob) != expected:
        raise DataError(f"{path}: blob holds {len(blob)} values, header implies {expected}", code="BLOB_SIZE")

    shapes = header["param_shapes"]
    params = _split(blob[:count], shapes)
    optimizer = None
    if "optimizer" in header:
        optimizer = {
            "step": header["optimizer"]["step"],
            "epoch": header["optimizer"].get("epoch"),
            "m": _split(blob[count:2 * count], shapes),
            "v": _split(blob[2 * count:], shapes),
        }
    return Checkpoint(header=header, params=params, optimizer=optimizer)


def adam_state_from(ckpt: Checkpoint) -> Optional[AdamState]:
    if ckpt.optimizer is None:
        return None
    return AdamState(
        m=[np.array(a) for a in ckpt.optimizer["m"]],
        v=[np.array(a) for a in ckpt.optimizer["v"]],
        step=int(ckpt.optimizer["step"]),
    )


def resume_epoch(ckpt: Checkpoint) -> int:
    """First epoch still to run after a checkpoint."""
    epoch = (ckpt.optimizer or {}).get("epoch")
    return 0 if epoch is None else int(epoch) + 1
