"""On-disk datasets: episode directories, policy triples and classifier pairs.

Episode directory::

    manifest.json
    episodes/ep_0000.bin   header line + per sequence: params, then F frames

Triples and pairs are single files with the same header-line + f32 blob layout
as checkpoints. A triples header also names the action parameters and the bin
layout the samples were drawn for.
"""

import json
import logging
import shutil
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np

from .checkpoint import FORMAT_VERSION, read_header_and_blob, write_header_and_blob
from .errors import BinError, DataError, UsageError
from .models import Action, ActionSequence, BinSpec, Episode, PairSample, PointCloud, PolicySample
from .multibin import make_bins

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def prepare_output(path: Union[str, Path], force: bool = False) -> Path:
    """Refuse to overwrite an existing output unless forced."""
    path = Path(path)
    if path.exists():
        if not force:
            raise UsageError(f"output exists: {path} (use --force to overwrite)", code="OUTPUT_EXISTS")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    return path


def save_episodes(out_dir: Union[str, Path], episodes: List[Episode], info: Dict[str, Any], force: bool = False) -> Path:
    """Write a dataset directory for one tool.

    Args:
        out_dir: Dataset directory (created)
        episodes: Episodes of a single tool
        info: Extra manifest fields (config_hash, seed, param_names, ...)
        force: Overwrite an existing directory

    Returns:
        Path of the written manifest
    """
    out_dir = prepare_output(out_dir, force)
    if not episodes:
        raise DataError("no episodes to write", code="NO_DATA")
    (out_dir / "episodes").mkdir(parents=True)

    first = episodes[0].sequences[0]
    groups = first.frames[0].groups
    n_dough = int(np.count_nonzero(groups == 0))
    frames = len(first.frames)
    for k, ep in enumerate(episodes):
        header = {
            "format_version": FORMAT_VERSION,
            "tool": ep.tool,
            "n_sequences": len(ep.sequences),
            "frames": frames,
            "n_points": len(groups),
            "n_params": len(first.action.params),
            "groups": groups.tolist(),
        }
        arrays = []
        for seq in ep.sequences:
            arrays.append(seq.action.params)
            arrays.extend(frame.positions for frame in seq.frames)
        write_header_and_blob(out_dir / "episodes" / f"ep_{k:04d}.bin", header, arrays)

    manifest = {
        "format_version": FORMAT_VERSION,
        "tool": episodes[0].tool,
        "episodes": len(episodes),
        "sequences": [len(ep.sequences) for ep in episodes],
        "frames": frames,
        "n_dough": n_dough,
        "n_tool": len(groups) - n_dough,
        "units": "m",
    }
    manifest.update(info)
    manifest_path = out_dir / MANIFEST
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info("Wrote %d episodes to %s", len(episodes), out_dir)
    return manifest_path


def load_manifest(data_dir: Union[str, Path]) -> Dict[str, Any]:
    path = Path(data_dir) / MANIFEST
    if not path.exists():
        raise DataError(f"no dataset at {data_dir} (missing {MANIFEST})", code="NO_DATA")
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"{path}: format_version {manifest.get('format_version')} is not supported (expected {FORMAT_VERSION})",
            code="FORMAT_VERSION",
        )
    return manifest


def load_episodes(data_dir: Union[str, Path]) -> Tuple[Dict[str, Any], List[Episode]]:
    """Read a dataset directory written by save_episodes.

    Raises:
        DataError: NO_DATA when missing or empty, FORMAT_VERSION on mismatch
    """
    manifest = load_manifest(data_dir)
    files = sorted((Path(data_dir) / "episodes").glob("ep_*.bin"))
    if not files:
        raise DataError(f"dataset {data_dir} holds no episodes", code="NO_DATA")

    episodes = []
    for path in files:
        header, blob = read_header_and_blob(path)
        groups = np.asarray(header["groups"], dtype=np.int64)
        n_points, n_params, frames = header["n_points"], header["n_params"], header["frames"]
        per_seq = n_params + frames * n_points * 3
        if len(blob) != per_seq * header["n_sequences"]:
            raise DataError(f"{path}: blob length does not match header", code="BLOB_SIZE")
        ep = Episode(tool=header["tool"])
        for s in range(header["n_sequences"]):
            chunk = blob[s * per_seq:(s + 1) * per_seq]
            action = Action(header["tool"], chunk[:n_params].astype(np.float64))
            clouds = chunk[n_params:].reshape(frames, n_points, 3).astype(np.float64)
            ep.sequences.append(ActionSequence(action, [PointCloud(c, groups=groups) for c in clouds]))
        episodes.append(ep)
    return manifest, episodes


def save_triples(
    path: Union[str, Path],
    samples: List[PolicySample],
    param_names: Sequence[str],
    bins: Sequence[BinSpec],
    info: Dict[str, Any],
    force: bool = False,
) -> str:
    """Write policy triples: two clouds and a parameter vector per record.

    The header names every parameter and carries its bin layout, so the
    labels decode without the run configuration.
    """
    path = prepare_output(path, force)
    if not samples:
        raise DataError("no triples to write", code="NO_DATA")
    n_params = int(len(samples[0].params))
    if len(param_names) != n_params or len(bins) != n_params:
        raise DataError(
            f"{n_params} parameters per triple but {len(param_names)} names and {len(bins)} bin layouts",
            code="BIN_MISMATCH",
        )
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "policy_triples",
        "count": len(samples),
        "n_points": int(samples[0].current.shape[0]),
        "n_params": n_params,
        "param_names": list(param_names),
        "bins": [{"lo": b.low, "hi": b.high, "n_bins": b.n} for b in bins],
    }
    header.update(info)
    arrays = []
    for s in samples:
        arrays += [s.current, s.result, s.params]
    write_header_and_blob(path, header, arrays)
    return str(path)


def triples_bins(header: Dict[str, Any]) -> List[BinSpec]:
    """Bin layouts stored in a triples header.

    Raises:
        DataError: BIN_MISMATCH when names or layouts are missing, miscounted
            or degenerate
    """
    names, layouts = header.get("param_names"), header.get("bins")
    if names is None or layouts is None:
        raise DataError("triples header lacks param_names or bins", code="BIN_MISMATCH")
    if len(names) != header["n_params"] or len(layouts) != header["n_params"]:
        raise DataError(
            f"triples header has {len(names)} names and {len(layouts)} bin layouts for {header['n_params']} parameters",
            code="BIN_MISMATCH",
        )
    try:
        return [make_bins(b["lo"], b["hi"], b["n_bins"]) for b in layouts]
    except (BinError, KeyError, TypeError) as e:
        raise DataError(f"bad bin layout in triples header: {e}", code="BIN_MISMATCH") from e


def load_triples(path: Union[str, Path]) -> Tuple[Dict[str, Any], List[PolicySample]]:
    header, blob = read_header_and_blob(path)
    if header.get("kind") != "policy_triples":
        raise DataError(f"{path} is not a policy triples file", code="FORMAT_VERSION")
    triples_bins(header)
    n, k = header["n_points"], header["n_params"]
    size = 2 * n * 3 + k
    if len(blob) != size * header["count"]:
        raise DataError(f"{path}: blob length does not match header", code="BLOB_SIZE")
    samples = []
    for r in range(header["count"]):
        rec = blob[r * size:(r + 1) * size].astype(np.float64)
        samples.append(PolicySample(rec[:n * 3].reshape(n, 3), rec[n * 3:2 * n * 3].reshape(n, 3), rec[2 * n * 3:]))
    if not samples:
        raise DataError(f"{path} holds no triples", code="NO_DATA")
    return header, samples


def save_pairs(path: Union[str, Path], pairs: List[PairSample], labels: List[str], info: Dict[str, Any], force: bool = False) -> str:
    """Write classifier pairs; each record is before, after and a label index."""
    path = prepare_output(path, force)
    if not pairs:
        raise DataError("no pairs to write", code="NO_DATA")
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "tool_pairs",
        "count": len(pairs),
        "n_points": len(pairs[0].before),
        "labels": labels,
    }
    header.update(info)
    arrays = []
    for p in pairs:
        arrays += [p.before.positions, p.after.positions, np.array([labels.index(p.label)])]
    write_header_and_blob(path, header, arrays)
    return str(path)


def load_pairs(path: Union[str, Path]) -> Tuple[Dict[str, Any], List[PairSample]]:
    header, blob = read_header_and_blob(path)
    if header.get("kind") != "tool_pairs":
        raise DataError(f"{path} is not a tool pairs file", code="FORMAT_VERSION")
    n = header["n_points"]
    size = 2 * n * 3 + 1
    if len(blob) != size * header["count"]:
        raise DataError(f"{path}: blob length does not match header", code="BLOB_SIZE")
    pairs = []
    for r in range(header["count"]):
        rec = blob[r * size:(r + 1) * size].astype(np.float64)
        label = header["labels"][int(round(rec[-1]))]
        pairs.append(PairSample(PointCloud(rec[:n * 3].reshape(n, 3)), PointCloud(rec[n * 3:2 * n * 3].reshape(n, 3)), label))
    return header, pairs
