"""ASCII PLY import/export for point clouds."""

from pathlib import Path
from typing import List, Union

import numpy as np

from .errors import PlyParseError
from .models import PointCloud

_FLOAT_TYPES = {"float", "float32", "double", "float64"}
_INT_TYPES = {"uchar", "uint8", "char", "int8", "short", "ushort", "int", "uint", "int32", "uint32"}


def write_ply(path: Union[str, Path], cloud: PointCloud) -> str:
    """Write a cloud as ASCII PLY (x y z [nx ny nz] [group])."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    props = ["x", "y", "z"]
    columns = [cloud.positions]
    if cloud.normals is not None:
        props += ["nx", "ny", "nz"]
        columns.append(cloud.normals)

    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    header += [f"property float {p}" for p in props]
    if cloud.groups is not None:
        header.append("property uchar group")
    header.append("end_header")

    data = np.concatenate(columns, axis=1) if columns else np.zeros((0, 3))
    lines = []
    for i, row in enumerate(data):
        fields = [repr(float(v)) for v in row]
        if cloud.groups is not None:
            fields.append(str(int(cloud.groups[i])))
        lines.append(" ".join(fields))

    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(header) + "\n")
        if lines:
            f.write("\n".join(lines) + "\n")
    return str(path)


def read_ply(path: Union[str, Path]) -> PointCloud:
    """Read an ASCII PLY vertex element into a PointCloud.

    Raises:
        PlyParseError: On any malformed line, with its 1-based line number
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()

    if not lines or lines[0].strip() != "ply":
        raise PlyParseError("missing 'ply' magic", 1)

    props: List[str] = []
    count = None
    in_vertex = False
    body_start = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tokens = raw.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise PlyParseError(f"unsupported format '{raw.strip()}'", lineno)
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise PlyParseError("bad element line", lineno)
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                try:
                    count = int(tokens[2])
                except ValueError:
                    raise PlyParseError(f"bad vertex count '{tokens[2]}'", lineno)
        elif tokens[0] == "property":
            if len(tokens) != 3 or tokens[1] not in _FLOAT_TYPES | _INT_TYPES:
                raise PlyParseError(f"unsupported property '{raw.strip()}'", lineno)
            if in_vertex:
                props.append(tokens[2])
        elif tokens[0] == "end_header":
            body_start = lineno
            break
        else:
            raise PlyParseError(f"unexpected header token '{tokens[0]}'", lineno)

    if body_start is None:
        raise PlyParseError("missing end_header", len(lines))
    if count is None:
        raise PlyParseError("no vertex element", body_start)
    for axis in ("x", "y", "z"):
        if axis not in props:
            raise PlyParseError(f"vertex element lacks property '{axis}'", body_start)

    rows = np.zeros((count, len(props)))
    for i in range(count):
        lineno = body_start + 1 + i
        if lineno > len(lines):
            raise PlyParseError(f"expected {count} vertices, file ended after {i}", len(lines))
        tokens = lines[lineno - 1].split()
        if len(tokens) != len(props):
            raise PlyParseError(f"expected {len(props)} values, got {len(tokens)}", lineno)
        try:
            rows[i] = [float(t) for t in tokens]
        except ValueError:
            raise PlyParseError("non-numeric vertex value", lineno)

    col = {name: i for i, name in enumerate(props)}
    positions = rows[:, [col["x"], col["y"], col["z"]]]
    normals = None
    if all(a in col for a in ("nx", "ny", "nz")):
        normals = rows[:, [col["nx"], col["ny"], col["nz"]]]
    groups = rows[:, col["group"]].astype(np.int64) if "group" in col else None
    return PointCloud(positions, normals, groups)
