"""Minimal PLY point-cloud reader/writer.

Supports ASCII and binary-little-endian files with a vertex element
carrying float32 x/y/z and optional uint8 red/green/blue. Additional
scalar vertex properties are skipped; elements after the vertex element
are ignored.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import SceneLoadError

_PLY_DTYPES = {
    "char": "i1",
    "int8": "i1",
    "uchar": "u1",
    "uint8": "u1",
    "short": "i2",
    "int16": "i2",
    "ushort": "u2",
    "uint16": "u2",
    "int": "i4",
    "int32": "i4",
    "uint": "u4",
    "uint32": "u4",
    "float": "f4",
    "float32": "f4",
    "double": "f8",
    "float64": "f8",
}


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read a PLY file, returning (points float32 [N,3], colors uint8 [N,3] or None)."""
    path = Path(path)
    if not path.is_file():
        raise SceneLoadError(f"point cloud file not found: {path}")
    with open(path, "rb") as f:
        fmt, vertex_props, vertex_count = _parse_header(f, path)
        names = [name for name, _ in vertex_props]
        for axis in ("x", "y", "z"):
            if axis not in names:
                raise SceneLoadError(f"{path}: vertex element lacks '{axis}' property")
        if fmt == "ascii":
            data = _read_ascii_vertices(f, vertex_props, vertex_count)
        else:
            dtype = np.dtype([(name, "<" + code) for name, code in vertex_props])
            raw = f.read(dtype.itemsize * vertex_count)
            if len(raw) < dtype.itemsize * vertex_count:
                raise SceneLoadError(f"{path}: truncated vertex data")
            data = np.frombuffer(raw, dtype=dtype)
    points = np.stack(
        [data["x"], data["y"], data["z"]], axis=1).astype(np.float32)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack(
            [data["red"], data["green"], data["blue"]], axis=1).astype(np.uint8)
    return points, colors


def write_ply(path, points: np.ndarray, colors: np.ndarray | None = None,
              binary: bool = True) -> None:
    """Write points (and optional uint8 colors) as a PLY vertex cloud."""
    points = np.asarray(points, dtype=np.float32)
    n = points.shape[0]
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {n}")
    header += ["property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8)
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            if colors is None:
                points.astype("<f4").tofile(f)
            else:
                rec = np.empty(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                         ("red", "u1"), ("green", "u1"), ("blue", "u1")])
                rec["x"], rec["y"], rec["z"] = points[:, 0], points[:, 1], points[:, 2]
                rec["red"], rec["green"], rec["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
                rec.tofile(f)
        else:
            for i in range(n):
                row = "%.9g %.9g %.9g" % tuple(points[i])
                if colors is not None:
                    row += " %d %d %d" % tuple(colors[i])
                f.write((row + "\n").encode("ascii"))


def _parse_header(f, path):
    magic = f.readline().strip()
    if magic != b"ply":
        raise SceneLoadError(f"{path}: not a PLY file")
    fmt = None
    elements = []  # list of (name, count, [(prop_name, dtype_code)])
    while True:
        line = f.readline()
        if not line:
            raise SceneLoadError(f"{path}: unterminated PLY header")
        tokens = line.decode("ascii", errors="replace").strip().split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1] == "ascii":
                fmt = "ascii"
            elif tokens[1] == "binary_little_endian":
                fmt = "binary_little_endian"
            else:
                raise SceneLoadError(f"{path}: unsupported PLY format '{tokens[1]}'")
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise SceneLoadError(f"{path}: property before element")
            if tokens[1] == "list":
                elements[-1][2].append((tokens[-1], None))
            else:
                code = _PLY_DTYPES.get(tokens[1])
                if code is None:
                    raise SceneLoadError(f"{path}: unknown property type '{tokens[1]}'")
                elements[-1][2].append((tokens[2], code))
        elif tokens[0] == "end_header":
            break
    if fmt is None:
        raise SceneLoadError(f"{path}: PLY header lacks format line")
    for name, count, props in elements:
        if name == "vertex":
            if any(code is None for _, code in props):
                raise SceneLoadError(f"{path}: list property in vertex element unsupported")
            if elements[0][0] != "vertex":
                raise SceneLoadError(f"{path}: vertex element must come first")
            return fmt, props, count
    raise SceneLoadError(f"{path}: no vertex element")


def _read_ascii_vertices(f, props, count):
    names = [name for name, _ in props]
    rows = np.empty((count, len(props)), dtype=np.float64)
    for i in range(count):
        line = f.readline()
        if not line:
            raise SceneLoadError("truncated ASCII vertex data")
        vals = line.split()
        if len(vals) < len(props):
            raise SceneLoadError(f"vertex row {i} has {len(vals)} values, expected {len(props)}")
        rows[i] = [float(v) for v in vals[: len(props)]]
    data = {}
    for j, (name, code) in enumerate(props):
        data[name] = rows[:, j].astype(np.dtype(code))
    return data
