"""Point cloud file I/O: PLY (ascii / binary little-endian) and raw .xyzf32.

The PLY reader handles the subset the pipeline needs: a vertex element whose
x, y, z properties are 32-bit floats. Extra scalar vertex properties are
skipped by stride; non-vertex elements after the vertices are ignored.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import PointCloud

_PLY_SCALAR_BYTES = {
    "char": 1, "int8": 1, "uchar": 1, "uint8": 1,
    "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
    "int": 4, "int32": 4, "uint": 4, "uint32": 4,
    "float": 4, "float32": 4, "double": 8, "float64": 8,
}

_PLY_NP = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def load_point_cloud(path) -> PointCloud:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return load_ply(path)
    if suffix == ".xyzf32":
        return load_xyzf32(path)
    raise FormatError("unknown format", f"unsupported cloud format: {path.name}")


def save_point_cloud(cloud: PointCloud, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        save_ply(cloud, path)
    elif suffix == ".xyzf32":
        save_xyzf32(cloud, path)
    else:
        raise FormatError("unknown format", f"unsupported cloud format: {path.name}")


def load_ply(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"ply"):
        raise FormatError("bad magic", f"{path}: not a PLY file")
    end = raw.find(b"end_header\n")
    if end < 0:
        raise FormatError("truncated header", f"{path}: missing end_header")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]

    fmt = None
    n_vertices = None
    properties = []  # (name, type) for the vertex element
    current_element = None
    for line in header[1:]:
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            current_element = tokens[1]
            if current_element == "vertex":
                n_vertices = int(tokens[2])
        elif tokens[0] == "property" and current_element == "vertex":
            if tokens[1] == "list":
                raise FormatError("bad property", f"{path}: list property on vertex")
            properties.append((tokens[2], tokens[1]))

    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError("bad format", f"{path}: unsupported PLY format {fmt}")
    if n_vertices is None:
        raise FormatError("bad header", f"{path}: no vertex element")
    names = [p[0] for p in properties]
    for coord in ("x", "y", "z"):
        if coord not in names:
            raise FormatError("bad header", f"{path}: missing property {coord}")
        if properties[names.index(coord)][1] not in ("float", "float32"):
            raise FormatError(
                "bad property", f"{path}: property {coord} must be float32"
            )
    cols = [names.index(c) for c in ("x", "y", "z")]

    if fmt == "ascii":
        rows = body.decode("ascii").split("\n")
        data = np.empty((n_vertices, 3), dtype=np.float64)
        for i in range(n_vertices):
            tokens = rows[i].split()
            if len(tokens) < len(properties):
                raise FormatError("truncated data", f"{path}: vertex row {i} short")
            data[i] = [float(tokens[c]) for c in cols]
        return PointCloud(points=data)

    dtype = np.dtype([(f"f{i}", "<" + _PLY_NP[t]) for i, (_, t) in enumerate(properties)])
    need = dtype.itemsize * n_vertices
    if len(body) < need:
        raise FormatError("truncated data", f"{path}: expected {need} bytes, got {len(body)}")
    table = np.frombuffer(body[:need], dtype=dtype)
    points = np.stack([table[f"f{c}"].astype(np.float64) for c in cols], axis=1)
    return PointCloud(points=points)


def save_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    n = len(cloud)
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {n}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        pts = cloud.points.astype("<f4")
        if binary:
            fh.write(pts.tobytes())
        else:
            for x, y, z in pts:
                fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n".encode("ascii"))


def load_xyzf32(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError("truncated data", f"{path}: missing point count")
    (count,) = struct.unpack("<Q", raw[:8])
    need = 8 + count * 12
    if len(raw) < need:
        raise FormatError("truncated data", f"{path}: expected {need} bytes, got {len(raw)}")
    points = np.frombuffer(raw[8:need], dtype="<f4").reshape(count, 3).astype(np.float64)
    return PointCloud(points=points)


def save_xyzf32(cloud: PointCloud, path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(cloud)))
        fh.write(cloud.points.astype("<f4").tobytes())
