"""File formats: binary PLY, PFM depth maps, 8-bit PNG, atomic writes."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image


class MalformedPly(ValueError):
    pass


class InvalidCount(ValueError):
    pass


class MalformedPfm(ValueError):
    pass


_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write to a sibling temp file, then rename over the target."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_ply(path, columns: dict[str, np.ndarray], comments: list[str] = ()) -> None:
    """Write float32 vertex columns as a binary little-endian PLY."""
    names = list(columns)
    n = len(next(iter(columns.values())))
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {n}")
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    rec = np.empty(n, dtype=[(name, "<f4") for name in names])
    for name in names:
        rec[name] = columns[name]
    data = ("\n".join(header) + "\n").encode("ascii") + rec.tobytes()
    atomic_write_bytes(path, data)


def read_ply(path) -> tuple[dict[str, np.ndarray], list[str]]:
    """Read the vertex element of a binary little-endian PLY.

    Returns the per-property arrays (as stored) and the comment lines.
    """
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise MalformedPly(f"{path}: not a PLY file")
    nl = raw.find(b"\n", end)
    body = raw[nl + 1:]
    lines = raw[:end].decode("ascii", errors="replace").splitlines()

    comments, props = [], []
    n_vertex = None
    in_vertex = False
    for line in lines[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "binary_little_endian":
                raise MalformedPly(f"{path}: unsupported format {tok[1]}")
        elif tok[0] == "comment":
            comments.append(line[len("comment "):])
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
            elif n_vertex is None:
                raise MalformedPly(f"{path}: vertex must be the first element")
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list" or tok[1] not in _PLY_TYPES:
                raise MalformedPly(f"{path}: unsupported property {line!r}")
            props.append((tok[2], "<" + _PLY_TYPES[tok[1]]))
    if n_vertex is None:
        raise MalformedPly(f"{path}: no vertex element")
    dtype = np.dtype(props)
    if len(body) < n_vertex * dtype.itemsize:
        raise MalformedPly(f"{path}: truncated vertex data")
    rec = np.frombuffer(body, dtype=dtype, count=n_vertex)
    return {name: rec[name].copy() for name, _ in props}, comments


def write_points_ply(path, points: np.ndarray) -> None:
    points = np.asarray(points)
    write_ply(path, {"x": points[:, 0], "y": points[:, 1], "z": points[:, 2]})


def read_points_ply(path) -> np.ndarray:
    cols, _ = read_ply(path)
    try:
        return np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    except KeyError as exc:
        raise MalformedPly(f"{path}: missing property {exc.args[0]}") from None


def write_pfm(path, image: np.ndarray) -> None:
    """Single-channel little-endian PFM (rows stored bottom-to-top)."""
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 2:
        raise ValueError("write_pfm expects an H x W array")
    h, w = image.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    atomic_write_bytes(path, header + np.flipud(image).tobytes())


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() not in (b"Pf", b"PF"):
        raise MalformedPfm(f"{path}: not a PFM file")
    channels = 1 if parts[0].strip() == b"Pf" else 3
    w, h = (int(v) for v in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(parts[3], dtype=dtype, count=w * h * channels)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_png(path, rgb: np.ndarray) -> None:
    rgb8 = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    tmp = Path(path).with_name(Path(path).name + ".tmp.png")
    Image.fromarray(rgb8, mode="RGB").save(tmp)
    os.replace(tmp, path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
