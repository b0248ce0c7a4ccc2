"""ASCII PLY point clouds and binary PGM images."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError


def write_ply(path, points: np.ndarray, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write (N, 3) points plus optional per-vertex scalar columns as ASCII PLY."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    extra = extra or {}
    cols = [points] + [np.asarray(v, dtype=np.float64).reshape(-1, 1) for v in extra.values()]
    data = np.hstack(cols) if cols else points
    header = ["ply", "format ascii 1.0", f"element vertex {len(points)}"]
    header += [f"property double {name}" for name in ["x", "y", "z", *extra]]
    header.append("end_header")
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        np.savetxt(fh, data, fmt="%.17g")


def read_ply(path) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Read an ASCII PLY written by :func:`write_ply`.

    Returns:
        points (N, 3) and a dict of the remaining vertex properties.
    """
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise DataError(f"{path}: not a PLY file")
        names, count = [], None
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise DataError(f"{path}: only ASCII PLY is supported")
            if tok[0] == "element" and tok[1] == "vertex":
                count = int(tok[2])
            elif tok[0] == "property":
                names.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if count is None or names[:3] != ["x", "y", "z"]:
            raise DataError(f"{path}: missing vertex x/y/z properties")
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2, max_rows=count) if count else np.zeros((0, len(names)))
    if data.shape != (count, len(names)):
        raise DataError(f"{path}: expected {count} vertices with {len(names)} properties")
    return data[:, :3].copy(), {n: data[:, i].copy() for i, n in enumerate(names[3:], start=3)}


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [0, 1] float image as binary PGM (P5, maxval 255)."""
    img = np.asarray(image, dtype=np.float64)
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a float64 array scaled by 1/maxval."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end].decode("ascii"))
        pos = end
    if fields[0] != "P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval > 255:
        raise DataError(f"{path}: 16-bit PGM not supported")
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64) / maxval
