"""X2D3D checkpoint files holding both embedder branches."""
from __future__ import annotations

import struct

import numpy as np

from ..errors import DataError

MAGIC = b"X2D3D"
VERSION = 1


def _descriptor_dim(params: dict) -> int:
    for key in ("img.fc1.b", "pt.fc1.b"):
        if key in params:
            return int(params[key].shape[0])
    raise ValueError("parameters carry no head bias to read D from")


def save_checkpoint(path, image_params: dict, point_params: dict) -> None:
    """Write both branches; tensors are stored sorted by name."""
    params = {**image_params, **point_params}
    if len(params) != len(image_params) + len(point_params):
        raise ValueError("image and point parameter names overlap")
    out = [MAGIC, struct.pack("<III", VERSION, _descriptor_dim(params), len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_checkpoint(path) -> tuple[dict, dict, int]:
    """Read a checkpoint; returns (image_params, point_params, D).

    Raises:
        DataError: bad magic, unknown version, truncation or trailing bytes.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:5] != MAGIC or len(raw) < 17:
        raise DataError(f"{path}: not an X2D3D checkpoint")
    version, D, count = struct.unpack_from("<III", raw, 5)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 17
    img, pts = {}, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", raw, pos)
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * size > len(raw):
                raise DataError(f"{path}: truncated tensor {name}")
            arr = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * size
            if name.startswith("img."):
                img[name] = arr
            elif name.startswith("pt."):
                pts[name] = arr
            else:
                raise DataError(f"{path}: tensor {name!r} has no branch prefix")
    except (struct.error, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: malformed checkpoint ({exc})") from exc
    if pos != len(raw):
        raise DataError(f"{path}: {len(raw) - pos} trailing bytes")
    for p in (img, pts):
        if not all(np.all(np.isfinite(a)) for a in p.values()):
            raise DataError(f"{path}: non-finite tensor values")
    return img, pts, D
