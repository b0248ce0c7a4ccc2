"""The image descriptor G and the point-volume descriptor F.

Parameters are plain ``dict[str, ndarray]`` so optimizers, checkpoints and
gradient checks can treat both branches alike. Names carry an ``img.`` or
``pt.`` prefix.

G: [conv3x3 -> ReLU -> 2x2 avg-pool] x 3 -> global average pool ->
   affine -> ReLU -> affine -> L2 norm.
F: per-point [affine -> ReLU] x 3 -> max over points ->
   affine -> ReLU -> affine -> L2 norm.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, NonFiniteActivation
from . import layers as L


@dataclass(frozen=True)
class ImageNetShape:
    channels: tuple[int, ...] = (16, 32, 64)
    hidden: int = 64
    D: int = 128


@dataclass(frozen=True)
class PointNetShape:
    widths: tuple[int, ...] = (32, 64, 128)
    hidden: int = 64
    D: int = 128


def _kaiming(rng, fan_in, shape):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_image_params(shape: ImageNetShape = ImageNetShape(), seed: int = 0) -> dict:
    """Kaiming-uniform weights, zero biases."""
    if not shape.channels or shape.D < 1:
        raise ConfigError("image network needs at least one conv block and D >= 1")
    rng = np.random.default_rng([seed, 1])
    params = {}
    cin = 1
    for i, cout in enumerate(shape.channels):
        params[f"img.conv{i}.w"] = _kaiming(rng, cin * 9, (cin, 3, 3, cout))
        params[f"img.conv{i}.b"] = np.zeros(cout)
        cin = cout
    params["img.fc0.w"] = _kaiming(rng, cin, (cin, shape.hidden))
    params["img.fc0.b"] = np.zeros(shape.hidden)
    params["img.fc1.w"] = _kaiming(rng, shape.hidden, (shape.hidden, shape.D))
    params["img.fc1.b"] = np.zeros(shape.D)
    return params


def init_point_params(shape: PointNetShape = PointNetShape(), seed: int = 0) -> dict:
    """Kaiming-uniform weights, zero biases."""
    if not shape.widths or shape.D < 1:
        raise ConfigError("point network needs at least one shared layer and D >= 1")
    rng = np.random.default_rng([seed, 2])
    params = {}
    cin = 3
    for i, cout in enumerate(shape.widths):
        params[f"pt.mlp{i}.w"] = _kaiming(rng, cin, (cin, cout))
        params[f"pt.mlp{i}.b"] = np.zeros(cout)
        cin = cout
    params["pt.fc0.w"] = _kaiming(rng, cin, (cin, shape.hidden))
    params["pt.fc0.b"] = np.zeros(shape.hidden)
    params["pt.fc1.w"] = _kaiming(rng, shape.hidden, (shape.hidden, shape.D))
    params["pt.fc1.b"] = np.zeros(shape.D)
    return params


def _count(params, prefix):
    return sum(1 for k in params if k.startswith(prefix) and k.endswith(".w"))


def _check(x, where):
    if not np.all(np.isfinite(x)):
        raise NonFiniteActivation(f"non-finite activation after {where}")
    return x


def image_forward(params: dict, x: np.ndarray):
    """Descriptors for a (N, H, W) stack of patches; returns (out (N, D), cache)."""
    h = np.asarray(x, dtype=np.float64)[..., None]
    caches = []
    for i in range(_count(params, "img.conv")):
        h, c_conv = L.conv3x3_forward(h, params[f"img.conv{i}.w"], params[f"img.conv{i}.b"])
        h, c_relu = L.relu_forward(h)
        h, c_pool = L.avgpool2_forward(h)
        caches.append((c_conv, c_relu, c_pool))
        _check(h, f"conv block {i}")
    h, c_gap = L.global_avg_forward(h)
    h, c_fc0 = L.dense_forward(h, params["img.fc0.w"], params["img.fc0.b"])
    h, c_r0 = L.relu_forward(h)
    h, c_fc1 = L.dense_forward(h, params["img.fc1.w"], params["img.fc1.b"])
    _check(h, "image head")
    y, c_norm = L.l2normalize_forward(h)
    return y, (caches, c_gap, c_fc0, c_r0, c_fc1, c_norm)


def image_backward(params: dict, cache, dy: np.ndarray) -> dict:
    caches, c_gap, c_fc0, c_r0, c_fc1, c_norm = cache
    g = {}
    d = L.l2normalize_backward(dy, c_norm)
    d, g["img.fc1.w"], g["img.fc1.b"] = L.dense_backward(d, c_fc1, params["img.fc1.w"])
    d = L.relu_backward(d, c_r0)
    d, g["img.fc0.w"], g["img.fc0.b"] = L.dense_backward(d, c_fc0, params["img.fc0.w"])
    d = L.global_avg_backward(d, c_gap)
    for i in reversed(range(len(caches))):
        c_conv, c_relu, c_pool = caches[i]
        d = L.avgpool2_backward(d, c_pool)
        d = L.relu_backward(d, c_relu)
        d, g[f"img.conv{i}.w"], g[f"img.conv{i}.b"] = L.conv3x3_backward(d, c_conv, params[f"img.conv{i}.w"])
    return g


def point_forward(params: dict, x: np.ndarray):
    """Descriptors for a (B, N, 3) stack of volumes; returns (out (B, D), cache)."""
    h = np.asarray(x, dtype=np.float64)
    caches = []
    for i in range(_count(params, "pt.mlp")):
        h, c_fc = L.dense_forward(h, params[f"pt.mlp{i}.w"], params[f"pt.mlp{i}.b"])
        h, c_relu = L.relu_forward(h)
        caches.append((c_fc, c_relu))
    _check(h, "shared point layers")
    h, c_max = L.maxpool_points_forward(h)
    h, c_fc0 = L.dense_forward(h, params["pt.fc0.w"], params["pt.fc0.b"])
    h, c_r0 = L.relu_forward(h)
    h, c_fc1 = L.dense_forward(h, params["pt.fc1.w"], params["pt.fc1.b"])
    _check(h, "point head")
    y, c_norm = L.l2normalize_forward(h)
    return y, (caches, c_max, c_fc0, c_r0, c_fc1, c_norm)


def point_backward(params: dict, cache, dy: np.ndarray) -> dict:
    caches, c_max, c_fc0, c_r0, c_fc1, c_norm = cache
    g = {}
    d = L.l2normalize_backward(dy, c_norm)
    d, g["pt.fc1.w"], g["pt.fc1.b"] = L.dense_backward(d, c_fc1, params["pt.fc1.w"])
    d = L.relu_backward(d, c_r0)
    d, g["pt.fc0.w"], g["pt.fc0.b"] = L.dense_backward(d, c_fc0, params["pt.fc0.w"])
    d = L.maxpool_points_backward(d, c_max)
    for i in reversed(range(len(caches))):
        c_fc, c_relu = caches[i]
        d = L.relu_backward(d, c_relu)
        d, g[f"pt.mlp{i}.w"], g[f"pt.mlp{i}.b"] = L.dense_backward(d, c_fc, params[f"pt.mlp{i}.w"])
    return g


def embed_image(params: dict, patch) -> np.ndarray:
    """Unit-norm descriptor of one 128x128 zero-mean patch (a Patch or an array)."""
    px = getattr(patch, "pixels", patch)
    return image_forward(params, np.asarray(px)[None])[0][0]


def embed_points(params: dict, vol) -> np.ndarray:
    """Unit-norm, point-order invariant descriptor of one local volume."""
    pts = getattr(vol, "points", vol)
    return point_forward(params, np.asarray(pts)[None])[0][0]


def embed_images(params: dict, patches, batch: int = 64) -> np.ndarray:
    """Descriptors for many patches, computed in chunks."""
    arr = [getattr(p, "pixels", p) for p in patches]
    out = [image_forward(params, np.stack(arr[i:i + batch]))[0] for i in range(0, len(arr), batch)]
    return np.concatenate(out) if out else np.zeros((0, params["img.fc1.b"].shape[0]))


def embed_volumes(params: dict, vols, batch: int = 64) -> np.ndarray:
    """Descriptors for many volumes, computed in chunks."""
    arr = [getattr(v, "points", v) for v in vols]
    out = [point_forward(params, np.stack(arr[i:i + batch]))[0] for i in range(0, len(arr), batch)]
    return np.concatenate(out) if out else np.zeros((0, params["pt.fc1.b"].shape[0]))
