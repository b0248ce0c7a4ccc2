"""Triplet construction, the joint backward pass and the Adam training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DatasetTooSmall, NonFiniteGradient
from .loss import batch_triplet_loss
from .nets import (ImageNetShape, PointNetShape, image_backward, image_forward, init_image_params,
                   init_point_params, point_backward, point_forward)
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 5.0
    learning_rate: float = 6e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    D: int = 128
    image_channels: tuple[int, ...] = (16, 32, 64)
    point_widths: tuple[int, ...] = (32, 64, 128)
    hidden: int = 64

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.D not in (64, 128, 256):
            raise ConfigError("D must be one of 64, 128, 256")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size >= 1 and epochs >= 0 required")
        object.__setattr__(self, "image_channels", tuple(self.image_channels))
        object.__setattr__(self, "point_widths", tuple(self.point_widths))

    def image_shape(self) -> ImageNetShape:
        return ImageNetShape(self.image_channels, self.hidden, self.D)

    def point_shape(self) -> PointNetShape:
        return PointNetShape(self.point_widths, self.hidden, self.D)


@dataclass(frozen=True, eq=False)
class Triplet:
    anchor: object  # Patch
    positive: object  # LocalVolume
    negative: object  # LocalVolume


@dataclass
class TrainResult:
    image_params: dict
    point_params: dict
    history: list = field(default_factory=list)
    initial_loss: float = float("nan")

    def __iter__(self):
        # unpacks as (image_params, point_params, history)
        return iter((self.image_params, self.point_params, self.history))


def _pixels(p):
    return getattr(p, "pixels", p)


def _points(v):
    return getattr(v, "points", v)


def forward_backward(img_params: dict, pt_params: dict, batch, alpha: float):
    """Mean triplet loss of ``batch`` and exact gradients for both branches.

    Raises:
        NonFiniteGradient: if any gradient entry is not finite.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    x_img = np.stack([_pixels(t.anchor) for t in batch])
    x_pts = np.stack([_points(t.positive) for t in batch] + [_points(t.negative) for t in batch])
    P, c_img = image_forward(img_params, x_img)
    Q, c_pts = point_forward(pt_params, x_pts)
    B = len(batch)
    loss, gP, gQp, gQn = batch_triplet_loss(P, Q[:B], Q[B:], alpha)
    g_img = image_backward(img_params, c_img, gP)
    g_pts = point_backward(pt_params, c_pts, np.concatenate([gQp, gQn]))
    for g in (g_img, g_pts):
        for name, arr in g.items():
            if not np.all(np.isfinite(arr)):
                raise NonFiniteGradient(f"non-finite gradient for {name}")
    return loss, g_img, g_pts


def batch_loss(img_params: dict, pt_params: dict, batch, alpha: float) -> float:
    """Forward-only mean loss (used for evaluation and finite differences)."""
    x_img = np.stack([_pixels(t.anchor) for t in batch])
    x_pts = np.stack([_points(t.positive) for t in batch] + [_points(t.negative) for t in batch])
    P, _ = image_forward(img_params, x_img)
    Q, _ = point_forward(pt_params, x_pts)
    B = len(batch)
    return batch_triplet_loss(P, Q[:B], Q[B:], alpha)[0]


def group_ids(volumes) -> np.ndarray:
    """Identity of the 3D keypoint behind each volume (positions compared exactly)."""
    keys = {}
    out = np.empty(len(volumes), dtype=np.int64)
    for i, v in enumerate(volumes):
        kp = getattr(v, "source_keypoint", None)
        key = tuple(np.asarray(kp.position).tolist()) if kp is not None else ("id", id(v))
        out[i] = keys.setdefault(key, len(keys))
    return out


def sample_negatives(groups: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """For each item, a uniformly random index whose group differs."""
    n = len(groups)
    if len(np.unique(groups)) < 2:
        raise DatasetTooSmall("negatives need at least two distinct 3D keypoints")
    neg = rng.integers(0, n, size=n)
    clash = groups[neg] == groups
    while np.any(clash):
        neg[clash] = rng.integers(0, n, size=int(clash.sum()))
        clash = groups[neg] == groups
    return neg


def make_triplets(pairs, seed: int = 0, epoch: int = 0, groups=None) -> list[Triplet]:
    """Pair each (patch, volume) with a random volume of a different keypoint.

    Args:
        groups: optional keypoint identity per pair; by default volumes are
            grouped by their source keypoint position.
    """
    vols = [v for _, v in pairs]
    groups = group_ids(vols) if groups is None else np.asarray(groups)
    if len(groups) != len(vols):
        raise ValueError("one group id per pair required")
    neg = sample_negatives(groups, np.random.default_rng([seed, epoch, 7]))
    return [Triplet(p, v, vols[j]) for (p, v), j in zip(pairs, neg)]


def train(pairs, config: TrainConfig = TrainConfig(), init=None, on_epoch=None, groups=None) -> TrainResult:
    """Fit both branches on matching (Patch, LocalVolume) pairs.

    Negatives are resampled every epoch, mini-batches are drawn from a seeded
    shuffle, and the mean loss of each epoch is recorded. ``initial_loss`` is
    the mean loss of the epoch-0 triplets before any update.

    Args:
        pairs: list of (Patch, LocalVolume).
        init: optional (image_params, point_params) to start from.
        on_epoch: optional callback ``f(epoch, mean_loss)``.
        groups: optional keypoint identity per pair (see :func:`make_triplets`).

    Raises:
        DatasetTooSmall: fewer than 2 pairs or a single distinct keypoint.
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise DatasetTooSmall(f"training needs >= 2 pairs, got {len(pairs)}")
    if init is None:
        img = init_image_params(config.image_shape(), config.seed)
        pts = init_point_params(config.point_shape(), config.seed)
    else:
        img, pts = dict(init[0]), dict(init[1])
    s_img, s_pts = AdamState(), AdamState()
    order_rng = np.random.default_rng([config.seed, 3])
    result = TrainResult(img, pts)

    first = make_triplets(pairs, config.seed, 0, groups)
    bs = config.batch_size
    result.initial_loss = sum(
        batch_loss(img, pts, first[i:i + bs], config.alpha) * len(first[i:i + bs])
        for i in range(0, len(first), bs)) / len(first)
    for epoch in range(config.epochs):
        triplets = first if epoch == 0 else make_triplets(pairs, config.seed, epoch, groups)
        order = order_rng.permutation(len(triplets))
        total = 0.0
        for s in range(0, len(order), bs):
            batch = [triplets[i] for i in order[s:s + bs]]
            loss, g_img, g_pts = forward_backward(img, pts, batch, config.alpha)
            img, s_img = adam_step(img, g_img, s_img, config.learning_rate, config.beta1, config.beta2, config.epsilon)
            pts, s_pts = adam_step(pts, g_pts, s_pts, config.learning_rate, config.beta1, config.beta2, config.epsilon)
            total += loss * len(batch)
        mean = total / len(order)
        result.history.append(mean)
        log.info("epoch %d loss %.6f", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    result.image_params, result.point_params = img, pts
    return result
