"""Central finite-difference check of the analytic triplet gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..detect2d import PATCH_SIZE
from .loss import batch_triplet_loss
from .nets import (ImageNetShape, PointNetShape, image_forward, init_image_params, init_point_params,
                   point_forward)
from .train import Triplet, forward_backward


@dataclass(frozen=True)
class GradCheckConfig:
    image_channels: tuple[int, ...] = (2, 3, 4)
    point_widths: tuple[int, ...] = (4, 5, 6)
    hidden: int = 5
    D: int = 6
    patch_size: int = PATCH_SIZE
    n_points: int = 1024
    alpha: float = 5.0
    h: float = 1e-5
    # denominators below this are clamped: double-precision loss noise is
    # about 1e-16 / h, far under 1e-4 * floor
    floor: float = 1e-6
    seed: int = 0


def relative_error(a, n, floor: float = 1e-6):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass(frozen=True)
class GradCheckResult:
    max_error: float
    checked: int  # entries compared
    straddled: int  # entries skipped because +-h crossed a kink
    trials: int

    @property
    def straddled_fraction(self) -> float:
        return self.straddled / max(1, self.checked + self.straddled)

    def __float__(self):
        return self.max_error


def random_triplet(rng: np.random.Generator, patch_size: int, n_points: int) -> Triplet:
    """Smooth zero-mean unit-std random patch and two random unit-ball volumes."""
    patch = ndimage.gaussian_filter(rng.normal(size=(patch_size, patch_size)), 3.0, mode="wrap")
    patch -= patch.mean()
    patch /= patch.std()

    def volume():
        v = rng.uniform(-1, 1, size=(n_points, 3))
        return v / np.maximum(1.0, np.linalg.norm(v, axis=1, keepdims=True))

    return Triplet(patch, volume(), volume())


def _switches(c_img, c_pts) -> list:
    """Every piecewise choice made in a forward pass: ReLU masks and max-pool winners."""
    caches, _, _, c_r0, _, c_norm = c_img
    out = [c[1] for c in caches] + [c_r0, c_norm[2]]
    caches, c_max, _, c_r0, _, c_norm = c_pts
    return out + [c[1] for c in caches] + [c_max[0], c_r0, c_norm[2]]


def _loss_and_switches(img, pts, batch, alpha):
    x_img = np.stack([t.anchor for t in batch])
    x_pts = np.stack([t.positive for t in batch] + [t.negative for t in batch])
    P, c_img = image_forward(img, x_img)
    Q, c_pts = point_forward(pts, x_pts)
    B = len(batch)
    return batch_triplet_loss(P, Q[:B], Q[B:], alpha)[0], _switches(c_img, c_pts)


def _same(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _numeric_grads(img, pts, batch, alpha, h):
    """Central differences plus a mask of entries whose +-h step stayed on one linear piece."""
    _, base = _loss_and_switches(img, pts, batch, alpha)
    grads, valid = {}, {}
    for params in (img, pts):
        for name, w in params.items():
            g = np.empty_like(w)
            ok = np.empty(w.shape, dtype=bool)
            flat, gflat, okflat = w.reshape(-1), g.reshape(-1), ok.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up, s_up = _loss_and_switches(img, pts, batch, alpha)
                flat[i] = orig - h
                down, s_down = _loss_and_switches(img, pts, batch, alpha)
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
                okflat[i] = _same(base, s_up) and _same(base, s_down)
            grads[name], valid[name] = g, ok
    return grads, valid


def gradient_check(config: GradCheckConfig = GradCheckConfig(), trials: int = 10,
                   corrupt: bool = False) -> GradCheckResult:
    """Max relative error between backprop and central differences.

    Each trial draws fresh reduced-width parameters and a random one-triplet
    batch, and compares every parameter entry of both branches. An entry whose
    +-h perturbation flips any ReLU mask or max-pool winner is not compared:
    the difference quotient then spans two linear pieces and measures nothing
    about the derivative. Such entries are counted in ``straddled``.

    Args:
        corrupt: double the largest-magnitude analytic entry of each trial
            before comparing (sanity check of the checker itself).
    """
    worst, checked, straddled = 0.0, 0, 0
    for trial in range(trials):
        rng = np.random.default_rng([config.seed, trial])
        seed = int(rng.integers(2**31))
        img = init_image_params(ImageNetShape(config.image_channels, config.hidden, config.D), seed)
        pts = init_point_params(PointNetShape(config.point_widths, config.hidden, config.D), seed)
        # random biases so the check also covers nonzero bias values
        for p in (img, pts):
            for k in p:
                if k.endswith(".b"):
                    p[k] = rng.normal(scale=0.05, size=p[k].shape)
        batch = [random_triplet(rng, config.patch_size, config.n_points)]
        _, g_img, g_pts = forward_backward(img, pts, batch, config.alpha)
        analytic = {**g_img, **g_pts}
        if corrupt:
            name = max(analytic, key=lambda k: np.abs(analytic[k]).max())
            arr = analytic[name].copy()
            arr.reshape(-1)[np.argmax(np.abs(arr))] *= 2.0
            analytic[name] = arr
        numeric, valid = _numeric_grads(img, pts, batch, config.alpha, config.h)
        for name in analytic:
            err = relative_error(analytic[name], numeric[name], config.floor)[valid[name]]
            checked += err.size
            straddled += int((~valid[name]).sum())
            if err.size:
                worst = max(worst, float(err.max()))
    return GradCheckResult(worst, checked, straddled, trials)
