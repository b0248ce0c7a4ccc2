"""Difference-of-Gaussian keypoints and scale-dependent patch extraction.

Pixel coordinates put pixel centers on integers: ``u`` indexes columns and
``v`` rows, matching :func:`crossloc.geometry.project`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .detect3d import Rejected, _greedy_nms
from .errors import ConfigError, ImageTooSmall

PATCH_SIZE = 128
_SIGMA0 = 1.6
_ASSUMED_BLUR = 0.5


@dataclass(frozen=True)
class Keypoint2D:
    u: float
    v: float
    scale: float
    response: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.u, self.v])


@dataclass(frozen=True, eq=False)
class Patch:
    pixels: np.ndarray
    source_keypoint: Keypoint2D | None = None


def as_gray_image(data) -> np.ndarray:
    """Validate a grayscale image: 2-D, finite, values in [0, 1]."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("grayscale image must be 2-D")
    if not np.all(np.isfinite(img)) or img.min(initial=0.0) < 0.0 or img.max(initial=0.0) > 1.0:
        raise ValueError("image intensities must be finite and lie in [0, 1]")
    return img


def _octave_stack(base: np.ndarray, scales_per_octave: int) -> list[np.ndarray]:
    """Gaussian images for one octave, blur sigma0 * 2**(s/S), s = 0..S+2."""
    S = scales_per_octave
    k = 2.0 ** (1.0 / S)
    gauss = [base]
    for s in range(1, S + 3):
        prev = _SIGMA0 * k ** (s - 1)
        inc = prev * np.sqrt(k * k - 1.0)
        gauss.append(ndimage.gaussian_filter(gauss[-1], inc, mode="reflect", truncate=4.0))
    return gauss


def _refine(dog: np.ndarray, s: int, y: int, x: int, max_steps: int = 5):
    """Quadratic interpolation of a scale-space extremum.

    Returns (s, y, x, offset, value, hessian_xy) or None if it drifts away.
    """
    ns, h, w = dog.shape
    for _ in range(max_steps):
        c = dog[s, y, x]
        g = 0.5 * np.array([
            dog[s, y, x + 1] - dog[s, y, x - 1],
            dog[s, y + 1, x] - dog[s, y - 1, x],
            dog[s + 1, y, x] - dog[s - 1, y, x],
        ])
        dxx = dog[s, y, x + 1] + dog[s, y, x - 1] - 2 * c
        dyy = dog[s, y + 1, x] + dog[s, y - 1, x] - 2 * c
        dss = dog[s + 1, y, x] + dog[s - 1, y, x] - 2 * c
        dxy = 0.25 * (dog[s, y + 1, x + 1] - dog[s, y + 1, x - 1] - dog[s, y - 1, x + 1] + dog[s, y - 1, x - 1])
        dxs = 0.25 * (dog[s + 1, y, x + 1] - dog[s + 1, y, x - 1] - dog[s - 1, y, x + 1] + dog[s - 1, y, x - 1])
        dys = 0.25 * (dog[s + 1, y + 1, x] - dog[s + 1, y - 1, x] - dog[s - 1, y + 1, x] + dog[s - 1, y - 1, x])
        H = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
        try:
            off = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(off) <= 0.5):
            return s, y, x, off, c + 0.5 * g @ off, H[:2, :2]
        x += int(np.round(off[0]))
        y += int(np.round(off[1]))
        s += int(np.round(off[2]))
        if not (1 <= s < ns - 1 and 1 <= y < h - 1 and 1 <= x < w - 1):
            return None
    return None


def detect_dog_keypoints(
    img,
    n_octaves: int = 4,
    scales_per_octave: int = 3,
    contrast_threshold: float = 0.03,
    edge_threshold: float = 10.0,
    upsample: bool = False,
) -> list[Keypoint2D]:
    """Scale-space extrema of the difference-of-Gaussian pyramid.

    Candidates are 3x3x3 extrema whose interpolated |DoG| reaches
    ``contrast_threshold``; edge-like responses (principal curvature ratio
    above ``edge_threshold``) are discarded. Keypoints are returned in
    descending response order.

    Args:
        upsample: start the pyramid from the image doubled in size, as SIFT
            does; finer first-octave sampling moves extrema closer to corners.

    Raises:
        ImageTooSmall: if the shorter image side is below 64 px.
    """
    img = as_gray_image(img)
    if min(img.shape) < 64:
        raise ImageTooSmall(f"image {img.shape[1]}x{img.shape[0]} is smaller than 64 px")
    S = scales_per_octave
    work, blur, step0, shift = img - img.mean(), _ASSUMED_BLUR, 1.0, 0.0
    if upsample:
        # pixel-center aligned 2x bilinear zoom: sample (i - 0.5) / 2
        h, w = img.shape
        yy, xx = np.meshgrid((np.arange(2 * h) - 0.5) / 2, (np.arange(2 * w) - 0.5) / 2, indexing="ij")
        work = ndimage.map_coordinates(work, [yy, xx], order=1, mode="nearest")
        blur, step0, shift = 2 * _ASSUMED_BLUR, 0.5, -0.25
    base = ndimage.gaussian_filter(work, np.sqrt(_SIGMA0 ** 2 - blur ** 2), mode="reflect", truncate=4.0)
    edge_limit = (edge_threshold + 1.0) ** 2 / edge_threshold
    found = []
    for octave in range(n_octaves):
        if min(base.shape) < 8:
            break
        gauss = _octave_stack(base, S)
        dog = np.stack([b - a for a, b in zip(gauss[:-1], gauss[1:])])
        mx = ndimage.maximum_filter(dog, size=3, mode="nearest")
        mn = ndimage.minimum_filter(dog, size=3, mode="nearest")
        cand = ((dog == mx) | (dog == mn)) & (np.abs(dog) > 0.5 * contrast_threshold)
        cand[[0, -1]] = False
        cand[:, [0, -1]] = False
        cand[:, :, [0, -1]] = False
        for s, y, x in zip(*np.nonzero(cand)):
            res = _refine(dog, int(s), int(y), int(x))
            if res is None:
                continue
            s2, y2, x2, off, value, H2 = res
            if abs(value) < contrast_threshold:
                continue
            tr, det = H2[0, 0] + H2[1, 1], H2[0, 0] * H2[1, 1] - H2[0, 1] ** 2
            if det <= 0 or tr * tr / det >= edge_limit:
                continue
            step = step0 * 2.0 ** octave
            u, v = (x2 + off[0]) * step + shift, (y2 + off[1]) * step + shift
            if not (0.0 <= u <= img.shape[1] - 1 and 0.0 <= v <= img.shape[0] - 1):
                continue
            # a DoG layer spans sigma_s..sigma_{s+1}; report their geometric mean
            sigma = _SIGMA0 * 2.0 ** ((s2 + off[2] + 0.5) / S) * step
            found.append(Keypoint2D(float(u), float(v), float(sigma), float(abs(value))))
        base = gauss[S][::2, ::2]
    found.sort(key=lambda k: -k.response)
    return _dedupe(found)


def _dedupe(kps: list[Keypoint2D]) -> list[Keypoint2D]:
    """Drop weaker copies of an extremum found twice (octave overlap, refinement drift).

    Expects ``kps`` sorted by descending response.
    """
    cells: dict[tuple[int, int], list[Keypoint2D]] = {}
    out = []
    for k in kps:
        cu, cv = int(np.floor(k.u)), int(np.floor(k.v))
        near = (o for du in (-1, 0, 1) for dv in (-1, 0, 1) for o in cells.get((cu + du, cv + dv), ()))
        if any(abs(k.u - o.u) <= 1.0 and abs(k.v - o.v) <= 1.0 and abs(np.log(k.scale / o.scale)) < 0.2
               for o in near):
            continue
        cells.setdefault((cu, cv), []).append(k)
        out.append(k)
    return out


def nms_keypoints_2d(kps: list[Keypoint2D], radius: float = 32.0) -> list[Keypoint2D]:
    """Greedy suppression by descending response, ties broken by input order."""
    if not kps:
        return []
    pos = np.array([[k.u, k.v] for k in kps])
    resp = np.array([k.response for k in kps])
    return [kps[i] for i in _greedy_nms(pos, resp, radius)]


def patch_side(scale: float, base_size: int = 256) -> int:
    """Window side in pixels; inversely proportional to the keypoint scale."""
    return int(round(base_size / max(scale, 1.0)))


def extract_patch(img, kp: Keypoint2D, base_size: int = 256, scale_threshold: float = 4.0):
    """Square window around ``kp`` sampled bilinearly, or a :class:`Rejected`."""
    if base_size % 2:
        raise ValueError("base_size must be even")
    if kp.scale > scale_threshold:
        return Rejected("ScaleTooLarge")
    img = np.asarray(img, dtype=np.float64)
    side = patch_side(kp.scale, base_size)
    half = (side - 1) / 2.0
    h, w = img.shape
    if kp.u - half < 0 or kp.v - half < 0 or kp.u + half > w - 1 or kp.v + half > h - 1:
        return Rejected("OutOfBounds")
    offs = np.arange(side) - half
    yy, xx = np.meshgrid(kp.v + offs, kp.u + offs, indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


def resize_bilinear(raw: np.ndarray, size: int = PATCH_SIZE) -> np.ndarray:
    """Pixel-center aligned bilinear resize of a square array."""
    raw = np.asarray(raw, dtype=np.float64)
    n = raw.shape[0]
    if n == size:
        return raw.copy()
    coords = (np.arange(size) + 0.5) * (n / size) - 0.5
    coords = np.clip(coords, 0.0, n - 1.0)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    return ndimage.map_coordinates(raw, [yy, xx], order=1, mode="nearest")


def preprocess_patch(raw: np.ndarray, source: Keypoint2D | None = None) -> Patch:
    """Resize to 128x128 and subtract the mean."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] != raw.shape[1] or raw.shape[0] < 8:
        raise ValueError("raw patch must be square with side >= 8")
    px = resize_bilinear(raw)
    px -= px.mean()
    return Patch(px, source)


def patches_for_keypoints(img, kps, base_size=256, scale_threshold=4.0):
    """Extract and preprocess patches; returns (patches, accepted keypoints)."""
    patches, kept = [], []
    for kp in kps:
        raw = extract_patch(img, kp, base_size, scale_threshold)
        if isinstance(raw, Rejected):
            continue
        patches.append(preprocess_patch(raw, kp))
        kept.append(kp)
    return patches, kept


@dataclass(frozen=True)
class DogParams:
    """Image-side stages: DoG detection, 32 px thinning of labels and patch extraction."""

    n_octaves: int = 4
    scales_per_octave: int = 3
    contrast_threshold: float = 0.03
    edge_threshold: float = 10.0
    upsample: bool = False
    nms_radius: float = 32.0
    base_size: int = 256
    scale_threshold: float = 4.0

    def __post_init__(self):
        if self.n_octaves < 1 or self.scales_per_octave < 1:
            raise ConfigError("need at least one octave and one scale per octave")
        if self.contrast_threshold < 0 or self.edge_threshold <= 0 or self.nms_radius < 0:
            raise ConfigError("thresholds must be non-negative")
        if self.base_size < 8 or self.base_size % 2:
            raise ConfigError("base_size must be even and >= 8")


def image_keypoints(img, params: DogParams = DogParams(), thin: bool = False) -> list[Keypoint2D]:
    """DoG keypoints, optionally after ``nms_radius`` suppression."""
    kps = detect_dog_keypoints(img, params.n_octaves, params.scales_per_octave,
                               params.contrast_threshold, params.edge_threshold, params.upsample)
    return nms_keypoints_2d(kps, params.nms_radius) if thin and params.nms_radius > 0 else kps
