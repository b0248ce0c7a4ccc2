"""Seeded street scenes: analytic primitives, a sampled point-cloud map and rendered frames.

Structures stand on both sides of a street running along +x. The map is an
area-proportional random sampling of their surfaces (plus a sparser ground
corridor); the camera drives down the street. Map points and rendered pixels
share one intensity function of surface position, normal and structure id,
so appearance is tied to local geometry.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from ..detect3d import PointCloud
from ..errors import ConfigError
from ..geometry import CameraIntrinsics, PoseSE3, look_at, project_points
from . import _render_kernels as RK

log = logging.getLogger(__name__)

LIGHT = np.array([0.45, -0.55, 0.70]) / np.linalg.norm([0.45, -0.55, 0.70])
SKY = 0.95
RENDERERS = ("raycast", "splat")


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=320.0, fy=320.0, cx=319.5, cy=239.5, width=640, height=480)


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    n_structures: int = 50
    extent: float = 340.0  # street length covered by structures, meters
    points_per_m2: float = 50.0
    ground_points_per_m2: float = 8.0
    n_frames: int = 200
    frame_spacing: float = 1.5
    camera_height: float = 1.6
    street_half_width: float = 6.0
    intrinsics: CameraIntrinsics = field(default_factory=default_intrinsics)
    submap_length: float = 60.0
    submap_margin: float = 10.0
    max_depth: float = 50.0
    texture_noise: float = 0.1
    supersample: int = 2
    renderer: str = "raycast"

    def __post_init__(self):
        if not self.extent > 0:
            raise ConfigError("extent must be positive")
        if not (self.points_per_m2 > 0 and self.ground_points_per_m2 > 0):
            raise ConfigError("point densities must be positive")
        if not self.submap_length > 0:
            raise ConfigError("submap_length must be positive")
        if self.n_structures < 0 or self.n_frames < 1 or not self.frame_spacing > 0:
            raise ConfigError("need n_structures >= 0, n_frames >= 1 and frame_spacing > 0")
        if not 0.0 <= self.texture_noise <= 1.0:
            raise ConfigError("texture_noise must lie in [0, 1]")
        if self.supersample < 1:
            raise ConfigError("supersample must be >= 1")
        if self.renderer not in RENDERERS:
            raise ConfigError(f"renderer must be one of {RENDERERS}")
        if isinstance(self.intrinsics, dict):
            object.__setattr__(self, "intrinsics", CameraIntrinsics(**self.intrinsics))


@dataclass(frozen=True)
class Structure:
    kind: str  # "box" | "cylinder" | "sphere"
    sid: int
    center: tuple  # (x, y, z); z is 0 for boxes and cylinders
    yaw: float = 0.0
    half_a: float = 0.0
    half_b: float = 0.0
    height: float = 0.0
    radius: float = 0.0

    @property
    def footprint_radius(self) -> float:
        if self.kind == "box":
            return float(np.hypot(self.half_a, self.half_b))
        return self.radius

    def row(self) -> list:
        kind = {"box": RK.BOX, "cylinder": RK.CYLINDER, "sphere": RK.SPHERE}[self.kind]
        return [kind, *self.center, self.yaw, self.half_a, self.half_b, self.height, self.radius, self.sid]


@dataclass(eq=False)
class Scene:
    config: SceneConfig
    structures: list
    map: PointCloud
    point_sid: np.ndarray
    trajectory: list  # [(frame_id, PoseSE3)]
    images: list

    @property
    def poses(self) -> dict:
        return {fid: pose for fid, pose in self.trajectory}


def _rng(config: SceneConfig, stream: str) -> np.random.Generator:
    key = int.from_bytes(hashlib.sha256(stream.encode()).digest()[:4], "little")
    return np.random.default_rng([config.seed, key])


def place_structures(config: SceneConfig) -> list[Structure]:
    """Non-overlapping primitives on both sides of the street, seeded."""
    rng = _rng(config, "structures")
    out: list[Structure] = []
    for sid in range(1, config.n_structures + 1):
        for _ in range(200):
            u = rng.uniform()
            if u < 0.6:
                s = Structure("box", sid, (0.0, 0.0, 0.0), yaw=float(rng.uniform(-np.pi, np.pi)),
                              half_a=float(rng.uniform(1.0, 3.0)), half_b=float(rng.uniform(1.0, 3.0)),
                              height=float(rng.uniform(2.5, 8.0)))
            elif u < 0.85:
                s = Structure("cylinder", sid, (0.0, 0.0, 0.0), radius=float(rng.uniform(0.8, 2.5)),
                              height=float(rng.uniform(2.5, 7.0)))
            else:
                s = Structure("sphere", sid, (0.0, 0.0, 0.0), radius=float(rng.uniform(1.0, 2.5)))
            side = 1.0 if rng.uniform() < 0.5 else -1.0
            r = s.footprint_radius
            x = float(rng.uniform(0.0, config.extent))
            y = side * float(config.street_half_width + r + rng.uniform(0.0, 8.0))
            z = s.radius if s.kind == "sphere" else 0.0
            if all(np.hypot(x - o.center[0], y - o.center[1]) > r + o.footprint_radius + 1.0 for o in out):
                out.append(Structure(s.kind, sid, (x, y, z), s.yaw, s.half_a, s.half_b, s.height, s.radius))
                break
        else:
            raise ConfigError(f"could not place {config.n_structures} structures without overlap")
    return out


def _texture_table(config: SceneConfig) -> np.ndarray:
    rng = _rng(config, "texture")
    n = config.n_structures + 1
    tab = np.empty((n, 12))
    for sid in range(n):
        for w in range(3):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            k = 2 * np.pi / rng.uniform(0.7, 2.5)
            tab[sid, 4 * w:4 * w + 3] = k * direction
            tab[sid, 4 * w + 3] = rng.uniform(0, 2 * np.pi)
    return tab


def _sample_structure(s: Structure, density: float, rng: np.random.Generator):
    """Uniform surface samples and outward normals of one primitive."""
    pts, nrm = [], []
    if s.kind == "box":
        c, sn = np.cos(s.yaw), np.sin(s.yaw)
        Rz = np.array([[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]])
        a, b, h = s.half_a, s.half_b, s.height
        faces = [  # (normal, origin, edge1, edge2) in the box frame
            ((1, 0, 0), (a, -b, 0), (0, 2 * b, 0), (0, 0, h)),
            ((-1, 0, 0), (-a, -b, 0), (0, 2 * b, 0), (0, 0, h)),
            ((0, 1, 0), (-a, b, 0), (2 * a, 0, 0), (0, 0, h)),
            ((0, -1, 0), (-a, -b, 0), (2 * a, 0, 0), (0, 0, h)),
            ((0, 0, 1), (-a, -b, h), (2 * a, 0, 0), (0, 2 * b, 0)),
        ]
        for n, o, e1, e2 in faces:
            e1, e2 = np.array(e1, float), np.array(e2, float)
            k = int(round(np.linalg.norm(e1) * np.linalg.norm(e2) * density))
            st = rng.uniform(size=(k, 2))
            local = np.array(o, float) + st[:, :1] * e1 + st[:, 1:] * e2
            pts.append(local @ Rz.T + np.array(s.center))
            nrm.append(np.tile(Rz @ np.array(n, float), (k, 1)))
    elif s.kind == "cylinder":
        r, h = s.radius, s.height
        k = int(round(2 * np.pi * r * h * density))
        th, z = rng.uniform(0, 2 * np.pi, k), rng.uniform(0, h, k)
        n = np.stack([np.cos(th), np.sin(th), np.zeros(k)], 1)
        pts.append(np.array(s.center) + np.stack([r * n[:, 0], r * n[:, 1], z], 1))
        nrm.append(n)
        k = int(round(np.pi * r * r * density))
        th, rho = rng.uniform(0, 2 * np.pi, k), r * np.sqrt(rng.uniform(size=k))
        pts.append(np.array(s.center) + np.stack([rho * np.cos(th), rho * np.sin(th), np.full(k, h)], 1))
        nrm.append(np.tile([0.0, 0.0, 1.0], (k, 1)))
    else:
        k = int(round(4 * np.pi * s.radius ** 2 * density))
        n = rng.normal(size=(k, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        pts.append(np.array(s.center) + s.radius * n)
        nrm.append(n)
    return np.concatenate(pts), np.concatenate(nrm)


def street_bounds(config: SceneConfig) -> tuple[float, float, float]:
    """(x_min, x_max, half width) of the sampled ground corridor."""
    return -10.0, config.extent + 10.0, config.street_half_width + 20.0


def sample_map(config: SceneConfig, structures: list[Structure], tex: np.ndarray):
    """Point cloud of all structure surfaces plus the ground corridor.

    Returns (points, normals, structure ids, intensities).
    """
    rng = _rng(config, "map")
    P, N, S = [], [], []
    for s in structures:
        p, n = _sample_structure(s, config.points_per_m2, rng)
        P.append(p)
        N.append(n)
        S.append(np.full(len(p), s.sid))
    x0, x1, hw = street_bounds(config)
    k = int(round((x1 - x0) * 2 * hw * config.ground_points_per_m2))
    g = np.stack([rng.uniform(x0, x1, k), rng.uniform(-hw, hw, k), np.zeros(k)], 1)
    inside = np.zeros(k, dtype=bool)
    for s in structures:
        if s.kind == "box":
            c, sn = np.cos(s.yaw), np.sin(s.yaw)
            dx, dy = g[:, 0] - s.center[0], g[:, 1] - s.center[1]
            inside |= (np.abs(c * dx + sn * dy) <= s.half_a) & (np.abs(-sn * dx + c * dy) <= s.half_b)
        elif s.kind == "cylinder":
            inside |= np.hypot(g[:, 0] - s.center[0], g[:, 1] - s.center[1]) <= s.radius
    g = g[~inside]
    P.append(g)
    N.append(np.tile([0.0, 0.0, 1.0], (len(g), 1)))
    S.append(np.zeros(len(g), dtype=np.int64))
    P, N, S = np.concatenate(P), np.concatenate(N), np.concatenate(S).astype(np.int64)
    keep = P[:, 2] >= -1e-9
    P, N, S = P[keep], N[keep], S[keep]
    inten = RK.shade_points(tex, LIGHT, config.texture_noise, S, P, N)
    return P, N, S, inten


def make_trajectory(config: SceneConfig) -> list[tuple[int, PoseSE3]]:
    """Forward-looking camera weaving gently down the street, pitched up 5 degrees."""
    rng = _rng(config, "trajectory")
    phase = rng.uniform(0, 2 * np.pi)
    out = []
    for i in range(config.n_frames):
        x = 10.0 + i * config.frame_spacing
        y = 1.0 * np.sin(2 * np.pi * x / 80.0 + phase)
        slope = 1.0 * 2 * np.pi / 80.0 * np.cos(2 * np.pi * x / 80.0 + phase)
        yaw = np.arctan(slope) + np.radians(4.0) * np.sin(2 * np.pi * x / 37.0 + 2 * phase)
        pitch = np.radians(5.0)
        eye = np.array([x, y, config.camera_height])
        fwd = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
        out.append((i, look_at(eye, eye + fwd)))
    return out


def primitive_table(structures: list[Structure]) -> np.ndarray:
    return np.array([s.row() for s in structures], dtype=np.float64).reshape(-1, 10)


def _bounding_corners(s: Structure) -> np.ndarray:
    r = s.footprint_radius
    x, y, _ = s.center
    top = 2 * s.radius if s.kind == "sphere" else s.height
    return np.array([[x + dx, y + dy, z] for dx in (-r, r) for dy in (-r, r) for z in (0.0, top)])


def screen_bounds(structures, pose: PoseSE3, K: CameraIntrinsics) -> np.ndarray:
    """Conservative pixel bounds per primitive; empty bounds for primitives behind the camera."""
    out = np.empty((len(structures), 4))
    for j, s in enumerate(structures):
        uv, z = project_points(_bounding_corners(s), pose, K)
        if np.all(z <= 0.05):
            out[j] = (1.0, 1.0, -1.0, -1.0)
        elif np.any(z <= 0.05):
            out[j] = (-np.inf, -np.inf, np.inf, np.inf)
        else:
            out[j] = (uv[:, 0].min() - 1, uv[:, 1].min() - 1, uv[:, 0].max() + 1, uv[:, 1].max() + 1)
    return out


def render_raycast(prims, structures, tex, config: SceneConfig, pose: PoseSE3) -> np.ndarray:
    K = config.intrinsics
    boxes = screen_bounds(structures, pose, K)
    Rt = np.ascontiguousarray(pose.rotation.T)
    return RK.render(prims, boxes, tex, LIGHT, config.texture_noise, SKY, Rt, pose.center(),
                     K.fx, K.fy, K.cx, K.cy, K.width, K.height, config.supersample)


def render_splat(points, inten, config: SceneConfig, pose: PoseSE3, depth_tol: float = 0.02):
    """Z-buffered point splatting; returns (image, weights, offsets)."""
    K = config.intrinsics
    uv, z = project_points(points, pose, K)
    ok = (z > 0.1) & (z < config.max_depth) & np.all(np.isfinite(uv), axis=1)
    return RK.splat(uv[ok], z[ok], inten[ok], K.width, K.height, SKY, depth_tol)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid a PGM file stores, so in-memory and on-disk images agree."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_scene(config: SceneConfig = SceneConfig()) -> Scene:
    """Build the map, trajectory and rendered images; a pure function of ``config``."""
    structures = place_structures(config)
    tex = _texture_table(config)
    P, _, S, inten = sample_map(config, structures, tex)
    traj = make_trajectory(config)
    prims = primitive_table(structures)
    images = []
    for fid, pose in traj:
        if config.renderer == "raycast":
            img = render_raycast(prims, structures, tex, config, pose)
        else:
            img = render_splat(P, inten, config, pose)[0]
        images.append(quantize(img))
    log.info("scene: %d structures, %d map points, %d frames", len(structures), len(P), len(images))
    return Scene(config, structures, PointCloud(P, "world", inten), S, traj, images)


def visible_depth(scene: Scene, pose: PoseSE3, points: np.ndarray) -> np.ndarray:
    """Ray-cast distance to the first surface in the direction of each point."""
    c = pose.center()
    d = np.asarray(points, dtype=np.float64) - c
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return RK.ray_depths(primitive_table(scene.structures), c, np.ascontiguousarray(d))


def projection_audit(scene: Scene, frame: int, tol_px: float = 0.5) -> float:
    """Fraction of rendered pixels consistent with the analytic projection within ``tol_px``.

    Ray casting: every covered pixel's hit point is reprojected. Splatting: for
    pixels with total footprint weight >= 0.5 the weighted mean projection of
    the contributing points is compared with the pixel center, per axis.
    """
    cfg = scene.config
    K = cfg.intrinsics
    pose = scene.poses[frame]
    if cfg.renderer == "splat":
        _, w, off = render_splat(scene.map.points, scene.map.intensity, cfg, pose)
        cov = w >= 0.5
        dev = np.abs(off[cov] / w[cov, None]).max(axis=1)
        return float(np.mean(dev <= tol_px)) if dev.size else 1.0
    vv, uu = np.mgrid[0:K.height:7, 0:K.width:7]
    rays = np.stack([(uu.ravel() - K.cx) / K.fx, (vv.ravel() - K.cy) / K.fy, np.ones(uu.size)], 1)
    dirs = rays @ pose.rotation
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t = RK.ray_depths(primitive_table(scene.structures), pose.center(), np.ascontiguousarray(dirs))
    hit = np.isfinite(t)
    X = pose.center() + t[hit, None] * dirs[hit]
    uv, _ = project_points(X, pose, K)
    dev = np.hypot(uv[:, 0] - uu.ravel()[hit], uv[:, 1] - vv.ravel()[hit])
    return float(np.mean(dev <= tol_px)) if dev.size else 1.0
