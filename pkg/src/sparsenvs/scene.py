"""Synthetic posed RGB-D indoor scenes, their on-disk layout, and view-set sampling.

Camera convention is OpenCV: +x right, +y down, +z forward.  Poses map camera
coordinates to world coordinates (z-up world).  Depth is z-depth, i.e. the
distance along the optical axis, with 0 marking invalid pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

FACE_NAMES = ("-x", "+x", "-y", "+y", "-z", "+z")


class SceneFormatError(ValueError):
    """Raised when a scene directory cannot be read."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "CameraIntrinsics":
        fx = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(fx, fx, width / 2, height / 2, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "CameraPose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "CameraPose":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise ValueError("look_at: forward direction parallel to up")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls(np.stack([right, down, forward], axis=1), eye)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass
class View:
    image: np.ndarray  # H x W x 3 in [0, 1]
    pose: CameraPose
    depth: np.ndarray | None = None  # H x W meters, 0 = invalid

    def __post_init__(self):
        self.image = np.clip(np.asarray(self.image, dtype=np.float64), 0.0, 1.0)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got {self.image.shape}")
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float64)
            if self.depth.shape != self.image.shape[:2]:
                raise ValueError("depth and image sizes differ")
            if (self.depth < 0).any():
                raise ValueError("depth must be nonnegative")


@dataclass
class ViewSet:
    views: list[View]
    observed_indices: list[int]
    novel_indices: list[int]

    def __post_init__(self):
        obs, nov = set(self.observed_indices), set(self.novel_indices)
        if obs & nov:
            raise ValueError("observed and novel sets overlap")
        if obs | nov != set(range(len(self.views))):
            raise ValueError("observed and novel sets must cover all views")
        if not obs:
            raise ValueError("need at least one observed view")

    @property
    def observed(self) -> list[View]:
        return [self.views[i] for i in self.observed_indices]

    @property
    def novel(self) -> list[View]:
        return [self.views[i] for i in self.novel_indices]


# ---------------------------------------------------------------------------
# Procedural scenes
# ---------------------------------------------------------------------------


@dataclass
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    colors: np.ndarray  # 6 x 3, one per face in FACE_NAMES order
    checker: float = 0.0  # checker cell size in meters; 0 = flat


@dataclass
class SceneSpec:
    room: tuple[float, float, float]
    wall_colors: np.ndarray  # 6 x 3
    objects: list[Box] = field(default_factory=list)
    light_dir: tuple[float, float, float] = (0.3, 0.5, -1.0)
    floor_checker: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        room = np.asarray(self.room, dtype=np.float64)
        if room.shape != (3,) or not (room > 0).all():
            raise ValueError(f"degenerate room dimensions {tuple(self.room)}: all must be > 0")
        for i, box in enumerate(self.objects):
            lo, hi = np.asarray(box.lo), np.asarray(box.hi)
            if not (lo < hi).all():
                raise ValueError(f"object {i} has non-positive extent")
            if (lo < 0).any() or (hi > room).any():
                raise ValueError(f"object {i} lies outside the room")

    @classmethod
    def random(cls, seed: int, n_objects: int = 4) -> "SceneSpec":
        """Room of roughly 4x4x2.6 m with boxes standing against the walls."""
        rng = np.random.default_rng(seed)
        room = (float(rng.uniform(3.5, 4.5)), float(rng.uniform(3.5, 4.5)), float(rng.uniform(2.4, 2.8)))
        walls = rng.uniform(0.35, 0.95, size=(6, 3))
        objects = []
        for _ in range(n_objects):
            size = rng.uniform([0.4, 0.4, 0.4], [1.0, 1.0, 1.4])
            side = rng.integers(4)
            lo = np.zeros(3)
            if side < 2:  # against an x wall
                lo[0] = 0.05 if side == 0 else room[0] - 0.05 - size[0]
                lo[1] = rng.uniform(0.05, room[1] - 0.05 - size[1])
            else:
                lo[1] = 0.05 if side == 2 else room[1] - 0.05 - size[1]
                lo[0] = rng.uniform(0.05, room[0] - 0.05 - size[0])
            base = rng.uniform(0.1, 0.9, size=3)
            colors = np.clip(base[None, :] * rng.uniform(0.8, 1.1, size=(6, 1)), 0, 1)
            checker = float(rng.choice([0.0, 0.25]))
            objects.append(Box(tuple(lo), tuple(lo + size), colors, checker))
        light = tuple(rng.normal(size=3) * 0.3 + np.array([0.3, 0.5, -1.0]))
        return cls(room, walls, objects, light, 0.5, seed)


def camera_rays(pose: CameraPose, intrinsics: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel world origins and directions scaled to unit z in camera space.

    A hit at parameter ``t`` along such a direction has z-depth exactly ``t``.
    """
    u = np.arange(intrinsics.width) + 0.5
    v = np.arange(intrinsics.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    cam = np.stack([(uu - intrinsics.cx) / intrinsics.fx, (vv - intrinsics.cy) / intrinsics.fy, np.ones_like(uu)], -1)
    dirs = cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs


def _checker(points: np.ndarray, axis: np.ndarray, size: float) -> np.ndarray:
    if size <= 0:
        return np.ones(len(points))
    cells = np.floor(points / size).astype(np.int64)
    total = cells.sum(axis=1) - cells[np.arange(len(points)), axis]
    return np.where(total % 2 == 0, 1.0, 0.75)


def raycast(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trace rays against the room and its boxes; returns (colors N x 3, t N).

    Origins must lie inside the room.  ``t`` is the ray parameter of the nearest hit.
    """
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)
    n = len(o)
    room = np.asarray(spec.room, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        # exit through the room walls
        bound = np.where(d > 0, room, 0.0)
        t_axes = np.where(d != 0, (bound - o) * inv, np.inf)
    axis = np.argmin(t_axes, axis=1)
    t_best = t_axes[np.arange(n), axis]
    face = 2 * axis + (d[np.arange(n), axis] > 0)
    color = spec.wall_colors[face]
    checker = np.where(axis == 2, spec.floor_checker, 0.0)
    surface = np.full(n, -1)

    for k, box in enumerate(spec.objects):
        lo, hi = np.asarray(box.lo), np.asarray(box.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (lo - o) * inv
            t1 = (hi - o) * inv
        # rays parallel to a slab: inside -> (-inf, inf), outside -> miss
        parallel = d == 0
        inside = (o >= lo) & (o <= hi)
        t0 = np.where(parallel, np.where(inside, -np.inf, np.inf), t0)
        t1 = np.where(parallel, np.where(inside, np.inf, -np.inf), t1)
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        ent_axis = np.argmax(tmin, axis=1)
        t_in = tmin[np.arange(n), ent_axis]
        t_out = np.min(tmax, axis=1)
        hit = (t_in <= t_out) & (t_in > 0) & (t_in < t_best)
        if not hit.any():
            continue
        t_best = np.where(hit, t_in, t_best)
        axis = np.where(hit, ent_axis, axis)
        # entering through the face whose outward normal opposes the ray
        box_face = 2 * ent_axis + (d[np.arange(n), ent_axis] < 0)
        color = np.where(hit[:, None], box.colors[box_face], color)
        checker = np.where(hit, box.checker, checker)
        surface = np.where(hit, k, surface)

    points = o + t_best[:, None] * d
    light = np.asarray(spec.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    shade = 0.45 + 0.55 * np.abs(light[axis])
    pattern = np.ones(n)
    for size in np.unique(checker):
        sel = checker == size
        pattern[sel] = _checker(points[sel], axis[sel], float(size))
    rgb = np.clip(color * (shade * pattern)[:, None], 0.0, 1.0)
    return rgb, t_best


def render_scene(spec: SceneSpec, pose: CameraPose, intrinsics: CameraIntrinsics) -> View:
    origins, dirs = camera_rays(pose, intrinsics)
    rgb, t = raycast(spec, origins, dirs)
    h, w = intrinsics.height, intrinsics.width
    return View(rgb.reshape(h, w, 3), pose, t.reshape(h, w))


def trajectory_poses(spec: SceneSpec, n_frames: int, kind: str = "orbit", seed: int = 0) -> list[CameraPose]:
    """Camera path in the free middle of the room, looking outward at the walls."""
    room = np.asarray(spec.room, dtype=np.float64)
    center = np.array([room[0] / 2, room[1] / 2, min(1.4, room[2] * 0.55)])
    rng = np.random.default_rng(seed)
    yaw0 = rng.uniform(0, 2 * np.pi)
    poses = []
    if kind == "orbit":
        for i in range(n_frames):
            yaw = yaw0 + np.radians(120.0) * i / max(n_frames - 1, 1)
            eye = center + 0.3 * np.array([np.cos(yaw), np.sin(yaw), 0.0])
            look = eye + np.array([np.cos(yaw), np.sin(yaw), -0.25])
            poses.append(CameraPose.look_at(eye, look))
    elif kind == "line":
        step = np.array([np.cos(yaw0 + np.pi / 2), np.sin(yaw0 + np.pi / 2), 0.0])
        for i in range(n_frames):
            s = -0.5 + i / max(n_frames - 1, 1)
            eye = center + 0.8 * s * step
            look = eye + np.array([np.cos(yaw0), np.sin(yaw0), -0.25])
            poses.append(CameraPose.look_at(eye, look))
    elif kind == "random_walk":
        eye = center.copy()
        yaw = yaw0
        for _ in range(n_frames):
            poses.append(CameraPose.look_at(eye, eye + np.array([np.cos(yaw), np.sin(yaw), -0.25])))
            yaw += rng.normal(0.0, 0.12)
            eye = eye + rng.normal(0.0, 0.05, size=3) * np.array([1, 1, 0.3])
            eye = np.clip(eye, center - [0.6, 0.6, 0.2], center + [0.6, 0.6, 0.2])
    else:
        raise ValueError(f"unknown trajectory {kind!r}")
    return poses


def generate_synthetic_scene(
    spec: SceneSpec,
    n_frames: int,
    trajectory: str = "orbit",
    intrinsics: CameraIntrinsics | None = None,
) -> list[View]:
    """Render ``n_frames`` posed RGB-D views of ``spec`` along a trajectory."""
    spec.validate()
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    intrinsics = intrinsics or CameraIntrinsics.from_fov(64, 64, 70.0)
    poses = trajectory_poses(spec, n_frames, trajectory, seed=spec.seed)
    room = np.asarray(spec.room)
    for pose in poses:
        if (pose.translation <= 0).any() or (pose.translation >= room).any():
            raise ValueError("camera trajectory leaves the room")
    return [render_scene(spec, pose, intrinsics) for pose in poses]


# ---------------------------------------------------------------------------
# Disk layout
# ---------------------------------------------------------------------------


def save_scene(views: list[View], path: str | Path, intrinsics: CameraIntrinsics) -> None:
    root = Path(path)
    frames = root / "frames"
    frames.mkdir(parents=True, exist_ok=True)
    poses = []
    for i, view in enumerate(views):
        rgb = np.round(view.image * 255.0).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(frames / f"{i:04d}.color.png")
        if view.depth is not None:
            mm = np.clip(np.round(view.depth * 1000.0), 0, 65535).astype(np.uint16)
            Image.fromarray(mm).save(frames / f"{i:04d}.depth.png")
        poses.append(view.pose.matrix.tolist())
    (root / "poses.json").write_text(json.dumps(poses))
    (root / "intrinsics.json").write_text(json.dumps(intrinsics.to_dict()))


def _read_json(path: Path):
    if not path.exists():
        raise SceneFormatError(f"missing {path.name} in {path.parent}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"malformed {path.name}: {exc}") from exc


def load_intrinsics(path: str | Path) -> CameraIntrinsics:
    data = _read_json(Path(path) / "intrinsics.json")
    return CameraIntrinsics(
        float(data["fx"]), float(data["fy"]), float(data["cx"]), float(data["cy"]), int(data["width"]), int(data["height"])
    )


def load_scene(path: str | Path) -> list[View]:
    root = Path(path)
    if not root.is_dir():
        raise SceneFormatError(f"scene directory {root} does not exist")
    poses = _read_json(root / "poses.json")
    intr = load_intrinsics(root)
    views = []
    for i, m in enumerate(poses):
        color_file = root / "frames" / f"{i:04d}.color.png"
        if not color_file.exists():
            raise SceneFormatError(f"missing {color_file.name}")
        rgb = np.asarray(Image.open(color_file).convert("RGB"), dtype=np.float64) / 255.0
        if rgb.shape[:2] != (intr.height, intr.width):
            raise SceneFormatError(f"{color_file.name} has size {rgb.shape[:2]}, expected {(intr.height, intr.width)}")
        depth = None
        depth_file = root / "frames" / f"{i:04d}.depth.png"
        if depth_file.exists():
            depth = np.asarray(Image.open(depth_file), dtype=np.float64) / 1000.0
            if depth.shape != rgb.shape[:2]:
                raise SceneFormatError(f"{depth_file.name} size {depth.shape} does not match color {rgb.shape[:2]}")
        views.append(View(rgb, CameraPose.from_matrix(m), depth))
    return views


# ---------------------------------------------------------------------------
# View sets and poses
# ---------------------------------------------------------------------------


def downsample_frames(views: list[View], n_keep: int) -> list[View]:
    """Strided subsampling of a consecutive sub-scan."""
    if n_keep >= len(views):
        return list(views)
    idx = np.linspace(0, len(views) - 1, n_keep).round().astype(int)
    return [views[i] for i in idx]


def sample_view_set(views: list[View], n_obs: int, seed) -> ViewSet:
    n = len(views)
    if not 1 <= n_obs < n:
        raise ValueError(f"n_obs must be in [1, {n - 1}], got {n_obs}")
    rng = np.random.default_rng(seed)
    observed = sorted(int(i) for i in rng.choice(n, size=n_obs, replace=False))
    novel = [i for i in range(n) if i not in set(observed)]
    return ViewSet(list(views), observed, novel)


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """(w, x, y, z) with w >= 0."""
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * math.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def slerp(q0: np.ndarray, q1: np.ndarray, s: float) -> np.ndarray:
    dot = float(np.dot(q0, q1))
    # shortest arc; an exactly antipodal pair (dot == -1) also lands here and
    # is resolved by negating the second quaternion
    if dot < 0:
        q1, dot = -q1, -dot
    if dot > 1 - 1e-12:
        q = q0 + s * (q1 - q0)
        return q / np.linalg.norm(q)
    theta = math.acos(min(dot, 1.0))
    q = (math.sin((1 - s) * theta) * q0 + math.sin(s * theta) * q1) / math.sin(theta)
    return q / np.linalg.norm(q)


def interpolate_poses(pose_a: CameraPose, pose_b: CameraPose, count: int) -> list[CameraPose]:
    """``count`` poses strictly between the endpoints (lerp + quaternion SLERP)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    qa = rotation_to_quaternion(pose_a.rotation)
    qb = rotation_to_quaternion(pose_b.rotation)
    out = []
    for i in range(1, count + 1):
        s = i / (count + 1)
        R = quaternion_to_rotation(slerp(qa, qb, s))
        # re-orthonormalize against round-off
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        t = (1 - s) * pose_a.translation + s * pose_b.translation
        out.append(CameraPose(R, t))
    return out
