"""Radar point clouds, spatial queries, preprocessing and synthetic scenes."""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

import lie_se3
from config import Config
from errors import (
    CountTooLarge,
    EmptyAfterFilter,
    InsufficientFrames,
    InvalidPointCloud,
    KTooLarge,
)
from lie_se3 import Pose

logger = logging.getLogger(__name__)

RECORD_FIELDS = ("x", "y", "z", "intensity", "radial_velocity")


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N radar points with optional intensity and radial velocity."""

    points: np.ndarray
    intensity: Optional[np.ndarray] = None
    radial_velocity: Optional[np.ndarray] = None
    frame_id: int = 0

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise InvalidPointCloud(f"points must be N×3, got shape {points.shape}")
        if len(points) < 1:
            raise InvalidPointCloud("point cloud is empty")
        if not np.all(np.isfinite(points)):
            raise InvalidPointCloud(f"frame {self.frame_id} has non-finite coordinates")
        object.__setattr__(self, "points", points)

        for name in ("intensity", "radial_velocity"):
            value = getattr(self, name)
            if value is None:
                continue
            value = np.array(value, dtype=np.float64).reshape(-1)
            if len(value) != len(points):
                raise InvalidPointCloud(f"{name} has {len(value)} entries for {len(points)} points")
            object.__setattr__(self, name, value)

    def __len__(self):
        return len(self.points)

    def attributes(self) -> np.ndarray:
        """N×2 (intensity, radial_velocity), zeros where an attribute is missing."""
        n = len(self.points)
        intensity = self.intensity if self.intensity is not None else np.zeros(n)
        velocity = self.radial_velocity if self.radial_velocity is not None else np.zeros(n)
        return np.stack([intensity, velocity], axis=1)

    def records(self) -> np.ndarray:
        return np.concatenate([self.points, self.attributes()], axis=1)

    def with_points(self, points) -> "PointCloud":
        return replace(self, points=points)

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(
            self.points[idx],
            None if self.intensity is None else self.intensity[idx],
            None if self.radial_velocity is None else self.radial_velocity[idx],
            self.frame_id,
        )

    @classmethod
    def from_records(cls, records, frame_id: int = 0) -> "PointCloud":
        records = np.asarray(records, dtype=np.float64)
        if records.ndim != 2 or records.shape[1] != len(RECORD_FIELDS):
            raise InvalidPointCloud(f"expected N×5 records, got shape {records.shape}")
        return cls(records[:, :3], records[:, 3], records[:, 4], frame_id)


@dataclass
class NeighborIndex:
    indices: np.ndarray
    distances: np.ndarray
    fallback: Optional[np.ndarray] = None

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def _coords(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def farthest_point_sample(cloud, count: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min selection starting at ``seed_index``; ties go to the lowest index."""
    pts = _coords(cloud)
    n = len(pts)
    if count < 1 or count > n:
        raise CountTooLarge(f"cannot sample {count} of {n} points")

    selected = np.empty(count, dtype=np.int64)
    selected[0] = seed_index
    nearest = np.sum((pts - pts[seed_index]) ** 2, axis=1)
    nearest[seed_index] = -1.0
    for i in range(1, count):
        nxt = int(np.argmax(nearest))
        selected[i] = nxt
        nearest = np.minimum(nearest, np.sum((pts - pts[nxt]) ** 2, axis=1))
        nearest[selected[: i + 1]] = -1.0
    return selected


def _sorted_neighbors(query: np.ndarray, target: np.ndarray):
    sq = cdist(query, target, "sqeuclidean")
    order = np.argsort(sq, axis=1, kind="stable")
    return order, np.sqrt(np.take_along_axis(sq, order, axis=1))


def knn(query, target, k: int) -> NeighborIndex:
    """Exact k nearest neighbors of every query point in ``target``."""
    q, t = _coords(query), _coords(target)
    if k < 1 or k > len(t):
        raise KTooLarge(f"k={k} with {len(t)} target points")
    order, dist = _sorted_neighbors(q, t)
    return NeighborIndex(order[:, :k].copy(), dist[:, :k].copy())


def ball_query(query, target, radius: float, max_samples: int) -> NeighborIndex:
    """Up to ``max_samples`` neighbors within ``radius``, padded with the nearest hit.

    A query with an empty ball keeps its single nearest neighbor and is flagged
    in ``fallback``.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    q, t = _coords(query), _coords(target)
    order, dist = _sorted_neighbors(q, t)
    width = min(max_samples, len(t))
    order, dist = order[:, :width], dist[:, :width]

    found = np.minimum(np.sum(dist <= radius, axis=1), width)
    keep = np.arange(width)[None, :] < found[:, None]
    indices = np.where(keep, order, order[:, :1])
    distances = np.where(keep, dist, dist[:, :1])
    if width < max_samples:
        pad = max_samples - width
        indices = np.concatenate([indices, np.repeat(indices[:, :1], pad, axis=1)], axis=1)
        distances = np.concatenate([distances, np.repeat(distances[:, :1], pad, axis=1)], axis=1)
    return NeighborIndex(indices, distances, fallback=found == 0)


def preprocess(cloud: PointCloud, num_points: int = None, seed: int = 0,
               min_height: float = None, max_height: float = None) -> PointCloud:
    """Height filter, then seeded down-sampling or repeat-padding to ``num_points``."""
    num_points = num_points or Config.NUM_POINTS
    lo = Config.MIN_HEIGHT if min_height is None else min_height
    hi = Config.MAX_HEIGHT if max_height is None else max_height

    z = cloud.points[:, 2]
    kept = np.flatnonzero((z >= lo) & (z <= hi))
    if len(kept) == 0:
        raise EmptyAfterFilter(f"frame {cloud.frame_id}: no points with height in [{lo}, {hi}]")

    if len(kept) >= num_points:
        rng = np.random.default_rng([seed, cloud.frame_id])
        chosen = np.sort(rng.choice(len(kept), size=num_points, replace=False))
    else:
        logger.debug(f"frame {cloud.frame_id}: padding {len(kept)} points to {num_points}")
        chosen = np.resize(np.arange(len(kept)), num_points)
    return cloud.subset(kept[chosen])


def random_rigid_transform(rng: np.random.Generator, max_angle: float = math.radians(10.0),
                           max_translation: float = 0.5) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    translation = rng.uniform(-max_translation, max_translation, size=3)
    return Pose(lie_se3.so3_exp(axis * angle), translation)


def random_rigid_augment(cloud: PointCloud, gt: Pose, rng: np.random.Generator = None,
                         transform: Pose = None, max_angle: float = math.radians(5.0),
                         max_translation: float = 0.5) -> Tuple[PointCloud, Pose]:
    """Move the sensor frame by G: points become G·p and the pose becomes G ∘ gt."""
    if transform is None:
        transform = random_rigid_transform(rng, max_angle, max_translation)
    return lie_se3.act(transform, cloud), lie_se3.compose(transform, gt)


# Synthetic scenes

MOTIONS = ("straight", "stationary", "turn")


@dataclass
class SyntheticScene:
    """Static structure plus moving boxes observed along a ground-truth trajectory.

    ``trajectory`` holds world -> sensor poses.  Points of moving boxes are
    listed in ``mover_points`` with the index of their box in ``mover_ids``.
    """

    world_points: np.ndarray
    world_intensity: np.ndarray
    mover_points: np.ndarray
    mover_intensity: np.ndarray
    mover_ids: np.ndarray
    mover_velocities: np.ndarray
    trajectory: List[Pose]
    dynamic_fraction: float = 0.0
    noise_sigma: float = 0.0
    rng_seed: int = 0
    sensor_range: float = 40.0
    num_points: int = field(default_factory=lambda: Config.NUM_POINTS)
    static_priority: np.ndarray = None
    mover_priority: np.ndarray = None


def _plane(rng, n, origin, u, v, extent_u, extent_v):
    a = rng.uniform(0.0, extent_u, size=(n, 1))
    b = rng.uniform(0.0, extent_v, size=(n, 1))
    return np.asarray(origin) + a * np.asarray(u) + b * np.asarray(v)


def _box_surface(rng, n, center, size):
    face = rng.integers(0, 6, size=n)
    local = rng.uniform(-0.5, 0.5, size=(n, 3))
    axis = face // 2
    local[np.arange(n), axis] = np.where(face % 2 == 0, -0.5, 0.5)
    return np.asarray(center) + local * np.asarray(size)


def _trajectory(motion: str, frames: int, step: float, yaw_rate: float) -> List[Pose]:
    poses = []
    position = np.zeros(3)
    yaw = 0.0
    for _ in range(frames):
        c, s = math.cos(yaw), math.sin(yaw)
        world_from_sensor = Pose(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), position.copy())
        poses.append(lie_se3.inverse(world_from_sensor))
        if motion == "stationary":
            continue
        position = position + step * np.array([c, s, 0.0])
        if motion == "turn":
            yaw += yaw_rate
    return poses


def make_scene(seed: int = 0, frames: int = 20, motion: str = "straight", step: float = 0.5,
               yaw_rate: float = math.radians(2.0), dynamic_fraction: float = 0.0,
               noise_sigma: float = 0.0, num_boxes: int = 6, num_movers: int = 2,
               num_points: int = None) -> SyntheticScene:
    """Build a street-like scene: ground, two walls, boxes and 5% clutter."""
    if motion not in MOTIONS:
        raise ValueError(f"unknown motion '{motion}', expected one of {MOTIONS}")
    if not 0.0 <= dynamic_fraction < 1.0:
        raise ValueError(f"dynamic_fraction must be in [0, 1), got {dynamic_fraction}")

    rng = np.random.default_rng(seed)
    length = step * frames + 60.0
    ground = _plane(rng, 3000, (-20.0, -14.0, -1.5), (1, 0, 0), (0, 1, 0), length, 28.0)
    left = _plane(rng, 1500, (-20.0, 12.0, -1.5), (1, 0, 0), (0, 0, 1), length, 6.0)
    right = _plane(rng, 1500, (-20.0, -12.0, -1.5), (1, 0, 0), (0, 0, 1), length, 6.0)

    boxes = []
    for _ in range(num_boxes):
        center = (rng.uniform(-10.0, length - 20.0), rng.uniform(-9.0, 9.0), -0.5)
        size = rng.uniform(1.0, 3.0, size=3)
        boxes.append(_box_surface(rng, 300, center, size))

    structure = np.concatenate([ground, left, right] + boxes, axis=0)
    clutter_count = int(round(0.05 * len(structure) / 0.95))
    clutter = np.column_stack([
        rng.uniform(-20.0, length - 20.0, clutter_count),
        rng.uniform(-12.0, 12.0, clutter_count),
        rng.uniform(-1.5, 6.0, clutter_count),
    ])
    world = np.concatenate([structure, clutter], axis=0)

    movers, mover_ids, velocities = [], [], []
    for j in range(num_movers):
        center = (rng.uniform(0.0, length - 30.0), rng.uniform(-8.0, 8.0), -0.6)
        movers.append(_box_surface(rng, 400, center, (4.0, 1.8, 1.6)))
        mover_ids.append(np.full(400, j))
        heading = rng.uniform(-math.pi, math.pi)
        velocities.append(rng.uniform(0.3, 1.0) * np.array([math.cos(heading), math.sin(heading), 0.0]))

    mover_points = np.concatenate(movers, axis=0) if movers else np.zeros((0, 3))
    return SyntheticScene(
        world_points=world,
        world_intensity=rng.uniform(0.0, 1.0, len(world)),
        mover_points=mover_points,
        mover_intensity=rng.uniform(0.0, 1.0, len(mover_points)),
        mover_ids=np.concatenate(mover_ids) if mover_ids else np.zeros(0, dtype=np.int64),
        mover_velocities=np.array(velocities).reshape(-1, 3),
        trajectory=_trajectory(motion, frames, step, yaw_rate),
        dynamic_fraction=dynamic_fraction,
        noise_sigma=noise_sigma,
        rng_seed=seed,
        num_points=num_points or Config.NUM_POINTS,
        static_priority=rng.permutation(len(world)),
        mover_priority=rng.permutation(len(mover_points)),
    )


def _visible(points: np.ndarray, pose: Pose, sensor_range: float) -> np.ndarray:
    local = lie_se3.act(pose, points)
    return np.flatnonzero(np.linalg.norm(local, axis=1) <= sensor_range)


def _pick(candidates: np.ndarray, priority: np.ndarray, count: int) -> np.ndarray:
    if count <= 0 or len(candidates) == 0:
        return candidates[:0]
    ranked = candidates[np.argsort(priority[candidates], kind="stable")]
    return ranked[:count]


def synth_sequence(scene: SyntheticScene, frames: int = None) -> List[Tuple[PointCloud, Pose]]:
    """Sample one radar-like cloud per ground-truth pose.

    Each frame keeps the visible world points with the lowest fixed priority,
    so a stationary sensor sees the same points in every frame.
    """
    frames = len(scene.trajectory) if frames is None else frames
    if frames < 2:
        raise InsufficientFrames(f"a sequence needs at least 2 frames, got {frames}")
    if frames > len(scene.trajectory):
        raise InsufficientFrames(f"scene trajectory has only {len(scene.trajectory)} poses")

    n = scene.num_points
    sequence = []
    for i in range(frames):
        pose = scene.trajectory[i]
        sensor_position = lie_se3.inverse(pose).translation
        neighbor = scene.trajectory[i + 1] if i + 1 < len(scene.trajectory) else scene.trajectory[i - 1]
        ego_velocity = lie_se3.inverse(neighbor).translation - sensor_position
        if i + 1 >= len(scene.trajectory):
            ego_velocity = -ego_velocity

        moved = scene.mover_points + scene.mover_velocities[scene.mover_ids] * i if len(scene.mover_points) else scene.mover_points
        n_dynamic = int(round(scene.dynamic_fraction * n))
        dynamic_idx = _pick(_visible(moved, pose, scene.sensor_range), scene.mover_priority, n_dynamic) \
            if n_dynamic and len(moved) else np.zeros(0, dtype=np.int64)
        static_idx = _pick(_visible(scene.world_points, pose, scene.sensor_range),
                           scene.static_priority, n - len(dynamic_idx))

        world = np.concatenate([scene.world_points[static_idx], moved[dynamic_idx]], axis=0)
        if len(world) == 0:
            raise EmptyAfterFilter(f"frame {i}: no scene points within {scene.sensor_range} m")
        intensity = np.concatenate([scene.world_intensity[static_idx], scene.mover_intensity[dynamic_idx]])
        velocity = np.zeros_like(world)
        if len(dynamic_idx):
            velocity[len(static_idx):] = scene.mover_velocities[scene.mover_ids[dynamic_idx]]
        if len(world) < n:
            fill = np.resize(np.arange(len(world)), n)
            world, intensity, velocity = world[fill], intensity[fill], velocity[fill]

        local = lie_se3.act(pose, world)
        rng = np.random.default_rng([scene.rng_seed, i])
        if scene.noise_sigma > 0:
            local = local + rng.normal(0.0, scene.noise_sigma, size=local.shape)

        directions = local / np.maximum(np.linalg.norm(local, axis=1, keepdims=True), 1e-9)
        relative_velocity = (velocity - ego_velocity) @ pose.rotation.T
        radial = np.sum(directions * relative_velocity, axis=1)
        sequence.append((PointCloud(local, intensity, radial, frame_id=i), pose))

    logger.debug(f"synthesized {frames} frames from scene seed {scene.rng_seed}")
    return sequence


def synthetic_dataset(count: int, frames: int, seed: int = 0, **scene_kwargs) -> List[List[Tuple[PointCloud, Pose]]]:
    """``count`` independent sequences with seeds ``seed, seed+1, ...``."""
    return [synth_sequence(make_scene(seed=seed + i, frames=frames, **scene_kwargs)) for i in range(count)]
