"""Classical comparison baselines: point-to-point ICP and zero motion."""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
from scipy.spatial import cKDTree

import lie_se3
from config import Config
from errors import DataError, Degenerate, InsufficientFrames
from evaluation import Trajectory
from lie_se3 import Pose
from pointcloud import PointCloud
from tracker import motion_model_predict

logger = logging.getLogger(__name__)

# second singular value of the centered source below this share of the first means collinear
RANK_RATIO = 1e-9


@dataclass
class IcpConfig:
    max_iterations: int = Config.ICP_MAX_ITERATIONS
    tolerance: float = Config.ICP_TOLERANCE
    max_distance: float = Config.ICP_MAX_DISTANCE

    def __post_init__(self):
        if self.max_iterations <= 0 or self.tolerance <= 0 or self.max_distance <= 0:
            raise ValueError(f"ICP settings must be positive: {self}")


@dataclass
class IcpResult:
    pose: Pose
    iterations: int
    converged: bool
    costs: List[float] = field(default_factory=list)
    inliers: int = 0


def best_fit_transform(source: np.ndarray, target: np.ndarray) -> Pose:
    """Least-squares rigid motion taking ``source`` onto ``target`` (SVD, reflection-corrected)."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape != target.shape or source.ndim != 2 or source.shape[1] != 3:
        raise DataError(f"correspondence sets must both be N×3, got {source.shape} and {target.shape}")
    if len(source) < 3:
        raise Degenerate(f"{len(source)} correspondences, need at least 3")

    centroid_s = source.mean(axis=0)
    centroid_t = target.mean(axis=0)
    centered = source - centroid_s
    spread = np.linalg.svd(centered, compute_uv=False)
    if spread[1] <= RANK_RATIO * max(spread[0], 1e-300):
        raise Degenerate("correspondences are collinear")

    h = centered.T @ (target - centroid_t)
    u, _, vt = np.linalg.svd(h)
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    rotation = v @ np.diag([1.0, 1.0, d]) @ u.T
    translation = centroid_t - rotation @ centroid_s
    return Pose(rotation, translation)


def _points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def icp_point2point(source, target, init: Pose = None, cfg: IcpConfig = None, detailed: bool = False):
    """Relative pose source -> target by alternating nearest neighbors and closed-form alignment."""
    cfg = cfg or IcpConfig()
    src, dst = _points(source), _points(target)
    if len(src) == 0 or len(dst) == 0:
        raise Degenerate("ICP needs non-empty clouds")

    tree = cKDTree(dst)
    pose = init or Pose.identity()
    result = IcpResult(pose, 0, False)
    for it in range(cfg.max_iterations):
        moved = lie_se3.act(pose, src)
        distances, indices = tree.query(moved, k=1)
        keep = distances <= cfg.max_distance
        result.inliers = int(np.count_nonzero(keep))
        result.costs.append(float(np.sum(distances[keep] ** 2)))

        delta = best_fit_transform(moved[keep], dst[indices[keep]])
        pose = lie_se3.compose(delta, pose)
        result.iterations = it + 1
        if np.linalg.norm(lie_se3.log(delta)) < cfg.tolerance:
            result.converged = True
            break

    result.pose = pose
    logger.debug(f"ICP finished after {result.iterations} iterations, cost {result.costs[-1]:.6f}")
    return result if detailed else pose


def icp_odometry(clouds: Sequence, first_pose: Pose = None, cfg: IcpConfig = None) -> Trajectory:
    """Chain frame-to-frame ICP, each pair initialized by the constant-motion model."""
    if len(clouds) < 2:
        raise InsufficientFrames(f"ICP odometry needs at least 2 frames, got {len(clouds)}")
    poses = [first_pose or Pose.identity()]
    for k in range(1, len(clouds)):
        guess = lie_se3.relative(poses[-1], motion_model_predict(poses))
        rel = icp_point2point(clouds[k - 1], clouds[k], guess, cfg)
        poses.append(lie_se3.compose(rel, poses[-1]))
        logger.debug(f"ICP frame {k}/{len(clouds) - 1}: |ξ| = {np.linalg.norm(lie_se3.log(rel)):.4f}")
    logger.info(f"ICP odometry over {len(clouds)} frames done")
    return Trajectory(_frame_ids(clouds), poses)


def zero_motion(clouds: Sequence, first_pose: Pose = None) -> Trajectory:
    pose = first_pose or Pose.identity()
    return Trajectory(_frame_ids(clouds), [pose] * len(clouds))


def _frame_ids(clouds: Sequence) -> List[int]:
    return [c.frame_id if isinstance(c, PointCloud) else i for i, c in enumerate(clouds)]
