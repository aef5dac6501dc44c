"""Pose loss, subsequence drift metrics and trajectory plot export."""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

import autodiff as ad
import lie_se3
from config import Config
from errors import DataError, IoFailure, LengthMismatch, TrajectoryTooShort
from lie_se3 import Pose, TensorPose

logger = logging.getLogger(__name__)

# endpoint search tolerance on accumulated path length
LENGTH_TOLERANCE = 1e-9

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]
DASHES = ["", "6,3", "2,2", "8,3,2,3"]
# combined output stem and result keys; a trajectory may not reuse them
RESERVED_PLOT_NAMES = ("trajectories", "combined", "svg", "png")

UNITS = {
    "vod": {"t": "m/m", "r": "deg/m", "t_scale": 1.0, "r_scale": 1.0},
    "long": {"t": "%", "r": "deg/100m", "t_scale": 100.0, "r_scale": 100.0},
}


@dataclass
class Trajectory:
    """Frame ids with world -> sensor poses."""

    frame_ids: List[int]
    poses: List[Pose]
    path_lengths: np.ndarray = field(init=False)

    def __post_init__(self):
        if len(self.frame_ids) != len(self.poses):
            raise LengthMismatch(f"{len(self.frame_ids)} frame ids for {len(self.poses)} poses")
        self.frame_ids = [int(i) for i in self.frame_ids]
        positions = self.positions()
        steps = np.linalg.norm(np.diff(positions, axis=0), axis=1) if len(positions) > 1 else np.zeros(0)
        self.path_lengths = np.concatenate([[0.0], np.cumsum(steps)]) if len(positions) else np.zeros(0)

    @classmethod
    def from_poses(cls, poses: Sequence[Pose]) -> "Trajectory":
        return cls(list(range(len(poses))), list(poses))

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        """Sensor positions in world coordinates, N×3."""
        if not self.poses:
            return np.zeros((0, 3))
        return np.array([lie_se3.inverse(p).translation for p in self.poses])

    def world_from_sensor(self, i: int) -> Pose:
        return lie_se3.inverse(self.poses[i])


@dataclass
class MetricReport:
    t_rel: float
    r_rel: float
    per_length: Dict[int, Dict[str, Optional[float]]]
    count: int
    mode: str

    @property
    def units(self) -> Dict[str, str]:
        return {"t_rel": UNITS[self.mode]["t"], "r_rel": UNITS[self.mode]["r"]}

    def to_dict(self) -> Dict:
        return {
            "mode": self.mode,
            "t_rel": self.t_rel,
            "r_rel": self.r_rel,
            "units": self.units,
            "subsequences": self.count,
            "per_length": {str(k): v for k, v in self.per_length.items()},
        }

    def table(self) -> str:
        u = self.units
        lines = [f"{'length':>8}  {'t_rel (' + u['t_rel'] + ')':>16}  {'r_rel (' + u['r_rel'] + ')':>18}  {'count':>6}"]
        for length, row in self.per_length.items():
            if row["count"]:
                lines.append(f"{length:>8}  {row['t_rel']:>16.6f}  {row['r_rel']:>18.6f}  {row['count']:>6}")
            else:
                lines.append(f"{length:>8}  {'-':>16}  {'-':>18}  {0:>6}")
        lines.append(f"{'mean':>8}  {self.t_rel:>16.6f}  {self.r_rel:>18.6f}  {self.count:>6}")
        return "\n".join(lines)


def _pair(predicted, truth) -> Tuple[List[Pose], List[Pose]]:
    if isinstance(predicted, Trajectory) and isinstance(truth, Trajectory):
        if predicted.frame_ids != truth.frame_ids:
            raise LengthMismatch("trajectories do not cover the same frame ids")
        return predicted.poses, truth.poses
    pred = predicted.poses if isinstance(predicted, Trajectory) else list(predicted)
    true = truth.poses if isinstance(truth, Trajectory) else list(truth)
    if len(pred) != len(true):
        raise LengthMismatch(f"{len(pred)} predicted poses for {len(true)} ground-truth poses")
    return pred, true


def pose_loss(predicted, truth) -> float:
    """Σ ‖Log(T̃⁻¹·T)‖² over aligned frames."""
    pred, true = _pair(predicted, truth)
    return float(sum(np.sum(lie_se3.log(lie_se3.compose(lie_se3.inverse(t), p)) ** 2) for p, t in zip(pred, true)))


def pose_loss_tensor(predicted: Sequence[TensorPose], truth: Sequence[Pose]) -> ad.Tensor:
    if len(predicted) != len(truth):
        raise LengthMismatch(f"{len(predicted)} predicted poses for {len(truth)} ground-truth poses")
    total = None
    for p, t in zip(predicted, truth):
        p = p if isinstance(p, TensorPose) else TensorPose.constant(p)
        err = lie_se3.log_tensor(lie_se3.compose_tensor(TensorPose.constant(lie_se3.inverse(t)), p))
        term = ad.sum_(err * err)
        total = term if total is None else total + term
    return total if total is not None else ad.Tensor(0.0)


def align_by_frame_id(predicted: Trajectory, truth: Trajectory) -> Tuple[Trajectory, Trajectory]:
    """Restrict both trajectories to their common frame ids, in truth order."""
    pred_index = {fid: i for i, fid in enumerate(predicted.frame_ids)}
    common = [fid for fid in truth.frame_ids if fid in pred_index]
    truth_index = {fid: i for i, fid in enumerate(truth.frame_ids)}
    return (
        Trajectory(common, [predicted.poses[pred_index[f]] for f in common]),
        Trajectory(common, [truth.poses[truth_index[f]] for f in common]),
    )


def lengths_for_mode(mode: str) -> Tuple[int, ...]:
    if mode == "vod":
        return tuple(Config.VOD_LENGTHS)
    if mode == "long":
        return tuple(Config.LONG_LENGTHS)
    raise ValueError(f"unknown metric mode '{mode}'")


def _last_frame(path_lengths: np.ndarray, first: int, length: float) -> int:
    goal = path_lengths[first] + length - LENGTH_TOLERANCE
    hits = np.flatnonzero(path_lengths[first:] >= goal)
    return first + int(hits[0]) if len(hits) else -1


def kitti_metrics(predicted: Trajectory, truth: Trajectory, lengths: Sequence[float] = None,
                  mode: str = None) -> MetricReport:
    """Subsequence translational and rotational RMSE per unit length."""
    mode = mode or Config.METRIC_MODE
    if mode not in UNITS:
        raise ValueError(f"unknown metric mode '{mode}'")
    lengths = tuple(lengths) if lengths is not None else lengths_for_mode(mode)
    pred, true = _pair(predicted, truth)
    truth_traj = truth if isinstance(truth, Trajectory) else Trajectory.from_poses(true)
    dist = truth_traj.path_lengths
    units = UNITS[mode]

    pred_world = [lie_se3.inverse(p) for p in pred]
    true_world = [lie_se3.inverse(t) for t in true]

    per_length = {}
    t_rms, r_rms, total = [], [], 0
    for length in lengths:
        t_sq, r_sq = [], []
        for first in range(len(true)):
            last = _last_frame(dist, first, length)
            if last < 0:
                continue
            true_rel = lie_se3.compose(lie_se3.inverse(true_world[first]), true_world[last])
            pred_rel = lie_se3.compose(lie_se3.inverse(pred_world[first]), pred_world[last])
            error = lie_se3.compose(lie_se3.inverse(true_rel), pred_rel)
            t_sq.append((np.linalg.norm(error.translation) / length) ** 2)
            r_sq.append((lie_se3.rotation_angle(error.rotation) / length) ** 2)
        if t_sq:
            t_val = math.sqrt(np.mean(t_sq)) * units["t_scale"]
            r_val = math.degrees(math.sqrt(np.mean(r_sq))) * units["r_scale"]
            per_length[int(length)] = {"t_rel": t_val, "r_rel": r_val, "count": len(t_sq)}
            t_rms.append(t_val)
            r_rms.append(r_val)
            total += len(t_sq)
        else:
            per_length[int(length)] = {"t_rel": None, "r_rel": None, "count": 0}

    if not total:
        raise TrajectoryTooShort(
            f"path length {dist[-1] if len(dist) else 0.0:.2f} m is shorter than {min(lengths)} m"
        )
    return MetricReport(float(np.mean(t_rms)), float(np.mean(r_rms)), per_length, total, mode)


# Plot data

def _svg(trajectories: List[Tuple[str, np.ndarray]], size: int = 800, margin: int = 20) -> str:
    all_xy = np.concatenate([xy for _, xy in trajectories], axis=0) if trajectories else np.zeros((0, 2))
    if len(all_xy):
        lo, hi = all_xy.min(axis=0), all_xy.max(axis=0)
    else:
        lo, hi = np.zeros(2), np.ones(2)
    span = max(float(np.max(hi - lo)), 1e-9)
    scale = (size - 2 * margin) / span

    out = io.StringIO()
    out.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">\n')
    out.write(f'<rect width="{size}" height="{size}" fill="white"/>\n')
    for k, (name, xy) in enumerate(trajectories):
        px = margin + (xy[:, 0] - lo[0]) * scale
        py = size - margin - (xy[:, 1] - lo[1]) * scale
        points = " ".join(f"{x:.3f},{y:.3f}" for x, y in zip(px, py))
        dash = DASHES[k % len(DASHES)]
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        out.write(f'<polyline id="{name}" points="{points}" fill="none" '
                  f'stroke="{PALETTE[k % len(PALETTE)]}" stroke-width="2"{dash_attr}/>\n')
    out.write("</svg>\n")
    return out.getvalue()


def _png(path: Path, trajectories: List[Tuple[str, np.ndarray]], size: int = 800, margin: int = 20):
    image = Image.new("RGB", (size, size), "white")
    draw = ImageDraw.Draw(image)
    all_xy = np.concatenate([xy for _, xy in trajectories], axis=0) if trajectories else np.zeros((0, 2))
    lo = all_xy.min(axis=0) if len(all_xy) else np.zeros(2)
    span = max(float(np.max(all_xy.max(axis=0) - lo)), 1e-9) if len(all_xy) else 1.0
    scale = (size - 2 * margin) / span
    for k, (_, xy) in enumerate(trajectories):
        pts = [(margin + (x - lo[0]) * scale, size - margin - (y - lo[1]) * scale) for x, y in xy]
        color = PALETTE[k % len(PALETTE)]
        if len(pts) > 1:
            draw.line(pts, fill=color, width=2)
        elif pts:
            x, y = pts[0]
            draw.ellipse([x - 2, y - 2, x + 2, y + 2], fill=color)
    image.save(path, format="PNG")


def export_plot_data(trajectories: Sequence[Tuple[str, Trajectory]], out_dir, png: bool = False) -> Dict[str, Path]:
    """Per-trajectory CSVs, a combined CSV and a top-down SVG overlay."""
    names = [name for name, _ in trajectories]
    clashes = sorted({n for n in names if n in RESERVED_PLOT_NAMES or names.count(n) > 1})
    if clashes:
        raise DataError(f"trajectory names must be unique and not reserved: {', '.join(clashes)}")
    out_dir = Path(out_dir)
    written = {}
    xy_sets = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        combined = out_dir / "trajectories.csv"
        with open(combined, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(["name", "frame_id", "x", "y", "z"])
            for name, traj in trajectories:
                positions = traj.positions()
                for fid, (x, y, z) in zip(traj.frame_ids, positions):
                    writer.writerow([name, fid, f"{x:.9f}", f"{y:.9f}", f"{z:.9f}"])
        written["combined"] = combined

        for name, traj in trajectories:
            positions = traj.positions()
            path = out_dir / f"{name}.csv"
            with open(path, 'w', newline='') as f:
                writer = csv.writer(f)
                writer.writerow(["frame_id", "x", "y", "z"])
                for fid, (x, y, z) in zip(traj.frame_ids, positions):
                    writer.writerow([fid, f"{x:.9f}", f"{y:.9f}", f"{z:.9f}"])
            written[name] = path
            xy_sets.append((name, positions[:, :2]))

        svg_path = out_dir / "trajectories.svg"
        svg_path.write_text(_svg(xy_sets))
        written["svg"] = svg_path
        if png:
            png_path = out_dir / "trajectories.png"
            _png(png_path, xy_sets)
            written["png"] = png_path
    except OSError as e:
        raise IoFailure(f"cannot export plot data to {out_dir}: {e}") from e

    logger.info(f"Exported {len(trajectories)} trajectories to {out_dir}")
    return written
