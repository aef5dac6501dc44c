"""File-based storage for run outputs, checkpoints, radar frames and trajectories."""

import csv
import json
import logging
from collections import OrderedDict
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

import lie_se3
from errors import CheckpointError, IoFailure
from lie_se3 import Pose
from pointcloud import RECORD_FIELDS, PointCloud

logger = logging.getLogger(__name__)

LOSS_HEADER = ["epoch", "mean_loss", "learning_rate"]


class RunStorage:
    """Manages the output directory of one command invocation."""

    def __init__(self, output_path: str = "./runs"):
        """Initialize the run directory."""
        self.output_path = Path(output_path)
        self.output_path.mkdir(parents=True, exist_ok=True)

        self.manifest_file = self.output_path / "manifest.json"
        self.config_file = self.output_path / "effective_config.json"
        self.diagnostics_file = self.output_path / "diagnostics.jsonl"
        self.loss_file = self.output_path / "loss_curve.csv"
        self.metrics_file = self.output_path / "metrics.json"
        self.checkpoint_dir = self.output_path / "checkpoints"

    def _load_json(self, file_path: Path) -> Dict:
        """Load JSON data from file."""
        try:
            with open(file_path, 'r') as f:
                return json.load(f)
        except (FileNotFoundError, json.JSONDecodeError):
            return {}

    def _save_json(self, file_path: Path, data: Dict):
        """Save JSON data to file."""
        try:
            with open(file_path, 'w') as f:
                json.dump(data, f, indent=2, sort_keys=True)
        except OSError as e:
            raise IoFailure(f"cannot write {file_path}: {e}") from e

    def write_manifest(self, command: str, outputs: Dict[str, Any] = None) -> Dict:
        manifest = {
            "command": command,
            "timestamp": datetime.now().isoformat(),
            "outputs": outputs or {},
        }
        self._save_json(self.manifest_file, manifest)
        return manifest

    def read_manifest(self) -> Dict:
        return self._load_json(self.manifest_file)

    def save_effective_config(self, config: Dict[str, Any]):
        self._save_json(self.config_file, config)

    def load_effective_config(self) -> Dict:
        return self._load_json(self.config_file)

    def save_metrics(self, metrics: Dict[str, Any]):
        self._save_json(self.metrics_file, metrics)

    def load_metrics(self) -> Dict:
        return self._load_json(self.metrics_file)

    def reset_diagnostics(self):
        self.diagnostics_file.write_text("")

    def append_diagnostics(self, record: Dict[str, Any]):
        with open(self.diagnostics_file, 'a') as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def read_diagnostics(self) -> List[Dict]:
        if not self.diagnostics_file.exists():
            return []
        with open(self.diagnostics_file) as f:
            return [json.loads(line) for line in f if line.strip()]

    def append_loss(self, epoch: int, mean_loss: float, learning_rate: float):
        new_file = not self.loss_file.exists()
        with open(self.loss_file, 'a', newline='') as f:
            writer = csv.writer(f)
            if new_file:
                writer.writerow(LOSS_HEADER)
            writer.writerow([epoch, repr(float(mean_loss)), repr(float(learning_rate))])

    def read_loss_curve(self) -> List[Dict[str, float]]:
        if not self.loss_file.exists():
            return []
        with open(self.loss_file, newline='') as f:
            return [
                {"epoch": int(row["epoch"]), "mean_loss": float(row["mean_loss"]),
                 "learning_rate": float(row["learning_rate"])}
                for row in csv.DictReader(f)
            ]

    def checkpoint_path(self, name: str) -> Path:
        self.checkpoint_dir.mkdir(exist_ok=True)
        return self.checkpoint_dir / name

    def latest_checkpoint(self) -> Optional[Path]:
        if not self.checkpoint_dir.exists():
            return None
        stems = sorted((p.with_suffix("") for p in self.checkpoint_dir.glob("*.json")),
                       key=lambda p: (p.name != "initial", p.name))
        return stems[-1] if stems else None


# Checkpoints

def save_checkpoint(stem, state: "OrderedDict[str, np.ndarray]", hyperparameters: Dict[str, Any] = None):
    """Write ``<stem>.bin`` (little-endian float64) and ``<stem>.json``."""
    stem = Path(stem)
    records = []
    chunks = []
    offset = 0
    for name, value in state.items():
        value = np.ascontiguousarray(value, dtype='<f8')
        records.append({"name": name, "shape": list(value.shape), "offset": offset, "count": int(value.size)})
        chunks.append(value.tobytes())
        offset += value.size

    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".bin").write_bytes(b"".join(chunks))
        manifest = {"format": "float64-le", "parameters": records, "hyperparameters": hyperparameters or {}}
        with open(stem.with_suffix(".json"), 'w') as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
    except OSError as e:
        raise IoFailure(f"cannot write checkpoint {stem}: {e}") from e
    logger.info(f"Saved checkpoint {stem} ({offset} values)")


def load_checkpoint(stem, expected_hyperparameters: Dict[str, Any] = None) -> Tuple["OrderedDict[str, np.ndarray]", Dict]:
    stem = Path(stem)
    manifest_path, blob_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    if not manifest_path.exists() or not blob_path.exists():
        raise CheckpointError(f"checkpoint {stem} not found")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
        blob = np.frombuffer(blob_path.read_bytes(), dtype='<f8')
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {stem}: {e}") from e

    hyper = manifest.get("hyperparameters", {})
    if expected_hyperparameters is not None:
        mismatched = sorted(k for k, v in expected_hyperparameters.items() if hyper.get(k) != v)
        if mismatched:
            raise CheckpointError(f"checkpoint {stem} architecture mismatch: {', '.join(mismatched)}")

    state = OrderedDict()
    for record in manifest["parameters"]:
        start, count = record["offset"], record["count"]
        if start + count > len(blob):
            raise CheckpointError(f"checkpoint {stem} is truncated at {record['name']}")
        state[record["name"]] = blob[start:start + count].astype(np.float64).reshape(record["shape"])
    return state, hyper


# Frames

def write_frame_bin(path, cloud: PointCloud):
    try:
        Path(path).write_bytes(np.ascontiguousarray(cloud.records(), dtype='<f4').tobytes())
    except OSError as e:
        raise IoFailure(f"cannot write frame {path}: {e}") from e


def read_frame_bin(path, frame_id: int = 0) -> PointCloud:
    try:
        values = np.frombuffer(Path(path).read_bytes(), dtype='<f4')
    except OSError as e:
        raise IoFailure(f"cannot read frame {path}: {e}") from e
    if values.size % len(RECORD_FIELDS):
        raise IoFailure(f"frame {path} size is not a multiple of {len(RECORD_FIELDS)} floats")
    return PointCloud.from_records(values.reshape(-1, len(RECORD_FIELDS)), frame_id)


def write_frame_csv(path, cloud: PointCloud):
    try:
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(RECORD_FIELDS)
            writer.writerows(cloud.records().tolist())
    except OSError as e:
        raise IoFailure(f"cannot write frame {path}: {e}") from e


def read_frame_csv(path, frame_id: int = 0) -> PointCloud:
    try:
        with open(path, newline='') as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != RECORD_FIELDS:
                raise IoFailure(f"frame {path} header must be {','.join(RECORD_FIELDS)}")
            rows = [[float(row[k]) for k in RECORD_FIELDS] for row in reader]
    except (OSError, ValueError) as e:
        raise IoFailure(f"cannot read frame {path}: {e}") from e
    return PointCloud.from_records(np.array(rows).reshape(-1, len(RECORD_FIELDS)), frame_id)


def write_frames(directory, clouds: Sequence[PointCloud], fmt: str = "bin") -> Path:
    """One file per frame plus ``index.txt`` listing them in order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, cloud in enumerate(clouds):
        name = f"{i:06d}.{fmt}"
        if fmt == "bin":
            write_frame_bin(directory / name, cloud)
        elif fmt == "csv":
            write_frame_csv(directory / name, cloud)
        else:
            raise IoFailure(f"unknown frame format '{fmt}'")
        names.append(name)
    (directory / "index.txt").write_text("\n".join(names) + "\n")
    return directory / "index.txt"


def read_frames(directory) -> List[PointCloud]:
    directory = Path(directory)
    index = directory / "index.txt"
    if not index.exists():
        raise IoFailure(f"frame index {index} not found")
    clouds = []
    for i, name in enumerate(line.strip() for line in index.read_text().splitlines()):
        if not name:
            continue
        path = directory / name
        clouds.append(read_frame_csv(path, i) if path.suffix == ".csv" else read_frame_bin(path, i))
    return clouds


# Trajectories

def write_trajectory(path, poses: Sequence[Pose]):
    """12 numbers per line: the 3×4 world-from-sensor matrix, row-major."""
    lines = []
    for pose in poses:
        world_from_sensor = lie_se3.inverse(pose).matrix()[:3, :4]
        lines.append(" ".join(repr(float(v)) for v in world_from_sensor.reshape(-1)))
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
    except OSError as e:
        raise IoFailure(f"cannot write trajectory {path}: {e}") from e


def read_trajectory(path) -> List[Pose]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IoFailure(f"cannot read trajectory {path}: {e}") from e
    poses = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            values = np.array([float(v) for v in line.split()])
        except ValueError as e:
            raise IoFailure(f"{path}:{number}: {e}") from e
        if values.size != 12:
            raise IoFailure(f"{path}:{number}: expected 12 numbers, got {values.size}")
        poses.append(lie_se3.inverse(Pose.from_matrix(values.reshape(3, 4))))
    return poses
