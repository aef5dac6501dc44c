"""Command-line entry point for the radar odometry pipeline.

Subcommands::

    synth       write a synthetic radar dataset (frames + ground truth)
    odometry    run the sliding-window tracker (or a baseline) over a dataset
    eval        subsequence drift metrics between two trajectory files
    gradcheck   finite-difference verification suites
    train-toy   train the network on synthetic sequences
"""

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from dotenv import dotenv_values

import storage
from backbone import STREAMS, BackboneSettings
from baselines import icp_odometry, zero_motion
from config import Config
from errors import (
    CheckpointError,
    ConfigError,
    DataError,
    GradcheckFailed,
    IoFailure,
    RadarOdometryError,
    TrajectoryTooShort,
)
from evaluation import Trajectory, align_by_frame_id, export_plot_data, kitti_metrics
from lie_se3 import Pose
from neural_opt import CONFIDENCE_MODES, POSE_HEADS, OperatorSettings
from pointcloud import MOTIONS, PointCloud, make_scene, preprocess, synth_sequence
from storage import RunStorage
from tracker import OdometryNetwork, Tracker, TrackerConfig, train_toy
from verification import SCOPES, run_verification

logger = logging.getLogger(__name__)

COMMANDS = ("synth", "odometry", "eval", "gradcheck", "train-toy")
BASELINES = ("none", "icp", "zero")
GROUND_TRUTH_FILE = "groundtruth.txt"
TRAJECTORY_FILE = "trajectory.txt"
ENV_PREFIX = "radar_odom_"


@dataclass
class RunConfig:
    """Everything a command needs; serialized next to its outputs."""

    dataset: Optional[str] = None
    checkpoint: Optional[str] = None
    out: str = Config.OUTPUT_PATH
    seed: int = Config.SEED
    mode: str = Config.METRIC_MODE
    baseline: str = "none"
    iters: int = Config.TRACK_ITERATIONS
    window: int = Config.WINDOW_SIZE
    points: int = Config.NUM_POINTS
    confidence_mode: str = Config.CONFIDENCE_MODE
    pose_head: str = Config.POSE_HEAD
    ablate: str = ""
    log_level: str = Config.LOG_LEVEL

    # synthetic scenes
    frames: int = 20
    sequences: int = 1
    motion: str = "straight"
    step: float = 0.5
    dynamic_fraction: float = 0.0
    noise_sigma: float = 0.0
    frame_format: str = "bin"

    # evaluation
    predicted: Optional[str] = None
    truth: Optional[str] = None
    png: bool = False

    # verification
    scope: str = "all"
    inject_sign_error: bool = False

    # training
    epochs: int = 10
    learning_rate: float = Config.LEARNING_RATE
    unroll: int = Config.TRAIN_UNROLL
    augment: bool = True

    def validate(self):
        problems = []
        if self.mode not in ("vod", "long"):
            problems.append(f"mode '{self.mode}'")
        if self.baseline not in BASELINES:
            problems.append(f"baseline '{self.baseline}'")
        if self.motion not in MOTIONS:
            problems.append(f"motion '{self.motion}'")
        if self.scope != "all" and self.scope not in SCOPES:
            problems.append(f"scope '{self.scope}'")
        if self.frame_format not in ("bin", "csv"):
            problems.append(f"frame_format '{self.frame_format}'")
        if self.confidence_mode not in CONFIDENCE_MODES:
            problems.append(f"confidence_mode '{self.confidence_mode}'")
        if self.pose_head not in POSE_HEADS:
            problems.append(f"pose_head '{self.pose_head}'")
        unknown = [s for s in self.ablated_streams() if s not in STREAMS]
        if unknown:
            problems.append(f"ablate '{','.join(unknown)}'")
        for name in ("iters", "window", "points", "frames", "sequences", "unroll"):
            if getattr(self, name) <= 0:
                problems.append(f"{name}={getattr(self, name)}")
        if self.epochs < 0:
            problems.append(f"epochs={self.epochs}")
        if problems:
            raise ConfigError(f"invalid run configuration: {', '.join(problems)}")
        return self

    def ablated_streams(self) -> List[str]:
        return [s.strip() for s in self.ablate.split(",") if s.strip()]

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_file(cls, path) -> Dict[str, Any]:
        """Key-value settings from a JSON file or a dotenv-style text file."""
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        if path.suffix == ".json":
            try:
                raw = json.loads(path.read_text())
            except json.JSONDecodeError as e:
                raise ConfigError(f"cannot parse {path}: {e}") from e
        else:
            raw = dotenv_values(path)
        return {cls._key(k): v for k, v in raw.items() if cls._key(k) != "command"}

    @staticmethod
    def _key(name: str) -> str:
        key = name.strip().lower()
        if key.startswith(ENV_PREFIX):
            key = key[len(ENV_PREFIX):]
        return key.replace("-", "_")

    @classmethod
    def build(cls, file_values: Dict[str, Any], overrides: Dict[str, Any]) -> "RunConfig":
        """File values first, then every flag that was given on the command line."""
        types = {f.name: f for f in dataclasses.fields(cls)}
        merged = {}
        for source in (file_values, overrides):
            for key, value in source.items():
                if value is None:
                    continue
                if key not in types:
                    raise ConfigError(f"unknown setting '{key}'")
                merged[key] = _coerce(key, value, types[key].default)
        return cls(**merged).validate()


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"setting '{key}' expects a boolean, got '{value}'")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"setting '{key}' expects a number, got '{value}'") from e
    return str(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radar_odometry", description="4D radar odometry toolkit")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="dotenv-style or JSON settings file")
    parser.add_argument("--dataset")
    parser.add_argument("--checkpoint")
    parser.add_argument("--out")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--mode", choices=("vod", "long"))
    parser.add_argument("--baseline", choices=BASELINES)
    parser.add_argument("--iters", type=int, help="operator iterations per tracked frame")
    parser.add_argument("--window", type=int)
    parser.add_argument("--points", type=int, help="points per preprocessed frame")
    parser.add_argument("--confidence-mode", dest="confidence_mode", choices=CONFIDENCE_MODES)
    parser.add_argument("--pose-head", dest="pose_head", choices=POSE_HEADS)
    parser.add_argument("--ablate", help="comma-separated backbone streams to disable: " + ",".join(STREAMS))
    parser.add_argument("--frames", type=int)
    parser.add_argument("--sequences", type=int)
    parser.add_argument("--motion", choices=MOTIONS)
    parser.add_argument("--step", type=float)
    parser.add_argument("--dynamic-fraction", dest="dynamic_fraction", type=float)
    parser.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    parser.add_argument("--frame-format", dest="frame_format", choices=("bin", "csv"))
    parser.add_argument("--predicted")
    parser.add_argument("--truth")
    parser.add_argument("--png", action="store_true", default=None)
    parser.add_argument("--scope", choices=("all",) + SCOPES)
    parser.add_argument("--inject-sign-error", dest="inject_sign_error", action="store_true", default=None)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", dest="learning_rate", type=float)
    parser.add_argument("--unroll", type=int)
    parser.add_argument("--no-augment", dest="augment", action="store_false", default=None)
    parser.add_argument("--log-level", dest="log_level")
    return parser


def setup_logging(out_dir: Path, level: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(out_dir / Config.LOG_FILE),
            logging.StreamHandler(sys.stdout)
        ],
        force=True,
    )


# Dataset helpers

def _sequence_dirs(dataset: Path) -> List[Path]:
    if (dataset / "index.txt").exists():
        return [dataset]
    dirs = sorted(p for p in dataset.glob("seq_*") if (p / "index.txt").exists())
    if not dirs:
        raise IoFailure(f"no frame index found under {dataset}")
    return dirs


def load_sequence(directory: Path, cfg: RunConfig) -> Tuple[List[PointCloud], Optional[List[Pose]]]:
    clouds = [preprocess(c, cfg.points, cfg.seed) for c in storage.read_frames(directory)]
    truth_file = directory / GROUND_TRUTH_FILE
    truth = storage.read_trajectory(truth_file) if truth_file.exists() else None
    if truth is not None and len(truth) != len(clouds):
        raise DataError(f"{truth_file} has {len(truth)} poses for {len(clouds)} frames")
    return clouds, truth


def synthetic_sequences(cfg: RunConfig) -> List[List[Tuple[PointCloud, Pose]]]:
    return [
        synth_sequence(make_scene(seed=cfg.seed + i, frames=cfg.frames, motion=cfg.motion, step=cfg.step,
                                  dynamic_fraction=cfg.dynamic_fraction, noise_sigma=cfg.noise_sigma,
                                  num_points=cfg.points))
        for i in range(cfg.sequences)
    ]


def training_samples(sequences: Sequence[Sequence[Tuple[PointCloud, Pose]]],
                     length: int = None) -> List[List[Tuple[PointCloud, Pose]]]:
    """Consecutive non-overlapping windows of ``length`` frames, renumbered from 0."""
    length = length or Config.TRAIN_FRAMES
    samples = []
    for sequence in sequences:
        for start in range(0, len(sequence) - length + 1, length):
            window = sequence[start:start + length]
            samples.append([(PointCloud(c.points, c.intensity, c.radial_velocity, frame_id=k), gt)
                            for k, (c, gt) in enumerate(window)])
    return samples


# Commands

def cmd_synth(cfg: RunConfig, run: RunStorage) -> Dict[str, Any]:
    out = Path(cfg.out)
    written = []
    for i, sequence in enumerate(synthetic_sequences(cfg)):
        target = out if cfg.sequences == 1 else out / f"seq_{i:03d}"
        storage.write_frames(target, [cloud for cloud, _ in sequence], cfg.frame_format)
        storage.write_trajectory(target / GROUND_TRUTH_FILE, [gt for _, gt in sequence])
        written.append(str(target))
        logger.info(f"Wrote {len(sequence)} synthetic frames to {target}")
    return {"sequences": written, "frames": cfg.frames}


def build_network(cfg: RunConfig) -> OdometryNetwork:
    """Network with the backbone streams and operator heads the settings ask for."""
    backbone = BackboneSettings.ablated(cfg.ablated_streams())
    operator = OperatorSettings(confidence_mode=cfg.confidence_mode, pose_head=cfg.pose_head)
    return OdometryNetwork(seed=cfg.seed, backbone_settings=backbone, operator_settings=operator)


def _load_network(cfg: RunConfig) -> OdometryNetwork:
    network = build_network(cfg)
    if not cfg.checkpoint:
        raise CheckpointError("odometry needs --checkpoint (or --baseline icp/zero)")
    network.load(cfg.checkpoint)
    logger.info(f"Loaded checkpoint {cfg.checkpoint}")
    return network


def cmd_odometry(cfg: RunConfig, run: RunStorage) -> Dict[str, Any]:
    if not cfg.dataset:
        raise ConfigError("odometry needs --dataset")
    clouds, truth = load_sequence(_sequence_dirs(Path(cfg.dataset))[0], cfg)
    first_pose = truth[0] if truth else None

    if cfg.baseline == "icp":
        trajectory = icp_odometry(clouds, first_pose)
    elif cfg.baseline == "zero":
        trajectory = zero_motion(clouds, first_pose)
    else:
        network = _load_network(cfg)
        run.reset_diagnostics()
        tracker_cfg = TrackerConfig(window_size=cfg.window, track_iterations=cfg.iters)
        tracker = Tracker(network, tracker_cfg, on_step=run.append_diagnostics)
        trajectory = tracker.run(clouds, first_pose)
        logger.info(f"Tracker counters: {dict(tracker.counters)}")

    trajectory_path = Path(cfg.out) / TRAJECTORY_FILE
    storage.write_trajectory(trajectory_path, trajectory.poses)
    outputs = {"trajectory": str(trajectory_path), "frames": len(trajectory), "baseline": cfg.baseline}

    if truth:
        try:
            report = kitti_metrics(trajectory, Trajectory.from_poses(truth), mode=cfg.mode)
            run.save_metrics(report.to_dict())
            outputs["metrics"] = str(run.metrics_file)
        except TrajectoryTooShort as e:
            logger.warning(f"Skipping metrics: {e}")
    return outputs


def cmd_eval(cfg: RunConfig, run: RunStorage) -> Dict[str, Any]:
    predicted_path = cfg.predicted
    truth_path = cfg.truth or (str(Path(cfg.dataset) / GROUND_TRUTH_FILE) if cfg.dataset else None)
    if not predicted_path or not truth_path:
        raise ConfigError("eval needs --predicted and --truth (or --dataset)")

    predicted = Trajectory.from_poses(storage.read_trajectory(predicted_path))
    truth = Trajectory.from_poses(storage.read_trajectory(truth_path))
    predicted, truth = align_by_frame_id(predicted, truth)
    report = kitti_metrics(predicted, truth, mode=cfg.mode)

    run.save_metrics(report.to_dict())
    table = report.table()
    (Path(cfg.out) / "metrics.txt").write_text(table + "\n")
    print(table)
    plots = export_plot_data([("truth", truth), ("predicted", predicted)], cfg.out, png=cfg.png)
    return {"metrics": str(run.metrics_file), "t_rel": report.t_rel, "r_rel": report.r_rel,
            "plots": {k: str(v) for k, v in plots.items()}}


def cmd_gradcheck(cfg: RunConfig, run: RunStorage) -> Dict[str, Any]:
    report = run_verification(cfg.scope, cfg.seed, cfg.inject_sign_error)
    run.save_metrics(report.to_dict())
    print(report.table())
    if not report.passed:
        raise GradcheckFailed(f"gradient checks failed: {', '.join(report.failures())}")
    return {"report": str(run.metrics_file), "suites": [s.name for s in report.suites]}


def cmd_train_toy(cfg: RunConfig, run: RunStorage) -> Dict[str, Any]:
    if cfg.dataset:
        sequences = []
        for directory in _sequence_dirs(Path(cfg.dataset)):
            clouds, truth = load_sequence(directory, cfg)
            if truth is None:
                raise DataError(f"{directory} has no {GROUND_TRUTH_FILE}")
            sequences.append(list(zip(clouds, truth)))
    else:
        sequences = [[(preprocess(c, cfg.points, cfg.seed), gt) for c, gt in seq] for seq in synthetic_sequences(cfg)]
    samples = training_samples(sequences)
    if not samples:
        raise DataError(f"no {Config.TRAIN_FRAMES}-frame training samples in the dataset")

    network = build_network(cfg)
    result = train_toy(network, samples, cfg.epochs, lr=cfg.learning_rate, unroll=cfg.unroll,
                       augment=cfg.augment, seed=cfg.seed, run=run)
    outputs = {"samples": len(samples), "epochs": cfg.epochs, "checkpoints": result.checkpoints,
               "loss_curve": str(run.loss_file), "epoch_losses": result.epoch_losses,
               "hyperparameters": network.hyperparameters()}
    if cfg.checkpoint:
        network.save(cfg.checkpoint)
        outputs["checkpoint"] = cfg.checkpoint
    return outputs


HANDLERS = {
    "synth": cmd_synth,
    "odometry": cmd_odometry,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "train-toy": cmd_train_toy,
}


def main(argv: Sequence[str] = None) -> int:
    """Run one command; returns the process exit code."""
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        file_values = RunConfig.from_file(args.config) if args.config else {}
        cfg = RunConfig.build(file_values, overrides)
        out = Path(cfg.out)
        setup_logging(out, cfg.log_level)
        run = RunStorage(str(out))
        run.save_effective_config({"command": args.command, **cfg.to_dict()})

        logger.info(f"Running {args.command} with outputs in {out}")
        outputs = HANDLERS[args.command](cfg, run)
        run.write_manifest(args.command, outputs)
        logger.info(f"{args.command} finished")
        return 0
    except RadarOdometryError as e:
        logger.error(f"Failed to run {args.command}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        logger.error(f"Failed to run {args.command}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
