"""Frame graphs, the sliding-window odometry system and toy training."""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
import lie_se3
from autodiff import Adam, ParameterSet, Tensor
from backbone import BackbonePair, BackboneSettings, CloudGeometry
from config import Config
from correlation import CorrelationLookup, warp
from errors import (
    ConfigError,
    DataError,
    EmptyHistory,
    InsufficientFrames,
    NonFiniteLoss,
    WrongLength,
)
from evaluation import Trajectory, pose_loss_tensor
from lie_se3 import Pose, TensorPose
from neural_opt import EdgeState, Operator, OperatorSettings, iterate
from pointcloud import PointCloud, random_rigid_augment
import storage

logger = logging.getLogger(__name__)

FLOW_EPS = 1e-12


@dataclass
class TrackerConfig:
    window_size: int = Config.WINDOW_SIZE
    init_iterations: int = Config.INIT_ITERATIONS
    track_iterations: int = Config.TRACK_ITERATIONS
    ba_steps: int = Config.BA_STEPS
    edge_radius: int = Config.EDGE_RADIUS
    train_unroll: int = Config.TRAIN_UNROLL

    def __post_init__(self):
        bad = [name for name, value in vars(self).items() if not isinstance(value, int) or value <= 0]
        if bad:
            raise ConfigError(f"tracker settings must be positive integers: {', '.join(bad)}")


@dataclass
class FrameNode:
    frame_id: int
    cloud: PointCloud
    pose: object
    fixed: bool = False
    features: Optional[Tensor] = None
    context: Optional[Tensor] = None
    geometry: Optional[CloudGeometry] = None

    def numeric_pose(self) -> Pose:
        return self.pose.to_pose() if isinstance(self.pose, TensorPose) else self.pose


class FrameGraph:
    """Frames with poses plus the directed edges optimized jointly."""

    def __init__(self):
        self.frames: List[FrameNode] = []
        self.edges: List[EdgeState] = []
        self.truth: Optional[List[Pose]] = None

    def __len__(self):
        return len(self.frames)

    @property
    def frame_ids(self) -> List[int]:
        return [node.frame_id for node in self.frames]

    def node(self, frame_id: int) -> FrameNode:
        for node in self.frames:
            if node.frame_id == frame_id:
                return node
        raise KeyError(frame_id)

    def add_frame(self, node: FrameNode):
        if node.frame_id in self.frame_ids:
            raise DataError(f"frame {node.frame_id} is already in the graph")
        self.frames.append(node)

    def has_edge(self, source: int, target: int) -> bool:
        return any(e.source == source and e.target == target for e in self.edges)

    def add_edge(self, source: int, target: int) -> EdgeState:
        if source == target:
            raise DataError(f"self edge on frame {source}")
        ids = self.frame_ids
        if source not in ids or target not in ids:
            raise DataError(f"edge ({source}, {target}) references a missing frame")
        if self.has_edge(source, target):
            raise DataError(f"duplicate edge ({source}, {target})")
        edge = EdgeState(source, target)
        self.edges.append(edge)
        return edge

    def add_undirected(self, a: int, b: int) -> int:
        added = 0
        for s, t in ((a, b), (b, a)):
            if not self.has_edge(s, t):
                self.add_edge(s, t)
                added += 1
        return added

    def remove_frame(self, frame_id: int) -> Tuple[FrameNode, int]:
        node = self.node(frame_id)
        self.frames.remove(node)
        before = len(self.edges)
        self.edges = [e for e in self.edges if e.source != frame_id and e.target != frame_id]
        return node, before - len(self.edges)

    def undirected_edges(self) -> List[Tuple[int, int]]:
        return sorted({(min(e.source, e.target), max(e.source, e.target)) for e in self.edges})

    def poses(self) -> List[Pose]:
        return [node.numeric_pose() for node in self.frames]

    def relative_pose(self, a: int, b: int) -> Pose:
        return lie_se3.relative(self.node(a).numeric_pose(), self.node(b).numeric_pose())

    def validate(self):
        if not any(node.fixed for node in self.frames):
            raise DataError("graph has no fixed frame")
        ids = set(self.frame_ids)
        seen = set()
        for e in self.edges:
            if e.source == e.target or e.source not in ids or e.target not in ids or e.key in seen:
                raise DataError(f"invalid edge {e.key}")
            seen.add(e.key)


class OdometryNetwork:
    """All learned weights: two backbones, the correlation lookup and the operator."""

    def __init__(self, seed: int = 0, backbone_settings: BackboneSettings = None,
                 operator_settings: OperatorSettings = None, lookup_k1: int = None, lookup_k2: int = None):
        rng = np.random.default_rng(seed)
        self.params = ParameterSet()
        self.backbones = BackbonePair(self.params, rng, backbone_settings)
        lookup = CorrelationLookup(self.params, "lookup", rng, k1=lookup_k1, k2=lookup_k2)
        self.operator = Operator(self.params, rng, self.backbones.output_width, operator_settings, lookup)

    def hyperparameters(self) -> Dict:
        return {**self.backbones.settings.hyperparameters(), **self.operator.hyperparameters()}

    def extract(self, cloud: PointCloud, geometry: CloudGeometry = None) -> Tuple[Tensor, Tensor, CloudGeometry]:
        geometry = geometry or self.backbones.geometry(cloud)
        features = self.backbones.extract(cloud, "feature", geometry).out
        context = self.backbones.extract(cloud, "context", geometry).out
        return features, context, geometry

    def save(self, stem):
        storage.save_checkpoint(stem, self.params.state(), self.hyperparameters())

    def load(self, stem):
        state, _ = storage.load_checkpoint(stem, self.hyperparameters())
        self.params.load_state(state)


def _attach_features(network: OdometryNetwork, node: FrameNode):
    node.features, node.context, node.geometry = network.extract(node.cloud, node.geometry)


def temporal_neighbors(count: int, neighbors: int) -> List[Tuple[int, int]]:
    """Undirected edges joining each frame to every frame within its k-th nearest index distance."""
    edges = set()
    for i in range(count):
        distances = sorted(abs(i - j) for j in range(count) if j != i)
        reach = distances[min(neighbors, len(distances)) - 1]
        for j in range(count):
            if j != i and abs(i - j) <= reach:
                edges.add((min(i, j), max(i, j)))
    return sorted(edges)


def build_training_graph(sequence: Sequence[Tuple[PointCloud, Pose]], network: OdometryNetwork = None,
                         length: int = None, neighbors: int = None) -> FrameGraph:
    """Seven-frame training sample: temporal 3-NN edges, every pose initialized to frame 0's truth."""
    length = length or Config.TRAIN_FRAMES
    neighbors = neighbors or Config.TRAIN_NEIGHBORS
    if len(sequence) != length:
        raise WrongLength(f"training samples have {length} frames, got {len(sequence)}")

    graph = FrameGraph()
    graph.truth = [gt for _, gt in sequence]
    start = sequence[0][1]
    for i, (cloud, _) in enumerate(sequence):
        node = FrameNode(i, cloud, start, fixed=(i == 0))
        if network is not None:
            _attach_features(network, node)
        graph.add_frame(node)
    for a, b in temporal_neighbors(length, neighbors):
        graph.add_undirected(a, b)
    return graph


def motion_model_predict(history: Sequence[Pose]) -> Pose:
    """Constant relative motion: (T_k ∘ T_{k-1}⁻¹) ∘ T_k."""
    if not history:
        raise EmptyHistory("motion model needs at least one pose")
    last = history[-1]
    if len(history) == 1:
        return last
    step = lie_se3.relative(history[-2], last)
    return lie_se3.compose(step, last)


class Tracker:
    """Sliding-window odometry over a stream of preprocessed clouds."""

    def __init__(self, network: OdometryNetwork, config: TrackerConfig = None,
                 on_step: Callable[[Dict], None] = None):
        self.network = network
        self.config = config or TrackerConfig()
        self.on_step = on_step
        self.graph: Optional[FrameGraph] = None
        self.trajectory: List[Tuple[int, Pose]] = []
        self.counters: Counter = Counter()

    def _run(self, iterations: int, phase: str):
        def report(record):
            if self.on_step is not None:
                self.on_step({"phase": phase, **record})

        result = iterate(self.graph, self.network.operator, iterations, self.config.ba_steps, report)
        self.counters["operator_iterations"] += result.iterations
        self.counters["ba_steps"] += result.ba_steps
        self.counters[f"{phase}_iterations"] += result.iterations
        for node in self.graph.frames:
            node.pose = node.numeric_pose()

    def _connect(self, frame_id: int):
        for other in self.graph.frame_ids:
            if other != frame_id and abs(other - frame_id) <= self.config.edge_radius:
                self.counters["edges_added"] += self.graph.add_undirected(frame_id, other)

    def initialize(self, clouds: Sequence[PointCloud], first_pose: Pose = None) -> FrameGraph:
        size = self.config.window_size
        if len(clouds) < size:
            raise InsufficientFrames(f"initialization needs {size} frames, got {len(clouds)}")

        self.graph = FrameGraph()
        pose = first_pose or Pose.identity()
        with ad.no_grad():
            for i, cloud in enumerate(clouds[:size]):
                node = FrameNode(cloud.frame_id, cloud, pose, fixed=(i == 0))
                _attach_features(self.network, node)
                self.graph.add_frame(node)
            for node in self.graph.frames:
                self._connect(node.frame_id)
            self.counters["frames_initialized"] += size
            self._run(self.config.init_iterations, "init")
        logger.info(f"Initialized window with {size} frames and {len(self.graph.undirected_edges())} edges")
        return self.graph

    def track(self, cloud: PointCloud) -> Optional[Tuple[int, Pose]]:
        if self.graph is None:
            raise InsufficientFrames("track called before initialize")
        with ad.no_grad():
            pose = motion_model_predict(self.graph.poses())
            node = FrameNode(cloud.frame_id, cloud, pose)
            _attach_features(self.network, node)
            self.graph.add_frame(node)
            self._connect(node.frame_id)
            self._run(self.config.track_iterations, "track")
        self.counters["frames_tracked"] += 1

        emitted = None
        if len(self.graph) > self.config.window_size:
            oldest, removed = self.graph.remove_frame(self.graph.frames[0].frame_id)
            self.counters["edges_removed"] += removed
            emitted = (oldest.frame_id, oldest.numeric_pose())
            self.trajectory.append(emitted)
            self.graph.frames[0].fixed = True
        return emitted

    def finish(self) -> List[Tuple[int, Pose]]:
        """Emit the poses still inside the window."""
        if self.graph is not None:
            for node in self.graph.frames:
                self.trajectory.append((node.frame_id, node.numeric_pose()))
            self.graph = None
        return self.trajectory

    def run(self, clouds: Sequence[PointCloud], first_pose: Pose = None) -> Trajectory:
        self.initialize(clouds, first_pose)
        for i, cloud in enumerate(clouds[self.config.window_size:]):
            self.track(cloud)
            logger.debug(f"tracked frame {cloud.frame_id} ({i + 1}/{len(clouds) - self.config.window_size})")
        self.finish()
        ids, poses = zip(*self.trajectory)
        return Trajectory(list(ids), list(poses))


# Training

@dataclass
class TrainingResult:
    epoch_losses: List[float] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)

    @property
    def initial_loss(self) -> Optional[float]:
        return self.epoch_losses[0] if self.epoch_losses else None

    @property
    def final_loss(self) -> Optional[float]:
        return self.epoch_losses[-1] if self.epoch_losses else None


def decay_every(epochs: int) -> int:
    """Milestone spacing scaled from the full-length schedule."""
    return max(1, int(round(epochs * Config.SCHEDULE_DECAY_EVERY / Config.SCHEDULE_EPOCHS)))


def flow_loss_tensor(graph: FrameGraph) -> Tensor:
    """Mean end-point error of every edge's predicted correspondences against the true point motion."""
    terms = []
    for edge in graph.edges:
        if edge.correspondence is None:
            raise DataError(f"edge {edge.key} has no predicted correspondences")
        points = graph.node(edge.source).cloud.points
        diff = edge.correspondence - Tensor(warp(points, graph.truth[edge.source], graph.truth[edge.target]))
        terms.append(ad.mean(ad.sqrt(ad.add_scalar(ad.sum_(diff * diff, axis=1), FLOW_EPS))))
    if not terms:
        return Tensor(0.0)
    return ad.mean(ad.stack(terms, axis=0))


def sample_loss(network: OdometryNetwork, sample: Sequence[Tuple[PointCloud, Pose]], unroll: int,
                ba_steps: int) -> Tensor:
    """Training objective of one sample after the unrolled operator.

    The pose loss, except for the flow-supervised head, which is trained on
    the end-point error of its correspondences.
    """
    graph = build_training_graph(sample, network, length=len(sample))
    iterate(graph, network.operator, unroll, ba_steps)
    if network.operator.settings.pose_head == "flow_supervised":
        return flow_loss_tensor(graph)
    return pose_loss_tensor([node.pose for node in graph.frames], graph.truth)


def evaluate_loss(network: OdometryNetwork, dataset: Sequence, unroll: int = None, ba_steps: int = None) -> float:
    unroll = unroll or Config.TRAIN_UNROLL
    ba_steps = ba_steps or Config.BA_STEPS
    with ad.no_grad():
        losses = [sample_loss(network, sample, unroll, ba_steps).item() for sample in dataset]
    return float(np.mean(losses)) if losses else 0.0


def _augment(sample, rng: np.random.Generator):
    return [random_rigid_augment(cloud, gt, rng) for cloud, gt in sample]


def train_toy(network: OdometryNetwork, dataset: Sequence[Sequence[Tuple[PointCloud, Pose]]], epochs: int,
              lr: float = None, unroll: int = None, ba_steps: int = None, augment: bool = True, seed: int = 0,
              run: "storage.RunStorage" = None) -> TrainingResult:
    """Adam on the sample loss through the unrolled operator, one graph per step."""
    lr = lr or Config.LEARNING_RATE
    unroll = unroll or Config.TRAIN_UNROLL
    ba_steps = ba_steps or Config.BA_STEPS
    optimizer = Adam(network.params, lr=lr)
    result = TrainingResult()
    step = decay_every(epochs)
    logger.info(f"Training the {network.operator.settings.pose_head} operator on {len(dataset)} samples for {epochs} epochs")

    if run is not None:
        stem = run.checkpoint_path("initial")
        network.save(stem)
        result.checkpoints.append(str(stem))

    for epoch in range(epochs):
        optimizer.lr = lr * Config.LR_DECAY ** (epoch // step)
        rng = np.random.default_rng([seed, epoch])
        losses = []
        for index, sample in enumerate(dataset):
            if augment:
                sample = _augment(sample, rng)
            with ad.Tape():
                loss = sample_loss(network, sample, unroll, ba_steps)
                value = loss.item()
                if not math.isfinite(value):
                    _dump_non_finite(run, epoch, index, value, network)
                    raise NonFiniteLoss(f"epoch {epoch} sample {index}: loss is {value}")
                network.params.zero_grad()
                ad.backward(loss)
            optimizer.step()
            losses.append(value)

        mean_loss = float(np.mean(losses)) if losses else 0.0
        result.epoch_losses.append(mean_loss)
        result.learning_rates.append(optimizer.lr)
        logger.info(f"Epoch {epoch + 1}/{epochs}: mean pose loss {mean_loss:.6f} (lr {optimizer.lr:.1e})")
        if run is not None:
            run.append_loss(epoch + 1, mean_loss, optimizer.lr)
            stem = run.checkpoint_path(f"epoch_{epoch + 1:03d}")
            network.save(stem)
            result.checkpoints.append(str(stem))
    return result


def _dump_non_finite(run, epoch: int, index: int, value: float, network: OdometryNetwork):
    logger.error(f"Non-finite loss {value} at epoch {epoch}, sample {index}")
    if run is None:
        return
    bad = [name for name, t in network.params.named() if not np.all(np.isfinite(t.data))]
    run.append_diagnostics({"event": "non_finite_loss", "epoch": epoch, "sample": index,
                            "loss": repr(value), "non_finite_parameters": bad})
