"""Dual-stream radar feature extractor.

A cloud passes through three stages:

1. multi-scale set abstraction (ball query + shared MLP + max pool per scale),
2. class-aware clustering: FPS centers, cosine similarity to every point
   embedding, gated aggregation into the centers and dispatch back,
3. global self-attention over the joint features with linear, layer norm and
   a residual skip.

Two instances with separate weights serve as the feature extractor (input to
the correlation volume) and the context extractor (input to the operator).
"""

import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

import autodiff as ad
from autodiff import MLP, ParameterSet, Tensor
from config import Config
from errors import IoFailure
from pointcloud import NeighborIndex, PointCloud, ball_query, farthest_point_sample, knn

logger = logging.getLogger(__name__)

ROLES = ("feature", "context")
STREAMS = ("geometric", "clustering", "transformer")
LAYER_NORM_EPS = 1e-5
COSINE_EPS = 1e-12


@dataclass
class BackboneSettings:
    radii: Sequence[float] = field(default_factory=lambda: tuple(Config.SA_RADII))
    max_samples: int = Config.SA_MAX_SAMPLES
    sa_width: int = Config.SA_WIDTH
    embed_width: int = Config.EMBED_WIDTH
    num_clusters: int = Config.NUM_CLUSTERS
    center_neighbors: int = Config.CENTER_NEIGHBORS
    use_geometric: bool = True
    use_clustering: bool = True
    use_transformer: bool = True

    @classmethod
    def ablated(cls, disabled: Sequence[str] = (), **overrides) -> "BackboneSettings":
        """Settings with the named streams switched off."""
        unknown = sorted(set(disabled) - set(STREAMS))
        if unknown:
            raise ValueError(f"unknown backbone streams: {', '.join(unknown)}")
        switches = {f"use_{stream}": stream not in disabled for stream in STREAMS}
        return cls(**switches, **overrides)

    def enabled_streams(self) -> List[str]:
        return [stream for stream in STREAMS if getattr(self, f"use_{stream}")]

    @property
    def geo_width(self) -> int:
        return len(self.radii) * self.sa_width

    @property
    def joint_width(self) -> int:
        return self.geo_width + self.embed_width

    @property
    def output_width(self) -> int:
        return self.joint_width

    def hyperparameters(self) -> Dict:
        return {
            "radii": list(self.radii),
            "max_samples": self.max_samples,
            "sa_width": self.sa_width,
            "embed_width": self.embed_width,
            "num_clusters": self.num_clusters,
            "center_neighbors": self.center_neighbors,
            "streams": self.enabled_streams(),
        }


@dataclass
class CloudGeometry:
    """Weight-independent neighborhoods of one cloud, reusable across passes."""

    groups: List[NeighborIndex]
    center_indices: np.ndarray
    center_neighbors: np.ndarray


@dataclass
class ClusterState:
    center_indices: np.ndarray
    center_features: Tensor
    similarity: Tensor
    assignment: np.ndarray


@dataclass
class FeatureSet:
    geo: Tensor
    embed: Tensor
    class_aware: Tensor
    joint: Tensor
    out: Tensor
    cluster: Optional[ClusterState] = None
    attention: Optional[np.ndarray] = None


def centroid_seed(points: np.ndarray) -> int:
    """Index of the point nearest the centroid, lowest index on ties."""
    d = np.sum((points - points.mean(axis=0)) ** 2, axis=1)
    return int(np.argmin(d))


def prepare_geometry(cloud: PointCloud, settings: BackboneSettings) -> CloudGeometry:
    groups = [ball_query(cloud, cloud, r, settings.max_samples) for r in settings.radii]
    count = min(settings.num_clusters, len(cloud))
    centers = farthest_point_sample(cloud, count, centroid_seed(cloud.points))
    k = min(settings.center_neighbors, len(cloud))
    neighbors = knn(cloud.points[centers], cloud, k).indices
    return CloudGeometry(groups, centers, neighbors)


def _broadcast_rows(values: Tensor, width: int) -> Tensor:
    """(N,) -> (N, width) by repeating each value along the row."""
    return ad.expand(ad.reshape(values, (values.shape[0], 1)), (values.shape[0], width))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Rows of ``a`` against rows of ``b``: (C, d), (N, d) -> (C, N)."""

    def normalize(x):
        norm = ad.sqrt(ad.add_scalar(ad.sum_(x * x, axis=1), COSINE_EPS))
        return x / _broadcast_rows(norm, x.shape[1])

    return ad.matmul(normalize(a), ad.transpose(normalize(b)))


def _gate(cluster: ClusterState, alpha: Tensor, beta: Tensor) -> Tensor:
    """sigmoid(alpha * s_jm + beta) for each point m and its assigned center j."""
    n = cluster.similarity.shape[1]
    flat = ad.reshape(cluster.similarity, (-1,))
    own = ad.gather(flat, cluster.assignment * n + np.arange(n))
    return ad.sigmoid(alpha * own + beta)


def aggregate(cluster: ClusterState, f_p: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """Gated mean of the center feature and the features of its assigned points."""
    gate = _gate(cluster, ad.as_tensor(alpha), ad.as_tensor(beta))
    c, d = cluster.center_features.shape
    weighted = ad.scatter_add(_broadcast_rows(gate, d) * f_p, cluster.assignment, c)
    normalizer = ad.add_scalar(ad.scatter_add(gate, cluster.assignment, c), 1.0)
    return (cluster.center_features + weighted) / _broadcast_rows(normalizer, d)


def dispatch(f_p: Tensor, f_a: Tensor, cluster: ClusterState, alpha: Tensor, beta: Tensor) -> Tensor:
    gate = _gate(cluster, ad.as_tensor(alpha), ad.as_tensor(beta))
    return f_p + _broadcast_rows(gate, f_p.shape[1]) * ad.gather(f_a, cluster.assignment)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    centered = x - ad.expand(ad.mean(x, axis=-1, keepdims=True), x.shape)
    var = ad.mean(centered * centered, axis=-1, keepdims=True)
    scale = ad.expand(ad.sqrt(ad.add_scalar(var, LAYER_NORM_EPS)), x.shape)
    return (centered / scale) * gain + bias


class Backbone:
    """One extractor; its parameters live under ``prefix`` in a shared ParameterSet."""

    def __init__(self, params: ParameterSet, prefix: str, rng: np.random.Generator,
                 settings: BackboneSettings = None):
        self.params = params
        self.prefix = prefix
        self.settings = settings or BackboneSettings()
        s = self.settings

        self.sa_mlps = [
            MLP(params, f"{prefix}.sa{i}", [5, s.sa_width, s.sa_width], rng, final_activation=True)
            for i in range(len(s.radii))
        ]
        self.embed_mlp = MLP(params, f"{prefix}.embed", [5, s.embed_width, s.embed_width], rng)
        params.add(f"{prefix}.alpha", 1.0)
        params.add(f"{prefix}.beta", 0.0)

        width = s.joint_width
        for name in ("query", "key", "value", "out"):
            params.add_linear(f"{prefix}.attn.{name}", width, width, rng)
        params.add(f"{prefix}.attn.ln.gain", np.ones(width))
        params.add(f"{prefix}.attn.ln.bias", np.zeros(width))

    def multi_scale_geometric(self, cloud: PointCloud, geometry: CloudGeometry) -> Tensor:
        if not self.settings.use_geometric:
            return Tensor(np.zeros((len(cloud), self.settings.geo_width)))
        attrs = cloud.attributes()
        outputs = []
        for group, mlp in zip(geometry.groups, self.sa_mlps):
            relative = cloud.points[group.indices] - cloud.points[:, None, :]
            grouped = np.concatenate([relative, attrs[group.indices]], axis=2)
            outputs.append(ad.max_reduce(mlp(Tensor(grouped)), axis=1))
        return ad.concat(outputs, axis=1)

    def embed(self, cloud: PointCloud) -> Tensor:
        return self.embed_mlp(Tensor(cloud.records()))

    def cluster(self, f_p: Tensor, geometry: CloudGeometry) -> ClusterState:
        grouped = ad.gather(f_p, geometry.center_neighbors)
        centers = ad.mean(grouped, axis=1)
        similarity = cosine_similarity(centers, f_p)
        assignment = np.argmax(similarity.data, axis=0)
        return ClusterState(geometry.center_indices, centers, similarity, assignment)

    def global_transformer(self, f_l: Tensor, return_attention: bool = False):
        prefix = f"{self.prefix}.attn"
        q = ad.linear(self.params, f"{prefix}.query", f_l)
        k = ad.linear(self.params, f"{prefix}.key", f_l)
        v = ad.linear(self.params, f"{prefix}.value", f_l)
        weights = ad.softmax(ad.matmul(q, ad.transpose(k)), axis=-1)
        mixed = ad.linear(self.params, f"{prefix}.out", ad.matmul(weights, v))
        out = layer_norm(mixed, self.params[f"{prefix}.ln.gain"], self.params[f"{prefix}.ln.bias"]) + f_l
        if return_attention:
            return out, weights.data
        return out

    def extract(self, cloud: PointCloud, geometry: CloudGeometry = None) -> FeatureSet:
        geometry = geometry or prepare_geometry(cloud, self.settings)
        geo = self.multi_scale_geometric(cloud, geometry)
        f_p = self.embed(cloud)

        cluster = None
        f_c = f_p
        if self.settings.use_clustering:
            alpha, beta = self.params[f"{self.prefix}.alpha"], self.params[f"{self.prefix}.beta"]
            cluster = self.cluster(f_p, geometry)
            f_a = aggregate(cluster, f_p, alpha, beta)
            f_c = dispatch(f_p, f_a, cluster, alpha, beta)

        joint = ad.concat([geo, f_c], axis=1)
        attention = None
        out = joint
        if self.settings.use_transformer:
            out, attention = self.global_transformer(joint, return_attention=True)
        return FeatureSet(geo, f_p, f_c, joint, out, cluster, attention)


class BackbonePair:
    """Feature and context extractors with identical architecture."""

    def __init__(self, params: ParameterSet, rng: np.random.Generator, settings: BackboneSettings = None):
        self.settings = settings or BackboneSettings()
        self.extractors = {role: Backbone(params, role, rng, self.settings) for role in ROLES}

    @property
    def output_width(self) -> int:
        return self.settings.output_width

    def geometry(self, cloud: PointCloud) -> CloudGeometry:
        return prepare_geometry(cloud, self.settings)

    def extract(self, cloud: PointCloud, role: str, geometry: CloudGeometry = None) -> FeatureSet:
        if role not in self.extractors:
            raise ValueError(f"unknown role '{role}', expected one of {ROLES}")
        return self.extractors[role].extract(cloud, geometry)


def export_cluster_labels(path, cloud: PointCloud, cluster: ClusterState):
    """CSV with x, y, z and the assigned cluster of every point."""
    try:
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(["x", "y", "z", "cluster"])
            for point, label in zip(cloud.points, cluster.assignment):
                writer.writerow([repr(float(point[0])), repr(float(point[1])), repr(float(point[2])), int(label)])
    except OSError as e:
        raise IoFailure(f"cannot write cluster labels {path}: {e}") from e
    logger.info(f"Exported {len(cloud)} cluster labels to {path}")
