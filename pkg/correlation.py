"""All-pair correlation volume and the two-stage patch-to-patch lookup."""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist

import autodiff as ad
import lie_se3
from autodiff import MLP, ParameterSet, Tensor
from config import Config
from errors import KTooLarge, ShapeMismatch
from lie_se3 import Pose, TensorPose
from pointcloud import PointCloud, knn

logger = logging.getLogger(__name__)

# what the lookup weight MLPs see for each neighbor
WEIGHT_INPUT = "distance"


def build_volume(f1: Tensor, f2: Tensor) -> Tensor:
    """V = F1·F2ᵀ / √D."""
    f1, f2 = ad.as_tensor(f1), ad.as_tensor(f2)
    if f1.ndim != 2 or f2.ndim != 2 or f1.shape[1] != f2.shape[1]:
        raise ShapeMismatch(f"correlation needs equal feature widths, got {f1.shape} and {f2.shape}")
    return ad.matmul(f1, ad.transpose(f2)) * (1.0 / math.sqrt(f1.shape[1]))


def warp(p1, t1: Pose, t2: Pose):
    """P12 = (T2 ∘ T1⁻¹)·P1."""
    return lie_se3.act(lie_se3.relative(t1, t2), p1)


def warp_tensor(points: np.ndarray, t1: TensorPose, t2: TensorPose) -> Tensor:
    return lie_se3.act_tensor(lie_se3.relative_tensor(t1, t2), points)


@dataclass
class LookupResult:
    features: Tensor
    stage1_weights: np.ndarray
    stage2_weights: np.ndarray
    stage1_indices: np.ndarray
    stage2_indices: np.ndarray


def _self_first_neighbors(points: np.ndarray, k: int):
    """k nearest neighbors within one cloud, the query itself always first."""
    sq = cdist(points, points, "sqeuclidean")
    np.fill_diagonal(sq, -1.0)
    order = np.argsort(sq, axis=1, kind="stable")[:, :k]
    dist = np.sqrt(np.maximum(np.take_along_axis(sq, order, axis=1), 0.0))
    return order, dist


class CorrelationLookup:
    """Learned neighbor weighting in two stages.

    Stage 1 gathers, for every warped point, the correlation with its k1
    nearest points in the second cloud and pools (correlation, distance)
    pairs with per-head softmax weights predicted from the distance.  Stage 2
    pools the stage-1 results over the k2 nearest warped points.  Only
    distances enter the weight MLPs, so the lookup is unchanged by a rigid
    motion applied to both clouds.
    """

    def __init__(self, params: ParameterSet, prefix: str, rng: np.random.Generator,
                 k1: int = None, k2: int = None, heads: int = None, hidden: int = None):
        self.k1 = k1 or Config.LOOKUP_K1
        self.k2 = k2 or Config.LOOKUP_K2
        self.heads = heads or Config.LOOKUP_HEADS
        hidden = hidden or Config.LOOKUP_HIDDEN
        self.stage1_mlp = MLP(params, f"{prefix}.stage1", [1, hidden, hidden, self.heads], rng)
        self.stage2_mlp = MLP(params, f"{prefix}.stage2", [1, hidden, hidden, self.heads], rng)

    @property
    def output_width(self) -> int:
        return 2 * self.heads + self.k1

    def hyperparameters(self):
        return {"k1": self.k1, "k2": self.k2, "heads": self.heads, "lookup_weight_input": WEIGHT_INPUT}

    def __call__(self, p12, p2, volume: Tensor, detailed: bool = False):
        q = p12.points if isinstance(p12, PointCloud) else np.asarray(p12, dtype=np.float64)
        t = p2.points if isinstance(p2, PointCloud) else np.asarray(p2, dtype=np.float64)
        n, m = len(q), len(t)
        if self.k1 > m or self.k2 > n:
            raise KTooLarge(f"lookup with k1={self.k1}, k2={self.k2} on {n}/{m} points")

        first = knn(q, t, self.k1)
        flat = ad.reshape(volume, (-1,))
        corr = ad.gather(flat, np.arange(n)[:, None] * m + first.indices)
        pairs = ad.concat([
            ad.reshape(corr, (n, self.k1, 1)),
            Tensor(first.distances[:, :, None]),
        ], axis=2)
        w1 = ad.softmax(self.stage1_mlp(Tensor(first.distances[:, :, None])), axis=1)
        stage1 = ad.matmul(ad.transpose(w1, (0, 2, 1)), pairs)

        idx2, dist2 = _self_first_neighbors(q, self.k2)
        w2 = ad.softmax(self.stage2_mlp(Tensor(dist2[:, :, None])), axis=1)
        grouped = ad.gather(stage1, idx2)
        shape = (n, self.k2, self.heads, 2)
        stage2 = ad.sum_(ad.expand(ad.reshape(w2, (n, self.k2, self.heads, 1)), shape) * grouped, axis=1)

        features = ad.concat([ad.reshape(stage2, (n, 2 * self.heads)), corr], axis=1)
        if detailed:
            return LookupResult(features, w1.data, w2.data, first.indices, idx2)
        return features


def lookup(p12, p2, volume: Tensor, weights: CorrelationLookup, detailed: bool = False):
    return weights(p12, p2, volume, detailed=detailed)
