"""Neural-optimization iteration operator.

Each operator iteration revises the point motion flow of every graph edge and
maps the revision to pose updates with weighted Gauss-Newton over all free
frames (two steps per iteration by default).  Everything between the network
heads and the updated poses is written in autodiff operations, with the
Cholesky solve registered as a custom node, so a pose loss back-propagates
exactly through the unrolled solver steps.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

import autodiff as ad
import lie_se3
from autodiff import MLP, ParameterSet, Tensor
from config import Config
from correlation import CorrelationLookup, build_volume, warp
from errors import AllFramesFixed, NotPositiveDefinite, ShapeMismatch
from lie_se3 import Pose, TensorPose

logger = logging.getLogger(__name__)

CONFIDENCE_MODES = ("per_axis", "per_point", "none")
POSE_HEADS = ("amba", "flow_supervised", "direct_regression")

# regressed twists are scaled before retraction
TWIST_SCALE = 0.1

# smallest admissible Cholesky pivot², relative to the largest diagonal entry
PIVOT_RATIO = 1e-12


@dataclass
class OperatorSettings:
    hidden_width: int = Config.HIDDEN_WIDTH
    flow_width: int = Config.FLOW_WIDTH
    head_width: int = Config.HEAD_WIDTH
    confidence_mode: str = Config.CONFIDENCE_MODE
    pose_head: str = Config.POSE_HEAD
    damping: float = Config.DAMPING
    max_damping: float = Config.MAX_DAMPING
    damping_factor: float = Config.DAMPING_FACTOR
    min_diagonal: float = Config.MIN_DIAGONAL

    def __post_init__(self):
        if self.confidence_mode not in CONFIDENCE_MODES:
            raise ValueError(f"unknown confidence mode '{self.confidence_mode}'")
        if self.pose_head not in POSE_HEADS:
            raise ValueError(f"unknown pose head '{self.pose_head}'")
        if self.damping < 0:
            raise ValueError(f"damping must be non-negative, got {self.damping}")


@dataclass
class EdgeState:
    """Directed edge ``source -> target`` and its recurrent state."""

    source: int
    target: int
    flow: Optional[np.ndarray] = None
    hidden: Optional[Tensor] = None
    revision: Optional[Tensor] = None
    confidence: Optional[Tensor] = None
    correspondence: Optional[Tensor] = None
    volume: Optional[Tensor] = None

    @property
    def key(self) -> Tuple[int, int]:
        return self.source, self.target


@dataclass
class BAEdge:
    """One edge of the least-squares problem; indices address the pose list."""

    source: int
    target: int
    points: np.ndarray
    target_points: Tensor
    weights: Tensor


@dataclass
class NormalEquations:
    hessian: Tensor
    gradient: Tensor
    free: List[int]
    residuals: List[np.ndarray]
    cost: float
    damping: float = 0.0
    damped: Optional[Tensor] = None


@dataclass
class StepInfo:
    cost: float
    step_norm: float
    damping: float
    attempts: int = 1


@dataclass
class IterationReport:
    iterations: int = 0
    ba_steps: int = 0
    steps: List[StepInfo] = field(default_factory=list)


# Residuals and Jacobians (closed form, numeric)

def correspondence_target(points1: np.ndarray, pose_a: Pose, pose_b: Pose, revision) -> np.ndarray:
    """P12* = warp(P1, current poses) + ΔFL."""
    return warp(points1, pose_a, pose_b) + np.asarray(revision, dtype=np.float64)


def residual(points1: np.ndarray, pose_a: Pose, pose_b: Pose, target: np.ndarray) -> np.ndarray:
    """E = P12* − T12·P1."""
    return np.asarray(target, dtype=np.float64) - warp(points1, pose_a, pose_b)


def jacobians(points1: np.ndarray, pose_a: Pose, pose_b: Pose) -> Tuple[np.ndarray, np.ndarray]:
    """Per-point 3×6 derivatives of the residual wrt left perturbations of T_a and T_b.

    J_b = −[I | −hat(q)] with q = T12·p, and J_a = R12·[I | −hat(p)] = −J_b·Adj(T12).
    """
    p = np.asarray(points1, dtype=np.float64)
    rel = lie_se3.relative(pose_a, pose_b)
    q = lie_se3.act(rel, p)
    n = len(p)
    eye = np.broadcast_to(np.eye(3), (n, 3, 3))
    j_b = np.concatenate([-eye, lie_se3.hat_batch(q)], axis=2)
    j_a = rel.rotation @ np.concatenate([eye, -lie_se3.hat_batch(p)], axis=2)
    return j_a, j_b


# Differentiable normal equations

def _edge_jacobians(points: np.ndarray, rel: TensorPose) -> Tuple[Tensor, Tensor, Tensor]:
    n = len(points)
    q = lie_se3.act_tensor(rel, points)
    eye = np.broadcast_to(np.eye(3), (n, 3, 3))
    j_b = ad.concat([Tensor(-eye), lie_se3.hat_tensor(q)], axis=2)
    local = np.concatenate([eye, -lie_se3.hat_batch(points)], axis=2)
    j_a = ad.matmul(rel.rotation, Tensor(local))
    return q, j_a, j_b


def _weighted(j: Tensor, w: Tensor) -> Tensor:
    n = j.shape[0]
    return ad.expand(ad.reshape(w, (n, 3, 1)), (n, 3, 6)) * j


def _block(ja: Tensor, wjb: Tensor) -> Tensor:
    return ad.sum_(ad.matmul(ad.transpose(ja, (0, 2, 1)), wjb), axis=0)


def _as_tensor_pose(pose) -> TensorPose:
    return pose if isinstance(pose, TensorPose) else TensorPose.constant(pose)


def assemble(poses: Sequence, fixed: Sequence[bool], edges: Sequence[BAEdge],
             damping: float = 0.0, min_diagonal: float = None) -> NormalEquations:
    """H = Σ JᵀWJ and b = −Σ JᵀWE over all edges, restricted to free frames."""
    min_diagonal = Config.MIN_DIAGONAL if min_diagonal is None else min_diagonal
    free = [i for i, is_fixed in enumerate(fixed) if not is_fixed]
    if not free:
        raise AllFramesFixed("every frame in the graph is fixed")
    slot = {frame: k for k, frame in enumerate(free)}
    f = len(free)
    poses = [_as_tensor_pose(p) for p in poses]

    h_blocks, h_index, b_blocks, b_index = [], [], [], []
    residuals = []
    cost = 0.0
    for edge in edges:
        rel = lie_se3.relative_tensor(poses[edge.source], poses[edge.target])
        q, j_a, j_b = _edge_jacobians(edge.points, rel)
        e = ad.as_tensor(edge.target_points) - q
        w = ad.as_tensor(edge.weights)
        we = ad.reshape(w * e, (e.shape[0], 3, 1))
        residuals.append(e.data.copy())
        cost += float(np.sum(w.data * e.data * e.data))

        terms = [(edge.source, j_a), (edge.target, j_b)]
        for row, j_row in terms:
            if row not in slot:
                continue
            b_blocks.append(-ad.reshape(ad.sum_(ad.matmul(ad.transpose(j_row, (0, 2, 1)), we), axis=0), (6,)))
            b_index.append(slot[row])
            for col, j_col in terms:
                if col not in slot:
                    continue
                h_blocks.append(_block(j_row, _weighted(j_col, w)))
                h_index.append(slot[row] * f + slot[col])

    if h_blocks:
        grid = ad.scatter_add(ad.stack(h_blocks, axis=0), np.array(h_index), f * f)
        hessian = ad.reshape(ad.transpose(ad.reshape(grid, (f, f, 6, 6)), (0, 2, 1, 3)), (6 * f, 6 * f))
        gradient = ad.reshape(ad.scatter_add(ad.stack(b_blocks, axis=0), np.array(b_index), f), (6 * f,))
    else:
        hessian = Tensor(np.zeros((6 * f, 6 * f)))
        gradient = Tensor(np.zeros(6 * f))

    neq = NormalEquations(hessian, gradient, free, residuals, cost)
    return with_damping(neq, damping, min_diagonal)


def with_damping(neq: NormalEquations, damping: float, min_diagonal: float = None) -> NormalEquations:
    """Add λ·max(diag(H), min_diagonal) to the diagonal; λ = 0 leaves H untouched."""
    min_diagonal = Config.MIN_DIAGONAL if min_diagonal is None else min_diagonal
    h = neq.hessian
    n = h.shape[0]
    if damping > 0:
        diag_index = np.arange(n) * (n + 1)
        diagonal = ad.gather(ad.reshape(h, (-1,)), diag_index)
        clamped = ad.add_scalar(ad.relu(ad.add_scalar(diagonal, -min_diagonal)), min_diagonal)
        damped = h + ad.reshape(ad.scatter_add(clamped * damping, diag_index, n * n), (n, n))
    else:
        damped = h
    return NormalEquations(neq.hessian, neq.gradient, neq.free, neq.residuals, neq.cost, damping, damped)


def solve_system(h, b) -> Tensor:
    """x = H⁻¹b by Cholesky; the backward pass reuses the factor.

    With y = H⁻¹·dL/dx the gradients are dL/db = y and dL/dH = −y·xᵀ.
    """
    factors = {}

    def forward(h_val, b_val):
        try:
            factor = cho_factor(h_val, lower=True, check_finite=True)
        except (LinAlgError, ValueError) as e:
            raise NotPositiveDefinite(f"Cholesky factorization failed: {e}") from e
        pivots = np.diag(factor[0]) ** 2
        if np.min(pivots) <= PIVOT_RATIO * max(float(np.max(np.abs(np.diag(h_val)))), 1e-300):
            raise NotPositiveDefinite(f"Cholesky pivot {np.min(pivots):.3e} is numerically zero")
        factors["cho"] = factor
        return cho_solve(factor, b_val)

    def backward(g, x, h_val, b_val):
        y = cho_solve(factors["cho"], g)
        return -np.outer(y, x), y

    return ad.custom_node(forward, backward, h, b, name="cholesky_solve")


def solve(neq: NormalEquations) -> Tensor:
    return solve_system(neq.damped if neq.damped is not None else neq.hessian, neq.gradient)


def amba_step(poses: Sequence, fixed: Sequence[bool], edges: Sequence[BAEdge],
              settings: OperatorSettings = None) -> Tuple[List[TensorPose], StepInfo]:
    """One damped Gauss-Newton step followed by left retraction of every free pose."""
    settings = settings or OperatorSettings()
    poses = [_as_tensor_pose(p) for p in poses]
    neq = assemble(poses, fixed, edges, 0.0, settings.min_diagonal)

    damping = settings.damping
    attempts = 0
    while True:
        attempts += 1
        try:
            dx = solve(with_damping(neq, damping, settings.min_diagonal))
            break
        except NotPositiveDefinite:
            if damping <= 0 or damping >= settings.max_damping:
                raise
            damping = min(damping * settings.damping_factor, settings.max_damping)
            logger.debug(f"Cholesky failed, raising damping to {damping:.1e}")

    updated = list(poses)
    for k, frame in enumerate(neq.free):
        updated[frame] = lie_se3.retract_tensor(poses[frame], dx[6 * k:6 * k + 6])
    info = StepInfo(neq.cost, float(np.linalg.norm(dx.data)), damping, attempts)
    return updated, info


def amba_backward(poses_out: Sequence[TensorPose], upstream: Sequence[Tuple[np.ndarray, np.ndarray]],
                  inputs: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of ``inputs`` given upstream gradients on each output pose.

    ``upstream[i]`` holds (dL/dR, dL/dt) for ``poses_out[i]``.
    """
    seeds = []
    for pose, (g_rot, g_trans) in zip(poses_out, upstream):
        if pose.rotation.requires_grad:
            seeds.append(ad.sum_(pose.rotation * Tensor(g_rot)))
        if pose.translation.requires_grad:
            seeds.append(ad.sum_(pose.translation * Tensor(g_trans)))
    if not seeds:
        return [np.zeros_like(t.data) for t in inputs]
    total = seeds[0]
    for s in seeds[1:]:
        total = total + s
    grads = ad.backward(total, accumulate=False)
    return [grads.get(t, np.zeros_like(t.data)) for t in inputs]


# The learned update operator

class Operator:
    """Motion encoder and GRU plus the heads of the configured pose mode.

    ``amba`` and ``flow_supervised`` predict a flow revision and a confidence
    per point; ``direct_regression`` replaces both with a head that regresses
    one twist per edge from pooled correlation features.
    """

    def __init__(self, params: ParameterSet, rng: np.random.Generator, context_width: int,
                 settings: OperatorSettings = None, lookup: CorrelationLookup = None):
        self.params = params
        self.settings = settings or OperatorSettings()
        s = self.settings
        self.lookup = lookup or CorrelationLookup(params, "lookup", rng)
        self.context_width = context_width
        if s.hidden_width > context_width:
            raise ShapeMismatch(f"hidden width {s.hidden_width} exceeds context width {context_width}")

        self.flow_encoder = MLP(params, "operator.flow", [3, s.flow_width, s.flow_width], rng)
        self.motion_width = self.lookup.output_width + context_width + s.flow_width
        gru_in = s.hidden_width + self.motion_width
        for gate in ("z", "r", "h"):
            params.add_linear(f"operator.gru.{gate}", gru_in, s.hidden_width, rng)

        self.revision_head = self.confidence_head = self.pose_head = None
        if s.pose_head == "direct_regression":
            pooled = s.hidden_width + self.lookup.output_width
            self.pose_head = MLP(params, "operator.pose", [pooled, s.head_width, s.head_width, 6], rng)
        else:
            self.revision_head = MLP(params, "operator.revision", [s.hidden_width, s.head_width, s.head_width, 3], rng)
            conf_out = 1 if s.confidence_mode == "per_point" else 3
            self.confidence_head = MLP(params, "operator.confidence",
                                       [s.hidden_width, s.head_width, s.head_width, conf_out], rng)

    def hyperparameters(self) -> Dict:
        s = self.settings
        return {"hidden_width": s.hidden_width, "flow_width": s.flow_width, "head_width": s.head_width,
                "confidence_mode": s.confidence_mode, "pose_head": s.pose_head,
                "context_width": self.context_width, **self.lookup.hyperparameters()}

    def initial_hidden(self, context: Tensor) -> Tensor:
        return ad.tanh(context[:, 0:self.settings.hidden_width])

    def encode_motion(self, cf: Tensor, context: Tensor, flow) -> Tensor:
        """MF = concat(CF, C1, MLP(FL))."""
        cf, context, flow = ad.as_tensor(cf), ad.as_tensor(context), ad.as_tensor(flow)
        if not cf.shape[0] == context.shape[0] == flow.shape[0]:
            raise ShapeMismatch(f"motion inputs disagree on point count: {cf.shape}, {context.shape}, {flow.shape}")
        return ad.concat([cf, context, self.flow_encoder(flow)], axis=1)

    def gru_update(self, h: Tensor, mf: Tensor) -> Tensor:
        hx = ad.concat([h, mf], axis=1)
        z = ad.sigmoid(ad.linear(self.params, "operator.gru.z", hx))
        r = ad.sigmoid(ad.linear(self.params, "operator.gru.r", hx))
        candidate = ad.tanh(ad.linear(self.params, "operator.gru.h", ad.concat([r * h, mf], axis=1)))
        return (1.0 - z) * h + z * candidate

    def predict_heads(self, h: Tensor) -> Tuple[Tensor, Tensor]:
        if self.revision_head is None:
            raise ValueError(f"pose head '{self.settings.pose_head}' predicts no flow revision")
        revision = self.revision_head(h)
        n = h.shape[0]
        mode = self.settings.confidence_mode
        if mode == "none":
            return revision, Tensor(np.ones((n, 3)))
        confidence = ad.sigmoid(self.confidence_head(h))
        if mode == "per_point":
            confidence = ad.expand(confidence, (n, 3))
        return revision, confidence

    def regress_twist(self, cf: Tensor, h: Tensor) -> Tensor:
        """One left increment for the edge's target frame."""
        if self.pose_head is None:
            raise ValueError(f"pose head '{self.settings.pose_head}' does not regress poses")
        pooled = ad.mean(ad.concat([ad.as_tensor(cf), h], axis=1), axis=0, keepdims=True)
        return ad.reshape(self.pose_head(pooled), (6,)) * TWIST_SCALE


def regress_poses(poses: Sequence[TensorPose], fixed: Sequence[bool],
                  twists: Dict[int, List[Tensor]]) -> List[TensorPose]:
    """Retract every free pose by the mean twist of the edges pointing at it."""
    updated = list(poses)
    for frame, values in twists.items():
        if fixed[frame]:
            continue
        step = values[0] if len(values) == 1 else ad.mean(ad.stack(values, axis=0), axis=0)
        updated[frame] = lie_se3.retract_tensor(poses[frame], step)
    return updated


def _bundle_adjust(poses, fixed, ba_edges, ba_steps, settings, report, iteration, on_step):
    for step in range(ba_steps):
        poses, info = amba_step(poses, fixed, ba_edges, settings)
        report.ba_steps += 1
        report.steps.append(info)
        if on_step is not None:
            on_step({"iteration": iteration, "ba_step": step, "cost": info.cost,
                     "step_norm": info.step_norm, "damping": info.damping})
    return poses


def _detached(edges: Sequence[BAEdge]) -> List[BAEdge]:
    return [BAEdge(e.source, e.target, e.points, e.target_points.detach(), e.weights.detach()) for e in edges]


def iterate(graph, operator: Operator, n_iters: int, ba_steps: int = None,
            on_step: Callable[[Dict], None] = None) -> IterationReport:
    """Run ``n_iters`` operator iterations over every edge of ``graph``.

    ``graph`` provides ``frames`` (nodes with ``frame_id``, ``cloud``,
    ``pose``, ``fixed``, ``features`` and ``context``) and ``edges``
    (``EdgeState``).  Node poses are replaced with the updated tensors.

    With the ``flow_supervised`` head the same Gauss-Newton steps run on
    detached correspondences, so no gradient reaches the poses; the
    ``direct_regression`` head skips bundle adjustment altogether.
    """
    ba_steps = Config.BA_STEPS if ba_steps is None else ba_steps
    mode = operator.settings.pose_head
    report = IterationReport()
    if n_iters <= 0:
        return report

    fixed = [node.fixed for node in graph.frames]
    if all(fixed):
        raise AllFramesFixed("every frame in the graph is fixed")
    index = {node.frame_id: k for k, node in enumerate(graph.frames)}

    for it in range(n_iters):
        poses = [_as_tensor_pose(node.pose) for node in graph.frames]
        numeric = [p.to_pose() for p in poses]
        ba_edges = []
        twists: Dict[int, List[Tensor]] = {}
        for edge in graph.edges:
            a, b = index[edge.source], index[edge.target]
            src, dst = graph.frames[a], graph.frames[b]
            p1 = src.cloud.points
            p12 = warp(p1, numeric[a], numeric[b])
            if edge.volume is None:
                edge.volume = build_volume(src.features, dst.features)
            if edge.hidden is None:
                edge.hidden = operator.initial_hidden(src.context)
            if edge.flow is None:
                edge.flow = p12 - p1

            cf = operator.lookup(p12, dst.cloud.points, edge.volume)
            mf = operator.encode_motion(cf, src.context, edge.flow)
            edge.hidden = operator.gru_update(edge.hidden, mf)
            if mode == "direct_regression":
                twists.setdefault(b, []).append(operator.regress_twist(cf, edge.hidden))
                continue
            edge.revision, edge.confidence = operator.predict_heads(edge.hidden)
            edge.correspondence = Tensor(p12) + edge.revision
            ba_edges.append(BAEdge(a, b, p1, edge.correspondence, edge.confidence))

        if mode == "direct_regression":
            poses = regress_poses(poses, fixed, twists)
        elif mode == "flow_supervised":
            with ad.no_grad():
                constants = [TensorPose.constant(p) for p in numeric]
                poses = _bundle_adjust(constants, fixed, _detached(ba_edges), ba_steps, operator.settings,
                                       report, it, on_step)
        else:
            poses = _bundle_adjust(poses, fixed, ba_edges, ba_steps, operator.settings, report, it, on_step)

        for node, pose in zip(graph.frames, poses):
            node.pose = pose
        for edge in graph.edges:
            a, b = index[edge.source], index[edge.target]
            p1 = graph.frames[a].cloud.points
            if mode == "direct_regression":
                edge.flow = warp(p1, poses[a].to_pose(), poses[b].to_pose()) - p1
            else:
                edge.flow = edge.correspondence.data - p1
        report.iterations += 1
        if report.steps:
            logger.debug(f"iteration {it + 1}/{n_iters}: cost {report.steps[-1].cost:.6f}")
    return report
