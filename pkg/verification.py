"""Finite-difference verification suites.

Each suite compares analytic derivatives with central differences and returns
named checks.  ``inject_sign_error`` flips one analytic sign inside the
primitive and Jacobian suites so the harness can prove it catches mistakes.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

import autodiff as ad
import lie_se3
import neural_opt
from autodiff import Tensor
from backbone import BackboneSettings
from correlation import warp
from evaluation import pose_loss_tensor
from lie_se3 import Pose
from neural_opt import BAEdge, OperatorSettings
from pointcloud import make_scene, preprocess, synth_sequence
from tracker import FrameGraph, FrameNode, OdometryNetwork

logger = logging.getLogger(__name__)

SCOPES = ("primitives", "jacobians", "amba", "pipeline")

JACOBIAN_TOLERANCE = 1e-5
AMBA_TOLERANCE = 1e-4
PIPELINE_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error)) and self.max_error <= self.tolerance


@dataclass
class SuiteResult:
    name: str
    checks: List[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


@dataclass
class VerificationReport:
    suites: List[SuiteResult] = field(default_factory=list)
    injected: bool = False

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)

    def failures(self) -> List[str]:
        return [f"{s.name}.{c.name}" for s in self.suites for c in s.checks if not c.passed]

    def to_dict(self) -> Dict:
        return {
            "passed": self.passed,
            "injected_sign_error": self.injected,
            "suites": [
                {
                    "name": s.name,
                    "passed": s.passed,
                    "seconds": round(s.seconds, 3),
                    "checks": [{"name": c.name, "max_error": c.max_error, "tolerance": c.tolerance,
                                "passed": c.passed} for c in s.checks],
                }
                for s in self.suites
            ],
        }

    def table(self) -> str:
        lines = []
        for s in self.suites:
            lines.append(f"[{'PASS' if s.passed else 'FAIL'}] {s.name} ({s.seconds:.2f}s)")
            for c in s.checks:
                mark = "ok" if c.passed else "FAILED"
                lines.append(f"    {c.name:<32} {c.max_error:.3e} (tol {c.tolerance:.0e}) {mark}")
        return "\n".join(lines)


def _from_gradcheck(name: str, report: ad.GradcheckReport) -> CheckResult:
    return CheckResult(name, max(report.max_errors) if report.max_errors else 0.0, report.tolerance)


def _random_pose(rng: np.random.Generator, angle: float = 0.5, shift: float = 1.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    phi = axis * rng.uniform(-angle, angle)
    return lie_se3.exp(np.concatenate([rng.uniform(-shift, shift, 3), phi]))


# primitives

def _flawed_tanh(x: Tensor) -> Tensor:
    """tanh as a custom node whose derivative has the wrong sign."""
    return ad.custom_node(np.tanh, lambda g, out, a: -g * (1.0 - out * out), x, name="flawed_tanh")


def primitives_suite(rng: np.random.Generator, inject_sign_error: bool = False) -> SuiteResult:
    suite = SuiteResult("primitives")
    tanh = _flawed_tanh if inject_sign_error else ad.tanh
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3, 5))
    weights = rng.normal(size=(4, 5))
    index = np.array([2, 0, 3, 3, 1])

    cases: Dict[str, tuple] = {
        "matmul": (lambda x, y: ad.sum_(ad.matmul(x, y) * Tensor(weights)), [a, b]),
        "softmax": (lambda x: ad.sum_(ad.softmax(ad.matmul(x, Tensor(b)), axis=-1) * Tensor(weights)), [a]),
        "tanh_sigmoid": (lambda x: ad.sum_(tanh(x) * ad.sigmoid(x)), [a]),
        "exp_log_sqrt": (lambda x: ad.sum_(ad.log(ad.add_scalar(ad.exp(x), 1.0)) * ad.sqrt(ad.add_scalar(x * x, 1.0))), [a]),
        "gather_scatter": (lambda x: ad.sum_(ad.scatter_add(ad.gather(x, index), index[::-1].copy(), 4) * Tensor(a)), [a]),
        "max_reduce": (lambda x: ad.sum_(ad.max_reduce(x, axis=1) * Tensor(np.arange(1.0, 5.0))), [a]),
        "exp_log_se3": (lambda xi: ad.sum_(lie_se3.log_tensor(lie_se3.exp_tensor(xi)) * Tensor(np.arange(1.0, 7.0))),
                        [np.concatenate([rng.normal(size=3), rng.normal(size=3) * 0.4])]),
        "so3_coefficients": (lambda s: ad.sum_(lie_se3.so3_coefficients(s) * Tensor([1.0, -2.0, 3.0, 5.0])),
                             [np.array(0.3)]),
        "so3_coefficients_small": (lambda s: ad.sum_(lie_se3.so3_coefficients(s) * Tensor([1.0, -2.0, 3.0, 5.0])),
                                   [np.array(2e-3)]),
    }
    for name, (fn, inputs) in cases.items():
        suite.checks.append(_from_gradcheck(name, ad.gradcheck(fn, inputs, h=1e-6, tol=JACOBIAN_TOLERANCE)))
    return suite


# closed-form residual Jacobians

def _numeric_jacobian(points: np.ndarray, pose_a: Pose, pose_b: Pose, target: np.ndarray, which: str,
                      h: float = 1e-6) -> np.ndarray:
    n = len(points)
    jac = np.zeros((n, 3, 6))
    for k in range(6):
        step = np.zeros(6)
        step[k] = h
        if which == "a":
            plus = neural_opt.residual(points, lie_se3.retract(pose_a, step), pose_b, target)
            minus = neural_opt.residual(points, lie_se3.retract(pose_a, -step), pose_b, target)
        else:
            plus = neural_opt.residual(points, pose_a, lie_se3.retract(pose_b, step), target)
            minus = neural_opt.residual(points, pose_a, lie_se3.retract(pose_b, -step), target)
        jac[:, :, k] = (plus - minus) / (2.0 * h)
    return jac


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale))


def jacobian_suite(rng: np.random.Generator, cases: int = 100, inject_sign_error: bool = False) -> SuiteResult:
    suite = SuiteResult("jacobians")
    worst_a = worst_b = 0.0
    for _ in range(cases):
        pose_a, pose_b = _random_pose(rng), _random_pose(rng)
        points = rng.uniform(-5.0, 5.0, size=(1, 3))
        target = rng.normal(size=(1, 3))
        j_a, j_b = neural_opt.jacobians(points, pose_a, pose_b)
        if inject_sign_error:
            j_b = j_b.copy()
            j_b[:, :, 3:] *= -1.0
        worst_a = max(worst_a, _relative_error(j_a, _numeric_jacobian(points, pose_a, pose_b, target, "a")))
        worst_b = max(worst_b, _relative_error(j_b, _numeric_jacobian(points, pose_a, pose_b, target, "b")))
    suite.checks.append(CheckResult("source_pose", worst_a, JACOBIAN_TOLERANCE))
    suite.checks.append(CheckResult("target_pose", worst_b, JACOBIAN_TOLERANCE))
    return suite


# differentiable bundle adjustment

def _amba_problem(rng: np.random.Generator, frames: int, points: int = 12):
    truth = [Pose.identity()] + [_random_pose(rng, angle=0.1, shift=0.3) for _ in range(frames - 1)]
    start = [Pose.identity()] + [lie_se3.retract(t, rng.normal(scale=0.02, size=6)) for t in truth[1:]]
    pairs = [(i, j) for i in range(frames) for j in range(frames) if i != j and abs(i - j) == 1]
    if frames > 2:
        pairs.append((0, frames - 1))
    clouds = [rng.uniform(-4.0, 4.0, size=(points, 3)) for _ in range(frames)]
    revision = np.stack([rng.normal(scale=0.05, size=(points, 3)) for _ in pairs])
    weights = np.stack([rng.uniform(0.2, 1.0, size=(points, 3)) for _ in pairs])
    bases = np.stack([warp(clouds[i], start[i], start[j]) for i, j in pairs])
    return start, pairs, clouds, bases, revision, weights


def _amba_loss_fn(start, pairs, clouds, bases, weight_rot, weight_trans, steps: int = 2):
    fixed = [i == 0 for i in range(len(start))]

    def loss(revision: Tensor, weights: Tensor) -> Tensor:
        edges = [BAEdge(i, j, clouds[i], Tensor(bases[e]) + revision[e], weights[e])
                 for e, (i, j) in enumerate(pairs)]
        poses = list(start)
        for _ in range(steps):
            poses, _ = neural_opt.amba_step(poses, fixed, edges, OperatorSettings(damping=0.0))
        total = None
        for k, pose in enumerate(poses[1:]):
            term = ad.sum_(pose.rotation * Tensor(weight_rot[k])) + ad.sum_(pose.translation * Tensor(weight_trans[k]))
            total = term if total is None else total + term
        return total

    return loss


def amba_suite(rng: np.random.Generator) -> SuiteResult:
    suite = SuiteResult("amba")
    for frames in (2, 3):
        start, pairs, clouds, bases, revision, weights = _amba_problem(rng, frames)
        weight_rot = rng.normal(size=(frames - 1, 3, 3))
        weight_trans = rng.normal(size=(frames - 1, 3))
        fn = _amba_loss_fn(start, pairs, clouds, bases, weight_rot, weight_trans)
        report = ad.gradcheck(fn, [revision, weights], h=1e-6, tol=AMBA_TOLERANCE)
        suite.checks.append(CheckResult(f"{frames}_frames_flow", report.max_errors[0], AMBA_TOLERANCE))
        suite.checks.append(CheckResult(f"{frames}_frames_weights", report.max_errors[1], AMBA_TOLERANCE))

    # exact flow, Gauss-Newton must land on the true relative pose
    truth = _random_pose(rng, angle=math.radians(10.0), shift=0.5)
    p1 = rng.uniform(-10.0, 10.0, size=(64, 3))
    edge = BAEdge(0, 1, p1, Tensor(lie_se3.act(truth, p1)), Tensor(np.ones((64, 3))))
    poses = [Pose.identity(), Pose.identity()]
    with ad.no_grad():
        for _ in range(5):
            poses, _ = neural_opt.amba_step(poses, [True, False], [edge], OperatorSettings(damping=0.0))
    error = lie_se3.distance(poses[1].to_pose(), truth)
    suite.checks.append(CheckResult("exact_flow_recovery", error, 1e-6))
    return suite


# one operator iteration end to end

def tiny_network(seed: int = 0):
    backbone = BackboneSettings(radii=(1.0, 2.0), max_samples=4, sa_width=4, embed_width=8,
                                num_clusters=2, center_neighbors=4)
    operator = OperatorSettings(hidden_width=8, flow_width=4, head_width=8)
    return OdometryNetwork(seed, backbone, operator, lookup_k1=4, lookup_k2=2)


def pipeline_suite(rng: np.random.Generator, points: int = 24) -> SuiteResult:
    """Pose loss after one iteration against the last layers of both heads."""
    suite = SuiteResult("pipeline")
    network = tiny_network(int(rng.integers(1 << 16)))
    scene = make_scene(seed=int(rng.integers(1 << 16)), frames=2, num_points=points)
    sequence = [(preprocess(c, points), gt) for c, gt in synth_sequence(scene)]
    with ad.no_grad():
        extracted = [network.extract(cloud) for cloud, _ in sequence]
    truth = [gt for _, gt in sequence]

    names = ["operator.revision.2.weight", "operator.confidence.2.bias"]
    originals = [network.params[n] for n in names]

    def loss(rev_weight: Tensor, conf_bias: Tensor) -> Tensor:
        for name, leaf in zip(names, (rev_weight, conf_bias)):
            network.params[name] = leaf
        try:
            graph = FrameGraph()
            for i, ((cloud, _), (features, context, geometry)) in enumerate(zip(sequence, extracted)):
                graph.add_frame(FrameNode(i, cloud, truth[0], i == 0, features, context, geometry))
            graph.add_undirected(0, 1)
            neural_opt.iterate(graph, network.operator, 1, 2)
            return pose_loss_tensor([node.pose for node in graph.frames], truth)
        finally:
            for name, tensor in zip(names, originals):
                network.params[name] = tensor

    report = ad.gradcheck(loss, [t.data for t in originals], h=1e-6, tol=PIPELINE_TOLERANCE)
    suite.checks.append(CheckResult("revision_head", report.max_errors[0], PIPELINE_TOLERANCE))
    suite.checks.append(CheckResult("confidence_head", report.max_errors[1], PIPELINE_TOLERANCE))
    return suite


def run_verification(scope: str = "all", seed: int = 0, inject_sign_error: bool = False,
                     jacobian_cases: int = 100) -> VerificationReport:
    scopes = SCOPES if scope == "all" else (scope,)
    unknown = [s for s in scopes if s not in SCOPES]
    if unknown:
        raise ValueError(f"unknown gradcheck scope '{scope}', expected 'all' or one of {SCOPES}")

    report = VerificationReport(injected=inject_sign_error)
    runners: Dict[str, Callable[[np.random.Generator], SuiteResult]] = {
        "primitives": lambda rng: primitives_suite(rng, inject_sign_error),
        "jacobians": lambda rng: jacobian_suite(rng, jacobian_cases, inject_sign_error),
        "amba": amba_suite,
        "pipeline": pipeline_suite,
    }
    for name in scopes:
        started = time.perf_counter()
        suite = runners[name](np.random.default_rng([seed, SCOPES.index(name)]))
        suite.seconds = time.perf_counter() - started
        report.suites.append(suite)
        logger.info(f"Suite {name}: {'passed' if suite.passed else 'FAILED'} in {suite.seconds:.2f}s")
    return report
