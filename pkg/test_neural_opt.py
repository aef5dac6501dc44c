"""Tests for the iteration operator and the differentiable bundle adjustment layer."""

import math
import os
import sys
import unittest

import numpy as np

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import autodiff as ad
import lie_se3
import neural_opt
from autodiff import ParameterSet, Tensor
from backbone import BackboneSettings
from correlation import CorrelationLookup, warp
from errors import AllFramesFixed, NotPositiveDefinite, ShapeMismatch
from lie_se3 import Pose
from neural_opt import BAEdge, Operator, OperatorSettings
from pointcloud import make_scene, preprocess, synth_sequence
from tracker import FrameGraph, FrameNode, OdometryNetwork

PURE_GN = OperatorSettings(damping=0.0)


def random_pose(rng, angle=0.5, shift=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return lie_se3.exp(np.concatenate([rng.uniform(-shift, shift, 3), axis * rng.uniform(-angle, angle)]))


def small_operator(seed=0, mode="per_axis"):
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    lookup = CorrelationLookup(params, "lookup", rng, k1=2, k2=2, heads=2, hidden=4)
    settings = OperatorSettings(hidden_width=4, flow_width=3, head_width=5, confidence_mode=mode)
    return Operator(params, rng, 8, settings, lookup), params


def tiny_graph(seed=0, points=24, pose_head="amba"):
    network = OdometryNetwork(seed, BackboneSettings(radii=(1.0, 2.0), max_samples=4, sa_width=4, embed_width=8,
                                                     num_clusters=2, center_neighbors=4),
                              OperatorSettings(hidden_width=8, flow_width=4, head_width=8, pose_head=pose_head),
                              lookup_k1=4, lookup_k2=2)
    sequence = synth_sequence(make_scene(seed=seed, frames=3, num_points=points))
    graph = FrameGraph()
    with ad.no_grad():
        for i, (cloud, _) in enumerate(sequence):
            cloud = preprocess(cloud, points)
            features, context, geometry = network.extract(cloud)
            graph.add_frame(FrameNode(i, cloud, sequence[0][1], i == 0, features, context, geometry))
    graph.add_undirected(0, 1)
    graph.add_undirected(1, 2)
    return network, graph


def set_linear(params, prefix, weight=None, bias=None):
    if weight is not None:
        params[f"{prefix}.weight"].data[:] = weight
    if bias is not None:
        params[f"{prefix}.bias"].data[:] = bias


class TestOperatorCell(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(1)
        self.operator, self.params = small_operator()
        self.n = 5

    def motion_inputs(self):
        cf = self.rng.normal(size=(self.n, self.operator.lookup.output_width))
        context = self.rng.normal(size=(self.n, 8))
        return cf, context

    def test_motion_feature_layout(self):
        cf, context = self.motion_inputs()
        flow = self.rng.normal(scale=0.2, size=(self.n, 3))
        mf = self.operator.encode_motion(cf, context, flow).data
        width = cf.shape[1]
        self.assertEqual(mf.shape[1], self.operator.motion_width)
        self.assertEqual(self.operator.motion_width, width + 8 + 3)
        np.testing.assert_array_equal(mf[:, :width], cf)
        np.testing.assert_array_equal(mf[:, width:width + 8], context)
        np.testing.assert_allclose(mf[:, width + 8:], self.operator.flow_encoder(Tensor(flow)).data)

    def test_zero_flow_gives_constant_rows(self):
        cf, context = self.motion_inputs()
        mf = self.operator.encode_motion(cf, context, np.zeros((self.n, 3))).data
        for row in mf[1:, -3:]:
            np.testing.assert_array_equal(row, mf[0, -3:])

    def test_motion_inputs_must_agree(self):
        cf, context = self.motion_inputs()
        with self.assertRaises(ShapeMismatch):
            self.operator.encode_motion(cf, context[:3], np.zeros((self.n, 3)))

    def gru_inputs(self):
        h = np.tanh(self.rng.normal(size=(self.n, 4)))
        mf = self.rng.normal(scale=0.5, size=(self.n, self.operator.motion_width))
        return h, mf

    def candidate(self, h, mf):
        hx = np.concatenate([h, mf], axis=1)
        p = self.params
        r = 1.0 / (1.0 + np.exp(-(hx @ p["operator.gru.r.weight"].data + p["operator.gru.r.bias"].data)))
        return np.tanh(np.concatenate([r * h, mf], axis=1) @ p["operator.gru.h.weight"].data
                       + p["operator.gru.h.bias"].data)

    def test_closed_update_gate_keeps_state(self):
        h, mf = self.gru_inputs()
        set_linear(self.params, "operator.gru.z", bias=-60.0)
        np.testing.assert_allclose(self.operator.gru_update(Tensor(h), Tensor(mf)).data, h, atol=1e-12)

    def test_open_update_gate_takes_candidate(self):
        h, mf = self.gru_inputs()
        set_linear(self.params, "operator.gru.z", bias=60.0)
        np.testing.assert_allclose(self.operator.gru_update(Tensor(h), Tensor(mf)).data,
                                   self.candidate(h, mf), atol=1e-12)

    def test_gru_against_scalar_loop(self):
        h, mf = self.gru_inputs()
        out = self.operator.gru_update(Tensor(h), Tensor(mf)).data
        p = self.params
        hx = np.concatenate([h, mf], axis=1)
        candidate = self.candidate(h, mf)
        wz, bz = p["operator.gru.z.weight"].data, p["operator.gru.z.bias"].data
        for i in range(self.n):
            for k in range(4):
                z = 1.0 / (1.0 + math.exp(-(sum(hx[i, j] * wz[j, k] for j in range(hx.shape[1])) + bz[k])))
                self.assertAlmostEqual(out[i, k], (1.0 - z) * h[i, k] + z * candidate[i, k], places=12)

    def test_zero_head_weights_leave_biases(self):
        for name, _ in list(self.params.named()):
            if name.startswith(("operator.revision", "operator.confidence")) and name.endswith("weight"):
                self.params[name].data[:] = 0.0
        h = self.rng.normal(size=(self.n, 4))
        revision, confidence = self.operator.predict_heads(Tensor(h))
        bias = self.params["operator.revision.2.bias"].data
        conf_bias = self.params["operator.confidence.2.bias"].data
        np.testing.assert_array_equal(revision.data, np.tile(bias, (self.n, 1)))
        np.testing.assert_allclose(confidence.data, np.tile(1.0 / (1.0 + np.exp(-conf_bias)), (self.n, 1)))

    def test_confidence_strictly_inside_unit_interval(self):
        h = self.rng.normal(scale=3.0, size=(50, 4))
        _, confidence = self.operator.predict_heads(Tensor(h))
        self.assertEqual(confidence.shape, (50, 3))
        self.assertTrue(np.all((confidence.data > 0.0) & (confidence.data < 1.0)))

    def test_confidence_modes(self):
        h = Tensor(self.rng.normal(size=(self.n, 4)))
        per_point, _ = small_operator(mode="per_point")
        _, confidence = per_point.predict_heads(h)
        np.testing.assert_array_equal(confidence.data[:, 0], confidence.data[:, 2])
        unweighted, _ = small_operator(mode="none")
        np.testing.assert_array_equal(unweighted.predict_heads(h)[1].data, np.ones((self.n, 3)))
        with self.assertRaises(ValueError):
            OperatorSettings(confidence_mode="per_edge")

    def test_head_gradients(self):
        def heads(h):
            revision, confidence = self.operator.predict_heads(h)
            return ad.sum_(revision) + ad.sum_(confidence)

        report = ad.gradcheck(heads, [self.rng.normal(size=(3, 4))], h=1e-6, tol=1e-6)
        self.assertTrue(report.passed, report.max_errors)


class TestResidualAndJacobians(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(2)
        self.points = self.rng.uniform(-5.0, 5.0, size=(8, 3))

    def test_consistent_poses_give_zero_residual(self):
        a, b = random_pose(self.rng), random_pose(self.rng)
        target = neural_opt.correspondence_target(self.points, a, b, np.zeros((8, 3)))
        np.testing.assert_array_equal(neural_opt.residual(self.points, a, b, target), np.zeros((8, 3)))

    def test_identity_relative_pose_returns_revision(self):
        pose = random_pose(self.rng)
        delta = np.array([0.1, -0.2, 0.05])
        target = neural_opt.correspondence_target(self.points, pose, pose, np.tile(delta, (8, 1)))
        np.testing.assert_allclose(neural_opt.residual(self.points, pose, pose, target), np.tile(delta, (8, 1)),
                                   atol=1e-12)

    def test_residual_matches_homogeneous_matrices(self):
        a, b = random_pose(self.rng), random_pose(self.rng)
        target = self.rng.normal(size=(8, 3))
        rel = b.matrix() @ np.linalg.inv(a.matrix())
        expected = target - (rel @ np.column_stack([self.points, np.ones(8)]).T).T[:, :3]
        np.testing.assert_allclose(neural_opt.residual(self.points, a, b, target), expected, atol=1e-10)

    def test_identity_jacobians(self):
        j_a, j_b = neural_opt.jacobians(self.points, Pose.identity(), Pose.identity())
        for i, p in enumerate(self.points):
            np.testing.assert_allclose(j_b[i], -np.hstack([np.eye(3), -lie_se3.hat(p)]))
        np.testing.assert_allclose(j_a, -j_b, atol=1e-15)

    def test_jacobians_against_central_differences(self):
        h = 1e-6
        worst = 0.0
        for _ in range(100):
            a, b = random_pose(self.rng), random_pose(self.rng)
            p = self.rng.uniform(-5.0, 5.0, size=(1, 3))
            target = self.rng.normal(size=(1, 3))
            j_a, j_b = neural_opt.jacobians(p, a, b)
            for k in range(6):
                step = np.zeros(6)
                step[k] = h
                num_a = (neural_opt.residual(p, lie_se3.retract(a, step), b, target)
                         - neural_opt.residual(p, lie_se3.retract(a, -step), b, target)) / (2 * h)
                num_b = (neural_opt.residual(p, a, lie_se3.retract(b, step), target)
                         - neural_opt.residual(p, a, lie_se3.retract(b, -step), target)) / (2 * h)
                for analytic, numeric in ((j_a[0, :, k], num_a[0]), (j_b[0, :, k], num_b[0])):
                    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
                    worst = max(worst, float(np.max(np.abs(analytic - numeric) / scale)))
        self.assertLess(worst, 1e-5)


class TestNormalEquations(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(3)

    def edge(self, points, target, weights, source=0, target_index=1):
        return BAEdge(source, target_index, points, Tensor(target), Tensor(weights))

    def test_matches_dense_assembly(self):
        p = self.rng.uniform(-3.0, 3.0, size=(10, 3))
        a, b = random_pose(self.rng), random_pose(self.rng)
        target = self.rng.normal(size=(10, 3))
        w = self.rng.uniform(0.1, 1.0, size=(10, 3))
        neq = neural_opt.assemble([a, b], [False, False], [self.edge(p, target, w)])

        j_a, j_b = neural_opt.jacobians(p, a, b)
        e = neural_opt.residual(p, a, b, target)
        j = np.concatenate([j_a, j_b], axis=2).reshape(-1, 12)
        weight = np.diag(w.reshape(-1))
        np.testing.assert_allclose(neq.hessian.data, j.T @ weight @ j, atol=1e-10)
        np.testing.assert_allclose(neq.gradient.data, -j.T @ weight @ e.reshape(-1), atol=1e-10)
        self.assertAlmostEqual(neq.cost, float(np.sum(w * e * e)), places=10)

    def test_identity_unit_weights_fixed_source(self):
        p = self.rng.uniform(-3.0, 3.0, size=(6, 3))
        neq = neural_opt.assemble([Pose.identity(), Pose.identity()], [True, False],
                                  [self.edge(p, p, np.ones((6, 3)))])
        expected = sum(np.hstack([np.eye(3), -lie_se3.hat(q)]).T @ np.hstack([np.eye(3), -lie_se3.hat(q)]) for q in p)
        np.testing.assert_allclose(neq.hessian.data, expected, atol=1e-12)
        np.testing.assert_allclose(neq.gradient.data, np.zeros(6), atol=1e-15)

    def test_zero_weights_leave_only_damping(self):
        p = self.rng.normal(size=(5, 3))
        neq = neural_opt.assemble([Pose.identity(), random_pose(self.rng)], [True, False],
                                  [self.edge(p, self.rng.normal(size=(5, 3)), np.zeros((5, 3)))],
                                  damping=1e-6, min_diagonal=1e-3)
        np.testing.assert_array_equal(neq.hessian.data, np.zeros((6, 6)))
        np.testing.assert_array_equal(neq.gradient.data, np.zeros(6))
        np.testing.assert_allclose(neq.damped.data, 1e-9 * np.eye(6))
        np.testing.assert_array_equal(neural_opt.solve(neq).data, np.zeros(6))

    def test_hessian_is_symmetric(self):
        for _ in range(10):
            poses = [random_pose(self.rng) for _ in range(3)]
            edges = [self.edge(self.rng.normal(size=(7, 3)), self.rng.normal(size=(7, 3)),
                               self.rng.uniform(0.1, 1.0, size=(7, 3)), s, t)
                     for s, t in ((0, 1), (1, 2), (2, 0))]
            h = neural_opt.assemble(poses, [True, False, False], edges).hessian.data
            self.assertEqual(h.shape, (12, 12))
            np.testing.assert_allclose(h, h.T, atol=1e-10)

    def test_all_frames_fixed(self):
        with self.assertRaises(AllFramesFixed):
            neural_opt.assemble([Pose.identity()] * 2, [True, True], [])


class TestSolve(unittest.TestCase):

    def test_identity_system(self):
        b = np.zeros(6)
        b[0] = 1.0
        np.testing.assert_array_equal(neural_opt.solve_system(Tensor(np.eye(6)), Tensor(b)).data, b)

    def test_random_spd_against_inverse(self):
        rng = np.random.default_rng(4)
        m = rng.normal(size=(12, 12))
        h = m @ m.T + 12.0 * np.eye(12)
        b = rng.normal(size=12)
        x = neural_opt.solve_system(Tensor(h), Tensor(b)).data
        np.testing.assert_allclose(x, np.linalg.inv(h) @ b, atol=1e-12)
        self.assertLess(np.max(np.abs(h @ x - b)), 1e-10 * (1.0 + np.max(np.abs(b))))

    def test_singular_system(self):
        with self.assertRaises(NotPositiveDefinite):
            neural_opt.solve_system(Tensor(np.diag([1.0, 1.0, 1.0, 1.0, 1.0, 0.0])), Tensor(np.ones(6)))

    def test_solve_gradients(self):
        rng = np.random.default_rng(5)
        m = rng.normal(size=(4, 4))
        h = m @ m.T + 4.0 * np.eye(4)
        cotangent = Tensor(rng.normal(size=4))
        # the factorization reads one triangle, so perturb H symmetrically
        report = ad.gradcheck(lambda s, bb: ad.sum_(neural_opt.solve_system(s + ad.transpose(s), bb) * cotangent),
                              [0.5 * h, rng.normal(size=4)], h=1e-6, tol=1e-6)
        self.assertTrue(report.passed, report.max_errors)


class TestAmbaStep(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(6)

    def exact_problem(self, n=40):
        truth = random_pose(self.rng, angle=math.radians(10.0), shift=0.5)
        p1 = self.rng.uniform(-10.0, 10.0, size=(n, 3))
        return truth, p1, lie_se3.act(truth, p1)

    def test_consistent_flow_is_a_fixed_point(self):
        a, b = random_pose(self.rng), random_pose(self.rng)
        p = self.rng.normal(size=(12, 3))
        edge = BAEdge(0, 1, p, Tensor(warp(p, a, b)), Tensor(np.ones((12, 3))))
        with ad.no_grad():
            poses, info = neural_opt.amba_step([a, b], [True, False], [edge], PURE_GN)
        self.assertLess(info.step_norm, 1e-12)
        np.testing.assert_allclose(poses[1].to_pose().matrix(), b.matrix(), atol=1e-12)

    def test_exact_flow_recovers_relative_pose(self):
        truth, p1, p2 = self.exact_problem(64)
        edge = BAEdge(0, 1, p1, Tensor(p2), Tensor(np.ones((64, 3))))
        poses = [Pose.identity(), Pose.identity()]
        costs = []
        with ad.no_grad():
            for _ in range(5):
                poses, info = neural_opt.amba_step(poses, [True, False], [edge], PURE_GN)
                costs.append(info.cost)
        self.assertLess(lie_se3.distance(poses[1].to_pose(), truth), 1e-6)
        for before, after in zip(costs, costs[1:]):
            self.assertLessEqual(after, before + 1e-12)

    def test_zero_weight_outliers_are_ignored(self):
        truth, p1, p2 = self.exact_problem(30)
        outliers = self.rng.uniform(-10.0, 10.0, size=(10, 3))
        clean = BAEdge(0, 1, p1, Tensor(p2), Tensor(np.ones((30, 3))))
        weights = np.vstack([np.ones((30, 3)), np.zeros((10, 3))])
        noisy = BAEdge(0, 1, np.vstack([p1, outliers]), Tensor(np.vstack([p2, outliers + 3.0])), Tensor(weights))
        start = [Pose.identity(), Pose.identity()]
        with ad.no_grad():
            a, _ = neural_opt.amba_step(start, [True, False], [clean], PURE_GN)
            b, _ = neural_opt.amba_step(start, [True, False], [noisy], PURE_GN)
        np.testing.assert_allclose(a[1].to_pose().matrix(), b[1].to_pose().matrix(), atol=1e-9)

    def test_relative_estimates_do_not_depend_on_world_frame(self):
        truth, p1, p2 = self.exact_problem(30)
        edge = BAEdge(0, 1, p1, Tensor(p2 + self.rng.normal(scale=0.01, size=p2.shape)), Tensor(np.ones((30, 3))))
        start = [Pose.identity(), lie_se3.exp([0.1, 0.0, 0.0, 0.0, 0.0, 0.02])]
        world = random_pose(self.rng, angle=1.0, shift=5.0)
        moved = [lie_se3.compose(p, world) for p in start]
        with ad.no_grad():
            for _ in range(3):
                start, _ = neural_opt.amba_step(start, [True, False], [edge], PURE_GN)
                moved, _ = neural_opt.amba_step(moved, [True, False], [edge], PURE_GN)
        rel = lie_se3.relative(start[0].to_pose(), start[1].to_pose())
        rel_moved = lie_se3.relative(moved[0].to_pose(), moved[1].to_pose())
        np.testing.assert_allclose(rel.matrix(), rel_moved.matrix(), atol=1e-8)

    def test_damping_escalates_on_failure(self):
        # one correspondence constrains only three of the six degrees of freedom
        p = np.array([[1.0, 2.0, 3.0]])
        edge = BAEdge(0, 1, p, Tensor(p + 0.1), Tensor(np.ones((1, 3))))
        settings = OperatorSettings(damping=1e-12, max_damping=1e-2, min_diagonal=1e-6)
        with ad.no_grad():
            poses, info = neural_opt.amba_step([Pose.identity(), Pose.identity()], [True, False], [edge], settings)
        self.assertGreaterEqual(info.damping, 1e-12)
        self.assertTrue(np.all(np.isfinite(poses[1].to_pose().matrix())))
        with self.assertRaises(NotPositiveDefinite):
            neural_opt.amba_step([Pose.identity(), Pose.identity()], [True, False], [edge], PURE_GN)


class TestAmbaBackward(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(7)
        self.points = self.rng.uniform(-4.0, 4.0, size=(6, 3))
        self.truth = random_pose(self.rng, angle=0.1, shift=0.3)
        self.base = lie_se3.act(self.truth, self.points)
        self.revision = self.rng.normal(scale=0.05, size=(6, 3))
        self.weights = self.rng.uniform(0.2, 1.0, size=(6, 3))

    def step(self, revision, weights):
        edge = BAEdge(0, 1, self.points, Tensor(self.base) + revision, weights)
        poses, _ = neural_opt.amba_step([Pose.identity(), Pose.identity()], [True, False], [edge], PURE_GN)
        return poses

    def analytic(self, upstream):
        with ad.Tape():
            revision, weights = Tensor(self.revision, True), Tensor(self.weights, True)
            poses = self.step(revision, weights)
            return neural_opt.amba_backward(poses[1:], [upstream], [revision, weights])

    def test_zero_upstream_gives_zero_gradients(self):
        grads = self.analytic((np.zeros((3, 3)), np.zeros(3)))
        for g in grads:
            np.testing.assert_array_equal(g, np.zeros_like(g))

    def test_matches_finite_differences(self):
        upstream = (self.rng.normal(size=(3, 3)), self.rng.normal(size=3))
        grads = self.analytic(upstream)

        def objective(revision, weights):
            with ad.no_grad():
                pose = self.step(Tensor(revision), Tensor(weights))[1]
            return float(np.sum(pose.rotation.data * upstream[0]) + np.sum(pose.translation.data * upstream[1]))

        h = 1e-6
        for which, (base, analytic) in enumerate(zip((self.revision, self.weights), grads)):
            numeric = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                plus, minus = base.copy(), base.copy()
                plus[idx] += h
                minus[idx] -= h
                args_plus = (plus, self.weights) if which == 0 else (self.revision, plus)
                args_minus = (minus, self.weights) if which == 0 else (self.revision, minus)
                numeric[idx] = (objective(*args_plus) - objective(*args_minus)) / (2 * h)
            scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
            self.assertLess(np.max(np.abs(analytic - numeric) / scale), 1e-4)


class TestIterate(unittest.TestCase):

    def test_zero_iterations_leave_poses(self):
        network, graph = tiny_graph()
        before = [node.pose for node in graph.frames]
        report = neural_opt.iterate(graph, network.operator, 0)
        self.assertEqual(report.iterations, 0)
        self.assertEqual([node.pose for node in graph.frames], before)

    def test_reports_every_bundle_adjustment_step(self):
        network, graph = tiny_graph()
        records = []
        with ad.no_grad():
            report = neural_opt.iterate(graph, network.operator, 2, 2, on_step=records.append)
        self.assertEqual(report.iterations, 2)
        self.assertEqual(report.ba_steps, 4)
        self.assertEqual([(r["iteration"], r["ba_step"]) for r in records], [(0, 0), (0, 1), (1, 0), (1, 1)])
        for edge in graph.edges:
            self.assertEqual(edge.flow.shape, (24, 3))
            self.assertTrue(np.all((edge.confidence.data > 0) & (edge.confidence.data < 1)))

    def test_fixed_frame_does_not_move(self):
        network, graph = tiny_graph()
        start = graph.frames[0].numeric_pose().matrix()
        with ad.no_grad():
            neural_opt.iterate(graph, network.operator, 1, 2)
        np.testing.assert_array_equal(graph.frames[0].numeric_pose().matrix(), start)

    def test_deterministic(self):
        results = []
        for _ in range(2):
            network, graph = tiny_graph(seed=3)
            with ad.no_grad():
                neural_opt.iterate(graph, network.operator, 2, 2)
            results.append(np.stack([node.numeric_pose().matrix() for node in graph.frames]))
        self.assertEqual(results[0].tobytes(), results[1].tobytes())

    def test_all_frames_fixed(self):
        network, graph = tiny_graph()
        for node in graph.frames:
            node.fixed = True
        with self.assertRaises(AllFramesFixed):
            neural_opt.iterate(graph, network.operator, 1)


class TestPoseHeads(unittest.TestCase):

    def test_unknown_head(self):
        with self.assertRaises(ValueError):
            OperatorSettings(pose_head="icp")

    def test_heads_follow_the_mode(self):
        network, _ = tiny_graph(pose_head="direct_regression")
        operator = network.operator
        self.assertIsNone(operator.revision_head)
        self.assertIn("operator.pose.2.weight", network.params)
        self.assertNotIn("operator.revision.0.weight", network.params)
        self.assertEqual(network.hyperparameters()["pose_head"], "direct_regression")
        with self.assertRaises(ValueError):
            operator.predict_heads(Tensor(np.zeros((3, 8))))
        with self.assertRaises(ValueError):
            tiny_graph()[0].operator.regress_twist(Tensor(np.zeros((3, 14))), Tensor(np.zeros((3, 8))))

    def test_direct_regression_retracts_by_the_bias(self):
        network, graph = tiny_graph(pose_head="direct_regression")
        last = network.operator.pose_head.layers - 1
        bias = np.array([0.4, -0.2, 0.1, 0.05, 0.0, -0.1])
        set_linear(network.params, f"operator.pose.{last}", weight=0.0, bias=bias)
        start = graph.frames[0].numeric_pose()
        with ad.no_grad():
            report = neural_opt.iterate(graph, network.operator, 1, 2)
        self.assertEqual((report.iterations, report.ba_steps), (1, 0))
        expected = lie_se3.compose(lie_se3.exp(bias * neural_opt.TWIST_SCALE), start)
        np.testing.assert_array_equal(graph.frames[0].numeric_pose().matrix(), start.matrix())
        for node in graph.frames[1:]:
            np.testing.assert_allclose(node.numeric_pose().matrix(), expected.matrix(), atol=1e-12)
        for edge in graph.edges:
            a, b = edge.source, edge.target
            p1 = graph.frames[a].cloud.points
            warped = warp(p1, graph.frames[a].numeric_pose(), graph.frames[b].numeric_pose())
            np.testing.assert_allclose(edge.flow, warped - p1, atol=1e-12)

    def test_flow_supervised_poses_carry_no_gradient(self):
        network, graph = tiny_graph(pose_head="flow_supervised")
        with ad.Tape():
            report = neural_opt.iterate(graph, network.operator, 1, 2)
            self.assertEqual(report.ba_steps, 2)
            for node in graph.frames:
                pose = node.pose
                self.assertFalse(isinstance(pose, lie_se3.TensorPose) and pose.requires_grad)
            for edge in graph.edges:
                self.assertTrue(edge.correspondence.requires_grad)

    def test_flow_supervised_solver_matches_bundle_adjustment(self):
        poses = {}
        for mode in ("amba", "flow_supervised"):
            network, graph = tiny_graph(seed=2, pose_head=mode)
            with ad.no_grad():
                neural_opt.iterate(graph, network.operator, 1, 2)
            poses[mode] = np.stack([node.numeric_pose().matrix() for node in graph.frames])
        np.testing.assert_allclose(poses["flow_supervised"], poses["amba"], atol=1e-12)


if __name__ == '__main__':
    unittest.main()
