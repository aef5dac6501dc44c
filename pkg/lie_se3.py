"""SO(3)/SE(3) operations with closed-form exponential and logarithm maps.

Conventions used across the code base:

* ``Pose`` maps world coordinates into sensor coordinates,
  ``x_sensor = R @ x_world + t``.  The relative pose between two frames is
  ``T12 = T2 ∘ T1⁻¹`` and carries frame-1 points into frame 2.
* Twists are packed translation first, ``xi = (rho, phi)``.
* Increments are applied by left multiplication, ``retract(T, dxi) = Exp(dxi) ∘ T``.

The second half of the module mirrors the group operations on autodiff
tensors (``TensorPose``) so pose updates can be differentiated end to end.
"""

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.linalg import polar

import autodiff as ad
from errors import AngleNearPi, ShapeMismatch

TAYLOR_THRESHOLD = 1e-6
PI_MARGIN = 1e-6
REORTHONORMALIZE_EVERY = 100

# above this angle the rotation axis is read from the symmetric part
_SYMMETRIC_AXIS_ANGLE = 2.5


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform, world -> sensor."""

    rotation: np.ndarray
    translation: np.ndarray
    chain: int = field(default=0, compare=False)

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> "Pose":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape not in ((4, 4), (3, 4)):
            raise ShapeMismatch(f"pose matrix must be 3x4 or 4x4, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def __repr__(self):
        return f"Pose(xi={np.array2string(log(self), precision=4)})"


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix with ``hat(v) @ w == cross(v, w)``."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def hat_batch(v) -> np.ndarray:
    """Row-wise ``hat`` of an N×3 array, returning N×3×3."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _coefficients(theta: float):
    """Rodrigues coefficients A = sin/θ, B = (1-cos)/θ², C = (θ-sin)/θ³."""
    if theta < TAYLOR_THRESHOLD:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = math.sin(theta), math.cos(theta)
    return s / theta, (1.0 - c) / (theta * theta), (theta - s) / (theta ** 3)


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(phi))
    a, b, _ = _coefficients(theta)
    k = hat(phi)
    return np.eye(3) + a * k + b * (k @ k)


def left_jacobian(phi) -> np.ndarray:
    """V(phi), the left Jacobian of SO(3); maps rho to the SE(3) translation."""
    phi = np.asarray(phi, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(phi))
    _, b, c = _coefficients(theta)
    k = hat(phi)
    return np.eye(3) + b * k + c * (k @ k)


def left_jacobian_inverse(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(phi))
    k = hat(phi)
    if theta < TAYLOR_THRESHOLD:
        d = 1.0 / 12.0 + theta * theta / 720.0
    else:
        d = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / (theta * theta)
    return np.eye(3) - 0.5 * k + d * (k @ k)


def rotation_angle(rotation) -> float:
    """Angle of a rotation matrix from the trace, argument clamped to [-1, 1]."""
    c = (np.trace(rotation) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, c))))


def so3_log(rotation) -> np.ndarray:
    r = np.asarray(rotation, dtype=np.float64)
    v = vee(r - r.T)
    sin_theta = 0.5 * float(np.linalg.norm(v))
    cos_theta = (np.trace(r) - 1.0) / 2.0
    theta = math.atan2(sin_theta, cos_theta)

    if theta >= math.pi - PI_MARGIN:
        raise AngleNearPi(f"rotation angle {theta:.9f} is within {PI_MARGIN} of pi")
    if theta < TAYLOR_THRESHOLD:
        return 0.5 * (1.0 + theta * theta / 6.0) * v
    if theta > _SYMMETRIC_AXIS_ANGLE:
        sym = 0.5 * (r + r.T) - cos_theta * np.eye(3)
        col = int(np.argmax(np.diag(sym)))
        axis = sym[:, col] / math.sqrt(sym[col, col] * (1.0 - cos_theta))
        if float(axis @ v) < 0.0:
            axis = -axis
        return theta * axis / np.linalg.norm(axis)
    return (theta / (2.0 * sin_theta)) * v


def exp(xi) -> Pose:
    """Exp: se(3) -> SE(3)."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), left_jacobian(phi) @ rho)


def log(pose: Pose) -> np.ndarray:
    """Log: SE(3) -> se(3), principal branch."""
    phi = so3_log(pose.rotation)
    rho = left_jacobian_inverse(phi) @ pose.translation
    return np.concatenate([rho, phi])


def orthonormalize(rotation) -> np.ndarray:
    """Closest rotation matrix via polar decomposition."""
    u, _ = polar(np.asarray(rotation, dtype=np.float64))
    if np.linalg.det(u) < 0:
        u = -u
    return u


def compose(a: Pose, b: Pose) -> Pose:
    rotation = a.rotation @ b.rotation
    translation = a.rotation @ b.translation + a.translation
    chain = max(a.chain, b.chain) + 1
    if chain >= REORTHONORMALIZE_EVERY:
        rotation = orthonormalize(rotation)
        chain = 0
    return Pose(rotation, translation, chain)


def inverse(pose: Pose) -> Pose:
    rt = pose.rotation.T
    return Pose(rt, -rt @ pose.translation, pose.chain)


def relative(first: Pose, second: Pose) -> Pose:
    """T12 = T2 ∘ T1⁻¹, carrying frame-1 coordinates into frame 2."""
    return compose(second, inverse(first))


def act(pose: Pose, points):
    """Apply ``R p + t`` to every point of an N×3 array or a point cloud."""
    if isinstance(points, np.ndarray) or isinstance(points, (list, tuple)):
        p = np.asarray(points, dtype=np.float64)
        return p @ pose.rotation.T + pose.translation
    return points.with_points(act(pose, points.points))


def adjoint(pose: Pose) -> np.ndarray:
    """6×6 adjoint for (rho, phi) ordering: [[R, hat(t) R], [0, R]]."""
    r, t = pose.rotation, pose.translation
    adj = np.zeros((6, 6))
    adj[:3, :3] = r
    adj[:3, 3:] = hat(t) @ r
    adj[3:, 3:] = r
    return adj


def retract(pose: Pose, dxi) -> Pose:
    """Left retraction Exp(dxi) ∘ T."""
    return compose(exp(dxi), pose)


def distance(a: Pose, b: Pose) -> float:
    """Norm of the twist separating two poses."""
    return float(np.linalg.norm(log(compose(inverse(b), a))))


# Differentiable counterparts

_HAT_GENERATOR = np.zeros((3, 9))
_HAT_GENERATOR[2, 1] = -1.0
_HAT_GENERATOR[1, 2] = 1.0
_HAT_GENERATOR[2, 3] = 1.0
_HAT_GENERATOR[0, 5] = -1.0
_HAT_GENERATOR[1, 6] = -1.0
_HAT_GENERATOR[0, 7] = 1.0

# series used by the differentiable coefficients below this squared angle
_SERIES_LIMIT = 1e-2

_A_SERIES = (1.0, -1.0 / 6.0, 1.0 / 120.0, -1.0 / 5040.0, 1.0 / 362880.0)
_B_SERIES = (0.5, -1.0 / 24.0, 1.0 / 720.0, -1.0 / 40320.0, 1.0 / 3628800.0)
_C_SERIES = (1.0 / 6.0, -1.0 / 120.0, 1.0 / 5040.0, -1.0 / 362880.0, 1.0 / 39916800.0)
_D_SERIES = (1.0 / 12.0, 1.0 / 720.0, 1.0 / 30240.0, 1.0 / 1209600.0, 1.0 / 47900160.0)


def _series(coeffs, s):
    value = sum(c * s ** k for k, c in enumerate(coeffs))
    slope = sum(k * c * s ** (k - 1) for k, c in enumerate(coeffs) if k > 0)
    return value, slope


def _coefficients_with_slopes(s: float):
    """A, B, C, D as functions of s = θ² and their derivatives d/ds."""
    if s < _SERIES_LIMIT:
        a, da = _series(_A_SERIES, s)
        b, db = _series(_B_SERIES, s)
        c, dc = _series(_C_SERIES, s)
        d, dd = _series(_D_SERIES, s)
    else:
        theta = math.sqrt(s)
        sn, cs = math.sin(theta), math.cos(theta)
        a = sn / theta
        b = (1.0 - cs) / s
        c = (1.0 - a) / s
        d = (1.0 - a / (2.0 * b)) / s
        da = (cs - a) / (2.0 * s)
        db = (0.5 * a - b) / s
        dc = (-da - c) / s
        dd = (-(da * b - a * db) / (2.0 * b * b) - d) / s
    return np.array([a, b, c, d]), np.array([da, db, dc, dd])


def so3_coefficients(s: ad.Tensor) -> ad.Tensor:
    """Differentiable (A, B, C, D) of the squared rotation angle ``s``."""

    def forward(s_val):
        return _coefficients_with_slopes(float(s_val))[0]

    def backward(g, out, s_val):
        _, slopes = _coefficients_with_slopes(float(s_val))
        return (np.asarray(float(g @ slopes)).reshape(np.shape(s_val)),)

    return ad.custom_node(forward, backward, s, name="so3_coefficients")


def _half_angle_ratio(theta: float):
    """f = θ / (2 sin θ) and q = f'(θ) / sin θ."""
    if theta < 0.1:
        t2 = theta * theta
        f = 0.5 + t2 / 12.0 + 7.0 * t2 ** 2 / 720.0 + 31.0 * t2 ** 3 / 30240.0 + 127.0 * t2 ** 4 / 1209600.0
        fp_over_theta = 1.0 / 6.0 + 7.0 * t2 / 180.0 + 31.0 * t2 ** 2 / 5040.0 + 127.0 * t2 ** 3 / 151200.0
        sin_over_theta, _ = _series(_A_SERIES, t2)
        return f, fp_over_theta / sin_over_theta
    sn, cs = math.sin(theta), math.cos(theta)
    f = theta / (2.0 * sn)
    fp = (sn - theta * cs) / (2.0 * sn * sn)
    return f, fp / sn


def so3_log_tensor(rotation: ad.Tensor) -> ad.Tensor:
    """Differentiable rotation logarithm, φ = θ/(2 sin θ) · vee(R - Rᵀ)."""

    def forward(r):
        c = min(1.0, max(-1.0, (np.trace(r) - 1.0) / 2.0))
        theta = math.acos(c)
        if theta >= math.pi - PI_MARGIN:
            raise AngleNearPi(f"rotation angle {theta:.9f} is within {PI_MARGIN} of pi")
        f, _ = _half_angle_ratio(theta)
        return f * vee(r - r.T)

    def backward(g, out, r):
        c = min(1.0, max(-1.0, (np.trace(r) - 1.0) / 2.0))
        theta = math.acos(c)
        f, q = _half_angle_ratio(theta)
        v = vee(r - r.T)
        grad = np.zeros((3, 3))
        grad[2, 1] += f * g[0]
        grad[1, 2] -= f * g[0]
        grad[0, 2] += f * g[1]
        grad[2, 0] -= f * g[1]
        grad[1, 0] += f * g[2]
        grad[0, 1] -= f * g[2]
        grad += np.eye(3) * (-0.5 * q * float(g @ v))
        return (grad,)

    return ad.custom_node(forward, backward, rotation, name="so3_log")


def hat_tensor(v: ad.Tensor) -> ad.Tensor:
    """Batched hat operator on tensors of shape (..., 3)."""
    flat = ad.reshape(v, (-1, 3))
    out = ad.matmul(flat, ad.Tensor(_HAT_GENERATOR))
    return ad.reshape(out, v.shape[:-1] + (3, 3))


def _matvec(m: ad.Tensor, v: ad.Tensor) -> ad.Tensor:
    return ad.reshape(ad.matmul(m, ad.reshape(v, (3, 1))), (3,))


class TensorPose:
    """World -> sensor pose whose rotation and translation are autodiff tensors."""

    def __init__(self, rotation, translation):
        self.rotation = ad.as_tensor(rotation)
        self.translation = ad.as_tensor(translation)

    @classmethod
    def constant(cls, pose: Pose) -> "TensorPose":
        return cls(ad.Tensor(pose.rotation.copy()), ad.Tensor(pose.translation.copy()))

    @property
    def requires_grad(self) -> bool:
        return self.rotation.requires_grad or self.translation.requires_grad

    def to_pose(self) -> Pose:
        return Pose(self.rotation.data, self.translation.data)

    def detach(self) -> "TensorPose":
        return TensorPose(self.rotation.detach(), self.translation.detach())


def exp_tensor(xi: ad.Tensor) -> TensorPose:
    rho, phi = xi[0:3], xi[3:6]
    coeffs = so3_coefficients(ad.sum_(phi * phi))
    k = hat_tensor(phi)
    k2 = ad.matmul(k, k)
    eye = ad.Tensor(np.eye(3))
    rotation = eye + coeffs[0] * k + coeffs[1] * k2
    v = eye + coeffs[1] * k + coeffs[2] * k2
    return TensorPose(rotation, _matvec(v, rho))


def log_tensor(pose: TensorPose) -> ad.Tensor:
    phi = so3_log_tensor(pose.rotation)
    coeffs = so3_coefficients(ad.sum_(phi * phi))
    k = hat_tensor(phi)
    v_inv = ad.Tensor(np.eye(3)) - 0.5 * k + coeffs[3] * ad.matmul(k, k)
    rho = _matvec(v_inv, pose.translation)
    return ad.concat([rho, phi], axis=0)


def compose_tensor(a: TensorPose, b: TensorPose) -> TensorPose:
    rotation = ad.matmul(a.rotation, b.rotation)
    translation = _matvec(a.rotation, b.translation) + a.translation
    return TensorPose(rotation, translation)


def inverse_tensor(pose: TensorPose) -> TensorPose:
    rt = ad.transpose(pose.rotation)
    return TensorPose(rt, -_matvec(rt, pose.translation))


def relative_tensor(first: TensorPose, second: TensorPose) -> TensorPose:
    return compose_tensor(second, inverse_tensor(first))


def act_tensor(pose: TensorPose, points: Union[np.ndarray, ad.Tensor]) -> ad.Tensor:
    """Apply a tensor pose to N×3 points: ``points @ Rᵀ + t``."""
    return ad.matmul(ad.as_tensor(points), ad.transpose(pose.rotation)) + pose.translation


def retract_tensor(pose: TensorPose, dxi: ad.Tensor) -> TensorPose:
    return compose_tensor(exp_tensor(dxi), pose)
