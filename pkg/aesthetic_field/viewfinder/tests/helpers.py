"""Fixtures and brute-force oracles shared by the test modules."""

import math
from fractions import Fraction

import numpy as np
from scipy.spatial.transform import Rotation

from viewfinder.geometry import CameraIntrinsics, CameraPose, PoseParams5, params_from_pose
from viewfinder.scene import Scene
from viewfinder.search import ViewEvaluation

SMALL_INTRINSICS = CameraIntrinsics(fx=30.0, fy=30.0, cx=15.5, cy=15.5, width=32, height=32)
WIDE_INTRINSICS = CameraIntrinsics(fx=60.0, fy=60.0, cx=31.5, cy=31.5, width=64, height=64)
IDENTITY_POSE = CameraPose(rotation=[1.0, 0.0, 0.0, 0.0], center=[0.0, 0.0, 0.0])


def random_scene(seed: int, count: int = 20, feature_dim: int = 3, spread: float = 0.8,
                 depth=(3.0, 5.0), layered: bool = False) -> Scene:
    """
    Splats scattered in front of the identity camera, well inside the image.

    layered spaces the depths evenly, so small pose changes never reorder them.
    """
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-spread, spread, count)
    ys = rng.uniform(-spread, spread, count)
    zs = rng.permutation(np.linspace(*depth, count)) if layered else rng.uniform(*depth, count)
    centers = np.column_stack([xs, ys, zs])
    rotations = Rotation.random(count, random_state=rng).as_quat()[:, [3, 0, 1, 2]] if count else np.zeros((0, 4))
    return Scene(
        centers=centers,
        scales=rng.uniform(0.08, 0.25, size=(count, 3)),
        rotations=rotations,
        opacities=rng.uniform(0.3, 0.9, size=count),
        colors=rng.uniform(0.0, 1.0, size=(count, 3)),
        features=rng.standard_normal((count, feature_dim)),
        feature_dim=feature_dim,
    )


def axis_scene(depths, scale: float = 0.2, feature_dim: int = 2) -> Scene:
    """Isotropic splats on the identity camera's optical axis"""
    count = len(depths)
    return Scene(
        centers=[[0.0, 0.0, z] for z in depths],
        scales=np.full((count, 3), scale),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (count, 1)),
        opacities=np.linspace(0.5, 0.8, count),
        colors=np.full((count, 3), 0.5),
        features=np.arange(count * feature_dim, dtype=float).reshape(count, feature_dim) / 10.0 + 0.1,
        feature_dim=feature_dim,
    )


def central_difference(function, x: np.ndarray, step: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    gradient = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        forward, backward = x.copy(), x.copy()
        forward[index] += step
        backward[index] -= step
        gradient[index] = (function(forward) - function(backward)) / (2.0 * step)
    return gradient


def assert_gradient_close(test, analytic, numeric, rtol: float, atol: float = 0.0):
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    for a, n in zip(analytic, numeric):
        test.assertLessEqual(abs(a - n), rtol * max(abs(a), abs(n)) + atol, f"analytic {a} vs numeric {n}")


def exact_pooling_matrix(source: int, target: int) -> np.ndarray:
    """Fractional overlap of every source pixel with every target cell, in exact arithmetic"""
    matrix = np.zeros((target, source))
    step = Fraction(source, target)
    for i in range(target):
        low, high = i * step, (i + 1) * step
        for j in range(source):
            overlap = min(Fraction(j + 1), high) - max(Fraction(j), low)
            if overlap > 0:
                matrix[i, j] = float(overlap / step)
    return matrix


def reference_ranks(values) -> np.ndarray:
    """Average ranks by counting; O(n^2)"""
    values = list(values)
    ranks = []
    for v in values:
        below = sum(1 for w in values if w < v)
        equal = sum(1 for w in values if w == v)
        ranks.append(below + (equal + 1) / 2.0)
    return np.array(ranks)


def reference_pearson(x, y) -> float:
    """Pearson correlation with compensated summation"""
    x = [float(v) for v in x]
    y = [float(v) for v in y]
    n = len(x)
    mean_x = math.fsum(x) / n
    mean_y = math.fsum(y) / n
    dx = [v - mean_x for v in x]
    dy = [v - mean_y for v in y]
    covariance = math.fsum(a * b for a, b in zip(dx, dy))
    return covariance / math.sqrt(math.fsum(a * a for a in dx) * math.fsum(b * b for b in dy))


class BumpObjective:
    """
    Smooth unimodal surrogate: a Gaussian bump in (t_x, t_y, t_z, yaw, pitch)
    peaking at 1.0 on peak. Every pose is viable unless viable is False.
    """

    def __init__(self, peak, widths=(1.0, 1.0, 1.0, 0.5, 0.5), viable: bool = True):
        self.peak = np.asarray(peak, dtype=np.float64)
        self.widths = np.asarray(widths, dtype=np.float64)
        self.viable = viable

    def _value(self, values: np.ndarray) -> float:
        z = (values - self.peak) / self.widths
        return float(np.exp(-0.5 * np.dot(z, z)))

    def evaluate(self, pose: CameraPose) -> ViewEvaluation:
        return ViewEvaluation(self._value(params_from_pose(pose, strict=False).as_array()), self.viable)

    def value_and_grad(self, params: PoseParams5):
        values = params.as_array()
        value = self._value(values)
        return value, -value * (values - self.peak) / self.widths ** 2
