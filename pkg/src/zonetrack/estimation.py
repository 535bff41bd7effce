"""Range/bearing sensing model and the target-position EKF.

Each robot measures the range and bearing to every target.  Measurement
noise grows with distance: the information (inverse variance) of a channel
is ``a * exp(-lambda * distance)``.  The team's stacked measurement matrix
is block-diagonal over targets, so the covariance update can be written in
information form, ``P_new^-1 = P_pred^-1 + H^T R^-1 H``.  The trace of the
updated covariance, evaluated at hypothetical robot positions, is the
tracking objective the planner minimizes.

Robot orientation is carried in the state but does not influence the
information content (the bearing Jacobian with respect to the target is
orientation-free), so planning treats robots as oriented at 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .chance import DegenerateDirectionError

# Rotation by -pi/2; maps the line-of-sight vector to the bearing gradient.
_ROT_NEG_90 = np.array([[0.0, 1.0], [-1.0, 0.0]])


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return -((-theta + math.pi) % (2.0 * math.pi) - math.pi)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RobotState:
    """Planar robot pose: position (m) and heading (rad, wrapped to (-pi, pi])."""

    position: np.ndarray
    orientation: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(2)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", wrap_angle(float(self.orientation)))


@dataclass(frozen=True)
class TargetBelief:
    """Stacked Gaussian belief over all target positions (2N mean, 2Nx2N cov)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        if mean.size % 2 != 0:
            raise ValueError("mean must stack 2-vectors (even length)")
        if cov.shape != (mean.size, mean.size):
            raise ValueError("cov shape must match mean length")
        if mean.size:
            if np.abs(cov - cov.T).max() > 1e-9:
                raise ValueError("cov must be symmetric")
            if np.linalg.eigvalsh(cov).min() < -1e-10:
                raise ValueError("cov must be positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def num_targets(self) -> int:
        return self.mean.size // 2

    def __eq__(self, other):
        if not isinstance(other, TargetBelief):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(
            self.cov, other.cov
        )


@dataclass(frozen=True)
class SensorParams:
    """Distance-decay noise model: information = a * exp(-lambda * d)."""

    a_d: float = 1.0
    lambda_d: float = 0.05
    a_theta: float = 1.0
    lambda_theta: float = 0.05

    def __post_init__(self):
        for name in ("a_d", "lambda_d", "a_theta", "lambda_theta"):
            if not (getattr(self, name) > 0):
                raise ValueError(f"{name} must be > 0")


@dataclass(frozen=True)
class TargetModel:
    """Linear target process: mean' = A mean, cov' = A cov A^T + Q."""

    A: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.A, dtype=float)
        q = np.asarray(self.Q, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or q.shape != a.shape:
            raise ValueError("A and Q must be square with matching shapes")
        if q.size:
            if np.abs(q - q.T).max() > 1e-9:
                raise ValueError("Q must be symmetric")
            if np.linalg.eigvalsh(q).min() < -1e-10:
                raise ValueError("Q must be positive semi-definite")
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "Q", q)


# ---------------------------------------------------------------------------
# Measurement model
# ---------------------------------------------------------------------------


def range_bearing(robot: RobotState, target_pos) -> tuple[float, float]:
    """Range and bearing from a robot to a target position.

    Bearing is measured relative to the robot heading via the two-argument
    arctangent and wrapped to (-pi, pi].  Raises DegenerateDirectionError
    for coincident positions.
    """
    target = np.asarray(target_pos, dtype=float).reshape(2)
    dx = target[0] - robot.position[0]
    dy = target[1] - robot.position[1]
    d = math.hypot(dx, dy)
    if d < 1e-12:
        raise DegenerateDirectionError("robot and target positions coincide")
    theta = wrap_angle(math.atan2(dy, dx) - robot.orientation)
    return d, theta


def noise_information(distance: float, a: float, lam: float) -> float:
    """Inverse measurement variance at the given distance: a * exp(-lam * d)."""
    if distance < 0:
        raise ValueError("distance must be >= 0")
    return a * math.exp(-lam * distance)


def target_jacobian(robot: RobotState, target_pos) -> np.ndarray:
    """2x2 Jacobian of (range, bearing) with respect to the target position.

    With p = robot_position - target_position, the rows are
    ``-p^T / ||p||`` (range) and ``(Jp)^T / ||p||^2`` (bearing), J the
    rotation by -pi/2.
    """
    target = np.asarray(target_pos, dtype=float).reshape(2)
    p = robot.position - target
    norm_sq = float(p @ p)
    if norm_sq < 1e-24:
        raise DegenerateDirectionError("robot and target positions coincide")
    norm = math.sqrt(norm_sq)
    return np.vstack([-p / norm, (_ROT_NEG_90 @ p) / norm_sq])


def team_matrices(
    robots, target_means, sensors: SensorParams
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked measurement matrix H (2MN x 2N) and diagonal R^-1 (2MN x 2MN).

    H is block-diagonal over targets; the block for target j stacks the
    per-robot 2x2 Jacobians vertically.  R^-1 carries the paired
    range/bearing information entries in the same row order.
    """
    robots = list(robots)
    means = np.asarray(target_means, dtype=float).reshape(-1, 2)
    m, n = len(robots), means.shape[0]
    if m < 1 or n < 1:
        raise ValueError("need at least one robot and one target")
    h = np.zeros((2 * m * n, 2 * n))
    r_inv_diag = np.zeros(2 * m * n)
    for j in range(n):
        for i, robot in enumerate(robots):
            row = 2 * (j * m + i)
            h[row : row + 2, 2 * j : 2 * j + 2] = target_jacobian(robot, means[j])
            d = float(np.linalg.norm(robot.position - means[j]))
            r_inv_diag[row] = noise_information(d, sensors.a_d, sensors.lambda_d)
            r_inv_diag[row + 1] = noise_information(
                d, sensors.a_theta, sensors.lambda_theta
            )
    return h, np.diag(r_inv_diag)


def _information_blocks(positions: np.ndarray, means: np.ndarray, sensors) -> np.ndarray:
    """Per-target 2x2 information increments, vectorized over robots/targets."""
    p = positions[:, None, :] - means[None, :, :]  # (M, N, 2)
    dist_sq = np.einsum("mni,mni->mn", p, p)
    if dist_sq.size and dist_sq.min() < 1e-24:
        raise DegenerateDirectionError("robot coincides with a target mean")
    dist = np.sqrt(dist_sq)
    h_d = -p / dist[..., None]
    h_th = np.stack([p[..., 1], -p[..., 0]], axis=-1) / dist_sq[..., None]
    info_d = sensors.a_d * np.exp(-sensors.lambda_d * dist)
    info_th = sensors.a_theta * np.exp(-sensors.lambda_theta * dist)
    return np.einsum("mn,mni,mnj->nij", info_d, h_d, h_d) + np.einsum(
        "mn,mni,mnj->nij", info_th, h_th, h_th
    )


def _information_matrix(positions: np.ndarray, means: np.ndarray, sensors) -> np.ndarray:
    n = means.shape[0]
    blocks = _information_blocks(positions, means, sensors)
    info = np.zeros((2 * n, 2 * n))
    for j in range(n):
        info[2 * j : 2 * j + 2, 2 * j : 2 * j + 2] = blocks[j]
    return info


# ---------------------------------------------------------------------------
# EKF
# ---------------------------------------------------------------------------


def ekf_predict(belief: TargetBelief, model: TargetModel) -> TargetBelief:
    """Propagate the target belief one step through the linear process model."""
    if model.A.shape[0] != belief.mean.size:
        raise ValueError("model dimension does not match belief")
    mean = model.A @ belief.mean
    cov = model.A @ belief.cov @ model.A.T + model.Q
    return TargetBelief(mean, 0.5 * (cov + cov.T))


def _updated_cov(pred: TargetBelief, positions: np.ndarray, sensors) -> np.ndarray:
    if pred.num_targets == 0:
        return pred.cov.copy()
    try:
        p_inv = np.linalg.inv(pred.cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("predicted covariance is singular") from exc
    means = pred.mean.reshape(-1, 2)
    info = _information_matrix(positions, means, sensors)
    cov = np.linalg.inv(p_inv + info)
    return 0.5 * (cov + cov.T)


def _robot_positions(robots) -> np.ndarray:
    rows = []
    for r in robots:
        rows.append(r.position if isinstance(r, RobotState) else np.asarray(r, float))
    return np.asarray(rows, dtype=float).reshape(-1, 2)


def ekf_update_cov(pred: TargetBelief, robots, sensors: SensorParams) -> np.ndarray:
    """Information-form covariance update at the given robot positions.

    Returns ``(P^-1 + H^T R^-1 H)^-1`` with H and R^-1 evaluated at the
    predicted target means, re-symmetrized after inversion.
    """
    return _updated_cov(pred, _robot_positions(robots), sensors)


def ekf_mean_update(
    pred: TargetBelief, measurements, robots, sensors: SensorParams
) -> TargetBelief:
    """Standard EKF innovation update of the mean (and covariance).

    ``measurements[i, j]`` is robot i's (range, bearing) of target j; the
    stacked order matches team_matrices rows (target-major, robot-minor).
    Bearing innovations are wrapped to (-pi, pi].
    """
    robots = list(robots)
    if pred.num_targets == 0:
        return pred
    meas = np.asarray(measurements, dtype=float)
    m, n = len(robots), pred.num_targets
    if meas.shape != (m, n, 2):
        raise ValueError(f"measurements must have shape ({m}, {n}, 2)")
    h, r_inv = team_matrices(robots, pred.mean, sensors)
    try:
        p_inv = np.linalg.inv(pred.cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("predicted covariance is singular") from exc
    cov = np.linalg.inv(p_inv + h.T @ r_inv @ h)
    cov = 0.5 * (cov + cov.T)
    gain = cov @ h.T @ r_inv

    means = pred.mean.reshape(-1, 2)
    innovation = np.zeros(2 * m * n)
    for j in range(n):
        for i, robot in enumerate(robots):
            d_hat, th_hat = range_bearing(robot, means[j])
            row = 2 * (j * m + i)
            innovation[row] = meas[i, j, 0] - d_hat
            innovation[row + 1] = wrap_angle(meas[i, j, 1] - th_hat)
    return TargetBelief(pred.mean + gain @ innovation, cov)


def predicted_trace(candidate_robot_positions, pred: TargetBelief, sensors) -> float:
    """Trace of the updated covariance for hypothetical robot positions.

    This is the tracking-quality score the planner minimizes: the smaller
    the trace, the more informative the candidate configuration.
    """
    positions = np.asarray(candidate_robot_positions, dtype=float).reshape(-1, 2)
    return float(np.trace(_updated_cov(pred, positions, sensors)))
