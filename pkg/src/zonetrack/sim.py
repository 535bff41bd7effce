"""Deterministic world simulation: true motion, planning, tracking, risk.

One step of the loop: predict the target belief, solve for controls (or
fall back to escape control when the current state is inside a zone),
advance robots and targets, sample noisy range/bearing measurements at the
new true geometry, update the EKF, and estimate the realized sensing and
jamming risks by sampling the danger-source positions.

All randomness flows from the scenario's master seed through three labeled
streams (measurement noise, sensing-risk sampling, jamming-risk sampling),
with per-step substreams for the risk estimators, so identical scenarios
reproduce identical run logs and the two estimators stay independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .chance import (
    DegenerateDirectionError,
    gaussian_samples,
    sensing_residual,
)
from .estimation import (
    RobotState,
    TargetBelief,
    TargetModel,
    ekf_mean_update,
    ekf_predict,
    noise_information,
    range_bearing,
)
from .planner import (
    VIOLATION_TOL,
    DynamicsModel,
    PlanningWorld,
    escape_control,
    position_residuals,
    solve_step,
)

# Fixed labels of the seed streams derived from the master seed.
STREAM_MEASUREMENT = 0
STREAM_MC_SENSING = 1
STREAM_MC_JAMMING = 2


# ---------------------------------------------------------------------------
# Target motion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstantVelocityMotion:
    """Straight-line motion from a start point (closed form, not integrated)."""

    start: tuple
    velocity: tuple


@dataclass(frozen=True)
class CircularMotion:
    """Circular motion; positive angular_rate turns counter-clockwise."""

    center: tuple
    radius: float
    angular_rate: float
    phase: float = 0.0

    def __post_init__(self):
        if not (self.radius > 0):
            raise ValueError("circular radius must be > 0")


def target_step(motion, t: int, dt: float) -> np.ndarray:
    """Exact target position at time t * dt along the motion's path."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    time = t * dt
    if isinstance(motion, ConstantVelocityMotion):
        return np.asarray(motion.start, dtype=float) + time * np.asarray(
            motion.velocity, dtype=float
        )
    if isinstance(motion, CircularMotion):
        angle = motion.phase + motion.angular_rate * time
        return np.asarray(motion.center, dtype=float) + motion.radius * np.array(
            [math.cos(angle), math.sin(angle)]
        )
    raise TypeError(f"unknown target motion {type(motion).__name__}")


def robot_step(x, u, dynamics: DynamicsModel) -> np.ndarray:
    """Advance the stacked robot state: Phi x + Lambda u."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.size != dynamics.Phi.shape[0] or u.size != x.size:
        raise ValueError("state/control dimensions do not match dynamics")
    return dynamics.Phi @ x + dynamics.Lambda @ u


# ---------------------------------------------------------------------------
# Sampled risk metrics
# ---------------------------------------------------------------------------


def _seed_tuple(seed) -> tuple:
    return tuple(seed) if isinstance(seed, tuple) else (int(seed),)


def mc_sensor_failure(robot_positions, zones, n: int, seed) -> float:
    """Average (over robots) sampled probability of a sensing attack.

    Each zone's source position is sampled n times; a robot fails on a
    sample when it lies within the clearance of any zone's sampled source.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    zones = tuple(zones)
    positions = np.asarray(robot_positions, dtype=float).reshape(-1, 2)
    if not zones:
        return 0.0
    failed = np.zeros((positions.shape[0], n), dtype=bool)
    for z, zone in enumerate(zones):
        samples = gaussian_samples(
            zone.source.mean, zone.source.cov, n, _seed_tuple(seed) + (z,)
        )
        for i in range(positions.shape[0]):
            dist = np.linalg.norm(samples - positions[i], axis=1)
            failed[i] |= dist < zone.clearance
    return float(failed.mean(axis=1).mean())


def mc_jamming(
    robot_positions, zones, delta2: float, comm_range: float, n: int, seed
) -> float:
    """Average (over robots) sampled probability of communication jamming.

    A robot's c* is its largest distance to a teammate within comm_range
    (0 with no neighbors); a sample jams the robot when any zone's sampled
    source is closer than delta2 * c*.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if comm_range <= 0:
        raise ValueError("comm_range must be > 0")
    zones = tuple(zones)
    positions = np.asarray(robot_positions, dtype=float).reshape(-1, 2)
    m = positions.shape[0]
    if not zones:
        return 0.0
    pair_dist = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
    np.fill_diagonal(pair_dist, np.inf)
    neighbor = pair_dist <= comm_range
    cs = np.where(neighbor, pair_dist, 0.0).max(axis=1)
    jammed = np.zeros((m, n), dtype=bool)
    for z, zone in enumerate(zones):
        samples = gaussian_samples(
            zone.source.mean, zone.source.cov, n, _seed_tuple(seed) + (z,)
        )
        for i in range(m):
            a = np.linalg.norm(samples - positions[i], axis=1)
            jammed[i] |= a < delta2 * cs[i]
    return float(jammed.mean(axis=1).mean())


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepRecord:
    """Everything logged for one simulation step (flat x/y tuples).

    The last four fields carry the solver's bookkeeping for auditing;
    objective figures are None on escape steps (no solve happened).
    """

    t: int
    robot_positions: tuple
    true_target_positions: tuple
    estimate_mean: tuple
    trace: float
    sensing_risk: float
    jamming_risk: float
    residual_min: float
    solver_status: str
    controls: tuple = ()
    objective: float | None = None
    warm_objective: float | None = None
    max_violation: float | None = None


@dataclass(frozen=True)
class RunLog:
    """Full run output: digest + seeds for provenance, one record per step."""

    scenario_digest: str
    seeds: tuple
    records: tuple
    scenario_document: dict
    applied_defaults: tuple

    def __post_init__(self):
        ts = [rec.t for rec in self.records]
        if ts != sorted(set(ts)):
            raise ValueError("step records must have strictly increasing t")


def _measurements(positions, truth, sensors, rng) -> np.ndarray:
    """Sample noisy (range, bearing) pairs at the true geometry."""
    m, n = positions.shape[0], truth.shape[0]
    meas = np.zeros((m, n, 2))
    for j in range(n):
        for i in range(m):
            robot = RobotState(positions[i])
            d, theta = range_bearing(robot, truth[j])
            std_d = 1.0 / math.sqrt(
                noise_information(d, sensors.a_d, sensors.lambda_d)
            )
            std_th = 1.0 / math.sqrt(
                noise_information(d, sensors.a_theta, sensors.lambda_theta)
            )
            meas[i, j, 0] = d + std_d * rng.standard_normal()
            meas[i, j, 1] = theta + std_th * rng.standard_normal()
    return meas


def _violated_zones(positions, world: PlanningWorld):
    """Per robot, the zones it currently violates (degenerate counts)."""
    out = []
    for pos in positions:
        bad = []
        for zone in world.sensing_zones:
            try:
                if sensing_residual(pos, zone, world.risk.eps1) < -VIOLATION_TOL:
                    bad.append(zone)
            except DegenerateDirectionError:
                bad.append(zone)
        for zone in world.comm_zones:
            # a comm zone is an escape target only at the degenerate point
            if np.linalg.norm(pos - zone.source.mean) < 1e-9:
                bad.append(zone)
        out.append(bad)
    return out


def run(scenario) -> RunLog:
    """Simulate a scenario start to finish; deterministic given its seeds."""
    motions = tuple(scenario.targets)
    num_robots = len(scenario.robot_starts)
    num_targets = len(motions)
    dynamics = DynamicsModel.single_integrator(
        num_robots, scenario.dt, scenario.u_max
    )
    x = np.asarray(scenario.robot_starts, dtype=float).reshape(-1)
    master = scenario.master_seed

    meas_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=(master, STREAM_MEASUREMENT))
    )
    truth = np.array([target_step(mo, 0, scenario.dt) for mo in motions]).reshape(
        -1, 2
    )
    if num_targets:
        init_mean = truth.reshape(-1) + math.sqrt(scenario.p0) * (
            meas_rng.standard_normal(2 * num_targets)
        )
        belief = TargetBelief(init_mean, scenario.p0 * np.eye(2 * num_targets))
        model = TargetModel(
            np.eye(2 * num_targets), scenario.q * np.eye(2 * num_targets)
        )
    else:
        belief = TargetBelief(np.zeros(0), np.zeros((0, 0)))
        model = TargetModel(np.zeros((0, 0)), np.zeros((0, 0)))

    records = []
    prev_u = np.zeros(2 * num_robots)
    escaped_last = False
    for t in range(scenario.steps):
        belief_pred = ekf_predict(belief, model)
        world = PlanningWorld(
            robot_positions=x,
            belief=belief_pred,
            sensors=scenario.sensors,
            sensing_zones=scenario.sensing_zones,
            comm_zones=scenario.comm_zones,
            comm_range=scenario.comm_range,
            risk=scenario.risk,
            dynamics=dynamics,
        )
        positions = x.reshape(-1, 2)
        try:
            g_now = position_residuals(positions, world)
            state_ok = g_now.size == 0 or g_now.min() >= -VIOLATION_TOL
        except DegenerateDirectionError:
            state_ok = False

        u = None
        report = None
        if not state_ok and not escaped_last:
            status = "escape"
        else:
            report = solve_step(world, scenario.weights, warm_start=prev_u)
            if report.status == "infeasible_input":
                status = "escape"
                report = None
            else:
                status = report.status
                u = np.asarray(report.controls)
        if u is None:  # escape: retreat for violating robots, hold the rest
            u = np.zeros(2 * num_robots)
            for i, bad in enumerate(_violated_zones(positions, world)):
                if bad:
                    u[2 * i : 2 * i + 2] = escape_control(
                        positions[i], bad, dynamics
                    )
            escaped_last = True
        else:
            escaped_last = False

        x = robot_step(x, u, dynamics)
        prev_u = u
        positions = x.reshape(-1, 2)
        truth = np.array(
            [target_step(mo, t + 1, scenario.dt) for mo in motions]
        ).reshape(-1, 2)
        if num_targets:
            meas = _measurements(positions, truth, scenario.sensors, meas_rng)
            belief = ekf_mean_update(belief_pred, meas, [
                RobotState(p) for p in positions
            ], scenario.sensors)
        else:
            belief = belief_pred

        sensing_risk = mc_sensor_failure(
            positions,
            scenario.sensing_zones,
            scenario.mc_samples,
            (master, STREAM_MC_SENSING, t),
        )
        jamming_risk = mc_jamming(
            positions,
            scenario.comm_zones,
            scenario.risk.delta2,
            scenario.comm_range,
            scenario.mc_samples,
            (master, STREAM_MC_JAMMING, t),
        )
        try:
            g_new = position_residuals(positions, world)
            residual_min = float(g_new.min()) if g_new.size else math.inf
        except DegenerateDirectionError:
            residual_min = -math.inf

        records.append(
            StepRecord(
                t=t,
                robot_positions=tuple(float(v) for v in x),
                true_target_positions=tuple(float(v) for v in truth.reshape(-1)),
                estimate_mean=tuple(float(v) for v in belief.mean),
                trace=float(np.trace(belief.cov)),
                sensing_risk=sensing_risk,
                jamming_risk=jamming_risk,
                residual_min=residual_min,
                solver_status=status,
                controls=tuple(float(v) for v in u),
                objective=None if report is None else report.objective,
                warm_objective=None if report is None else report.warm_objective,
                max_violation=None if report is None else report.max_violation,
            )
        )

    seeds = (
        ("master", master),
        ("measurement_stream", STREAM_MEASUREMENT),
        ("mc_sensing_stream", STREAM_MC_SENSING),
        ("mc_jamming_stream", STREAM_MC_JAMMING),
    )
    return RunLog(
        scenario_digest=scenario.digest(),
        seeds=seeds,
        records=tuple(records),
        scenario_document=scenario.to_document(),
        applied_defaults=tuple(scenario.applied_defaults),
    )
