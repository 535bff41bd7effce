"""Per-step control optimization under danger-zone constraints.

Every step solves, over the stacked team controls u,

    minimize   w1 * trace(updated target covariance at x+) + w2 * sum_i ||u_i||
    subject to x+ = Phi x + Lambda u,   ||u_i|| <= u_max,
               every sensing/jamming residual at x+ >= 0

with an augmented-Lagrangian outer loop around a projected-gradient inner
solve.  Gradients come from central finite differences of the objective and
residuals (the decision vector is only 2M long), so no analytic derivative
of the trace through the matrix inverse is needed.  The solve is fully
deterministic: same world, same report.

When a robot already sits inside a zone and the feasible set is empty, the
escape rule issues a one-step full-speed control pointing from the zone's
mean source position toward the robot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .chance import (
    CommZone,
    DegenerateDirectionError,
    RiskParams,
    SensingZone,
    c_star,
    comm_residual,
    erf_inv,
    sensing_residual,
)
from .estimation import SensorParams, TargetBelief, predicted_trace

VIOLATION_TOL = 1e-6
_FD_STEP = 1e-6
_INNER_TOL = 1e-8
_MAX_OUTER = 50
_MAX_INNER = 200


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DynamicsModel:
    """Linear team dynamics x+ = Phi x + Lambda u with per-robot speed bound."""

    Phi: np.ndarray
    Lambda: np.ndarray
    u_max: float
    dt: float

    def __post_init__(self):
        phi = np.asarray(self.Phi, dtype=float)
        lam = np.asarray(self.Lambda, dtype=float)
        if phi.ndim != 2 or phi.shape[0] != phi.shape[1] or lam.shape != phi.shape:
            raise ValueError("Phi and Lambda must be square with matching shapes")
        if not (self.dt > 0):
            raise ValueError("dt must be > 0")
        if not (self.u_max > 0):
            raise ValueError("u_max must be > 0")
        object.__setattr__(self, "Phi", phi)
        object.__setattr__(self, "Lambda", lam)

    @classmethod
    def single_integrator(cls, num_robots: int, dt: float, u_max: float):
        eye = np.eye(2 * num_robots)
        return cls(Phi=eye, Lambda=dt * eye, u_max=u_max, dt=dt)


@dataclass(frozen=True)
class PlannerWeights:
    """Objective weights: w1 scales tracking uncertainty, w2 control effort."""

    w1: float
    w2: float

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0 or self.w1 + self.w2 <= 0:
            raise ValueError("weights must be nonnegative with positive sum")


@dataclass(frozen=True)
class PlanningWorld:
    """Everything a single-step solve needs: current robot positions (flat
    2M vector), the already-predicted target belief, the sensing model,
    zones, neighbor range, risk tolerances, and the dynamics."""

    robot_positions: np.ndarray
    belief: TargetBelief
    sensors: SensorParams
    sensing_zones: tuple
    comm_zones: tuple
    comm_range: float
    risk: RiskParams
    dynamics: DynamicsModel

    def __post_init__(self):
        x = np.asarray(self.robot_positions, dtype=float).reshape(-1)
        if x.size % 2 != 0 or x.size == 0:
            raise ValueError("robot_positions must stack 2-vectors")
        object.__setattr__(self, "robot_positions", x)
        object.__setattr__(self, "sensing_zones", tuple(self.sensing_zones))
        object.__setattr__(self, "comm_zones", tuple(self.comm_zones))

    @property
    def num_robots(self) -> int:
        return self.robot_positions.size // 2

    @property
    def num_constraints(self) -> int:
        return self.num_robots * (len(self.sensing_zones) + len(self.comm_zones))


@dataclass(frozen=True)
class SolveReport:
    """Outcome of one solve_step call.

    status is one of:
      converged        -- controls feasible (max_violation <= 1e-6)
      max_iter         -- iteration caps hit close to feasibility
      infeasible_input -- even u = 0 and every iterate violates constraints
    objective is the raw (unpenalized) objective at the returned controls;
    warm_objective is the raw objective at the point the solver started
    from (+inf when not even u = 0 was feasible), so objective never
    exceeds warm_objective.
    """

    controls: tuple
    objective: float
    max_violation: float
    iterations: int
    status: str
    warm_objective: float


# ---------------------------------------------------------------------------
# Objective and residuals
# ---------------------------------------------------------------------------


def _predicted_positions(u: np.ndarray, world: PlanningWorld) -> np.ndarray:
    d = world.dynamics
    return d.Phi @ world.robot_positions + d.Lambda @ u


def step_objective(u, world: PlanningWorld, weights: PlannerWeights) -> float:
    """Tracking-plus-effort cost of applying control u for one step.

    Candidate positions that exactly coincide with a predicted target mean
    are nudged by 1e-9 m before the information evaluation, removing the
    measure-zero Jacobian singularity.
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    positions = _predicted_positions(u, world).reshape(-1, 2)
    if world.belief.num_targets:
        means = world.belief.mean.reshape(-1, 2)
        for _ in range(3):
            dists = np.linalg.norm(
                positions[:, None, :] - means[None, :, :], axis=-1
            )
            if dists.min() >= 1e-9:
                break
            positions = positions.copy()
            positions[np.nonzero(dists.min(axis=1) < 1e-9)[0], 0] += 1e-9
        trace = predicted_trace(positions, world.belief, world.sensors)
    else:
        trace = 0.0
    effort = float(np.linalg.norm(u.reshape(-1, 2), axis=1).sum())
    return weights.w1 * trace + weights.w2 * effort


def position_residuals(positions, world: PlanningWorld) -> np.ndarray:
    """Constraint slacks of explicit robot positions (flat or (M, 2)).

    Ordering: all (robot, sensing zone) pairs robot-major, then all
    (robot, comm zone) pairs.  c* uses teammates within comm_range at the
    same positions.  All entries >= 0 means the configuration is safe.
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    eps1 = world.risk.eps1
    values = []
    for i in range(pos.shape[0]):
        for zone in world.sensing_zones:
            values.append(sensing_residual(pos[i], zone, eps1))
    if world.comm_zones:
        for i in range(pos.shape[0]):
            neighbors = [
                pos[j]
                for j in range(pos.shape[0])
                if j != i
                and np.linalg.norm(pos[j] - pos[i]) <= world.comm_range
            ]
            cs = c_star(pos[i], neighbors)
            for zone in world.comm_zones:
                values.append(
                    comm_residual(
                        pos[i], zone, cs, world.risk.delta2, world.risk.eps2
                    )
                )
    return np.asarray(values, dtype=float)


def constraint_residuals(u, world: PlanningWorld) -> np.ndarray:
    """Constraint slacks at the post-dynamics positions induced by control u."""
    u = np.asarray(u, dtype=float).reshape(-1)
    return position_residuals(_predicted_positions(u, world), world)


def _max_violation(g: np.ndarray) -> float:
    if g.size == 0:
        return 0.0
    return float(max(0.0, -g.min()))


def clip_controls(u, u_max: float) -> np.ndarray:
    """Project each robot's control onto the speed disk ||u_i|| <= u_max."""
    u = np.asarray(u, dtype=float).reshape(-1, 2).copy()
    norms = np.linalg.norm(u, axis=1)
    over = norms > u_max
    if np.any(over):
        u[over] *= (u_max / norms[over])[:, None]
    return u.reshape(-1)


# ---------------------------------------------------------------------------
# Augmented-Lagrangian solver
# ---------------------------------------------------------------------------


def augmented_lagrangian_minimize(
    evaluate,
    u0: np.ndarray,
    u_max: float,
    max_outer: int = _MAX_OUTER,
    max_inner: int = _MAX_INNER,
    violation_tol: float = VIOLATION_TOL,
    inner_tol: float = _INNER_TOL,
    fd_step: float = _FD_STEP,
):
    """Minimize f(u) s.t. g(u) >= 0 elementwise and per-robot ||u_i|| <= u_max.

    evaluate(U) must accept a (K, dim) batch of candidates and return
    (f, g) with f shape (K,) and g shape (K, n_constraints); gradients of
    both come from one batched central-difference sweep.  Returns
    (iterates, outer_iterations) where iterates is the list of
    (u, f, max_violation) visited at the end of each outer pass, starting
    with the initial point.  Deterministic.
    """

    def evaluate_one(u):
        f, g = evaluate(u[None, :])
        return float(f[0]), g[0]

    def merit(f, g, lam, rho):
        if g.size == 0:
            return f
        shortfall = np.maximum(0.0, lam / rho - g)
        return f + 0.5 * rho * float(shortfall @ shortfall)

    def gradient(u, g_center, lam, rho):
        dim = u.size
        steps = fd_step * np.eye(dim)
        f_all, g_all = evaluate(np.vstack([u + steps, u - steps]))
        df = (f_all[:dim] - f_all[dim:]) / (2 * fd_step)
        if g_center.size:
            dg = (g_all[:dim] - g_all[dim:]).T / (2 * fd_step)
            weights_g = rho * np.maximum(0.0, lam / rho - g_center)
            return df - weights_g @ dg
        return df

    def inner_minimize(u, lam, rho):
        f, g = evaluate_one(u)
        value = merit(f, g, lam, rho)
        alpha = 1.0
        for _ in range(max_inner):
            grad = gradient(u, g, lam, rho)
            if not np.all(np.isfinite(grad)):
                break
            projected = clip_controls(u - grad, u_max)
            if np.linalg.norm(u - projected) <= inner_tol:
                break
            alpha = min(alpha * 2.0, 1e3)
            accepted = False
            while alpha > 1e-14:
                trial = clip_controls(u - alpha * grad, u_max)
                move = trial - u
                if not move.any():
                    break
                f_t, g_t = evaluate_one(trial)
                value_t = merit(f_t, g_t, lam, rho)
                if value_t <= value - 1e-4 / max(alpha, 1e-14) * float(move @ move):
                    u, f, g, value = trial, f_t, g_t, value_t
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                break
        return u, f, g

    u = clip_controls(np.asarray(u0, dtype=float).reshape(-1), u_max)
    f0, g0 = evaluate_one(u)
    iterates = [(u.copy(), f0, _max_violation(g0))]
    n_con = g0.size
    lam = np.zeros(n_con)
    rho = 10.0
    prev_viol = math.inf
    outer_done = 0
    for outer in range(1, max_outer + 1):
        u, f, g = inner_minimize(u, lam, rho)
        viol = _max_violation(g)
        iterates.append((u.copy(), f, viol))
        outer_done = outer
        if viol <= violation_tol:
            break
        if n_con:
            if viol <= 0.25 * prev_viol:
                lam = np.maximum(0.0, lam - rho * g)
            else:
                rho = min(rho * 10.0, 1e12)
                lam = np.maximum(0.0, lam - rho * g)
        prev_viol = min(prev_viol, viol)
    return iterates, outer_done


class _BatchEvaluator:
    """Vectorized (objective, residuals) over a (K, 2M) batch of controls.

    Equivalent to step_objective / constraint_residuals per row (candidates
    that put a robot exactly on a zone mean get f = +inf, g = -inf, the
    same poisoning the scalar path applies).  Batching keeps the
    finite-difference sweeps cheap: one stacked einsum/inverse instead of
    4M separate world evaluations.
    """

    def __init__(self, world: PlanningWorld, weights: PlannerWeights):
        self.world = world
        self.weights = weights
        self.m = world.num_robots
        self.x_base = world.dynamics.Phi @ world.robot_positions
        self.lam_t = world.dynamics.Lambda.T
        self.n = world.belief.num_targets
        if self.n:
            self.means = world.belief.mean.reshape(-1, 2)
            self.p_inv = np.linalg.inv(world.belief.cov)
        s = world.sensors
        self.a_d, self.l_d = s.a_d, s.lambda_d
        self.a_t, self.l_t = s.a_theta, s.lambda_theta
        risk = world.risk
        self.margin1 = erf_inv(1.0 - 2.0 * risk.eps1)
        self.margin2 = erf_inv(1.0 - 2.0 * risk.eps2)
        self.delta2 = risk.delta2

    def _trace(self, pos):
        k = pos.shape[0]
        if not self.n:
            return np.zeros(k)
        points = pos.reshape(k, self.m, 2)
        diff = points[:, :, None, :] - self.means[None, None, :, :]
        d2 = np.einsum("kmni,kmni->kmn", diff, diff)
        for _ in range(3):  # nudge candidates off exact target means
            hit = d2 < 1e-18
            if not hit.any():
                break
            points = points.copy()
            points[hit.any(axis=2), 0] += 1e-9
            diff = points[:, :, None, :] - self.means[None, None, :, :]
            d2 = np.einsum("kmni,kmni->kmn", diff, diff)
        dist = np.sqrt(d2)
        h_d = diff / dist[..., None]
        h_t = np.stack([diff[..., 1], -diff[..., 0]], axis=-1) / d2[..., None]
        info_d = self.a_d * np.exp(-self.l_d * dist)
        info_t = self.a_t * np.exp(-self.l_t * dist)
        blocks = np.einsum("kmn,kmni,kmnj->knij", info_d, h_d, h_d)
        blocks += np.einsum("kmn,kmni,kmnj->knij", info_t, h_t, h_t)
        a = np.broadcast_to(self.p_inv, (k, 2 * self.n, 2 * self.n)).copy()
        for j in range(self.n):
            a[:, 2 * j : 2 * j + 2, 2 * j : 2 * j + 2] += blocks[:, j]
        cov = np.linalg.inv(a)
        return np.einsum("kii->k", cov)

    def _zone_terms(self, pos_points, zone_source, bad):
        diff = zone_source.mean[None, None, :] - pos_points
        dist = np.sqrt(np.einsum("kmi,kmi->km", diff, diff))
        degenerate = dist < 1e-12
        bad |= degenerate
        safe = np.where(degenerate, 1.0, dist)
        a = diff / safe[..., None]
        quad = np.einsum("kmi,ij,kmj->km", a, zone_source.cov, a)
        return dist, np.sqrt(np.maximum(0.0, 2.0 * quad))

    def __call__(self, controls: np.ndarray):
        u = np.asarray(controls, dtype=float).reshape(-1, 2 * self.m)
        k = u.shape[0]
        pos = self.x_base[None, :] + u @ self.lam_t
        points = pos.reshape(k, self.m, 2)
        world = self.world
        effort = np.linalg.norm(u.reshape(k, self.m, 2), axis=2).sum(axis=1)
        f = self.weights.w1 * self._trace(pos) + self.weights.w2 * effort

        n_sense = len(world.sensing_zones)
        n_comm = len(world.comm_zones)
        g = np.empty((k, self.m * (n_sense + n_comm)))
        bad = np.zeros((k, self.m), dtype=bool)
        for z, zone in enumerate(world.sensing_zones):
            dist, margin = self._zone_terms(points, zone.source, bad)
            res = dist - zone.clearance - self.margin1 * margin
            g[:, z : self.m * n_sense : n_sense] = res
        if n_comm:
            sep = np.linalg.norm(
                points[:, :, None, :] - points[:, None, :, :], axis=-1
            )
            idx = np.arange(self.m)
            sep[:, idx, idx] = np.inf
            cs = np.where(sep <= world.comm_range, sep, 0.0).max(axis=2)
            base = self.m * n_sense
            for z, zone in enumerate(world.comm_zones):
                dist, margin = self._zone_terms(points, zone.source, bad)
                res = dist - self.delta2 * cs - self.margin2 * margin
                g[:, base + z :: n_comm] = res
        poisoned = bad.any(axis=1)
        if poisoned.any():
            f = f.copy()
            f[poisoned] = math.inf
            g[poisoned, :] = -math.inf
        return f, g


def solve_step(
    world: PlanningWorld, weights: PlannerWeights, warm_start=None
) -> SolveReport:
    """Solve the per-step control problem; deterministic given its inputs.

    The solver starts from the warm start (previous step's controls) when
    that point is feasible, falling back to u = 0 otherwise, and returns
    the best feasible iterate it saw -- so a converged report never has a
    higher objective than its starting point.
    """
    u_max = world.dynamics.u_max
    dim = 2 * world.num_robots
    evaluate = _BatchEvaluator(world, weights)

    def evaluate_one(u):
        f, g = evaluate(u[None, :])
        return float(f[0]), g[0]

    zero = np.zeros(dim)
    warm = zero if warm_start is None else clip_controls(warm_start, u_max)
    f_warm, g_warm = evaluate_one(warm)
    if _max_violation(g_warm) > VIOLATION_TOL and warm.any():
        warm = zero
        f_warm, g_warm = evaluate_one(warm)
    if _max_violation(g_warm) > VIOLATION_TOL:
        f_warm = math.inf  # no feasible starting point to compare against

    iterates, outer = augmented_lagrangian_minimize(evaluate, warm, u_max)
    feasible = [
        (f, i) for i, (u, f, viol) in enumerate(iterates) if viol <= VIOLATION_TOL
    ]
    if feasible:
        _, idx = min(feasible)
        u, f, viol = iterates[idx]
        status = "converged"
    else:
        idx = min(range(len(iterates)), key=lambda i: iterates[i][2])
        u, f, viol = iterates[idx]
        zero_viol = _max_violation(evaluate_one(zero)[1])
        status = "infeasible_input" if zero_viol > VIOLATION_TOL else "max_iter"
    return SolveReport(
        controls=tuple(float(v) for v in u),
        objective=float(f),
        max_violation=float(viol),
        iterations=outer,
        status=status,
        warm_objective=float(f_warm),
    )


# ---------------------------------------------------------------------------
# Escape rule
# ---------------------------------------------------------------------------


def escape_control(robot_pos, zones, dynamics: DynamicsModel) -> np.ndarray:
    """One-step full-speed retreat from the nearest offending zone.

    The control points from the zone's mean source position toward the
    robot; a robot sitting exactly on the mean retreats along +x.  Among
    the given zones, the nearest one whose mean-based clearance contains
    the robot wins; if none does, the nearest mean is used.
    """
    pos = np.asarray(robot_pos, dtype=float).reshape(2)
    if not zones:
        return np.zeros(2)
    nearest = None
    nearest_violated = None
    for zone in zones:
        mean = zone.source.mean
        dist = float(np.linalg.norm(pos - mean))
        clearance = zone.clearance if isinstance(zone, SensingZone) else 0.0
        if nearest is None or dist < nearest[0]:
            nearest = (dist, mean)
        if dist < clearance and (
            nearest_violated is None or dist < nearest_violated[0]
        ):
            nearest_violated = (dist, mean)
    dist, mean = nearest_violated if nearest_violated is not None else nearest
    direction = pos - mean
    if dist < 1e-12:
        direction = np.array([1.0, 0.0])  # declared tie-break on the mean itself
    return dynamics.u_max * direction / np.linalg.norm(direction)
