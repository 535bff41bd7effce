"""Gaussian chance-constraint machinery for danger-zone avoidance.

A danger zone is a disk around a source whose position is only known as a
2-D Gaussian belief.  The probability that a robot ends up inside such a
disk is an integral with no closed form, so planning uses a conservative
half-plane bound instead: the disk is replaced by the tangent half-plane
facing the robot, whose Gaussian tail probability is available through the
inverse error function.  This module provides

* an in-repo ``erf`` / ``erf_inv`` pair (no SciPy dependency),
* the half-plane residual and its sensing/communication specializations
  (residual >= 0  <=>  the linearized chance constraint holds),
* seeded Monte-Carlo estimators of the true disk and half-plane
  probabilities, used to validate the bound.

Everything here is a pure function of its inputs and safe to call
concurrently.  Monte-Carlo sampling is organized in fixed-size batches with
independent seed-derived substreams, so splitting the batches across workers
reproduces the single-threaded counts exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_SQRT_PI = math.sqrt(math.pi)

#: Samples per Monte-Carlo substream; parallel batch b of a run seeded with
#: ``s`` always draws from SeedSequence(entropy=s, spawn_key=(b,)).
MC_BATCH = 8192


class DegenerateDirectionError(ValueError):
    """A half-plane direction is undefined: reference point sits on the mean."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GaussianBelief2D:
    """Gaussian belief over a 2-D position: mean (m) and covariance (m^2)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(2)
        cov = np.asarray(self.cov, dtype=float).reshape(2, 2)
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise ValueError("belief mean/cov must be finite")
        if abs(cov[0, 1] - cov[1, 0]) > 1e-9:
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-10:
            raise ValueError("covariance must be positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def __eq__(self, other):
        if not isinstance(other, GaussianBelief2D):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(
            self.cov, other.cov
        )


@dataclass(frozen=True)
class SensingZone:
    """Disk-shaped sensor-attack zone: uncertain source plus clearance radius."""

    source: GaussianBelief2D
    clearance: float

    def __post_init__(self):
        if not (self.clearance > 0):
            raise ValueError("clearance must be > 0")


@dataclass(frozen=True)
class CommZone:
    """Jamming zone: only the uncertain source position; the effective radius
    scales with the victim's distance to its teammates."""

    source: GaussianBelief2D


@dataclass(frozen=True)
class RiskParams:
    """Risk tolerances: eps1 for sensing zones, (eps2, delta2) for jamming.

    delta2 is the distance-ratio threshold below which a jammer wins; eps1
    and eps2 live in (0, 0.5) so the half-plane bound stays on the safe side
    of the median.
    """

    eps1: float
    eps2: float
    delta2: float

    def __post_init__(self):
        if not (0.0 < self.eps1 < 0.5):
            raise ValueError("eps1 must be in (0, 0.5)")
        if not (0.0 < self.eps2 < 0.5):
            raise ValueError("eps2 must be in (0, 0.5)")
        if not (self.delta2 > 0):
            raise ValueError("delta2 must be > 0")


# ---------------------------------------------------------------------------
# Error function and inverse
# ---------------------------------------------------------------------------


def erf(x: float) -> float:
    """Error function, accurate to ~1e-15 absolute.

    Uses the all-positive confluent series ``erf(x) = 2x/sqrt(pi) *
    exp(-x^2) * sum (2x^2)^n / (3*5*...*(2n+1))`` for |x| < 2.5 (no
    cancellation) and a Legendre-type continued fraction for erfc beyond.
    """
    x = float(x)
    if math.isnan(x):
        return x
    ax = abs(x)
    if ax == 0.0:
        return 0.0
    if ax >= 6.0:
        # erfc(6) ~ 2e-17, below double resolution around 1.
        return math.copysign(1.0, x)
    if ax < 2.5:
        two_x2 = 2.0 * ax * ax
        term = 1.0
        total = 1.0
        n = 1
        while True:
            term *= two_x2 / (2 * n + 1)
            total += term
            n += 1
            if term < 1e-18 * total or n > 200:
                break
        val = (2.0 * ax / _SQRT_PI) * math.exp(-ax * ax) * total
    else:
        # erfc(x) = exp(-x^2) / (sqrt(pi) * (x + K_{n>=1}((n/2) / x)))
        tail = ax
        for n in range(60, 0, -1):
            tail = ax + (0.5 * n) / tail
        val = 1.0 - math.exp(-ax * ax) / (_SQRT_PI * tail)
    return math.copysign(val, x)


@lru_cache(maxsize=512)
def erf_inv(p: float) -> float:
    """Inverse error function on (-1, 1), |erf(erf_inv(p)) - p| <~ 1e-15.

    Bisection brackets the root of the in-repo ``erf``, then Newton steps
    (derivative 2/sqrt(pi) * exp(-x^2)) polish it.  Odd by construction.

    Raises ValueError for |p| >= 1.
    """
    p = float(p)
    if not abs(p) < 1.0:
        raise ValueError(f"erf_inv requires |p| < 1, got {p}")
    if p == 0.0:
        return 0.0
    q = abs(p)
    lo, hi = 0.0, 1.0
    while erf(hi) < q:
        lo, hi = hi, hi * 2.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if erf(mid) < q:
            lo = mid
        else:
            hi = mid
    x = 0.5 * (lo + hi)
    for _ in range(8):
        step = (q - erf(x)) * _SQRT_PI / 2.0 * math.exp(x * x)
        x += step
        if abs(step) < 1e-15 * max(1.0, x):
            break
    return math.copysign(x, p)


# ---------------------------------------------------------------------------
# Deterministic residuals
# ---------------------------------------------------------------------------


def _unit_toward(mean: np.ndarray, ref_point: np.ndarray) -> tuple[np.ndarray, float]:
    diff = np.asarray(mean, dtype=float) - np.asarray(ref_point, dtype=float)
    dist = float(np.linalg.norm(diff))
    if dist < 1e-12:
        raise DegenerateDirectionError(
            "reference point coincides with the belief mean; no half-plane direction"
        )
    return diff / dist, dist


def halfplane_residual(
    belief: GaussianBelief2D, ref_point, b: float, delta: float
) -> float:
    """Deterministic slack of the linearized chance constraint.

    With a the unit vector from ref_point toward the belief mean, returns

        a.(mu - ref_point) - b - erf_inv(1 - 2*delta) * sqrt(2 a.Sigma.a)

    A nonnegative value certifies Prob(a.(x - ref_point) <= b) <= delta for
    x ~ belief.  delta must lie in (0, 0.5]; at exactly 0.5 the uncertainty
    margin vanishes.
    """
    if not (0.0 < delta <= 0.5):
        raise ValueError(f"delta must be in (0, 0.5], got {delta}")
    a, dist = _unit_toward(belief.mean, ref_point)
    margin = erf_inv(1.0 - 2.0 * delta) * math.sqrt(
        max(0.0, 2.0 * float(a @ belief.cov @ a))
    )
    return dist - b - margin


def sensing_residual(robot_pos, zone: SensingZone, eps1: float) -> float:
    """Sensing-zone constraint slack at a robot position (>= 0 means safe).

    The probability of the robot sitting within the zone's clearance of the
    sampled source is bounded by eps1 whenever this residual is nonnegative.
    """
    return halfplane_residual(zone.source, robot_pos, zone.clearance, eps1)


def c_star(robot_pos, neighbor_positions) -> float:
    """Largest distance from robot_pos to any neighbor (0 for no neighbors)."""
    pos = np.asarray(robot_pos, dtype=float)
    best = 0.0
    for other in neighbor_positions:
        other = np.asarray(other, dtype=float)
        best = max(best, math.hypot(other[0] - pos[0], other[1] - pos[1]))
    return best


def comm_residual(
    robot_pos, zone: CommZone, c_star: float, delta2: float, eps2: float
) -> float:
    """Jamming constraint slack: distance to the jammer's mean must exceed
    delta2 * c_star plus the Gaussian uncertainty margin.

    c_star is the robot's largest distance to a communication neighbor; the
    jammer wins when it is closer than delta2 times that distance.
    """
    if c_star < 0:
        raise ValueError("c_star must be >= 0")
    return halfplane_residual(zone.source, robot_pos, delta2 * c_star, eps2)


# ---------------------------------------------------------------------------
# Monte-Carlo oracles
# ---------------------------------------------------------------------------


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """Matrix L with L @ L.T = cov; tolerates semi-definite covariances."""
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(0.5 * (cov + cov.T))
        if w.min() < -1e-10 * max(1.0, abs(w.max())):
            raise ValueError("covariance must be positive semi-definite") from None
        return v * np.sqrt(np.clip(w, 0.0, None))


def gaussian_samples(mean, cov, n: int, seed) -> np.ndarray:
    """n samples from N(mean, cov) as an (n, 2) array.

    Drawn in MC_BATCH-sized batches, batch b from the substream
    SeedSequence(entropy=seed, spawn_key=(b,)); seed may be an int or a
    tuple of ints.  Identical seeds give identical samples, and each batch
    can be regenerated independently.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    mean = np.asarray(mean, dtype=float).reshape(-1)
    factor = _psd_factor(cov)
    out = np.empty((n, mean.size))
    for b in range(0, -(-n // MC_BATCH)):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(b,))
        )
        lo = b * MC_BATCH
        hi = min(lo + MC_BATCH, n)
        z = rng.standard_normal((hi - lo, mean.size))
        out[lo:hi] = mean + z @ factor.T
    return out


def mc_disk_probability(
    belief: GaussianBelief2D, center, radius: float, n: int, seed
) -> float:
    """Monte-Carlo estimate of Prob(||x - center|| < radius), x ~ belief.

    Deterministic given the seed.  This is the sampling oracle for the
    disk integral that the half-plane residual conservatively bounds.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    center = np.asarray(center, dtype=float).reshape(2)
    samples = gaussian_samples(belief.mean, belief.cov, n, seed)
    inside = np.linalg.norm(samples - center, axis=1) < radius
    return float(np.count_nonzero(inside)) / n


def mc_halfplane_probability(
    belief: GaussianBelief2D, ref_point, b: float, n: int, seed
) -> float:
    """Monte-Carlo estimate of Prob(a.(x - ref_point) <= b), x ~ belief,
    with a the unit vector from ref_point toward the belief mean.

    Companion oracle to mc_disk_probability: the disk event implies the
    half-plane event, so this estimate should dominate the disk estimate.
    """
    ref = np.asarray(ref_point, dtype=float).reshape(2)
    a, _ = _unit_toward(belief.mean, ref)
    samples = gaussian_samples(belief.mean, belief.cov, n, seed)
    below = (samples - ref) @ a <= b
    return float(np.count_nonzero(below)) / n
