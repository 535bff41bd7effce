import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zonetrack.chance import (
    CommZone,
    DegenerateDirectionError,
    GaussianBelief2D,
    RiskParams,
    SensingZone,
    c_star,
    comm_residual,
    erf,
    erf_inv,
    gaussian_samples,
    halfplane_residual,
    mc_disk_probability,
    mc_halfplane_probability,
    sensing_residual,
)


def erf_inv_oracle(p: float) -> float:
    """Independent inverse: bisection against the stdlib erf."""
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if math.erf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def belief(mean, cov_scale=0.0):
    return GaussianBelief2D(np.array(mean, dtype=float), cov_scale * np.eye(2))


# ---------------------------------------------------------------------------
# erf / erf_inv
# ---------------------------------------------------------------------------


def test_erf_matches_stdlib():
    for x in np.linspace(-6.5, 6.5, 1301):
        assert erf(float(x)) == pytest.approx(math.erf(float(x)), abs=1e-13)


def test_erf_inv_zero():
    assert erf_inv(0.0) == 0.0


def test_erf_inv_of_erf_one():
    # erf(1.0) to 10 digits
    assert erf_inv(0.8427007929) == pytest.approx(1.0, abs=1e-8)


def test_erf_inv_at_0_6():
    assert erf_inv(0.6) == pytest.approx(erf_inv_oracle(0.6), abs=1e-12)
    assert erf_inv(0.6) == pytest.approx(0.5951, abs=1e-4)


def test_erf_inv_round_trip_grid():
    for p in np.linspace(-0.999, 0.999, 997):
        assert abs(erf(erf_inv(float(p))) - float(p)) <= 1e-9


@given(st.floats(min_value=-0.9999, max_value=0.9999))
def test_erf_inv_odd(p):
    assert erf_inv(-p) == pytest.approx(-erf_inv(p), abs=1e-15)


@pytest.mark.parametrize("p", [1.0, -1.0, 1.5, float("nan")])
def test_erf_inv_domain_error(p):
    with pytest.raises(ValueError):
        erf_inv(p)


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------


def test_halfplane_zero_cov():
    assert halfplane_residual(belief((3, 0)), (0, 0), 2.0, 0.2) == pytest.approx(1.0)


def test_halfplane_delta_half_kills_margin():
    b = GaussianBelief2D(np.array([3.0, 0.0]), np.array([[0.3, 0.1], [0.1, 0.2]]))
    assert halfplane_residual(b, (0, 0), 2.0, 0.5) == pytest.approx(1.0)


def test_halfplane_derived_value():
    # 1 - erf_inv(0.6) * sqrt(2 * 0.05), with the inverse from the oracle
    expected = 1.0 - erf_inv_oracle(0.6) * math.sqrt(0.1)
    got = halfplane_residual(belief((3, 0), 0.05), (0, 0), 2.0, 0.2)
    assert got == pytest.approx(expected, abs=1e-9)
    assert got == pytest.approx(0.8118, abs=1e-4)


def test_halfplane_degenerate_direction():
    with pytest.raises(DegenerateDirectionError):
        halfplane_residual(belief((1, 1), 0.1), (1, 1), 1.0, 0.2)


def test_halfplane_rejects_delta_outside_domain():
    for bad in (0.0, -0.1, 0.6, 1.0):
        with pytest.raises(ValueError):
            halfplane_residual(belief((3, 0), 0.1), (0, 0), 1.0, bad)


@given(
    scale=st.floats(min_value=0.01, max_value=2.0),
    bump=st.floats(min_value=0.01, max_value=2.0),
)
def test_halfplane_decreasing_in_cov_scale(scale, bump):
    b_small = belief((3, 0), scale)
    b_large = belief((3, 0), scale + bump)
    r_small = halfplane_residual(b_small, (0, 0), 1.0, 0.1)
    r_large = halfplane_residual(b_large, (0, 0), 1.0, 0.1)
    assert r_large < r_small


@given(
    delta=st.floats(min_value=0.02, max_value=0.49),
    shrink=st.floats(min_value=0.01, max_value=0.4),
)
def test_halfplane_tightens_as_delta_shrinks(delta, shrink):
    smaller = max(1e-3, delta - shrink * delta)
    b = belief((3, 0), 0.2)
    assert halfplane_residual(b, (0, 0), 1.0, smaller) < halfplane_residual(
        b, (0, 0), 1.0, delta
    )


def test_sensing_residual_examples():
    zone = SensingZone(belief((3, 0), 0.05), clearance=2.0)
    expected = 1.0 - erf_inv_oracle(0.6) * math.sqrt(0.1)
    assert sensing_residual((0, 0), zone, 0.2) == pytest.approx(expected, abs=1e-9)

    boundary = SensingZone(belief((2, 0)), clearance=2.0)
    assert sensing_residual((0, 0), boundary, 0.2) == pytest.approx(0.0, abs=1e-12)

    inside = SensingZone(belief((1, 0)), clearance=2.0)
    assert sensing_residual((0, 0), inside, 0.2) == pytest.approx(-1.0)


def test_c_star():
    pos = np.zeros(2)
    neighbors = [(0.0, 1.0), (2.5, 0.0), (0.7, 0.0)]
    assert c_star(pos, neighbors) == pytest.approx(2.5)
    assert c_star(pos, []) == 0.0
    assert c_star(pos, [(0.0, -3.25)]) == pytest.approx(3.25)


@given(
    st.lists(
        st.tuples(
            st.floats(min_value=-10, max_value=10),
            st.floats(min_value=-10, max_value=10),
        ),
        max_size=6,
    )
)
def test_c_star_is_one_of_the_distances(neighbors):
    pos = np.array([1.0, -2.0])
    value = c_star(pos, neighbors)
    dists = [math.hypot(n[0] - 1.0, n[1] + 2.0) for n in neighbors]
    assert all(value >= d for d in dists)
    if neighbors:
        assert any(value == d for d in dists)
    else:
        assert value == 0.0


def test_comm_residual_examples():
    zone = CommZone(belief((4, 0)))
    assert comm_residual((0, 0), zone, c_star=3.0, delta2=1.0, eps2=0.1) == (
        pytest.approx(1.0)
    )

    fuzzy = CommZone(belief((4, 0), 0.05))
    assert comm_residual((0, 0), fuzzy, c_star=3.0, delta2=1.0, eps2=0.5) == (
        pytest.approx(4.0 - 3.0)
    )
    expected = 1.0 - erf_inv_oracle(0.6) * math.sqrt(0.1)
    assert comm_residual((0, 0), fuzzy, c_star=3.0, delta2=1.0, eps2=0.2) == (
        pytest.approx(expected, abs=1e-9)
    )


def test_risk_params_validation():
    RiskParams(eps1=0.2, eps2=0.1, delta2=1.0)
    with pytest.raises(ValueError):
        RiskParams(eps1=0.5, eps2=0.1, delta2=1.0)
    with pytest.raises(ValueError):
        RiskParams(eps1=0.2, eps2=0.0, delta2=1.0)
    with pytest.raises(ValueError):
        RiskParams(eps1=0.2, eps2=0.1, delta2=0.0)


def test_belief_validation():
    with pytest.raises(ValueError):
        GaussianBelief2D(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        GaussianBelief2D(np.zeros(2), np.array([[1.0, 0.0], [0.0, -0.2]]))
    with pytest.raises(ValueError):
        SensingZone(belief((0, 0)), clearance=0.0)


# ---------------------------------------------------------------------------
# Monte-Carlo oracles
# ---------------------------------------------------------------------------


def test_mc_disk_zero_radius():
    b = belief((0, 0), 1.0)
    assert mc_disk_probability(b, (0, 0), 0.0, n=1000, seed=1) == 0.0


def test_mc_disk_ten_sigma():
    b = belief((2, -1), 1.0)
    assert mc_disk_probability(b, (2, -1), 10.0, n=100_000, seed=2) == (
        pytest.approx(1.0, abs=0.01)
    )


def test_mc_disk_isotropic_closed_form():
    # For N(c, I) the distance to c is Rayleigh: P(r < 1) = 1 - exp(-1/2)
    b = belief((0.5, 0.5), 1.0)
    got = mc_disk_probability(b, (0.5, 0.5), 1.0, n=100_000, seed=3)
    assert got == pytest.approx(1.0 - math.exp(-0.5), abs=0.01)


def test_mc_disk_deterministic_and_batch_stable():
    b = GaussianBelief2D(np.array([1.0, 2.0]), np.array([[0.4, 0.1], [0.1, 0.3]]))
    a = mc_disk_probability(b, (0, 0), 2.0, n=20_000, seed=77)
    again = mc_disk_probability(b, (0, 0), 2.0, n=20_000, seed=77)
    assert a == again


def test_gaussian_samples_substreams_are_independent_batches():
    # Regenerating only the second batch must reproduce that slice exactly.
    from zonetrack.chance import MC_BATCH

    mean = np.array([0.0, 1.0])
    cov = np.array([[0.5, 0.2], [0.2, 0.4]])
    n = MC_BATCH + 500
    full = gaussian_samples(mean, cov, n, seed=9)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=9, spawn_key=(1,)))
    z = rng.standard_normal((500, 2))
    expected_tail = mean + z @ np.linalg.cholesky(cov).T
    assert np.array_equal(full[MC_BATCH:], expected_tail)


def test_mc_rejects_non_psd():
    with pytest.raises(ValueError):
        GaussianBelief2D(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_mc_degenerate_cov_all_mass_at_mean():
    b = belief((3, 0))
    assert mc_disk_probability(b, (0, 0), 4.0, n=500, seed=4) == 1.0
    assert mc_disk_probability(b, (0, 0), 2.0, n=500, seed=4) == 0.0


def _random_config(rng):
    mean = rng.uniform(-5, 5, size=2)
    a = rng.uniform(-1, 1, size=(2, 2))
    cov = a @ a.T * rng.uniform(0.01, 0.5)
    b = GaussianBelief2D(mean, cov)
    center = rng.uniform(-5, 5, size=2)
    gap = float(np.linalg.norm(mean - center))
    radius = rng.uniform(0.05, max(0.06, 0.95 * gap))  # disk never contains mean
    return b, center, radius


def test_disk_bounded_by_halfplane_randomized():
    rng = np.random.default_rng(2024)
    n = 20_000
    for trial in range(100):
        b, center, radius = _random_config(rng)
        p_disk = mc_disk_probability(b, center, radius, n, seed=(10, trial))
        p_half = mc_halfplane_probability(b, center, radius, n, seed=(11, trial))
        se = math.sqrt(
            p_disk * (1 - p_disk) / n + p_half * (1 - p_half) / n
        )
        assert p_disk <= p_half + 3 * se + 1e-12


def test_nonnegative_residual_implies_bounded_halfplane_probability():
    rng = np.random.default_rng(99)
    n = 20_000
    checked = 0
    trial = 0
    while checked < 100:
        trial += 1
        b, center, radius = _random_config(rng)
        eps = rng.uniform(0.02, 0.45)
        if halfplane_residual(b, center, radius, eps) < 0:
            continue
        p_half = mc_halfplane_probability(b, center, radius, n, seed=(12, trial))
        assert p_half <= eps + 3 * math.sqrt(eps * (1 - eps) / n)
        checked += 1
