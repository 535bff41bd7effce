"""Acceptance suite: one test per shipped criterion, one PASS line each.

Run with `pytest -s tests/test_acceptance.py -v` to see the summary lines.
Expensive simulation runs are cached per session, so the whole suite stays
within the stated runtime budgets.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from zonetrack.chance import (
    GaussianBelief2D,
    halfplane_residual,
    mc_disk_probability,
    mc_halfplane_probability,
)
from zonetrack.estimation import (
    RobotState,
    SensorParams,
    TargetBelief,
    ekf_update_cov,
    range_bearing,
    target_jacobian,
    wrap_angle,
)
from zonetrack.io import parse_scenario, run_log_csv, write_run_log
from zonetrack.sim import mc_jamming, mc_sensor_failure, run

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"
AUDIT_SAMPLES = 100_000


def _load_doc(name):
    return json.loads((SCENARIO_DIR / name).read_text())


@pytest.fixture(scope="session")
def cached_runs():
    cache = {}

    def get(name, **tweaks):
        key = (name, tuple(sorted(tweaks.items())))
        if key not in cache:
            doc = _load_doc(name)
            if "eps1" in tweaks:
                doc["risk"]["eps1"] = tweaks["eps1"]
            if "cov" in tweaks:
                c = tweaks["cov"]
                doc["sensing_zones"][0]["cov"] = [[c, 0.0], [0.0, c]]
            scenario = parse_scenario(json.dumps(doc))
            cache[key] = (scenario, run(scenario))
        return cache[key]

    return get


def _audit_sensing(scenario, log, n=AUDIT_SAMPLES):
    values = []
    for rec in log.records:
        positions = np.asarray(rec.robot_positions).reshape(-1, 2)
        values.append(
            mc_sensor_failure(
                positions, scenario.sensing_zones, n, (scenario.master_seed, 10, rec.t)
            )
        )
    return np.asarray(values)


def _audit_jamming(scenario, log, n=AUDIT_SAMPLES):
    values = []
    for rec in log.records:
        positions = np.asarray(rec.robot_positions).reshape(-1, 2)
        values.append(
            mc_jamming(
                positions,
                scenario.comm_zones,
                scenario.risk.delta2,
                scenario.comm_range,
                n,
                (scenario.master_seed, 11, rec.t),
            )
        )
    return np.asarray(values)


def _min_zone_distance(log):
    mean = np.asarray(log.scenario_document["sensing_zones"][0]["mean"])
    best = math.inf
    for rec in log.records:
        positions = np.asarray(rec.robot_positions).reshape(-1, 2)
        best = min(best, float(np.linalg.norm(positions - mean, axis=1).min()))
    return best


def test_criterion_1_sensing_risk_bound(cached_runs):
    start = time.time()
    scenario, log = cached_runs("sensing_paper.cfg")
    risks = _audit_sensing(scenario, log)
    bound = 0.2 + 3 * math.sqrt(0.2 * 0.8 / AUDIT_SAMPLES)
    elapsed = time.time() - start
    assert scenario.risk.eps1 == 0.2
    assert risks.max() <= bound
    assert elapsed < 120
    print(
        f"\n[criterion 1] PASS: max per-step sensing risk "
        f"{risks.max():.5f} <= {bound:.5f} ({elapsed:.0f}s)"
    )


def test_criterion_2_risk_monotonicity(cached_runs):
    start = time.time()
    mins = {}
    for eps1 in (0.2, 0.1, 0.05):
        _, log = cached_runs("sensing_paper.cfg", eps1=eps1)
        mins[eps1] = _min_zone_distance(log)
    elapsed = time.time() - start
    assert mins[0.1] >= mins[0.2] - 1e-9
    assert mins[0.05] >= mins[0.1] - 1e-9
    assert mins[0.05] > mins[0.2]
    assert elapsed < 300
    print(
        f"\n[criterion 2] PASS: min standoff "
        f"{mins[0.2]:.4f} (eps 0.2) <= {mins[0.1]:.4f} (0.1) <= "
        f"{mins[0.05]:.4f} (0.05) ({elapsed:.0f}s)"
    )


def test_criterion_3_uncertainty_monotonicity(cached_runs):
    _, log_small = cached_runs("sensing_paper.cfg")
    _, log_large = cached_runs("sensing_paper.cfg", cov=0.1)
    small, large = _min_zone_distance(log_small), _min_zone_distance(log_large)
    assert large >= small - 1e-9
    print(
        f"\n[criterion 3] PASS: min standoff {small:.4f} (cov 0.05) -> "
        f"{large:.4f} (cov 0.10), not decreased"
    )


def test_criterion_4_jamming_risk_bound(cached_runs):
    lines = []
    for name in ("comm_paper.cfg", "comm_paper_wide.cfg", "comm_paper_strict.cfg"):
        scenario, log = cached_runs(name)
        eps2 = scenario.risk.eps2
        risks = _audit_jamming(scenario, log)
        bound = eps2 + 3 * math.sqrt(eps2 * (1 - eps2) / AUDIT_SAMPLES)
        assert risks.max() <= bound, name
        if eps2 == 0.02:
            assert risks.mean() <= 0.005
            lines.append(f"{name}: mean {risks.mean():.5f} <= 0.005")
        lines.append(f"{name}: max {risks.max():.5f} <= {bound:.5f}")
    print("\n[criterion 4] PASS: " + "; ".join(lines))


def test_criterion_5_trace_detour_signature(cached_runs):
    _, log = cached_runs("sensing_paper.cfg")
    traces = np.asarray([rec.trace for rec in log.records])
    third = len(traces) // 3
    middle_max = traces[third : 2 * third].max()
    head = traces[:10].mean()
    tail = traces[-10:].mean()
    assert middle_max > head
    assert middle_max > tail
    print(
        f"\n[criterion 5] PASS: middle-third max trace {middle_max:.3f} > "
        f"first-10 mean {head:.3f} and last-10 mean {tail:.3f}"
    )


def test_criterion_6_linearization_soundness():
    start = time.time()
    rng = np.random.default_rng(606)
    n = AUDIT_SAMPLES
    checked = 0
    trial = 0
    while checked < 100:
        trial += 1
        mean = rng.uniform(-5, 5, size=2)
        a = rng.uniform(-1, 1, size=(2, 2))
        belief = GaussianBelief2D(mean, a @ a.T * rng.uniform(0.01, 0.4))
        center = rng.uniform(-5, 5, size=2)
        gap = float(np.linalg.norm(mean - center))
        if gap < 0.3:
            continue
        radius = rng.uniform(0.05, 0.95 * gap)
        eps = rng.uniform(0.02, 0.45)
        if halfplane_residual(belief, center, radius, eps) < 0:
            continue
        p_half = mc_halfplane_probability(belief, center, radius, n, (60, trial))
        p_disk = mc_disk_probability(belief, center, radius, n, (61, trial))
        assert p_half <= eps + 3 * math.sqrt(eps * (1 - eps) / n)
        combined_se = math.sqrt(
            p_disk * (1 - p_disk) / n + p_half * (1 - p_half) / n
        )
        assert p_disk <= p_half + 3 * combined_se + 1e-12
        checked += 1
    elapsed = time.time() - start
    assert elapsed < 60
    print(
        f"\n[criterion 6] PASS: {checked} feasible configs satisfy "
        f"half-plane and disk bounds at n={n} ({elapsed:.0f}s)"
    )


def test_criterion_7_jacobian_and_ekf_invariants():
    rng = np.random.default_rng(707)
    sensors = SensorParams()
    step = 1e-6
    worst_rel = 0.0
    worst_sym = 0.0
    trials = 0
    while trials < 1000:
        robot = RobotState(rng.uniform(-8, 8, 2), rng.uniform(-3, 3))
        target = rng.uniform(-8, 8, 2)
        if np.linalg.norm(robot.position - target) < 0.3:
            continue
        analytic = target_jacobian(robot, target)
        numeric = np.zeros((2, 2))
        for k in range(2):
            hi, lo = target.copy(), target.copy()
            hi[k] += step
            lo[k] -= step
            d_hi, th_hi = range_bearing(robot, hi)
            d_lo, th_lo = range_bearing(robot, lo)
            numeric[0, k] = (d_hi - d_lo) / (2 * step)
            numeric[1, k] = wrap_angle(th_hi - th_lo) / (2 * step)
        rel = np.abs(analytic - numeric).max() / max(1.0, np.abs(numeric).max())
        worst_rel = max(worst_rel, rel)
        assert rel < 1e-5

        n_targets = int(rng.integers(1, 3))
        s = rng.uniform(-1, 1, (2 * n_targets, 2 * n_targets))
        pred = TargetBelief(
            rng.uniform(-6, 6, 2 * n_targets),
            s @ s.T + 0.05 * np.eye(2 * n_targets),
        )
        robots = [
            RobotState(rng.uniform(-6, 6, 2))
            for _ in range(int(rng.integers(1, 4)))
        ]
        updated = ekf_update_cov(pred, robots, sensors)
        assert np.trace(updated) <= np.trace(pred.cov) + 1e-12
        sym = np.abs(updated - updated.T).max()
        worst_sym = max(worst_sym, sym)
        assert sym < 1e-10
        trials += 1
    print(
        f"\n[criterion 7] PASS: 1000 trials, worst FD rel err {worst_rel:.2e}, "
        f"worst symmetry drift {worst_sym:.2e}"
    )


def test_criterion_8_solver_contract(cached_runs):
    lines = []
    for name in ("sensing_paper.cfg", "comm_paper.cfg"):
        scenario, log = cached_runs(name)
        converged = 0
        for rec in log.records:
            if rec.solver_status != "converged":
                continue
            converged += 1
            assert rec.max_violation <= 1e-6
            assert rec.objective <= rec.warm_objective + 1e-9
            controls = np.asarray(rec.controls).reshape(-1, 2)
            assert np.linalg.norm(controls, axis=1).max() <= scenario.u_max + 1e-9
        ratio = converged / len(log.records)
        assert ratio >= 0.95
        lines.append(f"{name}: {100 * ratio:.1f}% converged")
    print("\n[criterion 8] PASS: " + "; ".join(lines))


def test_criterion_9_determinism(cached_runs, tmp_path):
    scenario, first = cached_runs("sensing_paper.cfg")
    second = run(scenario)
    assert run_log_csv(first) == run_log_csv(second)
    dir_a, dir_b = tmp_path / "a", tmp_path / "b"
    write_run_log(first, dir_a)
    write_run_log(second, dir_b)
    assert (dir_a / "run_log.csv").read_bytes() == (dir_b / "run_log.csv").read_bytes()
    assert (dir_a / "run_meta.json").read_bytes() == (
        dir_b / "run_meta.json"
    ).read_bytes()
    print("\n[criterion 9] PASS: repeated runs produce byte-identical logs")
