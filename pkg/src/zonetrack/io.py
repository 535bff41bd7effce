"""Scenario configs, run-log files, and the command-line entry point.

Scenarios are JSON documents (conventionally ``*.cfg``) with a strict
schema: unknown keys are rejected, every omitted optional field gets a
documented default, and the fully resolved document (defaults included) is
what gets digested and echoed into run metadata, so no configuration is
ever silent.  Run logs are a CSV table plus a JSON metadata file, both
written atomically and byte-stable across repeated runs.

Exit codes for the CLI: 0 success, 1 validation/audit failure, 2 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from .chance import CommZone, GaussianBelief2D, RiskParams, SensingZone
from .estimation import SensorParams
from .planner import PlannerWeights
from .sim import CircularMotion, ConstantVelocityMotion, RunLog, mc_jamming, mc_sensor_failure, run

FORMAT_VERSION = 1

DEFAULTS = {
    "robots.u_max": 1.0,
    "sensing_zones": [],
    "comm_zones": [],
    "weights.w1": 1.0,
    "weights.w2": 0.01,
    "risk.eps1": 0.1,
    "risk.eps2": 0.1,
    "risk.delta2": 1.0,
    "sensors.a_d": 1.0,
    "sensors.lambda_d": 0.05,
    "sensors.a_theta": 1.0,
    "sensors.lambda_theta": 0.05,
    "dynamics.dt": 0.1,
    "dynamics.steps": 200,
    "ekf.p0": 1.0,
    "ekf.q": 1e-3,
    "comm_range": 10.0,
    "mc_samples": 1000,
    "master_seed": 0,
}


class ScenarioError(ValueError):
    """A scenario document is malformed; the message names the field path."""


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """Fully resolved experiment description (defaults already applied)."""

    robot_starts: tuple
    u_max: float
    targets: tuple
    sensing_zones: tuple
    comm_zones: tuple
    weights: PlannerWeights
    risk: RiskParams
    sensors: SensorParams
    dt: float
    steps: int
    p0: float
    q: float
    comm_range: float
    mc_samples: int
    master_seed: int
    applied_defaults: tuple = field(default=(), compare=False)

    def to_document(self) -> dict:
        """The canonical, fully explicit JSON document of this scenario."""

        def motion_doc(motion):
            if isinstance(motion, ConstantVelocityMotion):
                return {
                    "kind": "constant_velocity",
                    "start": list(motion.start),
                    "velocity": list(motion.velocity),
                }
            return {
                "kind": "circular",
                "center": list(motion.center),
                "radius": motion.radius,
                "angular_rate": motion.angular_rate,
                "phase": motion.phase,
            }

        def zone_doc(zone):
            doc = {
                "mean": [float(v) for v in zone.source.mean],
                "cov": [[float(v) for v in row] for row in zone.source.cov],
            }
            if isinstance(zone, SensingZone):
                doc["clearance"] = zone.clearance
            return doc

        return {
            "format_version": FORMAT_VERSION,
            "robots": {
                "starts": [list(s) for s in self.robot_starts],
                "u_max": self.u_max,
            },
            "targets": [{"motion": motion_doc(m)} for m in self.targets],
            "sensing_zones": [zone_doc(z) for z in self.sensing_zones],
            "comm_zones": [zone_doc(z) for z in self.comm_zones],
            "weights": {"w1": self.weights.w1, "w2": self.weights.w2},
            "risk": {
                "eps1": self.risk.eps1,
                "eps2": self.risk.eps2,
                "delta2": self.risk.delta2,
            },
            "sensors": {
                "a_d": self.sensors.a_d,
                "lambda_d": self.sensors.lambda_d,
                "a_theta": self.sensors.a_theta,
                "lambda_theta": self.sensors.lambda_theta,
            },
            "dynamics": {"dt": self.dt, "steps": self.steps},
            "ekf": {"p0": self.p0, "q": self.q},
            "comm_range": self.comm_range,
            "mc_samples": self.mc_samples,
            "master_seed": self.master_seed,
        }

    def digest(self) -> str:
        canonical = json.dumps(
            self.to_document(), sort_keys=True, separators=(",", ":")
        )
        return hashlib.sha256(canonical.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------


def _reject_unknown(mapping, allowed, path):
    for key in mapping:
        if key not in allowed:
            raise ScenarioError(f"{path}{key}: unknown key")


def _get_mapping(doc, key, path, defaults_used, required=False):
    if key not in doc:
        if required:
            raise ScenarioError(f"{path}{key}: required section missing")
        return {}
    value = doc[key]
    if not isinstance(value, dict):
        raise ScenarioError(f"{path}{key}: expected an object")
    return value


def _number(value, path, minimum=None, maximum=None, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{path}: expected a number")
    if integer and not isinstance(value, int):
        raise ScenarioError(f"{path}: expected an integer")
    if not math.isfinite(value):
        raise ScenarioError(f"{path}: must be finite")
    if minimum is not None and value < minimum:
        raise ScenarioError(f"{path}: must be >= {minimum}")
    if maximum is not None and value > maximum:
        raise ScenarioError(f"{path}: must be <= {maximum}")
    return int(value) if integer else float(value)


def _point(value, path):
    if not isinstance(value, list) or len(value) != 2:
        raise ScenarioError(f"{path}: expected [x, y]")
    return (_number(value[0], f"{path}[0]"), _number(value[1], f"{path}[1]"))


def _field(section, key, path, defaults_used, **kwargs):
    full = f"{path}.{key}" if path else key
    if key in section:
        return _number(section[key], full, **kwargs)
    if full not in DEFAULTS:
        raise ScenarioError(f"{full}: required field missing")
    defaults_used.append(full)
    return DEFAULTS[full]


def _covariance(value, path):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        scale = _number(value, path, minimum=0.0)
        return ((scale, 0.0), (0.0, scale))
    if (
        not isinstance(value, list)
        or len(value) != 2
        or any(not isinstance(row, list) or len(row) != 2 for row in value)
    ):
        raise ScenarioError(f"{path}: expected a 2x2 matrix or isotropic scale")
    return tuple(
        tuple(_number(v, f"{path}[{i}][{j}]") for j, v in enumerate(row))
        for i, row in enumerate(value)
    )


def _belief(doc, path):
    _reject_unknown(doc, {"mean", "cov", "clearance"}, f"{path}.")
    if "mean" not in doc:
        raise ScenarioError(f"{path}.mean: required field missing")
    if "cov" not in doc:
        raise ScenarioError(f"{path}.cov: required field missing")
    mean = _point(doc["mean"], f"{path}.mean")
    cov = _covariance(doc["cov"], f"{path}.cov")
    try:
        return GaussianBelief2D(np.array(mean), np.array(cov))
    except ValueError as exc:
        raise ScenarioError(f"{path}.cov: {exc}") from None


def _motion(doc, path):
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: expected an object")
    kind = doc.get("kind")
    if kind == "constant_velocity":
        _reject_unknown(doc, {"kind", "start", "velocity"}, f"{path}.")
        for key in ("start", "velocity"):
            if key not in doc:
                raise ScenarioError(f"{path}.{key}: required field missing")
        return ConstantVelocityMotion(
            start=_point(doc["start"], f"{path}.start"),
            velocity=_point(doc["velocity"], f"{path}.velocity"),
        )
    if kind == "circular":
        _reject_unknown(
            doc, {"kind", "center", "radius", "angular_rate", "phase"}, f"{path}."
        )
        for key in ("center", "radius", "angular_rate"):
            if key not in doc:
                raise ScenarioError(f"{path}.{key}: required field missing")
        radius = _number(doc["radius"], f"{path}.radius")
        if radius <= 0:
            raise ScenarioError(f"{path}.radius: must be > 0")
        return CircularMotion(
            center=_point(doc["center"], f"{path}.center"),
            radius=radius,
            angular_rate=_number(doc["angular_rate"], f"{path}.angular_rate"),
            phase=_number(doc.get("phase", 0.0), f"{path}.phase"),
        )
    raise ScenarioError(
        f"{path}.kind: expected 'constant_velocity' or 'circular', got {kind!r}"
    )


def parse_scenario(text: str) -> Scenario:
    """Parse and validate a scenario document; defaults are recorded.

    Raises ScenarioError with a field-path message on any problem.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ScenarioError("top level: expected an object")
    _reject_unknown(
        doc,
        {
            "format_version",
            "robots",
            "targets",
            "sensing_zones",
            "comm_zones",
            "weights",
            "risk",
            "sensors",
            "dynamics",
            "ekf",
            "comm_range",
            "mc_samples",
            "master_seed",
        },
        "",
    )
    if "format_version" in doc and doc["format_version"] != FORMAT_VERSION:
        raise ScenarioError(
            f"format_version: expected {FORMAT_VERSION}, got {doc['format_version']}"
        )
    used = []

    robots = _get_mapping(doc, "robots", "", used, required=True)
    _reject_unknown(robots, {"starts", "u_max"}, "robots.")
    if "starts" not in robots or not isinstance(robots["starts"], list):
        raise ScenarioError("robots.starts: required list of [x, y] positions")
    starts = tuple(
        _point(p, f"robots.starts[{i}]") for i, p in enumerate(robots["starts"])
    )
    if len(starts) < 1:
        raise ScenarioError("robots.starts: need at least one robot")
    u_max = _field(robots, "u_max", "robots", used)
    if u_max <= 0:
        raise ScenarioError("robots.u_max: must be > 0")

    if "targets" not in doc or not isinstance(doc["targets"], list):
        raise ScenarioError("targets: required list (may be empty)")
    targets = []
    for i, entry in enumerate(doc["targets"]):
        if not isinstance(entry, dict):
            raise ScenarioError(f"targets[{i}]: expected an object")
        _reject_unknown(entry, {"motion"}, f"targets[{i}].")
        if "motion" not in entry:
            raise ScenarioError(f"targets[{i}].motion: required field missing")
        targets.append(_motion(entry["motion"], f"targets[{i}].motion"))

    sensing_zones = []
    if "sensing_zones" in doc:
        if not isinstance(doc["sensing_zones"], list):
            raise ScenarioError("sensing_zones: expected a list")
        for i, zdoc in enumerate(doc["sensing_zones"]):
            path = f"sensing_zones[{i}]"
            if not isinstance(zdoc, dict):
                raise ScenarioError(f"{path}: expected an object")
            if "clearance" not in zdoc:
                raise ScenarioError(f"{path}.clearance: required field missing")
            clearance = _number(zdoc["clearance"], f"{path}.clearance")
            if clearance <= 0:
                raise ScenarioError(f"{path}.clearance: must be > 0")
            sensing_zones.append(SensingZone(_belief(zdoc, path), clearance))
    else:
        used.append("sensing_zones")

    comm_zones = []
    if "comm_zones" in doc:
        if not isinstance(doc["comm_zones"], list):
            raise ScenarioError("comm_zones: expected a list")
        for i, zdoc in enumerate(doc["comm_zones"]):
            path = f"comm_zones[{i}]"
            if not isinstance(zdoc, dict):
                raise ScenarioError(f"{path}: expected an object")
            if "clearance" in zdoc:
                raise ScenarioError(f"{path}.clearance: not valid for comm zones")
            comm_zones.append(CommZone(_belief(zdoc, path)))
    else:
        used.append("comm_zones")

    weights_doc = _get_mapping(doc, "weights", "", used)
    _reject_unknown(weights_doc, {"w1", "w2"}, "weights.")
    risk_doc = _get_mapping(doc, "risk", "", used)
    _reject_unknown(risk_doc, {"eps1", "eps2", "delta2"}, "risk.")
    if sensing_zones and "eps1" not in risk_doc:
        raise ScenarioError("risk.eps1: required when sensing_zones are declared")
    if comm_zones and "eps2" not in risk_doc:
        raise ScenarioError("risk.eps2: required when comm_zones are declared")
    if comm_zones and "delta2" not in risk_doc:
        raise ScenarioError("risk.delta2: required when comm_zones are declared")
    sensors_doc = _get_mapping(doc, "sensors", "", used)
    _reject_unknown(
        sensors_doc, {"a_d", "lambda_d", "a_theta", "lambda_theta"}, "sensors."
    )
    dynamics_doc = _get_mapping(doc, "dynamics", "", used)
    _reject_unknown(dynamics_doc, {"dt", "steps"}, "dynamics.")
    ekf_doc = _get_mapping(doc, "ekf", "", used)
    _reject_unknown(ekf_doc, {"p0", "q"}, "ekf.")

    try:
        weights = PlannerWeights(
            w1=_field(weights_doc, "w1", "weights", used, minimum=0.0),
            w2=_field(weights_doc, "w2", "weights", used, minimum=0.0),
        )
        risk = RiskParams(
            eps1=_field(risk_doc, "eps1", "risk", used),
            eps2=_field(risk_doc, "eps2", "risk", used),
            delta2=_field(risk_doc, "delta2", "risk", used),
        )
        sensors = SensorParams(
            a_d=_field(sensors_doc, "a_d", "sensors", used),
            lambda_d=_field(sensors_doc, "lambda_d", "sensors", used),
            a_theta=_field(sensors_doc, "a_theta", "sensors", used),
            lambda_theta=_field(sensors_doc, "lambda_theta", "sensors", used),
        )
    except ScenarioError:
        raise
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None

    dt = _field(dynamics_doc, "dt", "dynamics", used)
    if dt <= 0:
        raise ScenarioError("dynamics.dt: must be > 0")
    steps = _field(dynamics_doc, "steps", "dynamics", used, integer=True, minimum=1)
    p0 = _field(ekf_doc, "p0", "ekf", used)
    if p0 <= 0:
        raise ScenarioError("ekf.p0: must be > 0")
    q = _field(ekf_doc, "q", "ekf", used, minimum=0.0)
    comm_range = _field(doc, "comm_range", "", used)
    if comm_range <= 0:
        raise ScenarioError("comm_range: must be > 0")
    mc_samples = _field(doc, "mc_samples", "", used, integer=True, minimum=1)
    master_seed = _field(doc, "master_seed", "", used, integer=True, minimum=0)

    return Scenario(
        robot_starts=starts,
        u_max=u_max,
        targets=tuple(targets),
        sensing_zones=tuple(sensing_zones),
        comm_zones=tuple(comm_zones),
        weights=weights,
        risk=risk,
        sensors=sensors,
        dt=dt,
        steps=steps,
        p0=p0,
        q=q,
        comm_range=comm_range,
        mc_samples=mc_samples,
        master_seed=master_seed,
        applied_defaults=tuple(used),
    )


def serialize_scenario(scenario: Scenario) -> str:
    """Stable, diffable text form; parse(serialize(s)) == s."""
    return json.dumps(scenario.to_document(), indent=2) + "\n"


# ---------------------------------------------------------------------------
# Run-log output
# ---------------------------------------------------------------------------


def _write_text_atomic(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_log_csv(log: RunLog) -> str:
    """Render the per-step table (full float precision, fixed column order)."""
    num_robots = len(log.scenario_document["robots"]["starts"])
    num_targets = len(log.scenario_document["targets"])
    columns = ["t"]
    for i in range(num_robots):
        columns += [f"robot{i}_x", f"robot{i}_y"]
    for j in range(num_targets):
        columns += [f"target{j}_x", f"target{j}_y"]
    for j in range(num_targets):
        columns += [f"est{j}_x", f"est{j}_y"]
    columns += [
        "trace",
        "sensing_risk",
        "jamming_risk",
        "residual_min",
        "status",
    ]
    lines = [",".join(columns)]
    for rec in log.records:
        row = [str(rec.t)]
        row += [repr(v) for v in rec.robot_positions]
        row += [repr(v) for v in rec.true_target_positions]
        row += [repr(v) for v in rec.estimate_mean]
        row += [
            repr(rec.trace),
            repr(rec.sensing_risk),
            repr(rec.jamming_risk),
            repr(rec.residual_min),
            rec.solver_status,
        ]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def write_run_log(log: RunLog, out_dir: str):
    """Write run_log.csv and run_meta.json into out_dir (atomic, stable)."""
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "scenario_digest": log.scenario_digest,
        "seeds": dict(log.seeds),
        "applied_defaults": list(log.applied_defaults),
        "scenario": log.scenario_document,
        "steps": len(log.records),
    }
    _write_text_atomic(os.path.join(out_dir, "run_log.csv"), run_log_csv(log))
    _write_text_atomic(
        os.path.join(out_dir, "run_meta.json"),
        json.dumps(meta, indent=2, sort_keys=True) + "\n",
    )


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------


def _load_scenario_file(path: str) -> Scenario:
    with open(path) as handle:
        return parse_scenario(handle.read())


def _cmd_run(args) -> int:
    scenario = _load_scenario_file(args.scenario)
    if args.seed is not None:
        scenario = replace(scenario, master_seed=args.seed)
    if args.steps is not None:
        scenario = replace(scenario, steps=args.steps)
    log = run(scenario)
    write_run_log(log, args.out)
    print(f"wrote {len(log.records)} steps to {args.out} (digest {log.scenario_digest[:12]})")
    return 0


def _cmd_validate(args) -> int:
    scenario = _load_scenario_file(args.scenario)
    print(f"{args.scenario}: valid (digest {scenario.digest()[:12]})")
    if scenario.applied_defaults:
        print("defaults applied: " + ", ".join(scenario.applied_defaults))
    return 0


def _cmd_risk_check(args) -> int:
    """Re-estimate per-step risks with a large sample budget and audit them."""
    scenario = _load_scenario_file(args.scenario)
    if args.seed is not None:
        scenario = replace(scenario, master_seed=args.seed)
    log = run(scenario)
    n = args.samples
    eps1, eps2 = scenario.risk.eps1, scenario.risk.eps2
    bound1 = eps1 + 3 * math.sqrt(eps1 * (1 - eps1) / n)
    bound2 = eps2 + 3 * math.sqrt(eps2 * (1 - eps2) / n)
    worst_sensing = 0.0
    worst_jamming = 0.0
    for rec in log.records:
        positions = np.asarray(rec.robot_positions).reshape(-1, 2)
        if scenario.sensing_zones:
            worst_sensing = max(
                worst_sensing,
                mc_sensor_failure(
                    positions,
                    scenario.sensing_zones,
                    n,
                    (scenario.master_seed, 10, rec.t),
                ),
            )
        if scenario.comm_zones:
            worst_jamming = max(
                worst_jamming,
                mc_jamming(
                    positions,
                    scenario.comm_zones,
                    scenario.risk.delta2,
                    scenario.comm_range,
                    n,
                    (scenario.master_seed, 11, rec.t),
                ),
            )
    ok = True
    if scenario.sensing_zones:
        verdict = "OK" if worst_sensing <= bound1 else "VIOLATED"
        ok &= worst_sensing <= bound1
        print(
            f"sensing: max per-step risk {worst_sensing:.5f} "
            f"vs eps1+3se {bound1:.5f} [{verdict}]"
        )
    if scenario.comm_zones:
        verdict = "OK" if worst_jamming <= bound2 else "VIOLATED"
        ok &= worst_jamming <= bound2
        print(
            f"jamming: max per-step risk {worst_jamming:.5f} "
            f"vs eps2+3se {bound2:.5f} [{verdict}]"
        )
    if not scenario.sensing_zones and not scenario.comm_zones:
        print("no danger zones declared; nothing to audit")
    return 0 if ok else 1


def _cmd_plotdata(args) -> int:
    log_path = os.path.join(args.logdir, "run_log.csv")
    with open(log_path) as handle:
        lines = handle.read().splitlines()
    if not lines:
        raise ScenarioError(f"{log_path}: empty log")
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]

    def series(name):
        idx = header.index(name)
        return [(row[0], row[idx]) for row in rows]

    for name in ("trace", "sensing_risk", "jamming_risk", "residual_min"):
        out = os.path.join(args.logdir, f"plot_{name}.csv")
        body = "\n".join(f"{t},{v}" for t, v in series(name))
        _write_text_atomic(out, f"t,{name}\n{body}\n")
    path_cols = [
        c for c in header if c.startswith(("robot", "target", "est")) or c == "t"
    ]
    idxs = [header.index(c) for c in path_cols]
    body = "\n".join(",".join(row[i] for i in idxs) for row in rows)
    _write_text_atomic(
        os.path.join(args.logdir, "plot_paths.csv"),
        ",".join(path_cols) + "\n" + body + "\n",
    )
    print(f"wrote plot series into {args.logdir}")
    return 0


def cli_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="zonetrack",
        description="risk-aware multi-robot target tracking simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate a scenario and write logs")
    p_run.add_argument("scenario")
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--steps", type=int, default=None)
    p_run.set_defaults(func=_cmd_run)

    p_val = sub.add_parser("validate", help="check a scenario file")
    p_val.add_argument("scenario")
    p_val.set_defaults(func=_cmd_validate)

    p_risk = sub.add_parser(
        "risk-check", help="audit per-step risks with a large sample budget"
    )
    p_risk.add_argument("scenario")
    p_risk.add_argument("--samples", type=int, default=100_000)
    p_risk.add_argument("--seed", type=int, default=None)
    p_risk.set_defaults(func=_cmd_risk_check)

    p_plot = sub.add_parser("plotdata", help="emit per-figure series from a log dir")
    p_plot.add_argument("logdir")
    p_plot.set_defaults(func=_cmd_plotdata)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli_main())
