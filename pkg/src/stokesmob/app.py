"""Scenario configuration, the simulation driver, and measurement harnesses.

A scenario is a single JSON document: bodies (shape, resolution, initial
pose), a forcing model (gravity, a three-body swimmer schedule, an applied
magnetic field, or explicit load tables), solver and stepping controls, and
output selections. Validation is fail-fast and total: unknown keys anywhere
in the document are rejected so typos cannot silently disable a setting.

The driver advances the bodies with the rigid-body stepper and writes one
trajectory row per body per accepted step. Optional per-frame surface dumps
go to legacy-VTK polydata colored by the magnitude of the combined surface
density, and an optional profile report buckets wall time into solve,
update, and output stages.

The harnesses rerun the study configurations: self-convergence of swimmer
trajectories under time-step or resolution refinement, and per-stage timing
on sphere lattices sedimenting under gravity.
"""

import json
import math
import os
import re
import time

import numpy as np

from . import layers
from .dynamics import RigidBodyStepper, StepError
from .magnetics import MagneticConfig, MagneticCoupling
from .mobility import ConvergenceError, GeometryError, MobilitySolver
from .rotations import quat_to_matrix
from .surface import Body, Shape, load_shape_library

CONFIG_VERSION = 1

TRAJECTORY_HEADER = ("t,body,cx,cy,cz,qw,qx,qy,qz,"
                     "vx,vy,vz,wx,wy,wz,iters,residual")

_TOP_KEYS = {"version", "seed", "viscosity", "shape_library", "bodies",
             "forcing", "solver", "stepping", "output"}
_BODY_KEYS = {"shape", "p", "center", "orientation", "mass_deficit", "jitter"}
_FORCING_KEYS = {
    "gravity": {"kind", "gravity"},
    "swimmer": {"kind", "torques"},
    "magnetic": {"kind", "field", "mu_ratio"},
    "explicit": {"kind", "times", "forces", "torques"},
    "none": {"kind"},
}
_SOLVER_KEYS = {"tol", "max_iter", "preconditioner", "dense_debug"}
_STEPPING_KEYS = {"scheme", "dt", "t_final", "contact", "contact_delta"}
_OUTPUT_KEYS = {"trajectory", "surfaces", "surface_prefix", "profile"}


class ConfigError(Exception):
    """Scenario document rejected before any simulation work started."""


class SimulationError(Exception):
    """A step failed mid-run; the message carries step and stage."""


def _require_mapping(value, where):
    if not isinstance(value, dict):
        raise ConfigError("%s must be a JSON object" % where)
    return value


def _check_keys(mapping, allowed, where):
    for key in mapping:
        if key not in allowed:
            raise ConfigError("unknown key %r in %s" % (key, where))


def _number(mapping, key, where, default=None, minimum=None,
            exclusive=False):
    value = mapping.get(key, default)
    if value is None:
        raise ConfigError("%s requires %r" % (where, key))
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError("%s.%s must be a number" % (where, key))
    value = float(value)
    if minimum is not None:
        bad = value <= minimum if exclusive else value < minimum
        if bad:
            raise ConfigError("%s.%s must be %s %g"
                              % (where, key, ">" if exclusive else ">=",
                                 minimum))
    return value


def _integer(mapping, key, where, default=None, minimum=None):
    value = mapping.get(key, default)
    if value is None:
        raise ConfigError("%s requires %r" % (where, key))
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError("%s.%s must be an integer" % (where, key))
    if minimum is not None and value < minimum:
        raise ConfigError("%s.%s must be >= %d" % (where, key, minimum))
    return value


def _flag(mapping, key, where, default):
    value = mapping.get(key, default)
    if not isinstance(value, bool):
        raise ConfigError("%s.%s must be true or false" % (where, key))
    return value


def _vector(value, where, length=3):
    if (not isinstance(value, (list, tuple)) or len(value) != length
            or any(isinstance(v, bool) or not isinstance(v, (int, float))
                   for v in value)):
        raise ConfigError("%s must be a list of %d numbers" % (where, length))
    return np.array([float(v) for v in value])


_SHAPE_CALL = re.compile(r"\s*(sphere|ellipsoid)\s*\(([^()]*)\)\s*$")


def parse_shape(text, library=None):
    """Resolve a shape choice: sphere(a), ellipsoid(a,b,c), or a library name."""
    if not isinstance(text, str):
        raise ConfigError("shape must be a string")
    match = _SHAPE_CALL.match(text)
    if match:
        name, arglist = match.groups()
        try:
            args = [float(a) for a in arglist.split(",")]
        except ValueError:
            raise ConfigError("bad shape arguments in %r" % text) from None
        if any(a <= 0 for a in args):
            raise ConfigError("shape dimensions must be positive in %r" % text)
        if name == "sphere":
            if len(args) != 1:
                raise ConfigError("sphere takes one radius, got %r" % text)
            return Shape.sphere(args[0])
        if len(args) != 3:
            raise ConfigError("ellipsoid takes three semi-axes, got %r" % text)
        return Shape.ellipsoid(*args)
    if library and text in library:
        return library[text]
    raise ConfigError("unknown shape %r (not a builtin, not in the library)"
                      % text)


class ScenarioConfig:
    """Validated scenario description ready to be built into live objects."""

    def __init__(self, doc):
        doc = _require_mapping(doc, "the configuration")
        _check_keys(doc, _TOP_KEYS, "the configuration")
        version = doc.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError("unsupported config version %r (expected %d)"
                              % (version, CONFIG_VERSION))
        self.seed = _integer(doc, "seed", "config", default=0, minimum=0)
        self.viscosity = _number(doc, "viscosity", "config", default=1.0,
                                 minimum=0.0, exclusive=True)
        self.shape_library = doc.get("shape_library")
        if self.shape_library is not None \
                and not isinstance(self.shape_library, str):
            raise ConfigError("config.shape_library must be a path string")

        bodies = doc.get("bodies")
        if not isinstance(bodies, list) or not bodies:
            raise ConfigError("config.bodies must be a non-empty list")
        self.bodies = [self._body_entry(entry, i)
                       for i, entry in enumerate(bodies)]

        forcing = _require_mapping(doc.get("forcing", {"kind": "none"}),
                                   "config.forcing")
        kind = forcing.get("kind")
        if kind not in _FORCING_KEYS:
            raise ConfigError("config.forcing.kind must be one of %s"
                              % sorted(_FORCING_KEYS))
        _check_keys(forcing, _FORCING_KEYS[kind], "config.forcing")
        self.forcing = self._forcing_entry(forcing, kind)

        solver = _require_mapping(doc.get("solver", {}), "config.solver")
        _check_keys(solver, _SOLVER_KEYS, "config.solver")
        self.tol = _number(solver, "tol", "config.solver", default=1e-6,
                           minimum=0.0, exclusive=True)
        self.max_iter = _integer(solver, "max_iter", "config.solver",
                                 default=200, minimum=1)
        self.preconditioner = _flag(solver, "preconditioner",
                                    "config.solver", True)
        self.dense_debug = _flag(solver, "dense_debug", "config.solver", False)

        stepping = _require_mapping(doc.get("stepping"), "config.stepping") \
            if "stepping" in doc else None
        if stepping is None:
            raise ConfigError("config requires 'stepping'")
        _check_keys(stepping, _STEPPING_KEYS, "config.stepping")
        self.scheme = stepping.get("scheme", "rk4")
        if self.scheme not in ("euler", "heun", "rk4"):
            raise ConfigError("config.stepping.scheme must be euler, heun, "
                              "or rk4")
        self.dt = _number(stepping, "dt", "config.stepping",
                          minimum=0.0, exclusive=True)
        self.t_final = _number(stepping, "t_final", "config.stepping",
                               minimum=0.0)
        self.contact = _flag(stepping, "contact", "config.stepping", True)
        self.contact_delta = None
        if stepping.get("contact_delta") is not None:
            self.contact_delta = _number(stepping, "contact_delta",
                                         "config.stepping",
                                         minimum=0.0, exclusive=True)

        output = _require_mapping(doc.get("output", {}), "config.output")
        _check_keys(output, _OUTPUT_KEYS, "config.output")
        self.trajectory = output.get("trajectory", "trajectory.csv")
        if not isinstance(self.trajectory, str) or not self.trajectory:
            raise ConfigError("config.output.trajectory must be a file name")
        self.surfaces = _flag(output, "surfaces", "config.output", False)
        self.surface_prefix = output.get("surface_prefix", "frame")
        if not isinstance(self.surface_prefix, str) or not self.surface_prefix:
            raise ConfigError("config.output.surface_prefix must be a name")
        self.profile = _flag(output, "profile", "config.output", False)

    @staticmethod
    def _body_entry(entry, index):
        where = "config.bodies[%d]" % index
        entry = _require_mapping(entry, where)
        _check_keys(entry, _BODY_KEYS, where)
        if "shape" not in entry:
            raise ConfigError("%s requires 'shape'" % where)
        orientation = entry.get("orientation", [1.0, 0.0, 0.0, 0.0])
        orientation = _vector(orientation, where + ".orientation", length=4)
        if np.linalg.norm(orientation) == 0.0:
            raise ConfigError("%s.orientation must be a nonzero quaternion"
                              % where)
        return {
            "shape": entry["shape"],
            "p": _integer(entry, "p", where, minimum=2),
            "center": _vector(entry.get("center", [0.0, 0.0, 0.0]),
                              where + ".center"),
            "orientation": orientation / np.linalg.norm(orientation),
            "mass_deficit": _number(entry, "mass_deficit", where, default=1.0),
            "jitter": _number(entry, "jitter", where, default=0.0,
                              minimum=0.0),
        }

    def _forcing_entry(self, forcing, kind):
        out = {"kind": kind}
        if kind == "gravity":
            out["gravity"] = _vector(forcing.get("gravity", [0.0, 0.0, -1.0]),
                                     "config.forcing.gravity")
        elif kind == "swimmer":
            out["torques"] = _flag(forcing, "torques", "config.forcing", False)
            if len(self.bodies) != 3:
                raise ConfigError("swimmer forcing needs exactly 3 bodies, "
                                  "got %d" % len(self.bodies))
        elif kind == "magnetic":
            if "field" not in forcing:
                raise ConfigError("config.forcing requires 'field'")
            out["field"] = _vector(forcing["field"], "config.forcing.field")
            out["mu_ratio"] = _number(forcing, "mu_ratio", "config.forcing",
                                      minimum=0.0, exclusive=True)
        elif kind == "explicit":
            out.update(self._explicit_tables(forcing))
        return out

    def _explicit_tables(self, forcing):
        n = len(self.bodies)
        times = forcing.get("times")
        if times is not None:
            if (not isinstance(times, list) or len(times) < 2
                    or any(isinstance(v, bool)
                           or not isinstance(v, (int, float))
                           for v in times)):
                raise ConfigError("config.forcing.times must list at least "
                                  "two numbers")
            times = np.array([float(v) for v in times])
            if np.any(np.diff(times) <= 0):
                raise ConfigError("config.forcing.times must increase")
        rows = len(times) if times is not None else 1

        def table(key):
            raw = forcing.get(key)
            if raw is None:
                return np.zeros((rows, n, 3))
            where = "config.forcing.%s" % key
            if times is None:
                if not isinstance(raw, list) or len(raw) != n:
                    raise ConfigError("%s must list one load per body"
                                      % where)
                return np.array([_vector(v, where) for v in raw])[None]
            if not isinstance(raw, list) or len(raw) != rows:
                raise ConfigError("%s must have one row per time" % where)
            body_rows = []
            for row in raw:
                if not isinstance(row, list) or len(row) != n:
                    raise ConfigError("%s rows must list one load per body"
                                      % where)
                body_rows.append([_vector(v, where) for v in row])
            return np.array(body_rows)

        return {"times": times, "forces": table("forces"),
                "torques": table("torques")}

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as err:
            raise ConfigError("cannot read config %s: %s" % (path, err)) \
                from err
        except json.JSONDecodeError as err:
            raise ConfigError("config %s is not valid JSON: %s"
                              % (path, err)) from err
        return cls(doc)


def swimmer_forcing(t, torques=False):
    """Periodic three-body load schedule; forces and torques sum to zero.

    The leading body is pushed hardest at t=0 and the asymmetry between the
    two consecutive pairs reverses over the cycle, which is what rectifies
    the motion into a net drift. With torques enabled the same coefficients
    drive rotations about the second axis.
    """
    c = np.array([2.0 * np.cos(t) + np.sin(t),
                  np.sin(t) - np.cos(t),
                  -np.cos(t) - 2.0 * np.sin(t)])
    forces = np.outer(c, [1.0, 0.0, 0.0])
    if torques:
        return forces, np.outer(c, [0.0, 1.0, 0.0])
    return forces, np.zeros((3, 3))


def _build_bodies(config):
    library = {}
    if config.shape_library is not None:
        try:
            library = load_shape_library(config.shape_library)
        except OSError as err:
            raise ConfigError("cannot read shape library %s: %s"
                              % (config.shape_library, err)) from err
    rng = np.random.default_rng(config.seed)
    bodies = []
    for entry in config.bodies:
        shape = parse_shape(entry["shape"], library)
        center = entry["center"]
        if entry["jitter"] > 0.0:
            center = center + entry["jitter"] * rng.standard_normal(3)
        bodies.append(Body(shape, entry["p"], center=center,
                           orientation=entry["orientation"]))
    return bodies


def _build_models(config, bodies, cache):
    """Forcing models for the stepper; loads are pre-divided by viscosity.

    The solver works at unit viscosity, and rigid velocities scale inversely
    with viscosity at fixed loads, so scaling the loads once here gives the
    physical trajectory without touching the operators.
    """
    inv = 1.0 / config.viscosity
    kind = config.forcing["kind"]
    n = len(bodies)
    if kind == "none":
        zero = np.zeros((n, 3))
        return (lambda t, bs: (zero, zero)), None
    if kind == "gravity":
        g = config.forcing["gravity"]
        deficits = np.array([entry["mass_deficit"]
                             for entry in config.bodies])
        forces = inv * np.outer(deficits, g)
        zero = np.zeros((n, 3))
        return (lambda t, bs: (forces, zero)), None
    if kind == "swimmer":
        torques = config.forcing["torques"]

        def model(t, bs):
            F, T = swimmer_forcing(t, torques=torques)
            return inv * F, inv * T

        return model, None
    if kind == "explicit":
        times = config.forcing["times"]
        forces = inv * config.forcing["forces"]
        torques = inv * config.forcing["torques"]
        if times is None:
            return (lambda t, bs: (forces[0], torques[0])), None

        def model(t, bs):
            tc = np.clip(t, times[0], times[-1])
            F = np.stack([np.interp(tc, times, forces[:, i, k])
                          for i in range(n) for k in range(3)])
            T = np.stack([np.interp(tc, times, torques[:, i, k])
                          for i in range(n) for k in range(3)])
            return F.reshape(n, 3), T.reshape(n, 3)

        return model, None
    magnetic = MagneticConfig(field=config.forcing["field"],
                              mu_ratio=config.forcing["mu_ratio"])
    coupling = MagneticCoupling(magnetic, cache=cache,
                                tol=min(config.tol, 1e-8))

    def density_model(t, bs):
        return [inv * traction for traction in coupling(t, bs)]

    return None, density_model


def _build_scenario(config):
    bodies = _build_bodies(config)
    cache = layers.ShapeOperatorCache()
    try:
        solver = MobilitySolver(bodies, cache=cache, tol=config.tol,
                                maxiter=config.max_iter,
                                use_preconditioner=config.preconditioner,
                                freeze=True if config.dense_debug else "auto")
    except GeometryError as err:
        raise ConfigError("invalid initial configuration: %s" % err) from err
    force_model, density_model = _build_models(config, bodies, cache)
    stepper = RigidBodyStepper(bodies, force_model=force_model,
                               density_model=density_model, solver=solver,
                               scheme=config.scheme, contact=config.contact,
                               contact_delta=config.contact_delta)
    return bodies, solver, stepper


def _format_row(t, index, body, velocity, omega, iters, residual):
    values = ([t] + list(body.center) + list(body.orientation)
              + list(velocity) + list(omega))
    parts = [repr(float(values[0])), str(index)]
    parts += [repr(float(v)) for v in values[1:]]
    parts += [str(int(iters)), repr(float(residual))]
    return ",".join(parts)


def write_surface_frame(path, bodies, densities):
    """Legacy-VTK polydata of the surfaces colored by density magnitude.

    Quads connect neighboring grid nodes with periodic wrap in the azimuth;
    the open polar caps are a property of the grid, which carries no pole
    nodes.
    """
    points = []
    quads = []
    scalars = []
    offset = 0
    for body, density in zip(bodies, densities):
        grid = body.ref.grid
        nth, nph = len(grid.theta1d), len(grid.phi1d)
        points.append(body.positions())
        scalars.append(np.linalg.norm(density, axis=1))
        for i in range(nth - 1):
            for j in range(nph):
                a = offset + i * nph + j
                b = offset + (i + 1) * nph + j
                c = offset + (i + 1) * nph + (j + 1) % nph
                d = offset + i * nph + (j + 1) % nph
                quads.append((a, b, c, d))
        offset += body.num_nodes
    points = np.vstack(points)
    scalars = np.concatenate(scalars)
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("rigid body surfaces\n")
        fh.write("ASCII\nDATASET POLYDATA\n")
        fh.write("POINTS %d float\n" % len(points))
        for x, y, z in points:
            fh.write("%.9g %.9g %.9g\n" % (x, y, z))
        fh.write("POLYGONS %d %d\n" % (len(quads), 5 * len(quads)))
        for quad in quads:
            fh.write("4 %d %d %d %d\n" % quad)
        fh.write("POINT_DATA %d\n" % len(points))
        fh.write("SCALARS density_magnitude float 1\n")
        fh.write("LOOKUP_TABLE default\n")
        for value in scalars:
            fh.write("%.9g\n" % value)


def run_scenario(config, out_dir=".", dump_surfaces=False, profile=False):
    """Evolve a scenario and write its outputs; returns a run summary.

    Every accepted step appends one trajectory row per body carrying the
    end-of-step pose and the start-of-step rigid velocities, so a zero-step
    run leaves just the header. Surface frames, when enabled, pair the
    end-of-step pose with the densities of the first stage solve.
    """
    if isinstance(config, str):
        config = ScenarioConfig.from_file(config)
    elif isinstance(config, dict):
        config = ScenarioConfig(config)
    dump_surfaces = dump_surfaces or config.surfaces
    profile = profile or config.profile
    bodies, solver, stepper = _build_scenario(config)

    os.makedirs(out_dir, exist_ok=True)
    trajectory_path = os.path.join(out_dir, config.trajectory)
    n_steps = int(round(config.t_final / config.dt))
    buckets = {"solve": 0.0, "update": 0.0, "output": 0.0,
               "apply": 0.0, "apply_calls": 0}
    iterations = []

    wall0 = time.perf_counter()
    with open(trajectory_path, "w") as fh:
        fh.write(TRAJECTORY_HEADER + "\n")
        fh.flush()
        t = 0.0
        for k in range(n_steps):
            try:
                record = stepper.step(t, config.dt)
            except (StepError, ConvergenceError) as err:
                raise SimulationError("step %d failed: %s" % (k + 1, err)) \
                    from err
            t = (k + 1) * config.dt
            buckets["solve"] += stepper.last_timings["solve"]
            buckets["update"] += stepper.last_timings["update"]
            buckets["apply"] += stepper.last_timings["apply"]
            buckets["apply_calls"] += stepper.last_timings["apply_calls"]
            iterations.append(record.iterations)
            t_out = time.perf_counter()
            for i, body in enumerate(bodies):
                fh.write(_format_row(t, i, body, record.velocity[i],
                                     record.omega[i], record.iterations,
                                     record.residual) + "\n")
            fh.flush()
            if dump_surfaces:
                frame = os.path.join(out_dir, "%s_%06d.vtk"
                                     % (config.surface_prefix, k + 1))
                write_surface_frame(frame, bodies,
                                    stepper.last_result.total_density)
            buckets["output"] += time.perf_counter() - t_out
    wall = time.perf_counter() - wall0

    summary = {
        "steps": n_steps,
        "t_final": n_steps * config.dt,
        "bodies": len(bodies),
        "trajectory": trajectory_path,
        "iterations": iterations,
        "wall": wall,
    }
    if profile:
        accounted = buckets["solve"] + buckets["update"] + buckets["output"]
        report = dict(buckets)
        report["wall"] = wall
        report["accounted"] = accounted / wall if wall > 0 else 1.0
        summary["profile"] = report
        with open(os.path.join(out_dir, "profile.txt"), "w") as fh:
            fh.write(format_profile(report, n_steps))
    return summary


def format_profile(report, steps):
    lines = ["profile over %d steps (seconds)" % steps]
    denom = max(steps, 1)
    for stage in ("solve", "update", "output"):
        lines.append("  %-7s total %8.3f   per step %8.4f"
                     % (stage, report[stage], report[stage] / denom))
    lines.append("  %-7s total %8.3f   per call %8.4f  (%d calls)"
                 % ("apply", report["apply"],
                    report["apply"] / max(report["apply_calls"], 1),
                    report["apply_calls"]))
    lines.append("  wall %.3f s, accounted %.1f%%"
                 % (report["wall"], 100.0 * report["accounted"]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Harnesses


def _swimmer_shape(name):
    if name == "sphere":
        return Shape.sphere(1.0)
    match = re.fullmatch(r"ellipsoid-([0-9.]+)", name)
    if match:
        a = float(match.group(1))
        if not 0.0 < a <= 1.0:
            raise ValueError("ellipsoid aspect must be in (0, 1], got %r"
                             % name)
        return Shape.ellipsoid(a, a, 1.0)
    raise ValueError("unknown harness shape %r (use sphere or ellipsoid-a)"
                     % name)


def _swimmer_run(shape, p, scheme, steps, tol, cache):
    bodies = [Body(shape, p, center=np.array([x, 0.0, 0.0]))
              for x in (-4.0, 0.0, 4.0)]
    solver = MobilitySolver(bodies, cache=cache, tol=tol, maxiter=400)

    def model(t, bs):
        return swimmer_forcing(t, torques=True)

    stepper = RigidBodyStepper(bodies, force_model=model, solver=solver,
                               scheme=scheme, contact=False)
    dt = 2.0 * np.pi / steps
    for k in range(steps):
        stepper.step(k * dt, dt)
    centers = np.array([b.center for b in bodies])
    rotations = np.array([quat_to_matrix(b.orientation) for b in bodies])
    return centers, rotations


def _self_convergence(coarse, fine):
    centers = -math.log2(max(np.linalg.norm(c - f)
                             for c, f in zip(coarse[0], fine[0])))
    rotations = -math.log2(max(np.linalg.norm(c - f)
                               for c, f in zip(coarse[1], fine[1])))
    return centers, rotations


def convergence_harness(kind, scheme=None, shape="sphere", tol=1e-12,
                        out_path=None):
    """Swimmer self-convergence tables under dt or resolution refinement.

    Temporal rows compare each step count against its doubling at fixed
    p=8; spatial rows compare each resolution against its doubling at a
    fixed step count. Exponents are -log2 of the largest per-body final
    pose difference, so an increment of q per row means order-q accuracy.
    """
    shape = _swimmer_shape(shape) if isinstance(shape, str) else shape
    cache = layers.ShapeOperatorCache()
    rows = []
    if kind == "temporal":
        scheme = scheme or "rk4"
        counts = [16, 32, 64, 128, 256]
        finals = {m: _swimmer_run(shape, 8, scheme, m, tol, cache)
                  for m in counts}
        for m in counts[:-1]:
            e_c, e_r = _self_convergence(finals[m], finals[2 * m])
            rows.append({"steps": m, "dt": 2.0 * np.pi / m,
                         "E_C": e_c, "E_R": e_r})
        header = "steps,dt,E_C,E_R"
        fields = ("steps", "dt", "E_C", "E_R")
    elif kind == "spatial":
        scheme = scheme or "euler"
        orders = [2, 4, 8, 16]
        finals = {p: _swimmer_run(shape, p, scheme, 128, tol, cache)
                  for p in orders}
        for p in orders[:-1]:
            e_c, e_r = _self_convergence(finals[p], finals[2 * p])
            rows.append({"p": p, "E_C": e_c, "E_R": e_r})
        header = "p,E_C,E_R"
        fields = ("p", "E_C", "E_R")
    else:
        raise ValueError("kind must be 'temporal' or 'spatial', got %r"
                         % kind)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(header + "\n")
            for row in rows:
                fh.write(",".join("%.6g" % row[f] if isinstance(row[f], float)
                                  else str(row[f]) for f in fields) + "\n")
    increments = [rows[i + 1]["E_C"] - rows[i]["E_C"]
                  for i in range(len(rows) - 1)]
    return {"kind": kind, "scheme": scheme, "rows": rows,
            "increments": increments}


def _lattice_bodies(n, p, spacing):
    if n < 4 or n % 4:
        raise ValueError("lattice size must be a positive multiple of 4, "
                         "got %d" % n)
    shape = Shape.sphere(1.0)
    bodies = []
    for k in range(n // 4):
        for j in range(2):
            for i in range(2):
                center = spacing * np.array([i, j, k], dtype=float)
                bodies.append(Body(shape, p, center=center))
    return bodies


def _inter_body_apply_time(solver, bodies, repeats=3):
    """Cross-body part of one operator application, by subtraction."""
    dens = [np.ones((b.num_nodes, 3)) for b in bodies]
    full = self_only = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        layers.fast_apply(layers.STOKES_TRACTION, bodies, dens, solver.cache)
        full = min(full, time.perf_counter() - t0)
        t0 = time.perf_counter()
        for body, d in zip(bodies, dens):
            solver.cache.block(body, layers.STOKES_TRACTION).apply(
                d, rotation=body.rotation())
        self_only = min(self_only, time.perf_counter() - t0)
    return max(full - self_only, 0.0), full


def scaling_harness(n_list, p_list, steps=2, dt=0.1, spacing=5.0,
                    out_path=None):
    """Per-stage timings for sedimenting sphere lattices.

    Each (p, n) row reports the mean per-application operator time, the
    mean solve and update walls per step, and the isolated inter-body part
    of one application. With direct summation the inter-body part grows
    quadratically in n; linear overall scaling needs a fast summation
    provider plugged into the solver.
    """
    rows = []
    for p in p_list:
        cache = layers.ShapeOperatorCache()
        for n in n_list:
            bodies = _lattice_bodies(n, p, spacing)
            solver = MobilitySolver(bodies, cache=cache, tol=1e-6,
                                    freeze=False)
            deficits = np.ones(len(bodies))

            def model(t, bs, deficits=deficits):
                return (np.outer(deficits, [0.0, 0.0, -1.0]),
                        np.zeros((len(bs), 3)))

            stepper = RigidBodyStepper(bodies, force_model=model,
                                       solver=solver, scheme="euler")
            totals = {"solve": 0.0, "update": 0.0, "apply": 0.0,
                      "apply_calls": 0}
            iters = []
            for k in range(steps):
                record = stepper.step(k * dt, dt)
                iters.append(record.iterations)
                for key in totals:
                    totals[key] += stepper.last_timings[key]
            inter, full = _inter_body_apply_time(solver, bodies)
            rows.append({
                "p": p, "n": n,
                "N": 3 * sum(b.num_nodes for b in bodies),
                "apply": totals["apply"] / max(totals["apply_calls"], 1),
                "solve": totals["solve"] / steps,
                "update": totals["update"] / steps,
                "inter_apply": inter,
                "iters": max(iters),
            })
    if out_path:
        with open(out_path, "w") as fh:
            fh.write("p,n,N,apply,solve,update,inter_apply,iters\n")
            for row in rows:
                fh.write("%d,%d,%d,%.6g,%.6g,%.6g,%.6g,%d\n"
                         % (row["p"], row["n"], row["N"], row["apply"],
                            row["solve"], row["update"], row["inter_apply"],
                            row["iters"]))
    return rows
