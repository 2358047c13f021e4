"""Command-line experiment runner.

    foliation-lab <subcommand> [--config cfg.json] [--seed N] [--out DIR] [--preset NAME] [--jobs N]

Subcommands: geometry-selftest, steps, trace, measure, entropy, report.  Every
run writes ``manifest.json`` (configuration, its hash, seed, files) and CSV
tables into the output directory; reruns with the same configuration and seed
produce byte-identical CSVs.  Exit codes: 0 ok, 2 configuration error,
3 numerical failure, 4 infeasible radius.
"""

from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import json
import math
import os
import sys
import warnings

import numpy as np

from . import disk_geometry as dg
from . import prescribed_steps as ps
from .entropy_lab import (
    EntropyError,
    SeparationError,
    automorphism_admissible_measure,
    automorphism_lower_bound,
    brody_bound,
    CircleSampler,
    comparability_constant,
    comparability_sample,
    default_rhos,
    entropy_gap,
    measure_scaling,
    prescribed_steps_bridge,
    probe_samples,
    rotation_admissible_measure,
    rotation_lower_bound,
    singular_interval_schedule,
)
from .foliation_core import FoliationError, make_chart
from .harmonic_measure import MeasureError, mass_near_singular, sample_m_xR
from .uniformization import InfeasibleRadius, LeafUniformization, UniformizationError

SCHEMA = "foliation-lab/config/1"
PRESETS = ("product", "linear", "saddle-node", "custom")
SUBCOMMANDS = ("geometry-selftest", "steps", "trace", "measure", "entropy", "report")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INFEASIBLE = 0, 2, 3, 4

DEFAULTS = {
    "schema": SCHEMA,
    "preset": "linear",
    "metric": "kobayashi",
    "half_width": 1.0,
    "guard_radius": None,
    "field": None,
    "base_point": [[0.3, 0.2], [0.4, -0.1]],
    "zeta1": [0.3, 0.1],
    "rho": "auto",
    "R_window": [3.0, 8.0],
    "R_step": 1.0,
    "eps": [0.25],
    "seeds": [0],
    "samples": 20000,
    "n_dir": 12,
    "automorphism_dirs": 16,
    "probe_leaves": 8,
    "selftest_count": 10000,
    "steps_cases": 50,
}


class ConfigError(ValueError):
    pass


# ---- configuration -----------------------------------------------------------------


def _positive(cfg, key):
    v = cfg[key]
    vals = v if isinstance(v, list) else [v]
    for x in vals:
        if not isinstance(x, (int, float)) or isinstance(x, bool) or not x > 0:
            raise ConfigError(f"{key} must be positive, got {v!r}")


def validate_config(raw):
    """Merge with defaults and check types and ranges; raises ConfigError."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    cfg = dict(DEFAULTS)
    cfg.update(raw)
    if cfg["schema"] != SCHEMA:
        raise ConfigError(f"schema must be {SCHEMA!r}")
    if cfg["preset"] not in PRESETS:
        raise ConfigError(f"preset must be one of {PRESETS}")
    if cfg["metric"] not in ("euclidean", "kobayashi"):
        raise ConfigError("metric must be 'euclidean' or 'kobayashi'")
    for key in ("half_width", "R_step", "eps", "samples", "n_dir", "automorphism_dirs", "probe_leaves",
                "selftest_count", "steps_cases"):
        _positive(cfg, key)
    if cfg["guard_radius"] is not None:
        _positive(cfg, "guard_radius")
    w = cfg["R_window"]
    if not (isinstance(w, list) and len(w) == 2 and 0 < w[0] < w[1]):
        raise ConfigError("R_window must be [R_lo, R_hi] with 0 < R_lo < R_hi")
    bp = cfg["base_point"]
    if not (isinstance(bp, list) and len(bp) == 2 and all(isinstance(c, list) and len(c) == 2 for c in bp)):
        raise ConfigError("base_point must be [[re, im], [re, im]]")
    if not (isinstance(cfg["zeta1"], list) and len(cfg["zeta1"]) == 2 and math.hypot(*cfg["zeta1"]) < 1):
        raise ConfigError("zeta1 must be [re, im] inside the unit disk")
    rho = cfg["rho"]
    if rho != "auto":
        if not (isinstance(rho, list) and len(rho) == 3 and 0 < rho[0] < rho[1] < rho[2]):
            raise ConfigError("rho must be 'auto' or [rho1, rho2, rho3] with 0 < rho1 < rho2 < rho3")
    if not (isinstance(cfg["seeds"], list) and cfg["seeds"] and all(isinstance(s, int) and s >= 0
                                                                       for s in cfg["seeds"])):
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    if cfg["preset"] == "custom" and cfg["field"] is not None and not isinstance(cfg["field"], dict):
        raise ConfigError("field must be a vector-field JSON object")
    return cfg


def config_hash(cfg):
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_config(path, overrides):
    raw = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    raw = dict(raw)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return validate_config(raw)


# ---- output helpers ---------------------------------------------------------------------


class Run:
    """Output directory, config hash and the list of written files."""

    def __init__(self, out, cfg, seed, subcommand, jobs):
        self.out = os.path.abspath(out)
        os.makedirs(self.out, exist_ok=True)
        self.cfg = cfg
        self.seed = seed
        self.subcommand = subcommand
        self.jobs = jobs
        self.hash = config_hash(cfg)
        self.files = []

    def path(self, name):
        p = os.path.abspath(os.path.join(self.out, name))
        if os.path.dirname(p) != self.out:
            raise ConfigError(f"refusing to write outside the output directory: {name}")
        return p

    def write_rows(self, name, header, rows):
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            fh.write(f"# config_hash={self.hash} seed={self.seed} subcommand={self.subcommand}\n")
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
        self.files.append(name)
        return p

    def write_external(self, name, writer):
        """Let ``writer(path)`` produce the file, then prepend the config-hash comment."""
        p = self.path(name)
        writer(p)
        with open(p) as fh:
            body = fh.read()
        with open(p, "w", newline="") as fh:
            fh.write(f"# config_hash={self.hash} seed={self.seed} subcommand={self.subcommand}\n")
            fh.write(body)
        self.files.append(name)
        return p

    def manifest(self, status, extra=None):
        data = {
            "config": self.cfg,
            "config_hash": self.hash,
            "seed": self.seed,
            "subcommand": self.subcommand,
            "jobs": self.jobs,
            "status": status,
            "files": sorted(self.files),
        }
        if extra:
            data.update(extra)
        with open(self.path("manifest.json"), "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return v


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _chart(cfg, seed):
    field = json.dumps(cfg["field"]) if cfg["field"] is not None else None
    return make_chart(cfg["preset"], cfg["metric"], cfg["half_width"], cfg["guard_radius"], field, seed)


def _base_point(cfg):
    return np.array([complex(*c) for c in cfg["base_point"]])


def _radii(cfg):
    lo, hi = cfg["R_window"]
    n = int(round((hi - lo) / cfg["R_step"]))
    return [float(lo + k * cfg["R_step"]) for k in range(n + 1)]


# ---- subcommands -------------------------------------------------------------------------


def cmd_geometry_selftest(run: Run):
    """Randomized invariant suites of the disk geometry."""
    n = int(run.cfg["selftest_count"])
    rng = np.random.default_rng(run.seed)
    rows = []

    def rand_aut(k, scale):
        z = scale * np.sqrt(rng.uniform(size=k)) * np.exp(2j * np.pi * rng.uniform(size=k))
        t = rng.uniform(-scale, scale, size=k)
        return [dg.DiskAutomorphism(complex(a), float(b)) for a, b in zip(z, t)]

    # composition normal form vs pointwise composition
    A, B = rand_aut(n, 0.9), rand_aut(n, 0.9)
    xi = 0.9 * np.sqrt(rng.uniform(size=n)) * np.exp(2j * np.pi * rng.uniform(size=n))
    err = max(abs(dg.compose(a, b).apply(x) - a.apply(b.apply(x))) for a, b, x in zip(A, B, xi))
    rows.append(("composition", n, int(err >= 1e-12), err))
    # gap sandwich
    A, B = rand_aut(n, 0.05), rand_aut(n, 0.05)
    fails = 0
    for a, b in zip(A, B):
        z, t = dg.normal_form_gap(a, b)
        g = max(abs(z), abs(t))
        d = max(abs(a.zeta - b.zeta), abs(a.theta - b.theta))
        fails += not (0.5 * d <= g <= 3.0 * d)
    rows.append(("gap_sandwich", n, fails, 0.0))
    # displacement formulas
    th = rng.uniform(-np.pi, np.pi, size=n)
    direct = dg.poincare_distance(xi, np.exp(1j * th) * xi)
    e1 = float(np.max(np.abs(dg.rotation_displacement(xi, th) - direct)))
    rows.append(("rotation_displacement", n, int(e1 >= 1e-10), e1))
    A = rand_aut(n, 0.5)
    e2 = max(abs(float(dg.aut_displacement(x, a)) - float(dg.poincare_distance(x, a.apply(x))))
             for a, x in zip(A, xi))
    rows.append(("aut_displacement", n, int(e2 >= 1e-10), e2))
    # band condition: |xi| >= 1/4 and 8 s/eps2 <= 1-|xi|^2 <= s/(2 eps1), s = |sin(theta/2)|
    m = max(1000, n // 10)
    eps2 = rng.uniform(0.05, 1.0, size=m)
    eps1 = eps2 / 16.0 * rng.uniform(0.2, 1.0, size=m)
    s = rng.uniform(1e-4, 1e-2, size=m) * eps2
    q = np.exp(rng.uniform(np.log(8 * s / eps2), np.log(s / (2 * eps1))))
    ok = q <= 15.0 / 16.0
    th = 2 * np.arcsin(s) * rng.choice([-1.0, 1.0], size=m)
    xi = np.sqrt(1 - q) * np.exp(2j * np.pi * rng.uniform(size=m))
    d = dg.rotation_displacement(xi, th)
    fails = int(np.sum(ok & ((d < eps1) | (d > eps2))))
    rows.append(("rotation_band", int(np.sum(ok)), fails, 0.0))
    # log-kernel mass against quadrature
    from scipy.integrate import quad

    worst = 0.0
    for R in (1.0, 3.0, 6.0):
        r = dg.HypRadius.from_R(R).r
        val, _ = quad(lambda s: math.log(r / s) * 4 * s / (1 - s * s) ** 2 * 2 * math.pi, 0, r, limit=200)
        worst = max(worst, abs(val - dg.log_kernel_mass(R)) / val)
    rows.append(("log_kernel_mass", 3, int(worst >= 1e-8), worst))
    run.write_rows("geometry_selftest.csv", ["suite", "n", "failures", "max_error"], rows)
    return all(r[2] == 0 for r in rows), {"suites": len(rows)}


def cmd_steps(run: Run):
    """Generated prescribed-step sets against the Lebesgue bound and the cover count."""
    rng = np.random.default_rng(run.seed)
    rows = []
    cases = int(run.cfg["steps_cases"])
    k = 0
    while len(rows) < cases and k < 20 * cases:
        k += 1
        n = int(rng.integers(1, 4))
        N = int(rng.integers(0, 5))
        e2 = [1.0]
        bands = []
        for _ in range(N):
            e1 = e2[-1] * rng.uniform(0.3, 0.45)
            bands.append((e1, e2[-1]))
            e2.append(e1 * rng.uniform(0.1, 0.3))
        bands.append((0.0, e2[-1]))
        s = ps.StepSchedule(tuple(bands))
        try:
            aset = ps.generate_cantor(s, 2, n, seed=int(rng.integers(2 ** 31)))
        except ps.ScheduleError:
            continue
        bound = ps.measure_bound(s, n)
        res = aset.atom_radius / (6.0 if n < 3 else 4.5)
        br = ps.brute_measure(aset, res)
        balls = ps.cover(aset.points, s)
        centers = np.array([c for c, _ in balls])
        covered = bool(np.all(np.min(np.linalg.norm(aset.points[:, None] - centers[None], axis=-1), axis=1)
                              <= balls[0][1] + 1e-12))
        ok_measure = br.outer <= bound
        rows.append((len(rows), n, N, aset.points.shape[0], bound, br.outer,
                     len(balls), ps.covering_count_bound(s, n), int(ok_measure and covered
                                                                    and len(balls) <= ps.covering_count_bound(s, n))))
    run.write_rows("steps.csv", ["case", "n", "N", "atoms", "measure_bound", "brute_outer", "cover_count",
                                 "p_N", "pass"], rows)
    return all(r[-1] for r in rows), {"cases": len(rows)}


def cmd_trace(run: Run):
    chart = _chart(run.cfg, run.seed)
    x = _base_point(run.cfg)
    leaf = LeafUniformization.build(chart, x)
    R = min(run.cfg["R_window"][1], leaf.max_feasible_R)
    grid = leaf.leaf_map(R, n_radii=9, n_angles=64)
    run.write_external("leaf_grid.csv", grid.to_csv)
    om = leaf.omega
    run.write_rows("time_domain.csv", ["angle", "radius", "status"],
                   [(a, r, int(s)) for a, r, s in zip(om.angles, om.radii, om.status)])
    summary = [("eta", leaf.eta), ("max_feasible_R", leaf.max_feasible_R), ("rays", om.angles.size),
               ("zipper_maps", leaf.zipper.n_maps)]
    run.write_rows("trace_summary.csv", ["quantity", "value"], summary)
    return True, {"max_feasible_R": leaf.max_feasible_R}


def cmd_measure(run: Run):
    chart = _chart(run.cfg, run.seed)
    leaf = LeafUniformization.build(chart, _base_point(run.cfg))
    R = run.cfg["R_window"][1]
    mu = sample_m_xR(leaf, R, int(run.cfg["samples"]), run.seed)
    prov = dict(mu.provenance, config_hash=run.hash, subcommand=run.subcommand)
    type(mu)(mu.points, mu.weights, prov, mu.zeta).to_csv(run.path("m_xR.csv"))
    run.files.append("m_xR.csv")
    rows = [("effective_size", mu.effective_size)]
    if chart.singular_points:
        for rho in (0.01, 0.05, 0.1):
            rows.append((f"mass_within_{rho}", mass_near_singular(mu, chart, rho)))
    run.write_rows("measure_summary.csv", ["quantity", "value"], rows)
    return True, {"R": R}


def cmd_entropy(run: Run):
    """Schedule -> admissible sets -> local / transversal entropies -> gap report."""
    cfg = run.cfg
    chart = _chart(cfg, run.seed)
    leaf = LeafUniformization.build(chart, _base_point(cfg))
    radii = _radii(cfg)
    R_max = radii[-1]
    leaf.check_R(R_max)
    rows = []
    header = ["experiment", "R", "eps", "quantity", "lower", "upper", "seed"]
    extra = {}
    # singular schedule and comparability (only meaningful with a singular set)
    schedule = None
    c = 1.0
    if chart.singular_points:
        if cfg["rho"] == "auto":
            rho = default_rhos(chart, probe_samples(chart, int(cfg["probe_leaves"]), run.seed))
        else:
            rho = tuple(cfg["rho"])
        schedule = singular_interval_schedule(leaf, R_max, *rho, n_samples=int(cfg["samples"]), seed=run.seed)
        comp = comparability_constant(chart, rho[0], comparability_sample(chart, seed=run.seed))
        c = comp.c
        extra["rho"] = list(rho)
        extra["schedule"] = schedule.to_dict()
        for k, v in schedule.invariants().items():
            rows.append(("schedule", R_max, float("nan"), k, float(v), float(v), run.seed))
        rows.append(("schedule", R_max, float("nan"), "delta", schedule.delta, schedule.delta, run.seed))
        rows.append(("comparability", float("nan"), float("nan"), "c", comp.c, comp.c, run.seed))
    for eps in cfg["eps"]:
        rot, aut = [], []
        for R in radii:
            S = CircleSampler(leaf, R)
            c0 = brody_bound(S)
            m = rotation_admissible_measure(S, R, eps)
            a = automorphism_admissible_measure(S, R, eps, n_dir=int(cfg["automorphism_dirs"]), seed=run.seed)
            rot.append(m)
            aut.append(a)
            rows.append(("rotation_set", R, eps, "leb", m.inner, m.outer, run.seed))
            rows.append(("rotation_set", R, eps, "lower_bound", rotation_lower_bound(c0, eps, R),
                         rotation_lower_bound(c0, eps, R), run.seed))
            rows.append(("automorphism_set", R, eps, "leb", a.inner - a.error, a.outer + a.error, run.seed))
            rows.append(("automorphism_set", R, eps, "lower_bound", automorphism_lower_bound(c0, eps, R),
                         automorphism_lower_bound(c0, eps, R), run.seed))
            if schedule is not None and R == R_max:
                br = prescribed_steps_bridge(schedule, m, eps, c, "rotation", seed=run.seed)
                rows.append(("bridge", R, eps, "rotation_fail_pairs", br.n_fail, br.n_fail, run.seed))
        for name, ms in (("rotation_set", rot), ("automorphism_set", aut)):
            f = measure_scaling(ms)
            rows.append((name, float("nan"), eps, "slope", min(f.fit_inner.slope, f.fit_outer.slope),
                         max(f.fit_inner.slope, f.fit_outer.slope), run.seed))
            rows.append((name, float("nan"), eps, "r2", f.r2, f.r2, run.seed))
        gap = entropy_gap(leaf, complex(*cfg["zeta1"]), eps, radii, int(cfg["samples"]), run.seed,
                          int(cfg["n_dir"]), cfg["preset"])
        for Ra, Rb, lo, hi in gap.local.windows:
            rows.append(("local_entropy", Rb, eps, f"window_{Ra:g}_{Rb:g}", lo, hi, run.seed))
        for name, lo, hi in gap.rows():
            rows.append(("gap", float("nan"), eps, name, lo, hi, run.seed))
        extra[f"gap_eps_{eps:g}"] = {n: [lo, hi] for n, lo, hi in gap.rows()}
    run.write_rows("entropy.csv", header, rows)
    return True, extra


def cmd_report(run: Run):
    """Aggregate the entropy/selftest CSVs of the output directory into one summary table."""
    rows = []
    for p in sorted(glob.glob(os.path.join(run.out, "*.csv"))):
        name = os.path.basename(p)
        if name == "report.csv":
            continue
        with open(p) as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        reader = csv.DictReader(lines)
        for r in reader:
            if name == "entropy.csv" and r["experiment"] in ("gap", "rotation_set", "automorphism_set") \
                    and r["quantity"] in ("slope", "r2", "gap_minus", "gap_plus", "h_minus", "h_plus"):
                rows.append((name, r["experiment"], r["eps"], r["quantity"], r["lower"], r["upper"]))
            elif name in ("geometry_selftest.csv",):
                rows.append((name, r["suite"], "", "failures", r["failures"], r["failures"]))
            elif name == "steps.csv":
                rows.append((name, f"case_{r['case']}", "", "pass", r["pass"], r["pass"]))
    run.write_rows("report.csv", ["source", "item", "eps", "quantity", "lower", "upper"], rows)
    return True, {"rows": len(rows)}


COMMANDS = {
    "geometry-selftest": cmd_geometry_selftest,
    "steps": cmd_steps,
    "trace": cmd_trace,
    "measure": cmd_measure,
    "entropy": cmd_entropy,
    "report": cmd_report,
}


def build_parser():
    p = argparse.ArgumentParser(prog="foliation-lab", description=__doc__.split("\n\n")[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--seed", type=int, default=None, help="seed (default: first entry of config seeds)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--preset", choices=PRESETS, default=None)
    p.add_argument("--jobs", type=int, default=1, help="worker count (recorded; runs are serial)")
    return p


def _error(out, code, kind, message):
    payload = {"error": kind, "message": message, "exit_code": code}
    print(json.dumps(payload), file=sys.stderr)
    try:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "error.json"), "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError:
        pass
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.jobs is not None and args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = load_config(args.config, {"preset": args.preset})
        seed = cfg["seeds"][0] if args.seed is None else args.seed
        if seed < 0:
            raise ConfigError("--seed must be non-negative")
        run = Run(args.out, cfg, seed, args.subcommand, args.jobs)
    except ConfigError as exc:
        return _error(args.out, EXIT_CONFIG, "config", str(exc))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            ok, extra = COMMANDS[args.subcommand](run)
    except ConfigError as exc:
        return _error(args.out, EXIT_CONFIG, "config", str(exc))
    except InfeasibleRadius as exc:
        return _error(args.out, EXIT_INFEASIBLE, "infeasible_R", str(exc))
    except (FoliationError, UniformizationError, EntropyError, SeparationError, MeasureError, ps.ScheduleError,
            dg.DiskDomainError, FloatingPointError) as exc:
        return _error(args.out, EXIT_NUMERIC, type(exc).__name__, str(exc))
    run.manifest("ok" if ok else "failed", extra)
    print(json.dumps({"subcommand": args.subcommand, "status": "ok" if ok else "failed", "out": run.out,
                      "config_hash": run.hash}))
    return EXIT_OK if ok else EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
