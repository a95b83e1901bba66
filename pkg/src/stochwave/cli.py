"""Command-line front end: ``stochwave <subcommand> [-c config.ini] [section.key=value ...]``."""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import sys
import traceback
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .grid import Box, Field, Grid
from .kernel import InitialData, dalang_integral
from .noise import CovarianceError, CovarianceSpec, lattice_covariance, sample_field
from .solver import CoefficientSpec, Control, SolverConfig, SolverError, solve

SUBCOMMANDS = ("simulate", "skeleton", "rate-min", "ldp-slope", "holder", "noise-check", "kernel-check")


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _optional_float(text: str):
    return None if text.strip() in ("", "none") else float(text)


def _choice(*options):
    def parse(text: str) -> str:
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return text

    return parse


def _coefficient(text: str) -> str:
    from .solver import Coefficient

    return str(Coefficient.parse(text))


def _site(text: str):
    text = text.strip()
    if text == "center":
        return "center"
    v = _ints(text)
    if len(v) != 3:
        raise ValueError("site must be 'center' or 'ix,iy,iz'")
    return v


# section -> key -> (parser, default text)
SCHEMA: dict[str, dict[str, tuple]] = {
    "grid": {"L": (float, "8.0"), "N": (int, "16")},
    "time": {"T": (float, "1.0"), "J": (int, "64")},
    "noise": {
        "beta": (float, "1.0"),
        "phi": (_choice("constant", "gaussian_bump"), "constant"),
        "c": (float, "1.0"),
        "amplitude": (float, "0.0"),
        "width": (float, "1.0"),
        "delta": (float, "1.0"),
        "seed": (int, "0"),
        "epsilon": (float, "1.0"),
        "mask_radius": (_optional_float, ""),
        "draws": (int, "1000"),
    },
    "init": {
        "family": (_choice("zero", "single_mode", "bump"), "zero"),
        "amplitude": (float, "0.0"),
        "mode": (int, "1"),
        "radius": (float, "1.0"),
        "power": (int, "8"),
        "gamma1": (float, "1.0"),
        "gamma2": (float, "1.0"),
    },
    "coeffs": {"sigma": (_coefficient, "constant:1"), "b": (_coefficient, "constant:0")},
    "control": {
        "kind": (_choice("zero", "single_mode", "oscillating"), "zero"),
        "amplitude": (float, "1.0"),
        "mode": (int, "1"),
        "frequency": (float, "4.0"),
    },
    "event": {
        "kind": (_choice("point_exceed", "sup_exceed", "linear_exceed"), "point_exceed"),
        "threshold": (float, "1.0"),
        "units": (_choice("absolute", "sd"), "absolute"),
        "site": (_site, "center"),
        "half_width": (int, "1"),
        "g_width": (float, "1.0"),
    },
    "ladder": {
        "epsilons": (_floats, "1,0.5,0.25,0.125"),
        "M": (int, "10000"),
        "tolerance": (float, "0.1"),
        "transform": (_choice("probit", "log"), "probit"),
    },
    "optimizer": {
        "K": (int, "8"),
        "penalties": (_floats, "1,1e2,1e4,1e6,1e8"),
        "restarts": (int, "4"),
        "max_iter": (int, "300"),
        "norm_bound": (_optional_float, ""),
    },
    "holder": {
        "trajectories": (int, "200"),
        "q": (float, "2.0"),
        "lags": (_ints, "2,3,4,6,8,12,16,20"),
        "alpha": (float, "0.25"),
    },
    "kernel": {"betas": (_floats, "0.5,1.0,1.5"), "times": (_floats, "0.25,0.5,1.0,2.0")},
    "output": {"directory": (str, "runs"), "formats": (_choice("csv,json", "json", "csv"), "csv,json")},
}


def _canonical(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_canonical(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict  # section -> key -> parsed value

    def __getitem__(self, section):
        return self.values[section]

    def canonical(self) -> dict:
        return {s: {k: _canonical(v) for k, v in sorted(kv.items())} for s, kv in sorted(self.values.items())}

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True).encode()).hexdigest()

    def dumps(self) -> str:
        buf = io.StringIO()
        for s, kv in self.canonical().items():
            buf.write(f"[{s}]\n")
            for k, v in kv.items():
                buf.write(f"{k} = {v}\n")
            buf.write("\n")
        return buf.getvalue()


def load_config(path: str | None, overrides=()) -> ExperimentConfig:
    """Parse an INI file strictly, apply ``section.key=value`` overrides left to right."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    raw = {s: {k: default for k, (_, default) in keys.items()} for s, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, val in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            raw[section][key] = val
    for item in overrides:
        name, sep, val = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        raw[section][key] = val
    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parse, _) in keys.items():
            try:
                values[section][key] = parse(raw[section][key])
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}: {exc}") from exc
    return ExperimentConfig(values)


# --- building domain objects ----------------------------------------------


def build_grid(cfg) -> Grid:
    return Grid(cfg["grid"]["L"], cfg["grid"]["N"])


def build_spec(cfg) -> CovarianceSpec:
    n = cfg["noise"]
    return CovarianceSpec(n["beta"], n["phi"], n["c"], n["amplitude"], n["width"], n["delta"])


def build_init(cfg, grid: Grid) -> InitialData:
    s = cfg["init"]
    kw = {"gamma1": s["gamma1"], "gamma2": s["gamma2"]}
    if s["family"] == "zero":
        return InitialData.zeros(grid, **kw)
    if s["family"] == "single_mode":
        x = grid.coords()[2]
        v0 = s["amplitude"] * np.cos(2 * np.pi * s["mode"] * x / grid.L) * np.ones(grid.shape)
        return InitialData(Field(grid, v0), Field(grid, np.zeros(grid.shape)), **kw)
    r = grid.distance_from((grid.L / 2,) * 3)
    v0 = s["amplitude"] * np.clip(1 - (r / s["radius"]) ** 2, 0, None) ** s["power"]
    return InitialData(Field(grid, v0), Field(grid, np.zeros(grid.shape)), **kw)


def build_solver_config(cfg) -> SolverConfig:
    grid = build_grid(cfg)
    mask = None
    if cfg["noise"]["mask_radius"] is not None:
        mask = (grid.distance_from((grid.L / 2,) * 3) <= cfg["noise"]["mask_radius"]).astype(float)
    return SolverConfig(
        grid,
        cfg["time"]["T"],
        cfg["time"]["J"],
        build_init(cfg, grid),
        build_spec(cfg),
        CoefficientSpec.parse(cfg["coeffs"]["sigma"], cfg["coeffs"]["b"]),
        epsilon=cfg["noise"]["epsilon"],
        noise_mask=mask,
    )


def build_control(cfg, sc: SolverConfig) -> Control:
    c = cfg["control"]
    g = sc.grid
    if c["kind"] == "zero":
        return Control.zeros(g, sc.spec, sc.dt, sc.J)
    x = g.coords()[2]
    profile = c["amplitude"] * np.cos(2 * np.pi * c["mode"] * x / g.L) * np.ones(g.shape)
    t = sc.times[:-1]
    amp = np.ones_like(t) if c["kind"] == "single_mode" else np.sin(c["frequency"] * t)
    return Control.from_fields(g, sc.spec, sc.dt, amp[:, None, None, None] * profile)


def build_event(cfg, sc: SolverConfig):
    from .ldp import variance_form
    from .rate import EventSpec

    e = cfg["event"]
    g = sc.grid
    site = (g.N // 2,) * 3 if e["site"] == "center" else e["site"]
    kind = e["kind"]
    if kind == "point_exceed":
        ev = EventSpec(kind, 0.0, site=site)
    elif kind == "sup_exceed":
        ev = EventSpec(kind, 0.0, region=Box.centered(g, e["half_width"]))
    else:
        r = g.distance_from(tuple(i * g.dx for i in site))
        ev = EventSpec(kind, 0.0, g=np.exp(-(r**2) / (2 * e["g_width"] ** 2)))
    r = e["threshold"]
    if e["units"] == "sd":
        probe = ev if kind != "sup_exceed" else EventSpec("point_exceed", 0.0, site=site)
        r *= math.sqrt(variance_form(probe, sc))
    return ev.with_threshold(r)


# --- output helpers -----------------------------------------------------------


class RunDir:
    def __init__(self, cfg: ExperimentConfig, subcommand: str):
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
        self.path = Path(cfg["output"]["directory"]) / f"{cfg.hash[:16]}-{stamp}"
        self.path.mkdir(parents=True, exist_ok=False)
        self.cfg = cfg
        self.formats = cfg["output"]["formats"].split(",")
        (self.path / "config.ini").write_text(f"; config_hash = {cfg.hash}\n; subcommand = {subcommand}\n" + cfg.dumps())

    def json(self, name: str, payload: dict):
        if "json" in self.formats:
            payload = dict(payload, config_hash=self.cfg.hash)
            (self.path / name).write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")

    def csv(self, name: str, header, rows):
        if "csv" in self.formats:
            buf = io.StringIO()
            wr = csv.writer(buf, lineterminator="\r\n")
            wr.writerow(list(header) + ["config_hash"])
            for row in rows:
                wr.writerow([repr(v) if isinstance(v, float) else v for v in row] + [self.cfg.hash])
            (self.path / name).write_text(buf.getvalue(), newline="")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj)}")


# --- subcommands -------------------------------------------------------------


def cmd_simulate(cfg, out: RunDir, workers: int):
    sc = build_solver_config(cfg)
    traj = solve(sc, None, cfg["noise"]["seed"])
    traj.dump(out.path / "fields", seed=cfg["noise"]["seed"], config_hash=cfg.hash)
    sups = np.max(np.abs(traj.snapshots.reshape(sc.J + 1, -1)), axis=1)
    out.csv("sup.csv", ["t", "sup_abs_u"], zip(map(float, sc.times), map(float, sups)))
    out.json("summary.json", {"seed": cfg["noise"]["seed"], "sup_final": float(sups[-1]), "J": sc.J, "T": sc.T})


def cmd_skeleton(cfg, out: RunDir, workers: int):
    from .rate import rate_functional, skeleton_solve

    sc = build_solver_config(cfg)
    h = build_control(cfg, sc)
    traj = skeleton_solve(sc, h)
    traj.dump(out.path / "fields", config_hash=cfg.hash)
    sups = np.max(np.abs(traj.snapshots.reshape(sc.J + 1, -1)), axis=1)
    out.csv("sup.csv", ["t", "sup_abs_u"], zip(map(float, sc.times), map(float, sups)))
    out.json("summary.json", {"rate": rate_functional(h), "control_norm": h.norm, "sup_final": float(sups[-1])})


def cmd_rate_min(cfg, out: RunDir, workers: int):
    from .ldp import gaussian_rate_oracle
    from .rate import RateOptions, minimize_rate

    sc = build_solver_config(cfg)
    ev = build_event(cfg, sc)
    o = cfg["optimizer"]
    opts = RateOptions(
        K=o["K"], restarts=o["restarts"], penalties=o["penalties"], max_iter=o["max_iter"],
        seed=cfg["noise"]["seed"], norm_bound=o["norm_bound"],
    )
    rep = minimize_rate(ev, sc, opts)
    payload = rep.to_json()
    try:
        payload["oracle"] = gaussian_rate_oracle(ev, sc)
    except ValueError:
        payload["oracle"] = None
    payload["control_dump"] = "control"
    names = []
    for j, h in enumerate(rep.control.fields()):
        names.append(f"h_{j:05d}.swe3")
        Field(sc.grid, h).dump(_mkdir(out.path / "control") / names[-1])
    manifest = {"config_hash": cfg.hash, "dt": sc.dt, "files": names}
    (out.path / "control" / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    out.json("rate_report.json", payload)
    out.csv("trace.csv", ["iteration", "objective"], enumerate(rep.trace))
    if rep.status == "infeasible":
        raise SolverError("optimiser found no feasible control within budget")


def _mkdir(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_ldp_slope(cfg, out: RunDir, workers: int):
    from .ldp import gaussian_rate_oracle, ldp_slope

    sc = build_solver_config(cfg)
    ev = build_event(cfg, sc)
    try:
        oracle = gaussian_rate_oracle(ev, sc)
    except ValueError:
        oracle = None
    lad = cfg["ladder"]
    rep = ldp_slope(
        ev, sc, lad["epsilons"], lad["M"], cfg["noise"]["seed"], oracle=oracle, tolerance=lad["tolerance"],
        transform=lad["transform"], workers=workers, config_hash=cfg.hash,
    )
    if "csv" in out.formats:
        (out.path / "ladder.csv").write_text(rep.to_csv(), newline="")
    out.json("slope_report.json", rep.to_json())


def cmd_holder(cfg, out: RunDir, workers: int):
    from .regularity import ExponentInterval, Region, holder_norm, increment_exponent, simulate_final_states

    sc = build_solver_config(cfg)
    hs = cfg["holder"]
    g = sc.grid
    region = Region(Box((0, 0, 0), (g.N,) * 3))
    ens = simulate_final_states(sc, hs["trajectories"], cfg["noise"]["seed"])
    lags = [(0, (k, 0, 0)) for k in hs["lags"]]
    upper = ExponentInterval.from_inputs(sc.init, sc.spec).upper
    rep = increment_exponent(ens, hs["q"], lags, region, seed=cfg["noise"]["seed"], upper=upper, config_hash=cfg.hash)
    one = solve(sc, None, cfg["noise"]["seed"])
    small = Region(Box.centered(g, min(2, g.N // 2 - 1)))
    if "csv" in out.formats:
        (out.path / "increments.csv").write_text(rep.to_csv(), newline="")
    out.json("exponent.json", rep.to_json() | {"holder_norm_sample": holder_norm(one, hs["alpha"], small)})


def cmd_noise_check(cfg, out: RunDir, workers: int):
    g = build_grid(cfg)
    spec = build_spec(cfg)
    M = cfg["noise"]["draws"]
    seed = cfg["noise"]["seed"]
    max_lag = g.N // 4
    acc = np.zeros(max_lag + 1)
    for r in range(M):
        f = sample_field(spec, g, seed, r).values
        for k in range(max_lag + 1):
            acc[k] += sum(np.mean(f * np.roll(f, -k, axis=ax)) for ax in range(3)) / 3
    emp = acc / M
    oracle = lattice_covariance(spec, g)[0, 0, : max_lag + 1]
    rows = [(k, float(k * g.dx), float(emp[k]), float(oracle[k]), float(abs(emp[k] / oracle[k] - 1))) for k in range(max_lag + 1)]
    out.csv("covariance.csv", ["lag_index", "lag", "empirical", "oracle", "relative_error"], rows)
    window = [r[4] for r in rows if r[0] >= 2]
    out.json("summary.json", {"draws": M, "max_relative_error_lag_ge_2dx": max(window) if window else None})


def cmd_kernel_check(cfg, out: RunDir, workers: int):
    k = cfg["kernel"]
    rows = []
    fits = {}
    for beta in k["betas"]:
        spec = CovarianceSpec(beta)
        vals = [dalang_integral(spec, t) for t in k["times"]]
        rows.extend((beta, t, v) for t, v in zip(k["times"], vals))
        slope = float(np.polyfit(np.log(k["times"]), np.log(vals), 1)[0])
        fits[repr(beta)] = {"fitted_exponent": slope, "expected": 2 - beta, "error": abs(slope - (2 - beta))}
    out.csv("dalang.csv", ["beta", "t", "integral"], rows)
    out.json("scaling_fit.json", {"fits": fits})


HANDLERS = {
    "simulate": cmd_simulate,
    "skeleton": cmd_skeleton,
    "rate-min": cmd_rate_min,
    "ldp-slope": cmd_ldp_slope,
    "holder": cmd_holder,
    "noise-check": cmd_noise_check,
    "kernel-check": cmd_kernel_check,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def make_parser() -> argparse.ArgumentParser:
    from .ldp import default_workers

    p = _Parser(prog="stochwave", description="Stochastic wave equation experiments.")
    p.add_argument("subcommand", help="one of: " + ", ".join(SUBCOMMANDS))
    p.add_argument("overrides", nargs="*", help="section.key=value overrides, applied left to right")
    p.add_argument("-c", "--config", help="INI config file")
    p.add_argument("--set", dest="sets", action="append", default=[], help="extra override (repeatable)")
    p.add_argument("--workers", type=int, default=default_workers(), help="worker processes")
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.subcommand not in HANDLERS:
        parser.print_usage(sys.stderr)
        print(f"unknown subcommand {args.subcommand!r}; choose from {', '.join(SUBCOMMANDS)}", file=sys.stderr)
        return 1
    try:
        cfg = load_config(args.config, list(args.overrides) + list(args.sets))
        build_solver_config(cfg) if args.subcommand != "kernel-check" else None
    except (ConfigError, CovarianceError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    out = RunDir(cfg, args.subcommand)
    try:
        HANDLERS[args.subcommand](cfg, out, max(1, args.workers))
    except (SolverError, FloatingPointError, ArithmeticError) as exc:
        diag = {"error": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc()}
        if hasattr(exc, "gaps"):
            diag["gaps"] = exc.gaps
        (out.path / "diagnostics.json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (CovarianceError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    print(out.path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
