"""Config-driven scenario runner behind the ``pathslice`` console command.

Each subcommand reads one INI-style config file, runs the matching piece
of the laboratory, and writes CSV/JSON artifacts plus a versioned
manifest into the output directory.  Exit codes split three outcomes the
way a CI pipeline wants them separated:

    0   ran, and every configured accuracy threshold held
    1   operational failure (bad config, solver blow-up, missing file)
    2   ran correctly, but a configured accuracy threshold was missed

Every artifact embeds the sha256 of the config file -- CSV as a leading
``# config_sha256=...`` comment line, JSON as a top-level key -- so that
``report`` can refuse to aggregate artifacts produced by different
configs.  With a fixed config and seed the CSV/JSON artifacts are
byte-identical across runs; only the manifest carries volatile fields
(wall time).

Config format: INI sections ``[potential]``, ``[grid]``, ``[scenario]``
plus one optional section named after the subcommand for its own options
and thresholds.  The full schema is documented in the README; unknown
sections or keys are rejected with file:line positions.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import re
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .action import action_data, hj_residual
from .analysis import (ConvergenceStudy, residual_check, single_step_study,
                       strong_limit_check, write_csv, write_json)
from .errors import ConfigError, PathsliceError
from .flow import flow_map
from .grids import Grid
from .potentials import make_potential
from .reference import VALIDATE_TARGET
from .sobolev import verify_assumption_A

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
DEFAULT_OUT = "artifacts"
DEFAULT_REPORT_OUT = "report"
# composed order-0 errors sit far above the reference floor, so their
# studies default to a cheaper reference than the exact-order ones
ORDER0_REFERENCE_TARGET = 1e-5

SCENARIO_COMMANDS = ("flow", "action", "assume-a", "converge", "single-step",
                     "higher-order", "residual", "strong-limit")

_REQUIRED = object()
_ABSENT = object()

_THREAD_LIMITER = None


# ------------------------------------------------------------ config casts

def _cast_float(raw):
    return float(raw)


def _cast_int(raw):
    return int(raw)


def _cast_bool(raw):
    table = {"true": True, "yes": True, "on": True, "1": True,
             "false": False, "no": False, "off": False, "0": False}
    v = raw.strip().lower()
    if v not in table:
        raise ValueError(f"expected a boolean, got {raw!r}")
    return table[v]


def _cast_floats(raw):
    return tuple(float(tok) for tok in raw.replace(",", " ").split())


def _cast_ints(raw):
    return tuple(int(tok) for tok in raw.replace(",", " ").split())


def _cast_str(raw):
    return raw.strip()


def _cast_choice(*allowed):
    def cast(raw):
        v = raw.strip()
        if v not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}")
        return v
    return cast


_SCENARIO_KEYS = {"name", "s", "t", "hbar", "order", "counts", "dts",
                  "seed", "out"}
_GRID_KEYS = {"d", "half_width", "n", "rho"}

# per-subcommand option schema: key -> (cast, default); _ABSENT marks an
# optional key that is simply omitted when not configured, _REQUIRED one
# that must be present
_OPTION_SCHEMA = {
    "converge": {
        "randomize": (_cast_bool, False),
        "jitter": (_cast_float, 0.35),
        "reference_target": (_cast_float, _ABSENT),
        "cache": (_cast_bool, True),
        "expect_slope": (_cast_float, _ABSENT),
        "slope_tol": (_cast_float, 0.2),
        "min_r_squared": (_cast_float, _ABSENT),
    },
    "higher-order": {
        "randomize": (_cast_bool, False),
        "jitter": (_cast_float, 0.35),
        "reference_target": (_cast_float, _ABSENT),
        "cache": (_cast_bool, True),
        "expect_slope": (_cast_float, _ABSENT),
        "slope_tol": (_cast_float, 0.2),
        "min_r_squared": (_cast_float, _ABSENT),
        "min_improvement": (_cast_float, _ABSENT),
    },
    "single-step": {
        "reference_target": (_cast_float, _ABSENT),
        "cache": (_cast_bool, True),
        "expect_slope": (_cast_float, _ABSENT),
        "slope_tol": (_cast_float, 0.2),
        "min_r_squared": (_cast_float, _ABSENT),
    },
    "residual": {
        "hbar_dt": (_cast_float, 0.1),
        "expect_slope": (_cast_float, _ABSENT),
        "slope_tol": (_cast_float, 0.2),
        "expect_ratio": (_cast_float, _ABSENT),
        "ratio_tol": (_cast_float, 0.15),
    },
    "strong-limit": {
        "reference_target": (_cast_float, _ABSENT),
        "cache": (_cast_bool, True),
        "expect_slope": (_cast_float, _ABSENT),
        "slope_tol": (_cast_float, 0.2),
        "max_final_error": (_cast_float, _ABSENT),
    },
    "flow": {
        "y": (_cast_floats, (-2.0, -1.0, 0.0, 1.0, 2.0)),
        "eta": (_cast_floats, (-2.0, 0.0, 2.0)),
        "max_symplectic_defect": (_cast_float, _ABSENT),
    },
    "action": {
        "x": (_cast_floats, _REQUIRED),
        "y": (_cast_floats, _REQUIRED),
        "max_hj_residual": (_cast_float, 1e-5),
    },
    "assume-a": {
        "times": (_cast_floats, (0.0,)),
        "x_lo": (_cast_float, -8.0),
        "x_hi": (_cast_float, 8.0),
        "ball_radius": (_cast_float, 1.0),
        "resolution": (_cast_float, 1.0 / 256.0),
        "expect": (_cast_choice("pass", "fail"), "pass"),
    },
}

_NEEDS_GRID = {"converge", "higher-order", "single-step", "residual",
               "strong-limit"}
_NEEDS_COUNTS = {"converge", "higher-order", "strong-limit"}
_NEEDS_DTS = {"single-step", "residual", "flow"}
_NEEDS_T = {"converge", "higher-order", "strong-limit", "action"}


# ------------------------------------------------------------ config file

class _Ini:
    """Parsed INI file that can point at the offending line on errors."""

    def __init__(self, path):
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        self.path = str(path)
        self.sha256 = hashlib.sha256(data).hexdigest()
        try:
            self.text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError(f"{path}: config is not UTF-8 ({exc})")
        cp = configparser.ConfigParser(interpolation=None,
                                       inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(self.text, source=self.path)
        except configparser.Error as exc:
            raise ConfigError(str(exc))
        self.cp = cp

    def line(self, section, key=None):
        current, section_line = None, 0
        for i, raw in enumerate(self.text.splitlines(), 1):
            stripped = raw.strip()
            m = re.match(r"\[(.+)\]\s*$", stripped)
            if m:
                current = m.group(1)
                if current == section:
                    section_line = i
                continue
            if (key is not None and current == section
                    and re.match(rf"{re.escape(key)}\s*[=:]", stripped)):
                return i
        return section_line

    def fail(self, section, key, message):
        where = f"{self.path}:{self.line(section, key)}"
        label = f"[{section}] {key}" if key else f"[{section}]"
        raise ConfigError(f"{where}: {label}: {message}")

    def get(self, section, key, cast, default=_REQUIRED):
        if not (self.cp.has_section(section)
                and self.cp.has_option(section, key)):
            if default is _REQUIRED:
                self.fail(section, key, "required key is missing")
            return default
        raw = self.cp.get(section, key)
        try:
            return cast(raw)
        except ValueError as exc:
            self.fail(section, key, str(exc) or f"cannot parse {raw!r}")

    def check_keys(self, section, allowed):
        if not self.cp.has_section(section):
            return
        for key in self.cp.options(section):
            if key not in allowed:
                self.fail(section, key,
                          f"unknown key (allowed: {', '.join(sorted(allowed))})")


@dataclass
class ScenarioConfig:
    """One fully parsed and validated scenario run."""

    command: str
    scenario: str
    potential_id: str
    potential: object
    grid: Grid | None
    s: float
    t: float | None
    hbars: tuple
    order: int
    counts: tuple
    dts: tuple
    seed: int
    out: Path
    options: dict = field(default_factory=dict)
    sha256: str = ""
    path: str = ""


def load_config(path, command, seed=None, out=None):
    """Parse and validate a scenario config for one subcommand.

    `seed` and `out` are the command-line overrides; precedence for the
    output directory is flag > PATHSLICE_OUT > config key > default.
    """
    if command not in SCENARIO_COMMANDS:
        raise ConfigError(f"unknown subcommand {command!r}")
    ini = _Ini(path)

    allowed_sections = {"potential", "grid", "scenario", command}
    for section in ini.cp.sections():
        if section not in allowed_sections:
            raise ConfigError(
                f"{ini.path}:{ini.line(section)}: unknown section "
                f"[{section}] for subcommand {command}")

    if not ini.cp.has_section("potential"):
        raise ConfigError(f"{ini.path}:0: missing [potential] section")
    pid = ini.get("potential", "id", _cast_str)
    params = {}
    for key in ini.cp.options("potential"):
        if key != "id":
            params[key] = ini.get("potential", key, _cast_float)
    try:
        potential = make_potential(pid, params)
    except ValueError as exc:
        ini.fail("potential", "id", str(exc))

    grid = None
    if ini.cp.has_section("grid"):
        ini.check_keys("grid", _GRID_KEYS)
        d = ini.get("grid", "d", _cast_int, 1)
        if d != 1:
            ini.fail("grid", "d", "only d = 1 is supported")
        half_width = ini.get("grid", "half_width", _cast_float)
        n = ini.get("grid", "n", _cast_int)
        rho = ini.get("grid", "rho", _cast_float, _ABSENT)
        try:
            grid = (Grid(half_width, n) if rho is _ABSENT
                    else Grid(half_width, n, rho=rho))
        except ValueError as exc:
            ini.fail("grid", "n", str(exc))
    elif command in _NEEDS_GRID:
        raise ConfigError(
            f"{ini.path}:0: [grid] section is required for {command}")

    ini.check_keys("scenario", _SCENARIO_KEYS)
    s = ini.get("scenario", "s", _cast_float, 0.0)
    t = ini.get("scenario", "t", _cast_float, None)
    hbars = ini.get("scenario", "hbar", _cast_floats, (1.0,))
    order = ini.get("scenario", "order", _cast_int, 0)
    counts = ini.get("scenario", "counts", _cast_ints, ())
    dts = ini.get("scenario", "dts", _cast_floats, ())
    cfg_seed = ini.get("scenario", "seed", _cast_int, 0)
    cfg_out = ini.get("scenario", "out", _cast_str, DEFAULT_OUT)
    name_default = f"{command.replace('-', '_')}_{pid}"
    scenario = ini.get("scenario", "name", _cast_str, name_default)

    if not hbars:
        ini.fail("scenario", "hbar", "at least one hbar value is required")
    if order < 0:
        ini.fail("scenario", "order", "order must be >= 0")
    if command == "higher-order" and order == 0:
        if ini.cp.has_option("scenario", "order"):
            ini.fail("scenario", "order", "higher-order needs order >= 1")
        order = 1
    if command in _NEEDS_T:
        if t is None:
            ini.fail("scenario", "t", f"{command} needs a time horizon t")
        if not t > s:
            ini.fail("scenario", "t", "need t > s")
    if command in _NEEDS_COUNTS:
        if not counts:
            ini.fail("scenario", "counts",
                     "at least one subdivision count is required")
        if any(c < 1 for c in counts):
            ini.fail("scenario", "counts", "counts must be positive")
    if command in _NEEDS_DTS:
        if not dts:
            ini.fail("scenario", "dts",
                     "at least one step length is required")
        if any(dt <= 0 for dt in dts):
            ini.fail("scenario", "dts", "step lengths must be positive")

    options = {}
    schema = _OPTION_SCHEMA[command]
    ini.check_keys(command, set(schema))
    for key, (cast, default) in schema.items():
        value = ini.get(command, key, cast, default)
        if value is not _ABSENT:
            options[key] = value

    if command == "action":
        if len(options["x"]) != len(options["y"]) or not options["x"]:
            ini.fail("action", "y",
                     "x and y must be non-empty lists of equal length")
    if command == "assume-a" and not options["x_lo"] < options["x_hi"]:
        ini.fail("assume-a", "x_hi", "need x_lo < x_hi")

    out_dir = Path(out or os.environ.get("PATHSLICE_OUT") or cfg_out)
    return ScenarioConfig(
        command=command, scenario=scenario, potential_id=pid,
        potential=potential, grid=grid, s=s, t=t, hbars=hbars, order=order,
        counts=counts, dts=dts,
        seed=cfg_seed if seed is None else int(seed),
        out=out_dir, options=options, sha256=ini.sha256, path=ini.path)


# ------------------------------------------------------------ artifacts

def _emit_csv(cfg, name, header, rows):
    write_csv(cfg.out / name, header, rows,
              comment=f"config_sha256={cfg.sha256}")
    return name


def _emit_json(cfg, name, payload):
    payload = dict(payload)
    payload["config_sha256"] = cfg.sha256
    write_json(cfg.out / name, payload)
    return name


def _miss(what, detail):
    log.warning("threshold missed: %s (%s)", what, detail)
    return 2


def _study_exit_code(results, opts):
    """0 if every configured threshold holds across the studies, else 2."""
    code = 0
    for r in results:
        tag = f"{r.scenario} hbar={r.hbar}"
        if "expect_slope" in opts:
            if r.fit is None:
                code = _miss(tag, "no usable power-law fit "
                                  f"(flags: {', '.join(r.flags) or 'none'})")
                continue
            want, tol = opts["expect_slope"], opts["slope_tol"]
            if abs(r.fit.slope - want) > tol:
                code = _miss(tag, f"slope {r.fit.slope:.4f} outside "
                                  f"{want} +- {tol}")
        if "min_r_squared" in opts:
            if r.fit is None or r.fit.r_squared < opts["min_r_squared"]:
                got = "none" if r.fit is None else f"{r.fit.r_squared:.5f}"
                code = _miss(tag, f"r_squared {got} below "
                                  f"{opts['min_r_squared']}")
        if "max_final_error" in opts and r.rows:
            final = r.rows[-1].error
            if final > opts["max_final_error"]:
                code = _miss(tag, f"final error {final:.3e} above "
                                  f"{opts['max_final_error']:.3e}")
    return code


# ------------------------------------------------------------ runners

def _reference_target(cfg):
    if "reference_target" in cfg.options:
        return cfg.options["reference_target"]
    return ORDER0_REFERENCE_TARGET if cfg.order == 0 else VALIDATE_TARGET


def _run_converge(cfg):
    opts = cfg.options
    results = []
    for hbar in cfg.hbars:
        study = ConvergenceStudy(
            potential=cfg.potential, grid=cfg.grid, s=cfg.s, t=cfg.t,
            hbar=hbar, order=cfg.order, counts=cfg.counts,
            randomize_seed=cfg.seed if opts["randomize"] else None,
            jitter=opts["jitter"], reference_target=_reference_target(cfg),
            cache=opts["cache"], scenario=cfg.scenario)
        results.append(study.run())
    header, rows = results[0].csv_rows()
    for r in results[1:]:
        rows = rows + r.csv_rows()[1]
    csv_name = _emit_csv(cfg, f"{cfg.scenario}.csv", header, rows)
    payload = (results[0].to_json() if len(results) == 1
               else {"studies": [r.to_json() for r in results]})
    json_name = _emit_json(cfg, f"{cfg.scenario}.json", payload)
    return _study_exit_code(results, opts), {"csv": [csv_name],
                                             "json": [json_name]}


def _run_higher_order(cfg):
    opts = cfg.options
    common = dict(potential=cfg.potential, grid=cfg.grid, s=cfg.s, t=cfg.t,
                  hbar=cfg.hbars[0], counts=cfg.counts,
                  randomize_seed=cfg.seed if opts["randomize"] else None,
                  jitter=opts["jitter"], cache=opts["cache"])
    high = ConvergenceStudy(order=cfg.order,
                            reference_target=_reference_target(cfg),
                            scenario=cfg.scenario, **common)
    base = ConvergenceStudy(order=0,
                            reference_target=ORDER0_REFERENCE_TARGET,
                            scenario=f"{cfg.scenario}_order0", **common)
    rh, rb = high.run(), base.run()
    header, rows = rh.csv_rows()
    rows = rows + rb.csv_rows()[1]
    csv_name = _emit_csv(cfg, f"{cfg.scenario}.csv", header, rows)

    base_errors = {r.mesh: r.error for r in rb.kept_rows}
    improvement = [
        {"mesh": r.mesh, "factor": base_errors[r.mesh] / r.error}
        for r in rh.kept_rows if r.mesh in base_errors and r.error > 0]
    payload = {"order_n": rh.to_json(), "order_0": rb.to_json(),
               "improvement": improvement}
    json_name = _emit_json(cfg, f"{cfg.scenario}.json", payload)

    code = _study_exit_code([rh], opts)
    if "min_improvement" in opts:
        factors = [e["factor"] for e in improvement]
        if not factors:
            code = _miss(cfg.scenario, "no meshes where both orders sit "
                                       "above the reference floor")
        elif min(factors) < opts["min_improvement"]:
            code = _miss(cfg.scenario,
                         f"improvement factor {min(factors):.2f} below "
                         f"{opts['min_improvement']}")
    return code, {"csv": [csv_name], "json": [json_name]}


def _run_single_step(cfg):
    opts = cfg.options
    target = opts.get("reference_target", VALIDATE_TARGET)
    results = []
    for hbar in cfg.hbars:
        results.append(single_step_study(
            cfg.potential, cfg.grid, cfg.s, cfg.dts, hbar, cfg.order,
            reference_target=target, cache=opts["cache"],
            scenario=cfg.scenario))
    header, rows = results[0].csv_rows()
    for r in results[1:]:
        rows = rows + r.csv_rows()[1]
    csv_name = _emit_csv(cfg, f"{cfg.scenario}.csv", header, rows)
    payload = (results[0].to_json() if len(results) == 1
               else {"studies": [r.to_json() for r in results]})
    json_name = _emit_json(cfg, f"{cfg.scenario}.json", payload)
    return _study_exit_code(results, opts), {"csv": [csv_name],
                                             "json": [json_name]}


def _run_residual(cfg):
    opts = cfg.options
    res = residual_check(cfg.potential, cfg.grid, cfg.s, cfg.dts,
                         hbar=cfg.hbars[0], order=cfg.order,
                         hbars=cfg.hbars, hbar_dt=opts["hbar_dt"])
    header, rows = res.csv_rows()
    csv_name = _emit_csv(cfg, f"{cfg.scenario}.csv", header, rows)
    json_name = _emit_json(cfg, f"{cfg.scenario}.json", res.to_json())

    code = 0
    if "expect_slope" in opts:
        want, tol = opts["expect_slope"], opts["slope_tol"]
        if res.fit is None or abs(res.fit.slope - want) > tol:
            got = "none" if res.fit is None else f"{res.fit.slope:.4f}"
            code = _miss(cfg.scenario, f"defect slope {got} outside "
                                       f"{want} +- {tol}")
    if "expect_ratio" in opts:
        want, tol = opts["expect_ratio"], opts["ratio_tol"]
        if not np.isfinite(res.hbar_ratio) or abs(res.hbar_ratio - want) > tol:
            code = _miss(cfg.scenario, f"hbar ratio {res.hbar_ratio} "
                                       f"outside {want} +- {tol}")
    return code, {"csv": [csv_name], "json": [json_name]}


def _run_strong_limit(cfg):
    opts = cfg.options
    res = strong_limit_check(
        cfg.potential, cfg.grid, cfg.s, cfg.t, cfg.hbars[0], cfg.counts,
        order=cfg.order, reference_target=_reference_target(cfg),
        cache=opts["cache"], scenario=cfg.scenario)
    header, rows = res.csv_rows()
    csv_name = _emit_csv(cfg, f"{cfg.scenario}.csv", header, rows)
    json_name = _emit_json(cfg, f"{cfg.scenario}.json", res.to_json())
    return _study_exit_code([res], opts), {"csv": [csv_name],
                                           "json": [json_name]}


_FLOW_HEADER = ("dt", "norm_dxdy_minus_I", "norm_dxideta_minus_I",
                "norm_dxdeta", "norm_dxidy")


def _flow_state_record(state):
    rec = {"t": float(state.t)}
    for name in ("x", "xi", "Jxy", "Jxeta", "Jxiy", "Jxieta", "S"):
        rec[name] = np.asarray(getattr(state, name)).ravel().tolist()
    return rec


def _run_flow(cfg):
    opts = cfg.options
    y = np.asarray(opts["y"], float)[:, None]
    eta = np.asarray(opts["eta"], float)[None, :]
    rows, worst_defect = [], 0.0
    for dt in sorted(cfg.dts, reverse=True):
        fl = flow_map(cfg.potential, cfg.s, cfg.s + dt, y, eta)
        rows.append((float(dt),
                     float(np.max(np.abs(fl.Jxy - 1.0))),
                     float(np.max(np.abs(fl.Jxieta - 1.0))),
                     float(np.max(np.abs(fl.Jxeta))),
                     float(np.max(np.abs(fl.Jxiy)))))
        worst_defect = max(worst_defect, float(np.max(fl.symplectic_defect)))
    csv_name = _emit_csv(cfg, f"{cfg.scenario}.csv", _FLOW_HEADER, rows)

    dt_max = max(cfg.dts)
    record = [cfg.s + k * dt_max / 8.0 for k in range(1, 8)]
    record.append(cfg.s + dt_max)
    fl = flow_map(cfg.potential, cfg.s, cfg.s + dt_max, y, eta,
                  record_times=record)
    payload = {
        "potential": cfg.potential_id, "s": cfg.s, "dt_max": dt_max,
        "y": np.asarray(opts["y"], float).tolist(),
        "eta": np.asarray(opts["eta"], float).tolist(),
        "sweep": [dict(zip(_FLOW_HEADER, row)) for row in rows],
        "max_symplectic_defect": worst_defect,
        "trajectory_samples": [_flow_state_record(st) for st in fl.recorded],
        "n_steps": fl.n_steps,
    }
    json_name = _emit_json(cfg, f"{cfg.scenario}.json", payload)

    code = 0
    if "max_symplectic_defect" in opts:
        if worst_defect > opts["max_symplectic_defect"]:
            code = _miss(cfg.scenario,
                         f"symplectic defect {worst_defect:.3e} above "
                         f"{opts['max_symplectic_defect']:.3e}")
    return code, {"csv": [csv_name], "json": [json_name]}


def _run_action(cfg):
    opts = cfg.options
    x = np.asarray(opts["x"], float)
    y = np.asarray(opts["y"], float)
    ad = action_data(cfg.potential, cfg.s, cfg.t, x, y)
    hj_note = ""
    try:
        hj = hj_residual(cfg.potential, cfg.s, cfg.t, x, y)
    except ValueError as exc:
        hj, hj_note = None, str(exc)

    header = ("x", "y", "S", "dS_dx", "dS_dy", "excess_action_rate",
              "excess_action_rate_xlap", "hj_residual")
    hj_col = np.full(x.size, np.nan) if hj is None else hj
    rows = [tuple(float(v) for v in row) for row in
            zip(x, y, ad.S, ad.dSdx, ad.dSdy, ad.excess_action_rate,
                ad.excess_action_rate_xlap, hj_col)]
    csv_name = _emit_csv(cfg, f"{cfg.scenario}.csv", header, rows)

    payload = {
        "potential": cfg.potential_id, "s": ad.s, "t": ad.t,
        "pairs": [dict(zip(header, row)) for row in rows],
        "d2Sdx2": ad.d2Sdx2.tolist(), "d2Sdxdy": ad.d2Sdxdy.tolist(),
        "d2Sdy2": ad.d2Sdy2.tolist(),
        "hj_skipped": hj_note,
    }
    json_name = _emit_json(cfg, f"{cfg.scenario}.json", payload)

    code = 0
    if hj is not None and float(np.max(hj)) > opts["max_hj_residual"]:
        code = _miss(cfg.scenario,
                     f"Hamilton-Jacobi residual {float(np.max(hj)):.3e} "
                     f"above {opts['max_hj_residual']:.3e}")
    elif hj is None:
        log.info("Hamilton-Jacobi residual skipped: %s", hj_note)
    return code, {"csv": [csv_name], "json": [json_name]}


def _run_assume_a(cfg):
    opts = cfg.options
    x_range = (opts["x_lo"], opts["x_hi"])
    verdicts = []
    for tv in opts["times"]:
        verdicts.append((tv, verify_assumption_A(
            cfg.potential, t=tv, x_range=x_range,
            ball_radius=opts["ball_radius"], resolution=opts["resolution"])))

    header = ("t", "center", "norm")
    rows = [(float(tv), float(c), float(nv))
            for tv, v in verdicts
            for c, nv in zip(v.fine.centers, v.fine.norms)]
    csv_name = _emit_csv(cfg, f"{cfg.scenario}.csv", header, rows)
    payload = {
        "potential": cfg.potential_id, "expect": opts["expect"],
        "verdicts": [dict(t=tv, **v.to_dict()) for tv, v in verdicts],
    }
    json_name = _emit_json(cfg, f"{cfg.scenario}.json", payload)

    want = opts["expect"] == "pass"
    code = 0
    for tv, v in verdicts:
        if v.passes != want:
            code = _miss(f"{cfg.scenario} t={tv}",
                         f"expected {opts['expect']}, got "
                         f"{'pass' if v.passes else 'fail'}: {v.reason}")
    return code, {"csv": [csv_name], "json": [json_name]}


_RUNNERS = {
    "converge": _run_converge,
    "higher-order": _run_higher_order,
    "single-step": _run_single_step,
    "residual": _run_residual,
    "strong-limit": _run_strong_limit,
    "flow": _run_flow,
    "action": _run_action,
    "assume-a": _run_assume_a,
}


def _versions():
    import scipy
    return {"python": sys.version.split()[0], "numpy": np.__version__,
            "scipy": scipy.__version__, "pathslice": __version__}


def run_scenario(config, subcommand=None):
    """Execute one scenario, write artifacts and the manifest, return exit code."""
    command = subcommand or config.command
    if command not in _RUNNERS:
        raise ConfigError(f"unknown subcommand {command!r}")
    start = time.perf_counter()
    config.out.mkdir(parents=True, exist_ok=True)
    log.info("%s: scenario %s -> %s", command, config.scenario, config.out)
    code, artifacts = _RUNNERS[command](config)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "scenario": config.scenario,
        "config_sha256": config.sha256,
        "config_path": config.path,
        "seed": config.seed,
        "artifacts": artifacts,
        "exit_code": code,
        "versions": _versions(),
        "wall_seconds": round(time.perf_counter() - start, 3),
    }
    write_json(config.out / "manifest.json", manifest)
    log.info("%s: exit %d after %.1fs", command, code,
             manifest["wall_seconds"])
    return code


# ------------------------------------------------------------ report

_PLOT_TABLES = {
    ("mesh", "error", "hbar", "N"): "report_convergence.csv",
    ("dt", "g_norm", "hbar"): "report_residual.csv",
    _FLOW_HEADER: "report_flow.csv",
}


def _load_manifest(path):
    p = Path(path)
    try:
        payload = json.loads(p.read_text())
    except OSError as exc:
        raise ConfigError(f"manifest not readable: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"corrupt manifest {p}: {exc}")
    if payload.get("manifest_version") != MANIFEST_VERSION:
        raise ConfigError(f"{p}: unsupported manifest version "
                          f"{payload.get('manifest_version')!r}")
    for key in ("command", "scenario", "config_sha256", "artifacts"):
        if key not in payload:
            raise ConfigError(f"corrupt manifest {p}: missing {key!r}")
    return p, payload


def _read_artifact_csv(path):
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"artifact not readable: {exc}")
    embedded = ""
    if lines and lines[0].startswith("#"):
        m = re.search(r"config_sha256=(\w+)", lines[0])
        embedded = m.group(1) if m else ""
        lines = lines[1:]
    if not lines:
        raise ConfigError(f"artifact {path} is empty")
    header = tuple(lines[0].split(","))
    rows = [line.split(",") for line in lines[1:] if line]
    return embedded, header, rows


def emit_report(manifest_paths, out_dir=DEFAULT_REPORT_OUT, mixed_ok=False):
    """Aggregate scenario manifests into one report JSON plus plot CSVs.

    Every artifact named by a manifest must embed that manifest's config
    hash; stale or foreign artifacts abort the aggregation unless
    mixed_ok is set.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries, tables, mismatches = [], {}, []
    seen_hash_by_scenario = {}
    for path in manifest_paths:
        p, manifest = _load_manifest(path)
        mh = manifest["config_sha256"]
        scenario = manifest["scenario"]
        prev = seen_hash_by_scenario.setdefault(scenario, mh)
        if prev != mh:
            mismatches.append(f"scenario {scenario!r} appears with two "
                              f"different config hashes")
        results = {}
        for name in manifest["artifacts"].get("json", []):
            try:
                payload = json.loads((p.parent / name).read_text())
            except OSError as exc:
                raise ConfigError(f"artifact not readable: {exc}")
            except json.JSONDecodeError as exc:
                raise ConfigError(f"corrupt artifact {p.parent / name}: {exc}")
            if payload.get("config_sha256") != mh:
                mismatches.append(f"{p.parent / name}: embedded hash differs "
                                  f"from manifest {p}")
            results[name] = payload
        for name in manifest["artifacts"].get("csv", []):
            embedded, header, rows = _read_artifact_csv(p.parent / name)
            if embedded != mh:
                mismatches.append(f"{p.parent / name}: embedded hash differs "
                                  f"from manifest {p}")
            tables.setdefault(header, []).extend(
                [scenario] + row for row in rows)
        entries.append({
            "scenario": scenario,
            "command": manifest["command"],
            "config_sha256": mh,
            "seed": manifest.get("seed"),
            "exit_code": manifest.get("exit_code"),
            "wall_seconds": manifest.get("wall_seconds"),
            "results": results,
        })
    if mismatches and not mixed_ok:
        raise ConfigError(
            "refusing to aggregate artifacts with mixed config hashes:\n  "
            + "\n  ".join(mismatches) + "\n(rerun the scenarios, or pass "
            "--mixed-ok to override)")

    hashes = sorted({e["config_sha256"] for e in entries})
    stamp = hashes[0] if len(hashes) == 1 else "mixed"
    payload = {
        "report_version": 1,
        "config_sha256": stamp,
        "sources": [str(p) for p in manifest_paths],
        "mismatches": mismatches,
        "entries": entries,
    }
    write_json(out / "report.json", payload)
    extra = 0
    for header, rows in tables.items():
        name = _PLOT_TABLES.get(header)
        if name is None:
            extra += 1
            name = f"report_table{extra}.csv"
        write_csv(out / name, ("scenario",) + header, rows,
                  comment=f"config_sha256={stamp}")
    log.info("report: %d scenario entries, %d plot tables -> %s",
             len(entries), len(tables), out)
    return payload


# ------------------------------------------------------------ entry point

def _limit_threads(k):
    global _THREAD_LIMITER
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(k)
    try:
        import threadpoolctl
        _THREAD_LIMITER = threadpoolctl.threadpool_limits(limits=k)
    except ImportError:
        log.debug("threadpoolctl unavailable; BLAS pools follow the "
                  "environment variables only")


class _Parser(argparse.ArgumentParser):
    # argparse's usage errors exit with status 2, which this tool reserves
    # for "ran correctly, threshold missed"; remap them to 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser():
    parser = _Parser(prog="pathslice",
                     description="time-sliced propagator laboratory")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="subcommand")
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True,
                        help="INI scenario config")
    common.add_argument("--out", default=None,
                        help="output directory (overrides config)")
    common.add_argument("--threads", type=int, default=None,
                        help="limit BLAS/OpenMP thread pools")
    common.add_argument("--seed", type=int, default=None,
                        help="seed override for randomized subdivisions")
    for name in SCENARIO_COMMANDS:
        sub.add_parser(name, parents=[common])
    rep = sub.add_parser("report")
    rep.add_argument("manifests", nargs="+",
                     help="manifest.json paths of the runs to aggregate")
    rep.add_argument("--out", default=DEFAULT_REPORT_OUT)
    rep.add_argument("--threads", type=int, default=None)
    rep.add_argument("--mixed-ok", action="store_true",
                     help="aggregate despite mixed config hashes")
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        _limit_threads(args.threads)
    try:
        if args.command == "report":
            emit_report(args.manifests, args.out, args.mixed_ok)
            return 0
        config = load_config(args.config, args.command,
                             seed=args.seed, out=args.out)
        return run_scenario(config)
    except ConfigError as exc:
        print(f"pathslice: config error: {exc}", file=sys.stderr)
        return 1
    except PathsliceError as exc:
        print(f"pathslice: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
