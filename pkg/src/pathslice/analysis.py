"""Convergence studies: build, measure, fit, and judge.

A study composes kernel chains over finer and finer subdivisions,
measures windowed operator-norm errors against the split-step reference,
and fits a power law through the rows that sit clearly above the
reference's own error floor.  Every validity decision (row count, mesh
span, fit quality, monotonicity) is recorded as a flag on the result
instead of silently filtered, so a suspicious study fails loudly in the
caller rather than producing a confident-looking slope.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .grids import Grid
from .kernels import Subdivision, build_chain, build_GN, compose_subdivision
from .norms import operator_norm, windowed_operator_norm
from .potentials import Potential
from .reference import VALIDATE_TARGET, reference_propagator

log = logging.getLogger(__name__)

# rows whose error is within this factor of the reference's validated
# error bound measure the reference, not the chain, and leave the fit
REFERENCE_FLOOR_FACTOR = 10.0

# a fit is trusted when it has this many surviving rows, spanning at
# least this mesh ratio, with at least this coefficient of determination
MIN_FIT_ROWS = 4
MIN_MESH_SPAN = 8.0
MIN_R_SQUARED = 0.98

# rows may rise this much while the mesh shrinks before the study is
# flagged as non-monotone (floors and window noise wiggle this much)
MONOTONE_SLACK = 1.1


# ------------------------------------------------------------- fitting

@dataclass(frozen=True)
class PowerLawFit:
    """error ~ 10^logC * mesh^slope, fitted in log10-log10."""

    slope: float
    logC: float
    r_squared: float
    degenerate: bool


def fit_power_law(meshes, errors):
    """Least-squares power law through (mesh, error) rows.

    Needs at least three strictly positive rows.  The fit is flagged
    degenerate when meshes or errors span less than a factor of two:
    the numbers still come back, but no slope claim should rest on
    them.
    """
    m = np.asarray(meshes, dtype=float)
    e = np.asarray(errors, dtype=float)
    if m.size != e.size:
        raise ValueError("meshes and errors differ in length")
    if m.size < 3:
        raise ValueError("a power-law fit needs at least three rows")
    if np.any(m <= 0) or np.any(e <= 0):
        raise ValueError("power-law rows must be strictly positive")
    lm, le = np.log10(m), np.log10(e)
    slope, logC = np.polyfit(lm, le, 1)
    pred = slope * lm + logC
    ss_res = float(np.sum((le - pred) ** 2))
    ss_tot = float(np.sum((le - le.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    degenerate = (m.max() / m.min() < 2.0) or (e.max() / e.min() < 2.0)
    return PowerLawFit(float(slope), float(logC), float(r2), degenerate)


# -------------------------------------------------------------- results

@dataclass
class StudyRow:
    mesh: float
    error: float
    kept: bool = True
    note: str = ""


@dataclass
class StudyResult:
    scenario: str
    potential: str
    hbar: float
    order: int
    rows: list
    fit: PowerLawFit = None
    floor: float = 0.0
    flags: list = field(default_factory=list)

    @property
    def kept_rows(self):
        return [r for r in self.rows if r.kept]

    @property
    def valid(self):
        return not self.flags

    def to_json(self):
        return {
            "scenario": self.scenario,
            "potential": self.potential,
            "hbar": self.hbar,
            "N": self.order,
            "slope": None if self.fit is None else self.fit.slope,
            "logC": None if self.fit is None else self.fit.logC,
            "r_squared": None if self.fit is None else self.fit.r_squared,
            "floor": self.floor,
            "flags": list(self.flags),
            "floored_meshes": [r.mesh for r in self.rows if not r.kept],
        }

    def csv_rows(self):
        header = ("mesh", "error", "hbar", "N")
        rows = [(r.mesh, r.error, self.hbar, self.order)
                for r in self.rows]
        return header, rows


def _judge(result):
    """Attach validity flags and the fit to a freshly measured result."""
    kept = result.kept_rows
    if len(kept) >= 3:
        result.fit = fit_power_law([r.mesh for r in kept],
                                   [r.error for r in kept])
    if len(kept) < MIN_FIT_ROWS:
        result.flags.append("too-few-rows")
    if kept:
        meshes = [r.mesh for r in kept]
        if max(meshes) / min(meshes) < MIN_MESH_SPAN * (1.0 - 1e-9):
            result.flags.append("narrow-mesh-span")
        order = np.argsort(meshes)[::-1]
        errs = [kept[i].error for i in order]
        if any(b > MONOTONE_SLACK * a for a, b in zip(errs, errs[1:])):
            result.flags.append("non-monotone")
    if result.fit is not None:
        if result.fit.r_squared < MIN_R_SQUARED:
            result.flags.append("low-r-squared")
        if result.fit.degenerate:
            result.flags.append("degenerate-fit")
    return result


# ------------------------------------------------------------- studies

@dataclass
class ConvergenceStudy:
    """Composed-chain error versus subdivision mesh, judged power law.

    counts are subdivision step counts over [s, t]; randomize_seed, when
    set, jitters every subdivision's interior times (a fresh seed per
    count) so the measured rate is a mesh statement, not a uniform-grid
    artifact.
    """

    potential: Potential
    grid: Grid
    s: float
    t: float
    hbar: float = 1.0
    order: int = 0
    counts: tuple = (4, 8, 16, 32, 64)
    randomize_seed: int = None
    jitter: float = 0.35
    floor_factor: float = REFERENCE_FLOOR_FACTOR
    reference_target: float = VALIDATE_TARGET
    cache: bool = True
    scenario: str = ""

    def subdivision(self, count):
        if self.randomize_seed is None:
            return Subdivision.uniform(self.s, self.t, count)
        return Subdivision.randomized(self.s, self.t, count,
                                      seed=self.randomize_seed + count,
                                      jitter=self.jitter)

    def run(self):
        ref = reference_propagator(self.potential, self.grid, self.s,
                                   self.t, self.hbar,
                                   target=self.reference_target,
                                   cache=self.cache)
        floor = self.floor_factor * ref.meta["error_bound"]
        rows = []
        for count in self.counts:
            sub = self.subdivision(count)
            chain = build_chain(self.potential, self.grid, sub, self.hbar,
                                order=self.order)
            C = compose_subdivision(chain)
            err = windowed_operator_norm(C.matrix - ref.matrix, self.grid,
                                         self.hbar)
            kept = err > floor
            rows.append(StudyRow(sub.mesh, float(err), kept,
                                 "" if kept else "reference-floor"))
            log.info("study %s count=%d mesh=%.4g err=%.4e%s",
                     self.scenario or self.potential.name, count, sub.mesh,
                     err, "" if kept else " (floored)")
        name = self.scenario or f"converge_{self.potential.name}"
        return _judge(StudyResult(name, self.potential.name, self.hbar,
                                  self.order, rows, floor=floor))


def single_step_study(potential, grid, s, dts, hbar, order=0, *,
                      reference_target=VALIDATE_TARGET, cache=True,
                      scenario=""):
    """One un-composed kernel step against the reference, per step length.

    The reference is rebuilt per dt (cached); comparisons against
    sampled closed forms are deliberately avoided here because their
    replica images invalidate exactly this small-tau regime.
    """
    from .kernels import build_EN
    rows = []
    for dt in sorted(dts, reverse=True):
        ref = reference_propagator(potential, grid, s, s + dt, hbar,
                                   target=reference_target, cache=cache)
        E = build_EN(potential, grid, s, s + dt, hbar, order=order)
        err = windowed_operator_norm(E.matrix - ref.matrix, grid, hbar)
        floor = REFERENCE_FLOOR_FACTOR * ref.meta["error_bound"]
        kept = err > floor
        rows.append(StudyRow(float(dt), float(err), kept,
                             "" if kept else "reference-floor"))
        log.info("single-step %s dt=%.4g err=%.4e%s", potential.name, dt,
                 err, "" if kept else " (floored)")
    name = scenario or f"single_step_{potential.name}"
    return _judge(StudyResult(name, potential.name, hbar, order, rows))


@dataclass
class ResidualResult:
    """Defect-operator size against step length and against hbar."""

    potential: str
    order: int
    hbar: float
    rows: list                     # (dt, norm) at fixed hbar
    fit: PowerLawFit
    hbar_rows: list                # (hbar, norm) at fixed dt
    hbar_ratio: float
    hbar_dt: float

    def to_json(self):
        return {
            "scenario": f"residual_{self.potential}",
            "potential": self.potential,
            "N": self.order,
            "hbar": self.hbar,
            "slope": self.fit.slope if self.fit else None,
            "logC": self.fit.logC if self.fit else None,
            "r_squared": self.fit.r_squared if self.fit else None,
            "hbar_ratio": self.hbar_ratio,
            "hbar_dt": self.hbar_dt,
        }

    def csv_rows(self):
        header = ("dt", "g_norm", "hbar")
        rows = [(dt, g, self.hbar) for dt, g in self.rows]
        rows += [(self.hbar_dt, g, hb) for hb, g in self.hbar_rows]
        return header, rows


def residual_check(potential, grid, s, dts, hbar=1.0, order=0,
                   hbars=(1.0, 0.5), hbar_dt=0.1, **solver_opts):
    """Measure the defect operator's step-length and hbar scaling.

    The leading defect must shrink linearly in the step length and in
    hbar; the full (unwindowed) matrix 2-norm is used since the defect
    kernel is band-tapered already and never composed.
    """
    rows = []
    for dt in sorted(dts, reverse=True):
        G = build_GN(potential, grid, s, s + dt, hbar, order=order,
                     **solver_opts)
        rows.append((float(dt), operator_norm(G.matrix)))
    fit = (fit_power_law([r[0] for r in rows], [r[1] for r in rows])
           if len(rows) >= 3 else None)
    hbar_rows = []
    for hb in hbars:
        G = build_GN(potential, grid, s, s + hbar_dt, hb, order=order,
                     **solver_opts)
        hbar_rows.append((float(hb), operator_norm(G.matrix)))
    ratio = hbar_rows[0][1] / hbar_rows[1][1] if len(hbar_rows) > 1 \
        else float("nan")
    return ResidualResult(potential.name, order, hbar, rows, fit,
                          hbar_rows, float(ratio), hbar_dt)


def default_packet(grid, hbar):
    """Normalized window-interior Gaussian wavepacket."""
    x = grid.x
    f = np.exp(-0.5 * (x - 1.0) ** 2) * np.exp(1j * 2.0 * x / hbar)
    return f / (np.linalg.norm(f) * np.sqrt(grid.dx))


def strong_limit_check(potential, grid, s, t, hbar, counts, order=0,
                       packet=None, reference_target=VALIDATE_TARGET,
                       cache=True, scenario=""):
    """Composed chains applied to one fixed wavepacket, versus reference.

    Measures ||E(subdivision) f - U f||_L2 for a single in-window state
    as the subdivision refines: the vector-level counterpart of the
    operator-norm studies.
    """
    ref = reference_propagator(potential, grid, s, t, hbar,
                               target=reference_target, cache=cache)
    f = default_packet(grid, hbar) if packet is None else packet
    target = ref.apply(f)
    scale = np.linalg.norm(f)
    rows = []
    for count in counts:
        sub = Subdivision.uniform(s, t, count)
        C = compose_subdivision(build_chain(potential, grid, sub, hbar,
                                            order=order))
        err = np.linalg.norm(C.apply(f) - target) / scale
        floor = REFERENCE_FLOOR_FACTOR * ref.meta["error_bound"]
        kept = err > floor
        rows.append(StudyRow(sub.mesh, float(err), kept,
                             "" if kept else "reference-floor"))
    name = scenario or f"strong_limit_{potential.name}"
    return _judge(StudyResult(name, potential.name, hbar, order, rows))


# ------------------------------------------------------------ artifacts

def write_csv(path, header, rows, comment=None):
    """Write rows with full-precision repr floats (deterministic bytes)."""
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating))
                        else v for v in row])


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
