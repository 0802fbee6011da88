"""Oscillatory short-time propagator kernels on sampled position grids.

A single time step from s to t is approximated by the integral operator

    (E f)(x) = (2 pi i hbar (t-s))^{-1/2} int e^{i S(t,s,x,y)/hbar}
               a(t,s,x,y) f(y) dy,

with S the two-point classical action and `a` an amplitude truncated at a
chosen order (1 at order 0, the transported leading amplitude at order 1,
its first correction folded in at order 2).  Sampling such a kernel on a
uniform grid is only faithful if three grid pathologies are controlled,
and each control below was sized empirically before being frozen:

* band taper: a C-infinity cutoff in both endpoint momenta |dS/dx| and
  |dS/dy| confines the kernel to classical momenta the lattice can carry
  without replica (aliased stationary-phase) images reaching the
  measurement window.  The admissible band is replica-limited, wider
  than a naive Nyquist bound.
* free-symbol correction: the tapered sampled *free* kernel is an exact
  circulant; dividing its FFT symbol out of the input side and
  installing the exact free multiplier exp(-i hbar k^2 dt / 2) removes
  the taper's in-band Fresnel bias.  Applied inside the de-alias band
  only.
* de-alias filter: composition interleaves a C-infinity momentum band
  limiter between factors so junk created above the band by one factor
  never re-enters the next; its flat region strictly contains the
  measurement window, so it is invisible to windowed norms.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .action import action_data
from .bvp import DELTA_MAX, shoot
from .errors import TimeStepTooLarge, UndersampledPhase
from .flow import ATOL_DEFAULT, RTOL_DEFAULT
from .grids import Grid
from .norms import P_CUT, band_weight

log = logging.getLogger(__name__)

PAIR_CHUNK = 131_072

# Gauss-Legendre node counts: transport integral of the leading
# amplitude, and the outer integral of its first correction
AMPLITUDE_NODES = 8
CORRECTION_OUTER_NODES = 4

# Rays slower than this keep the solver's full tolerance; faster rays sit
# far above the measurement band, are taper-suppressed, and their smooth
# phase errors integrate away against band-limited states, so their
# tolerance is allowed to grow like speed^4 up to the cap below.  Sized so
# the calm band strictly contains every classical momentum the phase-space
# window can reach in one step.
CALM_SPEED = 15.0
FAST_RTOL_CAP = 1e-8

_SQRT_BRANCH = np.exp(-1j * np.pi / 4.0)


def _fast_ray_opts(speed, solver_opts, calm_speed=None):
    """Solver options for a chunk keyed to the ray speed `speed`."""
    calm = CALM_SPEED if calm_speed is None else calm_speed
    if speed <= calm:
        return solver_opts
    opts = dict(solver_opts)
    scale = (speed / calm) ** 4
    opts["rtol"] = min(FAST_RTOL_CAP, opts.get("rtol", RTOL_DEFAULT) * scale)
    opts["atol"] = min(FAST_RTOL_CAP / 10.0,
                       opts.get("atol", ATOL_DEFAULT) * scale)
    return opts


# Half-width of the strip around a curvature kink inside which a ray is
# scheduled as kink-crossing; covers the worst path sag off the straight
# endpoint segment over one admissible step
KINK_MARGIN = 0.5
# kink-crossing rays are further grouped by when the crossing happens, so
# a batch only steps finely while its own members are mid-crossing
T_CROSS_BINS = 4
# kink crossers get finer chunks than free-flying rays: their step counts
# are high, so speed homogeneity matters more than batch amortization
CROSSER_CHUNK = 16_384


def _ray_chunks(potential, xs, ys, dt):
    """Yield (index array, slowest member speed) blocks of similar cost.

    The batch-max step controller makes every ray in a batch pay for the
    batch's worst ray, so rays are grouped before shooting: first by
    whether their path can meet one of the potential's curvature kinks
    (those rays force kink-resolving step sizes), kink crossers then by
    the straight-path estimate of the crossing time, and finally chunked
    in speed order.  Each chunk reports its fastest member's speed, which
    keys the tolerance relaxation; slow rays sharing a relaxed chunk
    free-ride on the small steps its fast rays force, so their actual
    error stays far below the loosened tolerance (ablation against
    all-tight integration: action error 3e-10, Jacobian error 8e-10).
    """
    u = np.abs(xs - ys)
    speed = u / dt
    crossing = np.zeros(u.shape, dtype=bool)
    tfrac = np.full(u.shape, 2.0)
    for kink in getattr(potential, "spatial_kinks", ()):
        hit = ((np.minimum(xs, ys) - KINK_MARGIN <= kink)
               & (kink <= np.maximum(xs, ys) + KINK_MARGIN))
        crossing |= hit
        with np.errstate(divide="ignore", invalid="ignore"):
            tf = (kink - ys) / (xs - ys)
        tf = np.clip(np.nan_to_num(tf, nan=0.5, posinf=0.5, neginf=0.5),
                     0.0, 1.0)
        tfrac = np.where(hit, np.minimum(tfrac, tf), tfrac)
    tbin = np.where(crossing,
                    np.floor(np.minimum(tfrac, 0.999) * T_CROSS_BINS), -1.0)
    order = np.lexsort((u, tbin, crossing))
    new_block = (np.diff(tbin[order]) != 0) | np.diff(crossing[order])
    for block in np.split(order, np.nonzero(new_block)[0] + 1):
        chunk = CROSSER_CHUNK if crossing[block[0]] else PAIR_CHUNK
        for lo in range(0, block.size, chunk):
            idx = block[lo:lo + chunk]
            yield idx, float(speed[idx].max())


# --------------------------------------------------------------- policy

def dealias_band(grid, hbar):
    """De-alias filter band (flat, cutoff) in classical momentum units.

    Frozen against the desk-scale box: generous at hbar ~ 1 where the
    lattice momentum ceiling is high, progressively tighter as hbar
    shrinks the ceiling hbar * k_nyquist.  Raises UndersampledPhase when
    even the tight band cannot sit below the ceiling with the margin the
    replica analysis requires.
    """
    if hbar >= 0.75:
        g_flat, g_cut = 12.0, 24.0
    elif hbar >= 0.4:
        g_flat, g_cut = 12.0, 18.0
    else:
        g_flat, g_cut = 9.5, 13.0
    ceiling = grid.momentum_ceiling(hbar)
    if g_cut > ceiling - 7.0:
        raise UndersampledPhase(
            f"de-alias band needs momenta up to {g_cut:g} but the lattice "
            f"ceiling is {ceiling:.3g}; increase n or shrink the box")
    if g_flat < P_CUT + 1.0:
        raise UndersampledPhase(
            "de-alias band flat region does not cover the measurement "
            "window")
    return g_flat, g_cut


def taper_params(grid, hbar, dt, g_cut):
    """Kernel momentum-taper band (p_lo, p_hi) for a step of length dt.

    The flat region starts just above the de-alias band; the ramp may
    extend to the replica-stationary limit 2 hbar k_nyquist minus safety
    margins, but never wider than 10/dt, beyond which the tapered kernel
    no longer fits the box.  A wide ramp matters: the taper's residual
    in-band bias shrinks with the Fresnel phase budget across the ramp.
    """
    p_lo = g_cut + 2.0
    p_hi = min(2.0 * grid.momentum_ceiling(hbar) - g_cut - 8.0, 10.0 / dt)
    if p_hi < p_lo + 4.0:
        raise UndersampledPhase(
            f"taper band [{p_lo:g}, {p_hi:.3g}] is too narrow for "
            f"dt = {dt:g}; increase n or shorten the step")
    return p_lo, p_hi


@dataclass(frozen=True)
class StepDiscretization:
    """All grid-policy numbers for one kernel step, validated once."""

    grid: Grid
    hbar: float
    dt: float
    g_flat: float
    g_cut: float
    p_lo: float
    p_hi: float

    @classmethod
    def for_step(cls, grid, hbar, dt):
        g_flat, g_cut = dealias_band(grid, hbar)
        p_lo, p_hi = taper_params(grid, hbar, dt, g_cut)
        return cls(grid, hbar, dt, g_flat, g_cut, p_lo, p_hi)

    @property
    def dealias_diag(self):
        return band_weight(self.hbar * self.grid.k, self.g_flat, self.g_cut)

    def momentum_taper(self, p):
        return band_weight(p, self.p_lo, self.p_hi)

    def free_symbol_correction_diag(self):
        """Input-side diagonal replacing the sampled free symbol.

        The tapered sampled free kernel is the circulant generated by
        the centered periodic profile phi(u); its FFT is the symbol the
        lattice actually applies to each plane wave.  Inside the
        de-alias band the correction divides that symbol out and
        installs the exact free multiplier; outside it leaves the
        kernel untouched.
        """
        g = self.grid
        u = (np.arange(g.n) * g.dx + g.half_width) % (2 * g.half_width) \
            - g.half_width
        amp = _SQRT_BRANCH / np.sqrt(2.0 * np.pi * self.hbar * self.dt)
        phi = (amp * np.exp(1j * u ** 2 / (2.0 * self.dt * self.hbar))
               * self.momentum_taper(u / self.dt) ** 2 * g.dx)
        sym = np.fft.fft(phi)
        exact = np.exp(-1j * self.hbar * g.k ** 2 * self.dt / 2.0)
        c = np.where(np.abs(sym) > 1e-12, exact / sym, 0.0)
        gd = self.dealias_diag
        return gd * c + (1.0 - gd)


def apply_input_momentum_diag(M, diag):
    """Right-compose a kernel matrix with a momentum multiplier."""
    return np.fft.fft(np.fft.ifft(M, axis=1) * diag[None, :], axis=1)


def apply_output_momentum_diag(M, diag):
    """Left-compose a kernel matrix with a momentum multiplier."""
    return np.fft.ifft(diag[:, None] * np.fft.fft(M, axis=0), axis=0)


# --------------------------------------------------------- subdivisions

@dataclass(frozen=True)
class Subdivision:
    """Strictly increasing time points covering one evolution interval."""

    times: tuple

    def __post_init__(self):
        ts = tuple(float(u) for u in self.times)
        object.__setattr__(self, "times", ts)
        if len(ts) < 2:
            raise ValueError("a subdivision needs at least two times")
        diffs = np.diff(ts)
        if np.any(diffs <= 0):
            raise ValueError("subdivision times must be strictly increasing")
        if np.max(diffs) > DELTA_MAX + 1e-12:
            raise TimeStepTooLarge(
                f"subdivision mesh {np.max(diffs):.4g} exceeds the "
                f"single-step limit {DELTA_MAX}")

    @classmethod
    def uniform(cls, s, t, count):
        return cls(tuple(np.linspace(s, t, count + 1)))

    @classmethod
    def randomized(cls, s, t, count, seed, jitter=0.4):
        """Uniform interior points jittered by +-jitter of a cell, sorted."""
        rng = np.random.default_rng(seed)
        ts = np.linspace(s, t, count + 1)
        cell = (t - s) / count
        ts[1:-1] += rng.uniform(-jitter, jitter, count - 1) * cell
        return cls(tuple(np.sort(ts)))

    @property
    def s(self):
        return self.times[0]

    @property
    def t(self):
        return self.times[-1]

    @property
    def mesh(self):
        return float(np.max(np.diff(self.times)))

    @property
    def steps(self):
        return list(zip(self.times[:-1], self.times[1:]))

    def __len__(self):
        return len(self.times) - 1


# ------------------------------------------------------------ operators

@dataclass
class KernelOperator:
    """A dense matrix standing for an integral operator on the box."""

    matrix: np.ndarray
    grid: Grid
    hbar: float
    s: float
    t: float
    label: str
    meta: dict = field(default_factory=dict)

    def apply(self, f):
        return self.matrix @ np.asarray(f, dtype=complex)

    def difference(self, other):
        _require_compatible(self, other)
        if not (np.isclose(self.s, other.s) and np.isclose(self.t, other.t)):
            raise ValueError("operators cover different time intervals")
        return KernelOperator(self.matrix - other.matrix, self.grid,
                             self.hbar, self.s, self.t, "difference",
                             {"left": self.label, "right": other.label})


def _require_compatible(a, b):
    if a.grid != b.grid:
        raise ValueError("operators live on different grids")
    if not np.isclose(a.hbar, b.hbar):
        raise ValueError("operators have different hbar")


# ----------------------------------------------------------- amplitudes

def _gauss_nodes(s, t, count):
    nodes, weights = np.polynomial.legendre.leggauss(count)
    half = 0.5 * (t - s)
    return s + half * (nodes + 1.0), half * weights


@dataclass
class AmplitudeTable:
    """Transported amplitude orders on a batch of endpoint pairs.

    leading is the van Vleck-type factor transported along the
    trajectory; correction is its first transport correction (present
    only when requested).  The combined order-N multiplier is 1 at
    order 0, leading at order 1, leading - i hbar correction at order 2.
    """

    s: float
    t: float
    x: np.ndarray
    y: np.ndarray
    leading: np.ndarray
    correction: np.ndarray = None

    def combined(self, order, hbar):
        if order == 0:
            return np.ones_like(self.leading, dtype=complex)
        if order == 1:
            return self.leading.astype(complex)
        if order == 2:
            if self.correction is None:
                raise ValueError("correction order was not built")
            return self.leading - 1j * hbar * self.correction
        raise ValueError("amplitude orders above 2 are not implemented")


def _leading_amplitude(states, weights, s):
    """exp(-1/2 int (tau-s) * Lap_x(excess action rate) dtau) by GL sum.

    The integrand (tau-s)*Lap = Jxieta/Jxeta - 1/(tau-s) stays smooth
    down to tau = s, where its two terms cancel.
    """
    total = 0.0
    for st, w in zip(states, weights):
        total = total + w * (st.Jxieta / st.Jxeta - 1.0 / (st.t - s))
    return np.exp(-0.5 * total)


# Inside this radius of |x - y| the amplitude tables keep full tolerance:
# their x-Laplacian is taken spectrally, so tolerance-switch shells must
# stay outside the region the trajectory interpolation ever touches
TABLE_CALM_RADIUS = 16.0


def _leading_amplitude_table(potential, s, t, grid, y_cols, nodes,
                             **solver_opts):
    """leading(t, s, x_grid, y_j) for every grid x and listed column y."""
    taus, weights = _gauss_nodes(s, t, nodes)
    xg = grid.x
    yc = np.asarray(y_cols, float)
    xx = np.repeat(xg, yc.size)
    yy = np.tile(yc, grid.n)
    calm = max(CALM_SPEED, TABLE_CALM_RADIUS / (t - s))
    out = np.empty(xx.size)
    for idx, speed in _ray_chunks(potential, xx, yy, t - s):
        opts = _fast_ray_opts(speed, solver_opts, calm)
        res = shoot(potential, s, t, xx[idx], yy[idx],
                    record_times=list(taus), **opts)
        out[idx] = _leading_amplitude(res.flow.recorded, weights, s)
    return out.reshape(grid.n, yc.size)


def _xlap_over_table(table, grid):
    """Spectral second x-derivative of a column table (periodic in x)."""
    k2 = grid.k ** 2
    return np.real(np.fft.ifft(-k2[:, None] * np.fft.fft(table, axis=0),
                               axis=0))


def _correction_ratio_tables(potential, s, t, grid, y_cols, outer_taus,
                             nodes, **solver_opts):
    """Lap_x(leading)/leading whole-grid tables at each outer GL node."""
    tables = []
    for tau_o in outer_taus:
        tab = _leading_amplitude_table(potential, s, tau_o, grid, y_cols,
                                       nodes, **solver_opts)
        tables.append(_xlap_over_table(tab, grid) / tab)
        log.debug("correction table at tau=%.4f done", tau_o)
    return tables


class _AmplitudeEngine:
    """Per-step amplitude machinery shared by the kernel builders.

    Holds the Gauss-Legendre schedules and (for the correction order)
    the whole-grid Laplacian-ratio tables, which are built once per
    step, not once per pair chunk.
    """

    def __init__(self, potential, s, t, order, grid=None,
                 nodes=AMPLITUDE_NODES,
                 outer_nodes=CORRECTION_OUTER_NODES, y_cols=None,
                 **solver_opts):
        self.potential, self.s, self.t, self.order = potential, s, t, order
        self.solver_opts = solver_opts
        self.grid = grid
        self.inner_taus, self.inner_w = _gauss_nodes(s, t, nodes)
        self.record_times = sorted(self.inner_taus)
        self.ratio_tables = []
        if order >= 2:
            if grid is None:
                raise ValueError("the correction order needs a grid for "
                                 "its x-Laplacian tables")
            self.outer_taus, self.outer_w = _gauss_nodes(s, t, outer_nodes)
            self.record_times = sorted(set(self.record_times)
                                       | set(self.outer_taus))
            cols = grid.x if y_cols is None else np.asarray(y_cols, float)
            log.info("building %d correction tables (%d x %d pairs each)",
                     outer_nodes, grid.n, cols.size)
            self.ratio_tables = _correction_ratio_tables(
                potential, s, t, grid, cols, self.outer_taus, nodes,
                **solver_opts)

    def shoot_chunk(self, xs, ys, solver_opts=None):
        opts = self.solver_opts if solver_opts is None else solver_opts
        if self.order == 0:
            return shoot(self.potential, self.s, self.t, xs, ys, **opts)
        return shoot(self.potential, self.s, self.t, xs, ys,
                     record_times=self.record_times, **opts)

    def amplitudes(self, res, col_idx):
        """Amplitude orders for one shot chunk.

        col_idx maps each pair to its column in the ratio tables (used
        only at the correction order).
        """
        if self.order == 0:
            return 1.0, None
        by_time = {st.t: st for st in res.flow.recorded}
        a1 = _leading_amplitude([by_time[u] for u in self.inner_taus],
                                self.inner_w, self.s)
        if self.order == 1:
            return a1, None
        integral = np.zeros_like(a1)
        for tau_o, w_o, ratio in zip(self.outer_taus, self.outer_w,
                                     self.ratio_tables):
            idx = (by_time[tau_o].x - self.grid.x[0]) / self.grid.dx
            integral += w_o * map_coordinates(
                ratio, [idx, np.asarray(col_idx, float)], order=3,
                mode="nearest")
        a2 = -0.5 * a1 * integral
        return a1, a2


def build_amplitudes(potential, s, t, x, y, orders=1, grid=None,
                     nodes=AMPLITUDE_NODES,
                     outer_nodes=CORRECTION_OUTER_NODES, **solver_opts):
    """Transported amplitudes on endpoint pairs, as an AmplitudeTable.

    orders=1 builds the leading factor only; orders=2 adds the first
    correction, which integrates the x-Laplacian of whole-grid leading
    tables along the trajectory and therefore needs the grid that
    defines those tables.
    """
    if orders not in (1, 2):
        raise ValueError("orders must be 1 or 2")
    x_b, y_b = np.broadcast_arrays(np.asarray(x, float),
                                   np.asarray(y, float))
    xf = np.ascontiguousarray(x_b.ravel(), dtype=float)
    yf = np.ascontiguousarray(y_b.ravel(), dtype=float)
    y_unique, col_idx = np.unique(yf, return_inverse=True)
    engine = _AmplitudeEngine(potential, s, t, 2 if orders == 2 else 1,
                              grid=grid, nodes=nodes,
                              outer_nodes=outer_nodes,
                              y_cols=y_unique if orders == 2 else None,
                              **solver_opts)
    a1 = np.empty(xf.size)
    a2 = np.empty(xf.size) if orders == 2 else None
    for idx, speed in _ray_chunks(potential, xf, yf, t - s):
        opts = _fast_ray_opts(speed, solver_opts)
        res = engine.shoot_chunk(xf[idx], yf[idx], opts)
        c1, c2 = engine.amplitudes(res, col_idx[idx])
        a1[idx] = c1
        if orders == 2:
            a2[idx] = c2
    return AmplitudeTable(s, t, x_b, y_b, a1.reshape(x_b.shape),
                          None if a2 is None else a2.reshape(x_b.shape))


# -------------------------------------------------------- kernel builds

def _band_pairs(grid, dt, p_hi):
    """Index pairs (i, j) with |x_i - y_j| inside the tapered reach."""
    r_max = min((p_hi + 6.0) * dt + 1.0, 2.0 * grid.half_width - grid.dx)
    xg = grid.x
    mask = np.abs(xg[:, None] - xg[None, :]) <= r_max
    return np.nonzero(mask)


def _validated_step(grid, hbar, s, t):
    dt = t - s
    if not dt > 0:
        raise ValueError("kernel build requires t > s")
    if dt > DELTA_MAX + 1e-12:
        raise TimeStepTooLarge(
            f"single kernel step {dt:.4g} exceeds the limit {DELTA_MAX}")
    return dt, StepDiscretization.for_step(grid, hbar, dt)


def build_EN(potential, grid, s, t, hbar, order=0, *,
             free_symbol_correction=True, nodes=AMPLITUDE_NODES,
             outer_nodes=CORRECTION_OUTER_NODES, **solver_opts):
    """Order-N short-time kernel operator for one step from s to t.

    The kernel is band-tapered in both endpoint momenta; the input-side
    free-symbol correction (on by default) is the grid-level repair the
    composition accuracy was validated with.  Disable it when comparing
    entries against closed forms.
    """
    dt, disc = _validated_step(grid, hbar, s, t)
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    ii, jj = _band_pairs(grid, dt, disc.p_hi)
    xg = grid.x
    log.info("build_EN %s order %d: n=%d, %d band pairs, dt=%.4g",
             potential.name, order, grid.n, ii.size, dt)
    engine = _AmplitudeEngine(potential, s, t, order, grid=grid,
                              nodes=nodes, outer_nodes=outer_nodes,
                              **solver_opts)
    prefactor = _SQRT_BRANCH / np.sqrt(2.0 * np.pi * hbar * dt)
    xs_all, ys_all = xg[ii], xg[jj]
    values = np.zeros(ii.size, dtype=complex)
    for idx, speed in _ray_chunks(potential, xs_all, ys_all, dt):
        opts = _fast_ray_opts(speed, engine.solver_opts)
        res = engine.shoot_chunk(xs_all[idx], ys_all[idx], opts)
        a1, a2 = engine.amplitudes(res, jj[idx])
        if order == 0:
            amp = 1.0
        elif order == 1:
            amp = a1
        else:
            amp = a1 - 1j * hbar * a2
        taper = (disc.momentum_taper(res.flow.xi)
                 * disc.momentum_taper(res.eta))
        values[idx] = (prefactor * np.exp(1j * res.flow.S / hbar) * amp
                       * taper * grid.dx)
    M = np.zeros((grid.n, grid.n), dtype=complex)
    M[ii, jj] = values
    if free_symbol_correction:
        M = apply_input_momentum_diag(M, disc.free_symbol_correction_diag())
    return KernelOperator(M, grid, hbar, s, t, f"E{order}", {
        "order": order, "p_lo": disc.p_lo, "p_hi": disc.p_hi,
        "g_flat": disc.g_flat, "g_cut": disc.g_cut,
        "free_symbol_correction": bool(free_symbol_correction),
    })


def build_E0(potential, grid, s, t, hbar, **kwargs):
    """Leading-order kernel (amplitude identically 1)."""
    return build_EN(potential, grid, s, t, hbar, order=0, **kwargs)


def build_GN(potential, grid, s, t, hbar, order=0, nodes=AMPLITUDE_NODES,
             outer_nodes=CORRECTION_OUTER_NODES, **solver_opts):
    """Defect kernel: what the Schrodinger operator leaves of order N.

    Applying (i hbar d_t + hbar^2/2 Lap - V) to the order-N kernel
    leaves an integral operator with the same oscillatory phase and the
    multiplier

        order 0:  (i hbar (t-s) / 2) * Lap_x(excess action rate)
        order N:  -(-i hbar)^(N+1) / 2 * Lap_x(a_N)

    evaluated at the endpoints.  Built without the free-symbol
    correction: this operator is measured directly, never composed.
    """
    dt, disc = _validated_step(grid, hbar, s, t)
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    ii, jj = _band_pairs(grid, dt, disc.p_hi)
    xg = grid.x
    prefactor = _SQRT_BRANCH / np.sqrt(2.0 * np.pi * hbar * dt)
    values = np.zeros(ii.size, dtype=complex)

    xs_all, ys_all = xg[ii], xg[jj]
    if order == 0:
        for idx, speed in _ray_chunks(potential, xs_all, ys_all, dt):
            opts = _fast_ray_opts(speed, solver_opts)
            data = action_data(potential, s, t, xs_all[idx], ys_all[idx],
                               **opts)
            taper = (disc.momentum_taper(data.xi)
                     * disc.momentum_taper(data.eta))
            mult = 0.5j * hbar * dt * data.excess_action_rate_xlap
            values[idx] = (prefactor * np.exp(1j * data.S / hbar)
                           * mult * taper * grid.dx)
    else:
        if order == 1:
            table = _leading_amplitude_table(potential, s, t, grid, xg,
                                             nodes, **solver_opts)
        else:
            amp = build_amplitudes(potential, s, t,
                                   np.repeat(xg, grid.n),
                                   np.tile(xg, grid.n), orders=2,
                                   grid=grid, nodes=nodes,
                                   outer_nodes=outer_nodes, **solver_opts)
            table = amp.correction.reshape(grid.n, grid.n)
        mult_full = -0.5 * (-1j * hbar) ** (order + 1) \
            * _xlap_over_table(table, grid)
        for idx, speed in _ray_chunks(potential, xs_all, ys_all, dt):
            opts = _fast_ray_opts(speed, solver_opts)
            res = shoot(potential, s, t, xs_all[idx], ys_all[idx], **opts)
            taper = (disc.momentum_taper(res.flow.xi)
                     * disc.momentum_taper(res.eta))
            values[idx] = (prefactor * np.exp(1j * res.flow.S / hbar)
                           * mult_full[ii[idx], jj[idx]]
                           * taper * grid.dx)

    M = np.zeros((grid.n, grid.n), dtype=complex)
    M[ii, jj] = values
    return KernelOperator(M, grid, hbar, s, t, f"G{order}", {
        "order": order, "p_lo": disc.p_lo, "p_hi": disc.p_hi,
    })


def build_G0(potential, grid, s, t, hbar, **kwargs):
    return build_GN(potential, grid, s, t, hbar, order=0, **kwargs)


# ---------------------------------------------------------- composition

def build_chain(potential, grid, subdivision, hbar, order=0, **kwargs):
    """One kernel per subdivision step.

    Uniform chains over an autonomous potential (no drive
    discontinuities) share a single build, re-labelled per step.
    """
    steps = subdivision.steps
    dts = np.diff(subdivision.times)
    uniform = np.allclose(dts, dts[0], rtol=1e-12, atol=1e-15)
    if uniform and not potential.time_discontinuities:
        k = build_EN(potential, grid, steps[0][0], steps[0][1], hbar,
                     order=order, **kwargs)
        return [KernelOperator(k.matrix, grid, hbar, a, b, k.label, k.meta)
                for a, b in steps]
    return [build_EN(potential, grid, a, b, hbar, order=order, **kwargs)
            for a, b in steps]


def compose_subdivision(kernels, dealias=True):
    """Compose a time-ordered chain of step kernels into one operator.

    A smooth momentum band limiter is interleaved between consecutive
    factors -- never on the outside, which keeps composition associative
    -- and uniform chains sharing one matrix are raised to their power
    by repeated squaring.  Chains must match in grid and hbar and be
    contiguous in time.
    """
    kernels = list(kernels)
    if not kernels:
        raise ValueError("nothing to compose")
    first = kernels[0]
    for a, b in zip(kernels[:-1], kernels[1:]):
        _require_compatible(a, b)
        if abs(b.s - a.t) > 1e-12:
            raise ValueError(
                f"chain broken in time: a factor ends at {a.t:g} but the "
                f"next starts at {b.s:g}")
    diag = None
    if dealias and len(kernels) > 1:
        g_flat = first.meta.get("g_flat")
        g_cut = first.meta.get("g_cut")
        if g_flat is None:
            g_flat, g_cut = dealias_band(first.grid, first.hbar)
        diag = band_weight(first.hbar * first.grid.k, g_flat, g_cut)

    mats = [k.matrix for k in kernels]
    shared = len(mats) > 1 and all(m is mats[0] for m in mats)
    if shared:
        base = mats[0] if diag is None \
            else apply_output_momentum_diag(mats[0], diag)
        acc = None
        p = len(mats) - 1
        while p > 0:
            if p & 1:
                acc = base if acc is None else base @ acc
            base = base @ base
            p >>= 1
        C = mats[0] @ acc
    else:
        C = mats[0]
        for m in mats[1:]:
            C = m @ (C if diag is None
                     else apply_output_momentum_diag(C, diag))
    label = f"{first.label}(composed x{len(kernels)})"
    return KernelOperator(C, first.grid, first.hbar, first.s,
                          kernels[-1].t, label,
                          {**first.meta, "factors": len(kernels)})


# ------------------------------------------------------ exact operators

def exact_propagator(potential, grid, s, t, hbar):
    """Closed-form sampled propagator: free line or harmonic rotation.

    Harmonic uses the first-focal-interval closed form and refuses
    steps reaching the focal time pi/omega0.
    """
    tau = t - s
    if not tau > 0:
        raise ValueError("exact_propagator requires t > s")
    xg = grid.x
    if potential.name == "free":
        pref = _SQRT_BRANCH / np.sqrt(2.0 * np.pi * hbar * tau)
        dxm = xg[:, None] - xg[None, :]
        M = pref * np.exp(1j * dxm ** 2 / (2.0 * hbar * tau)) * grid.dx
    elif potential.name == "harmonic":
        w0 = potential.params.get("omega0", 1.0)
        if w0 * tau >= np.pi:
            raise TimeStepTooLarge(
                "closed-form harmonic kernel is only valid below the "
                f"focal time pi/omega0 = {np.pi / w0:.4g}")
        sn = np.sin(w0 * tau) / w0
        pref = _SQRT_BRANCH / np.sqrt(2.0 * np.pi * hbar * sn)
        xsq = xg ** 2
        S = (np.cos(w0 * tau) * (xsq[:, None] + xsq[None, :])
             - 2.0 * xg[:, None] * xg[None, :]) / (2.0 * sn)
        M = pref * np.exp(1j * S / hbar) * grid.dx
    else:
        raise ValueError(
            f"no closed-form propagator for {potential.name!r}")
    return KernelOperator(M, grid, hbar, s, t, "U_exact",
                          {"potential": potential.name})
