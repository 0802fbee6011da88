"""Batched classical flow with variational (Jacobian) and action transport.

Integrates, for a whole batch of initial conditions at once,

    x'   = xi                   (position)
    xi'  = -grad V(t, x)        (momentum)
    J'   = dF(t, x) J           (2x2 Jacobian d(x,xi)/d(y,eta))
    S'   = xi^2/2 - V(t, x)     (Lagrangian action along the trajectory)

using an adaptive Dormand-Prince 5(4) stepper whose accept/reject decision
is driven by the worst ray in the batch in a weighted max norm, so every
trajectory in the batch meets the tolerance, not just the batch average.
Time intervals are split at the potential's drive discontinuities so each
integration segment sees smooth time dependence; requested record times
become exact step endpoints, which gives node values without interpolant
machinery.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import TimeStepTooLarge, TrajectoryEscaped

log = logging.getLogger(__name__)

# trajectories leaving this radius abort the integration: every catalog
# potential confines the desk-scale phase-space window well inside it
ESCAPE_RADIUS = 50.0

RTOL_DEFAULT = 1e-11
ATOL_DEFAULT = 1e-12

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
# difference between the 5th and embedded 4th order weights (k7 = FSAL slope)
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920,
               -17253 / 339200, 22 / 525, -1 / 40])
_N_COMPONENTS = 7

_MIN_STEP_FRACTION = 1e-13
_MAX_STEP_GROWTH = 5.0
_SAFETY = 0.9
# PI (Lund) step-control exponents for the 5(4) pair: the err_prev term
# damps the accept/reject oscillation a bare I-controller falls into when
# the batch-max error jumps between rays from one step to the next
_PI_ALPHA = 0.17
_PI_BETA = 0.04


@dataclass
class FlowState:
    """Phase-space point, Jacobian entries and running action of a batch."""

    t: float
    x: np.ndarray
    xi: np.ndarray
    Jxy: np.ndarray
    Jxeta: np.ndarray
    Jxiy: np.ndarray
    Jxieta: np.ndarray
    S: np.ndarray

    @property
    def symplectic_defect(self):
        """|det J - 1| of the variational matrix, zero for the exact flow."""
        det = self.Jxy * self.Jxieta - self.Jxeta * self.Jxiy
        return np.abs(det - 1.0)


@dataclass
class FlowResult:
    final: FlowState
    recorded: list  # FlowState at each requested record time, in order
    n_steps: int
    n_rejected: int

    def __getattr__(self, name):
        return getattr(self.final, name)


def _rhs(potential, t, state, out):
    """Write the 7-component slope of `state` into `out` (same shape)."""
    x, xi = state[0], state[1]
    v, vp, vpp = potential.derivatives(t, x)
    out[0] = xi
    np.negative(vp, out=out[1])
    out[2] = state[4]
    out[3] = state[5]
    np.multiply(vpp, state[2], out=out[4])
    np.negative(out[4], out=out[4])
    np.multiply(vpp, state[3], out=out[5])
    np.negative(out[5], out=out[5])
    np.multiply(xi, xi, out=out[6])
    out[6] *= 0.5
    out[6] -= v


def _step_error(err, y_old, y_new, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(y_old), np.abs(y_new))
    return float(np.max(np.abs(err) / scale))


def flow_map(potential, s, t, y, eta, record_times=(), rtol=RTOL_DEFAULT,
             atol=ATOL_DEFAULT, escape_radius=ESCAPE_RADIUS):
    """Flow a batch of initial conditions (y, eta) from time s to time t.

    record_times is an increasing sequence of interior times at which the
    full state is captured (by stepping exactly onto them).  Returns a
    FlowResult whose attributes are the final-time arrays, broadcast from
    the shapes of y and eta.
    """
    if not t > s:
        raise ValueError("flow_map requires t > s")
    y_b, eta_b = np.broadcast_arrays(np.asarray(y, float),
                                     np.asarray(eta, float))
    shape = y_b.shape
    yv = y_b.reshape(-1)
    ev = eta_b.reshape(-1)
    nb = yv.size

    state = np.zeros((7, nb))
    state[0] = yv
    state[1] = ev
    state[2] = 1.0  # dx/dy
    state[5] = 1.0  # dxi/deta

    rec_times = [float(u) for u in record_times]
    if any(not s < u <= t for u in rec_times):
        raise ValueError("record times must lie in (s, t]")
    if sorted(rec_times) != rec_times:
        raise ValueError("record times must be increasing")

    jumps = potential.discontinuities_between(s, t)
    checkpoints = sorted(set(rec_times) | set(jumps) | {t})
    rec_set = set(rec_times)

    span = t - s
    h = span / 16.0
    n_steps = 0
    n_rejected = 0
    recorded = []
    t_cur = s
    jump_set = set(jumps)
    err_prev = 1e-4
    just_rejected = False
    # stage slopes live in one (7, 7*nb) block so the tableau combinations
    # become single matrix-vector products
    k_flat = np.empty((7, _N_COMPONENTS * nb))
    k_stages = k_flat.reshape(7, _N_COMPONENTS, nb)
    state_flat = state.reshape(-1)
    for t_stop in checkpoints:
        # stages evaluated exactly on a drive jump must see the left limit
        # of the right-continuous drive, so cap stage times just short of it
        t_ceil = t_stop - 1e-12 * span if t_stop in jump_set else t_stop
        while t_cur < t_stop - 1e-14 * span:
            h_try = min(h, t_stop - t_cur)
            if h_try < _MIN_STEP_FRACTION * span:
                raise TimeStepTooLarge(
                    f"adaptive step underflow at t = {t_cur:.6g}")
            _rhs(potential, t_cur, state, k_stages[0])
            for i in range(1, 6):
                incr = _A[i] @ k_flat[:i]
                _rhs(potential, min(t_cur + _C[i] * h_try, t_ceil),
                     (state_flat + h_try * incr).reshape(state.shape),
                     k_stages[i])
            y_new = (state_flat + h_try * (_B @ k_flat[:6])) \
                .reshape(state.shape)
            _rhs(potential, min(t_cur + h_try, t_ceil), y_new, k_stages[6])
            err = (h_try * (_E @ k_flat)).reshape(state.shape)
            enorm = max(_step_error(err, state, y_new, rtol, atol), 1e-300)
            if enorm <= 1.0:
                t_cur = t_cur + h_try
                state = y_new
                state_flat = state.reshape(-1)
                n_steps += 1
                if np.max(np.abs(state[0])) > escape_radius:
                    raise TrajectoryEscaped(
                        f"trajectory reached |x| > {escape_radius:g} "
                        f"at t = {t_cur:.6g}")
                factor = _SAFETY * enorm ** (-_PI_ALPHA) * err_prev ** _PI_BETA
                growth_cap = 1.0 if just_rejected else _MAX_STEP_GROWTH
                h = h_try * min(growth_cap, max(0.2, factor))
                err_prev = max(enorm, 1e-4)
                just_rejected = False
            else:
                n_rejected += 1
                h = h_try * min(0.9, max(0.1, _SAFETY * enorm ** -0.2))
                just_rejected = True
        t_cur = t_stop
        if t_stop in rec_set:
            recorded.append(_snapshot(t_stop, state, shape))

    final = _snapshot(t, state, shape)
    log.debug("flow_map %s: batch %d, %d steps (%d rejected)",
              potential.name, nb, n_steps, n_rejected)
    return FlowResult(final, recorded, n_steps, n_rejected)


def _snapshot(t, state, shape):
    return FlowState(t, *(state[i].reshape(shape).copy() for i in range(7)))


@dataclass
class ScaledFlowDecomposition:
    """Short-time normal form of the variational matrix.

    Writing tau = t - s, the Jacobian blocks of a flow over one step obey

        dx/dy      = 1 - tau^2 C        dx/deta  = tau (1 - tau^2 A)
        dxi/deta   = 1 - tau^2 B        dxi/dy   = tau Cp

    with A, B, C, Cp all O(1) as tau -> 0; the fields store those scaled
    remainders, which is the convenient form for step-size safeguards.
    """

    tau: float
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Cp: np.ndarray

    @classmethod
    def from_state(cls, state, s):
        tau = state.t - s
        if tau <= 0:
            raise ValueError("need a forward step")
        return cls(
            tau=tau,
            A=(1.0 - state.Jxeta / tau) / tau ** 2,
            B=(1.0 - state.Jxieta) / tau ** 2,
            C=(1.0 - state.Jxy) / tau ** 2,
            Cp=state.Jxiy / tau,
        )

    @property
    def scaled_position_jacobian(self):
        """dx/deta / tau; collapse of this determinant signals a caustic."""
        return 1.0 - self.tau ** 2 * self.A
