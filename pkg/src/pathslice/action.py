"""Endpoint data of the classical action between two points.

For a pair (x, y) and times s < t, the two-point action S(t, s, x, y) is
evaluated along the shooting trajectory together with every derivative
the kernel construction needs.  All second derivatives come from the
flowed variational matrix:

    dS/dx       =  xi(t)                dS/dy      = -eta
    d2S/dx2     =  (dxi/deta)/(dx/deta)
    d2S/dx dy   =  -1/(dx/deta)
    d2S/dy2     =  (dx/dy)/(dx/deta)

The excess action rate is the potential's contribution per unit time,

    (S - (x-y)^2 / (2 (t-s))) / (t-s),

identically zero for the free particle; its second x-derivative drives
the leading amplitude transport.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .bvp import NEWTON_TOL, shoot

log = logging.getLogger(__name__)

HJ_TIME_STEP = 1e-4


@dataclass
class ActionData:
    """Two-point action values and derivatives on a batch of pairs."""

    s: float
    t: float
    x: np.ndarray
    y: np.ndarray
    eta: np.ndarray
    xi: np.ndarray
    S: np.ndarray
    d2Sdx2: np.ndarray
    d2Sdxdy: np.ndarray
    d2Sdy2: np.ndarray
    excess_action_rate: np.ndarray
    excess_action_rate_xlap: np.ndarray
    flow: object = None

    @property
    def dSdx(self):
        return self.xi

    @property
    def dSdy(self):
        return -self.eta


def action_data(potential, s, t, x, y, record_times=(), tol=NEWTON_TOL,
                **solver_opts):
    """Shoot the boundary problem and assemble all endpoint action data."""
    tau = t - s
    res = shoot(potential, s, t, x, y, tol=tol, record_times=record_times,
                **solver_opts)
    fl = res.flow
    x_b, y_b = np.broadcast_arrays(np.asarray(x, float),
                                   np.asarray(y, float))
    d2xx = fl.Jxieta / fl.Jxeta
    d2xy = -1.0 / fl.Jxeta
    d2yy = fl.Jxy / fl.Jxeta
    excess = (fl.S - (x_b - y_b) ** 2 / (2.0 * tau)) / tau
    xlap = (d2xx - 1.0 / tau) / tau
    return ActionData(s, t, x_b, y_b, res.eta, fl.xi, fl.S,
                      d2xx, d2xy, d2yy, excess, xlap, flow=fl)


def hj_residual(potential, s, t, x, y, dt=HJ_TIME_STEP, **solver_opts):
    """|dS/dt + (dS/dx)^2/2 + V(t, x)| via centered differencing in t.

    dS/dt uses a 5-point stencil (four extra boundary solves at t +- dt,
    t +- 2dt) so the stencil error stays far below the 1e-5 target even
    with the 1/(t-s)-scale time derivatives of short steps.  Meaningless
    across a drive jump: raises ValueError if the potential's time
    dependence is discontinuous inside the stencil.
    """
    if potential.discontinuities_between(t - 2.5 * dt, t + 2.5 * dt):
        raise ValueError(
            "Hamilton-Jacobi residual is undefined across a drive jump; "
            "move t away from the discontinuity")
    base = action_data(potential, s, t, x, y, **solver_opts)
    stencil = [action_data(potential, s, t + k * dt, x, y, **solver_opts).S
               for k in (-2, -1, 1, 2)]
    dSdt = (stencil[0] - 8 * stencil[1] + 8 * stencil[2]
            - stencil[3]) / (12.0 * dt)
    return np.abs(dSdt + 0.5 * base.xi ** 2
                  + potential.value(t, np.asarray(x, float)))


def _shoot_S(potential, s, t, x, y, **kw):
    return shoot(potential, s, t, x, y, **kw).flow.S


def gradient_check(potential, s, t, x, y, h_int=1e-3, h_fd=1e-5,
                   **solver_opts):
    """Finite-difference defects of the action gradient identities.

    Returns the worst relative defects over the batch:

    * dSdx_internal / dSdy_internal: 5-point stencils at step h_int,
      accurate to ~1e-10, probing internal consistency of flow + shooting
    * dSdx_fd / dSdy_fd: plain centered differences at step h_fd
    * d2Sdxdy_fd: centered cross difference at step h_int
    """
    data = action_data(potential, s, t, x, y, **solver_opts)
    x_b, y_b = data.x, data.y
    scale = np.maximum(np.abs(data.eta), 1.0)

    def S(xx, yy):
        return _shoot_S(potential, s, t, xx, yy, **solver_opts)

    def five_point(f, u, h):
        return (f(u - 2 * h) - 8 * f(u - h) + 8 * f(u + h)
                - f(u + 2 * h)) / (12 * h)

    dSdx_int = five_point(lambda u: S(u, y_b), x_b, h_int)
    dSdy_int = five_point(lambda u: S(x_b, u), y_b, h_int)
    dSdx_fd = (S(x_b + h_fd, y_b) - S(x_b - h_fd, y_b)) / (2 * h_fd)
    dSdy_fd = (S(x_b, y_b + h_fd) - S(x_b, y_b - h_fd)) / (2 * h_fd)
    cross = (S(x_b + h_int, y_b + h_int) - S(x_b + h_int, y_b - h_int)
             - S(x_b - h_int, y_b + h_int)
             + S(x_b - h_int, y_b - h_int)) / (4 * h_int ** 2)
    return {
        "dSdx_internal": float(np.max(np.abs(dSdx_int - data.xi) / scale)),
        "dSdy_internal": float(np.max(np.abs(dSdy_int + data.eta) / scale)),
        "dSdx_fd": float(np.max(np.abs(dSdx_fd - data.xi) / scale)),
        "dSdy_fd": float(np.max(np.abs(dSdy_fd + data.eta) / scale)),
        "d2Sdxdy_fd": float(np.max(np.abs(cross - data.d2Sdxdy)
                                   / np.maximum(np.abs(data.d2Sdxdy), 1.0))),
    }
