"""Two-point boundary solves by damped Newton shooting on whole batches.

Given arrays of departure points y (at time s) and arrival points x (at
time t), finds the launch momenta eta such that the classical trajectory
from (y, eta) arrives at x.  The Newton update uses the flowed Jacobian
dx/deta; a per-ray step-halving line search keeps rays that overshoot from
dragging the batch, and two determinant safeguards reject time steps that
are long enough for focusing to set in:

* |dx/deta| / (t-s) < 1/2   -> TimeStepTooLarge   (approaching a caustic)
* |dx/deta| > 2 (t-s)       -> DeterminantDegenerate
  (the mixed action Hessian |d2S/dxdy| = 1/|dx/deta| has dropped below
  half its free-particle value (t-s)^{-1})
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import (DeterminantDegenerate, TimeStepTooLarge,
                     TrajectoryEscaped)
from .flow import ATOL_DEFAULT, RTOL_DEFAULT, flow_map

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-10
NEWTON_MAX_ITERS = 25
_MAX_HALVINGS = 10

# single-step state safeguard: largest time step the boundary layer accepts
DELTA_MAX = 0.25


@dataclass
class ShootingResult:
    eta: np.ndarray
    flow: "FlowResult"
    n_newton: int


def _check_step(flow, tau):
    """Reject steps long enough for focusing or defocusing to set in."""
    scaled = np.abs(flow.Jxeta) / tau
    if np.min(scaled) < 0.5:
        raise TimeStepTooLarge(
            f"scaled position Jacobian {np.min(scaled):.3g} below 1/2; "
            "trajectories are focusing")
    if np.max(scaled) > 2.0:
        raise DeterminantDegenerate(
            "mixed action Hessian below half its free value: "
            f"|dx/deta|/(t-s) reached {np.max(scaled):.3g}")


def shoot(potential, s, t, x_target, y, eta0=None, tol=NEWTON_TOL,
          max_iters=NEWTON_MAX_ITERS, record_times=(), rtol=RTOL_DEFAULT,
          atol=ATOL_DEFAULT, check_determinants=True):
    """Solve x(t; y, eta) = x_target for eta, batched over the inputs.

    The free-particle momentum (x - y)/(t - s) seeds the iteration unless
    eta0 is supplied.  record_times are captured on the final (converged)
    flow only.
    """
    tau = t - s
    if not tau > 0:
        raise ValueError("shoot requires t > s")
    x_b, y_b = np.broadcast_arrays(np.asarray(x_target, float),
                                   np.asarray(y, float))
    eta = ((x_b - y_b) / tau if eta0 is None
           else np.broadcast_to(np.asarray(eta0, float), x_b.shape).copy())
    eta = np.array(eta, dtype=float)

    flow = flow_map(potential, s, t, y_b, eta, rtol=rtol, atol=atol)
    if check_determinants:
        _check_step(flow, tau)
    resid = flow.x - x_b
    n_newton = 0
    for _ in range(max_iters):
        if np.max(np.abs(resid)) <= tol:
            break
        jac = flow.Jxeta
        if np.min(np.abs(jac)) < 1e-8 * tau:
            raise TimeStepTooLarge(
                "shooting Jacobian dx/deta vanished; step too long")
        step = -resid / jac
        lam = np.ones_like(eta)
        flow_trial = resid_trial = None
        for _ in range(_MAX_HALVINGS):
            trial = eta + lam * step
            try:
                flow_trial = flow_map(potential, s, t, y_b, trial,
                                      rtol=rtol, atol=atol)
            except TrajectoryEscaped:
                lam = 0.5 * lam
                continue
            resid_trial = flow_trial.x - x_b
            worse = np.abs(resid_trial) > np.abs(resid)
            if not np.any(worse):
                break
            lam = np.where(worse, 0.5 * lam, lam)
        if resid_trial is None:
            raise TimeStepTooLarge(
                "every damped shooting update left the simulation region")
        eta, flow, resid = trial, flow_trial, resid_trial
        n_newton += 1
    else:
        raise TimeStepTooLarge(
            f"shooting failed to converge in {max_iters} iterations "
            f"(worst residual {np.max(np.abs(resid)):.3g})")

    if check_determinants:
        _check_step(flow, tau)

    if record_times:
        flow = flow_map(potential, s, t, y_b, eta,
                        record_times=record_times, rtol=rtol, atol=atol)
    log.debug("shoot %s: batch %d converged in %d Newton iterations",
              potential.name, x_b.size, n_newton)
    return ShootingResult(eta, flow, n_newton)
