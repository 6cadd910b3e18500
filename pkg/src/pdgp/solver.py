"""Online primal-dual updates and the frozen-instance reference solver.

The measurement-based update (pd_step) is the unit executed at every
control step: devices and user copies take projected gradient steps
built only from local information, the tracking multiplier ascends on
the measured constraint value, and the consensus multipliers ascend on
the device/user disagreements.  All right-hand sides read the incoming
state (Jacobi semantics), so the update order inside a step is
immaterial.

model_based_step performs the same update in stacked matrix form from
exact model quantities; with noiseless measurements and exact gradients
the two coincide.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class BadInterval(Exception):
    """Projection interval with lo > hi."""


class NoConvergence(Exception):
    """Reference solver failed to certify a KKT point.

    Carries the last iterate so callers can degrade gracefully.
    """

    def __init__(self, msg, x_star=None, nu=None, residual=None, iterations=0):
        super().__init__(msg)
        self.x_star = x_star
        self.nu = nu
        self.residual = residual
        self.iterations = iterations


# ---------------------------------------------------------------------------
# projections

def project_interval(v, lo, hi):
    """Euclidean projection onto [lo, hi]; BadInterval when lo > hi."""
    if lo > hi:
        raise BadInterval(f"interval [{lo}, {hi}] is empty")
    out = np.minimum(np.maximum(v, lo), hi)
    return float(out) if np.isscalar(v) else out


def project_ball(v, radius):
    """Euclidean projection onto the centered ball of the given radius."""
    if not radius > 0:
        raise ValueError(f"ball radius must be positive, got {radius}")
    v = np.asarray(v, dtype=float)
    nrm = float(np.linalg.norm(v))
    if nrm <= radius:
        return v
    return v * (radius / nrm)


# ---------------------------------------------------------------------------
# state containers

@dataclass
class SolverState:
    """Iterate of the online algorithm.

    x_dev  : device setpoints, shape (M,)
    x_user : per-device arrays of user copies, x_user[m] has length N_m
    nu     : tracking-constraint multiplier (scalar, >= 0)
    lam    : per-device arrays of consensus multipliers, same shape as x_user
    alpha  : step size
    """

    x_dev: np.ndarray
    x_user: list
    nu: float
    lam: list
    alpha: float

    def copy(self):
        return SolverState(x_dev=self.x_dev.copy(),
                           x_user=[u.copy() for u in self.x_user],
                           nu=self.nu,
                           lam=[l.copy() for l in self.lam],
                           alpha=self.alpha)


@dataclass
class ProjectionSets:
    """Feasible sets used by every projection in the update.

    intervals may be a static list of per-device (lo, hi) pairs or a
    callable of the step index returning such a list.
    """

    intervals: object
    nu_cap: float
    lambda_radius: float

    def __post_init__(self):
        if not self.nu_cap > 0:
            raise ValueError("nu_cap must be positive")
        if not self.lambda_radius > 0:
            raise ValueError("lambda_radius must be positive")

    def intervals_at(self, t):
        iv = self.intervals(t) if callable(self.intervals) else self.intervals
        for lo, hi in iv:
            if lo > hi:
                raise BadInterval(f"interval [{lo}, {hi}] is empty at step {t}")
        return iv


@dataclass
class StepInputs:
    """Everything a single update consumes.

    c_val and c_grad are the constraint value and gradient evaluated at
    the (possibly noisy) output in use; gradients[m][n] is the cost
    gradient fed to user n of device m (surrogate or exact, depending on
    mode); device_mask[m] is False when device m holds its setpoint this
    step (slow actuation).
    """

    t: int
    c_val: float
    c_grad: np.ndarray
    a_cols: np.ndarray
    gradients: list
    device_mask: np.ndarray = None


def initial_state(topology, intervals, alpha):
    """Midpoint-of-interval start with zero multipliers."""
    x_dev = np.array([0.5 * (lo + hi) for lo, hi in intervals], dtype=float)
    x_user = [np.full(nm, x_dev[m]) for m, nm in enumerate(topology.device_users)]
    lam = [np.zeros(nm) for nm in topology.device_users]
    return SolverState(x_dev=x_dev, x_user=x_user, nu=0.0, lam=lam, alpha=alpha)


# ---------------------------------------------------------------------------
# measurement-based update

def primal_device_step(state, m, a_col, c_grad, interval):
    """Projected step of device m driven by duals only.

    The device needs no cost gradient: it reacts to the tracking
    multiplier through its output sensitivity and to the consensus
    multipliers of its own users.
    """
    lo, hi = interval
    lam_sum = float(np.sum(state.lam[m]))
    drive = float(np.dot(a_col, state.nu * c_grad)) + lam_sum
    return project_interval(state.x_dev[m] - state.alpha * drive, lo, hi)


def primal_user_step(state, m, n, g_mn, interval):
    """Projected step of user copy (m, n) from its cost gradient."""
    lo, hi = interval
    drive = g_mn - state.lam[m][n]
    return project_interval(state.x_user[m][n] - state.alpha * drive, lo, hi)


def dual_nu_step(state, c_val, nu_cap):
    """Ascent on the constraint value, clipped to [0, nu_cap]."""
    return float(min(max(state.nu + state.alpha * c_val, 0.0), nu_cap))


def dual_lambda_step(state, topology, radius):
    """Ascent on consensus residuals, projected onto the stacked ball."""
    inc = [state.lam[m] + state.alpha * (state.x_dev[m] - state.x_user[m])
           for m in range(topology.n_devices)]
    stacked = project_ball(np.concatenate(inc), radius)
    out, k = [], 0
    for nm in topology.device_users:
        out.append(stacked[k:k + nm].copy())
        k += nm
    return out


def pd_step(state, inputs, sets, topology):
    """One Jacobi sweep of the measurement-based update.

    Every block reads the incoming state; the returned state is the
    time-advanced iterate.
    """
    iv = sets.intervals_at(inputs.t)
    mask = inputs.device_mask
    if mask is None:
        mask = np.ones(topology.n_devices, dtype=bool)
    x_dev = np.empty(topology.n_devices)
    for m in range(topology.n_devices):
        if mask[m]:
            x_dev[m] = primal_device_step(state, m, inputs.a_cols[:, m],
                                          inputs.c_grad, iv[m])
        else:
            x_dev[m] = state.x_dev[m]
    x_user = []
    for m in range(topology.n_devices):
        vals = np.empty(topology.device_users[m])
        for n in range(topology.device_users[m]):
            vals[n] = primal_user_step(state, m, n, inputs.gradients[m][n], iv[m])
        x_user.append(vals)
    nu = dual_nu_step(state, inputs.c_val, sets.nu_cap)
    lam = dual_lambda_step(state, topology, sets.lambda_radius)
    return SolverState(x_dev=x_dev, x_user=x_user, nu=nu, lam=lam,
                       alpha=state.alpha)


def model_based_step(state, inputs, sets, topology):
    """Same update in stacked matrix form.

    Drives the iterate with the full Lagrangian gradient assembled from
    the incidence matrix and the augmented output map.  Feeding it the
    exact model quantities (noiseless output, true cost gradients)
    reproduces pd_step exactly.
    """
    iv = sets.intervals_at(inputs.t)
    mask = inputs.device_mask
    if mask is None:
        mask = np.ones(topology.n_devices, dtype=bool)
    x = topology.stack(state.x_dev, state.x_user)
    gf = topology.stack(np.zeros(topology.n_devices), inputs.gradients)
    n_y = inputs.c_grad.shape[0]
    abar = np.zeros((n_y, topology.n_cols))
    abar[:, topology.dev_cols] = inputs.a_cols
    lam_st = np.concatenate(state.lam)
    drive = gf + abar.T @ (state.nu * inputs.c_grad) + topology.d.T @ lam_st
    lo = np.empty(topology.n_cols)
    hi = np.empty(topology.n_cols)
    for m, (l, h) in enumerate(iv):
        if l > h:
            raise BadInterval(f"interval [{l}, {h}] is empty at step {inputs.t}")
        lo[topology.dev_cols[m]] = l
        hi[topology.dev_cols[m]] = h
        lo[topology.user_cols[m]] = l
        hi[topology.user_cols[m]] = h
    x_new = np.minimum(np.maximum(x - state.alpha * drive, lo), hi)
    for m in range(topology.n_devices):
        if not mask[m]:
            x_new[topology.dev_cols[m]] = x[topology.dev_cols[m]]
    nu = dual_nu_step(state, inputs.c_val, sets.nu_cap)
    lam_st_new = project_ball(lam_st + state.alpha * (topology.d @ x),
                              sets.lambda_radius)
    x_dev, x_user = topology.unstack(x_new)
    lam, k = [], 0
    for nm in topology.device_users:
        lam.append(lam_st_new[k:k + nm].copy())
        k += nm
    return SolverState(x_dev=x_dev, x_user=x_user, nu=nu, lam=lam,
                       alpha=state.alpha)


# ---------------------------------------------------------------------------
# frozen-instance reference solver

@dataclass
class FrozenInstance:
    """One time step of the coordination problem with everything known.

    The consensus structure is eliminated (each user copy equals its
    device value at any optimum), leaving a box-constrained problem in
    the device variables: separable convex quadratics plus one soft
    tracking constraint on the scalar output.

    curv[m] and lin[m] define the aggregated device cost
    sum_n U_{m,n}(x) = curv[m]/2 x^2 + lin[m] x + const with curv > 0.
    """

    curv: np.ndarray
    lin: np.ndarray
    a_row: np.ndarray
    b_off: float
    beta: float
    y_ref: float
    zeta: float
    intervals: list
    nu_cap: float = math.inf

    def __post_init__(self):
        self.curv = np.asarray(self.curv, dtype=float)
        self.lin = np.asarray(self.lin, dtype=float)
        self.a_row = np.asarray(self.a_row, dtype=float)
        if np.any(self.curv <= 0):
            raise ValueError("aggregated curvature must be positive")
        if not self.zeta > 0:
            raise ValueError("zeta must be positive")

    def cost_grad(self, x):
        return self.curv * x + self.lin

    def output(self, x):
        return float(self.a_row @ x) + self.b_off

    def constraint(self, x):
        dev = self.output(x) - self.y_ref
        return 0.5 * self.beta * dev * dev - self.zeta

    def constraint_grad(self, x):
        return self.beta * (self.output(x) - self.y_ref) * self.a_row


def freeze_instance(quad_users, a_row, b_off, beta, y_ref, zeta, intervals,
                    nu_cap=math.inf):
    """Aggregate user quadratics a (x - p)^2 + c into a FrozenInstance.

    quad_users[m] is a list of (a, p) pairs for the users of device m.
    """
    curv = np.array([2.0 * sum(a for a, _ in us) for us in quad_users])
    lin = np.array([-2.0 * sum(a * p for a, p in us) for us in quad_users])
    return FrozenInstance(curv=curv, lin=lin, a_row=a_row, b_off=float(b_off),
                          beta=float(beta), y_ref=float(y_ref),
                          zeta=float(zeta), intervals=list(intervals),
                          nu_cap=nu_cap)


def _kkt_residual(inst, x, nu):
    g = inst.cost_grad(x) + nu * inst.constraint_grad(x)
    lo = np.array([iv[0] for iv in inst.intervals])
    hi = np.array([iv[1] for iv in inst.intervals])
    stat = float(np.max(np.abs(x - np.minimum(np.maximum(x - g, lo), hi))))
    c = inst.constraint(x)
    return max(stat, max(c, 0.0), abs(nu * c))


def _box_argmin(inst, shift):
    """Componentwise argmin of the shifted quadratic over the box."""
    lo = np.array([iv[0] for iv in inst.intervals])
    hi = np.array([iv[1] for iv in inst.intervals])
    raw = -(inst.lin + shift) / inst.curv
    return np.minimum(np.maximum(raw, lo), hi)


def solve_instance_oracle(inst, tol=1e-8, max_iter=200000, x0=None, nu0=0.0):
    """Certified optimum of a frozen instance.

    Exploits the structure of the reduced problem: if the box-argmin of
    the aggregated cost already satisfies the tracking constraint the
    multiplier is zero; otherwise the optimum sits on the nearest face
    of the band |a x + b - y_ref| <= sqrt(2 zeta / beta) and is found by
    monotone bisection on the scalar multiplier of that face.  The
    result is certified against the KKT residual (projected gradient
    stationarity, feasibility, complementarity); NoConvergence carries
    the last iterate if certification fails.  x0 and nu0 are accepted
    for interface compatibility and do not affect the result.

    Returns (x_star, nu_star, info).
    """
    for lo, hi in inst.intervals:
        if lo > hi:
            raise BadInterval(f"interval [{lo}, {hi}] is empty")

    iters = 0
    x_free = _box_argmin(inst, 0.0)
    if inst.constraint(x_free) <= 0.0:
        res = _kkt_residual(inst, x_free, 0.0)
        info = {"iterations": 1, "residual": res, "converged": res <= tol,
                "active": False}
        if not info["converged"]:
            raise NoConvergence("inactive-case residual above tolerance",
                                x_star=x_free, nu=0.0, residual=res,
                                iterations=1)
        return x_free, 0.0, info

    # constraint active: aim for the nearest face of the band
    r = math.sqrt(2.0 * inst.zeta / inst.beta)
    d = inst.y_ref - inst.b_off
    side = 1.0 if inst.output(x_free) - inst.y_ref > 0 else -1.0
    target = d + side * r

    def reach(theta):
        return float(inst.a_row @ _box_argmin(inst, theta * inst.a_row))

    # phi(theta) = reach(theta) - target is monotone nonincreasing
    phi0 = reach(0.0) - target
    lo_t, hi_t = 0.0, 0.0
    step = 1.0
    if phi0 > 0:
        hi_t = step
        while reach(hi_t) - target > 0:
            hi_t *= 2.0
            iters += 1
            if iters > 200:
                raise ValueError("tracking band unreachable within the box")
    else:
        lo_t = -step
        while reach(lo_t) - target < 0:
            lo_t *= 2.0
            iters += 1
            if iters > 200:
                raise ValueError("tracking band unreachable within the box")

    for _ in range(min(200, max_iter)):
        iters += 1
        mid = 0.5 * (lo_t + hi_t)
        if reach(mid) - target > 0:
            lo_t = mid
        else:
            hi_t = mid
        if hi_t - lo_t <= 1e-16 * max(1.0, abs(hi_t), abs(lo_t)):
            break
    theta = 0.5 * (lo_t + hi_t)
    x_star = _box_argmin(inst, theta * inst.a_row)
    nu_star = theta / (inst.beta * side * r)
    nu_star = max(nu_star, 0.0)
    if math.isfinite(inst.nu_cap) and nu_star > inst.nu_cap:
        logger.warning("oracle multiplier %.3g exceeds nu_cap %.3g",
                       nu_star, inst.nu_cap)
    res = _kkt_residual(inst, x_star, nu_star)
    info = {"iterations": iters, "residual": res, "converged": res <= tol,
            "active": True}
    if not info["converged"]:
        raise NoConvergence("active-case residual above tolerance",
                            x_star=x_star, nu=nu_star, residual=res,
                            iterations=iters)
    return x_star, nu_star, info
