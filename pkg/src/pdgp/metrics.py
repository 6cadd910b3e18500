"""Run diagnostics: dynamic regret, path lengths, gradient-error sums,
constraint violation, and the theoretical performance bounds.

All quantities are computed from the per-step records collected by the
runner.  Regret is measured against the per-step optimizer produced by
the reference solver; when the oracle runs at a cadence above 1 the
strict variants raise MissingOracle while the relaxed ones restrict the
sums to steps where the optimizer is available.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .scenario import true_cost


class MissingOracle(Exception):
    """A regret computation needs the per-step optimizer and it is absent."""


@dataclass
class StepRecord:
    """Everything retained about one executed control step.

    g_est / g_true are flat arrays over users in device-major order.
    y_hat and c_val refer to the measured output actually fed to the
    update; y_model and c_model are their noiseless counterparts used by
    the violation metrics.  x_star is the stacked optimizer (devices and
    user copies), x_star_dev its device part; both are None on steps the
    oracle skipped.
    """

    t: int
    x_dev: np.ndarray
    x_user: list
    nu: float
    lam: list
    y_hat: float
    c_val: float
    y_model: float
    c_model: float
    y_ref: float
    g_est: np.ndarray
    g_true: np.ndarray
    x_star: np.ndarray = None
    x_star_dev: np.ndarray = None
    nu_star: float = None


@dataclass
class BoundConstants:
    """Problem constants entering the regret and violation bounds."""

    L: float
    J: float
    H: float
    B_x: float
    B_lambda: float
    B_nu: float
    Omega: float
    D_x: float

    @property
    def gamma_x(self):
        return self.L + self.B_nu * self.J + self.Omega * self.B_lambda

    @property
    def gamma_kappa(self):
        return self.Omega ** 2 * self.B_x ** 2 + self.H ** 2


def _oracle_records(records, strict):
    have = [r for r in records if r.x_star_dev is not None]
    if strict and len(have) != len(records):
        raise MissingOracle(
            f"optimizer present on {len(have)} of {len(records)} steps; "
            "rerun with oracle cadence 1")
    if not have:
        raise MissingOracle("no step carries an optimizer")
    return have


def regret_user(records, users, m, j, strict=True):
    """Cumulative regret of user copy j of device m.

    Sums, over steps, the gap between the total cost of device m's user
    group evaluated at copy j's setpoint and at the per-step optimizer.
    """
    recs = _oracle_records(records, strict)
    group = [u for u in users if u.device == m]
    total = 0.0
    for r in recs:
        xj = r.x_user[m][j]
        xs = r.x_star_dev[m]
        total += sum(true_cost(u, xj) - true_cost(u, xs) for u in group)
    return total


def regret_network(records, users, m, strict=True):
    """Average of regret_user over the users of device m."""
    n_m = sum(1 for u in users if u.device == m)
    return sum(regret_user(records, users, m, j, strict)
               for j in range(n_m)) / n_m


def regret_global(records, users, n_devices=None, strict=True):
    """Sum of the per-device network regrets."""
    if n_devices is None:
        n_devices = len(records[0].x_dev)
    return sum(regret_network(records, users, m, strict)
               for m in range(n_devices))


def path_lengths(records, strict=True):
    """Drift of the optimizer sequence: (Phi, Upsilon).

    Phi sums the norms of consecutive optimizer differences, Upsilon the
    squared norms; with n optimizers there are n - 1 terms.
    """
    recs = _oracle_records(records, strict)
    phi = 0.0
    ups = 0.0
    for prev, cur in zip(recs, recs[1:]):
        d = float(np.linalg.norm(cur.x_star - prev.x_star))
        phi += d
        ups += d * d
    return phi, ups


def gradient_error_metrics(records):
    """Cumulative gradient-error sums (xi, Xi).

    xi sums the per-step stacked error norms ||g_est - g_true||; Xi sums
    the squared norms, the empirical stand-in for the variance proxy in
    the analysis.
    """
    xi = 0.0
    big_xi = 0.0
    for r in records:
        e = float(np.linalg.norm(r.g_est - r.g_true))
        xi += e
        big_xi += e * e
    return xi, big_xi


def acv_and_fit(records):
    """Constraint-violation summaries on the noiseless output.

    Returns (acv, fit): acv sums the positive parts of the per-step
    constraint values, fit is the positive part of the plain sum (the
    laxer aggregate some works report).
    """
    vals = np.array([r.c_model for r in records])
    acv = float(np.sum(np.maximum(vals, 0.0)))
    fit = float(max(np.sum(vals), 0.0))
    return acv, fit


def compute_bound_constants(scn):
    """Derive BoundConstants from an instantiated scenario.

    Suprema over the feasible box and the horizon are exact for the
    box/interval geometry in use: the extreme output deviation is
    attained at an interval endpoint.
    """
    cfg = scn.config
    intervals = scn.intervals()
    lo_sum = sum(lo for lo, _ in intervals)
    hi_sum = sum(hi for _, hi in intervals)

    el = _lipschitz(cfg.users, intervals)

    w_tot = (scn.plant.b_at(0) @ scn.plant.exogenous.T).ravel()
    y_lo = lo_sum + w_tot
    y_hi = hi_sum + w_tot
    dev_max = np.maximum(np.abs(y_lo - scn.constraint.y_ref),
                         np.abs(y_hi - scn.constraint.y_ref))
    a_norm = float(np.linalg.norm(scn.plant.a_at(0)))
    j_const = float(cfg.beta * np.max(dev_max) * a_norm)
    h_const = float(np.max(np.maximum(
        0.5 * cfg.beta * dev_max ** 2 - scn.constraint.zeta,
        scn.constraint.zeta)))

    mult = [1 + nm for nm in scn.topology.device_users]
    b_x = math.sqrt(sum(k * max(lo * lo, hi * hi)
                        for k, (lo, hi) in zip(mult, intervals)))
    d_x = math.sqrt(sum(k * (hi - lo) ** 2
                        for k, (lo, hi) in zip(mult, intervals)))

    return BoundConstants(L=el, J=j_const, H=h_const, B_x=b_x,
                          B_lambda=scn.sets.lambda_radius,
                          B_nu=scn.sets.nu_cap,
                          Omega=scn.topology.omega, D_x=d_x)


def _lipschitz(users, intervals):
    total = 0.0
    for u in users:
        lo, hi = intervals[u.device]
        g = 2.0 * u.quad_a * max(abs(lo - u.preferred), abs(hi - u.preferred))
        total += g * g
    return math.sqrt(total)


def bound_curves(records, constants, alpha, strict=False):
    """Evaluate the theoretical right-hand sides on this run.

    Returns (regret_bound, acv_bound) using the empirical path lengths
    and gradient-error sums.  Diagnostic: the measured regret and ACV
    should sit below these (typically by a wide margin).
    """
    c = constants
    t_len = len(records)
    recs = _oracle_records(records, strict)
    first = recs[0]
    x1 = np.concatenate([[first.x_dev[m], *first.x_user[m]]
                         for m in range(len(first.x_dev))])
    init_sq = float(np.sum((x1 - first.x_star) ** 2))
    phi, ups = path_lengths(records, strict=strict)
    xi, big_xi = gradient_error_metrics(records)

    gx, gk = c.gamma_x, c.gamma_kappa
    err_terms = (0.5 * alpha * big_xi + xi * (2 * c.B_x + alpha * gx)
                 + 0.5 * ups / alpha + c.D_x * phi / alpha)
    reg_bound = (0.5 / alpha * (init_sq + c.B_lambda ** 2 + c.B_nu ** 2)
                 + 0.5 * alpha * t_len * (gx ** 2 + gk) + err_terms)
    acv_bound = (t_len * (c.D_x * c.L + c.B_lambda * c.Omega * c.B_x)
                 + err_terms
                 + t_len * ((4 * c.B_x ** 2 + c.B_nu ** 2) / alpha
                            + 0.5 * alpha * (gx ** 2 + c.H ** 2))) / c.B_nu
    return reg_bound, acv_bound


# ---------------------------------------------------------------------------
# output files

def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "nan"
    return format(float(v), ".17g")


def write_steps_csv(path, records, device_users, users):
    """Write the per-step trace with running diagnostic sums.

    Running regret uses the optimizer steps seen so far and repeats its
    last value on steps the oracle skipped, so the column is always
    populated.
    """
    n_dev = len(device_users)
    cols = ["t"]
    cols += [f"x_dev_{m}" for m in range(n_dev)]
    cols += [f"x_user_{m}_{n}" for m in range(n_dev)
             for n in range(device_users[m])]
    cols += ["nu", "lambda_norm", "y", "y_ref", "c_val", "acv_running",
             "reg_running", "xi_running", "Xi_running", "consensus_residual"]

    groups = [[u for u in users if u.device == m] for m in range(n_dev)]
    acv = reg = xi = big_xi = 0.0
    lines = [",".join(cols)]
    for r in records:
        acv += max(r.c_model, 0.0)
        e = float(np.linalg.norm(r.g_est - r.g_true))
        xi += e
        big_xi += e * e
        if r.x_star_dev is not None:
            inc = 0.0
            for m in range(n_dev):
                n_m = device_users[m]
                xs = r.x_star_dev[m]
                for j in range(n_m):
                    xj = r.x_user[m][j]
                    inc += sum(true_cost(u, xj) - true_cost(u, xs)
                               for u in groups[m]) / n_m
            reg += inc
        lam_norm = float(np.linalg.norm(np.concatenate(r.lam)))
        cons = max(float(np.max(np.abs(r.x_dev[m] - r.x_user[m])))
                   for m in range(n_dev))
        row = [str(r.t)]
        row += [_fmt(v) for v in r.x_dev]
        row += [_fmt(v) for m in range(n_dev) for v in r.x_user[m]]
        row += [_fmt(r.nu), _fmt(lam_norm), _fmt(r.y_hat), _fmt(r.y_ref),
                _fmt(r.c_val), _fmt(acv), _fmt(reg), _fmt(xi), _fmt(big_xi),
                _fmt(cons)]
        lines.append(",".join(row))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def write_summary(path, summary):
    """Deterministic JSON summary (sorted keys, fixed float repr)."""
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
