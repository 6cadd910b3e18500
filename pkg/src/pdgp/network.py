"""Network side of the coordination problem.

Holds the consensus topology between devices and their users, the linear
input/output plant that maps device injections to the measured output,
the time-varying tracking constraint, and the loaders for exogenous
load / reference traces.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import seeds


class EmptyTopology(Exception):
    """Topology with no devices."""


class HorizonExceeded(Exception):
    """Step index outside the exogenous trace."""


# ---------------------------------------------------------------------------
# topology

@dataclass
class Topology:
    """Star consensus topology: device m against each of its N_m users.

    The stacked decision vector is laid out per device as
    [x_m, x_{m,1}, ..., x_{m,N_m}] and devices concatenated in order.
    d is the block-diagonal incidence matrix whose rows are
    e_device - e_user, one row per (device, user) edge; omega is its
    largest singular value.
    """

    device_users: tuple
    d: np.ndarray
    omega: float
    dev_cols: np.ndarray = field(default=None)
    user_cols: list = field(default=None)

    def __post_init__(self):
        if self.dev_cols is None:
            offs, cols, ucols = 0, [], []
            for nm in self.device_users:
                cols.append(offs)
                ucols.append(np.arange(offs + 1, offs + 1 + nm))
                offs += 1 + nm
            self.dev_cols = np.asarray(cols, dtype=int)
            self.user_cols = ucols

    @property
    def n_devices(self):
        return len(self.device_users)

    @property
    def n_users(self):
        return int(sum(self.device_users))

    @property
    def n_cols(self):
        return self.n_devices + self.n_users

    def stack(self, x_dev, x_user):
        """Assemble the stacked vector from device values and per-device user lists."""
        out = np.empty(self.n_cols)
        out[self.dev_cols] = x_dev
        for m, cols in enumerate(self.user_cols):
            out[cols] = x_user[m]
        return out

    def unstack(self, x):
        x = np.asarray(x, dtype=float)
        x_dev = x[self.dev_cols].copy()
        x_user = [x[cols].copy() for cols in self.user_cols]
        return x_dev, x_user

    def expand_devices(self, x_dev):
        """Stacked vector with every user copy set equal to its device value."""
        return self.stack(x_dev, [np.full(nm, x_dev[m])
                                  for m, nm in enumerate(self.device_users)])


def _largest_singular_value(mat, tol=1e-13, max_iter=10000):
    """Power iteration on mat^T mat from a fixed seeded start."""
    mtm = mat.T @ mat
    rng = np.random.default_rng(0x51D)
    v = rng.standard_normal(mtm.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = mtm @ v
        lam_new = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        if abs(lam_new - lam) <= tol * max(lam_new, 1.0):
            lam = lam_new
            break
        lam = lam_new
    return float(np.sqrt(max(lam, 0.0)))


def build_incidence(device_users):
    """Build the star topology for the given per-device user counts.

    Raises EmptyTopology for an empty list and ValueError if any device
    has no users.
    """
    device_users = tuple(int(n) for n in device_users)
    if len(device_users) == 0:
        raise EmptyTopology("need at least one device")
    if any(nm < 1 for nm in device_users):
        raise ValueError("every device needs at least one user")
    blocks = []
    for nm in device_users:
        b = np.hstack([np.ones((nm, 1)), -np.eye(nm)])
        blocks.append(b)
    rows = sum(device_users)
    cols = len(device_users) + rows
    d = np.zeros((rows, cols))
    r0, c0 = 0, 0
    for b in blocks:
        nm = b.shape[0]
        d[r0:r0 + nm, c0:c0 + nm + 1] = b
        r0 += nm
        c0 += nm + 1
    omega = _largest_singular_value(d)
    return Topology(device_users=device_users, d=d, omega=omega)


# ---------------------------------------------------------------------------
# plant

@dataclass
class Plant:
    """Linear time-varying output map y^t = A^t x + B^t w^t.

    a and b may be constant matrices or callables of the step index.
    exogenous is the per-step uncontrollable input, shape (T, W).
    """

    a: object
    b: object
    exogenous: np.ndarray
    meas_noise_std: float = 0.0

    def __post_init__(self):
        self.exogenous = np.atleast_2d(np.asarray(self.exogenous, dtype=float))
        if self.meas_noise_std < 0:
            raise ValueError("meas_noise_std must be nonnegative")

    @property
    def horizon(self):
        return self.exogenous.shape[0]

    def a_at(self, t):
        return self.a(t) if callable(self.a) else self.a

    def b_at(self, t):
        return self.b(t) if callable(self.b) else self.b


def _check_step(plant, t):
    if not 0 <= t < plant.horizon:
        raise HorizonExceeded(f"step {t} outside trace of length {plant.horizon}")


def model_output(plant, t, x_in):
    """Noiseless plant output at step t for device injections x_in."""
    _check_step(plant, t)
    a = np.atleast_2d(plant.a_at(t))
    b = np.atleast_2d(plant.b_at(t))
    return a @ np.asarray(x_in, dtype=float) + b @ plant.exogenous[t]


def measure_output(plant, t, x_in, seed):
    """Measured output: model output plus i.i.d. Gaussian sensor noise.

    The noise draw is keyed by (seed, t) so a replay with the same seed
    reproduces the measurement stream exactly regardless of call order.
    """
    y = model_output(plant, t, x_in)
    if plant.meas_noise_std > 0:
        rng = seeds.substream(seed, seeds.MEASUREMENT, t)
        y = y + rng.normal(0.0, plant.meas_noise_std, size=y.shape)
    return y


# ---------------------------------------------------------------------------
# tracking constraint

@dataclass
class TrackingConstraint:
    """Soft tracking constraint C^t(y) = beta/2 (y - y_ref^t)^2 - zeta^t <= 0."""

    beta: float
    y_ref: np.ndarray
    zeta: np.ndarray

    def __post_init__(self):
        self.y_ref = np.asarray(self.y_ref, dtype=float).ravel()
        self.zeta = np.asarray(self.zeta, dtype=float).ravel()
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.y_ref.shape != self.zeta.shape:
            raise ValueError("y_ref and zeta must have the same length")
        if np.any(self.zeta <= 0):
            raise ValueError("zeta must be positive at every step")


def constraint_value(con, t, y):
    """C^t evaluated at the (scalar) output y."""
    if not 0 <= t < con.y_ref.size:
        raise HorizonExceeded(f"step {t} outside reference of length {con.y_ref.size}")
    dev = float(np.asarray(y).ravel()[0]) - con.y_ref[t]
    return 0.5 * con.beta * dev * dev - con.zeta[t]


def constraint_gradient(con, t, y):
    """dC^t/dy at the output y."""
    if not 0 <= t < con.y_ref.size:
        raise HorizonExceeded(f"step {t} outside reference of length {con.y_ref.size}")
    dev = float(np.asarray(y).ravel()[0]) - con.y_ref[t]
    return np.array([con.beta * dev])


# ---------------------------------------------------------------------------
# traces

def _read_two_column_csv(path, header):
    ts, vals = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise ValueError(f"{path}:1: empty file, expected header "
                             f"'{','.join(header)}'") from None
        if [h.strip() for h in head] != list(header):
            raise ValueError(f"{path}:1: expected header '{','.join(header)}', "
                             f"got '{','.join(head)}'")
        prev = None
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                t = float(row[0])
                v = float(row[1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value "
                                 f"'{row[0]},{row[1]}'") from None
            if prev is not None and t <= prev:
                raise ValueError(f"{path}:{lineno}: timestamps must be strictly "
                                 f"increasing ({t} after {prev})")
            prev = t
            ts.append(t)
            vals.append(v)
    if not ts:
        raise ValueError(f"{path}:2: no data rows")
    return np.asarray(ts), np.asarray(vals)


def load_trace_csv(path):
    """Read an uncontrollable-load trace (header: timestamp_s,load_kw)."""
    return _read_two_column_csv(path, ("timestamp_s", "load_kw"))


def reference_csv(path):
    """Read a setpoint trace (header: timestamp_s,y_ref_kw)."""
    return _read_two_column_csv(path, ("timestamp_s", "y_ref_kw"))


def zero_order_hold(ts, vals, grid):
    """Resample (ts, vals) onto grid by holding the last sample.

    Every grid time must be at or after the first sample.
    """
    ts = np.asarray(ts, dtype=float)
    vals = np.asarray(vals, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if grid.size and grid[0] < ts[0]:
        raise ValueError(f"grid starts at {grid[0]} before first sample {ts[0]}")
    idx = np.searchsorted(ts, grid, side="right") - 1
    return vals[idx]


def synthetic_load(horizon_s, seed, granularity_s=1.0, base=25.0,
                   amplitudes=(4.0, 2.0), periods_s=(7200.0, 1800.0),
                   noise_std=0.3):
    """Generate a smooth-ish load trace: base + sinusoids + white noise."""
    n = int(np.floor(horizon_s / granularity_s)) + 1
    ts = np.arange(n) * granularity_s
    vals = np.full(n, float(base))
    for amp, per in zip(amplitudes, periods_s):
        vals += amp * np.sin(2.0 * np.pi * ts / per)
    if noise_std > 0:
        rng = seeds.substream(seed, seeds.TRACE)
        vals += rng.normal(0.0, noise_std, size=n)
    return ts, vals
