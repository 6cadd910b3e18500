"""Scenario construction: devices, users, traces, and config parsing.

A scenario bundles everything a run needs: the consensus topology, the
plant and tracking constraint built from load/reference traces, the
projection sets, the true (hidden) user costs, and one GP surrogate per
user.  Scenarios are built either from a TOML config file or from the
built-in default, a 12-hour feeder-coordination setup with a battery, an
HVAC unit and an EV charger serving six users.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import seeds
from .gp import GpModel, KernelParams, ShapeBounds, make_model
from .network import (Plant, TrackingConstraint, Topology, build_incidence,
                      load_trace_csv, reference_csv, synthetic_load,
                      zero_order_hold)
from .solver import ProjectionSets


class ConfigError(Exception):
    """Invalid configuration; the message starts with the field path."""

    def __init__(self, path, msg):
        super().__init__(f"{path}: {msg}")
        self.path = path


# ---------------------------------------------------------------------------
# problem data

@dataclass
class DeviceSpec:
    """One controllable device: admissible interval and actuation rate."""

    lo: float
    hi: float
    update_every: int = 1


@dataclass
class UserSpec:
    """One user with a hidden quadratic discomfort a (x - p)^2 + c.

    Feedback arrives every feedback_period_s seconds, offset by
    feedback_phase_s so users do not all report at once, corrupted by
    zero-mean Gaussian noise.
    """

    device: int
    quad_a: float
    preferred: float
    quad_c: float = 0.0
    feedback_period_s: float = 1800.0
    feedback_phase_s: float = 0.0
    feedback_noise_std: float = 1.5


def true_cost(user, x):
    """Hidden discomfort of the user at setpoint x."""
    d = x - user.preferred
    return user.quad_a * d * d + user.quad_c


def true_gradient(user, x):
    """Exact derivative of the hidden discomfort."""
    return 2.0 * user.quad_a * (x - user.preferred)


def feedback_event(user, t_s, x_current, seed_key, step_s):
    """Feedback emitted by the user at time t_s, if due.

    Returns (x, z) with z = U(x) + noise when the step lands on the
    user's reporting schedule, else None.  The noise draw is keyed by
    (seed_key, step time) so replays are exact.
    """
    rem = math.fmod(t_s - user.feedback_phase_s, user.feedback_period_s)
    if rem < 0:
        rem += user.feedback_period_s
    due = rem < step_s or user.feedback_period_s - rem < 1e-9
    if not due or t_s + 1e-9 < user.feedback_phase_s:
        return None
    z = true_cost(user, x_current)
    if user.feedback_noise_std > 0:
        rng = seeds.substream(seed_key, int(round(t_s * 1000)))
        z += float(rng.normal(0.0, user.feedback_noise_std))
    return float(x_current), float(z)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class GpSettings:
    sigma_f: float = 50.0
    ell: float = 10.0
    sigma_n: float = 1.5
    mu0: float = 0.0
    gamma_u: float = 0.1
    l_u: float = 4.0
    q: int = 8
    n_samples: int = 500
    burn_in: int = 100
    delta: float = None


@dataclass
class LoadSpec:
    """Uncontrollable aggregate load: a CSV trace or a synthetic profile."""

    csv_path: str = None
    base: float = 25.0
    amplitudes: tuple = (1.5, 0.8)
    periods_s: tuple = (14400.0, 3600.0)
    noise_std: float = 0.1
    granularity_s: float = 1.0


@dataclass
class ReferenceSpec:
    """Output setpoint: a CSV trace or piecewise-constant equal segments."""

    csv_path: str = None
    levels: tuple = (50.5, 52.5, 49.0, 51.0)


@dataclass
class ScenarioConfig:
    devices: list = field(default_factory=lambda: [
        DeviceSpec(-8.0, 8.0, 1),       # battery, kW
        DeviceSpec(0.0, 10.0, 6),       # HVAC, slow actuation
        DeviceSpec(2.0, 30.0, 1),       # EV charger
    ])
    users: list = field(default_factory=lambda: [
        UserSpec(device=0, quad_a=0.5, preferred=-3.0, quad_c=0.0,
                 feedback_phase_s=0.0),
        UserSpec(device=0, quad_a=0.5, preferred=4.0, quad_c=0.5,
                 feedback_phase_s=300.0),
        UserSpec(device=1, quad_a=0.5, preferred=2.0, quad_c=0.0,
                 feedback_phase_s=600.0),
        UserSpec(device=1, quad_a=0.5, preferred=5.5, quad_c=1.0,
                 feedback_phase_s=900.0),
        UserSpec(device=1, quad_a=0.5, preferred=8.0, quad_c=0.0,
                 feedback_phase_s=1200.0),
        UserSpec(device=2, quad_a=0.5, preferred=20.0, quad_c=2.0,
                 feedback_phase_s=1500.0),
    ])
    horizon_s: float = 43200.0
    step_s: float = 5.0
    alpha: float = 0.05
    beta: float = 1.0
    zeta_frac: float = 0.05
    zeta_floor: float = 1e-3
    meas_noise_std: float = 0.0
    nu_cap: float = 100.0
    lambda_radius: float = None
    seed: int = 0
    gp: GpSettings = field(default_factory=GpSettings)
    load: LoadSpec = field(default_factory=LoadSpec)
    reference: ReferenceSpec = field(default_factory=ReferenceSpec)
    prior_feedback_points: int = 3


def default_config():
    """The built-in 12-hour coordination scenario."""
    return ScenarioConfig()


def _need(cond, path, msg):
    if not cond:
        raise ConfigError(path, msg)


def validate_config(cfg):
    """Raise ConfigError (with a field path) on the first invalid entry."""
    _need(len(cfg.devices) >= 1, "devices", "need at least one device")
    for m, d in enumerate(cfg.devices):
        _need(d.lo < d.hi, f"devices[{m}]", f"need lo < hi, got [{d.lo}, {d.hi}]")
        _need(int(d.update_every) >= 1, f"devices[{m}].update_every",
              "must be >= 1")
    _need(len(cfg.users) >= 1, "users", "need at least one user")
    seen = set()
    for j, u in enumerate(cfg.users):
        _need(0 <= u.device < len(cfg.devices), f"users[{j}].device",
              f"device index {u.device} out of range")
        _need(u.quad_a > 0, f"users[{j}].quad_a", "must be positive")
        _need(u.feedback_period_s > 0, f"users[{j}].feedback_period_s",
              "must be positive")
        _need(u.feedback_phase_s >= 0, f"users[{j}].feedback_phase_s",
              "must be nonnegative")
        _need(u.feedback_noise_std >= 0, f"users[{j}].feedback_noise_std",
              "must be nonnegative")
        seen.add(u.device)
    for m in range(len(cfg.devices)):
        _need(m in seen, f"devices[{m}]", "has no users")
    _need(cfg.step_s > 0, "scenario.step_s", "must be positive")
    _need(cfg.horizon_s >= cfg.step_s, "scenario.horizon_s",
          "must cover at least one step")
    _need(cfg.alpha > 0, "scenario.alpha", "must be positive")
    _need(cfg.beta > 0, "scenario.beta", "must be positive")
    _need(cfg.zeta_frac > 0, "scenario.zeta_frac", "must be positive")
    _need(cfg.zeta_floor > 0, "scenario.zeta_floor", "must be positive")
    _need(cfg.meas_noise_std >= 0, "scenario.meas_noise_std",
          "must be nonnegative")
    _need(cfg.nu_cap > 0, "scenario.nu_cap", "must be positive")
    if cfg.lambda_radius is not None:
        _need(cfg.lambda_radius > 0, "scenario.lambda_radius",
              "must be positive")
    g = cfg.gp
    _need(g.sigma_f > 0, "gp.sigma_f", "must be positive")
    _need(g.ell > 0, "gp.ell", "must be positive")
    _need(g.sigma_n >= 0, "gp.sigma_n", "must be nonnegative")
    _need(0 < g.gamma_u <= g.l_u, "gp.gamma_u",
          f"need 0 < gamma_u <= l_u, got [{g.gamma_u}, {g.l_u}]")
    _need(int(g.q) >= 1, "gp.q", "must be >= 1")
    _need(int(g.n_samples) >= 1, "gp.n_samples", "must be >= 1")
    _need(int(g.burn_in) >= 0, "gp.burn_in", "must be >= 0")
    _need(cfg.prior_feedback_points >= 0, "scenario.prior_feedback_points",
          "must be nonnegative")
    if cfg.load.csv_path is None:
        _need(cfg.load.granularity_s > 0, "load.granularity_s",
              "must be positive")
        _need(cfg.load.noise_std >= 0, "load.noise_std", "must be nonnegative")
        _need(len(cfg.load.amplitudes) == len(cfg.load.periods_s),
              "load.amplitudes", "must pair with periods_s")
    if cfg.reference.csv_path is None:
        _need(len(cfg.reference.levels) >= 1, "reference.levels",
              "need at least one level")
    return cfg


# ---------------------------------------------------------------------------
# scenario bundle

@dataclass
class Scenario:
    """Fully instantiated problem, ready for the runner."""

    config: ScenarioConfig
    seed: int
    topology: Topology
    plant: Plant
    constraint: TrackingConstraint
    sets: ProjectionSets
    users_by_device: list          # users_by_device[m] = list of global user idx
    models: list                   # one GpModel per global user index
    n_steps: int
    step_s: float
    update_every: np.ndarray

    @property
    def n_devices(self):
        return self.topology.n_devices

    @property
    def n_users(self):
        return self.topology.n_users

    def intervals(self):
        return [(d.lo, d.hi) for d in self.config.devices]

    def device_of_user(self, j):
        return self.config.users[j].device


def lipschitz_f(users, intervals):
    """Bound on the stacked cost-gradient norm over the feasible box."""
    total = 0.0
    for u in users:
        lo, hi = intervals[u.device]
        g = 2.0 * u.quad_a * max(abs(lo - u.preferred), abs(hi - u.preferred))
        total += g * g
    return math.sqrt(total)


def default_lambda_radius(cfg):
    """Consensus-multiplier ball radius from the network constants.

    Star subnetworks have diameter at most 2; the radius scales with the
    largest user group, the cost Lipschitz constant and the device count,
    plus margin.
    """
    counts = [sum(1 for u in cfg.users if u.device == m)
              for m in range(len(cfg.devices))]
    n_max = max(counts)
    h_max = 2.0
    el = lipschitz_f(cfg.users, [(d.lo, d.hi) for d in cfg.devices])
    return n_max * h_max * el * len(cfg.devices) + 1.0


def build_scenario(cfg, seed=None, plain_gp=False):
    """Instantiate a validated config into a runnable Scenario.

    seed overrides cfg.seed when given.  plain_gp builds surrogates
    without the curvature constraint (ablation mode); the hidden costs
    and everything else are unchanged.
    """
    validate_config(cfg)
    if seed is None:
        seed = cfg.seed
    seed = int(seed)

    counts = [sum(1 for u in cfg.users if u.device == m)
              for m in range(len(cfg.devices))]
    topology = build_incidence(counts)

    n_steps = int(math.floor(cfg.horizon_s / cfg.step_s))
    t_grid = np.arange(n_steps) * cfg.step_s

    # exogenous load resampled onto the control grid by zero-order hold
    if cfg.load.csv_path is not None:
        ts, vals = load_trace_csv(cfg.load.csv_path)
    else:
        ts, vals = synthetic_load(cfg.horizon_s, seed,
                                  granularity_s=cfg.load.granularity_s,
                                  base=cfg.load.base,
                                  amplitudes=cfg.load.amplitudes,
                                  periods_s=cfg.load.periods_s,
                                  noise_std=cfg.load.noise_std)
    w = zero_order_hold(ts, vals, t_grid)

    if cfg.reference.csv_path is not None:
        rts, rvals = reference_csv(cfg.reference.csv_path)
        y_ref = zero_order_hold(rts, rvals, t_grid)
    else:
        levels = np.asarray(cfg.reference.levels, dtype=float)
        seg = np.minimum((t_grid / (cfg.horizon_s / len(levels))).astype(int),
                         len(levels) - 1)
        y_ref = levels[seg]

    zeta = np.maximum(cfg.zeta_frac * np.abs(y_ref), cfg.zeta_floor)
    constraint = TrackingConstraint(beta=cfg.beta, y_ref=y_ref, zeta=zeta)

    m_dev = len(cfg.devices)
    plant = Plant(a=np.ones((1, m_dev)), b=np.ones((1, 1)),
                  exogenous=w.reshape(-1, 1),
                  meas_noise_std=cfg.meas_noise_std)

    lam_r = cfg.lambda_radius
    if lam_r is None:
        lam_r = default_lambda_radius(cfg)
    sets = ProjectionSets(intervals=[(d.lo, d.hi) for d in cfg.devices],
                          nu_cap=cfg.nu_cap, lambda_radius=lam_r)

    users_by_device = [[] for _ in range(m_dev)]
    for j, u in enumerate(cfg.users):
        users_by_device[u.device].append(j)

    g = cfg.gp
    models = []
    for j, u in enumerate(cfg.users):
        d = cfg.devices[u.device]
        params = KernelParams(sigma_f=g.sigma_f, ell=g.ell, sigma_n=g.sigma_n,
                              mu0=g.mu0)
        bounds = ShapeBounds(gamma_u=g.gamma_u, l_u=g.l_u)
        model = make_model(params, bounds, (d.lo, d.hi), q=int(g.q),
                           shape_constrained=not plain_gp,
                           n_samples=int(g.n_samples),
                           burn_in=int(g.burn_in), delta=g.delta)
        rng = seeds.substream(seed, seeds.PRIOR_DATA, j)
        for _ in range(int(cfg.prior_feedback_points)):
            x = float(rng.uniform(d.lo, d.hi))
            z = true_cost(u, x)
            if u.feedback_noise_std > 0:
                z += float(rng.normal(0.0, u.feedback_noise_std))
            model.data.add(x, z)
        models.append(model)

    return Scenario(config=cfg, seed=seed, topology=topology, plant=plant,
                    constraint=constraint, sets=sets,
                    users_by_device=users_by_device, models=models,
                    n_steps=n_steps, step_s=cfg.step_s,
                    update_every=np.array([int(d.update_every)
                                           for d in cfg.devices]))


# ---------------------------------------------------------------------------
# TOML parsing

def _get(d, key, path, cast=None, default=_need):
    if key not in d:
        if default is _need:
            raise ConfigError(f"{path}.{key}", "missing required key")
        return default
    v = d[key]
    if cast is not None:
        try:
            return cast(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}.{key}", f"cannot parse {v!r}") from None
    return v


def config_from_dict(raw, base_dir="."):
    """Build a ScenarioConfig from parsed TOML, filling defaults.

    Unknown keys are rejected so typos fail loudly.  CSV paths are
    resolved relative to base_dir (the config file location).
    """
    base = Path(base_dir)
    cfg = default_config()
    known_top = {"scenario", "devices", "users", "gp", "load", "reference"}
    for k in raw:
        if k not in known_top:
            raise ConfigError(k, "unknown section")

    sc = raw.get("scenario", {})
    known = {"horizon_s", "step_s", "alpha", "beta", "zeta_frac", "zeta_floor",
             "meas_noise_std", "nu_cap", "lambda_radius", "seed",
             "prior_feedback_points"}
    for k in sc:
        if k not in known:
            raise ConfigError(f"scenario.{k}", "unknown key")
    for k in known:
        if k in sc:
            cast = int if k in ("seed", "prior_feedback_points") else float
            setattr(cfg, k, _get(sc, k, "scenario", cast))

    if "devices" in raw:
        devs = []
        for m, d in enumerate(raw["devices"]):
            for k in d:
                if k not in {"lo", "hi", "update_every"}:
                    raise ConfigError(f"devices[{m}].{k}", "unknown key")
            devs.append(DeviceSpec(lo=_get(d, "lo", f"devices[{m}]", float),
                                   hi=_get(d, "hi", f"devices[{m}]", float),
                                   update_every=_get(d, "update_every",
                                                     f"devices[{m}]", int, 1)))
        cfg.devices = devs

    if "users" in raw:
        usrs = []
        fields = {"device": int, "quad_a": float, "preferred": float,
                  "quad_c": float, "feedback_period_s": float,
                  "feedback_phase_s": float, "feedback_noise_std": float}
        defaults = {"quad_c": 0.0, "feedback_period_s": 1800.0,
                    "feedback_phase_s": 0.0, "feedback_noise_std": 1.5}
        for j, u in enumerate(raw["users"]):
            for k in u:
                if k not in fields:
                    raise ConfigError(f"users[{j}].{k}", "unknown key")
            kw = {}
            for k, cast in fields.items():
                kw[k] = _get(u, k, f"users[{j}]", cast,
                             defaults.get(k, _need))
            usrs.append(UserSpec(**kw))
        cfg.users = usrs

    if "gp" in raw:
        g = raw["gp"]
        known = {"sigma_f", "ell", "sigma_n", "mu0", "gamma_u", "l_u", "q",
                 "n_samples", "burn_in", "delta"}
        for k in g:
            if k not in known:
                raise ConfigError(f"gp.{k}", "unknown key")
        for k in known:
            if k in g:
                cast = int if k in ("q", "n_samples", "burn_in") else float
                setattr(cfg.gp, k, _get(g, k, "gp", cast))

    if "load" in raw:
        ld = raw["load"]
        known = {"csv", "base", "amplitudes", "periods_s", "noise_std",
                 "granularity_s"}
        for k in ld:
            if k not in known:
                raise ConfigError(f"load.{k}", "unknown key")
        if "csv" in ld:
            cfg.load.csv_path = str(base / ld["csv"])
        for k in ("base", "noise_std", "granularity_s"):
            if k in ld:
                setattr(cfg.load, k, _get(ld, k, "load", float))
        if "amplitudes" in ld:
            cfg.load.amplitudes = tuple(float(v) for v in ld["amplitudes"])
        if "periods_s" in ld:
            cfg.load.periods_s = tuple(float(v) for v in ld["periods_s"])

    if "reference" in raw:
        rf = raw["reference"]
        for k in rf:
            if k not in {"csv", "levels"}:
                raise ConfigError(f"reference.{k}", "unknown key")
        if "csv" in rf:
            cfg.reference.csv_path = str(base / rf["csv"])
        if "levels" in rf:
            cfg.reference.levels = tuple(float(v) for v in rf["levels"])

    return validate_config(cfg)


def load_config(path):
    """Parse a TOML config file into a validated ScenarioConfig."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"TOML parse error: {exc}") from None
    return config_from_dict(raw, base_dir=path.parent)
