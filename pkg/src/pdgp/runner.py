"""Run loop: measurement, gradient estimation, primal-dual update.

One run executes the online algorithm for a scenario in one of three
modes:

* ``gp``          gradients from shape-constrained GP surrogates,
* ``gp_plain``    gradients from unconstrained GP surrogates,
* ``clairvoyant`` exact gradients of the hidden costs (benchmark).

The reference optimizer is solved every ``oracle_cadence`` steps and
attached to the step records for regret and path-length computation.
Outputs (step CSV, JSON summary, surrogate snapshots) are deterministic
functions of (config, mode, seed).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeds
from .gp import estimate_gradient, fit_surrogate, snapshot
from .metrics import (StepRecord, acv_and_fit, bound_curves,
                      compute_bound_constants, gradient_error_metrics,
                      path_lengths, regret_global, write_steps_csv,
                      write_summary)
from .network import (constraint_gradient, constraint_value, measure_output,
                      model_output)
from .scenario import (Scenario, ScenarioConfig, build_scenario,
                       default_config, feedback_event, true_gradient)
from .solver import (NoConvergence, StepInputs, freeze_instance,
                     initial_state, pd_step, solve_instance_oracle)

logger = logging.getLogger(__name__)

MODES = ("gp", "gp_plain", "clairvoyant")


@dataclass
class RunSpec:
    """What to run and where to put the results."""

    config: ScenarioConfig = None
    mode: str = "gp"
    seed: int = None
    steps: int = None
    output_dir: str = None
    oracle_cadence: int = 1
    write_outputs: bool = True


@dataclass
class RunResult:
    records: list
    scenario: Scenario
    summary: dict
    paths: dict = field(default_factory=dict)


def start_state(scn):
    """Initial iterate for a run of the given scenario.

    User copies start at each user's own (clipped) preferred setpoint,
    the pre-coordination state; devices stay at interval midpoints.
    """
    state = initial_state(scn.topology, scn.intervals(), scn.config.alpha)
    for m in range(scn.n_devices):
        lo, hi = scn.intervals()[m]
        for n, j in enumerate(scn.users_by_device[m]):
            pref = scn.config.users[j].preferred
            state.x_user[m][n] = min(max(pref, lo), hi)
    return state


def _step_gradients(scn, state, mode):
    """Per-device lists of the gradients fed to the user updates."""
    est, true = [], []
    for m in range(scn.n_devices):
        ge = np.empty(scn.topology.device_users[m])
        gt = np.empty(scn.topology.device_users[m])
        for n, j in enumerate(scn.users_by_device[m]):
            x = state.x_user[m][n]
            gt[n] = true_gradient(scn.config.users[j], x)
            if mode == "clairvoyant":
                ge[n] = gt[n]
            else:
                ge[n] = estimate_gradient(scn.models[j], x)
        est.append(ge)
        true.append(gt)
    return est, true


def _oracle_solve(scn, t):
    """Freeze the step-t instance and solve it; never raises.

    Returns (x_star_dev, nu_star, failed_flag).
    """
    quads = [[(scn.config.users[j].quad_a, scn.config.users[j].preferred)
              for j in scn.users_by_device[m]] for m in range(scn.n_devices)]
    a_row = np.atleast_2d(scn.plant.a_at(t))[0]
    b_off = float(np.atleast_2d(scn.plant.b_at(t))[0] @ scn.plant.exogenous[t])
    inst = freeze_instance(quads, a_row, b_off, scn.config.beta,
                           scn.constraint.y_ref[t], scn.constraint.zeta[t],
                           scn.intervals(), nu_cap=scn.sets.nu_cap)
    try:
        x_star, nu_star, _ = solve_instance_oracle(inst)
        return x_star, nu_star, False
    except NoConvergence as exc:
        logger.warning("oracle did not certify at step %d (residual %.3g); "
                       "using last iterate", t, exc.residual)
        return exc.x_star, exc.nu, True


def run(spec):
    """Execute a run and return its records and summary."""
    if spec.mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {spec.mode!r}")
    if spec.oracle_cadence < 1:
        raise ValueError("oracle_cadence must be >= 1")
    cfg = spec.config if spec.config is not None else default_config()
    scn = build_scenario(cfg, seed=spec.seed, plain_gp=(spec.mode == "gp_plain"))
    seed = scn.seed
    n_steps = scn.n_steps if spec.steps is None else int(spec.steps)
    if n_steps < 1:
        raise ValueError("need at least one step")

    learned = spec.mode in ("gp", "gp_plain")
    fit_counts = [0] * scn.n_users
    if learned:
        for j, model in enumerate(scn.models):
            fit_surrogate(model, [seed, seeds.GIBBS, j, fit_counts[j]])
            fit_counts[j] += 1

    state = start_state(scn)
    records = []
    oracle_failures = 0

    for t in range(n_steps):
        t_s = t * scn.step_s
        y_hat = measure_output(scn.plant, t, state.x_dev, seed)
        y_model = model_output(scn.plant, t, state.x_dev)
        c_val = constraint_value(scn.constraint, t, y_hat)
        c_grad = constraint_gradient(scn.constraint, t, y_hat)
        c_model = constraint_value(scn.constraint, t, y_model)

        g_est, g_true = _step_gradients(scn, state, spec.mode)
        mask = (t % scn.update_every) == 0

        x_star = x_star_dev = nu_star = None
        if t % spec.oracle_cadence == 0:
            x_star_dev, nu_star, failed = _oracle_solve(scn, t)
            oracle_failures += int(failed)
            x_star = scn.topology.expand_devices(x_star_dev)

        records.append(StepRecord(
            t=t, x_dev=state.x_dev.copy(),
            x_user=[u.copy() for u in state.x_user],
            nu=state.nu, lam=[l.copy() for l in state.lam],
            y_hat=float(y_hat[0]), c_val=c_val,
            y_model=float(y_model[0]), c_model=c_model,
            y_ref=float(scn.constraint.y_ref[t]),
            g_est=np.concatenate(g_est), g_true=np.concatenate(g_true),
            x_star=x_star, x_star_dev=x_star_dev, nu_star=nu_star))

        inputs = StepInputs(t=t, c_val=c_val, c_grad=c_grad,
                            a_cols=np.atleast_2d(scn.plant.a_at(t)),
                            gradients=g_est, device_mask=mask)
        state = pd_step(state, inputs, scn.sets, scn.topology)

        # user feedback reflects the setpoint held during this step
        for m in range(scn.n_devices):
            for n, j in enumerate(scn.users_by_device[m]):
                user = scn.config.users[j]
                ev = feedback_event(user, t_s, records[-1].x_user[m][n],
                                    (seed, seeds.FEEDBACK, j), scn.step_s)
                if ev is not None:
                    scn.models[j].data.add(*ev)
                    if learned:
                        fit_surrogate(scn.models[j],
                                      [seed, seeds.GIBBS, j, fit_counts[j]])
                        fit_counts[j] += 1

    summary = _summarize(spec, scn, records, oracle_failures)
    paths = {}
    if spec.write_outputs and spec.output_dir is not None:
        paths = _write_outputs(spec, scn, records, summary)
    return RunResult(records=records, scenario=scn, summary=summary,
                     paths=paths)


def _summarize(spec, scn, records, oracle_failures):
    users = scn.config.users
    xi, big_xi = gradient_error_metrics(records)
    acv, fit = acv_and_fit(records)
    n = len(records)
    warm = max(1, int(0.05 * n))
    post = records[warm:]
    feasible = sum(1 for r in post if r.c_model <= 0.0)
    cons = [max(float(np.max(np.abs(r.x_dev[m] - r.x_user[m])))
                for m in range(scn.n_devices)) for r in records]

    summary = {
        "mode": spec.mode,
        "seed": scn.seed,
        "steps": n,
        "alpha": scn.config.alpha,
        "oracle_cadence": spec.oracle_cadence,
        "oracle_failures": oracle_failures,
        "xi": xi,
        "Xi": big_xi,
        "acv": acv,
        "fit": fit,
        "tracking_fraction_post_warmup": feasible / max(1, len(post)),
        "final_consensus_residual": cons[-1],
        "max_consensus_residual": max(cons),
    }
    have_oracle = [r for r in records if r.x_star_dev is not None]
    if have_oracle:
        strict = len(have_oracle) == len(records)
        summary["regret"] = regret_global(records, users, scn.n_devices,
                                          strict=False)
        summary["regret_exact"] = strict
        phi, ups = path_lengths(records, strict=False)
        summary["phi"] = phi
        summary["upsilon"] = ups
        consts = compute_bound_constants(scn)
        reg_b, acv_b = bound_curves(records, consts, scn.config.alpha)
        summary["regret_bound"] = reg_b
        summary["acv_bound"] = acv_b
    return summary


def _write_outputs(spec, scn, records, summary):
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"steps": out / "steps.csv", "summary": out / "summary.json"}
    write_steps_csv(paths["steps"], records, scn.topology.device_users,
                    scn.config.users)
    write_summary(paths["summary"], summary)
    if spec.mode in ("gp", "gp_plain"):
        paths["snapshots"] = out / "gp_snapshots.json"
        snaps = [snapshot(m) for m in scn.models]
        with open(paths["snapshots"], "w") as fh:
            json.dump(snaps, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return {k: str(v) for k, v in paths.items()}
