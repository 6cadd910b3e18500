"""Config validation, TOML parsing, feedback timing, scenario assembly."""

import math

import numpy as np
import pytest

from pdgp.scenario import (ConfigError, DeviceSpec, ScenarioConfig, UserSpec,
                           build_scenario, config_from_dict, default_config,
                           default_lambda_radius, feedback_event, lipschitz_f,
                           load_config, true_cost, true_gradient,
                           validate_config)


# ---------------------------------------------------------------------------
# hidden costs

def test_true_cost_and_gradient():
    u = UserSpec(device=0, quad_a=0.5, preferred=4.0, quad_c=0.5)
    assert true_cost(u, 6.0) == pytest.approx(0.5 * 4 + 0.5)
    assert true_gradient(u, 6.0) == pytest.approx(2.0)
    assert true_gradient(u, 4.0) == 0.0


# ---------------------------------------------------------------------------
# feedback schedule

def _user(period=1800.0, phase=0.0, noise=0.0):
    return UserSpec(device=0, quad_a=1.0, preferred=0.0,
                    feedback_period_s=period, feedback_phase_s=phase,
                    feedback_noise_std=noise)


def test_feedback_fires_on_schedule():
    u = _user(period=60.0, phase=0.0)
    fired = [t for t in np.arange(0, 300, 5.0)
             if feedback_event(u, t, 1.0, 7, 5.0) is not None]
    assert fired == [0.0, 60.0, 120.0, 180.0, 240.0]


def test_feedback_respects_phase():
    u = _user(period=60.0, phase=15.0)
    fired = [t for t in np.arange(0, 200, 5.0)
             if feedback_event(u, t, 1.0, 7, 5.0) is not None]
    assert fired == [15.0, 75.0, 135.0, 195.0]
    # nothing before the phase offset
    assert feedback_event(u, 0.0, 1.0, 7, 5.0) is None


def test_feedback_period_not_aligned_with_step():
    # period 7 s on a 5 s grid: fires at the first step after each multiple
    u = _user(period=7.0, phase=0.0)
    fired = [t for t in np.arange(0, 30, 5.0)
             if feedback_event(u, t, 1.0, 7, 5.0) is not None]
    assert fired == [0.0, 10.0, 15.0, 25.0]


def test_feedback_value_and_noise_determinism():
    u_clean = _user(noise=0.0)
    x = 3.0
    out = feedback_event(u_clean, 0.0, x, 11, 5.0)
    assert out == (3.0, true_cost(u_clean, x))

    u_noisy = _user(noise=1.0)
    a = feedback_event(u_noisy, 1800.0, x, 11, 5.0)
    b = feedback_event(u_noisy, 1800.0, x, 11, 5.0)
    c = feedback_event(u_noisy, 3600.0, x, 11, 5.0)
    assert a == b
    assert a[1] != c[1]
    assert a[1] != true_cost(u_noisy, x)


# ---------------------------------------------------------------------------
# validation

def _bad(cfg, path_fragment):
    with pytest.raises(ConfigError) as exc:
        validate_config(cfg)
    assert path_fragment in str(exc.value)


def test_validate_rejects_bad_fields():
    cfg = default_config()
    cfg.devices[1] = DeviceSpec(5.0, 5.0)
    _bad(cfg, "devices[1]")

    cfg = default_config()
    cfg.users[3] = UserSpec(device=9, quad_a=1.0, preferred=0.0)
    _bad(cfg, "users[3].device")

    cfg = default_config()
    cfg.users[2] = UserSpec(device=1, quad_a=-1.0, preferred=0.0)
    _bad(cfg, "users[2].quad_a")

    cfg = default_config()
    cfg.users = [u for u in cfg.users if u.device != 2]
    _bad(cfg, "devices[2]")          # device left without users

    cfg = default_config()
    cfg.alpha = 0.0
    _bad(cfg, "scenario.alpha")

    cfg = default_config()
    cfg.gp.gamma_u = 10.0            # exceeds l_u
    _bad(cfg, "gp.gamma_u")

    cfg = default_config()
    cfg.horizon_s = 1.0              # shorter than one step
    _bad(cfg, "scenario.horizon_s")


def test_default_config_is_valid():
    validate_config(default_config())


# ---------------------------------------------------------------------------
# scenario assembly

def test_build_scenario_shapes_and_defaults():
    scn = build_scenario(default_config(), seed=3)
    assert tuple(scn.topology.device_users) == (2, 3, 1)
    assert scn.n_users == 6 and scn.n_devices == 3
    assert scn.n_steps == int(43200 / 5)
    np.testing.assert_array_equal(scn.update_every, [1, 6, 1])
    assert scn.plant.exogenous.shape == (scn.n_steps, 1)
    assert len(scn.constraint.y_ref) == scn.n_steps
    assert len(scn.models) == 6
    for model in scn.models:
        assert len(model.data) == 3          # prior feedback points
        assert model.shape_constrained
    assert scn.sets.lambda_radius == default_lambda_radius(scn.config)


def test_build_scenario_plain_gp_flag():
    scn = build_scenario(default_config(), seed=3, plain_gp=True)
    assert all(not m.shape_constrained for m in scn.models)


def test_build_scenario_prior_points_deterministic():
    a = build_scenario(default_config(), seed=5)
    b = build_scenario(default_config(), seed=5)
    c = build_scenario(default_config(), seed=6)
    xa, za = a.models[0].data.as_arrays()
    xb, zb = b.models[0].data.as_arrays()
    xc, zc = c.models[0].data.as_arrays()
    np.testing.assert_array_equal(xa, xb)
    np.testing.assert_array_equal(za, zb)
    assert not np.array_equal(za, zc)


def test_zeta_floor_applies_at_zero_reference():
    cfg = default_config()
    cfg.reference.levels = (0.0,)
    cfg.zeta_floor = 0.25
    scn = build_scenario(cfg, seed=0)
    assert np.all(scn.constraint.zeta == 0.25)


def test_reference_segments_cover_horizon():
    cfg = default_config()
    cfg.reference.levels = (1.0, 2.0, 3.0, 4.0)
    scn = build_scenario(cfg, seed=0)
    y = scn.constraint.y_ref
    quarter = scn.n_steps // 4
    assert y[0] == 1.0
    assert y[quarter] == 2.0
    assert y[-1] == 4.0


def test_lipschitz_hand_value():
    users = [UserSpec(device=0, quad_a=0.5, preferred=-3.0)]
    assert lipschitz_f(users, [(-8.0, 8.0)]) == pytest.approx(11.0)
    two = users + [UserSpec(device=0, quad_a=1.0, preferred=0.0)]
    assert lipschitz_f(two, [(-8.0, 8.0)]) == pytest.approx(
        math.sqrt(11.0 ** 2 + 16.0 ** 2))


def test_default_lambda_radius_formula():
    cfg = ScenarioConfig(
        devices=[DeviceSpec(0.0, 2.0)],
        users=[UserSpec(device=0, quad_a=1.0, preferred=0.0)])
    # one device, one user: N_max=1, h=2, L = 2*1*2 = 4 -> 1*2*4*1 + 1
    assert default_lambda_radius(cfg) == pytest.approx(9.0)


# ---------------------------------------------------------------------------
# TOML parsing

def test_config_from_dict_defaults_and_overrides():
    cfg = config_from_dict({"scenario": {"alpha": 0.05, "seed": 9}})
    assert cfg.alpha == 0.05 and cfg.seed == 9
    assert len(cfg.devices) == 3     # defaults retained


def test_config_from_dict_rejects_unknowns():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"scnario": {}})
    assert "scnario" in str(exc.value)
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"scenario": {"alhpa": 1}})
    assert "scenario.alhpa" in str(exc.value)
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"devices": [{"lo": 0.0, "hi": 1.0, "max": 2}],
                          "users": [{"device": 0, "quad_a": 1.0,
                                     "preferred": 0.0}]})
    assert "devices[0].max" in str(exc.value)


def test_config_from_dict_missing_required():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"devices": [{"lo": 0.0}]})
    assert "devices[0].hi" in str(exc.value)
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"users": [{"device": 0, "preferred": 1.0}]})
    assert "users[0].quad_a" in str(exc.value)


def test_config_from_dict_bad_cast():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"scenario": {"alpha": "fast"}})
    assert "cannot parse" in str(exc.value)


def test_load_config_roundtrip(tmp_path):
    (tmp_path / "load.csv").write_text(
        "timestamp_s,load_kw\n0,20.0\n3600,22.0\n")
    (tmp_path / "ref.csv").write_text(
        "timestamp_s,y_ref_kw\n0,30.0\n1800,35.0\n")
    (tmp_path / "run.toml").write_text("""
[scenario]
horizon_s = 3600.0
step_s = 60.0
alpha = 0.02

[[devices]]
lo = -2.0
hi = 2.0

[[users]]
device = 0
quad_a = 1.0
preferred = 0.5

[load]
csv = "load.csv"

[reference]
csv = "ref.csv"
""")
    cfg = load_config(tmp_path / "run.toml")
    assert cfg.alpha == 0.02
    assert cfg.load.csv_path.endswith("load.csv")
    scn = build_scenario(cfg)
    assert scn.n_steps == 60
    # zero-order hold picks the csv values up
    assert scn.plant.exogenous[0, 0] == 20.0
    assert scn.constraint.y_ref[0] == 30.0
    assert scn.constraint.y_ref[-1] == 35.0


def test_load_config_parse_error(tmp_path):
    p = tmp_path / "broken.toml"
    p.write_text("[scenario\nalpha = 1")
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    assert "TOML parse error" in str(exc.value)
