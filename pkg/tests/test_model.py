import numpy as np
import pytest

from inertial_dr import model
from inertial_dr.geom import ExtendedPose, exp_so3
from inertial_dr.model import ConfigError, FilterConfig


def test_default_parameters_are_the_published_constants():
    b, q, n = model.default_parameters()
    assert (b.rot, b.vel, b.bias_gyro, b.bias_accel, b.rot_car, b.pos_car) == (1e-3, 0.3, 1e-4, 3e-2, 3e-3, 1e-1)
    assert (q.gyro, q.accel, q.bias_gyro, q.bias_accel, q.rot_car, q.pos_car) == (1.4e-2, 3e-2, 1e-4, 1e-3, 1e-4, 1e-4)
    np.testing.assert_array_equal(n.matrix(), np.diag([1.0, 9.0]))


def test_initial_covariance_structure():
    P0 = model.InitialBeliefs().covariance()
    assert P0.shape == (21, 21)
    d = np.diag(P0)
    for i in model.P0_ZERO_INDICES:
        assert d[i] == 0.0
    nonzero = [i for i in range(21) if i not in model.P0_ZERO_INDICES]
    assert np.all(d[nonzero] > 0)
    np.testing.assert_array_equal(P0, np.diag(d))
    assert d[0] == d[1] == 1e-6
    assert d[3] == d[4] == pytest.approx(0.09)


def test_process_noise_blocks():
    Q = model.ProcessNoise().matrix()
    assert Q.shape == (18, 18)
    np.testing.assert_allclose(np.diag(Q)[0:3], 1.4e-2**2)
    np.testing.assert_allclose(np.diag(Q)[3:6], 3e-2**2)
    np.testing.assert_allclose(np.diag(Q)[15:18], 1e-4**2)


@pytest.mark.parametrize("v0", [np.zeros(3), np.array([10.0, 0.0, 0.0])])
def test_initial_state(v0):
    R = exp_so3([0.1, -0.2, 0.3])
    x = model.initial_state(ExtendedPose(R, v0, np.array([1.0, 2.0, 3.0])))
    np.testing.assert_array_equal(x.pose.velocity, v0)
    np.testing.assert_array_equal(x.pose.rotation, R)
    np.testing.assert_array_equal(x.R_car, np.eye(3))
    np.testing.assert_array_equal(x.p_car, np.zeros(3))
    np.testing.assert_array_equal(x.bias_gyro, np.zeros(3))
    np.testing.assert_array_equal(x.bias_accel, np.zeros(3))


def test_state_array_round_trip():
    x = model.initial_state(ExtendedPose.identity())
    y = model.FilterState.from_arrays(*x.arrays())
    for a, b in zip(x.arrays(), y.arrays()):
        np.testing.assert_array_equal(a, b)


def test_config_defaults_and_static_noise():
    cfg = FilterConfig()
    np.testing.assert_array_equal(cfg.static_noise.matrix(), np.diag([1.0, 9.0]))
    np.testing.assert_array_equal(cfg.gravity_vector(), [0.0, 0.0, -9.80655])


def test_config_round_trip():
    cfg = model.apply_overrides(FilterConfig(), {"sigma_lat": 0.5, "sigma0_bias_gyro": 2e-3, "sigma_accel": 0.05,
                                                 "gravity": (0.0, 0.0, -9.81)})
    text = model.format_config(cfg)
    assert model.apply_overrides(FilterConfig(), model.parse_config(text)) == cfg


def test_parse_config_comments_and_blank_lines():
    vals = model.parse_config("# header\n\nbeta = 2.5  # trailing\nsigma_up=4\n")
    assert vals == {"beta": 2.5, "sigma_up": 4.0}


@pytest.mark.parametrize(
    "text, match",
    [
        ("bogus = 1", "unknown key"),
        ("beta 3", "expected 'key = value'"),
        ("beta = three", "bad value"),
        ("gravity = 0 0", "bad value"),
    ],
)
def test_parse_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        model.parse_config(text)


def test_load_config(tmp_path):
    p = tmp_path / "filter.cfg"
    p.write_text("sigma_lat = 0.3\nsigma0_rot = 0.002\n")
    cfg = model.load_config(p)
    assert cfg.sigma_lat == 0.3
    assert cfg.beliefs.rot == 0.002
    assert cfg.beliefs.vel == 0.3
