import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from inertial_dr import adapter
from inertial_dr.adapter import WeightsParseError, WeightsShapeError, WeightsVersionError


def randomized(seed: int, scale: float = 0.3) -> adapter.AdapterWeights:
    rng = np.random.default_rng(seed)
    w = adapter.init_weights(seed)
    w = w.with_vector(rng.normal(0, scale, adapter.param_count(w)))
    return adapter.AdapterWeights(w.conv1, w.conv2, w.fc_weight, w.fc_bias,
                                  rng.normal(0, 1, 6), rng.uniform(0.5, 2.0, 6))


def naive_forward_z(w, window):
    """Direct transcription of the window semantics with explicit loops."""
    x = np.asarray(window, dtype=float)[:, -adapter.WINDOW:]
    x = (x - w.norm_mean[:, None]) / w.norm_std[:, None]
    L = x.shape[1]

    def inp(k):  # k samples before the newest; zero outside the window
        return x[:, L - 1 - k] if k < L else np.zeros(6)

    def h1(k):
        out = w.conv1.bias.copy()
        for tap in range(adapter.KERNEL):
            out += w.conv1.kernel[:, :, tap] @ inp(k + (adapter.KERNEL - 1 - tap))
        return np.maximum(out, 0.0)

    out = w.conv2.bias.copy()
    for tap in range(adapter.KERNEL):
        out += w.conv2.kernel[:, :, tap] @ h1(3 * (adapter.KERNEL - 1 - tap))
    return w.fc_weight @ np.maximum(out, 0.0) + w.fc_bias


def test_param_count():
    w = adapter.init_weights(0)
    assert adapter.param_count(w) == 6 * 5 * 32 + 32 + 32 * 5 * 32 + 32 + 32 * 2 + 2 == 6210
    assert adapter.param_count(w.conv1) == 992
    assert adapter.param_count(w.conv2) == 5152


@pytest.mark.parametrize("seed", [0, 1, 17, 2**31])
def test_untrained_adapter_gives_static_covariance(seed, rng):
    w = adapter.init_weights(seed)
    np.testing.assert_array_equal(w.fc_weight, 0.0)
    np.testing.assert_array_equal(w.fc_bias, 0.0)
    N = adapter.forward(w, rng.normal(size=(6, 15)))
    assert (N.lat, N.up) == (1.0, 9.0)


def test_init_bounds():
    w = adapter.init_weights(5)
    assert np.abs(w.conv1.kernel).max() <= 1 / np.sqrt(30)
    assert np.abs(w.conv2.kernel).max() <= 1 / np.sqrt(160)
    assert np.abs(w.conv1.kernel).max() > 0.5 / np.sqrt(30)
    assert not np.array_equal(adapter.init_weights(5).conv1.kernel, adapter.init_weights(6).conv1.kernel)
    np.testing.assert_array_equal(adapter.init_weights(5).conv2.kernel, w.conv2.kernel)


def test_receptive_field_constants():
    assert adapter.RECEPTIVE_FIELD == 17
    assert adapter.WINDOW == 15


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("length", [1, 7, 15, 30])
def test_forward_matches_naive_loops(seed, length):
    w = randomized(seed)
    window = np.random.default_rng(seed + 100).normal(size=(6, length))
    np.testing.assert_allclose(adapter.forward_z(w, window), naive_forward_z(w, window), atol=1e-12)


def test_only_last_window_matters():
    w = randomized(1)
    rng = np.random.default_rng(3)
    a = rng.normal(size=(6, 40))
    b = a.copy()
    b[:, :25] = rng.normal(size=(6, 25))  # older than the window
    np.testing.assert_array_equal(adapter.forward_z(w, a), adapter.forward_z(w, b))
    b[:, 25] += 1.0  # oldest sample inside the window
    assert not np.array_equal(adapter.forward_z(w, a), adapter.forward_z(w, b))


@pytest.mark.parametrize("seed", range(4))
def test_sequence_matches_per_window(seed):
    w = randomized(seed)
    rng = np.random.default_rng(seed)
    omega, accel = rng.normal(size=(60, 3)), rng.normal(size=(60, 3))
    mask = adapter.dropout_mask(rng, 0.5) if seed % 2 else None
    Z = adapter.z_sequence(w, omega, accel, mask)
    for n in range(60):
        win = np.concatenate([omega[: n + 1], accel[: n + 1]], axis=1).T
        np.testing.assert_allclose(Z[n], adapter.forward_z(w, win, mask), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, (6, 15), elements=st.floats(-1e6, 1e6)),
    st.integers(0, 2**16),
    st.floats(0.01, 10.0),
    st.floats(0.01, 10.0),
)
def test_output_bounded(window, seed, s_lat, s_up):
    w = randomized(seed, scale=5.0)
    N = adapter.forward(w, window, beta=3.0, sigma_lat=s_lat, sigma_up=s_up)
    assert s_lat**2 * 1e-3 * (1 - 1e-12) <= N.lat <= s_lat**2 * 1e3 * (1 + 1e-12)
    assert s_up**2 * 1e-3 * (1 - 1e-12) <= N.up <= s_up**2 * 1e3 * (1 + 1e-12)


def test_covariance_from_z_extremes():
    np.testing.assert_allclose(adapter.covariance_from_z([50.0, -50.0], 3.0, 1.0, 3.0), [1e3, 9e-3])
    np.testing.assert_array_equal(adapter.covariance_from_z([0.0, 0.0], 3.0, 1.0, 3.0), [1.0, 9.0])


def test_dropout_mask_statistics():
    rng = np.random.default_rng(0)
    masks = np.array([adapter.dropout_mask(rng, 0.5) for _ in range(2000)])
    assert masks.shape[1] == 64
    assert set(np.unique(masks)) == {0.0, 2.0}
    assert masks.mean() == pytest.approx(1.0, abs=0.02)


def test_dropout_mask_shape_checked():
    with pytest.raises(ValueError):
        adapter.forward_z(randomized(0), np.zeros((6, 15)), dropout=np.ones(32))


def test_bad_window_shape():
    with pytest.raises(ValueError):
        adapter.forward(adapter.init_weights(0), np.zeros((3, 15)))


def test_normalization_stats():
    rng = np.random.default_rng(0)
    blocks = [rng.normal(5, 2, (1000, 6)), rng.normal(5, 2, (500, 6))]
    mean, std = adapter.normalization_stats(blocks)
    np.testing.assert_allclose(mean, np.concatenate(blocks).mean(0))
    mean, std = adapter.normalization_stats([np.ones((10, 6))])
    np.testing.assert_array_equal(std, 1.0)


# ------------------------------------------------------------------ weight files


def test_weights_round_trip_exact(tmp_path):
    w = randomized(4)
    path = adapter.save_weights(w, tmp_path / "w.txt")
    w2 = adapter.load_weights(path)
    np.testing.assert_array_equal(w2.to_vector(), w.to_vector())
    np.testing.assert_array_equal(w2.norm_mean, w.norm_mean)
    np.testing.assert_array_equal(w2.norm_std, w.norm_std)
    assert adapter.format_weights(w2) == adapter.format_weights(w)


def test_extra_sections_round_trip():
    w = randomized(2)
    _, extra = adapter.parse_weights(adapter.format_weights(w, {"sigma.log": np.arange(12.0)}))
    np.testing.assert_array_equal(extra["sigma.log"], np.arange(12.0))


def test_truncated_file_is_a_parse_error():
    text = adapter.format_weights(randomized(0))
    lines = text.splitlines()
    with pytest.raises(WeightsParseError):
        adapter.parse_weights("\n".join(lines[: len(lines) // 2]))
    with pytest.raises(WeightsParseError):
        adapter.parse_weights("\n".join(lines[:-1]))  # missing end marker


def test_garbage_is_a_parse_error():
    with pytest.raises(WeightsParseError):
        adapter.parse_weights("hello world\n")
    text = adapter.format_weights(randomized(0)).replace("e-01", "e-0x", 1)
    with pytest.raises(WeightsParseError):
        adapter.parse_weights(text)


def test_wrong_dilation_is_a_shape_error():
    text = adapter.format_weights(randomized(0)).replace("kernel=5 dilation=3", "kernel=5 dilation=2")
    with pytest.raises(WeightsShapeError):
        adapter.parse_weights(text)


def test_wrong_tensor_shape_is_a_shape_error():
    text = adapter.format_weights(randomized(0))
    head, _, rest = text.partition("[fc.bias] 2\n")
    value_line, _, tail = rest.partition("\n")
    bad = head + "[fc.bias] 3\n" + value_line + " 0.0\n" + tail
    with pytest.raises(WeightsShapeError):
        adapter.parse_weights(bad)


def test_version_mismatch():
    text = adapter.format_weights(randomized(0)).replace("version 1", "version 2")
    with pytest.raises(WeightsVersionError):
        adapter.parse_weights(text)


def test_error_classes_are_distinct():
    classes = {WeightsParseError, WeightsShapeError, WeightsVersionError}
    for a in classes:
        for b in classes - {a}:
            assert not issubclass(a, b)


def test_with_vector_rejects_wrong_size():
    with pytest.raises(WeightsShapeError):
        adapter.init_weights(0).with_vector(np.zeros(10))
