"""Dilated 1-D CNN mapping raw IMU windows to the pseudo-measurement covariance.

Architecture: per-channel standardisation of ``[omega; accel]`` -> conv(6->32,
k=5, d=1) -> ReLU -> conv(32->32, k=5, d=3) -> ReLU -> last time step ->
affine(32->2) = ``z``; then ``N = diag(s_lat^2 10^(beta tanh z_lat),
s_up^2 10^(beta tanh z_up))``.

The network sees the last ``WINDOW`` samples only. Its receptive field is
``RECEPTIVE_FIELD`` samples, so the two oldest positions are always the zero
padding (in normalised space), as are positions before the sequence start.

Kernel tap ``k`` of a layer with dilation ``d`` multiplies the input
``d * (KERNEL - 1 - k)`` steps in the past; tap ``KERNEL - 1`` is the newest.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model import MeasurementNoise

KERNEL = 5
CHANNELS = 32
DILATIONS = (1, 3)
WINDOW = 15
RECEPTIVE_FIELD = 1 + (KERNEL - 1) * sum(DILATIONS)
FORMAT_NAME = "inertial_dr-adapter"
FORMAT_VERSION = 1


class WeightsError(Exception):
    """Base class for weight-file problems."""


class WeightsParseError(WeightsError):
    pass


class WeightsVersionError(WeightsError):
    pass


class WeightsShapeError(WeightsError):
    pass


@dataclass(frozen=True)
class ConvLayer:
    kernel: np.ndarray  # (out, in, KERNEL)
    bias: np.ndarray
    dilation: int

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=float)
        b = np.asarray(self.bias, dtype=float)
        if k.ndim != 3 or k.shape[2] != KERNEL:
            raise WeightsShapeError(f"conv kernel must be (out, in, {KERNEL}), got {k.shape}")
        if b.shape != (k.shape[0],):
            raise WeightsShapeError(f"conv bias must be ({k.shape[0]},), got {b.shape}")
        if int(self.dilation) < 1:
            raise WeightsShapeError(f"dilation must be positive, got {self.dilation}")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "bias", b)

    @property
    def n_params(self) -> int:
        return self.kernel.size + self.bias.size


@dataclass(frozen=True)
class AdapterWeights:
    conv1: ConvLayer
    conv2: ConvLayer
    fc_weight: np.ndarray  # (2, CHANNELS)
    fc_bias: np.ndarray  # (2,)
    norm_mean: np.ndarray  # (6,)
    norm_std: np.ndarray  # (6,)

    def __post_init__(self):
        for name in ("fc_weight", "fc_bias", "norm_mean", "norm_std"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        c1, c2 = self.conv1.kernel.shape, self.conv2.kernel.shape
        expect = {
            "conv1.kernel": (c1, (CHANNELS, 6, KERNEL)),
            "conv2.kernel": (c2, (CHANNELS, CHANNELS, KERNEL)),
            "fc.weight": (self.fc_weight.shape, (2, CHANNELS)),
            "fc.bias": (self.fc_bias.shape, (2,)),
            "norm.mean": (self.norm_mean.shape, (6,)),
            "norm.std": (self.norm_std.shape, (6,)),
        }
        for name, (got, want) in expect.items():
            if got != want:
                raise WeightsShapeError(f"{name}: expected shape {want}, got {got}")
        if (self.conv1.dilation, self.conv2.dilation) != DILATIONS:
            raise WeightsShapeError(
                f"dilations must be {DILATIONS}, got {(self.conv1.dilation, self.conv2.dilation)}"
            )
        if np.any(self.norm_std <= 0):
            raise WeightsShapeError("normalisation std must be positive")

    def trainable(self) -> dict:
        return {
            "conv1.kernel": self.conv1.kernel,
            "conv1.bias": self.conv1.bias,
            "conv2.kernel": self.conv2.kernel,
            "conv2.bias": self.conv2.bias,
            "fc.weight": self.fc_weight,
            "fc.bias": self.fc_bias,
        }

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.trainable().values()])

    def with_vector(self, vec) -> "AdapterWeights":
        vec = np.asarray(vec, dtype=float)
        n = param_count(self)
        if vec.shape != (n,):
            raise WeightsShapeError(f"expected {n} parameters, got shape {vec.shape}")
        parts, i = {}, 0
        for name, a in self.trainable().items():
            parts[name] = vec[i:i + a.size].reshape(a.shape)
            i += a.size
        return AdapterWeights(
            ConvLayer(parts["conv1.kernel"], parts["conv1.bias"], self.conv1.dilation),
            ConvLayer(parts["conv2.kernel"], parts["conv2.bias"], self.conv2.dilation),
            parts["fc.weight"], parts["fc.bias"], self.norm_mean, self.norm_std,
        )


def param_count(w) -> int:
    """Number of trainable scalars (normalisation statistics excluded)."""
    if isinstance(w, ConvLayer):
        return w.n_params
    return sum(a.size for a in w.trainable().values())


def init_weights(seed: int, norm_mean=None, norm_std=None) -> AdapterWeights:
    """Uniform(+-1/sqrt(fan_in)) convolutions and an all-zero output layer.

    With the zero output layer ``z == 0`` for every input, so an untrained
    adapter reproduces the static covariance exactly.
    """
    rng = np.random.default_rng(seed)

    def conv(cin, d):
        bound = 1.0 / np.sqrt(cin * KERNEL)
        return ConvLayer(
            rng.uniform(-bound, bound, (CHANNELS, cin, KERNEL)),
            rng.uniform(-bound, bound, CHANNELS),
            d,
        )

    return AdapterWeights(
        conv(6, DILATIONS[0]),
        conv(CHANNELS, DILATIONS[1]),
        np.zeros((2, CHANNELS)),
        np.zeros(2),
        np.zeros(6) if norm_mean is None else norm_mean,
        np.ones(6) if norm_std is None else norm_std,
    )


def normalization_stats(imu_blocks) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over a collection of ``(T, 6)`` arrays."""
    x = np.concatenate([np.asarray(b, dtype=float) for b in imu_blocks], axis=0)
    std = x.std(axis=0)
    return x.mean(axis=0), np.where(std > 1e-9, std, 1.0)


def covariance_from_z(z, beta: float, sigma_lat: float, sigma_up: float) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    scale = 10.0 ** (beta * np.tanh(z))
    return scale * np.array([sigma_lat**2, sigma_up**2])


def _check_dropout(dropout):
    if dropout is None:
        return np.ones(CHANNELS), np.ones(CHANNELS)
    dropout = np.asarray(dropout, dtype=float)
    if dropout.shape != (2 * CHANNELS,):
        raise ValueError(f"dropout mask must have shape ({2 * CHANNELS},), got {dropout.shape}")
    return dropout[:CHANNELS], dropout[CHANNELS:]


def forward_z(w: AdapterWeights, window, dropout=None) -> np.ndarray:
    """``z`` for one window of shape ``(6, L)`` (newest sample last)."""
    x = np.asarray(window, dtype=float)
    if x.ndim != 2 or x.shape[0] != 6:
        raise ValueError(f"window must have shape (6, L), got {x.shape}")
    m1, m2 = _check_dropout(dropout)
    x = x[:, -WINDOW:]
    x = (x - w.norm_mean[:, None]) / w.norm_std[:, None]
    x = np.concatenate([np.zeros((6, RECEPTIVE_FIELD - x.shape[1])), x], axis=1)
    h = _conv_valid(x, w.conv1)
    h = np.maximum(h, 0.0) * m1[:, None]
    h = _conv_valid(h, w.conv2)
    h = np.maximum(h[:, -1], 0.0) * m2
    return w.fc_weight @ h + w.fc_bias


def _conv_valid(x, layer: ConvLayer):
    d = layer.dilation
    span = d * (KERNEL - 1)
    T = x.shape[1] - span
    taps = np.stack([x[:, k * d:k * d + T] for k in range(KERNEL)], axis=-1)  # (in, T, K)
    return np.einsum("oik,itk->ot", layer.kernel, taps) + layer.bias[:, None]


def forward(w: AdapterWeights, window, beta: float = 3.0, sigma_lat: float = 1.0,
            sigma_up: float = 3.0, dropout=None) -> MeasurementNoise:
    """Measurement covariance for the window ending at the current sample."""
    lat, up = covariance_from_z(forward_z(w, window, dropout), beta, sigma_lat, sigma_up)
    return MeasurementNoise(float(lat), float(up))


def z_sequence(w: AdapterWeights, omega, accel, dropout=None) -> np.ndarray:
    """``z`` at every sample of a sequence, shape ``(T, 2)``.

    Identical to calling :func:`forward_z` on each trailing window, computed
    with whole-sequence convolutions.
    """
    m1, m2 = _check_dropout(dropout)
    x = np.concatenate([np.asarray(omega, dtype=float), np.asarray(accel, dtype=float)], axis=1)
    x = (x - w.norm_mean) / w.norm_std
    T = x.shape[0]
    pad = RECEPTIVE_FIELD - 1
    xp = np.concatenate([np.zeros((pad, 6)), x], axis=0)
    # conv1 outputs at padded index m use xp[m-4 .. m]
    win1 = sliding_window_view(xp, KERNEL, axis=0)  # (T+pad-4, 6, K)
    k1 = w.conv1.kernel
    h_full = np.einsum("tik,oik->to", win1, k1) + w.conv1.bias
    k1_trunc = k1.copy()
    # oldest conv2 tap sees conv1 outputs whose two oldest inputs fall outside the window
    n_out = RECEPTIVE_FIELD - WINDOW
    k1_trunc[:, :, :n_out] = 0.0
    h_trunc = np.einsum("tik,oik->to", win1, k1_trunc) + w.conv1.bias
    h_full = np.maximum(h_full, 0.0) * m1
    h_trunc = np.maximum(h_trunc, 0.0) * m1
    # row r of h_* corresponds to padded index r + 4; output n sits at padded n + pad
    d2 = w.conv2.dilation
    out = np.tile(w.conv2.bias, (T, 1))
    base = np.arange(T) + pad - (KERNEL - 1)
    for k in range(KERNEL):
        rows = base - d2 * (KERNEL - 1 - k)
        src = h_trunc if k == 0 else h_full
        out += src[rows] @ w.conv2.kernel[:, :, k].T
    h2 = np.maximum(out, 0.0) * m2
    return h2 @ w.fc_weight.T + w.fc_bias


def noise_sequence(w: AdapterWeights, omega, accel, beta: float = 3.0, sigma_lat: float = 1.0,
                   sigma_up: float = 3.0, dropout=None) -> np.ndarray:
    """``[N_lat, N_up]`` for every sample, shape ``(T, 2)``."""
    return covariance_from_z(z_sequence(w, omega, accel, dropout), beta, sigma_lat, sigma_up)


def dropout_mask(rng: np.random.Generator, p: float) -> np.ndarray:
    """Inverted-dropout mask over the 64 convolution channels."""
    keep = rng.random(2 * CHANNELS) >= p
    return keep / (1.0 - p)


# ---------------------------------------------------------------- weight files


def _write_tensor(lines, name, a):
    a = np.asarray(a, dtype=float)
    lines.append(f"[{name}] " + " ".join(str(s) for s in a.shape))
    rows = a.reshape(-1, a.shape[-1]) if a.ndim > 1 else a.reshape(1, -1)
    for row in rows:
        lines.append(" ".join(f"{x:.17e}" for x in row))


def format_weights(w: AdapterWeights, extra: dict | None = None) -> str:
    lines = [
        "# dilated-CNN noise adapter weights",
        f"format {FORMAT_NAME}",
        f"version {FORMAT_VERSION}",
        f"window {WINDOW}",
        f"conv1 in=6 out={CHANNELS} kernel={KERNEL} dilation={w.conv1.dilation}",
        f"conv2 in={CHANNELS} out={CHANNELS} kernel={KERNEL} dilation={w.conv2.dilation}",
        f"fc in={CHANNELS} out=2",
    ]
    _write_tensor(lines, "norm.mean", w.norm_mean)
    _write_tensor(lines, "norm.std", w.norm_std)
    for name, a in w.trainable().items():
        _write_tensor(lines, name, a)
    for name, a in (extra or {}).items():
        _write_tensor(lines, name, a)
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_weights(w: AdapterWeights, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.write_text(format_weights(w, extra))
    return path


_ARCH = {
    "conv1": {"in": 6, "out": CHANNELS, "kernel": KERNEL, "dilation": DILATIONS[0]},
    "conv2": {"in": CHANNELS, "out": CHANNELS, "kernel": KERNEL, "dilation": DILATIONS[1]},
    "fc": {"in": CHANNELS, "out": 2},
}


def parse_weights(text: str):
    """Return ``(AdapterWeights, extra_tensors)`` from the text format."""
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    header, tensors = {}, {}
    i = 0
    while i < len(lines) and not lines[i].startswith("["):
        if lines[i] == "end":
            break
        key, _, rest = lines[i].partition(" ")
        header[key] = rest
        i += 1
    if header.get("format") != FORMAT_NAME:
        raise WeightsParseError(f"not an adapter weight file (format={header.get('format')!r})")
    try:
        version = int(header.get("version", ""))
    except ValueError:
        raise WeightsParseError(f"bad version field {header.get('version')!r}") from None
    if version != FORMAT_VERSION:
        raise WeightsVersionError(f"unsupported weight format version {version} (expected {FORMAT_VERSION})")
    for layer, spec in _ARCH.items():
        if layer not in header:
            raise WeightsParseError(f"missing architecture line for {layer}")
        try:
            declared = dict(kv.split("=") for kv in header[layer].split())
            declared = {k: int(v) for k, v in declared.items()}
        except ValueError:
            raise WeightsParseError(f"malformed architecture line for {layer}: {header[layer]!r}") from None
        if declared != spec:
            raise WeightsShapeError(f"{layer}: declared {declared}, expected {spec}")
    if header.get("window") != str(WINDOW):
        raise WeightsShapeError(f"window {header.get('window')!r} != {WINDOW}")
    ended = False
    while i < len(lines):
        ln = lines[i]
        if ln == "end":
            ended = True
            break
        if not (ln.startswith("[") and "]" in ln):
            raise WeightsParseError(f"expected a tensor header, got {ln[:40]!r}")
        name, _, shape_s = ln[1:].partition("]")
        try:
            shape = tuple(int(s) for s in shape_s.split())
        except ValueError:
            raise WeightsParseError(f"bad shape for {name}: {shape_s!r}") from None
        n_rows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
        rows = lines[i + 1:i + 1 + n_rows]
        if len(rows) < n_rows or any(r == "end" or r.startswith("[") for r in rows):
            raise WeightsParseError(f"tensor {name} is truncated")
        try:
            vals = np.array([float(x) for r in rows for x in r.split()])
        except ValueError:
            raise WeightsParseError(f"non-numeric value in tensor {name}") from None
        if vals.size != int(np.prod(shape)):
            raise WeightsParseError(f"tensor {name}: expected {int(np.prod(shape))} values, got {vals.size}")
        tensors[name] = vals.reshape(shape)
        i += 1 + n_rows
    if not ended:
        raise WeightsParseError("missing 'end' marker (file truncated?)")
    required = ("norm.mean", "norm.std", "conv1.kernel", "conv1.bias", "conv2.kernel", "conv2.bias",
                "fc.weight", "fc.bias")
    missing = [k for k in required if k not in tensors]
    if missing:
        raise WeightsParseError(f"missing tensors: {', '.join(missing)}")
    w = AdapterWeights(
        ConvLayer(tensors["conv1.kernel"], tensors["conv1.bias"], DILATIONS[0]),
        ConvLayer(tensors["conv2.kernel"], tensors["conv2.bias"], DILATIONS[1]),
        tensors["fc.weight"], tensors["fc.bias"], tensors["norm.mean"], tensors["norm.std"],
    )
    extra = {k: v for k, v in tensors.items() if k not in required}
    return w, extra


def load_weights(path) -> AdapterWeights:
    return parse_weights(Path(path).read_text())[0]
