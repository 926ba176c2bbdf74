"""State, IMU sample and noise-parameter containers.

Error-state ordering used throughout (21 coordinates)::

    0:3   attitude          9:12  gyro bias        15:18 car rotation
    3:6   velocity          12:15 accel bias       18:21 car lever arm
    6:9   position

Process-noise ordering (18 coordinates): gyro, accel, gyro-bias walk,
accel-bias walk, car rotation, car lever arm.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .geom import THETA_SMALL, ExtendedPose

GRAVITY = (0.0, 0.0, -9.80655)

# error-state slices
ATT, VEL, POS = slice(0, 3), slice(3, 6), slice(6, 9)
BG, BA = slice(9, 12), slice(12, 15)
RC, PC = slice(15, 18), slice(18, 21)

# P0 diagonal indices that start at exactly zero: yaw, vertical speed, position
P0_ZERO_INDICES = (2, 5, 6, 7, 8)


@dataclass(frozen=True)
class ImuSample:
    t: float
    omega: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float))


@dataclass(frozen=True)
class FilterState:
    pose: ExtendedPose
    bias_gyro: np.ndarray
    bias_accel: np.ndarray
    R_car: np.ndarray
    p_car: np.ndarray

    def arrays(self):
        """Tuple of raw arrays in kernel order (R, v, p, bg, ba, Rc, pc)."""
        return (
            self.pose.rotation,
            self.pose.velocity,
            self.pose.position,
            self.bias_gyro,
            self.bias_accel,
            self.R_car,
            self.p_car,
        )

    @classmethod
    def from_arrays(cls, R, v, p, bg, ba, Rc, pc) -> "FilterState":
        return cls(ExtendedPose(R, v, p), bg, ba, Rc, pc)


def initial_state(pose0: ExtendedPose) -> FilterState:
    """Filter state at start: given pose, zero biases, identity car frame."""
    return FilterState(
        pose=ExtendedPose(
            np.array(pose0.rotation, dtype=float),
            np.array(pose0.velocity, dtype=float),
            np.array(pose0.position, dtype=float),
        ),
        bias_gyro=np.zeros(3),
        bias_accel=np.zeros(3),
        R_car=np.eye(3),
        p_car=np.zeros(3),
    )


@dataclass(frozen=True)
class InitialBeliefs:
    """Standard deviations of the initial error covariance."""

    rot: float = 1e-3
    vel: float = 0.3
    bias_gyro: float = 1e-4
    bias_accel: float = 3e-2
    rot_car: float = 3e-3
    pos_car: float = 1e-1

    def covariance(self) -> np.ndarray:
        d = np.concatenate(
            [
                [self.rot, self.rot, 0.0],
                [self.vel, self.vel, 0.0],
                np.zeros(3),
                np.full(3, self.bias_gyro),
                np.full(3, self.bias_accel),
                np.full(3, self.rot_car),
                np.full(3, self.pos_car),
            ]
        )
        return np.diag(d**2)


@dataclass(frozen=True)
class ProcessNoise:
    gyro: float = 1.4e-2
    accel: float = 3e-2
    bias_gyro: float = 1e-4
    bias_accel: float = 1e-3
    rot_car: float = 1e-4
    pos_car: float = 1e-4

    def matrix(self) -> np.ndarray:
        sig = [self.gyro, self.accel, self.bias_gyro, self.bias_accel, self.rot_car, self.pos_car]
        return np.diag(np.repeat(np.asarray(sig, dtype=float), 3) ** 2)


@dataclass(frozen=True)
class MeasurementNoise:
    """Diagonal 2x2 covariance of the (lateral, upward) pseudo-measurement."""

    lat: float = 1.0
    up: float = 9.0

    def matrix(self) -> np.ndarray:
        return np.diag([self.lat, self.up])

    @classmethod
    def from_sigmas(cls, sigma_lat: float, sigma_up: float) -> "MeasurementNoise":
        return cls(sigma_lat**2, sigma_up**2)


def default_parameters() -> tuple[InitialBeliefs, ProcessNoise, MeasurementNoise]:
    return InitialBeliefs(), ProcessNoise(), MeasurementNoise.from_sigmas(1.0, 3.0)


@dataclass(frozen=True)
class FilterConfig:
    """Everything tunable about a filter run, as read from a config file."""

    beliefs: InitialBeliefs = field(default_factory=InitialBeliefs)
    process: ProcessNoise = field(default_factory=ProcessNoise)
    sigma_lat: float = 1.0
    sigma_up: float = 3.0
    beta: float = 3.0
    gravity: tuple = GRAVITY
    theta_small: float = THETA_SMALL
    dt_warn: float = 0.05

    @property
    def static_noise(self) -> MeasurementNoise:
        return MeasurementNoise.from_sigmas(self.sigma_lat, self.sigma_up)

    def gravity_vector(self) -> np.ndarray:
        return np.asarray(self.gravity, dtype=float)


_BELIEF_KEYS = {f"sigma0_{f.name}": f.name for f in fields(InitialBeliefs)}
_PROCESS_KEYS = {f"sigma_{f.name}": f.name for f in fields(ProcessNoise)}
_SCALAR_KEYS = ("sigma_lat", "sigma_up", "beta", "theta_small", "dt_warn")
CONFIG_KEYS = (*_BELIEF_KEYS, *_PROCESS_KEYS, *_SCALAR_KEYS, "gravity")


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines. ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            if key == "gravity":
                g = tuple(float(s) for s in value.replace(",", " ").split())
                if len(g) != 3:
                    raise ValueError
                out[key] = g
            else:
                out[key] = float(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from None
    return out


def apply_overrides(cfg: FilterConfig, values: dict) -> FilterConfig:
    beliefs = replace(cfg.beliefs, **{_BELIEF_KEYS[k]: v for k, v in values.items() if k in _BELIEF_KEYS})
    process = replace(cfg.process, **{_PROCESS_KEYS[k]: v for k, v in values.items() if k in _PROCESS_KEYS})
    rest = {k: v for k, v in values.items() if k in _SCALAR_KEYS or k == "gravity"}
    return replace(cfg, beliefs=beliefs, process=process, **rest)


def load_config(path) -> FilterConfig:
    return apply_overrides(FilterConfig(), parse_config(Path(path).read_text()))


def format_config(cfg: FilterConfig) -> str:
    lines = [f"sigma0_{k} = {v!r}" for k, v in asdict(cfg.beliefs).items()]
    lines += [f"sigma_{k} = {v!r}" for k, v in asdict(cfg.process).items()]
    lines += [f"{k} = {getattr(cfg, k)!r}" for k in _SCALAR_KEYS]
    lines.append("gravity = " + " ".join(repr(float(g)) for g in cfg.gravity))
    return "\n".join(lines) + "\n"
