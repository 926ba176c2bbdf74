"""Sequence ingestion: KITTI raw OXTS files, synthetic drives, pose export."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .geom import euler_to_rotation, log_so3, rotation_to_euler
from .model import GRAVITY

log = logging.getLogger(__name__)

EARTH_RADIUS = 6378137.0
JUMP_THRESHOLD = 0.05


class DataError(Exception):
    """Base class for anything wrong with input data."""


class OxtsFormatError(DataError):
    def __init__(self, msg: str, lineno: int | None = None):
        self.lineno = lineno
        super().__init__(msg if lineno is None else f"line {lineno}: {msg}")


class FieldCountError(OxtsFormatError):
    pass


class FieldValueError(OxtsFormatError):
    pass


class MissingDataError(DataError):
    pass


class InconsistentDataError(DataError):
    pass


# ------------------------------------------------------------------------ OXTS

OXTS_FIELDS = (
    "lat", "lon", "alt", "roll", "pitch", "yaw",
    "vn", "ve", "vf", "vl", "vu",
    "ax", "ay", "az", "af", "al", "au",
    "wx", "wy", "wz", "wf", "wl", "wu",
    "pos_accuracy", "vel_accuracy", "navstat", "numsats", "posmode", "velmode", "orimode",
)  # fmt: skip
_INT_FIELDS = frozenset(OXTS_FIELDS[25:])


class OxtsRecord(NamedTuple):
    lat: float
    lon: float
    alt: float
    roll: float
    pitch: float
    yaw: float
    vn: float
    ve: float
    vf: float
    vl: float
    vu: float
    ax: float
    ay: float
    az: float
    af: float
    al: float
    au: float
    wx: float
    wy: float
    wz: float
    wf: float
    wl: float
    wu: float
    pos_accuracy: float
    vel_accuracy: float
    navstat: float
    numsats: float
    posmode: float
    velmode: float
    orimode: float

    @property
    def omega(self) -> np.ndarray:
        return np.array([self.wx, self.wy, self.wz])

    @property
    def accel(self) -> np.ndarray:
        return np.array([self.ax, self.ay, self.az])

    @property
    def velocity_enu(self) -> np.ndarray:
        return np.array([self.ve, self.vn, self.vu])


def parse_oxts(line: str, lineno: int | None = None) -> OxtsRecord:
    parts = line.split()
    if len(parts) != len(OXTS_FIELDS):
        raise FieldCountError(f"expected {len(OXTS_FIELDS)} fields, got {len(parts)}", lineno)
    values = []
    for name, s in zip(OXTS_FIELDS, parts):
        try:
            values.append(float(s))
        except ValueError:
            raise FieldValueError(f"field {name!r} is not numeric: {s!r}", lineno) from None
    return OxtsRecord(*values)


def format_oxts(rec: OxtsRecord) -> str:
    out = []
    for name, v in zip(OXTS_FIELDS, rec):
        if name in _INT_FIELDS and float(v).is_integer():
            out.append(str(int(v)))
        else:
            out.append(repr(float(v)))
    return " ".join(out)


# ------------------------------------------------------------------- geodesy


def _mercator(lat, lon, scale):
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    x = scale * EARTH_RADIUS * np.radians(lon)
    y = scale * EARTH_RADIUS * np.log(np.tan(np.pi / 4 + np.radians(lat) / 2))
    return x, y


def geodetic_to_local(lat, lon, alt, origin) -> np.ndarray:
    """Local metric coordinates (east, north, up) relative to ``origin``.

    ``origin`` is ``(lat0, lon0, alt0)``; the Mercator scale uses ``lat0``.
    Works elementwise on arrays, returning shape ``(..., 3)``.
    """
    lat0, lon0, alt0 = origin
    if np.any(np.abs(np.asarray(lat)) >= 90.0) or abs(lat0) >= 90.0:
        raise ValueError("latitude must be strictly inside (-90, 90) degrees")
    scale = np.cos(np.radians(lat0))
    x, y = _mercator(lat, lon, scale)
    x0, y0 = _mercator(lat0, lon0, scale)
    return np.stack([x - x0, y - y0, np.asarray(alt, dtype=float) - alt0], axis=-1)


def local_to_geodetic(xyz, origin):
    """Inverse of :func:`geodetic_to_local`."""
    lat0, lon0, alt0 = origin
    scale = np.cos(np.radians(lat0))
    x0, y0 = _mercator(lat0, lon0, scale)
    xyz = np.asarray(xyz, dtype=float)
    mx = xyz[..., 0] + x0
    my = xyz[..., 1] + y0
    lon = np.degrees(mx / (scale * EARTH_RADIUS))
    lat = np.degrees(2.0 * np.arctan(np.exp(my / (scale * EARTH_RADIUS))) - np.pi / 2)
    return lat, lon, xyz[..., 2] + alt0


# ----------------------------------------------------------------- sequences


@dataclass
class Sequence:
    """IMU samples with time-aligned ground truth.

    ``gt_vel`` is the world-frame IMU velocity used to initialise filters.
    ``jumps`` holds indices ``n`` for which ``t[n+1] - t[n]`` is abnormal.
    """

    name: str
    t: np.ndarray
    omega: np.ndarray
    accel: np.ndarray
    gt_rot: np.ndarray
    gt_pos: np.ndarray
    gt_vel: np.ndarray
    jumps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    def __post_init__(self):
        n = len(self.t)
        for name in ("omega", "accel", "gt_rot", "gt_pos", "gt_vel"):
            if len(getattr(self, name)) != n:
                raise InconsistentDataError(f"{self.name}: {name} has {len(getattr(self, name))} rows, t has {n}")

    def slice(self, start: int, stop: int) -> "Sequence":
        t = self.t[start:stop]
        jumps = self.jumps[(self.jumps >= start) & (self.jumps < stop - 1)] - start
        return Sequence(
            f"{self.name}[{start}:{stop}]", t - t[0], self.omega[start:stop], self.accel[start:stop],
            self.gt_rot[start:stop], self.gt_pos[start:stop], self.gt_vel[start:stop], jumps, dict(self.meta),
        )

    def distance(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.gt_pos, axis=0), axis=1)))


def find_time_jumps(t, threshold: float = JUMP_THRESHOLD) -> np.ndarray:
    dt = np.diff(np.asarray(t, dtype=float))
    return np.flatnonzero((dt > threshold) | (dt <= 0.0))


def _parse_timestamps(lines) -> np.ndarray:
    stamps = np.array([np.datetime64(s.strip().replace(" ", "T"), "ns") for s in lines if s.strip()])
    return (stamps - stamps[0]).astype("int64") * 1e-9


def _oxts_dir(path: Path) -> Path:
    if (path / "oxts").is_dir():
        return path / "oxts"
    return path


def load_sequence(path, name: str | None = None) -> Sequence:
    """Load a KITTI raw drive (``oxts/timestamps.txt`` and ``oxts/data/*.txt``)."""
    root = _oxts_dir(Path(path))
    ts_file = root / "timestamps.txt"
    data_dir = root / "data"
    if not ts_file.is_file():
        raise MissingDataError(f"missing {ts_file}")
    frames = sorted(data_dir.glob("*.txt")) if data_dir.is_dir() else []
    if not frames:
        raise MissingDataError(f"no OXTS frames in {data_dir}")
    try:
        t = _parse_timestamps(ts_file.read_text().splitlines())
    except ValueError as exc:
        raise OxtsFormatError(f"{ts_file}: bad timestamp ({exc})") from None
    if len(t) != len(frames):
        raise InconsistentDataError(f"{len(t)} timestamps but {len(frames)} OXTS frames in {root}")
    recs = []
    for f in frames:
        text = f.read_text().strip()
        try:
            recs.append(parse_oxts(text, 1))
        except OxtsFormatError as exc:
            raise type(exc)(f"{f.name}: {exc}") from None
    arr = np.array(recs, dtype=float)
    col = {n: i for i, n in enumerate(OXTS_FIELDS)}
    origin = (arr[0, col["lat"]], arr[0, col["lon"]], arr[0, col["alt"]])
    pos = geodetic_to_local(arr[:, col["lat"]], arr[:, col["lon"]], arr[:, col["alt"]], origin)
    rot = np.array([euler_to_rotation(r, p, y) for r, p, y in arr[:, col["roll"]:col["yaw"] + 1]])
    vel = arr[:, [col["ve"], col["vn"], col["vu"]]]
    if not np.any(vel):
        vel = _central_difference(pos, t)
    jumps = find_time_jumps(t)
    if jumps.size:
        log.warning("%s: %d time jump(s), first after t=%.3f s", root, jumps.size, t[jumps[0]])
    meta = {"origin": list(origin)}
    meta_file = root / "synthetic.json"
    if meta_file.is_file():
        meta.update(json.loads(meta_file.read_text()))
    return Sequence(
        name or (root.parent.name if root.name == "oxts" else root.name), t, arr[:, col["wx"]:col["wz"] + 1].copy(),
        arr[:, col["ax"]:col["az"] + 1].copy(), rot, pos, vel, jumps, meta,
    )


def _central_difference(pos, t):
    vel = np.zeros_like(pos)
    if len(t) > 1:
        vel[1:-1] = (pos[2:] - pos[:-2]) / (t[2:] - t[:-2])[:, None]
        vel[0] = (pos[1] - pos[0]) / (t[1] - t[0])
        vel[-1] = (pos[-1] - pos[-2]) / (t[-1] - t[-2])
    return vel


def write_oxts_sequence(seq: Sequence, path, origin=(49.0, 8.4, 110.0), start="2011-09-30T12:00:00") -> Path:
    """Write ``seq`` in the KITTI raw layout so :func:`load_sequence` reads it back."""
    root = Path(path) / "oxts"
    (root / "data").mkdir(parents=True, exist_ok=True)
    t0 = np.datetime64(start, "ns")
    stamps = t0 + np.round(seq.t * 1e9).astype("int64").astype("timedelta64[ns]")
    (root / "timestamps.txt").write_text(
        "\n".join(str(s).replace("T", " ") for s in stamps) + "\n"
    )
    lat, lon, alt = local_to_geodetic(seq.gt_pos, origin)
    for n in range(len(seq)):
        roll, pitch, yaw = rotation_to_euler(seq.gt_rot[n])
        ve, vn, vu = seq.gt_vel[n]
        vf, vl, vu_body = seq.gt_rot[n].T @ seq.gt_vel[n]
        rec = OxtsRecord(
            lat[n], lon[n], alt[n], roll, pitch, yaw, vn, ve, vf, vl, vu,
            *seq.accel[n], *seq.accel[n], *seq.omega[n], *seq.omega[n],
            0.01, 0.01, 4, 10, 5, 5, 6,
        )  # fmt: skip
        (root / "data" / f"{n:010d}.txt").write_text(format_oxts(rec) + "\n")
    if seq.meta:
        (root / "synthetic.json").write_text(json.dumps(seq.meta, indent=2, sort_keys=True) + "\n")
    return root


# ----------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class Segment:
    """One piece of a drive: ``straight``, ``turn`` or ``stop``.

    ``speed`` is the target speed reached with bounded acceleration;
    ``yaw_rate`` applies to turns only (positive = left).
    """

    kind: str
    duration: float
    speed: float = 0.0
    yaw_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in ("straight", "turn", "stop"):
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if self.speed < 0 or self.duration < 0:
            raise ValueError("speed and duration must be nonnegative")


@dataclass(frozen=True)
class SyntheticSpec:
    segments: tuple
    dt: float = 0.01
    initial_speed: float = 0.0
    max_accel: float = 1.5
    smoothing: float = 1.0
    grade_amplitude: float = 0.0
    grade_wavelength: float = 300.0
    slip_gain: float = 0.0
    roll_gain: float = 0.0
    bump_amplitude: float = 0.0
    mount_rpy: tuple = (0.0, 0.0, 0.0)
    lever_arm: tuple = (0.0, 0.0, 0.0)
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    accel_bias: tuple = (0.0, 0.0, 0.0)
    gyro_noise: float = 0.0
    accel_noise: float = 0.0
    gyro_bias_walk: float = 0.0
    accel_bias_walk: float = 0.0
    gravity: tuple = GRAVITY
    name: str = "synthetic"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["segments"] = [asdict(s) for s in self.segments]
        return d


def _smooth(x, width):
    if width <= 1:
        return x
    kernel = np.ones(width) / width
    pad = np.concatenate([np.full(width, x[0]), x, np.full(width, x[-1])])
    return np.convolve(pad, kernel, mode="same")[width:-width]


def _profiles(spec: SyntheticSpec, n_samples: int):
    dt = spec.dt
    speed_target = np.empty(n_samples)
    yaw_rate = np.zeros(n_samples)
    i = 0
    for seg in spec.segments:
        k = int(round(seg.duration / dt))
        speed_target[i:i + k] = 0.0 if seg.kind == "stop" else seg.speed
        if seg.kind == "turn":
            yaw_rate[i:i + k] = seg.yaw_rate
        i += k
    speed_target[i:] = speed_target[i - 1] if i else spec.initial_speed
    speed = np.empty(n_samples)
    s = spec.initial_speed
    step = spec.max_accel * dt
    for n in range(n_samples):
        s += np.clip(speed_target[n] - s, -step, step)
        speed[n] = s
    width = max(1, int(round(spec.smoothing / dt)))
    speed = np.maximum(_smooth(speed, width), 0.0)
    yaw_rate = _smooth(yaw_rate, width)
    yaw_rate = np.where(speed > 0.05, yaw_rate, 0.0)
    return speed, yaw_rate


def _cumtrapz(y, dt):
    out = np.zeros_like(y)
    out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * dt, axis=0)
    return out


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> Sequence:
    """Piecewise-smooth car drive with IMU samples consistent with the filter kinematics.

    Ground-truth poses are sampled from the smooth motion; velocity is the
    forward difference of positions and the IMU inputs invert the discrete
    propagation exactly, so noiseless samples integrate back to the truth.
    """
    rng = np.random.default_rng(seed)
    dt = spec.dt
    duration = sum(s.duration for s in spec.segments)
    T = int(round(duration / dt)) + 1
    M = T + 2
    speed, yaw_rate = _profiles(spec, M)
    heading = _cumtrapz(yaw_rate, dt)
    dist = _cumtrapz(speed, dt)
    grade = spec.grade_amplitude * np.sin(2 * np.pi * dist / spec.grade_wavelength)
    grade += spec.bump_amplitude * np.sin(2 * np.pi * dist / 7.0)
    lat_acc = speed * yaw_rate
    roll = _smooth(spec.roll_gain * lat_acc, 10)
    slip = spec.slip_gain * speed * yaw_rate

    R_car = np.array([euler_to_rotation(roll[n], -grade[n], heading[n]) for n in range(M)])
    v_body = np.stack([speed, slip, np.zeros(M)], axis=1)
    v_car_world = np.einsum("nij,nj->ni", R_car, v_body)
    # forward Euler keeps the discrete car-frame velocity exactly [speed, slip, 0]
    p_car = np.zeros_like(v_car_world)
    p_car[1:] = np.cumsum(v_car_world[:-1] * dt, axis=0)

    Rc = euler_to_rotation(*spec.mount_rpy)
    lever = np.asarray(spec.lever_arm, dtype=float)
    R_imu = R_car @ Rc.T
    p_imu = p_car - R_imu @ lever
    p_imu = p_imu - p_imu[0]

    g = np.asarray(spec.gravity, dtype=float)
    v = (p_imu[1:] - p_imu[:-1]) / dt
    omega = np.array([log_so3(R_imu[n].T @ R_imu[n + 1]) / dt for n in range(T)])
    accel = np.einsum("nji,nj->ni", R_imu[:T], (v[1:T + 1] - v[:T]) / dt - g)

    bg = np.tile(np.asarray(spec.gyro_bias, dtype=float), (T, 1))
    ba = np.tile(np.asarray(spec.accel_bias, dtype=float), (T, 1))
    if spec.gyro_bias_walk:
        bg = bg + np.cumsum(rng.normal(0.0, spec.gyro_bias_walk * dt, (T, 3)), axis=0)
    if spec.accel_bias_walk:
        ba = ba + np.cumsum(rng.normal(0.0, spec.accel_bias_walk * dt, (T, 3)), axis=0)
    omega_imu = omega + bg + rng.normal(0.0, 1.0, (T, 3)) * spec.gyro_noise
    accel_imu = accel + ba + rng.normal(0.0, 1.0, (T, 3)) * spec.accel_noise

    t = np.arange(T) * dt
    meta = {
        "seed": int(seed),
        "gyro_bias": bg[-1].tolist(),
        "accel_bias": ba[-1].tolist(),
        "mount_rpy": list(spec.mount_rpy),
        "lever_arm": list(spec.lever_arm),
    }
    return Sequence(spec.name, t, omega_imu, accel_imu, R_imu[:T].copy(), p_imu[:T].copy(),
                    v[:T].copy(), find_time_jumps(t), meta)


def drop_interval(seq: Sequence, t_start: float, duration: float) -> Sequence:
    """Remove samples in ``[t_start, t_start + duration)``, leaving a time jump."""
    keep = (seq.t < t_start) | (seq.t >= t_start + duration)
    t = seq.t[keep]
    return Sequence(seq.name, t, seq.omega[keep], seq.accel[keep], seq.gt_rot[keep],
                    seq.gt_pos[keep], seq.gt_vel[keep], find_time_jumps(t), dict(seq.meta))


# ------------------------------------------------------------------- presets


def circle_spec(speed: float = 10.0, yaw_rate: float = 0.1, duration: float = 60.0, **kw) -> SyntheticSpec:
    return SyntheticSpec(segments=(Segment("turn", duration, speed, yaw_rate),),
                         initial_speed=speed, smoothing=0.0, name="circle", **kw)


def urban_loop_spec(**kw) -> SyntheticSpec:
    """Roughly 1 km of city driving: blocks, right-angle turns and a few stops."""
    turn = np.pi / 2
    segs = (
        Segment("straight", 14.0, 10.0),
        Segment("turn", turn / 0.35, 7.0, 0.35),
        Segment("straight", 12.0, 11.0),
        Segment("stop", 6.0),
        Segment("straight", 8.0, 9.0),
        Segment("turn", turn / 0.4, 6.0, 0.4),
        Segment("straight", 16.0, 12.0),
        Segment("turn", turn / 0.3, 7.0, -0.3),
        Segment("straight", 10.0, 10.0),
        Segment("turn", turn / 0.35, 7.0, 0.35),
        Segment("straight", 12.0, 11.0),
        Segment("stop", 5.0),
        Segment("straight", 10.0, 10.0),
        Segment("turn", turn / 0.4, 6.0, 0.4),
        Segment("straight", 12.0, 10.0),
    )  # fmt: skip
    base = dict(
        segments=segs, grade_amplitude=0.03, grade_wavelength=400.0, roll_gain=0.01,
        bump_amplitude=0.002, name="urban_loop",
    )
    base.update(kw)
    return SyntheticSpec(**base)


def random_drive_spec(seed: int, duration: float = 180.0, **kw) -> SyntheticSpec:
    """Seeded random mix of straights, turns of both signs and stops."""
    rng = np.random.default_rng(seed)
    segs = []
    total = 0.0
    while total < duration:
        r = rng.random()
        if r < 0.45:
            seg = Segment("straight", rng.uniform(6, 20), rng.uniform(6, 16))
        elif r < 0.9:
            rate = rng.uniform(0.15, 0.45) * rng.choice([-1, 1])
            angle = rng.uniform(np.pi / 4, np.pi / 2)
            seg = Segment("turn", angle / abs(rate), rng.uniform(5, 9), rate)
        else:
            seg = Segment("stop", rng.uniform(2, 6))
        segs.append(seg)
        total += seg.duration
    base = dict(
        segments=tuple(segs), initial_speed=0.0, grade_amplitude=0.03, grade_wavelength=350.0,
        roll_gain=0.01, bump_amplitude=0.002, name=f"drive{seed}",
    )
    base.update(kw)
    return SyntheticSpec(**base)


# -------------------------------------------------------------------- export


def export_poses(rotations, positions, path, fmt: str = "kitti", t=None) -> Path:
    """Write poses as KITTI 3x4 lines or CSV ``t,x,y,z,roll,pitch,yaw``."""
    rotations = np.asarray(rotations, dtype=float)
    positions = np.asarray(positions, dtype=float)
    if len(rotations) == 0:
        raise ValueError("no poses to export")
    path = Path(path)
    if fmt == "kitti":
        mats = np.concatenate([rotations, positions[:, :, None]], axis=2).reshape(len(rotations), 12)
        lines = [" ".join(_fmt(x) for x in row) for row in mats]
        text = "\n".join(lines) + "\n"
    elif fmt == "csv":
        t = np.arange(len(rotations), dtype=float) if t is None else np.asarray(t, dtype=float)
        lines = ["t,x,y,z,roll,pitch,yaw"]
        for ti, R, p in zip(t, rotations, positions):
            lines.append(",".join(_fmt(x) for x in (ti, *p, *rotation_to_euler(R))))
        text = "\n".join(lines) + "\n"
    else:
        raise ValueError(f"unknown pose format {fmt!r}")
    path.write_text(text)
    return path


def _fmt(x: float) -> str:
    x = float(x)
    if x == 0.0:
        return "0"
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def read_kitti_poses(path):
    """Return ``(rotations, positions)`` from a KITTI pose file."""
    rows = np.loadtxt(path, ndmin=2)
    if rows.shape[1] != 12:
        raise DataError(f"{path}: expected 12 numbers per line, got {rows.shape[1]}")
    mats = rows.reshape(-1, 3, 4)
    return mats[:, :, :3].copy(), mats[:, :, 3].copy()


def read_trajectory_csv(path):
    """Return ``(t, rotations, positions)`` from a CSV written by :func:`export_poses`."""
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    R = np.array([euler_to_rotation(r, p, y) for r, p, y in rows[:, 4:7]])
    return rows[:, 0].copy(), R, rows[:, 1:4].copy()


def read_poses(path):
    """Dispatch on extension: ``.csv`` trajectories, anything else KITTI lines."""
    path = Path(path)
    if path.suffix == ".csv":
        _, R, p = read_trajectory_csv(path)
        return R, p
    return read_kitti_poses(path)

