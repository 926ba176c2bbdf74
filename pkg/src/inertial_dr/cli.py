"""Command-line entry point: ``inertial-dr {run,train,eval,synth,export-cov}``.

Every command writes into an output directory together with a
``manifest.json`` recording the flags, seed and library versions. Outputs
contain no timestamps, so identical flags give byte-identical files.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, adapter, data, metrics, train
from .adapter import WeightsError
from .geom import ExtendedPose, rotation_to_euler
from .iekf import NumericalError, run_filter
from .model import ConfigError, FilterConfig, apply_overrides, initial_state, load_config, parse_config

log = logging.getLogger("inertial_dr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _versions() -> dict:
    import numba

    return {"inertial_dr": __version__, "numpy": np.__version__, "numba": numba.__version__,
            "python": platform.python_version()}


def write_manifest(out: Path, command: str, args: argparse.Namespace, outputs) -> Path:
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
             if k not in ("func",)}
    manifest = {
        "command": command,
        "flags": flags,
        "seed": flags.get("seed"),
        "versions": _versions(),
        "outputs": sorted(str(p) for p in outputs),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _filter_config(args) -> FilterConfig:
    """Defaults, then the config file, then explicit flags."""
    cfg = load_config(args.config) if args.config else FilterConfig()
    values = {}
    for item in args.set or ():
        values.update(parse_config(item))
    for key in ("sigma_lat", "sigma_up", "beta"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    return apply_overrides(cfg, values)


def _write_csv(path: Path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([x if isinstance(x, (str, int, np.integer)) else repr(float(x)) for x in r])
    path.write_text(buf.getvalue())
    return path


# ------------------------------------------------------------------ commands


def cmd_run(args) -> int:
    cfg = _filter_config(args)
    seq = data.load_sequence(args.sequence)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    noise = None
    if args.weights and not args.static_cov and not args.imu_only:
        weights, extra = adapter.parse_weights(Path(args.weights).read_text())
        if train.SIGMA_SECTION in extra:  # a training checkpoint also carries P0 and Q
            cfg = train.LearnableSet(weights, extra[train.SIGMA_SECTION]).filter_config(cfg)
        noise = adapter.noise_sequence(weights, seq.omega, seq.accel, cfg.beta, cfg.sigma_lat, cfg.sigma_up)
    x0 = initial_state(ExtendedPose(seq.gt_rot[0], seq.gt_vel[0], seq.gt_pos[0]))
    res = run_filter(seq.t, seq.omega, seq.accel, x0, cfg.beliefs.covariance(), cfg.process, noise,
                     sigma_lat=cfg.sigma_lat, sigma_up=cfg.sigma_up, gravity=cfg.gravity,
                     theta_small=cfg.theta_small, update=not args.imu_only, align=not args.no_alignment,
                     dt_warn=cfg.dt_warn)
    ext = "csv" if args.format == "csv" else "txt"
    outputs = [
        data.export_poses(res.rotation, res.position, out / f"trajectory.{ext}", args.format, seq.t),
        data.export_poses(seq.gt_rot, seq.gt_pos, out / f"ground_truth.{ext}", args.format, seq.t),
    ]
    rows = (
        (t, *bg, *ba, *rotation_to_euler(Rc), *pc)
        for t, bg, ba, Rc, pc in zip(res.t, res.bias_gyro, res.bias_accel, res.R_car, res.p_car)
    )
    header = ("t", "bg_x", "bg_y", "bg_z", "ba_x", "ba_y", "ba_z",
              "car_roll", "car_pitch", "car_yaw", "lever_x", "lever_y", "lever_z")
    outputs.append(_write_csv(out / "states.csv", header, rows))
    report = metrics.relative_errors((res.rotation, res.position), (seq.gt_rot, seq.gt_pos), t=seq.t)
    name = seq.name
    print(metrics.summarize({name: report}, out / "metrics"), end="")
    outputs += [out / "metrics.csv", out / "metrics.txt"]
    if seq.jumps.size:
        log.warning("%s: %d time jump(s) in input", name, seq.jumps.size)
    if res.skipped.any():
        log.warning("%d update(s) skipped for conditioning", int(res.skipped.sum()))
    write_manifest(out, "run", args, [p.name for p in outputs])
    return EXIT_OK


def cmd_train(args) -> int:
    seqs = [data.load_sequence(p) for p in args.sequences]
    names = [s.name for s in seqs]
    for n in list(args.leave_out or ()) + list(args.val or ()):
        if n not in names:
            raise UsageError(f"unknown sequence {n!r}; have {', '.join(names)}")
    held = set(args.leave_out or ())
    val_names = set(args.val or ())
    train_set = [s for s in seqs if s.name not in held and s.name not in val_names]
    val_set = [s for s in seqs if s.name in val_names]
    if not train_set:
        raise train.TrainingError("no training sequences left after leave-out / validation split")
    tcfg = train.TrainConfig(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size, window_s=args.window,
        steps_per_epoch=args.steps_per_epoch, seed=args.seed, dropout_p=args.dropout,
        augmentation_std=args.augmentation, spsa_c=args.spsa_c,
    )
    cfg = _filter_config(args)
    out = Path(args.out)
    init = train.load_checkpoint(args.init, cfg) if args.init else None
    if init is None:
        mean, std = adapter.normalization_stats(np.hstack([s.omega, s.accel]) for s in train_set)
        init = train.LearnableSet.initial(adapter.init_weights(args.seed, mean, std), cfg)
    result = train.run_training(train_set, tcfg, val_set, init=init, out_dir=out, base=cfg)
    for epoch, tr, va in result.history:
        print(f"epoch {epoch:3d}  train {tr:8.4f}%  val {va:8.4f}%")
    print(f"best epoch: {result.best_epoch}")
    outputs = sorted(p.name for p in out.iterdir() if p.name != "manifest.json")
    write_manifest(out, "train", args, outputs)
    return EXIT_OK


def cmd_eval(args) -> int:
    if len(args.est) != len(args.gt):
        raise UsageError("--est and --gt need the same number of files")
    names = args.names or [Path(p).parent.name or Path(p).stem for p in args.est]
    if len(names) != len(args.est):
        raise UsageError("--names must match the number of --est files")
    if len(set(names)) != len(names):
        names = [f"{n}_{i}" for i, n in enumerate(names)]
    reports = {}
    for name, est_path, gt_path in zip(names, args.est, args.gt):
        try:
            est, gt = data.read_poses(est_path), data.read_poses(gt_path)
        except (OSError, ValueError) as exc:
            raise data.DataError(f"cannot read poses: {exc}") from None
        if len(est[1]) != len(gt[1]):
            raise data.InconsistentDataError(f"{name}: {len(est[1])} estimated vs {len(gt[1])} reference poses")
        reports[name] = metrics.relative_errors(est, gt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(metrics.summarize(reports, out / "summary"), end="")
    metrics.write_per_length(reports, out / "per_length.csv")
    write_manifest(out, "eval", args, ["summary.csv", "summary.txt", "per_length.csv"])
    return EXIT_OK


_PRESETS = {
    "urban_loop": lambda a, kw: data.urban_loop_spec(**kw),
    "circle": lambda a, kw: data.circle_spec(duration=a.duration or 60.0, **kw),
    "random": lambda a, kw: data.random_drive_spec(a.seed, duration=a.duration or 180.0, **kw),
}


def cmd_synth(args) -> int:
    kw = dict(
        gyro_noise=args.gyro_noise, accel_noise=args.accel_noise, gyro_bias=tuple(args.gyro_bias),
        accel_bias=tuple(args.accel_bias), mount_rpy=tuple(np.radians(args.mount_deg)),
        lever_arm=tuple(args.lever_arm), slip_gain=args.slip_gain,
    )
    spec = _PRESETS[args.preset](args, kw)
    seq = data.generate_synthetic(spec, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seq.meta["spec"] = spec.to_dict()
    data.write_oxts_sequence(seq, out)
    print(f"{seq.name}: {len(seq)} samples, {seq.t[-1]:.2f} s, {seq.distance():.1f} m -> {out}")
    write_manifest(out, "synth", args, ["oxts/timestamps.txt", "oxts/data", "oxts/synthetic.json"])
    return EXIT_OK


def cmd_export_cov(args) -> int:
    cfg = _filter_config(args)
    seq = data.load_sequence(args.sequence)
    if args.weights:
        params = train.load_checkpoint(args.weights, cfg)
        w = params.weights
    else:
        w = adapter.init_weights(0)
    z = adapter.z_sequence(w, seq.omega, seq.accel)
    N = adapter.covariance_from_z(z, cfg.beta, cfg.sigma_lat, cfg.sigma_up)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = (
        (t, n[0], n[1], zz[0], zz[1], *om, *ac)
        for t, n, zz, om, ac in zip(seq.t, N, z, seq.omega, seq.accel)
    )
    header = ("t", "N_lat", "N_up", "z_lat", "z_up", "wx", "wy", "wz", "ax", "ay", "az")
    _write_csv(out / "covariance.csv", header, rows)
    write_manifest(out, "export-cov", args, ["covariance.csv"])
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _vec3(text: str) -> tuple:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return vals


def _add_filter_flags(p):
    p.add_argument("--config", type=Path, help="key = value filter configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
    p.add_argument("--sigma-lat", type=float, help="static lateral pseudo-measurement std (m/s)")
    p.add_argument("--sigma-up", type=float, help="static upward pseudo-measurement std (m/s)")
    p.add_argument("--beta", type=float, help="adapter output range, in decades")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="inertial-dr", description="Inertial-only dead reckoning with an adaptive invariant EKF.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="filter one sequence")
    p.add_argument("sequence", type=Path, help="KITTI raw drive directory (containing oxts/)")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--weights", type=Path, help="adapter weight or checkpoint file")
    p.add_argument("--static-cov", action="store_true", help="ignore --weights; constant covariance")
    p.add_argument("--no-alignment", action="store_true", help="freeze the car frame at R_c = I, p_c = 0")
    p.add_argument("--imu-only", action="store_true", help="pure strapdown integration")
    p.add_argument("--format", choices=("kitti", "csv"), default="kitti")
    _add_filter_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train", help="train adapter and noise levels")
    p.add_argument("sequences", type=Path, nargs="+", help="drive directories")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--leave-out", action="append", metavar="NAME", help="exclude a sequence entirely")
    p.add_argument("--val", action="append", metavar="NAME", help="use a sequence for validation only")
    p.add_argument("--init", type=Path, help="start from this checkpoint")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--steps-per-epoch", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=9)
    p.add_argument("--window", type=float, default=60.0, help="minibatch window length (s)")
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--augmentation", type=float, default=1e-4)
    p.add_argument("--spsa-c", type=float, default=1e-2, help="perturbation size")
    p.add_argument("--seed", type=int, default=0)
    _add_filter_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="relative errors of pose files against references")
    p.add_argument("--est", type=Path, nargs="+", required=True)
    p.add_argument("--gt", type=Path, nargs="+", required=True)
    p.add_argument("--names", nargs="+")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic drive in the KITTI raw layout")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--preset", choices=sorted(_PRESETS), default="urban_loop")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, help="seconds (circle and random presets)")
    p.add_argument("--gyro-noise", type=float, default=1.4e-2)
    p.add_argument("--accel-noise", type=float, default=3e-2)
    p.add_argument("--gyro-bias", type=_vec3, default=(0.0, 0.0, 0.0), metavar="X,Y,Z", help="rad/s")
    p.add_argument("--accel-bias", type=_vec3, default=(0.0, 0.0, 0.0), metavar="X,Y,Z", help="m/s^2")
    p.add_argument("--mount-deg", type=_vec3, default=(0.0, 0.0, 0.0), metavar="X,Y,Z", help="IMU mounting roll,pitch,yaw in degrees")
    p.add_argument("--lever-arm", type=_vec3, default=(0.0, 0.0, 0.0), metavar="X,Y,Z", help="m")
    p.add_argument("--slip-gain", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export-cov", help="per-step adapter covariance as CSV")
    p.add_argument("sequence", type=Path)
    p.add_argument("--weights", type=Path)
    p.add_argument("--out", type=Path, required=True)
    _add_filter_flags(p)
    p.set_defaults(func=cmd_export_cov)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"inertial-dr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"inertial-dr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (data.DataError, WeightsError, ConfigError, train.TrainingError, OSError) as exc:
        print(f"inertial-dr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
