"""Command line driver: simulate datasets, run odometry, evaluate, sweep.

    ceilvo sim   --out DIR [--path square|multi-loop] [--scene flat|ridge] [--fps 30] [--size 848x480] [--seed 0]
    ceilvo run   DATASET --out DIR [--size ...] [--fps N] [--window N]
    ceilvo eval  GROUNDTRUTH ESTIMATE [--tau S] [--bins M] [--runlog FILE] [--plot] [--out DIR]
    ceilvo sweep DATASET --out DIR [--size ...] [--fps ...] [--window ...]

Exit codes: 0 ok, 2 usage, 3 data error, 4 numerical failure.
"""
import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dataset as ds
from . import evaluation as ev
from . import simulator as sim
from ._kernels import downsample2
from .backend import BackendError, MAX_WINDOW
from .frontend import FrontendConfig
from .geometry import GeometryError
from .odometry import DirectOdometry, OdometryConfig
from .photometry import CalibrationError, PhotometricCalibration, build_frame, correct_frame

log = logging.getLogger("ceilvo")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SIZES = {"848x480": (848, 480), "424x240": (424, 240)}
GRID_SIZES = ("848x480", "424x240")
GRID_FPS = (3.0, 6.0, 15.0, 30.0)
GRID_WINDOWS = (5, 7, 15)


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


@dataclass
class RunConfig:
    size: str = "848x480"
    fps: float = 30.0
    window: int = MAX_WINDOW
    gamma: float = 9.0
    c: float = 50.0
    pyramid_levels: int = None
    kf_flow_fraction: float = 0.02
    kf_delta_a: float = 0.2
    kf_residual_factor: float = 2.0
    seed: int = 0

    def validate(self):
        if self.size not in SIZES:
            raise UsageError(f"--size must be one of {', '.join(SIZES)}")
        for name in ("fps", "window", "gamma", "c", "kf_flow_fraction", "kf_delta_a", "kf_residual_factor"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise UsageError(f"{name} must be positive, got {v}")
        if self.window < 2:
            raise UsageError("window must hold at least two keyframes")
        if self.pyramid_levels is not None and self.pyramid_levels < 1:
            raise UsageError("pyramid_levels must be positive")
        return self

    def odometry_config(self):
        fc = FrontendConfig(gamma=self.gamma, c=self.c, kf_flow_fraction=self.kf_flow_fraction,
                            kf_delta_a=self.kf_delta_a, kf_residual_factor=self.kf_residual_factor)
        return OdometryConfig(frontend=fc, window=int(self.window), gamma=self.gamma, c=self.c)


@dataclass
class RunLog:
    config: dict
    frames: list = field(default_factory=list)
    trajectory: object = None
    warnings: int = 0

    @property
    def n_keyframes(self):
        return sum(1 for f in self.frames if f["keyframe"])

    @property
    def kf_ratio(self):
        return ev.keyframe_ratio(self.frames)

    @property
    def t_frame_ms(self):
        return float(np.mean([f["ms"] for f in self.frames])) if self.frames else float("nan")

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps({"type": "config", **self.config}, sort_keys=True) + "\n")
            for f in self.frames:
                fh.write(json.dumps({"type": "frame", **f}, sort_keys=True) + "\n")
            summary = {"type": "summary", "frames": len(self.frames), "keyframes": self.n_keyframes,
                       "kf_ratio": self.kf_ratio if self.frames else None,
                       "t_frame_ms": self.t_frame_ms, "warnings": self.warnings}
            fh.write(json.dumps(summary, sort_keys=True) + "\n")


def read_runlog(path):
    frames, summary = [], {}
    try:
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                if rec.get("type") == "frame":
                    frames.append(rec)
                elif rec.get("type") == "summary":
                    summary = rec
    except (OSError, ValueError) as exc:
        raise ds.DatasetError(f"unreadable run log {path}: {exc}") from exc
    return frames, summary


# -------------------------------------------------------------- pipeline

def decimate(times, fps):
    """Indices of the source frames nearest to a ``1/fps`` grid starting at the first timestamp.

    A source frame is used at most once; requesting more than the source rate
    returns every frame.
    """
    times = np.asarray(times, dtype=np.float64)
    if len(times) == 0:
        return np.zeros(0, dtype=int)
    src_period = float(np.median(np.diff(times))) if len(times) > 1 else 1.0 / fps
    period = 1.0 / fps
    if period <= src_period * (1 + 1e-9):
        return np.arange(len(times))
    grid = times[0] + period * np.arange(int(math.floor((times[-1] - times[0]) / period + 1e-9)) + 1)
    idx = np.searchsorted(times, grid)
    idx = np.clip(idx, 1, len(times) - 1)
    left = times[idx - 1]
    right = times[idx]
    pick = np.where(np.abs(grid - left) <= np.abs(right - grid), idx - 1, idx)
    keep = np.abs(times[pick] - grid) < 0.5 * src_period + 1e-12
    return np.unique(pick[keep])


def _scaled_intrinsics(K, size):
    w, h = size
    if (K.width, K.height) == (w, h):
        return K, 0
    if (K.width // 2, K.height // 2) == (w, h):
        return K.at_level(1), 1
    raise ds.DatasetError(f"dataset is {K.width}x{K.height}; cannot produce {w}x{h}")


def run_dataset(data, cfg, progress=None):
    """Run the odometry over a dataset and return a :class:`RunLog`."""
    cfg.validate()
    K, halvings = _scaled_intrinsics(data.K, SIZES[cfg.size])
    sel = decimate(data.times, cfg.fps)
    vo = DirectOdometry(K, cfg.odometry_config())
    rl = RunLog(config=asdict(cfg))
    for n, k in enumerate(sel):
        raw = data.image(k)
        t0 = time.perf_counter()
        if halvings:
            # correct at the native resolution, where the calibration lives
            img = (data.calibration or PhotometricCalibration()).correct(raw)
            for _ in range(halvings):
                img = downsample2(img)
            exposure = data.exposure(k)
            frame = build_frame(img, float(data.times[k]), 1.0 if exposure is None else exposure,
                                cfg.pyramid_levels, int(data.indices[k]))
        else:
            frame = correct_frame(raw, data.calibration, data.exposure(k), float(data.times[k]),
                                  cfg.pyramid_levels, int(data.indices[k]))
        rec = vo.process(frame)
        ms = (time.perf_counter() - t0) * 1000.0
        rl.frames.append({"index": int(data.indices[k]), "timestamp": float(data.times[k]),
                          "ms": ms, "keyframe": bool(rec.keyframe), "converged": bool(rec.converged),
                          "warning": rec.warning})
        if progress is not None:
            progress(n, len(sel))
    rl.warnings = vo.warnings
    if not sel.size:
        raise ds.DatasetError("dataset has no frames")
    times, poses = vo.trajectory()
    traj = ev.Trajectory.from_poses(times, poses)
    if not (np.all(np.isfinite(traj.positions)) and np.all(np.isfinite(traj.quats))):
        raise NumericalFailure("trajectory contains non-finite poses")
    rl.trajectory = traj
    return rl


def evaluate_files(gt, est, tau=None, planar=False, runlog=None, fps=None):
    t_f = kf = None
    if runlog is not None:
        frames, summary = runlog
        if frames:
            t_f = float(np.mean([f["ms"] for f in frames]))
            kf = ev.keyframe_ratio(frames)
            if fps is None and len(frames) > 1:
                fps = 1.0 / float(np.median(np.diff([f["timestamp"] for f in frames])))
    return ev.evaluate(gt, est, tau, planar, t_f, fps, kf)


def write_error_csv(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["distance_m", "epsilon_m"])
        for d, e in zip(report.series.distance, report.series.epsilon):
            w.writerow([f"{d:.9g}", f"{e:.9g}"])


STATS_FIELDS = ["n_pairs", "q1", "q2", "q3", "whisker_lo", "whisker_hi", "scale", "rotation_deg",
                "tx", "ty", "tz", "t_f_ms", "kf_ratio", "kappa"]


def stats_row(report):
    s, S = report.stats, report.similarity
    return {"n_pairs": report.n_pairs, "q1": s.q1, "q2": s.q2, "q3": s.q3,
            "whisker_lo": s.whisker_lo, "whisker_hi": s.whisker_hi, "scale": S.scale,
            "rotation_deg": ev.rotation_angle_deg(S.R), "tx": S.t[0], "ty": S.t[1], "tz": S.t[2],
            "t_f_ms": report.t_frame_ms, "kf_ratio": report.kf_ratio, "kappa": report.kappa}


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return f"{float(v):.12g}"


def write_stats_csv(path, report):
    row = stats_row(report)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATS_FIELDS)
        w.writerow([_fmt(row[k]) for k in STATS_FIELDS])


def write_plots(out, report, label="estimate"):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(report.series.distance, report.series.epsilon, lw=1, label=label)
    c, m, _ = ev.binned_errors(report.series)
    if len(c):
        ax.plot(c, m, "o-", ms=3, lw=1, label="binned median")
    ax.set_xlabel("traveled distance [m]")
    ax.set_ylabel("relative error [m]")
    ax.legend(loc="upper left")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(os.path.join(out, "error_curve.svg"), format="svg")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(3.5, 3.5))
    ax.boxplot([report.series.epsilon], whis=1.5, showfliers=True)
    ax.set_xticks([1])
    ax.set_xticklabels([label])
    ax.set_ylabel("relative error [m]")
    fig.tight_layout()
    fig.savefig(os.path.join(out, "error_box.svg"), format="svg")
    plt.close(fig)


# -------------------------------------------------------------- commands

def cmd_sim(args):
    if args.fps is None:
        args.fps = 30.0
    if not args.fps > 0:
        raise UsageError("--fps must be positive")
    spec = sim.MotionSpec(path=args.path, linear_speed=args.speed, duration=args.duration)
    try:
        spec.validate()
    except sim.SimulationError as exc:
        raise UsageError(str(exc)) from exc
    if args.scene == "flat":
        scene = sim.flat_scene(args.height, seed=args.seed)
    else:
        scene = sim.ridge_scene(seed=args.seed)
    sim.emit_dataset(scene, spec, args.fps, SIZES[args.size], args.out, seed=args.seed, noise_sigma=args.noise)
    print(f"wrote {args.out}")
    return EXIT_OK


def _run_config(args):
    return RunConfig(size=args.size, fps=float(args.fps or 30.0),
                     window=int(args.window or MAX_WINDOW), seed=args.seed)


def cmd_run(args):
    cfg = _run_config(args).validate()
    data = ds.open_dataset(args.dataset)
    rl = run_dataset(data, cfg)
    os.makedirs(args.out, exist_ok=True)
    ds.write_trajectory(os.path.join(args.out, "trajectory.txt"), rl.trajectory)
    rl.write(os.path.join(args.out, "runlog.jsonl"))
    print(f"{len(rl.frames)} frames, {rl.n_keyframes} keyframes, "
          f"t_F {rl.t_frame_ms:.1f} ms, warnings {rl.warnings}")
    return EXIT_OK


def cmd_eval(args):
    gt = ds.read_trajectory(args.groundtruth, "groundtruth")
    est = ds.read_trajectory(args.estimate, "estimate")
    runlog = read_runlog(args.runlog) if args.runlog else None
    rep = evaluate_files(gt, est, args.tau, args.planar, runlog, args.fps)
    series_bins = ev.binned_errors(rep.series, args.bins)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    write_error_csv(os.path.join(out, "errors.csv"), rep)
    write_stats_csv(os.path.join(out, "stats.csv"), rep)
    with open(os.path.join(out, "binned.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["distance_m", "median_epsilon_m", "count"])
        for c, m, n in zip(*series_bins):
            w.writerow([_fmt(c), _fmt(m), n])
    if args.plot:
        write_plots(out, rep)
    s = rep.stats
    print(f"pairs {rep.n_pairs}  median {s.q2:.4g} m  IQR [{s.q1:.4g}, {s.q3:.4g}]  scale {rep.similarity.scale:.6g}")
    return EXIT_OK


SUMMARY_FIELDS = ["size", "fps", "window", "median", "q1", "q3", "t_f_ms", "kf_ratio", "kappa", "status"]


def _sweep_cell(data, gt, size, fps, window, seed, tau, out, plot, timed=True):
    name = f"{size}_{fps:g}fps_w{window}"
    row = {"size": size, "fps": float(fps), "window": int(window)}
    try:
        cfg = RunConfig(size=size, fps=float(fps), window=int(window), seed=seed).validate()
        rl = run_dataset(data, cfg)
        sub = os.path.join(out, name)
        os.makedirs(sub, exist_ok=True)
        ds.write_trajectory(os.path.join(sub, "trajectory.txt"), rl.trajectory)
        rl.write(os.path.join(sub, "runlog.jsonl"))
        t_f = rl.t_frame_ms if timed else None
        rep = ev.evaluate(gt, rl.trajectory, tau, False, t_f, cfg.fps, rl.kf_ratio)
        write_stats_csv(os.path.join(sub, "stats.csv"), rep)
        if plot:
            write_plots(sub, rep, name)
        row.update(median=rep.stats.q2, q1=rep.stats.q1, q3=rep.stats.q3, t_f_ms=rep.t_frame_ms,
                   kf_ratio=rep.kf_ratio, kappa=rep.kappa, status="ok")
    except (UsageError, ds.DatasetError, ev.EvaluationError, BackendError, NumericalFailure,
            GeometryError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.warning("%s failed: %s", name, exc)
        row.update(median=float("nan"), q1=float("nan"), q3=float("nan"), t_f_ms=float("nan"),
                   kf_ratio=float("nan"), kappa=float("nan"),
                   status=f"failed: {type(exc).__name__}: {exc}".replace("\n", " "))
    return name, row


def cmd_sweep(args):
    sizes = args.size_list or list(GRID_SIZES)
    fpss = args.fps_list or list(GRID_FPS)
    windows = args.window_list or list(GRID_WINDOWS)
    for s in sizes:
        if s not in SIZES:
            raise UsageError(f"unknown size {s}")
    if args.parallel < 1:
        raise UsageError("--parallel must be at least 1")
    data = ds.open_dataset(args.dataset)
    gt = data.groundtruth()
    if gt is None:
        raise ds.DatasetError(f"{args.dataset} has no groundtruth.txt")
    os.makedirs(args.out, exist_ok=True)
    cells = [(size, fps, window) for size in sizes for fps in fpss for window in windows]
    # concurrent runs contend for the CPU, so their frame times are not reported
    timed = args.parallel <= 1
    common = (args.seed, args.tau, args.out, args.plot, timed)
    if timed:
        results = (_sweep_cell(data, gt, *c, *common) for c in cells)
    else:
        from concurrent.futures import ProcessPoolExecutor
        pool = ProcessPoolExecutor(args.parallel)
        futures = [pool.submit(_sweep_cell, data, gt, *c, *common) for c in cells]
        results = (f.result() for f in futures)
    rows = []
    for name, row in results:
        rows.append(row)
        print(f"{name}: {row['status']}" + (f" median {row['median']:.4g}" if row["status"] == "ok" else ""))
    if not timed:
        pool.shutdown()
    rows.sort(key=lambda r: (math.isnan(r["median"]), r["median"]))
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in SUMMARY_FIELDS])
    return EXIT_OK


# -------------------------------------------------------------- parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="ceilvo", description="Direct sparse odometry for upward-facing cameras.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", parser_class=_Parser)

    def common(sp, fps_default=None):
        sp.add_argument("--size", choices=list(SIZES), default="848x480")
        sp.add_argument("--fps", type=float, default=fps_default)
        sp.add_argument("--window", type=int, default=None)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=None)

    s = sub.add_parser("sim", help="render a synthetic dataset")
    common(s)
    s.add_argument("--path", choices=["square", "multi-loop"], default="square")
    s.add_argument("--scene", choices=["flat", "ridge"], default="flat")
    s.add_argument("--height", type=float, default=5.0)
    s.add_argument("--speed", type=float, default=1.0)
    s.add_argument("--duration", type=float, default=None)
    s.add_argument("--noise", type=float, default=1.0)

    r = sub.add_parser("run", help="run odometry on a dataset")
    r.add_argument("dataset")
    common(r)

    e = sub.add_parser("eval", help="evaluate an estimate against ground truth")
    e.add_argument("groundtruth")
    e.add_argument("estimate")
    e.add_argument("--tau", type=float, default=None)
    e.add_argument("--bins", type=float, default=0.5)
    e.add_argument("--runlog", default=None)
    e.add_argument("--fps", type=float, default=None)
    e.add_argument("--planar", action="store_true")
    e.add_argument("--plot", action="store_true")
    e.add_argument("--out", default=None)

    w = sub.add_parser("sweep", help="run the size x fps x window grid")
    w.add_argument("dataset")
    w.add_argument("--size", dest="size_list", nargs="+", default=None)
    w.add_argument("--fps", dest="fps_list", nargs="+", type=float, default=None)
    w.add_argument("--window", dest="window_list", nargs="+", type=int, default=None)
    w.add_argument("--tau", type=float, default=None)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--plot", action="store_true")
    w.add_argument("--parallel", type=int, default=1, metavar="N",
                   help="run N grid cells at once; frame times are then omitted")
    w.add_argument("--out", default=None)
    return p


COMMANDS = {"sim": cmd_sim, "run": cmd_run, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"ceilvo: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb is None:
        build_parser().print_usage(sys.stderr)
        return EXIT_USAGE
    if args.verb in ("sim", "run", "sweep") and not args.out:
        print(f"ceilvo {args.verb}: --out is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.verb](args)
    except UsageError as exc:
        print(f"ceilvo {args.verb}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ev.EmptyPairing as exc:
        print(f"ceilvo {args.verb}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ds.DatasetError, CalibrationError, ev.EvaluationError) as exc:
        print(f"ceilvo {args.verb}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, BackendError, GeometryError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"ceilvo {args.verb}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
