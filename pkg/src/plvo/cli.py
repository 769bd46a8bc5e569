"""plvo command line: backproject, synth, train, infer, eval, bench-grouping.

Exit codes: 0 success, 1 usage error, 2 data/processing error. Diagnostics go
to stderr; results go to the files named by --out.
"""

from __future__ import annotations

import argparse
import difflib
import os
import sys

import numpy as np

from . import __version__
from .config import describe_defaults, load_config
from .errors import PlvoError, UsageError
from .formats import (KIND_DEPTH, load_calib, load_checkpoint, load_depth,
                      load_image, save_checkpoint, save_dmap3)
from .geometry import Pose, backproject, filter_points

_KNOWN_FLAGS: set[str] = set()


class _Parser(argparse.ArgumentParser):
    """argparse that raises UsageError (exit code 1) instead of exiting 2."""

    def error(self, message):
        suggestion = ""
        for token in message.replace(",", " ").split():
            if token.startswith("--"):
                close = difflib.get_close_matches(token, sorted(_KNOWN_FLAGS), n=1)
                if close:
                    suggestion = f" (did you mean {close[0]}?)"
                break
        raise UsageError(f"{self.prog}: {message}{suggestion}")


def _collect_flags(parser):
    for action in parser._actions:
        _KNOWN_FLAGS.update(s for s in action.option_strings)
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                _collect_flags(sub)


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="plvo",
        description="pseudo-LiDAR visual odometry pipeline",
        epilog=describe_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"plvo {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults otherwise)")
        p.add_argument("--set", action="append", dest="overrides", metavar="KEY=VAL",
                       help="override a config key, e.g. --set train.epochs=20")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--threads", type=int,
                       help="worker thread cap (fallback: PLVO_THREADS env)")

    p = sub.add_parser("backproject", help="depth/disparity map -> .dmap3 point map")
    p.add_argument("--depth", required=True, help=".dmap input (depth or disparity)")
    p.add_argument("--calib", required=True, help="calibration text file")
    p.add_argument("--out", required=True, help="output .dmap3 path")
    p.add_argument("--filter", action="store_true",
                   help="apply the range/above-ground filters")
    common(p)

    p = sub.add_parser("synth", help="generate synthetic training pairs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pairs", type=int, default=None,
                   help="number of pairs (default: synth.n_pairs)")
    common(p)

    p = sub.add_parser("train", help="train the odometry network")
    p.add_argument("--data", required=True,
                   help="directory of pair_* folders, or 'synth'")
    p.add_argument("--out", required=True, help="output checkpoint (.plvw)")
    p.add_argument("--log", help="training log CSV path")
    p.add_argument("--val-pairs", type=int, default=0,
                   help="held-out synthetic pairs for validation")
    common(p)

    p = sub.add_parser("infer", help="estimate a trajectory from frame pairs")
    p.add_argument("--calib", required=True)
    p.add_argument("--frames", required=True,
                   help="text file: one '<depth.dmap> [image]' line per frame")
    p.add_argument("--weights", required=True, help="checkpoint from train")
    p.add_argument("--out", required=True, help="KITTI pose file to write")
    common(p)

    p = sub.add_parser("eval", help="KITTI-style subsequence error evaluation")
    p.add_argument("--gt", required=True, help="ground-truth pose file")
    p.add_argument("--est", required=True, help="estimated pose file")
    p.add_argument("--out", required=True, help="report directory")
    common(p)

    p = sub.add_parser("bench-grouping",
                       help="window vs brute-force grouping benchmark")
    p.add_argument("--size", action="append", metavar="HxW",
                   help="point-map size, repeatable (default 32x104 64x208 128x416)")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--kernel", default="9x9", metavar="KHxKW")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--repeats", type=int, default=3)
    common(p)

    _collect_flags(parser)
    return parser


def _resolve_cfg(args):
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
    threads = args.threads
    if threads is None:
        env = os.environ.get("PLVO_THREADS")
        threads = int(env) if env else None
    if threads is not None:
        cfg["threads"] = max(1, threads)
    return cfg


def _parse_size(text):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise UsageError(f"bad size {text!r}, want HxW like 64x208") from None


# ---------------------------------------------------------------------------
# subcommands

def _cmd_backproject(args, cfg):
    intr = load_calib(args.calib)
    depth = load_depth(args.depth, intr, eps=cfg["disparity_eps"])
    pm = backproject(depth, intr)
    if args.filter:
        f = cfg["filters"]
        pm = filter_points(pm, intr, max_range=f["max_range"],
                           above_ground=f["above_ground"],
                           euclidean=f["euclidean_range"])
    save_dmap3(args.out, pm)
    print(f"wrote {args.out}: {pm.height}x{pm.width}, "
          f"{int(pm.valid.sum())} valid points", file=sys.stderr)
    return 0


def _cmd_synth(args, cfg):
    from .synth import generate_pairs, save_pair
    n = args.pairs if args.pairs is not None else cfg["synth"]["n_pairs"]
    pairs = generate_pairs(cfg, n, cfg["seed"])
    os.makedirs(args.out, exist_ok=True)
    for i, pair in enumerate(pairs):
        save_pair(os.path.join(args.out, f"pair_{i:04d}"), pair)
    print(f"wrote {n} pairs to {args.out}", file=sys.stderr)
    return 0


def _cmd_train(args, cfg):
    from .synth import generate_pairs, load_pairs
    from .train import train_model, write_train_log
    if args.data == "synth":
        pairs = generate_pairs(cfg, cfg["synth"]["n_pairs"], cfg["seed"])
    else:
        pairs = load_pairs(args.data, cfg)
    val = generate_pairs(cfg, args.val_pairs, cfg["seed"] + 1) \
        if args.val_pairs else None
    log_rows = []

    def progress(row):
        msg = f"epoch {row['epoch']:4d}  lr {row['lr']:.2e}  loss {row['loss']:.4f}"
        if row["val_t_err"] != "":
            msg += f"  val_t {row['val_t_err']:.4f} m  val_r {row['val_r_err']:.4f} deg"
        print(msg, file=sys.stderr)

    params, _ = train_model(cfg, pairs, val_pairs=val, log_rows=log_rows,
                            progress=progress)
    save_checkpoint(args.out, params)
    if args.log:
        write_train_log(args.log, log_rows, len(cfg["train"]["level_weights"]))
    print(f"wrote checkpoint {args.out}", file=sys.stderr)
    return 0


def _load_frames_list(path):
    frames = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (1, 2):
                raise PlvoError(f"{path}:{lineno}: want '<depth.dmap> [image]'")
            frames.append(tuple(os.path.join(base, p) for p in parts))
    if len(frames) < 2:
        raise PlvoError(f"{path}: need at least two frames")
    return frames


def _cmd_infer(args, cfg):
    from .autodiff import Tensor
    from .kitti import Trajectory, save_poses
    from .posenet import full_forward
    intr = load_calib(args.calib)
    weights = {k: Tensor(v) for k, v in load_checkpoint(args.weights).items()}
    frames = _load_frames_list(args.frames)
    f = cfg["filters"]

    def load_frame(entry):
        depth = load_depth(entry[0], intr, eps=cfg["disparity_eps"])
        pm = filter_points(backproject(depth, intr), intr,
                           max_range=f["max_range"],
                           above_ground=f["above_ground"],
                           euclidean=f["euclidean_range"])
        img = load_image(entry[1]) if len(entry) > 1 else None
        return pm, img

    absolute = [np.eye(4)]
    prev = load_frame(frames[0])
    for k in range(1, len(frames)):
        cur = load_frame(frames[k])
        pyr = full_forward(prev[1], cur[1], prev[0], cur[0], weights, cfg, intr)
        rel = pyr.pose(min(pyr.qs))  # finest level, frame-(k-1) -> frame-k map
        absolute.append(absolute[-1] @ rel.inverse().matrix())
        prev = cur
        print(f"frame {k}/{len(frames) - 1}", file=sys.stderr)
    save_poses(Trajectory([T[:3, :] for T in absolute]), args.out)
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def _cmd_eval(args, cfg):
    from .kitti import emit_report, evaluate_sequence, load_poses
    gt = load_poses(args.gt)
    est = load_poses(args.est)
    result = evaluate_sequence(gt, est)
    written = emit_report(result, args.out)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print("\n".join(written), file=sys.stderr)
    if result.rows:
        print(f"mean t_rel {result.mean_t_rel:.4f} %  "
              f"mean r_rel {result.mean_r_rel:.6f} deg/m", file=sys.stderr)
    return 0


def _cmd_bench(args, cfg):
    from .bench import BENCH_SIZES, run_grouping_bench, write_bench_report
    sizes = tuple(_parse_size(s) for s in args.size) if args.size else BENCH_SIZES
    kernel = _parse_size(args.kernel)
    rows, exp_w, exp_b = run_grouping_bench(sizes=sizes, K=args.k, kernel=kernel,
                                            seed=cfg["seed"], repeats=args.repeats)
    written = write_bench_report(args.out, rows, exp_w, exp_b)
    print("\n".join(written), file=sys.stderr)
    print(f"window exponent {exp_w:.3f}, brute-force exponent {exp_b:.3f}",
          file=sys.stderr)
    if not all(r[5] for r in rows):
        raise PlvoError("neighbor sets differ between window and brute-force paths")
    return 0


_COMMANDS = {
    "backproject": _cmd_backproject,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "bench-grouping": _cmd_bench,
}


def dispatch(argv) -> int:
    """Run one CLI invocation; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        cfg = _resolve_cfg(args)
        return _COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except PlvoError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> int:
    return dispatch(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
