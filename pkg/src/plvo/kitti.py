"""KITTI odometry trajectory I/O and the subsequence error metric.

Errors follow the benchmark convention: for window lengths 100..800 m and
start frames every 10 frames, compare the relative pose over each window;
translation error in percent of window length, rotation error in degrees per
meter. The metric is built from relative poses, so it is invariant to a
global rigid transform applied to both trajectories.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)
STEP_FRAMES = 10

ERRORS_HEADER = "length_m,t_rel_percent,r_rel_deg_per_m"
SUMMARY_HEADER = "mean_t_rel_percent,mean_r_rel_deg_per_m"
TRAJECTORY_HEADER = "frame,gt_x,gt_z,est_x,est_z"


@dataclass
class Trajectory:
    """Ordered absolute camera poses as 3x4 [R|t] matrices."""

    poses: list

    def __post_init__(self):
        checked = []
        for i, P in enumerate(self.poses):
            P = np.asarray(P, dtype=np.float64)
            if P.shape != (3, 4):
                raise FormatError(f"pose {i}: expected 3x4 matrix, got {P.shape}")
            R = P[:, :3]
            if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
                raise FormatError(f"pose {i}: rotation not orthonormal within 1e-6")
            checked.append(P)
        self.poses = checked

    @property
    def frame_count(self) -> int:
        return len(self.poses)

    def homogeneous(self) -> np.ndarray:
        out = np.tile(np.eye(4), (len(self.poses), 1, 1))
        for i, P in enumerate(self.poses):
            out[i, :3, :] = P
        return out


def load_poses(path) -> Trajectory:
    """Parse a KITTI pose file: 12 whitespace-separated numbers per line."""
    poses = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            tokens = line.split()
            if len(tokens) != 12:
                raise FormatError(
                    f"{path}:{lineno}: expected 12 values per pose line, "
                    f"got {len(tokens)}")
            try:
                vals = [float(t) for t in tokens]
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            poses.append(np.array(vals).reshape(3, 4))
    return Trajectory(poses)


def save_poses(traj: Trajectory, path):
    """Write poses at 17 significant digits (lossless float64 round trip)."""
    with open(path, "w", encoding="utf-8") as fh:
        for P in traj.poses:
            fh.write(" ".join(f"{v:.17g}" for v in P.reshape(-1)) + "\n")


@dataclass
class EvalResult:
    """Per-length averaged errors plus context for report emission."""

    rows: list                      # (length_m, t_rel_percent, r_rel_deg_per_m)
    mean_t_rel: float
    mean_r_rel: float
    gt: Trajectory | None = None
    est: Trajectory | None = None
    warnings: list = field(default_factory=list)


def _path_distances(T: np.ndarray) -> np.ndarray:
    steps = np.linalg.norm(np.diff(T[:, :3, 3], axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _rotation_angle(R: np.ndarray) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(min(1.0, max(-1.0, c))))


def evaluate_sequence(gt: Trajectory, est: Trajectory,
                      lengths=LENGTHS, step: int = STEP_FRAMES) -> EvalResult:
    """Average subsequence errors per window length.

    For each start frame (every `step` frames) and each length l, the window
    ends at the first frame whose ground-truth path distance from the start
    is >= l. The error pose is rel_gt^-1 @ rel_est.
    """
    if gt.frame_count != est.frame_count:
        raise FormatError(f"trajectory lengths differ: "
                          f"{gt.frame_count} vs {est.frame_count}")
    Tg = gt.homogeneous()
    Te = est.homogeneous()
    dist = _path_distances(Tg)

    per_length: dict[float, list] = {l: [] for l in lengths}
    for start in range(0, gt.frame_count, step):
        for l in lengths:
            target = dist[start] + l
            end = int(np.searchsorted(dist, target, side="left"))
            if end >= gt.frame_count:
                continue
            rel_gt = np.linalg.inv(Tg[start]) @ Tg[end]
            rel_est = np.linalg.inv(Te[start]) @ Te[end]
            err = np.linalg.inv(rel_gt) @ rel_est
            t_err = float(np.linalg.norm(err[:3, 3]))
            r_err = _rotation_angle(err[:3, :3])
            per_length[l].append((t_err / l * 100.0, np.degrees(r_err) / l))

    rows = [(l, float(np.mean([e[0] for e in per_length[l]])),
             float(np.mean([e[1] for e in per_length[l]])))
            for l in lengths if per_length[l]]
    warnings = []
    if not rows:
        warnings.append(
            f"trajectory too short: ground-truth path covers "
            f"{dist[-1]:.1f} m, below the smallest window length {min(lengths)} m")
        return EvalResult([], float("nan"), float("nan"), gt, est, warnings)
    mean_t = float(np.mean([r[1] for r in rows]))
    mean_r = float(np.mean([r[2] for r in rows]))
    return EvalResult(rows, mean_t, mean_r, gt, est, warnings)


def emit_report(result: EvalResult, out_dir):
    """Write errors.csv, summary.csv, trajectory_xy.csv and report.svg.

    The SVG (matplotlib) holds two panels: error vs window length and the
    top-down (x, z) trajectory overlay. Returns the list of written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []

    p = os.path.join(out_dir, "errors.csv")
    with open(p, "w", encoding="utf-8") as fh:
        fh.write(ERRORS_HEADER + "\n")
        for l, t, r in result.rows:
            fh.write(f"{l:.10g},{t:.10g},{r:.10g}\n")
    written.append(p)

    p = os.path.join(out_dir, "summary.csv")
    with open(p, "w", encoding="utf-8") as fh:
        fh.write(SUMMARY_HEADER + "\n")
        fh.write(f"{result.mean_t_rel:.10g},{result.mean_r_rel:.10g}\n")
    written.append(p)

    p = os.path.join(out_dir, "trajectory_xy.csv")
    with open(p, "w", encoding="utf-8") as fh:
        fh.write(TRAJECTORY_HEADER + "\n")
        if result.gt is not None and result.est is not None:
            for i, (Pg, Pe) in enumerate(zip(result.gt.poses, result.est.poses)):
                fh.write(f"{i},{Pg[0, 3]:.10g},{Pg[2, 3]:.10g},"
                         f"{Pe[0, 3]:.10g},{Pe[2, 3]:.10g}\n")
    written.append(p)

    if result.warnings:
        p = os.path.join(out_dir, "warnings.txt")
        with open(p, "w", encoding="utf-8") as fh:
            fh.write("\n".join(result.warnings) + "\n")
        written.append(p)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    if result.rows:
        ls = [r[0] for r in result.rows]
        ax1.plot(ls, [r[1] for r in result.rows], "o-", label="translation [%]")
        ax1.plot(ls, [r[2] * 100 for r in result.rows], "s--",
                 label="rotation [deg/m] x100")
    ax1.set_xlabel("window length [m]")
    ax1.set_ylabel("error")
    ax1.set_title("error vs subsequence length")
    ax1.legend(loc="best", fontsize=8)
    if result.gt is not None and result.est is not None:
        g = np.array([[P[0, 3], P[2, 3]] for P in result.gt.poses])
        e = np.array([[P[0, 3], P[2, 3]] for P in result.est.poses])
        ax2.plot(g[:, 0], g[:, 1], "-", label="ground truth")
        ax2.plot(e[:, 0], e[:, 1], "--", label="estimate")
        ax2.legend(loc="best", fontsize=8)
    ax2.set_xlabel("x [m]")
    ax2.set_ylabel("z [m]")
    ax2.set_title("trajectory (top view)")
    ax2.set_aspect("equal", adjustable="datalim")
    fig.tight_layout()
    p = os.path.join(out_dir, "report.svg")
    fig.savefig(p, format="svg")
    plt.close(fig)
    written.append(p)
    return written
