"""Synthetic stereo-scene generator for desk-scale training.

Builds a mini road scene (ground plane, one or two textured walls, scattered
objects) directly on frame 1's pixel rays, so backprojection recovers the
scene points exactly. Frame 2 renders the same 3D points under a sampled
camera motion with the same rasterization rule the warp operator uses, which
makes warped frame-1 geometry agree with frame 2 bit-for-bit at co-visible
pixels. Every emitted pixel satisfies the range and above-ground filters.

The generator is deterministic per seed (xorshift PRNG throughout).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSceneError, FormatError
from .formats import (KIND_DEPTH, load_calib, load_dmap, save_calib,
                      save_dmap, save_image, load_image)
from .geometry import (CameraIntrinsics, DepthMap, PointMap, Pose, backproject,
                       filter_points, project_points)
from .rng import XorShift64Star


@dataclass
class SynthPair:
    """One training sample: two rendered frames plus the ground-truth pose.

    gt_pose maps frame-1 coordinates into frame-2 coordinates (the quantity
    the network regresses). cam_motion is the sampled camera displacement,
    i.e. gt_pose.inverse().
    """

    intr: CameraIntrinsics
    depth1: DepthMap
    depth2: DepthMap
    img1: np.ndarray
    img2: np.ndarray
    gt_pose: Pose
    cam_motion: Pose
    pm1: PointMap
    pm2: PointMap


def _sample_motion(rng: XorShift64Star, rot_max_deg: float, trans_max_m: float) -> Pose:
    """Uniform rotation angle about a random axis, translation in a ball."""
    while True:
        axis = rng.uniform(-1.0, 1.0, 3)
        n = np.linalg.norm(axis)
        if 1e-3 < n <= 1.0:
            axis /= n
            break
    angle = rng.uniform(0.0, rot_max_deg)
    while True:
        t = rng.uniform(-trans_max_m, trans_max_m, 3)
        if np.linalg.norm(t) <= trans_max_m:
            break
    return Pose.from_axis_angle(axis, angle, t)


def _texture(points: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """View-invariant procedural intensity attached to 3D positions."""
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    ax, bx, ay, by, az, bz = coef
    t = 0.5 + 0.25 * np.sin(ax * x + bx) * np.cos(ay * y + by) \
        + 0.22 * np.sin(az * z + bz)
    return np.clip(t, 0.02, 0.98)


def _build_frame1(rng: XorShift64Star, intr: CameraIntrinsics, size,
                  n_scatter: int, max_range: float, above_ground: float):
    """Per-pixel depth of ground + walls + scatter, nearest surface wins."""
    H, W = size
    v = np.arange(H, dtype=np.float64)
    depth = np.full((H, W), np.inf)

    # ground plane y = +cam_height, visible below the horizon within range
    dv = v - intr.c_v
    with np.errstate(divide="ignore"):
        zg = np.where(dv > 0, intr.cam_height * intr.f_v / np.where(dv > 0, dv, 1.0),
                      np.inf)
    ground_rows = zg <= 0.95 * max_range
    depth[ground_rows, :] = zg[ground_rows, None]

    # a full-width back wall plus zero to two nearer segments
    y_top = intr.cam_height - above_ground + 0.05
    for k in range(1 + rng.randint(3)):
        z_w = rng.uniform(9.0, 14.0) if k == 0 else rng.uniform(5.0, 9.0)
        if k == 0:
            u0, u1 = 0, W - 1
        else:
            u0 = rng.randint(max(1, W // 2))
            u1 = u0 + W // 4 + rng.randint(max(1, W - W // 4 - u0))
        v_lo = max(0, int(np.ceil(intr.c_v + y_top * intr.f_v / z_w)))
        v_hi = min(H - 1, int(np.floor(intr.c_v + intr.cam_height * intr.f_v / z_w)))
        if v_hi >= v_lo:
            band = depth[v_lo:v_hi + 1, u0:u1 + 1]
            np.minimum(band, z_w, out=band)

    # scattered objects in front of the existing surfaces
    v_min = max(0, int(intr.c_v) - 2)
    for _ in range(n_scatter):
        pu = rng.randint(W)
        pv = v_min + rng.randint(H - v_min)
        z_hi = min(26.0, depth[pv, pu] - 0.2)
        if pv < intr.c_v:
            z_hi = min(z_hi, y_top * intr.f_v / (pv - intr.c_v) - 0.05)
        if z_hi <= 2.5:
            continue
        depth[pv, pu] = rng.uniform(2.5, z_hi)

    valid = np.isfinite(depth)
    return np.where(valid, depth, 0.0), valid


def synth_scene_generate(seed: int, n_points: int, pose_range, intr: CameraIntrinsics,
                         size=(32, 96), max_range: float = 30.0,
                         above_ground: float = 2.0, camera_motion: Pose | None = None,
                         wall_z: float | None = None) -> SynthPair:
    """Generate one co-visible frame pair with exact geometric ground truth.

    pose_range = (rot_max_deg, trans_max_m) bounds the sampled camera motion;
    camera_motion overrides sampling (e.g. a pure forward step (0,0,+1) moves
    the camera toward the scene, so frame-2 depths shrink). Resamples up to
    100 times if frame 2 ends up empty.
    """
    rng = XorShift64Star(seed)
    rot_max, trans_max = pose_range
    H, W = size

    for _ in range(100):
        coef = np.array([rng.uniform(1.2, 3.2), rng.uniform(0, 6.28),
                         rng.uniform(1.2, 3.2), rng.uniform(0, 6.28),
                         rng.uniform(0.8, 2.2), rng.uniform(0, 6.28)])
        if wall_z is None:
            z1, valid1 = _build_frame1(rng, intr, size, n_points, max_range,
                                       above_ground)
        else:
            # forced frontal plane, used by analytic tests
            z1 = np.full((H, W), float(wall_z))
            y = (np.arange(H)[:, None] - intr.c_v) * z1 / intr.f_v
            valid1 = np.broadcast_to(
                (y >= intr.cam_height - above_ground) & (z1 <= max_range),
                (H, W)).copy()
            z1 = np.where(valid1, z1, 0.0)
        motion = camera_motion if camera_motion is not None \
            else _sample_motion(rng, rot_max, trans_max)
        gt_pose = motion.inverse()

        # emit only points that pass the filters in BOTH frames, so the
        # warped frame-1 geometry and the frame-2 render are identical point
        # sets and agree exactly at co-visible pixels
        pm_all = backproject(DepthMap(z1, valid1), intr)
        pall = pm_all.points.reshape(-1, 3)
        p2all = gt_pose.transform(pall)
        keep = valid1.reshape(-1) & (p2all[:, 2] > 0) \
            & (p2all[:, 2] <= max_range) \
            & (p2all[:, 1] >= intr.cam_height - above_ground)
        valid1 = keep.reshape(H, W)
        z1 = np.where(valid1, z1, 0.0)
        if not valid1.any():
            if camera_motion is not None:
                raise DegenerateSceneError("forced camera motion leaves no "
                                           "co-visible points")
            continue

        depth1 = DepthMap(z1, valid1)
        pm1 = backproject(depth1, intr)
        pts1 = pm1.points.reshape(-1, 3)[valid1.reshape(-1)]
        tex1 = _texture(pts1, coef)
        img1 = np.zeros((H, W, 1))
        img1.reshape(-1)[valid1.reshape(-1)] = tex1

        # frame 2: the same physical points under the relative pose
        pts2 = gt_pose.transform(pts1)
        u, vv, _ = project_points(pts2, intr, (H, W))
        px = np.floor(u + 0.5).astype(np.int64)
        py = np.floor(vv + 0.5).astype(np.int64)
        ok = (pts2[:, 2] > 0) & (px >= 0) & (px < W) & (py >= 0) & (py < H)
        src = np.nonzero(ok)[0]
        if src.size == 0:
            if camera_motion is not None:
                raise DegenerateSceneError("forced camera motion leaves frame 2 empty")
            continue
        flat = py[src] * W + px[src]
        order = np.lexsort((src, pts2[src, 2], flat))
        fs = flat[order]
        first = np.ones(fs.size, dtype=bool)
        first[1:] = fs[1:] != fs[:-1]
        win_pix, win_src = fs[first], src[order][first]

        z2 = np.zeros(H * W)
        valid2 = np.zeros(H * W, dtype=bool)
        img2 = np.zeros(H * W)
        z2[win_pix] = pts2[win_src, 2]
        valid2[win_pix] = True
        img2[win_pix] = tex1[win_src]
        depth2 = DepthMap(z2.reshape(H, W), valid2.reshape(H, W))

        pm1f = filter_points(pm1, intr, max_range=max_range, above_ground=above_ground)
        pm2f = filter_points(backproject(depth2, intr), intr,
                             max_range=max_range, above_ground=above_ground)
        return SynthPair(intr, depth1, depth2, img1, img2.reshape(H, W, 1),
                         gt_pose, motion, pm1f, pm2f)

    raise DegenerateSceneError("no co-visible scene after 100 attempts")


def make_intrinsics(cfg_synth: dict) -> CameraIntrinsics:
    return CameraIntrinsics(cfg_synth["f_u"], cfg_synth["f_v"], cfg_synth["c_u"],
                            cfg_synth["c_v"], cfg_synth["baseline"],
                            cfg_synth["cam_height"])


def generate_pairs(cfg: dict, n_pairs: int, seed: int) -> list[SynthPair]:
    """n_pairs independent scenes with seeds derived from `seed`."""
    sc = cfg["synth"]
    intr = make_intrinsics(sc)
    filt = cfg["filters"]
    return [synth_scene_generate(
        seed * 100003 + i, sc["n_scatter"],
        (sc["rot_max_deg"], sc["trans_max_m"]), intr,
        size=(sc["height"], sc["width"]), max_range=filt["max_range"],
        above_ground=filt["above_ground"]) for i in range(n_pairs)]


# ---------------------------------------------------------------------------
# on-disk pair layout: <root>/pair_NNNN/{depth1,depth2}.dmap,
# {image1,image2}.pgm, calib.txt, gt_pose.txt (12 numbers, row-major [R|t])

def save_pair(dirpath, pair: SynthPair):
    os.makedirs(dirpath, exist_ok=True)
    save_dmap(os.path.join(dirpath, "depth1.dmap"), pair.depth1.data, KIND_DEPTH,
              pair.depth1.valid)
    save_dmap(os.path.join(dirpath, "depth2.dmap"), pair.depth2.data, KIND_DEPTH,
              pair.depth2.valid)
    save_image(os.path.join(dirpath, "image1.pgm"), pair.img1)
    save_image(os.path.join(dirpath, "image2.pgm"), pair.img2)
    save_calib(os.path.join(dirpath, "calib.txt"), pair.intr)
    T = pair.gt_pose.matrix()[:3, :]
    with open(os.path.join(dirpath, "gt_pose.txt"), "w", encoding="utf-8") as fh:
        fh.write(" ".join(f"{v:.17g}" for v in T.reshape(-1)) + "\n")


def load_pair(dirpath, cfg: dict) -> SynthPair:
    intr = load_calib(os.path.join(dirpath, "calib.txt"))
    filt = cfg["filters"]

    def depth_of(name):
        kind, data, valid = load_dmap(os.path.join(dirpath, name))
        if kind != KIND_DEPTH:
            raise FormatError(f"{dirpath}/{name}: expected a depth map")
        return DepthMap(data.astype(np.float64), valid & (data > 0))

    d1, d2 = depth_of("depth1.dmap"), depth_of("depth2.dmap")
    img1 = load_image(os.path.join(dirpath, "image1.pgm"))
    img2 = load_image(os.path.join(dirpath, "image2.pgm"))
    with open(os.path.join(dirpath, "gt_pose.txt"), "r", encoding="utf-8") as fh:
        vals = [float(t) for t in fh.read().split()]
    if len(vals) != 12:
        raise FormatError(f"{dirpath}/gt_pose.txt: want 12 values, got {len(vals)}")
    T = np.array(vals).reshape(3, 4)
    gt = Pose.from_rotation(T[:, :3], T[:, 3])
    pm1 = filter_points(backproject(d1, intr), intr, max_range=filt["max_range"],
                        above_ground=filt["above_ground"],
                        euclidean=filt["euclidean_range"])
    pm2 = filter_points(backproject(d2, intr), intr, max_range=filt["max_range"],
                        above_ground=filt["above_ground"],
                        euclidean=filt["euclidean_range"])
    return SynthPair(intr, d1, d2, img1, img2, gt, gt.inverse(), pm1, pm2)


def load_pairs(root, cfg: dict) -> list[SynthPair]:
    dirs = sorted(d for d in os.listdir(root) if d.startswith("pair_"))
    if not dirs:
        raise FormatError(f"{root}: no pair_* directories found")
    return [load_pair(os.path.join(root, d), cfg) for d in dirs]
