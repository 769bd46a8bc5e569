"""Pinhole camera geometry for organized pseudo-LiDAR point maps.

Coordinate conventions (standard computer vision camera frame):
  - +x right, +y down, +z forward (optical axis)
  - image u along width (columns), v along height (rows)
  - ground plane at y = +cam_height (camera y points down)

All functions are pure and operate on explicit validity masks; invalid pixels
store zeros, never NaNs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters plus the stereo baseline and rig height.

    f_u, f_v: focal lengths in pixels; c_u, c_v: principal point in pixels;
    baseline: stereo baseline in meters; cam_height: camera height above the
    ground plane in meters.
    """

    f_u: float
    f_v: float
    c_u: float
    c_v: float
    baseline: float
    cam_height: float = 1.7

    def __post_init__(self):
        if not (self.f_u > 0 and self.f_v > 0):
            raise ValueError(f"focal lengths must be positive, got ({self.f_u}, {self.f_v})")
        if not self.baseline > 0:
            raise ValueError(f"baseline must be positive, got {self.baseline}")
        if self.cam_height < 0:
            raise ValueError(f"cam_height must be >= 0, got {self.cam_height}")

    def scaled(self, stride: int) -> "CameraIntrinsics":
        """Intrinsics of the pyramid level whose pixels are `stride` apart."""
        s = float(stride)
        return replace(self, f_u=self.f_u / s, f_v=self.f_v / s,
                       c_u=self.c_u / s, c_v=self.c_v / s)


@dataclass
class DepthMap:
    """Organized per-pixel depth Z in meters with a validity mask."""

    data: np.ndarray   # [H, W] float64, 0 where invalid
    valid: np.ndarray  # [H, W] bool

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        self.valid = np.ascontiguousarray(self.valid, dtype=bool)
        if self.data.ndim != 2 or self.data.shape != self.valid.shape:
            raise ShapeError("DepthMap", self.data.shape, self.valid.shape)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class PointMap:
    """Organized H x W grid of camera-frame 3D points (the pseudo-LiDAR PM).

    points[v, u] holds the back-projected (x, y, z) of pixel (u, v); the grid
    keeps the image's neighborhood structure so window operators stay cheap.
    """

    points: np.ndarray  # [H, W, 3] float64, zeros where invalid
    valid: np.ndarray   # [H, W] bool

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.valid = np.ascontiguousarray(self.valid, dtype=bool)
        if self.points.ndim != 3 or self.points.shape[2] != 3 \
                or self.points.shape[:2] != self.valid.shape:
            raise ShapeError("PointMap", self.points.shape, self.valid.shape)

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    @property
    def size(self):
        return self.valid.shape

    def copy(self) -> "PointMap":
        return PointMap(self.points.copy(), self.valid.copy())


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z order throughout)

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("cannot normalize zero quaternion")
    return q / n


def quat_mul_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj_np(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion."""
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) of a rotation matrix, Shepperd's method."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_angle_deg(qa: np.ndarray, qb: np.ndarray) -> float:
    """Geodesic angle between two unit quaternions, in degrees."""
    d = abs(float(np.dot(quat_normalize(qa), quat_normalize(qb))))
    return float(np.degrees(2.0 * np.arccos(min(1.0, d))))


@dataclass(frozen=True)
class Pose:
    """SE(3) transform as unit quaternion (w, x, y, z) + translation.

    Acts on a point p as R(q) @ p + t. In the odometry pipeline a pose maps
    frame-1 coordinates into frame-2 coordinates.
    """

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.ascontiguousarray(self.q, dtype=np.float64))
        object.__setattr__(self, "t", np.ascontiguousarray(self.t, dtype=np.float64))
        if self.q.shape != (4,) or self.t.shape != (3,):
            raise ShapeError("Pose", self.q.shape, self.t.shape)
        if abs(np.linalg.norm(self.q) - 1.0) > 1e-9:
            raise ValueError(f"pose quaternion not unit norm: {np.linalg.norm(self.q)!r}")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_rotation(R: np.ndarray, t) -> "Pose":
        return Pose(rot_to_quat(R), np.asarray(t, dtype=np.float64))

    @staticmethod
    def from_quat(q, t) -> "Pose":
        return Pose(quat_normalize(q), np.asarray(t, dtype=np.float64))

    @staticmethod
    def from_axis_angle(axis, angle_deg: float, t=(0.0, 0.0, 0.0)) -> "Pose":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = np.radians(angle_deg) / 2.0
        q = np.concatenate([[np.cos(half)], np.sin(half) * axis])
        return Pose(quat_normalize(q), np.asarray(t, dtype=np.float64))

    def rotation(self) -> np.ndarray:
        return quat_to_rot(self.q)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        T = np.eye(4)
        T[:3, :3] = self.rotation()
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose":
        qc = quat_conj_np(self.q)
        return Pose(qc, -quat_to_rot(qc) @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self @ other)(p) = self(other(p))."""
        return Pose(quat_normalize(quat_mul_np(self.q, other.q)),
                    self.rotation() @ other.t + self.t)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to points of shape [..., 3]."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation().T + self.t


# ---------------------------------------------------------------------------
# core operations

def disparity_to_depth(disparity: np.ndarray, intr: CameraIntrinsics, *,
                       valid: np.ndarray | None = None, eps: float = 1e-3) -> DepthMap:
    """Convert a disparity map (pixels) to metric depth via Z = f_u * b / d.

    Pixels with d <= eps are marked invalid (division guard); an incoming
    validity mask is intersected with the guard.
    """
    d = np.asarray(disparity, dtype=np.float64)
    if d.ndim != 2 or d.size == 0:
        raise ShapeError("disparity_to_depth", d.shape, detail="need a non-empty 2-D map")
    ok = d > eps
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != d.shape:
            raise ShapeError("disparity_to_depth", d.shape, valid.shape)
        ok &= valid
    z = np.zeros_like(d)
    np.divide(intr.f_u * intr.baseline, d, out=z, where=ok)
    return DepthMap(z, ok)


def backproject(depth: DepthMap, intr: CameraIntrinsics) -> PointMap:
    """Lift a depth map to an organized point map (pseudo-LiDAR).

    Per valid pixel: z = Z, x = (u - c_u) z / f_u, y = (v - c_v) z / f_v.
    """
    H, W = depth.data.shape
    u = np.arange(W, dtype=np.float64)[None, :]
    v = np.arange(H, dtype=np.float64)[:, None]
    z = depth.data
    pts = np.zeros((H, W, 3))
    pts[:, :, 0] = (u - intr.c_u) * z / intr.f_u
    pts[:, :, 1] = (v - intr.c_v) * z / intr.f_v
    pts[:, :, 2] = z
    pts[~depth.valid] = 0.0
    return PointMap(pts, depth.valid.copy())


def project_points(points: np.ndarray, intr: CameraIntrinsics,
                   size: tuple[int, int]):
    """Project camera-frame points to continuous pixel coordinates.

    Returns (u, v, in_view); in_view is False when z <= 0 or the projection
    falls outside [0, W) x [0, H). Out-of-view entries keep their computed
    (possibly meaningless) u, v values.
    """
    H, W = size
    pts = np.asarray(points, dtype=np.float64)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    front = z > 0
    zsafe = np.where(front, z, 1.0)
    u = intr.f_u * x / zsafe + intr.c_u
    v = intr.f_v * y / zsafe + intr.c_v
    in_view = front & (u >= 0) & (u < W) & (v >= 0) & (v < H)
    return u, v, in_view


def project_point(p, intr: CameraIntrinsics, size: tuple[int, int]):
    """Single-point projection; returns (u, v) or None when out of view."""
    u, v, ok = project_points(np.asarray(p, dtype=np.float64)[None, :], intr, size)
    if not ok[0]:
        return None
    return float(u[0]), float(v[0])


def filter_points(pm: PointMap, intr: CameraIntrinsics, *,
                  max_range: float = 30.0, above_ground: float = 2.0,
                  euclidean: bool = False) -> PointMap:
    """Invalidate far points and likely sky points.

    A pixel is dropped when its range exceeds max_range (z-depth by default,
    Euclidean when requested) or when it sits more than above_ground meters
    over the ground plane, i.e. y < cam_height - above_ground (+y is down,
    ground at y = +cam_height).
    """
    pts = pm.points
    rng = np.linalg.norm(pts, axis=2) if euclidean else pts[:, :, 2]
    keep = pm.valid & (rng <= max_range) & (pts[:, :, 1] >= intr.cam_height - above_ground)
    out = np.where(keep[:, :, None], pts, 0.0)
    return PointMap(out, keep)


def _rasterize(points: np.ndarray, intr: CameraIntrinsics, size: tuple[int, int]):
    """Project points and z-buffer them onto an integer grid.

    Returns (flat_pixel_index, winner_source_index) for occupied pixels.
    A point is kept when its nearest pixel lies in the grid (robust to fp
    jitter at the image border); nearest depth wins, ties break to the
    lowest source index.
    """
    H, W = size
    u, v, _ = project_points(points, intr, (H, W))
    # nearest-pixel rasterization, half-up so ties are deterministic
    px = np.floor(u + 0.5).astype(np.int64)
    py = np.floor(v + 0.5).astype(np.int64)
    ok = (points[:, 2] > 0) & (px >= 0) & (px < W) & (py >= 0) & (py < H)
    src = np.nonzero(ok)[0]
    if src.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    flat = py[src] * W + px[src]
    z = points[src, 2]
    order = np.lexsort((src, z, flat))
    flat_sorted = flat[order]
    first = np.ones(flat_sorted.size, dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    return flat_sorted[first], src[order][first]


def warp_pointmap_with_sources(pm: PointMap, pose: Pose, intr: CameraIntrinsics):
    """Transform a point map by a pose and re-project onto a fresh grid.

    Returns (warped PointMap, source index map). The source map holds, per
    output pixel, the flat index of the input pixel whose point won the
    z-buffer, or -1 where the output pixel is empty. Points projected outside
    the image are discarded.
    """
    H, W = pm.size
    flat_valid = pm.valid.reshape(-1)
    idx_valid = np.nonzero(flat_valid)[0]
    moved = pose.transform(pm.points.reshape(-1, 3)[idx_valid])
    pix, winner = _rasterize(moved, intr, (H, W))
    out_pts = np.zeros((H * W, 3))
    out_valid = np.zeros(H * W, dtype=bool)
    src = np.full(H * W, -1, dtype=np.int64)
    out_pts[pix] = moved[winner]
    out_valid[pix] = True
    src[pix] = idx_valid[winner]
    return PointMap(out_pts.reshape(H, W, 3), out_valid.reshape(H, W)), src.reshape(H, W)


def warp_pointmap(pm: PointMap, pose: Pose, intr: CameraIntrinsics) -> PointMap:
    """Public warp: transformed, re-projected, z-buffered point map."""
    warped, _ = warp_pointmap_with_sources(pm, pose, intr)
    return warped


def transform_pointmap(pm: PointMap, pose: Pose) -> PointMap:
    """Rigidly move every valid point without re-gridding.

    Used by the unorganized (random-sample) pipeline where grid re-projection
    is meaningless; validity is untouched.
    """
    pts = pose.transform(pm.points.reshape(-1, 3)).reshape(pm.points.shape)
    pts = np.where(pm.valid[:, :, None], pts, 0.0)
    return PointMap(pts, pm.valid.copy())
