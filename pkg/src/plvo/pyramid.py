"""Projection-aware point stream operators.

The organized point map keeps each 3D point at its source pixel, so neighbor
search reduces to a fixed kernel window around a centroid's pixel followed by
KNN on 3D distance inside the window. Work per centroid is bounded by the
kernel area, which is what makes grouping linear in pixel count instead of
quadratic.

Tie-breaking everywhere: candidates sort by (squared distance, flat pixel
index ascending), so equal distances resolve to the lowest flat index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, add, gather_rows, matmul, max_reduce,
                       mlp_forward, mul, relu, reshape)
from .errors import ShapeError
from .geometry import PointMap


@dataclass
class FeatureLevel:
    """One pyramid level: sampled point map + per-pixel learned features.

    features is [H_l, W_l, C_l]; invalid pixels carry zero feature vectors.
    stride is cumulative from the full-resolution input (level 0, stride 1).
    """

    pm: PointMap
    features: Tensor
    stride: int
    level_index: int

    def __post_init__(self):
        if self.features.shape[:2] != self.pm.size:
            raise ShapeError("FeatureLevel", self.features.shape, self.pm.size)

    @property
    def channels(self) -> int:
        return self.features.shape[2]


def stride_sample(pm: PointMap, stride: int) -> PointMap:
    """Take the pixel at (stride*i, stride*j); output is ceil(H/s) x ceil(W/s)."""
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    return PointMap(pm.points[::stride, ::stride].copy(),
                    pm.valid[::stride, ::stride].copy())


def _window_candidates(cpix: np.ndarray, dense: PointMap, kernel):
    """Flat candidate indices of each kernel window, row-major, with validity.

    cpix: [n, 2] (row, col) centroid pixels in the dense grid. Returns
    (flat [n, kA], ok [n, kA]) where kA = kh*kw; out-of-bounds or invalid
    dense pixels are marked not-ok (their flat index is clipped but unused).
    """
    kh, kw = kernel
    H, W = dense.size
    rh, rw = kh // 2, kw // 2
    rows = cpix[:, 0][:, None, None] + np.arange(-rh, rh + 1)[None, :, None]
    cols = cpix[:, 1][:, None, None] + np.arange(-rw, rw + 1)[None, None, :]
    rows, cols = np.broadcast_arrays(rows, cols)
    inb = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    flat = np.clip(rows, 0, H - 1) * W + np.clip(cols, 0, W - 1)
    flat = flat.reshape(len(cpix), kh * kw)
    ok = (inb.reshape(len(cpix), kh * kw)
          & dense.valid.reshape(-1)[flat])
    return flat, ok


def group_windows(cpoints: np.ndarray, cpix: np.ndarray, dense: PointMap,
                  kernel, K: int, chunk: int = 4096):
    """Vectorized kernel-bounded KNN for a batch of centroids.

    cpoints: [n, 3] centroid 3D positions; cpix: [n, 2] their pixels in the
    dense grid. Returns (idx [n, K] flat dense indices, counts [n]): the up-to-K
    valid window candidates nearest to each centroid, sorted by (distance,
    flat index); slots past counts[i] repeat the nearest candidate so callers
    can keep rectangular shapes. counts is 0 where no valid candidate exists.

    Centroids are processed in chunks so the per-chunk working set stays
    cache-resident; total work is centroids x kernel area.
    """
    if kernel[0] % 2 == 0 or kernel[1] % 2 == 0:
        raise ValueError(f"kernel must be odd in both dims, got {kernel}")
    n = len(cpoints)
    idx = np.zeros((n, K), dtype=np.int64)
    counts = np.zeros(n, dtype=np.int64)
    slot = np.arange(K)[None, :]
    for lo in range(0, max(n, 1), chunk):
        hi = min(lo + chunk, n)
        if hi <= lo:
            break
        flat, ok = _window_candidates(cpix[lo:hi], dense, kernel)
        pts = dense.points.reshape(-1, 3)[flat]
        d2 = ((pts - cpoints[lo:hi, None, :]) ** 2).sum(axis=2)
        d2[~ok] = np.inf
        # window candidates are already in ascending flat order, so a stable
        # sort on distance alone breaks ties to the lowest flat index
        order = np.argsort(d2, axis=1, kind="stable")
        take = order[:, :K] if order.shape[1] >= K else np.pad(
            order, ((0, 0), (0, K - order.shape[1])), mode="edge")
        sub = np.take_along_axis(flat, take, axis=1)
        cnt = np.minimum(ok.sum(axis=1), K)
        # pad empty slots with the nearest candidate (harmless under maxpool)
        sub = np.where(slot < np.maximum(cnt, 1)[:, None], sub, sub[:, :1])
        sub[cnt == 0] = flat[cnt == 0, :1]
        idx[lo:hi] = sub
        counts[lo:hi] = cnt
    return idx, counts


def group_bruteforce(cpoints: np.ndarray, dense: PointMap, K: int,
                     chunk: int = 256):
    """All-candidates KNN against every valid dense point (no kernel window).

    Same return convention and (distance, flat index) tie-break as
    group_windows. This is the grouping used by the unorganized
    random-sample pipeline; work is quadratic in point count.
    """
    pts = dense.points.reshape(-1, 3)
    valid = dense.valid.reshape(-1)
    n = len(cpoints)
    N = pts.shape[0]
    idx = np.zeros((n, K), dtype=np.int64)
    counts = np.full(n, min(int(valid.sum()), K), dtype=np.int64)
    slot = np.arange(K)[None, :]
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        diff = pts[None, :, :] - cpoints[lo:hi, None, :]
        d2 = (diff * diff).sum(axis=2)
        d2[:, ~valid] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")
        take = order[:, :K] if N >= K else np.pad(
            order, ((0, 0), (0, K - N)), mode="edge")
        sub = take.astype(np.int64)
        cnt = counts[lo:hi]
        sub = np.where(slot < np.maximum(cnt, 1)[:, None], sub, sub[:, :1])
        idx[lo:hi] = sub
    return idx, counts


def group_knn(cpoints: np.ndarray, cpix: np.ndarray, dense: PointMap,
              kernel, K: int, brute: bool = False):
    """Dispatch between kernel-window grouping and the brute-force fallback."""
    if brute:
        return group_bruteforce(cpoints, dense, K)
    return group_windows(cpoints, cpix, dense, kernel, K)


def kernel_knn_group(centroid_px, pm_dense: PointMap, kernel, K: int,
                     stride: int = 1) -> list[int]:
    """Neighbor indices for one sampled-map centroid, per the grouping contract.

    centroid_px is (i, j) in the sampled map; its dense pixel is
    (stride*i, stride*j) and its own point is always a candidate. Returns up
    to K flat dense indices ordered by 3D distance (ties to lowest flat
    index); empty when the centroid pixel itself is invalid.
    """
    i, j = centroid_px
    r, c = i * stride, j * stride
    if not (0 <= r < pm_dense.height and 0 <= c < pm_dense.width):
        raise ValueError(f"centroid pixel {(i, j)} maps outside the dense grid")
    if not pm_dense.valid[r, c]:
        return []
    cpoint = pm_dense.points[r, c][None, :]
    cpix = np.array([[r, c]], dtype=np.int64)
    idx, counts = group_windows(cpoint, cpix, pm_dense, kernel, K)
    return idx[0, :counts[0]].tolist()


def aggregate_groups(inputs: Tensor, mlp, valid_mask: np.ndarray) -> Tensor:
    """Reference tail of set conv/upconv: MLP per group member, channelwise max.

    inputs: [n, K, D]; valid_mask: [n] bool, rows mapped to zero features.
    """
    n, K, D = inputs.shape
    h = mlp_forward(reshape(inputs, (n * K, D)), mlp)
    h = reshape(h, (n, K, h.shape[1]))
    pooled = max_reduce(h, axis=1)
    return mul(pooled, Tensor(valid_mask.astype(np.float64)[:, None]))


def grouped_mlp(rel, neigh: Tensor, center: Tensor, mlp,
                center_first: bool = False) -> Tensor:
    """MLP over concat(rel, neighbor, center) rows, without materializing it.

    The first layer's weight matrix is evaluated block-wise (rows [0,3) for
    the relative position, then the neighbor and center blocks); the center
    term is computed once per centroid and broadcast over the group.
    Equivalent to the concatenated form up to fp summation order.
    center_first swaps the block layout to concat(rel, center, neighbor),
    which is the cost-volume input order.

    rel: [n, K, 3] (array or tensor); neigh: [n, K, Cn]; center: [n, Cc].
    Returns [n, K, C_out].
    """
    rel = rel if isinstance(rel, Tensor) else Tensor(rel)
    n, K, _ = rel.shape
    Cn = neigh.shape[2]
    Cc = center.shape[1]
    w0, b0 = mlp[0]
    if w0.shape[0] != 3 + Cn + Cc:
        raise ShapeError("mlp", w0.shape, (3 + Cn + Cc,),
                         detail="first-layer width must be 3 + C_n + C_c")
    if center_first:
        c_rows = np.arange(3, 3 + Cc)
        n_rows = np.arange(3 + Cc, 3 + Cc + Cn)
    else:
        n_rows = np.arange(3, 3 + Cn)
        c_rows = np.arange(3 + Cn, 3 + Cn + Cc)
    h_pos = matmul(reshape(rel, (n * K, 3)), gather_rows(w0, np.arange(3)))
    h_n = matmul(reshape(neigh, (n * K, Cn)), gather_rows(w0, n_rows))
    hidden = w0.shape[1]
    h = reshape(add(h_pos, h_n), (n, K, hidden))
    h_c = reshape(matmul(center, gather_rows(w0, c_rows)), (n, 1, hidden))
    h = add(add(h, h_c), b0)
    if len(mlp) > 1:
        h = relu(h)
        h = reshape(mlp_forward(reshape(h, (n * K, hidden)), mlp[1:]),
                    (n, K, mlp[-1][0].shape[1]))
    return h


def grouped_mlp_max(rel, neigh: Tensor, center: Tensor, mlp,
                    valid_mask: np.ndarray) -> Tensor:
    """grouped_mlp followed by channelwise max over the group and masking."""
    h = grouped_mlp(rel, neigh, center, mlp)
    pooled = max_reduce(h, axis=1)
    return mul(pooled, Tensor(valid_mask.astype(np.float64)[:, None]))


def set_conv(level_in: FeatureLevel, stride: int, kernel, K: int, mlp,
             brute: bool = False) -> FeatureLevel:
    """Stride-sample centroids, group dense neighbors, aggregate features.

    Per centroid: concat(neighbor - centroid position, neighbor feature,
    centroid feature) -> MLP -> channelwise max over the group. Invalid
    centroids (or centroids with no valid candidates) get zero features.
    """
    dense = level_in.pm
    pm_s = stride_sample(dense, stride)
    Hs, Ws = pm_s.size
    ii, jj = np.meshgrid(np.arange(Hs), np.arange(Ws), indexing="ij")
    cpix = np.stack([ii.reshape(-1) * stride, jj.reshape(-1) * stride], axis=1)
    cpoints = pm_s.points.reshape(-1, 3)
    cflat = cpix[:, 0] * dense.width + cpix[:, 1]

    idx, counts = group_knn(cpoints, cpix, dense, kernel, K, brute=brute)
    ok = pm_s.valid.reshape(-1) & (counts > 0)

    C = level_in.channels
    dense_flat = reshape(level_in.features, (dense.height * dense.width, C))
    rel = dense.points.reshape(-1, 3)[idx] - cpoints[:, None, :]
    rel[~ok] = 0.0
    out = grouped_mlp_max(rel, gather_rows(dense_flat, idx),
                          gather_rows(dense_flat, cflat), mlp, ok)
    feats = reshape(out, (Hs, Ws, out.shape[1]))
    return FeatureLevel(pm_s, feats, level_in.stride * stride,
                        level_in.level_index + 1)


def _coarse_candidates(fine: PointMap, coarse: PointMap, ratio_h: int,
                       ratio_w: int, kernel):
    """Coarse-grid candidates whose dense footprint falls in the fine window.

    For fine pixel (r, c) the window spans [r - kh//2, r + kh//2] in fine
    coordinates; coarse pixel (i, j) sits at fine position (i*ratio_h,
    j*ratio_w). Returns (flat coarse indices [n, m], ok [n, m]).
    """
    kh, kw = kernel
    Hf, Wf = fine.size
    Hc, Wc = coarse.size
    rh, rw = kh // 2, kw // 2

    def axis_candidates(n_fine, n_coarse, ratio, radius):
        pos = np.arange(n_fine)
        lo = -(-(pos - radius) // ratio)           # ceil division
        m = (2 * radius) // ratio + 1              # max multiples of ratio in the window
        cand = lo[:, None] + np.arange(m)[None, :]
        ok = (cand >= 0) & (cand < n_coarse) & (cand * ratio <= pos[:, None] + radius)
        return np.clip(cand, 0, n_coarse - 1), ok

    ri, rok = axis_candidates(Hf, Hc, ratio_h, rh)
    ci, cok = axis_candidates(Wf, Wc, ratio_w, rw)
    mi, mj = ri.shape[1], ci.shape[1]
    rows = np.repeat(ri, Wf, axis=0)[:, :, None]
    rows_ok = np.repeat(rok, Wf, axis=0)[:, :, None]
    cols = np.tile(ci, (Hf, 1))[:, None, :]
    cols_ok = np.tile(cok, (Hf, 1))[:, None, :]
    flat = (rows * Wc + cols).reshape(Hf * Wf, mi * mj)
    ok = (rows_ok & cols_ok).reshape(Hf * Wf, mi * mj)
    ok &= coarse.valid.reshape(-1)[flat]
    return flat, ok


def set_upconv(coarse: FeatureLevel, fine: FeatureLevel, kernel, K: int,
               mlp, brute: bool = False) -> Tensor:
    """Propagate coarse features to the fine grid (dense points as centroids).

    Each valid fine point gathers the K nearest coarse points whose footprint
    lies inside the kernel window around it, then aggregates
    concat(coarse - fine position, coarse feature, fine feature) like set
    conv. Fine pixels with no coarse candidates get zero features.
    Returns [H_fine, W_fine, C_out].
    """
    if coarse.stride % fine.stride != 0:
        raise ShapeError("set_upconv", (coarse.stride,), (fine.stride,),
                         detail="coarse stride must be a multiple of fine stride")
    Hf, Wf = fine.pm.size
    n = Hf * Wf
    cpoints = fine.pm.points.reshape(-1, 3)

    if brute:
        idx, counts = group_bruteforce(cpoints, coarse.pm, K)
    else:
        ratio = coarse.stride // fine.stride
        flat, ok_cand = _coarse_candidates(fine.pm, coarse.pm, ratio, ratio, kernel)
        pts = coarse.pm.points.reshape(-1, 3)[flat]
        d2 = ((pts - cpoints[:, None, :]) ** 2).sum(axis=2)
        d2[~ok_cand] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")
        take = order[:, :K] if order.shape[1] >= K else np.pad(
            order, ((0, 0), (0, K - order.shape[1])), mode="edge")
        idx = np.take_along_axis(flat, take, axis=1)
        counts = np.minimum(ok_cand.sum(axis=1), K)
        slot = np.arange(idx.shape[1])[None, :]
        idx = np.where(slot < np.maximum(counts, 1)[:, None], idx, idx[:, :1])

    ok = fine.pm.valid.reshape(-1) & (counts > 0)
    rel = coarse.pm.points.reshape(-1, 3)[idx] - cpoints[:, None, :]
    rel[~ok] = 0.0

    Cc = coarse.channels
    Cf = fine.channels
    coarse_flat = reshape(coarse.features, (coarse.pm.height * coarse.pm.width, Cc))
    fine_flat = reshape(fine.features, (n, Cf))
    out = grouped_mlp_max(rel, gather_rows(coarse_flat, idx), fine_flat, mlp, ok)
    return reshape(out, (Hf, Wf, out.shape[1]))
