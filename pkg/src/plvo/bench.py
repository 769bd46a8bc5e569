"""Grouping benchmark: projection-aware window KNN vs all-pairs brute force.

Both paths answer the same query (K nearest valid points inside the kernel
window around each pixel, ties to the lowest flat index), so their neighbor
sets must be identical; only the amount of work differs. The window path
touches kernel-area candidates per centroid (linear total work in pixel
count); the brute-force baseline scans every pixel per centroid (quadratic),
which is the cost this benchmark makes visible.
"""

from __future__ import annotations

import os
import time

import numpy as np

from .geometry import PointMap
from .pyramid import group_windows
from .rng import XorShift64Star

BENCH_SIZES = ((32, 104), (64, 208), (128, 416))

BENCH_HEADER = ("height,width,pixels,window_seconds,bruteforce_seconds,"
                "neighbor_sets_equal")
BENCH_SUMMARY_HEADER = "window_exponent,bruteforce_exponent"


def random_pointmap(size, seed: int, valid_frac: float = 0.97) -> PointMap:
    """Random organized map: smooth depth surface plus noise, some invalid."""
    H, W = size
    rng = np.random.default_rng(seed ^ 0x5EED)
    u = np.linspace(-1, 1, W)[None, :]
    v = np.linspace(-1, 1, H)[:, None]
    z = 8.0 + 3.0 * np.sin(2.1 * u + 0.3) * np.cos(1.7 * v) \
        + rng.uniform(-0.5, 0.5, (H, W))
    pts = np.stack([u * z * 0.9, v * z * 0.6, z], axis=2)
    valid = rng.uniform(size=(H, W)) < valid_frac
    pts = np.where(valid[:, :, None], pts, 0.0)
    return PointMap(pts, valid)


def brute_force_group(pm: PointMap, kernel, K: int, chunk: int = 256):
    """All-pairs baseline: distances from every centroid to every pixel.

    The kernel window is applied as a mask after the full scan, so results
    match group_windows exactly while the work stays O(pixels^2). Distances
    accumulate per coordinate in the same order as the window path, so values
    (and therefore tie-breaking) are bit-identical. Top-K selection partitions
    to K plus slack, then orders the small candidate slice by (distance, flat
    index).
    """
    H, W = pm.size
    n = H * W
    kh, kw = kernel
    rh, rw = kh // 2, kw // 2
    pts = pm.points.reshape(-1, 3)
    valid = pm.valid.reshape(-1)
    rows = np.arange(n) // W
    cols = np.arange(n) % W

    idx = np.zeros((n, K), dtype=np.int64)
    counts = np.zeros(n, dtype=np.int64)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        m = hi - lo
        d2 = np.zeros((m, n))
        for c in range(3):
            d = pts[None, :, c] - pts[lo:hi, None, c]
            d2 += d * d
        mask = (np.abs(rows[None, :] - rows[lo:hi, None]) <= rh) \
            & (np.abs(cols[None, :] - cols[lo:hi, None]) <= rw) \
            & valid[None, :]
        cnt = np.minimum(mask.sum(axis=1), K)
        # survivors per row are few (<= kernel area): pull them out and order
        # the small set by (row, distance, flat index)
        r_i, c_i = np.nonzero(mask)
        d_i = d2[r_i, c_i]
        order = np.lexsort((c_i, d_i, r_i))
        r_s, c_s = r_i[order], c_i[order]
        rank = np.arange(r_s.size) - np.searchsorted(r_s, r_s, side="left")
        take = rank < K
        sub = np.zeros((m, K), dtype=np.int64)
        sub[r_s[take], rank[take]] = c_s[take]
        # pad unfilled slots with each row's nearest candidate
        slot = np.arange(K)[None, :]
        first = sub[:, :1]
        sub = np.where(slot < np.maximum(cnt, 1)[:, None], sub, first)
        idx[lo:hi] = sub
        counts[lo:hi] = cnt
    return idx, counts


def _window_group_all(pm: PointMap, kernel, K: int):
    H, W = pm.size
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    cpix = np.stack([ii.reshape(-1), jj.reshape(-1)], axis=1)
    return group_windows(pm.points.reshape(-1, 3), cpix, pm, kernel, K)


def _sets_equal(idx_a, counts_a, idx_b, counts_b) -> bool:
    if not np.array_equal(counts_a, counts_b):
        return False
    mask = np.arange(idx_a.shape[1])[None, :] < counts_a[:, None]
    return bool(np.array_equal(np.where(mask, idx_a, -1),
                               np.where(mask, idx_b, -1)))


def run_grouping_bench(sizes=BENCH_SIZES, K: int = 16, kernel=(9, 9),
                       seed: int = 0, repeats: int = 3):
    """Time both grouping paths across sizes and fit time ~ pixels^exponent.

    Returns (rows, window_exponent, brute_exponent); each row is
    (H, W, pixels, window seconds, brute seconds, sets_equal).
    """
    rows = []
    for H, W in sizes:
        pm = random_pointmap((H, W), seed)
        # warm-up outside the timed region
        idx_w, cnt_w = _window_group_all(pm, kernel, K)
        t_window = min(_timed(_window_group_all, pm, kernel, K,
                              repeats=repeats))
        idx_b, cnt_b = brute_force_group(pm, kernel, K)
        t_brute = min(_timed(brute_force_group, pm, kernel, K,
                             repeats=1 if H * W > 20000 else repeats))
        rows.append((H, W, H * W, t_window, t_brute,
                     _sets_equal(idx_w, cnt_w, idx_b, cnt_b)))

    logn = np.log([r[2] for r in rows])
    exp_window = float(np.polyfit(logn, np.log([r[3] for r in rows]), 1)[0])
    exp_brute = float(np.polyfit(logn, np.log([r[4] for r in rows]), 1)[0])
    return rows, exp_window, exp_brute


def _timed(fn, *args, repeats: int = 3):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return times


def write_bench_report(out_dir, rows, exp_window, exp_brute):
    """bench_grouping.csv + bench_summary.csv + log-log timing figure."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    p = os.path.join(out_dir, "bench_grouping.csv")
    with open(p, "w", encoding="utf-8") as fh:
        fh.write(BENCH_HEADER + "\n")
        for H, W, n, tw, tb, eq in rows:
            fh.write(f"{H},{W},{n},{tw:.6g},{tb:.6g},{str(eq).lower()}\n")
    written.append(p)

    p = os.path.join(out_dir, "bench_summary.csv")
    with open(p, "w", encoding="utf-8") as fh:
        fh.write(BENCH_SUMMARY_HEADER + "\n")
        fh.write(f"{exp_window:.6g},{exp_brute:.6g}\n")
    written.append(p)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(n, [r[3] for r in rows], "o-",
              label=f"window KNN (exp {exp_window:.2f})")
    ax.loglog(n, [r[4] for r in rows], "s--",
              label=f"brute force (exp {exp_brute:.2f})")
    ax.set_xlabel("pixels")
    ax.set_ylabel("seconds")
    ax.set_title("grouping time vs point-map size")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    p = os.path.join(out_dir, "bench_grouping.svg")
    fig.savefig(p, format="svg")
    plt.close(fig)
    written.append(p)
    return written
