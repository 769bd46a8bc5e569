"""Cross-frame embedding, mask-weighted pose regression, coarse-to-fine refinement.

The network follows a pyramid-warping-cost-volume layout: the coarsest level
regresses an initial pose from an attention-weighted cross-frame cost volume;
each finer level warps frame 1 by the coarser estimate, re-embeds against
frame 2, and regresses a residual that is composed onto the running pose via
quaternion algebra. All learnable pieces live on the autodiff tape; the warp
itself uses the detached numeric value of the coarser pose.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (DegenerateQuaternionError, DivergedPoseError, ShapeError)
from .fusion import fuse_2d3d, image_conv_level
from .geometry import (CameraIntrinsics, PointMap, Pose, quat_normalize,
                       transform_pointmap, warp_pointmap_with_sources)
from .pyramid import FeatureLevel, group_knn, grouped_mlp, set_conv, set_upconv
from .rng import XorShift64Star

_MASK_OFF = -1e30  # pre-softmax offset that zeroes masked slots exactly


@dataclass
class EmbeddingLevel:
    """Per-level embedding feature E and softmax-normalized mask M.

    Both are [H_l, W_l, C_e]; per channel, M sums to 1 over valid pixels.
    """

    E: Tensor
    M: Tensor
    level_index: int


@dataclass
class PosePyramid:
    """Poses and residuals per pyramid level, finest (1) to coarsest (L)."""

    qs: dict = field(default_factory=dict)
    ts: dict = field(default_factory=dict)
    q_res: dict = field(default_factory=dict)
    t_res: dict = field(default_factory=dict)

    @property
    def levels(self):
        return sorted(self.qs)

    def pose(self, level: int) -> Pose:
        """Detached numeric pose of a level."""
        return Pose(quat_normalize(self.qs[level].data), self.ts[level].data.copy())


def _mlp_weights(params: dict, prefix: str):
    layers = []
    i = 0
    while f"{prefix}.l{i}.w" in params:
        layers.append((params[f"{prefix}.l{i}.w"], params[f"{prefix}.l{i}.b"]))
        i += 1
    if not layers:
        raise KeyError(f"no MLP weights under {prefix!r}")
    return layers


def masked_softmax_spatial(logits: Tensor, valid: np.ndarray) -> Tensor:
    """Softmax over spatial rows per channel, restricted to valid rows.

    logits: [n, C]; valid: [n] bool. Invalid rows come out exactly 0; with no
    valid rows at all the whole mask is 0 (degenerate level, weightless sum).
    """
    offs = np.where(valid, 0.0, _MASK_OFF)[:, None]
    soft = ad.softmax(ad.add(logits, Tensor(offs)), axis=0)
    return ad.mul(soft, Tensor(valid.astype(np.float64)[:, None]))


def attentive_cost_volume(level1: FeatureLevel, level2: FeatureLevel,
                          kernel, K: int, params: dict, prefix: str,
                          brute: bool = False, pos1: Tensor | None = None) -> Tensor:
    """Cross-frame embedding E between two aligned feature levels.

    Per valid frame-1 point: gather K nearest frame-2 points in the kernel
    window around the same pixel, score each candidate with an attention MLP
    over (relative position, frame-1 feature, frame-2 feature), softmax over
    candidates, and sum attention-weighted value-MLP outputs. Invalid or
    candidate-less pixels get zero embeddings. Returns [H, W, C_e].

    pos1, when given, supplies frame-1 point positions as a tensor [n, 3]
    (numerically equal to level1's grid) so relative positions stay on the
    differentiation tape; grouping structure always uses the grid values.
    """
    if level1.pm.size != level2.pm.size:
        raise ShapeError("attentive_cost_volume", level1.pm.size, level2.pm.size)
    if level1.features.shape != level2.features.shape:
        raise ShapeError("attentive_cost_volume",
                         level1.features.shape, level2.features.shape)
    H, W = level1.pm.size
    n = H * W
    C = level1.channels
    cpoints = level1.pm.points.reshape(-1, 3)
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    cpix = np.stack([ii.reshape(-1), jj.reshape(-1)], axis=1)

    idx, counts = group_knn(cpoints, cpix, level2.pm, kernel, K, brute=brute)
    Kc = idx.shape[1]
    ok = level1.pm.valid.reshape(-1) & (counts > 0)

    pts2 = level2.pm.points.reshape(-1, 3)[idx]
    if pos1 is None:
        rel = pts2 - cpoints[:, None, :]
        rel[~ok] = 0.0
    else:
        base = ad.sub(Tensor(pts2), ad.reshape(pos1, (n, 1, 3)))
        rel = ad.mul(base, Tensor(ok.astype(np.float64)[:, None, None]))
    f1 = ad.reshape(level1.features, (n, C))
    f2_g = ad.gather_rows(ad.reshape(level2.features, (n, C)), idx)

    logits = grouped_mlp(rel, f2_g, f1, _mlp_weights(params, f"{prefix}.attn"),
                         center_first=True)
    logits = ad.reshape(logits, (n, Kc))
    slot_ok = np.arange(Kc)[None, :] < counts[:, None]
    attn = ad.softmax(ad.add(logits, Tensor(np.where(slot_ok, 0.0, _MASK_OFF))),
                      axis=1)

    values = grouped_mlp(rel, f2_g, f1, _mlp_weights(params, f"{prefix}.value"),
                         center_first=True)
    Ce = values.shape[2]
    e = ad.sum_reduce(ad.mul(ad.reshape(attn, (n, Kc, 1)), values), axis=1)
    e = ad.mul(e, Tensor(ok.astype(np.float64)[:, None]))
    return ad.reshape(e, (H, W, Ce))


def regress_pose(E: Tensor, M: Tensor, params: dict, prefix: str):
    """Pose from the mask-weighted sum of embedding features.

    s = sum_i e_i * m_i per channel; t = FC_t(s); q = FC_q(s) normalized to
    unit length. Raises when the quaternion head output is too small to
    normalize.
    """
    if E.shape != M.shape:
        raise ShapeError("regress_pose", E.shape, M.shape)
    C = E.shape[-1]
    e_flat = ad.reshape(E, (-1, C)) if E.ndim != 2 else E
    m_flat = ad.reshape(M, (-1, C)) if M.ndim != 2 else M
    s = ad.sum_reduce(ad.mul(e_flat, m_flat), axis=0)
    s2 = ad.reshape(s, (1, C))
    q_raw = ad.reshape(ad.linear(s2, params[f"{prefix}.q.w"], params[f"{prefix}.q.b"]), (4,))
    q_norm = ad.l2_norm(q_raw)
    if q_norm.item() < 1e-12:
        raise DegenerateQuaternionError(
            f"{prefix}: quaternion head norm {q_norm.item():.3e} < 1e-12")
    q = ad.div(q_raw, q_norm)
    t = ad.reshape(ad.linear(s2, params[f"{prefix}.t.w"], params[f"{prefix}.t.b"]), (3,))
    return q, t


_CONJ = np.array([1.0, -1.0, -1.0, -1.0])


def _quad_to_rot_transposed() -> np.ndarray:
    """[16, 9] map from vec(q q^T) to vec(R(q)^T), valid for unit q.

    Rotation-matrix entries are quadratic forms in (w, x, y, z); the
    diagonal uses w^2+x^2+y^2+z^2 = 1 to stay purely quadratic.
    """
    terms = {
        (0, 0): [(0, 0, 1), (1, 1, 1), (2, 2, -1), (3, 3, -1)],
        (0, 1): [(1, 2, 1), (2, 1, 1), (0, 3, -1), (3, 0, -1)],
        (0, 2): [(1, 3, 1), (3, 1, 1), (0, 2, 1), (2, 0, 1)],
        (1, 0): [(1, 2, 1), (2, 1, 1), (0, 3, 1), (3, 0, 1)],
        (1, 1): [(0, 0, 1), (1, 1, -1), (2, 2, 1), (3, 3, -1)],
        (1, 2): [(2, 3, 1), (3, 2, 1), (0, 1, -1), (1, 0, -1)],
        (2, 0): [(1, 3, 1), (3, 1, 1), (0, 2, -1), (2, 0, -1)],
        (2, 1): [(2, 3, 1), (3, 2, 1), (0, 1, 1), (1, 0, 1)],
        (2, 2): [(0, 0, 1), (1, 1, -1), (2, 2, -1), (3, 3, 1)],
    }
    M = np.zeros((16, 9))
    for (r, c), parts in terms.items():
        col = 3 * c + r  # transposed layout
        for a, b, coef in parts:
            M[4 * a + b, col] += coef
    return M


_QUAD2ROT_T = _quad_to_rot_transposed()


def transform_points_tensor(points: np.ndarray, q: Tensor, t: Tensor) -> Tensor:
    """R(q) @ p + t for constant points with the pose on the tape.

    q must be unit norm (the rotation entries use the unit identity).
    Returns [N, 3]; gradients flow into q and t.
    """
    outer = ad.matmul(ad.reshape(q, (4, 1)), ad.reshape(q, (1, 4)))
    Rt = ad.reshape(ad.matmul(ad.reshape(outer, (1, 16)), Tensor(_QUAD2ROT_T)),
                    (3, 3))
    moved = ad.matmul(Tensor(np.asarray(points, dtype=np.float64)), Rt)
    return ad.add(moved, ad.reshape(t, (1, 3)))


def compose_pose(q_res, t_res, q_coarse, t_coarse):
    """Compose a residual pose onto a coarser estimate.

    q = q_res * q_coarse (Hamilton product, re-normalized); the coarse
    translation is rotated by the residual via quaternion conjugation and the
    residual translation added. Works on tensors or plain arrays.
    """
    q_res, t_res = ad.as_tensor(q_res), ad.as_tensor(t_res)
    q_coarse, t_coarse = ad.as_tensor(q_coarse), ad.as_tensor(t_coarse)
    q = ad.quat_mul(q_res, q_coarse)
    q = ad.div(q, ad.l2_norm(q))
    t4 = ad.concat([Tensor(np.zeros(1)), t_coarse], axis=0)
    rotated = ad.quat_mul(ad.quat_mul(q_res, t4), ad.mul(q_res, Tensor(_CONJ)))
    t = ad.add(ad.gather_rows(rotated, np.array([1, 2, 3])), t_res)
    return q, t


def _warped_level(level1: FeatureLevel, pose: Pose, q_t: Tensor, t_t: Tensor,
                  intr_level: CameraIntrinsics, brute: bool):
    """Warp a frame-1 level by a coarse pose.

    The grid structure (re-projection, z-buffer, discards) comes from the
    detached pose value; the warped point positions come from the pose
    tensors so gradients reach the coarser levels through the warp geometry.
    Returns (warped level, back map, warped positions tensor [n, 3]).
    Unorganized mode is a pure rigid move; indexing is unchanged.
    """
    H, W = level1.pm.size
    n = H * W
    C = level1.channels
    if brute:
        warped_pm = transform_pointmap(level1.pm, pose)
        pos = transform_points_tensor(level1.pm.points.reshape(-1, 3), q_t, t_t)
        pos = ad.mul(pos, Tensor(level1.pm.valid.reshape(-1)
                                 .astype(np.float64)[:, None]))
        return FeatureLevel(warped_pm, level1.features, level1.stride,
                            level1.level_index), np.arange(n), pos
    if not level1.pm.valid.any():
        # degenerate level (nothing to warp); refinement degrades to a
        # zero re-embedding rather than blaming the coarse pose
        return level1, np.arange(n), None
    warped_pm, src = warp_pointmap_with_sources(level1.pm, pose, intr_level)
    if not warped_pm.valid.any():
        raise DivergedPoseError(
            f"level {level1.level_index}: coarse pose warped every point out of view")
    src_flat = src.reshape(-1)
    gidx = np.where(src_flat >= 0, src_flat, n)
    f1 = ad.reshape(level1.features, (n, C))
    padded = ad.concat([f1, Tensor(np.zeros((1, C)))], axis=0)
    warped_feats = ad.gather_rows(padded, gidx)
    warped = FeatureLevel(warped_pm, ad.reshape(warped_feats, (H, W, C)),
                          level1.stride, level1.level_index)
    moved = transform_points_tensor(level1.pm.points.reshape(-1, 3), q_t, t_t)
    pos = ad.gather_rows(ad.concat([moved, Tensor(np.zeros((1, 3)))], axis=0),
                         gidx)
    # inverse map: original pixel -> row in the warped grid (n = dropped)
    back = np.full(n, n, dtype=np.int64)
    landed = np.nonzero(src_flat >= 0)[0]
    back[src_flat[landed]] = landed
    return warped, back, pos


def refine_level(level: int, ce: Tensor, cm: Tensor, fused1: FeatureLevel,
                 fused2: FeatureLevel, coarse_pose: Pose,
                 intr_level: CameraIntrinsics, params: dict, cfg_arch: dict,
                 coarse_q: Tensor | None = None, coarse_t: Tensor | None = None):
    """One coarse-to-fine step: warp, re-embed, fuse embeddings, regress residual.

    ce/cm are the up-sampled coarse embedding/mask [H,W,Ce]. coarse_q/coarse_t
    supply the coarse pose on the tape (defaulting to constants built from
    coarse_pose). Returns (EmbeddingLevel, q_res, t_res).
    """
    brute = cfg_arch["random_8192"]
    H, W = fused1.pm.size
    n = H * W
    if coarse_q is None:
        coarse_q = Tensor(coarse_pose.q)
    if coarse_t is None:
        coarse_t = Tensor(coarse_pose.t)
    warped, back, pos = _warped_level(fused1, coarse_pose, coarse_q, coarse_t,
                                      intr_level, brute)
    kernel = tuple(cfg_arch["cost_kernels"][level - 1])
    cv = attentive_cost_volume(warped, fused2, kernel, cfg_arch["cost_k"],
                               params, f"cost{level}", brute=brute, pos1=pos)
    Ce = cv.shape[2]
    cv_flat = ad.reshape(cv, (n, Ce))
    if brute:
        re = cv_flat
    else:
        padded = ad.concat([cv_flat, Tensor(np.zeros((1, Ce)))], axis=0)
        re = ad.gather_rows(padded, back)

    f1 = ad.reshape(fused1.features, (n, fused1.channels))
    ce_flat = ad.reshape(ce, (n, Ce))
    cm_flat = ad.reshape(cm, (n, Ce))
    e = ad.mlp_forward(ad.concat([ce_flat, re, f1], axis=1),
                       _mlp_weights(params, f"embed{level}"))
    valid = fused1.pm.valid.reshape(-1)
    m_logits = ad.mlp_forward(ad.concat([e, cm_flat, f1], axis=1),
                              _mlp_weights(params, f"maskmlp{level}"))
    m = masked_softmax_spatial(m_logits, valid)
    q_res, t_res = regress_pose(e, m, params, f"head{level}")
    emb = EmbeddingLevel(ad.reshape(e, (H, W, Ce)), ad.reshape(m, (H, W, Ce)), level)
    return emb, q_res, t_res


# ---------------------------------------------------------------------------
# pyramid construction

def _as_unorganized(pm: PointMap, n_points: int, rng: XorShift64Star) -> PointMap:
    """Random subset of valid points laid out as a 1 x N point map."""
    pts = pm.points.reshape(-1, 3)[pm.valid.reshape(-1)]
    order = np.arange(len(pts))
    rng.shuffle(order)
    take = order[:min(n_points, len(pts))]
    sel = pts[take]
    return PointMap(sel[None, :, :], np.ones((1, len(sel)), dtype=bool))


def _input_level(pm: PointMap) -> FeatureLevel:
    feats = Tensor(np.where(pm.valid[:, :, None], pm.points, 0.0))
    return FeatureLevel(pm, feats, 1, 0)


def build_point_pyramid(pm: PointMap, params: dict, cfg_arch: dict):
    """Chain of set conv levels; returns list of FeatureLevels (level 1..L)."""
    brute = cfg_arch["random_8192"]
    strides = cfg_arch["random_strides"] if brute else cfg_arch["strides"]
    levels = []
    cur = _input_level(pm)
    for l, stride in enumerate(strides, start=1):
        kernel = tuple(cfg_arch["kernels"][l - 1])
        cur = set_conv(cur, stride, kernel, cfg_arch["group_k"],
                       _mlp_weights(params, f"setconv{l}"), brute=brute)
        levels.append(cur)
    return levels


def build_image_pyramid(img: np.ndarray, params: dict, cfg_arch: dict):
    """Image stream: one strided conv+relu per level."""
    h = Tensor(np.asarray(img, dtype=np.float64))
    if h.ndim == 2:
        h = ad.reshape(h, (*h.shape, 1))
    levels = []
    stride_cum = 1
    for l, stride in enumerate(cfg_arch["strides"], start=1):
        lvl = image_conv_level(h, stride, params[f"img{l}.w"], params[f"img{l}.b"],
                               prev_stride=stride_cum)
        levels.append(lvl)
        h = lvl.features
        stride_cum = lvl.stride
    return levels


def full_forward(img1, img2, pm1: PointMap, pm2: PointMap, params: dict,
                 cfg: dict, intr: CameraIntrinsics) -> PosePyramid:
    """Run the whole two-frame network; returns poses at every pyramid level.

    Both frames share weights. The coarsest level regresses an absolute pose;
    finer levels regress residuals composed coarse-to-fine. img1/img2 may be
    None when fusion is disabled.
    """
    arch = cfg["arch"]
    brute = arch["random_8192"]
    L = len(arch["random_strides"] if brute else arch["strides"])

    if brute:
        rng = XorShift64Star(cfg["seed"]).spawn(101)
        n_pts = min(arch["random_points"], int(pm1.valid.sum()),
                    int(pm2.valid.sum()))
        pm1 = _as_unorganized(pm1, n_pts, rng.spawn(1))
        pm2 = _as_unorganized(pm2, n_pts, rng.spawn(2))

    levels1 = build_point_pyramid(pm1, params, arch)
    levels2 = build_point_pyramid(pm2, params, arch)

    if arch["fusion"]:
        if img1 is None or img2 is None:
            raise ShapeError("full_forward", (), (),
                             detail="fusion enabled but images missing")
        img_levels1 = build_image_pyramid(img1, params, arch)
        img_levels2 = build_image_pyramid(img2, params, arch)
        fused1, fused2 = [], []
        for l in range(L):
            for lv, im in ((levels1[l], img_levels1[l]), (levels2[l], img_levels2[l])):
                if im.features.shape[:2] != lv.pm.size:
                    raise ShapeError("full_forward", im.features.shape, lv.pm.size,
                                     detail=f"image level {l + 1} dims diverge "
                                            f"from point level")
            fused1.append(FeatureLevel(
                levels1[l].pm,
                fuse_2d3d(levels1[l].features, img_levels1[l].features,
                          params, f"fuse{l + 1}", levels1[l].pm.valid),
                levels1[l].stride, levels1[l].level_index))
            fused2.append(FeatureLevel(
                levels2[l].pm,
                fuse_2d3d(levels2[l].features, img_levels2[l].features,
                          params, f"fuse{l + 1}", levels2[l].pm.valid),
                levels2[l].stride, levels2[l].level_index))
    else:
        fused1, fused2 = levels1, levels2

    pyr = PosePyramid()

    # coarsest level: initial embedding, mask and pose
    top1, top2 = fused1[L - 1], fused2[L - 1]
    Hc, Wc = top1.pm.size
    nc = Hc * Wc
    kernel = tuple(arch["cost_kernels"][L - 1])
    E_top = attentive_cost_volume(top1, top2, kernel, arch["cost_k"],
                                  params, f"cost{L}", brute=brute)
    Ce = E_top.shape[2]
    e_flat = ad.reshape(E_top, (nc, Ce))
    f_top = ad.reshape(top1.features, (nc, top1.channels))
    valid_top = top1.pm.valid.reshape(-1)
    m_logits = ad.mlp_forward(ad.concat([e_flat, f_top], axis=1),
                              _mlp_weights(params, f"mask{L}"))
    M_top = masked_softmax_spatial(m_logits, valid_top)
    q, t = regress_pose(e_flat, M_top, params, f"head{L}")
    pyr.qs[L], pyr.ts[L] = q, t
    pyr.q_res[L], pyr.t_res[L] = q, t
    emb = EmbeddingLevel(E_top, ad.reshape(M_top, (Hc, Wc, Ce)), L)

    for level in range(L - 1, 0, -1):
        coarse_pose = pyr.pose(level + 1)
        fine1 = fused1[level - 1]
        up_kernel = tuple(arch["upconv_kernels"][level - 1])
        coarse_as_feat_e = FeatureLevel(fused1[level].pm, emb.E,
                                        fused1[level].stride, level + 1)
        coarse_as_feat_m = FeatureLevel(fused1[level].pm, emb.M,
                                        fused1[level].stride, level + 1)
        ce = set_upconv(coarse_as_feat_e, fine1, up_kernel, arch["upconv_k"],
                        _mlp_weights(params, f"upconv_e{level}"), brute=brute)
        cm = set_upconv(coarse_as_feat_m, fine1, up_kernel, arch["upconv_k"],
                        _mlp_weights(params, f"upconv_m{level}"), brute=brute)
        intr_level = intr.scaled(fine1.stride)
        emb, q_res, t_res = refine_level(level, ce, cm, fine1, fused2[level - 1],
                                         coarse_pose, intr_level, params, arch,
                                         coarse_q=pyr.qs[level + 1],
                                         coarse_t=pyr.ts[level + 1])
        q, t = compose_pose(q_res, t_res, pyr.qs[level + 1], pyr.ts[level + 1])
        pyr.qs[level], pyr.ts[level] = q, t
        pyr.q_res[level], pyr.t_res[level] = q_res, t_res

    return pyr


# ---------------------------------------------------------------------------
# parameter construction

def _glorot(rng: XorShift64Star, shape, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, int(np.prod(shape))).reshape(shape)


def _add_mlp(params: dict, rng: XorShift64Star, prefix: str, widths):
    """widths = [in, hidden..., out]; linear layers with zero biases."""
    for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"{prefix}.l{i}.w"] = Tensor(_glorot(rng, (cin, cout), cin, cout),
                                            requires_grad=True)
        params[f"{prefix}.l{i}.b"] = Tensor(np.zeros(cout), requires_grad=True)


def _add_conv(params: dict, rng: XorShift64Star, prefix: str, kh, kw, cin, cout):
    params[f"{prefix}.w"] = Tensor(
        _glorot(rng, (kh, kw, cin, cout), kh * kw * cin, kh * kw * cout),
        requires_grad=True)
    params[f"{prefix}.b"] = Tensor(np.zeros(cout), requires_grad=True)


def build_params(cfg: dict) -> dict:
    """Create every learnable tensor for the configured architecture.

    Initialization is uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out))
    from the seeded xorshift PRNG; quaternion head biases start at the
    identity rotation so the initial pose estimate is near identity.
    """
    arch = cfg["arch"]
    rng = XorShift64Star(cfg["seed"])
    pc = arch["point_channels"]
    ic = arch["image_channels"]
    ce = arch["embed_channels"]
    fh = arch["fusion_hidden"]
    L = len(pc)
    params: dict[str, Tensor] = {}

    c_prev = 3
    for l in range(1, L + 1):
        _add_mlp(params, rng, f"setconv{l}", [3 + 2 * c_prev, pc[l - 1], pc[l - 1]])
        c_prev = pc[l - 1]

    if arch["fusion"]:
        im_prev = arch["image_in_channels"]
        for l in range(1, L + 1):
            _add_conv(params, rng, f"img{l}", 3, 3, im_prev, ic[l - 1])
            im_prev = ic[l - 1]
            _add_conv(params, rng, f"fuse{l}.gate_img", 3, 3, ic[l - 1], fh[l - 1])
            params[f"fuse{l}.gate_pt.w"] = Tensor(
                _glorot(rng, (pc[l - 1], fh[l - 1]), pc[l - 1], fh[l - 1]),
                requires_grad=True)
            params[f"fuse{l}.gate_pt.b"] = Tensor(np.zeros(fh[l - 1]),
                                                  requires_grad=True)
            _add_conv(params, rng, f"fuse{l}.gate_out", 3, 3, fh[l - 1], 1)
            params[f"fuse{l}.proj.w"] = Tensor(
                _glorot(rng, (ic[l - 1], pc[l - 1]), ic[l - 1], pc[l - 1]),
                requires_grad=True)
            params[f"fuse{l}.proj.b"] = Tensor(np.zeros(pc[l - 1]),
                                               requires_grad=True)

    for l in range(1, L + 1):
        d = 3 + 2 * pc[l - 1]
        _add_mlp(params, rng, f"cost{l}.attn", [d, ce, 1])
        _add_mlp(params, rng, f"cost{l}.value", [d, ce, ce])

    _add_mlp(params, rng, f"mask{L}", [ce + pc[L - 1], ce, ce])
    for l in range(1, L):
        _add_mlp(params, rng, f"upconv_e{l}", [3 + ce + pc[l - 1], ce, ce])
        _add_mlp(params, rng, f"upconv_m{l}", [3 + ce + pc[l - 1], ce, ce])
        _add_mlp(params, rng, f"embed{l}", [2 * ce + pc[l - 1], ce, ce])
        _add_mlp(params, rng, f"maskmlp{l}", [2 * ce + pc[l - 1], ce, ce])

    # pose heads start near identity: the refine warp needs a sane coarse
    # pose from step one, so head weights get a strong extra down-scale
    # (Adam's per-parameter step size re-grows them quickly)
    for l in range(1, L + 1):
        params[f"head{l}.q.w"] = Tensor(0.001 * _glorot(rng, (ce, 4), ce, 4),
                                        requires_grad=True)
        params[f"head{l}.q.b"] = Tensor(np.array([1.0, 0.0, 0.0, 0.0]),
                                        requires_grad=True)
        params[f"head{l}.t.w"] = Tensor(0.001 * _glorot(rng, (ce, 3), ce, 3),
                                        requires_grad=True)
        params[f"head{l}.t.b"] = Tensor(np.zeros(3), requires_grad=True)

    params["loss.s_x"] = Tensor(np.float64(cfg["train"]["s_x_init"]),
                                requires_grad=True)
    params["loss.s_q"] = Tensor(np.float64(cfg["train"]["s_q_init"]),
                                requires_grad=True)
    return params
